use lpsr::loss::{perceptual_loss, LossConfig};
use lpsr::network::{AttentionKind, ModelConfig, Network};
use lpsr::ocr::{apply_layout_mask, OcrAdapter, OcrPrediction, PlateLayout, NUM_CLASSES};
use lpsr::pixelops::{pad_and_resize, PadMode};
use lpsr::synthplate::{random_label, sample_corpus};
use lpsr::trainer::{PlateauSchedule, TrainConfig, Verdict};
use lpsr::{ImageTensor, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(c, h, w, |_, _, _| rng.random::<f32>()).unwrap()
}

fn attention() -> impl Strategy<Value = AttentionKind> {
    prop_oneof![
        Just(AttentionKind::Pltfam),
        Just(AttentionKind::Tfam),
        Just(AttentionKind::None)
    ]
}

struct MeanOcr;

impl OcrAdapter for MeanOcr {
    fn predict(&self, img: &ImageTensor, _: Option<PlateLayout>) -> Result<OcrPrediction> {
        let mean = img.data().iter().sum::<f32>() / img.len() as f32;
        let text = if mean > 0.5 { "AAA1111" } else { "AAA1112" };
        Ok(OcrPrediction {
            text: text.into(),
            confidences: vec![1.0; 7],
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn network_preserves_shape_and_bounds(
        c4 in 1usize..5,
        r in 1usize..3,
        num_rcb in 1usize..3,
        units in 1usize..3,
        recon in 1usize..3,
        attention in attention(),
        hq in 1usize..4,
        wq in 1usize..5,
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig {
            channels: 4 * c4,
            num_rcb,
            units_per_rcb: units,
            shuffle_factor: r,
            attention,
            recon_blocks: recon,
            tie_recon_weights: seed % 2 == 0,
        };
        prop_assume!(cfg.validate().is_ok());
        let step = 2 * r * r;
        let (h, w) = (hq * step, wq * step);
        let mut net = Network::new(cfg, seed).unwrap();
        net.params_mut().randomize(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let out = net.forward(&noise(seed, 3, h, w)).unwrap();
        prop_assert_eq!(out.sr.shape(), (3, h, w));
        prop_assert!(out.sr.is_unit_range());
        for m in &out.attention_masks {
            prop_assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn pad_and_resize_is_idempotent(h in 1usize..40, w in 1usize..80, seed in any::<u64>(), edge in any::<bool>()) {
        let mode = if edge { PadMode::Edge } else { PadMode::Zero };
        let once = pad_and_resize(&noise(seed, 3, h, w), 120, 60, mode).unwrap();
        prop_assert_eq!(once.shape(), (3, 60, 120));
        let twice = pad_and_resize(&once, 120, 60, mode).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn loss_is_non_negative_and_monotone_in_alpha(seed in any::<u64>(), n in 1usize..4, a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let hs: Vec<_> = (0..n).map(|i| noise(seed.wrapping_add(i as u64), 3, 12, 12)).collect();
        let ss: Vec<_> = (0..n).map(|i| noise(seed.wrapping_sub(i as u64 + 1), 3, 12, 12)).collect();
        let (lo, hi) = (a.min(b), a.max(b));
        let at = |alpha| perceptual_loss(&hs, &ss, &MeanOcr, &LossConfig { alpha, ..Default::default() }).unwrap();
        let (l, h) = (at(lo), at(hi));
        prop_assert!(l.total >= 0.0);
        prop_assert!(l.d_values.iter().all(|&d| d >= 0.0));
        prop_assert!(l.lev_norm.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(h.total >= l.total);
    }

    #[test]
    fn layout_mask_always_yields_legal_strings(seed in any::<u64>(), mercosur in any::<bool>()) {
        let layout = if mercosur { PlateLayout::Mercosur } else { PlateLayout::Brazilian };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f32> = (0..7 * NUM_CLASSES).map(|_| rng.random_range(-5.0..5.0)).collect();
        prop_assert!(layout.accepts(&apply_layout_mask(&logits, layout)));
    }

    #[test]
    fn random_labels_match_their_layout(seed in any::<u64>(), mercosur in any::<bool>()) {
        let layout = if mercosur { PlateLayout::Mercosur } else { PlateLayout::Brazilian };
        let label = random_label(layout, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(layout.accepts(&label), "{}", label);
    }

    #[test]
    fn lr_trace_non_increasing_and_floored(
        losses in proptest::collection::vec(0.0f64..2.0, 1..80),
        patience in 1usize..4,
        factor in 0.05f64..0.99,
    ) {
        let cfg = TrainConfig {
            plateau_patience: patience,
            plateau_factor: factor,
            early_stop_patience: 1000,
            ..Default::default()
        };
        let mut s = PlateauSchedule::new(&cfg);
        let mut prev = s.lr();
        for &v in &losses {
            let verdict = s.observe(v);
            prop_assert!(verdict != Verdict::Stop);
            prop_assert!(s.lr() <= prev);
            prop_assert!(s.lr() >= cfg.lr_min);
            prev = s.lr();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn corpus_generation_is_reproducible(seed in any::<u64>(), n in 1usize..6, mix in 0.0f64..=1.0) {
        let a = sample_corpus(n, mix, seed).unwrap();
        let b = sample_corpus(n, mix, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for s in &a {
            prop_assert!(s.layout.accepts(&s.label));
        }
    }
}

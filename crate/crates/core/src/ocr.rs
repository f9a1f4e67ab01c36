//! OCR adapter interface, plate layouts, and a small trainable OCR.
//!
//! The toy OCR reads rectified 3x60x120 plates, the same geometry as the
//! restoration network. Each of the seven character slots is cropped to a
//! 24-pixel-wide window and passed through a four-stage conv/ReLU/max-pool
//! trunk and a 128-unit hidden layer into a 36-way head. The seven heads share
//! their weights, so every glyph seen at any position trains all of them.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::PLATE_LEN;
use crate::nn::{Adam, AdamConfig, Conv2d};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::pixelops::ImageTensor;
use crate::synthplate::{slot_center, PlateSample};
use crate::tensor::Tensor;

/// Letters first, then digits; masked argmax ties resolve to the lowest index.
pub const ALPHABET: &[u8; 36] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const NUM_CLASSES: usize = 36;
const LETTERS: std::ops::Range<usize> = 0..26;
const DIGITS: std::ops::Range<usize> = 26..36;

pub const OCR_HEIGHT: usize = 60;
pub const OCR_WIDTH: usize = 120;

pub fn class_index(c: char) -> Option<usize> {
    match c {
        'A'..='Z' => Some(c as usize - 'A' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        _ => None,
    }
}

pub fn class_char(i: usize) -> char {
    ALPHABET[i] as char
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateLayout {
    /// `LLLDDDD`
    Brazilian,
    /// `LLLDLDD`
    Mercosur,
}

impl PlateLayout {
    pub const ALL: [PlateLayout; 2] = [PlateLayout::Brazilian, PlateLayout::Mercosur];

    pub fn pattern(self) -> &'static str {
        match self {
            PlateLayout::Brazilian => "LLLDDDD",
            PlateLayout::Mercosur => "LLLDLDD",
        }
    }

    pub fn is_letter(self, position: usize) -> bool {
        self.pattern().as_bytes()[position] == b'L'
    }

    /// Legal class indices at `position`.
    pub fn allowed(self, position: usize) -> std::ops::Range<usize> {
        if self.is_letter(position) {
            LETTERS
        } else {
            DIGITS
        }
    }

    pub fn accepts(self, label: &str) -> bool {
        label.len() == PLATE_LEN
            && label.chars().enumerate().all(|(i, c)| {
                if self.is_letter(i) {
                    c.is_ascii_uppercase()
                } else {
                    c.is_ascii_digit()
                }
            })
    }

    pub fn check_label(self, label: &str) -> Result<()> {
        if self.accepts(label) {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "label {label:?} does not match the {self} pattern {}",
                self.pattern()
            )))
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PlateLayout::Brazilian => "brazilian",
            PlateLayout::Mercosur => "mercosur",
        }
    }
}

impl std::fmt::Display for PlateLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlateLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "brazilian" => Ok(PlateLayout::Brazilian),
            "mercosur" => Ok(PlateLayout::Mercosur),
            _ => Err(Error::arg(format!("unknown plate layout {s:?}"))),
        }
    }
}

/// Per-position argmax over the legal classes of `layout`.
///
/// `logits` holds `7 * 36` values, position-major.
pub fn apply_layout_mask(logits: &[f32], layout: PlateLayout) -> String {
    assert_eq!(logits.len(), PLATE_LEN * NUM_CLASSES, "7x36 logits expected");
    (0..PLATE_LEN)
        .map(|p| {
            let row = &logits[p * NUM_CLASSES..(p + 1) * NUM_CLASSES];
            class_char(argmax(row, layout.allowed(p)))
        })
        .collect()
}

/// First index of the maximum within `range`.
fn argmax(row: &[f32], range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for i in range {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcrPrediction {
    pub text: String,
    /// Softmax probability of the chosen symbol at each position.
    pub confidences: Vec<f32>,
}

impl OcrPrediction {
    fn from_logits(logits: &[f32], layout: Option<PlateLayout>) -> Self {
        let mut text = String::with_capacity(PLATE_LEN);
        let mut confidences = Vec::with_capacity(PLATE_LEN);
        for (p, row) in logits.chunks_exact(NUM_CLASSES).enumerate() {
            let range = layout.map_or(0..NUM_CLASSES, |l| l.allowed(p));
            let best = argmax(row, range);
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|&v| (v - m).exp()).sum();
            text.push(class_char(best));
            confidences.push(((row[best] - m).exp() / z).clamp(0.0, 1.0));
        }
        Self { text, confidences }
    }
}

/// Anything that reads a 7-character plate string from a 3x60x120 image.
pub trait OcrAdapter: Sync {
    /// With a layout, every position is restricted to its legal symbols.
    fn predict(&self, img: &ImageTensor, layout: Option<PlateLayout>) -> Result<OcrPrediction>;

    fn predict_batch(
        &self,
        imgs: &[&ImageTensor],
        layout: Option<PlateLayout>,
    ) -> Result<Vec<OcrPrediction>> {
        imgs.iter().map(|img| self.predict(img, layout)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OcrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Full-string accuracy over the epoch's training batches, measured
    /// before each update.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OcrRecord {
    kind: String,
    seed: u64,
}

const TRUNK: [usize; 4] = [16, 32, 64, 64];
const HIDDEN: usize = 128;
pub const SLOT_WIDTH: usize = 24;

#[derive(Clone, Debug)]
pub struct ToyOcr {
    seed: u64,
    store: ParamStore,
    convs: Vec<Conv2d>,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl ToyOcr {
    pub const CHECKPOINT_KIND: &'static str = "toy-ocr";

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &cout) in TRUNK.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("ocr.conv{i}"), cin, cout, 3, &mut rng));
            cin = cout;
        }
        let (mut h, mut w) = (OCR_HEIGHT, SLOT_WIDTH);
        for _ in 0..TRUNK.len() {
            h /= 2;
            w /= 2;
        }
        let flat = cin * h * w;
        let fc1 = Conv2d::new(&mut store, "ocr.fc1", flat, HIDDEN, 1, &mut rng);
        let fc2 = Conv2d::new(&mut store, "ocr.fc2", HIDDEN, NUM_CLASSES, 1, &mut rng);
        Self {
            seed,
            store,
            convs,
            fc1,
            fc2,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// `[n * 7, 3, 60, 24]` slot crops (see [`slot_crops`]) to
    /// `[n * 7, 36, 1, 1]` logits, which is `7 * 36` position-major logits
    /// per plate.
    pub fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(x);
        if (c, h, w) != (3, OCR_HEIGHT, SLOT_WIDTH) {
            return Err(Error::shape(format!(
                "OCR slot crops must be 3x{OCR_HEIGHT}x{SLOT_WIDTH}, got {c}x{h}x{w}"
            )));
        }
        let mut v = x;
        for conv in &self.convs {
            v = conv.forward(g, v)?;
            v = g.relu(v);
            v = g.max_pool2(v)?;
        }
        let v = g.flatten(v);
        let v = self.fc1.forward(g, v)?;
        let v = g.relu(v);
        self.fc2.forward(g, v)
    }

    /// Raw `7 * 36` logits per image.
    pub fn logits(&self, imgs: &[&ImageTensor]) -> Result<Vec<Vec<f32>>> {
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let x = g.input(slot_crops(imgs)?);
        let out = self.logits_graph(&mut g, x)?;
        Ok(g.value(out)
            .data()
            .chunks_exact(PLATE_LEN * NUM_CLASSES)
            .map(<[f32]>::to_vec)
            .collect())
    }

    /// Full-string accuracy on labelled samples, with layout masking.
    pub fn accuracy(&self, samples: &[PlateSample]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for chunk in samples.chunks(64) {
            let imgs: Vec<&ImageTensor> = chunk.iter().map(|s| &s.image).collect();
            for (logits, s) in self.logits(&imgs)?.iter().zip(chunk) {
                if apply_layout_mask(logits, s.layout) == s.label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    /// Cross-entropy summed over the 7 heads, Adam, seeded shuffling.
    pub fn train(&mut self, samples: &[PlateSample], cfg: &OcrTrainConfig) -> Result<Vec<OcrEpoch>> {
        if cfg.epochs == 0 {
            return Ok(Vec::new());
        }
        if samples.is_empty() {
            return Err(Error::config("OCR training needs at least one sample"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let mut targets = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let classes: Option<Vec<usize>> = s.label.chars().map(class_index).collect();
            match classes {
                Some(c) if s.layout.accepts(&s.label) => targets.push(c),
                _ => {
                    return Err(Error::Data(format!(
                        "sample {i}: label {:?} is not a legal {} plate",
                        s.label, s.layout
                    )))
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(&self.store, AdamConfig::default());
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut log = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0;
            for batch in order.chunks(cfg.batch_size) {
                let imgs: Vec<&ImageTensor> = batch.iter().map(|&i| &samples[i].image).collect();
                let t: Vec<usize> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
                let grads = {
                    let mut g = Graph::new(&self.store);
                    let x = g.input(slot_crops(&imgs)?);
                    let logits = self.logits_graph(&mut g, x)?;
                    for (row, &i) in g
                        .value(logits)
                        .data()
                        .chunks_exact(PLATE_LEN * NUM_CLASSES)
                        .zip(batch)
                    {
                        if apply_layout_mask(row, samples[i].layout) == samples[i].label {
                            correct += 1;
                        }
                    }
                    let loss = g.cross_entropy_heads(logits, &t, NUM_CLASSES)?;
                    // Mean over crops; times 7 gives the per-plate sum over heads.
                    let value = f64::from(g.value(loss).data()[0]) * PLATE_LEN as f64;
                    if !value.is_finite() {
                        return Err(Error::NonFinite {
                            epoch,
                            batch: 0,
                            detail: format!("OCR cross entropy {value}"),
                        });
                    }
                    loss_sum += value * batch.len() as f64;
                    g.backward(loss)?
                };
                adam.step(&mut self.store, &grads, cfg.lr);
            }
            log.push(OcrEpoch {
                epoch,
                loss: loss_sum / samples.len() as f64,
                accuracy: correct as f64 / samples.len() as f64,
            });
        }
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let record = OcrRecord {
            kind: Self::CHECKPOINT_KIND.into(),
            seed: self.seed,
        };
        save_checkpoint(path, &serde_json::to_string(&record)?, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (json, stored) = load_checkpoint(path)?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let record: OcrRecord = serde_json::from_str(&json).map_err(|e| bad(e.to_string()))?;
        if record.kind != Self::CHECKPOINT_KIND {
            return Err(bad(format!("checkpoint kind {:?} is not an OCR", record.kind)));
        }
        let mut ocr = Self::new(record.seed);
        ocr.store.load_from(&stored).map_err(|e| bad(e.to_string()))?;
        Ok(ocr)
    }
}

/// Cut the seven character windows out of each 3x60x120 plate, centred on
/// zero, as a `[n * 7, 3, 60, 24]` batch ordered plate-major.
pub fn slot_crops(imgs: &[&ImageTensor]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(imgs.len() * PLATE_LEN * 3 * OCR_HEIGHT * SLOT_WIDTH);
    for img in imgs {
        if img.shape() != (3, OCR_HEIGHT, OCR_WIDTH) {
            let (c, h, w) = img.shape();
            return Err(Error::shape(format!(
                "OCR input must be 3x{OCR_HEIGHT}x{OCR_WIDTH}, got {c}x{h}x{w}"
            )));
        }
        for p in 0..PLATE_LEN {
            let x0 = slot_center(p).round() as usize - SLOT_WIDTH / 2;
            for c in 0..3 {
                let plane = img.channel(c);
                for y in 0..OCR_HEIGHT {
                    let row = &plane[y * OCR_WIDTH + x0..y * OCR_WIDTH + x0 + SLOT_WIDTH];
                    data.extend(row.iter().map(|v| v - 0.5));
                }
            }
        }
    }
    Tensor::new([imgs.len() * PLATE_LEN, 3, OCR_HEIGHT, SLOT_WIDTH], data)
}

impl OcrAdapter for ToyOcr {
    fn predict(&self, img: &ImageTensor, layout: Option<PlateLayout>) -> Result<OcrPrediction> {
        Ok(self.predict_batch(&[img], layout)?.remove(0))
    }

    fn predict_batch(
        &self,
        imgs: &[&ImageTensor],
        layout: Option<PlateLayout>,
    ) -> Result<Vec<OcrPrediction>> {
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(64) {
            out.extend(
                self.logits(chunk)?
                    .iter()
                    .map(|l| OcrPrediction::from_logits(l, layout)),
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthplate::render_plate;

    fn logits_with(peaks: &[(usize, usize, f32)]) -> Vec<f32> {
        let mut l = vec![0.0; PLATE_LEN * NUM_CLASSES];
        for &(pos, class, v) in peaks {
            l[pos * NUM_CLASSES + class] = v;
        }
        l
    }

    #[test]
    fn masked_argmax_picks_letter_over_stronger_digit() {
        let b = class_index('B').unwrap();
        let four = class_index('4').unwrap();
        let l = logits_with(&[(0, four, 5.0), (0, b, 2.0)]);
        let text = apply_layout_mask(&l, PlateLayout::Brazilian);
        assert_eq!(&text[..1], "B");
    }

    #[test]
    fn uniform_logits_break_ties_low() {
        let l = vec![0.0; PLATE_LEN * NUM_CLASSES];
        assert_eq!(apply_layout_mask(&l, PlateLayout::Brazilian), "AAA0000");
        assert_eq!(apply_layout_mask(&l, PlateLayout::Mercosur), "AAA0A00");
    }

    #[test]
    fn mercosur_position_four_is_letter() {
        let seven = class_index('7').unwrap();
        let q = class_index('Q').unwrap();
        let l = logits_with(&[(4, seven, 9.0), (4, q, 1.0)]);
        assert_eq!(apply_layout_mask(&l, PlateLayout::Mercosur).as_bytes()[4], b'Q');
        assert_eq!(apply_layout_mask(&l, PlateLayout::Brazilian).as_bytes()[4], b'7');
    }

    #[test]
    fn layouts_validate_labels() {
        assert!(PlateLayout::Brazilian.accepts("ABC1234"));
        assert!(!PlateLayout::Brazilian.accepts("ABC1D23"));
        assert!(PlateLayout::Mercosur.accepts("ABC1D23"));
        assert!(!PlateLayout::Mercosur.accepts("ABC12345"));
        assert!(!PlateLayout::Mercosur.accepts("abc1d23"));
        assert_eq!("Mercosur".parse::<PlateLayout>().unwrap(), PlateLayout::Mercosur);
        assert!("square".parse::<PlateLayout>().is_err());
    }

    #[test]
    fn untrained_prediction_is_legal_and_deterministic() {
        let ocr = ToyOcr::new(3);
        assert!(ocr.num_params() <= 2_000_000);
        let s = render_plate("ABC1D23", PlateLayout::Mercosur, 5).unwrap();
        let a = ocr.predict(&s.image, None).unwrap();
        let b = ocr.predict(&s.image, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text.len(), 7);
        assert!(a.text.bytes().all(|c| ALPHABET.contains(&c)));
        assert!(a.confidences.iter().all(|c| (0.0..=1.0).contains(c)));
        let masked = ocr.predict(&s.image, Some(PlateLayout::Mercosur)).unwrap();
        assert!(PlateLayout::Mercosur.accepts(&masked.text));
    }

    #[test]
    fn wrong_geometry_is_rejected() {
        let ocr = ToyOcr::new(0);
        let img = ImageTensor::zeros(3, 30, 60).unwrap();
        assert!(matches!(ocr.predict(&img, None), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let mut ocr = ToyOcr::new(1);
        let before = ocr.checksum();
        let s = vec![render_plate("ABC1234", PlateLayout::Brazilian, 0).unwrap()];
        let log = ocr
            .train(
                &s,
                &OcrTrainConfig {
                    epochs: 0,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(log.is_empty());
        assert_eq!(ocr.checksum(), before);
    }

    #[test]
    fn illegal_label_names_sample() {
        let mut ocr = ToyOcr::new(1);
        let mut s = vec![
            render_plate("ABC1234", PlateLayout::Brazilian, 0).unwrap(),
            render_plate("ABC1234", PlateLayout::Brazilian, 1).unwrap(),
        ];
        s[1].label = "AB?1234".into();
        let err = ocr.train(&s, &OcrTrainConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("sample 1")), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ocr = ToyOcr::new(9);
        let path = dir.path().join("ocr.ckpt");
        ocr.save(&path).unwrap();
        assert_eq!(ToyOcr::load(&path).unwrap().checksum(), ocr.checksum());
    }
}

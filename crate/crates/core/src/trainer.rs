//! SR training loop: Adam on the perceptual loss, reduce-on-plateau learning
//! rate and early stopping on validation loss.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::degrade::{derive_seed, LoadedPair};
use crate::error::{Error, Result};
use crate::loss::{combine, Details, LossBreakdown, LossConfig};
use crate::metrics::{mse, ssim, PLATE_LEN};
use crate::network::Network;
use crate::nn::{Adam, AdamConfig};
use crate::ocr::OcrAdapter;
use crate::params::{Gradients, ParamStore};
use crate::pixelops::ImageTensor;
use crate::tensor::Tensor;

/// A validation loss counts as an improvement only if it beats the best so
/// far by more than this.
pub const IMPROVEMENT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub lr_min: f64,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            plateau_factor: 0.8,
            lr_min: 1e-7,
            early_stop_patience: 5,
            plateau_patience: 1,
            batch_size: 16,
            max_epochs: 50,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config(format!(
                "plateau_factor must be in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr0 && self.lr0.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < lr_min < lr0, got lr_min {} and lr0 {}",
                self.lr_min, self.lr0
            )));
        }
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return Err(Error::config("patience values must be at least 1"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Plateau,
    Stop,
}

/// Reduce-on-plateau plus early-stopping state machine.
///
/// [`PlateauSchedule::lr`] is the rate for the next epoch. Each call to
/// [`PlateauSchedule::observe`] feeds one validation loss.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    lr_min: f64,
    plateau_patience: usize,
    stop_patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr0,
            factor: cfg.plateau_factor,
            lr_min: cfg.lr_min,
            plateau_patience: cfg.plateau_patience,
            stop_patience: cfg.early_stop_patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        if val_loss < self.best - IMPROVEMENT_TOL {
            self.best = val_loss;
            self.bad_epochs = 0;
            return Verdict::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.stop_patience {
            return Verdict::Stop;
        }
        if self.bad_epochs.is_multiple_of(self.plateau_patience) {
            self.lr = (self.lr * self.factor).max(self.lr_min);
        }
        Verdict::Plateau
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub improved: bool,
    /// SHA-256 prefix of the epoch's sample order.
    pub order_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Kept apart from `epochs` so the CSV stays reproducible.
    pub wall_seconds: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_reason: StopReason,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }
}

/// An LR input and its HR target.
#[derive(Clone, Debug)]
pub struct SrPair {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
}

impl From<&LoadedPair> for SrPair {
    fn from(p: &LoadedPair) -> Self {
        Self {
            lr: p.lr.clone(),
            hr: p.hr.clone(),
        }
    }
}

/// Pairs with the OCR reading of each HR image cached.
struct Prepared<'a> {
    pairs: &'a [SrPair],
    hr_text: Vec<String>,
}

impl<'a> Prepared<'a> {
    fn new(pairs: &'a [SrPair], ocr: &dyn OcrAdapter) -> Result<Self> {
        let hr_text = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| ocr_text(ocr, &p.hr, i))
            .collect::<Result<_>>()?;
        Ok(Self { pairs, hr_text })
    }

    fn details(&self, i: usize, sr: &ImageTensor, ocr: &dyn OcrAdapter) -> Result<Details> {
        let text = ocr_text(ocr, sr, i)?;
        Ok(Details::from_parts(&self.hr_text[i], &text, ssim(sr, &self.pairs[i].hr)?, PLATE_LEN))
    }

    fn loss(&self, network: &Network, ocr: &dyn OcrAdapter, cfg: &LossConfig) -> Result<LossBreakdown> {
        let mut mses = Vec::with_capacity(self.pairs.len());
        let mut ds = Vec::with_capacity(self.pairs.len());
        for (i, p) in self.pairs.iter().enumerate() {
            let sr = network.enhance(&p.lr)?;
            ds.push(self.details(i, &sr, ocr)?);
            mses.push(mse(&sr, &p.hr)?);
        }
        Ok(combine(&mses, &ds, cfg))
    }
}

fn ocr_text(ocr: &dyn OcrAdapter, img: &ImageTensor, sample: usize) -> Result<String> {
    ocr.predict(img, None).map(|p| p.text).map_err(|e| Error::Ocr {
        sample: sample.to_string(),
        message: e.to_string(),
    })
}

/// Mean perceptual loss of `network` over `pairs`, treated as one batch.
pub fn evaluate_epoch(network: &Network, pairs: &[SrPair], ocr: &dyn OcrAdapter, cfg: &LossConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    Ok(Prepared::new(pairs, ocr)?.loss(network, ocr, cfg)?.total)
}

/// Seeded sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
    order
}

fn order_digest(order: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in order {
        h.update((i as u64).to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradients of one batch. Per sample the unit-weight MSE gradient `g_i` is
/// collected both plainly and scaled by `D_i`, so the batch alpha (which may
/// depend on every `D_i`) can be applied afterwards.
fn batch_step(
    network: &Network,
    data: &Prepared,
    batch: &[usize],
    ocr: &dyn OcrAdapter,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let mut plain = Gradients::for_store(network.params());
    let mut weighted = Gradients::for_store(network.params());
    let mut mses = Vec::with_capacity(batch.len());
    let mut ds = Vec::with_capacity(batch.len());
    for &i in batch {
        let pair = &data.pairs[i];
        let mut g = Graph::new(network.params());
        let x = g.input(Tensor::from_image(&pair.lr));
        let target = g.input(Tensor::from_image(&pair.hr));
        let sr = network.forward_graph(&mut g, x)?.sr;
        let sr_img = g.value(sr).image(0)?;
        let d = data.details(i, &sr_img, ocr)?;
        let term = g.weighted_mse(sr, target, 1.0)?;
        mses.push(mse(&sr_img, &pair.hr)?);
        let grads = g.backward(term)?;
        let mut scaled = grads.clone();
        scaled.scale(d.value() as f32);
        plain.merge(grads);
        weighted.merge(scaled);
        ds.push(d);
    }
    let breakdown = combine(&mses, &ds, cfg);
    weighted.scale(breakdown.alpha as f32);
    plain.merge(weighted);
    plain.scale(1.0 / batch.len() as f32);
    Ok((breakdown, plain))
}

fn non_finite(epoch: usize, batch: usize, b: &LossBreakdown, what: &str) -> Error {
    Error::NonFinite {
        epoch,
        batch,
        detail: format!(
            "{what}: total {} mse {} alpha {} D {:?}",
            b.total, b.mse, b.alpha, b.d_values
        ),
    }
}

/// Train `network` and return it holding the parameters of the epoch with
/// the lowest validation loss. `on_epoch` sees each record as it completes.
pub fn train(
    mut network: Network,
    train_pairs: &[SrPair],
    val_pairs: &[SrPair],
    ocr: &dyn OcrAdapter,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::config(format!(
            "training needs non-empty sets, got {} train and {} val pairs",
            train_pairs.len(),
            val_pairs.len()
        )));
    }
    let train_data = Prepared::new(train_pairs, ocr)?;
    let val_data = Prepared::new(val_pairs, ocr)?;
    let mut adam = Adam::new(network.params(), cfg.adam);
    let mut sched = PlateauSchedule::new(cfg);
    let mut best: Option<(usize, ParamStore)> = None;
    let mut epochs = Vec::new();
    let mut wall = Vec::new();
    let mut reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let lr = sched.lr();
        let order = epoch_order(train_pairs.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (breakdown, grads) = batch_step(&network, &train_data, batch, ocr, &cfg.loss)?;
            if !breakdown.total.is_finite() {
                return Err(non_finite(epoch, b + 1, &breakdown, "loss"));
            }
            if !grads.is_finite() {
                return Err(non_finite(epoch, b + 1, &breakdown, "gradient"));
            }
            loss_sum += breakdown.total * batch.len() as f64;
            adam.step(network.params_mut(), &grads, lr);
        }
        let val = val_data.loss(&network, ocr, &cfg.loss)?;
        if !val.total.is_finite() {
            return Err(non_finite(epoch, 0, &val, "validation loss"));
        }
        let verdict = sched.observe(val.total);
        if verdict == Verdict::Improved {
            best = Some((epoch, network.params().clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_pairs.len() as f64,
            val_loss: val.total,
            lr,
            improved: verdict == Verdict::Improved,
            order_digest: order_digest(&order),
        };
        on_epoch(&record);
        epochs.push(record);
        wall.push(start.elapsed().as_secs_f64());
        if verdict == Verdict::Stop {
            reason = StopReason::EarlyStop;
            break;
        }
    }

    let (best_epoch, params) = best.expect("first finite epoch always improves");
    network.params_mut().load_from(&params)?;
    Ok((
        network,
        TrainLog {
            epochs,
            wall_seconds: wall,
            best_epoch,
            best_val_loss: sched.best(),
            stopped_reason: reason,
        },
    ))
}

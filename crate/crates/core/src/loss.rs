//! OCR-aware perceptual loss.
//!
//! For HR `H_i` and restored `S_i`:
//!
//! ```text
//! PL   = (1/n) sum_i mse(H_i, S_i) * (1 + alpha * D_i)
//! D_i  = lev(ocr(H_i), ocr(S_i)) / 7 + (1 - ssim(H_i, S_i))
//! ```
//!
//! `D_i` is a per-sample weight with no gradient: the gradient of `PL` with
//! respect to `S_i` is `(1 + alpha * D_i) / n` times the MSE gradient.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{levenshtein, mse, ssim, PLATE_LEN};
use crate::ocr::OcrAdapter;
use crate::pixelops::ImageTensor;

/// Floor on `mean(D)` when auto-balancing alpha.
pub const AUTO_ALPHA_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub plate_len: usize,
    /// Replace `alpha` per batch with `mean(sq_err) / max(mean(D), eps)`.
    pub auto_balance: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            plate_len: PLATE_LEN,
            auto_balance: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.plate_len != PLATE_LEN {
            return Err(Error::config(format!(
                "plate_len must be {PLATE_LEN}, got {}",
                self.plate_len
            )));
        }
        Ok(())
    }

    /// Alpha for one batch given its per-sample MSEs and details terms.
    pub fn alpha_for(&self, mses: &[f64], d_values: &[f64]) -> f64 {
        if !self.auto_balance || d_values.is_empty() {
            return self.alpha;
        }
        let n = d_values.len() as f64;
        let mean_sq = mses.iter().sum::<f64>() / n;
        let mean_d = d_values.iter().sum::<f64>() / n;
        mean_sq / mean_d.max(AUTO_ALPHA_EPS)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Plain mean of the per-sample MSEs.
    pub mse: f64,
    pub alpha: f64,
    pub d_values: Vec<f64>,
    pub lev_norm: Vec<f64>,
    pub ssim_term: Vec<f64>,
}

/// The two parts of `D` for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Details {
    /// `lev / 7`
    pub lev_norm: f64,
    /// `1 - ssim`
    pub ssim_term: f64,
}

impl Details {
    pub fn from_parts(h_text: &str, s_text: &str, ssim_value: f64, plate_len: usize) -> Self {
        Self {
            lev_norm: levenshtein(h_text, s_text) as f64 / plate_len as f64,
            ssim_term: 1.0 - ssim_value,
        }
    }

    pub fn value(&self) -> f64 {
        self.lev_norm + self.ssim_term
    }
}

fn ocr_text(ocr: &dyn OcrAdapter, img: &ImageTensor, sample: &str) -> Result<String> {
    ocr.predict(img, None)
        .map(|p| p.text)
        .map_err(|e| Error::Ocr {
            sample: sample.to_string(),
            message: e.to_string(),
        })
}

/// `lev(ocr(h), ocr(s)) / 7 + (1 - ssim(h, s))`.
pub fn details_term(h: &ImageTensor, s: &ImageTensor, ocr: &dyn OcrAdapter) -> Result<f64> {
    details(h, s, ocr, "0").map(|d| d.value())
}

fn details(h: &ImageTensor, s: &ImageTensor, ocr: &dyn OcrAdapter, sample: &str) -> Result<Details> {
    if !h.same_shape(s) {
        return Err(Error::arg(format!(
            "sample {sample}: HR {:?} and SR {:?} differ in shape",
            h.shape(),
            s.shape()
        )));
    }
    let ht = ocr_text(ocr, h, sample)?;
    let st = ocr_text(ocr, s, sample)?;
    Ok(Details::from_parts(&ht, &st, ssim(s, h)?, PLATE_LEN))
}

/// Combine precomputed per-sample MSEs and details terms.
pub fn combine(mses: &[f64], details: &[Details], cfg: &LossConfig) -> LossBreakdown {
    let d_values: Vec<f64> = details.iter().map(Details::value).collect();
    let alpha = cfg.alpha_for(mses, &d_values);
    let n = mses.len().max(1) as f64;
    let total = mses
        .iter()
        .zip(&d_values)
        .map(|(m, d)| m * (1.0 + alpha * d))
        .sum::<f64>()
        / n;
    LossBreakdown {
        total,
        mse: mses.iter().sum::<f64>() / n,
        alpha,
        d_values,
        lev_norm: details.iter().map(|d| d.lev_norm).collect(),
        ssim_term: details.iter().map(|d| d.ssim_term).collect(),
    }
}

/// Evaluate the loss over a batch (values only, in f64).
pub fn perceptual_loss(
    batch_h: &[ImageTensor],
    batch_s: &[ImageTensor],
    ocr: &dyn OcrAdapter,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if batch_h.is_empty() || batch_h.len() != batch_s.len() {
        return Err(Error::arg(format!(
            "loss needs equal non-empty batches, got {} HR and {} SR",
            batch_h.len(),
            batch_s.len()
        )));
    }
    let mut mses = Vec::with_capacity(batch_h.len());
    let mut ds = Vec::with_capacity(batch_h.len());
    for (i, (h, s)) in batch_h.iter().zip(batch_s).enumerate() {
        ds.push(details(h, s, ocr, &i.to_string())?);
        mses.push(mse(s, h)?);
    }
    Ok(combine(&mses, &ds, cfg))
}

/// Record `weight * mse(s, h)` for one sample, with
/// `weight = (1 + alpha * d) / n`; summing these over a batch gives the
/// differentiable loss.
pub fn weighted_term(g: &mut Graph, s: Var, h: Var, alpha: f64, d: f64, n: usize) -> Result<Var> {
    let weight = (1.0 + alpha * d) / n as f64;
    g.weighted_mse(s, h, weight as f32)
}

/// Closed-form gradient of the loss with respect to `s` for one sample.
pub fn analytic_grad(h: &ImageTensor, s: &ImageTensor, alpha: f64, d: f64, n: usize) -> Vec<f64> {
    let scale = (1.0 + alpha * d) * 2.0 / (s.len() as f64 * n as f64);
    s.data()
        .iter()
        .zip(h.data())
        .map(|(&sv, &hv)| scale * (f64::from(sv) - f64::from(hv)))
        .collect()
}

//! SSIM-targeted degradation and train/val/test subset materialisation.
//!
//! An LR image is built by repeatedly adding Gaussian noise to its HR source
//! until the SSIM against the HR lands in a half-open interval `(lo, hi]`.
//! Every intermediate state is clipped and quantised to the 8-bit grid, so the
//! SSIM recorded in the manifest is exactly what the stored PNG reproduces.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ssim, SsimReference};
use crate::ocr::PlateLayout;
use crate::pixelops::ImageTensor;
use crate::synthplate::{gaussian_blur, PlateSample};

pub const MANIFEST_NAME: &str = "pairs.csv";

/// Half-open SSIM range `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SsimInterval {
    lo: f64,
    hi: f64,
}

impl SsimInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::arg(format!(
                "SSIM interval needs 0 <= lo < hi <= 1, got ({lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, s: f64) -> bool {
        self.lo < s && s <= self.hi
    }

    /// Filesystem-friendly name, e.g. `ssim_0.25_0.50`.
    pub fn dir_name(&self) -> String {
        format!("ssim_{:.2}_{:.2}", self.lo, self.hi)
    }

    /// The four evaluation intervals, easiest last.
    pub fn standard() -> [SsimInterval; 4] {
        [(0.0, 0.10), (0.10, 0.25), (0.25, 0.50), (0.50, 0.75)].map(|(lo, hi)| Self { lo, hi })
    }

    /// Parse a comma-separated list such as `0:0.10,0.10:0.25`.
    pub fn parse_list(s: &str) -> Result<Vec<SsimInterval>> {
        let list: Vec<SsimInterval> = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(Error::arg("no SSIM intervals given"));
        }
        Ok(list)
    }
}

impl fmt::Display for SsimInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.2}, {:.2}]", self.lo, self.hi)
    }
}

impl FromStr for SsimInterval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::arg(format!("interval {s:?} is not lo:hi")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::arg(format!("interval {s:?}: {e}")))
        };
        Self::new(num(lo)?, num(hi)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub max_iter: usize,
    /// Gaussian blur applied once before the noise loop; 0 disables it.
    pub blur_sigma: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            sigma_lo: 0.01,
            sigma_hi: 0.04,
            max_iter: 1000,
            blur_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradedPair {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub achieved_ssim: f64,
    pub interval: SsimInterval,
    pub seed: u64,
    /// Noise steps drawn, including discarded overshoots.
    pub iterations_used: usize,
}

/// Add noise until `ssim(lr, hr)` lands in `interval`.
///
/// A step that drops below `lo` is discarded and the sigma range halved.
pub fn degrade_to_interval(
    hr: &ImageTensor,
    interval: SsimInterval,
    seed: u64,
    cfg: &DegradeConfig,
) -> Result<DegradedPair> {
    if !hr.is_unit_range() {
        return Err(Error::arg("HR image has values outside [0, 1]"));
    }
    if !(0.0 < cfg.sigma_lo && cfg.sigma_lo <= cfg.sigma_hi) {
        return Err(Error::config(format!(
            "sigma range ({}, {}) is not positive and ordered",
            cfg.sigma_lo, cfg.sigma_hi
        )));
    }
    let reference = SsimReference::new(hr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lr = hr.clone();
    if cfg.blur_sigma > 0.0 {
        lr = gaussian_blur(&lr, cfg.blur_sigma as f32);
        lr.clamp_unit();
        lr.quantize_u8();
    }
    let mut current = reference.score(&lr)?;
    let (mut s_lo, mut s_hi) = (cfg.sigma_lo, cfg.sigma_hi);
    let mut iterations = 0;
    let mut candidate = lr.clone();
    while !interval.contains(current) {
        if iterations == cfg.max_iter {
            return Err(Error::Degradation {
                lo: interval.lo,
                hi: interval.hi,
                iterations,
                best_ssim: current,
            });
        }
        iterations += 1;
        let sigma = if s_hi > s_lo { rng.random_range(s_lo..s_hi) } else { s_lo };
        for (c, &v) in candidate.data_mut().iter_mut().zip(lr.data()) {
            let n: f64 = StandardNormal.sample(&mut rng);
            *c = v + (sigma * n) as f32;
        }
        candidate.clamp_unit();
        candidate.quantize_u8();
        let s = reference.score(&candidate)?;
        if s <= interval.lo {
            s_lo /= 2.0;
            s_hi /= 2.0;
            candidate.data_mut().copy_from_slice(lr.data());
        } else {
            std::mem::swap(&mut lr, &mut candidate);
            current = s;
        }
    }
    Ok(DegradedPair {
        lr,
        hr: hr.clone(),
        achieved_ssim: current,
        interval,
        seed,
        iterations_used: iterations,
    })
}

/// SplitMix64 finaliser folded over `parts`, giving each image and interval
/// its own RNG stream independent of processing order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::arg(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let all = [train, val, test];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + val + test) - 1.0).abs() > 1e-6 {
            return Err(Error::arg(format!(
                "split fractions must be in [0, 1] and sum to 1, got {train},{val},{test}"
            )));
        }
        Ok(Self { train, val, test })
    }
}

impl FromStr for SplitFractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::arg(format!("split {s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::arg(format!("split {s:?} needs three fractions"))),
        }
    }
}

/// Assign each distinct label to a split; sizes are rounded down for train
/// and val, with the remainder going to test.
pub fn split_labels(labels: &[&str], fractions: SplitFractions, seed: u64) -> BTreeMap<String, Split> {
    let mut distinct: Vec<&str> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5350_4c49]));
    distinct.shuffle(&mut rng);
    let n = distinct.len();
    let n_train = (n as f64 * fractions.train + 1e-9).floor() as usize;
    let n_val = ((n as f64 * fractions.val + 1e-9).floor() as usize).min(n - n_train);
    distinct
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (l.to_string(), split)
        })
        .collect()
}

/// One manifest row: a degraded pair or a failed attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub interval_lo: f64,
    pub interval_hi: f64,
    pub split: Split,
    pub index: usize,
    pub label: String,
    pub layout: PlateLayout,
    pub hr_file: String,
    pub lr_file: String,
    pub achieved_ssim: f64,
    pub seed: u64,
    pub iterations_used: usize,
    pub status: PairStatus,
    pub error: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStatus {
    Ok,
    Failed,
}

impl PairRecord {
    pub fn interval(&self) -> SsimInterval {
        SsimInterval {
            lo: self.interval_lo,
            hi: self.interval_hi,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == PairStatus::Ok
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }

    /// Distinct intervals in first-seen order.
    pub fn intervals(&self) -> Vec<SsimInterval> {
        let mut out: Vec<SsimInterval> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.interval()) {
                out.push(r.interval());
            }
        }
        out
    }

    /// Successful pairs of one split, optionally restricted to one interval
    /// (`None` is the union of all intervals).
    pub fn select(&self, split: Split, interval: Option<SsimInterval>) -> Vec<&PairRecord> {
        self.records
            .iter()
            .filter(|r| r.is_ok() && r.split == split && interval.is_none_or(|i| r.interval() == i))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<Result<Vec<PairRecord>, _>>()?;
        Ok(Self { records })
    }
}

/// A manifest together with the directory it lives in.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// An LR/HR pair loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub record: PairRecord,
    pub lr: ImageTensor,
    pub hr: ImageTensor,
}

impl Dataset {
    /// Open a dataset directory or its `pairs.csv`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (root, manifest) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_NAME))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        Ok(Self {
            root,
            manifest: DatasetManifest::read(manifest)?,
        })
    }

    pub fn load(&self, records: &[&PairRecord]) -> Result<Vec<LoadedPair>> {
        records
            .iter()
            .map(|r| {
                Ok(LoadedPair {
                    record: (*r).clone(),
                    lr: ImageTensor::load_png(self.root.join(&r.lr_file))?,
                    hr: ImageTensor::load_png(self.root.join(&r.hr_file))?,
                })
            })
            .collect()
    }

    /// Reload every successful pair and recompute its SSIM from the PNGs.
    /// Returns `(records checked, records whose SSIM left the interval or
    /// changed)`.
    pub fn verify(&self) -> Result<(usize, usize)> {
        let mut checked = 0;
        let mut bad = 0;
        for r in self.manifest.records.iter().filter(|r| r.is_ok()) {
            let pair = &self.load(&[r])?[0];
            let s = ssim(&pair.lr, &pair.hr)?;
            checked += 1;
            if !r.interval().contains(s) || s != r.achieved_ssim {
                bad += 1;
            }
        }
        Ok((checked, bad))
    }
}

/// In-memory result of [`build_subsets`].
#[derive(Clone, Debug)]
pub struct BuiltSubsets {
    pub manifest: DatasetManifest,
    /// Aligned with `manifest.records`; `None` for failed rows.
    pub pairs: Vec<Option<DegradedPair>>,
}

impl BuiltSubsets {
    /// Write `hr/`, one LR directory per interval, and `pairs.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("hr"))?;
        let mut hr_written = std::collections::HashSet::new();
        for (rec, pair) in self.manifest.records.iter().zip(&self.pairs) {
            let Some(pair) = pair else { continue };
            if hr_written.insert(rec.hr_file.clone()) {
                pair.hr.save_png(dir.join(&rec.hr_file))?;
            }
            let lr_path = dir.join(&rec.lr_file);
            if let Some(parent) = lr_path.parent() {
                fs::create_dir_all(parent)?;
            }
            pair.lr.save_png(lr_path)?;
        }
        self.manifest.write(dir.join(MANIFEST_NAME))?;
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest: self.manifest.clone(),
        })
    }
}

/// Degrade every corpus plate into every interval and assign label-disjoint
/// splits. Failed degradations are recorded, not fatal.
pub fn build_subsets(
    corpus: &[PlateSample],
    intervals: &[SsimInterval],
    fractions: SplitFractions,
    seed: u64,
    cfg: &DegradeConfig,
) -> Result<BuiltSubsets> {
    if corpus.is_empty() {
        return Err(Error::arg("corpus is empty"));
    }
    if intervals.is_empty() {
        return Err(Error::arg("no SSIM intervals given"));
    }
    let labels: Vec<&str> = corpus.iter().map(|s| s.label.as_str()).collect();
    let splits = split_labels(&labels, fractions, seed);
    let mut records = Vec::with_capacity(corpus.len() * intervals.len());
    let mut pairs = Vec::with_capacity(records.capacity());
    for (k, interval) in intervals.iter().enumerate() {
        for (i, sample) in corpus.iter().enumerate() {
            let pair_seed = derive_seed(seed, &[i as u64, k as u64]);
            let mut rec = PairRecord {
                interval_lo: interval.lo,
                interval_hi: interval.hi,
                split: splits[&sample.label],
                index: i,
                label: sample.label.clone(),
                layout: sample.layout,
                hr_file: format!("hr/plate_{i:05}.png"),
                lr_file: format!("{}/plate_{i:05}.png", interval.dir_name()),
                achieved_ssim: 0.0,
                seed: pair_seed,
                iterations_used: 0,
                status: PairStatus::Ok,
                error: String::new(),
            };
            match degrade_to_interval(&sample.image, *interval, pair_seed, cfg) {
                Ok(pair) => {
                    rec.achieved_ssim = pair.achieved_ssim;
                    rec.iterations_used = pair.iterations_used;
                    pairs.push(Some(pair));
                }
                Err(e) => {
                    if let Error::Degradation {
                        iterations,
                        best_ssim,
                        ..
                    } = &e
                    {
                        rec.iterations_used = *iterations;
                        rec.achieved_ssim = *best_ssim;
                    }
                    rec.status = PairStatus::Failed;
                    rec.error = e.to_string();
                    pairs.push(None);
                }
            }
            records.push(rec);
        }
    }
    Ok(BuiltSubsets {
        manifest: DatasetManifest { records },
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthplate::{render_plate, sample_corpus};

    fn plate() -> ImageTensor {
        render_plate("ABC1234", PlateLayout::Brazilian, 3).unwrap().image
    }

    #[test]
    fn interval_parsing_and_validation() {
        let v = SsimInterval::parse_list("0:0.10,0.10:0.25").unwrap();
        assert_eq!(v, vec![SsimInterval::new(0.0, 0.1).unwrap(), SsimInterval::new(0.1, 0.25).unwrap()]);
        assert!(SsimInterval::new(0.5, 0.5).is_err());
        assert!(SsimInterval::new(-0.1, 0.5).is_err());
        assert!(SsimInterval::new(0.2, 1.1).is_err());
        assert!("0.3".parse::<SsimInterval>().is_err());
        let i = SsimInterval::new(0.25, 0.5).unwrap();
        assert!(!i.contains(0.25) && i.contains(0.5) && i.contains(0.3));
        assert_eq!(i.dir_name(), "ssim_0.25_0.50");
    }

    #[test]
    fn identity_already_in_interval() {
        let hr = plate();
        let p = degrade_to_interval(&hr, SsimInterval::new(0.99, 1.0).unwrap(), 0, &DegradeConfig::default())
            .unwrap();
        assert_eq!(p.iterations_used, 0);
        assert_eq!(p.achieved_ssim, 1.0);
        assert_eq!(p.lr, hr);
    }

    #[test]
    fn lands_in_interval_deterministically() {
        let hr = plate();
        let iv = SsimInterval::new(0.5, 0.75).unwrap();
        let a = degrade_to_interval(&hr, iv, 42, &DegradeConfig::default()).unwrap();
        assert!(iv.contains(a.achieved_ssim));
        assert!(a.iterations_used >= 1);
        assert_eq!(ssim(&a.lr, &hr).unwrap(), a.achieved_ssim);
        assert!(a.lr.is_unit_range());
        let b = degrade_to_interval(&hr, iv, 42, &DegradeConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exhausted_budget_reports_best() {
        let hr = plate();
        let cfg = DegradeConfig {
            max_iter: 2,
            ..Default::default()
        };
        let err = degrade_to_interval(&hr, SsimInterval::new(0.0, 0.1).unwrap(), 1, &cfg).unwrap_err();
        match err {
            Error::Degradation {
                iterations, best_ssim, ..
            } => {
                assert_eq!(iterations, 2);
                assert!(best_ssim > 0.1 && best_ssim < 1.0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn derive_seed_distinguishes_parts() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(5, &[3, 4]), derive_seed(5, &[3, 4]));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let corpus = sample_corpus(20, 0.5, 9).unwrap();
        let iv = [SsimInterval::new(0.5, 0.75).unwrap(), SsimInterval::new(0.25, 0.5).unwrap()];
        let built = build_subsets(
            &corpus,
            &iv,
            SplitFractions::new(0.5, 0.25, 0.25).unwrap(),
            4,
            &DegradeConfig::default(),
        )
        .unwrap();
        let m = &built.manifest;
        assert_eq!(m.failures(), 0);
        for i in iv {
            assert_eq!(m.select(Split::Train, Some(i)).len(), 10);
            assert_eq!(m.select(Split::Val, Some(i)).len(), 5);
            assert_eq!(m.select(Split::Test, Some(i)).len(), 5);
        }
        assert_eq!(m.select(Split::Test, None).len(), 10);
        let train: std::collections::HashSet<_> =
            m.select(Split::Train, None).iter().map(|r| r.label.clone()).collect();
        assert!(m.select(Split::Test, None).iter().all(|r| !train.contains(&r.label)));

        let dir = tempfile::tempdir().unwrap();
        let ds = built.write(dir.path()).unwrap();
        assert_eq!(ds.verify().unwrap(), (40, 0));
        let reopened = Dataset::open(dir.path()).unwrap();
        assert_eq!(reopened.manifest, built.manifest);
    }

    #[test]
    fn fractions_validated() {
        assert!(SplitFractions::new(0.5, 0.5, 0.5).is_err());
        assert!("0.5,0.25,0.25".parse::<SplitFractions>().is_ok());
        assert!("0.5,0.5".parse::<SplitFractions>().is_err());
    }
}

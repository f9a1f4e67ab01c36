//! Evaluation of an SR model against the no-SR baseline, and the report
//! writer (recognition/quality tables and LR | SR | HR strips).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{Dataset, PairRecord, Split, SsimInterval};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, RecognitionTally};
use crate::network::SrModel;
use crate::ocr::{OcrAdapter, PlateLayout};
use crate::pixelops::ImageTensor;

pub const RECOGNITION_CSV: &str = "recognition.csv";
pub const QUALITY_CSV: &str = "quality.csv";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const REPORT_MD: &str = "report.md";
pub const STRIP_DIR: &str = "strips";
/// White columns between the panels of a strip.
pub const STRIP_GUTTER: usize = 4;

/// Non-finite floats as the strings `inf`, `-inf` and `nan`, since JSON
/// has no spelling for them.
mod float_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string().to_lowercase())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// OCR applied to the degraded input directly.
    NoSr,
    Sr,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::NoSr, Method::Sr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NoSr => "no_sr",
            Method::Sr => "sr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    All,
    Ge6,
    Ge5,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::All, Tier::Ge6, Tier::Ge5];

    pub fn pct(self, t: &RecognitionTally) -> f64 {
        match self {
            Tier::All => t.all_pct(),
            Tier::Ge6 => t.ge6_pct(),
            Tier::Ge5 => t.ge5_pct(),
        }
    }

    fn heading(self) -> &'static str {
        match self {
            Tier::All => "All",
            Tier::Ge6 => ">=6",
            Tier::Ge5 => ">=5",
        }
    }
}

/// Per-plate outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub interval: String,
    pub index: usize,
    pub label: String,
    pub layout: PlateLayout,
    pub lr_file: String,
    pub hr_file: String,
    pub achieved_ssim: f64,
    pub pred_lr: String,
    pub pred_sr: String,
    #[serde(with = "float_text")]
    pub psnr_lr: f64,
    pub ssim_lr: f64,
    #[serde(with = "float_text")]
    pub psnr_sr: f64,
    pub ssim_sr: f64,
}

/// Aggregates over one (method, interval, layout) cell; `None` means all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub method: Method,
    pub interval: Option<SsimInterval>,
    pub layout: Option<PlateLayout>,
    pub tally: RecognitionTally,
    /// Mean over finite values only.
    #[serde(with = "float_text")]
    pub mean_psnr_db: f64,
    pub psnr_inf_count: usize,
    #[serde(with = "float_text")]
    pub mean_ssim: f64,
}

impl SubsetSummary {
    pub fn subset_name(&self) -> String {
        self.interval.map_or_else(|| "all".to_string(), |i| i.to_string())
    }

    pub fn layout_name(&self) -> &'static str {
        self.layout.map_or("all", PlateLayout::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset_root: PathBuf,
    pub split: Split,
    pub samples: Vec<SampleRecord>,
    /// Files that could not be read; those pairs are skipped.
    pub missing: Vec<String>,
    pub subsets: Vec<SubsetSummary>,
}

impl EvalReport {
    pub fn summary(
        &self,
        method: Method,
        interval: Option<SsimInterval>,
        layout: Option<PlateLayout>,
    ) -> Option<&SubsetSummary> {
        self.subsets
            .iter()
            .find(|s| s.method == method && s.interval == interval && s.layout == layout)
    }

    pub fn intervals(&self) -> Vec<SsimInterval> {
        let mut out: Vec<SsimInterval> = Vec::new();
        for s in &self.subsets {
            if let Some(i) = s.interval {
                if !out.contains(&i) {
                    out.push(i);
                }
            }
        }
        out
    }
}

fn summarize(
    samples: &[&SampleRecord],
    method: Method,
    interval: Option<SsimInterval>,
    layout: Option<PlateLayout>,
) -> SubsetSummary {
    let mut tally = RecognitionTally::default();
    let (mut psnr_sum, mut finite, mut inf, mut ssim_sum) = (0.0, 0usize, 0usize, 0.0);
    for s in samples {
        let (pred, p, q) = match method {
            Method::NoSr => (&s.pred_lr, s.psnr_lr, s.ssim_lr),
            Method::Sr => (&s.pred_sr, s.psnr_sr, s.ssim_sr),
        };
        tally.record(pred, &s.label);
        if p.is_finite() {
            psnr_sum += p;
            finite += 1;
        } else {
            inf += 1;
        }
        ssim_sum += q;
    }
    let n = samples.len();
    SubsetSummary {
        method,
        interval,
        layout,
        tally,
        mean_psnr_db: if finite == 0 { f64::NAN } else { psnr_sum / finite as f64 },
        psnr_inf_count: inf,
        mean_ssim: if n == 0 { f64::NAN } else { ssim_sum / n as f64 },
    }
}

fn load_pair(dataset: &Dataset, r: &PairRecord, missing: &mut Vec<String>) -> Option<(ImageTensor, ImageTensor)> {
    let mut read = |file: &str| match ImageTensor::load_png(dataset.root.join(file)) {
        Ok(img) => Some(img),
        Err(_) => {
            if !missing.iter().any(|m| m == file) {
                missing.push(file.to_string());
            }
            None
        }
    };
    let lr = read(&r.lr_file);
    let hr = read(&r.hr_file);
    lr.zip(hr)
}

/// Run `model` and the OCR over every successful pair of `split`.
///
/// The OCR is told each plate's layout, so predictions are always
/// syntactically valid.
pub fn evaluate(model: &SrModel, dataset: &Dataset, split: Split, ocr: &dyn OcrAdapter) -> Result<EvalReport> {
    let records: Vec<&PairRecord> = dataset.manifest.select(split, None);
    if records.is_empty() {
        return Err(Error::Data(format!("dataset has no {split} pairs")));
    }
    let mut samples = Vec::with_capacity(records.len());
    let mut missing = Vec::new();
    for r in records {
        let Some((lr, hr)) = load_pair(dataset, r, &mut missing) else {
            continue;
        };
        let sr = model.enhance(&lr)?;
        let read = |img: &ImageTensor| {
            ocr.predict(img, Some(r.layout))
                .map(|p| p.text)
                .map_err(|e| Error::Ocr {
                    sample: r.lr_file.clone(),
                    message: e.to_string(),
                })
        };
        samples.push(SampleRecord {
            interval: r.interval().to_string(),
            index: r.index,
            label: r.label.clone(),
            layout: r.layout,
            lr_file: r.lr_file.clone(),
            hr_file: r.hr_file.clone(),
            achieved_ssim: r.achieved_ssim,
            pred_lr: read(&lr)?,
            pred_sr: read(&sr)?,
            psnr_lr: psnr(&lr, &hr)?,
            ssim_lr: ssim(&lr, &hr)?,
            psnr_sr: psnr(&sr, &hr)?,
            ssim_sr: ssim(&sr, &hr)?,
        });
    }
    let intervals = dataset.manifest.intervals();
    let mut subsets = Vec::new();
    for method in Method::ALL {
        for interval in intervals.iter().copied().map(Some).chain([None]) {
            for layout in [None, Some(PlateLayout::Brazilian), Some(PlateLayout::Mercosur)] {
                let chosen: Vec<&SampleRecord> = samples
                    .iter()
                    .filter(|s| interval.is_none_or(|i| s.interval == i.to_string()))
                    .filter(|s| layout.is_none_or(|l| s.layout == l))
                    .collect();
                subsets.push(summarize(&chosen, method, interval, layout));
            }
        }
    }
    Ok(EvalReport {
        model: model.describe(),
        dataset_root: dataset.root.clone(),
        split,
        samples,
        missing,
        subsets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct RecognitionRow {
    method: &'static str,
    subset: String,
    layout: &'static str,
    tier: Tier,
    n: usize,
    correct: usize,
    percent: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct QualityRow {
    method: &'static str,
    subset: String,
    layout: &'static str,
    n: usize,
    mean_psnr_db: String,
    psnr_inf_count: usize,
    mean_ssim: String,
}

fn fmt_f(v: f64, digits: usize) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.digits$}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportOptions {
    /// Number of LR | SR | HR strips to render.
    pub strips: usize,
    pub seed: u64,
}

/// Write the CSV tables, the markdown report and `opts.strips` strips.
/// Strips re-run `model` on the sampled plates, so it is required when
/// `opts.strips > 0`.
pub fn write_report(
    report: &EvalReport,
    out: impl AsRef<Path>,
    opts: ReportOptions,
    model: Option<&SrModel>,
) -> Result<Vec<PathBuf>> {
    if report.samples.is_empty() {
        return Err(Error::Data("report has no evaluated samples".into()));
    }
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let mut written = Vec::new();

    let path = out.join(RECOGNITION_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for s in &report.subsets {
        let counts = [s.tally.n_ge7, s.tally.n_ge6, s.tally.n_ge5];
        for (tier, correct) in Tier::ALL.into_iter().zip(counts) {
            w.serialize(RecognitionRow {
                method: s.method.as_str(),
                subset: s.subset_name(),
                layout: s.layout_name(),
                tier,
                n: s.tally.n_total,
                correct,
                percent: fmt_f(tier.pct(&s.tally), 2),
            })?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = out.join(QUALITY_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for s in &report.subsets {
        w.serialize(QualityRow {
            method: s.method.as_str(),
            subset: s.subset_name(),
            layout: s.layout_name(),
            n: s.tally.n_total,
            mean_psnr_db: fmt_f(s.mean_psnr_db, 4),
            psnr_inf_count: s.psnr_inf_count,
            mean_ssim: fmt_f(s.mean_ssim, 6),
        })?;
    }
    w.flush()?;
    written.push(path);

    let path = out.join(SAMPLES_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for s in &report.samples {
        w.serialize(s)?;
    }
    w.flush()?;
    written.push(path);

    let path = out.join(REPORT_MD);
    fs::write(&path, markdown(report))?;
    written.push(path);

    if opts.strips > 0 {
        let model = model.ok_or_else(|| Error::arg("strips need the model that produced the report"))?;
        let dir = out.join(STRIP_DIR);
        fs::create_dir_all(&dir)?;
        let n = report.samples.len();
        let mut picks = sample(&mut ChaCha8Rng::seed_from_u64(opts.seed), n, opts.strips.min(n)).into_vec();
        picks.sort_unstable();
        for (k, i) in picks.into_iter().enumerate() {
            let s = &report.samples[i];
            let lr = ImageTensor::load_png(report.dataset_root.join(&s.lr_file))?;
            let hr = ImageTensor::load_png(report.dataset_root.join(&s.hr_file))?;
            let sr = model.enhance(&lr)?;
            let path = dir.join(format!("strip_{k:03}_{}.png", s.label));
            strip(&[&lr, &sr, &hr])?.save_png(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Panels side by side on a white background, `STRIP_GUTTER` apart.
pub fn strip(panels: &[&ImageTensor]) -> Result<ImageTensor> {
    let Some(first) = panels.first() else {
        return Err(Error::arg("strip needs at least one panel"));
    };
    let (c, h, w) = first.shape();
    if panels.iter().any(|p| p.shape() != (c, h, w)) {
        return Err(Error::arg("strip panels must share a shape"));
    }
    let total = panels.len() * w + (panels.len() - 1) * STRIP_GUTTER;
    let mut out = ImageTensor::filled(c, h, total, 1.0)?;
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w + STRIP_GUTTER);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, y, x0 + x, p.get(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

fn markdown(report: &EvalReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Recognition report\n");
    let _ = writeln!(md, "Model: {}  ", report.model);
    let _ = writeln!(md, "Split: {} ({} plates)", report.split, report.samples.len());
    if !report.missing.is_empty() {
        let _ = writeln!(md, "\nMissing files ({}): {}", report.missing.len(), report.missing.join(", "));
    }
    let _ = writeln!(md, "\n## Recognition rates (%)\n");
    let groups = [
        ("Brazilian", Some(PlateLayout::Brazilian)),
        ("Mercosur", Some(PlateLayout::Mercosur)),
        ("All layouts", None),
    ];
    let mut header = String::from("| Method | Subset |");
    let mut rule = String::from("|---|---|");
    for (name, _) in groups {
        for t in Tier::ALL {
            let _ = write!(header, " {name} {} |", t.heading());
            rule.push_str("---:|");
        }
    }
    let _ = writeln!(md, "{header}\n{rule}");
    let rows: Vec<Option<SsimInterval>> = report.intervals().into_iter().map(Some).chain([None]).collect();
    for method in Method::ALL {
        for &interval in &rows {
            let name = match method {
                Method::NoSr => "No super-resolution",
                Method::Sr => "Super-resolution",
            };
            let subset = interval.map_or_else(|| "all".into(), |i| i.to_string());
            let _ = write!(md, "| {name} | {subset} |");
            for (_, layout) in groups {
                let s = report.summary(method, interval, layout).expect("summary for every cell");
                for t in Tier::ALL {
                    let _ = write!(md, " {} |", fmt_f(t.pct(&s.tally), 1));
                }
            }
            md.push('\n');
        }
    }
    let _ = writeln!(md, "\n## Average PSNR (dB) and SSIM\n");
    let _ = writeln!(md, "| Method | Subset | PSNR | PSNR inf | SSIM |\n|---|---|---:|---:|---:|");
    for method in Method::ALL {
        for &interval in &rows {
            let s = report.summary(method, interval, None).expect("summary for every cell");
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                method.as_str(),
                s.subset_name(),
                fmt_f(s.mean_psnr_db, 2),
                s.psnr_inf_count,
                fmt_f(s.mean_ssim, 4)
            );
        }
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(interval: &str, label: &str, layout: PlateLayout, pred_lr: &str, pred_sr: &str, psnr_sr: f64) -> SampleRecord {
        SampleRecord {
            interval: interval.into(),
            index: 0,
            label: label.into(),
            layout,
            lr_file: "x.png".into(),
            hr_file: "y.png".into(),
            achieved_ssim: 0.3,
            pred_lr: pred_lr.into(),
            pred_sr: pred_sr.into(),
            psnr_lr: 20.0,
            ssim_lr: 0.3,
            psnr_sr,
            ssim_sr: 0.9,
        }
    }

    #[test]
    fn summary_excludes_infinite_psnr() {
        let a = rec("i", "ABC1234", PlateLayout::Brazilian, "ABC1234", "ABC1234", 30.0);
        let b = rec("i", "ABC1234", PlateLayout::Brazilian, "ABC1200", "ABC1234", f64::INFINITY);
        let s = summarize(&[&a, &b], Method::Sr, None, None);
        assert_eq!(s.mean_psnr_db, 30.0);
        assert_eq!(s.psnr_inf_count, 1);
        assert_eq!(s.tally.n_ge7, 2);
        let s = summarize(&[&a, &b], Method::NoSr, None, None);
        assert_eq!((s.tally.n_ge7, s.tally.n_ge6, s.tally.n_ge5), (1, 1, 2));
        assert_eq!(s.psnr_inf_count, 0);
    }

    #[test]
    fn non_finite_json_round_trip() {
        let a = rec("i", "ABC1234", PlateLayout::Brazilian, "ABC1234", "ABC1234", f64::INFINITY);
        let back: SampleRecord = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
        let s = summarize(&[&a], Method::Sr, None, None);
        let back: SubsetSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert!(back.mean_psnr_db.is_nan());
        assert_eq!(back.psnr_inf_count, 1);
    }

    #[test]
    fn strip_width() {
        let p = ImageTensor::filled(3, 60, 120, 0.0).unwrap();
        let s = strip(&[&p, &p, &p]).unwrap();
        assert_eq!(s.width(), 3 * 120 + 2 * STRIP_GUTTER);
        assert_eq!(s.get(0, 10, 120), 1.0);
        assert_eq!(s.get(0, 10, 124), 0.0);
        assert!(strip(&[]).is_err());
    }
}

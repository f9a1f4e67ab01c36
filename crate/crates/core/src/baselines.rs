//! Attention ablations on a shared trunk: PLTFAM, TFAM (the MPRNet-style
//! baseline, re-implemented inside this trunk rather than full MPRNet) and
//! no attention.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::{Dataset, Split, SsimInterval};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_report, EvalReport, ReportOptions};
use crate::network::{AttentionKind, ModelConfig, Network, SrModel};
use crate::ocr::{OcrAdapter, ToyOcr};
use crate::trainer::{train, EpochRecord, SrPair, TrainConfig, TrainLog};

pub const SPEC_ARCHIVE: &str = "experiment.json";
pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const TRAIN_LOG_NAME: &str = "train_log.csv";
pub const REPORT_DIR: &str = "report";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset directory or its `pairs.csv`.
    pub dataset: PathBuf,
    /// Toy OCR checkpoint used by the loss and the evaluation.
    pub ocr: PathBuf,
    /// Restrict training and evaluation to one interval.
    #[serde(default)]
    pub interval: Option<SsimInterval>,
    /// Seeds both the network initialisation and the data order; overrides
    /// `train.seed`.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(format!("experiment name {:?} is not a plain file name", self.name)));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// The three attention variants of this spec, named `<name>-<kind>`.
    pub fn ablations(&self) -> Vec<ExperimentSpec> {
        [AttentionKind::Pltfam, AttentionKind::Tfam, AttentionKind::None]
            .into_iter()
            .map(|kind| ExperimentSpec {
                name: format!("{}-{kind}", self.name),
                model: ModelConfig {
                    attention: kind,
                    ..self.model.clone()
                },
                ..self.clone()
            })
            .collect()
    }

    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let spec: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// SHA-256 over `"blob <len>\0" + content`, the object-hash layout git uses.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize)]
struct Archive<'a> {
    config_hash: String,
    spec: &'a ExperimentSpec,
    num_params: usize,
    best_epoch: usize,
    best_val_loss: f64,
    stopped_reason: String,
}

pub struct ExperimentOutcome {
    pub network: Network,
    pub log: TrainLog,
    pub report: EvalReport,
    pub config_hash: String,
    pub dir: PathBuf,
}

fn pairs(dataset: &Dataset, split: Split, interval: Option<SsimInterval>) -> Result<Vec<SrPair>> {
    let records = dataset.manifest.select(split, interval);
    Ok(dataset.load(&records)?.iter().map(SrPair::from).collect())
}

/// Train, evaluate on the test split and archive everything under
/// `out/<spec.name>/`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out: impl AsRef<Path>,
    ocr: Option<&dyn OcrAdapter>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let loaded;
    let ocr: &dyn OcrAdapter = match ocr {
        Some(o) => o,
        None => {
            loaded = ToyOcr::load(&spec.ocr)?;
            &loaded
        }
    };
    let mut dataset = Dataset::open(&spec.dataset)?;
    if let Some(i) = spec.interval {
        dataset.manifest.records.retain(|r| r.interval() == i);
    }
    let train_pairs = pairs(&dataset, Split::Train, None)?;
    let val_pairs = pairs(&dataset, Split::Val, None)?;
    let network = Network::new(spec.model.clone(), spec.seed)?;
    let (network, log) = train(network, &train_pairs, &val_pairs, ocr, &spec.effective_train(), on_epoch)?;

    let dir = out.as_ref().join(&spec.name);
    fs::create_dir_all(&dir)?;
    network.save(dir.join(CHECKPOINT_NAME))?;
    log.write_csv(dir.join(TRAIN_LOG_NAME))?;
    let model = SrModel::Network(Box::new(network));
    let report = evaluate(&model, &dataset, Split::Test, ocr)?;
    write_report(&report, dir.join(REPORT_DIR), ReportOptions { strips: 0, seed: spec.seed }, None)?;
    let SrModel::Network(network) = model else {
        unreachable!("constructed above")
    };

    let config_hash = content_hash(serde_json::to_string(spec)?.as_bytes());
    let archive = Archive {
        config_hash: config_hash.clone(),
        spec,
        num_params: network.num_params(),
        best_epoch: log.best_epoch,
        best_val_loss: log.best_val_loss,
        stopped_reason: log.stopped_reason.to_string(),
    };
    fs::write(dir.join(SPEC_ARCHIVE), serde_json::to_string_pretty(&archive)?)?;
    Ok(ExperimentOutcome {
        network: *network,
        log,
        report,
        config_hash,
        dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentSpec {
        ExperimentSpec {
            name: "desk".into(),
            model: ModelConfig {
                channels: 16,
                num_rcb: 1,
                ..Default::default()
            },
            train: TrainConfig::default(),
            dataset: "data".into(),
            ocr: "ocr.ckpt".into(),
            interval: None,
            seed: 4,
        }
    }

    #[test]
    fn git_blob_layout() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn ablations_share_everything_but_attention() {
        let specs = base().ablations();
        assert_eq!(specs.len(), 3);
        let params: Vec<usize> = specs
            .iter()
            .map(|s| Network::new(s.model.clone(), s.seed).unwrap().num_params())
            .collect();
        assert!(params[2] < params[0] && params[2] < params[1]);
        assert_ne!(params[0], params[1]);
        for s in &specs {
            assert_eq!(s.effective_train(), specs[0].effective_train());
            assert_eq!(s.model.channels, 16);
        }
        assert_eq!(specs[1].name, "desk-tfam");
    }

    #[test]
    fn spec_json_round_trip_and_validation() {
        let s = base();
        let back: ExperimentSpec = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let bad = ExperimentSpec {
            name: "a/b".into(),
            ..base()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"name":"x","dataset":"d","ocr":"o","extra":1}"#).is_err());
    }
}

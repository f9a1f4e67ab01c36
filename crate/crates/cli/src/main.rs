use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lpsr::baselines::{run_experiment, ExperimentSpec};
use lpsr::degrade::{build_subsets, Dataset, DegradeConfig, Split, SplitFractions, SsimInterval};
use lpsr::eval::{evaluate, write_report, EvalReport, ReportOptions};
use lpsr::network::{ModelConfig, Network, SrModel};
use lpsr::ocr::{OcrTrainConfig, ToyOcr};
use lpsr::pixelops::{pad_and_resize, PadMode};
use lpsr::synthplate::{read_corpus, sample_corpus, write_corpus, PLATE_HEIGHT, PLATE_WIDTH};
use lpsr::trainer::{train, SrPair, TrainConfig};
use lpsr::{Error, ImageTensor, Result};
use serde::{Deserialize, Serialize};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// License-plate super-resolution toolkit.
#[derive(Parser, Debug)]
#[command(name = "lpsr", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic plate corpus.
    Synth(SynthArgs),
    /// Build SSIM-interval LR/HR subsets from a corpus.
    Degrade(DegradeArgs),
    /// Train the toy OCR on a corpus.
    TrainOcr(TrainOcrArgs),
    /// Train the SR network on a degraded dataset.
    TrainSr(TrainSrArgs),
    /// Evaluate a checkpoint against the no-SR baseline.
    Eval(EvalArgs),
    /// Restore a single image.
    Infer(InferArgs),
    /// Render tables and LR | SR | HR strips from an eval result.
    Report(ReportArgs),
    /// Train and evaluate an experiment spec.
    RunExp(RunExpArgs),
    /// Write an identity (no-SR) checkpoint.
    ExportIdentity(ExportIdentityArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of plates.
    #[arg(long)]
    n: usize,
    /// Fraction of Mercosur plates.
    #[arg(long, default_value_t = 0.5)]
    mix: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    /// Corpus directory or its manifest.csv.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated `lo:hi` list.
    #[arg(long, default_value = "0:0.10,0.10:0.25,0.25:0.50,0.50:0.75")]
    intervals: String,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    split: String,
    /// JSON file with sigma_lo, sigma_hi, max_iter, blur_sigma.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainOcrArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Held-out corpus to report accuracy on.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainSrArgs {
    /// Dataset directory or its pairs.csv.
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ocr: PathBuf,
    /// Output directory for model.ckpt, train_log.csv and timing.json.
    #[arg(long)]
    out: PathBuf,
    /// Train on one interval only, e.g. `0.25:0.50`.
    #[arg(long)]
    interval: Option<SsimInterval>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ocr: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// eval.json written by `eval`.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of strips to render.
    #[arg(long, default_value_t = 0)]
    strips: usize,
    /// Checkpoint used for the strips.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunExpArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run the PLTFAM, TFAM and attention-free variants of the experiment.
    #[arg(long)]
    ablations: bool,
}

#[derive(Args, Debug)]
struct ExportIdentityArgs {
    #[arg(long)]
    out: PathBuf,
}

/// `train-sr --config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SrConfigFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let samples = sample_corpus(a.n, a.mix, seed)?;
    write_corpus(&samples, &a.out)?;
    eprintln!("wrote {} plates to {}", samples.len(), a.out.display());
    Ok(())
}

fn degrade(a: DegradeArgs, seed: u64) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let intervals = SsimInterval::parse_list(&a.intervals)?;
    let fractions: SplitFractions = a.split.parse()?;
    let cfg: DegradeConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    let built = build_subsets(&corpus, &intervals, fractions, seed, &cfg)?;
    built.write(&a.out)?;
    let failures = built.manifest.failures();
    eprintln!(
        "wrote {} pairs ({failures} failed) to {}",
        built.manifest.records.len() - failures,
        a.out.display()
    );
    Ok(())
}

fn train_ocr(a: TrainOcrArgs, seed: u64) -> Result<()> {
    let samples = read_corpus(&a.corpus)?;
    let defaults = OcrTrainConfig::default();
    let cfg = OcrTrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        lr: a.lr.unwrap_or(defaults.lr),
        seed,
    };
    let mut ocr = ToyOcr::new(seed);
    for e in ocr.train(&samples, &cfg)? {
        eprintln!("epoch {:3}  loss {:.4}  acc {:.3}", e.epoch, e.loss, e.accuracy);
    }
    ocr.save(&a.out)?;
    if let Some(val) = a.val {
        let acc = ocr.accuracy(&read_corpus(val)?)?;
        println!("held-out accuracy {acc:.4}");
    }
    Ok(())
}

fn pairs(dataset: &Dataset, split: Split, interval: Option<SsimInterval>) -> Result<Vec<SrPair>> {
    let records = dataset.manifest.select(split, interval);
    Ok(dataset.load(&records)?.iter().map(SrPair::from).collect())
}

fn train_sr(a: TrainSrArgs, seed: Option<u64>) -> Result<()> {
    let mut file: SrConfigFile = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(s) = seed {
        file.train.seed = s;
    }
    let dataset = Dataset::open(&a.data)?;
    let train_pairs = pairs(&dataset, Split::Train, a.interval)?;
    let val_pairs = pairs(&dataset, Split::Val, a.interval)?;
    let ocr = ToyOcr::load(&a.ocr)?;
    let network = Network::new(file.model.clone(), file.train.seed)?;
    eprintln!(
        "training {} parameters on {} pairs ({} val)",
        network.num_params(),
        train_pairs.len(),
        val_pairs.len()
    );
    let (network, log) = train(network, &train_pairs, &val_pairs, &ocr, &file.train, &mut |e| {
        eprintln!(
            "epoch {:3}  train {:.6}  val {:.6}  lr {:.3e}{}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.lr,
            if e.improved { "  *" } else { "" }
        );
    })?;
    fs::create_dir_all(&a.out)?;
    network.save(a.out.join("model.ckpt"))?;
    log.write_csv(a.out.join("train_log.csv"))?;
    write_json(&a.out.join("config.json"), &file)?;
    write_json(
        &a.out.join("timing.json"),
        &serde_json::json!({ "wall_seconds": log.wall_seconds }),
    )?;
    eprintln!("best epoch {} ({}), stopped by {}", log.best_epoch, log.best_val_loss, log.stopped_reason);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = SrModel::load(&a.checkpoint)?;
    let dataset = Dataset::open(&a.data)?;
    let ocr = ToyOcr::load(&a.ocr)?;
    let report = evaluate(&model, &dataset, a.split, &ocr)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("eval.json"), &report)?;
    write_report(&report, &a.out, ReportOptions { strips: 0, seed: 0 }, None)?;
    for s in report.subsets.iter().filter(|s| s.layout.is_none()) {
        println!(
            "{:6} {:13} all {:6.2}%  >=6 {:6.2}%  >=5 {:6.2}%  ssim {:.4}",
            s.method.as_str(),
            s.subset_name(),
            s.tally.all_pct(),
            s.tally.ge6_pct(),
            s.tally.ge5_pct(),
            s.mean_ssim
        );
    }
    if !report.missing.is_empty() {
        eprintln!("{} files missing: {}", report.missing.len(), report.missing.join(", "));
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = SrModel::load(&a.checkpoint)?;
    let img = ImageTensor::load_png(&a.input)?;
    let img = pad_and_resize(&img, PLATE_WIDTH, PLATE_HEIGHT, PadMode::Edge)?;
    model.enhance(&img)?.save_png(&a.out)
}

fn report(a: ReportArgs, seed: u64) -> Result<()> {
    let report: EvalReport = read_json(&a.eval)?;
    let model = a.checkpoint.as_deref().map(SrModel::load).transpose()?;
    if a.strips > 0 && model.is_none() {
        return Err(Error::Argument("--strips needs --checkpoint".into()));
    }
    let files = write_report(&report, &a.out, ReportOptions { strips: a.strips, seed }, model.as_ref())?;
    eprintln!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}

fn run_exp(a: RunExpArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = ExperimentSpec::read(&a.spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let specs = if a.ablations { spec.ablations() } else { vec![spec] };
    for spec in specs {
        eprintln!("experiment {}", spec.name);
        let outcome = run_experiment(&spec, &a.out, None, &mut |e| {
            eprintln!("  epoch {:3}  val {:.6}  lr {:.3e}", e.epoch, e.val_loss, e.lr);
        })?;
        let all = outcome
            .report
            .summary(lpsr::eval::Method::Sr, None, None)
            .expect("overall summary");
        println!(
            "{}  params {}  recognition {:.2}%  ssim {:.4}  hash {}",
            spec.name,
            outcome.network.num_params(),
            all.tally.all_pct(),
            all.mean_ssim,
            outcome.config_hash
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let s = seed.unwrap_or(0);
    match cli.command {
        Command::Synth(a) => synth(a, s),
        Command::Degrade(a) => degrade(a, s),
        Command::TrainOcr(a) => train_ocr(a, s),
        Command::TrainSr(a) => train_sr(a, seed),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Report(a) => report(a, s),
        Command::RunExp(a) => run_exp(a, seed),
        Command::ExportIdentity(a) => SrModel::Identity.save(&a.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

mod fetch;

use std::path::PathBuf;
use std::process::ExitCode;

use capsad_core::anomaly::read_score_dump;
use capsad_core::capsnet::load_checkpoint;
use capsad_core::data::{self, Dataset};
use capsad_core::experiment::{
    self, aggregate_table, collect_class_reports, emit_roc_comparison, format_table, ClassSelection, ExperimentConfig,
    Seeds, CHECKPOINT_FILE, TRAIN_REPORT_FILE,
};
use capsad_core::training::TrainReport;
use capsad_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Capsule-network anomaly detection on imbalanced MNIST-family datasets.
#[derive(Parser, Debug)]
#[command(name = "capsad", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download dataset files and verify their checksums.
    Fetch {
        /// mnist, fashion or kmnist; all three when omitted.
        #[arg(long)]
        dataset: Option<Dataset>,
        #[arg(long, env = experiment::DATA_ROOT_ENV, default_value = "data")]
        data_root: PathBuf,
    },
    /// Build the imbalanced training split and train one model per class.
    Train(RunArgs),
    /// Score train and test splits with a trained checkpoint and report.
    Evaluate(RunArgs),
    /// ROC curves of the three scores from a test score dump.
    Roc {
        /// A `test-scores.csv`, or a run directory containing one.
        scores: PathBuf,
        /// Where to write the curves; defaults to the dump's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full protocol for every selected class: train, threshold, evaluate.
    Sweep(RunArgs),
    /// Accuracy table aggregated from finished runs.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Print JSON rows instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<Dataset>,
    /// Normal class 0-9, or `all`.
    #[arg(long = "class")]
    class: Option<ClassSelection>,
    /// Share of anomalies in the training set, e.g. 0.01.
    #[arg(long)]
    fraction: Option<f64>,
    /// Repeat to average over several seeds.
    #[arg(long)]
    seed: Vec<u64>,
    /// paper or desk.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, env = experiment::DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Checkpoint to start from (or to evaluate).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Keep at most this many test images per label.
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Keep at most this many normal training images.
    #[arg(long)]
    train_normal_cap: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if let Some(c) = self.class {
            cfg.normal_class = c;
        }
        if let Some(f) = self.fraction {
            cfg.anomaly_fraction = f;
        }
        match self.seed.as_slice() {
            [] => {}
            [s] => cfg.seed = Seeds::One(*s),
            many => cfg.seed = Seeds::Many(many.to_vec()),
        }
        if let Some(p) = &self.preset {
            cfg.preset = p.clone();
            cfg.scale = None;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(r) = &self.data_root {
            cfg.data_root = Some(r.clone());
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(n) = self.test_per_class {
            cfg.test_per_class = Some(n);
        }
        if let Some(n) = self.train_normal_cap {
            cfg.train_normal_cap = Some(n);
        }
        Ok(cfg)
    }
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(u8, u64)> {
    let seeds = cfg.seeds();
    cfg.normal_class.classes().into_iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect()
}

fn train(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    cfg.validate()?;
    let (train_set, test_set) = data::load_dataset(&cfg.resolved_data_root(), cfg.dataset)?;
    for (class, seed) in jobs(&cfg) {
        let dir = cfg.run_dir(class, seed);
        let prepared = experiment::prepare_class(&cfg, &train_set, &test_set, class, seed)?;
        let (_, report) = experiment::train_class(&cfg, &prepared, &dir)?;
        let last = report.as_ref().and_then(|r| r.epochs.last());
        match last {
            Some(e) => println!("{}: margin loss {:.5} after {} epochs", dir.display(), e.margin_loss, e.epoch),
            None => println!("{}: checkpoint copied", dir.display()),
        }
    }
    Ok(())
}

fn evaluate(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    cfg.validate()?;
    let explicit = cfg.checkpoint.clone();
    let (train_set, test_set) = data::load_dataset(&cfg.resolved_data_root(), cfg.dataset)?;
    for (class, seed) in jobs(&cfg) {
        let dir = cfg.run_dir(class, seed);
        let ckpt = explicit.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
        let params = load_checkpoint(&ckpt)?;
        if explicit.is_some() {
            capsad_core::capsnet::save_checkpoint(&params, &dir.join(CHECKPOINT_FILE))?;
        }
        let train_seconds = std::fs::read_to_string(dir.join(TRAIN_REPORT_FILE))
            .ok()
            .and_then(|t| TrainReport::from_jsonl(&t).ok())
            .map(|epochs| epochs.iter().map(|e| e.seconds).sum())
            .unwrap_or(0.0);
        let prepared = experiment::prepare_class(&cfg, &train_set, &test_set, class, seed)?;
        let r = experiment::evaluate_class(&cfg, &params, &prepared, &dir, train_seconds)?;
        println!(
            "{}: accuracy {:.4} (z_a > z_n: {:.4}), threshold {:.4}, AUC {:.4}",
            dir.display(),
            r.accuracy,
            r.baseline_accuracy,
            r.threshold.threshold,
            r.auc.combined
        );
    }
    Ok(())
}

fn roc(scores: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let file = if scores.is_dir() { scores.join(experiment::TEST_SCORES_FILE) } else { scores };
    let records = read_score_dump(&file)?;
    let dir = out.unwrap_or_else(|| file.parent().map(PathBuf::from).unwrap_or_default());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cmp = emit_roc_comparison(&records, &dir)?;
    print!("{}", cmp.summary_csv());
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let report = experiment::run_experiment(&cfg)?;
    print!("{}", format_table(&aggregate_table(&report.runs)));
    println!(
        "avg accuracy {:.4} (z_a > z_n: {:.4}){}",
        report.accuracy_avg,
        report.baseline_accuracy_avg,
        if report.single_seed { ", single seed" } else { "" }
    );
    Ok(())
}

fn report(out: PathBuf, json: bool) -> Result<()> {
    let reports = collect_class_reports(&out)?;
    if reports.is_empty() {
        return Err(Error::MissingData { path: out, hint: "no report.json found; run `capsad sweep` first".into() });
    }
    let rows = aggregate_table(&reports);
    if json {
        for r in &rows {
            println!("{}", serde_json::to_string(r).expect("row serializes"));
        }
    } else {
        print!("{}", format_table(&rows));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fetch { dataset, data_root } => {
            let sets = dataset.map(|d| vec![d]).unwrap_or_else(|| Dataset::ALL.to_vec());
            for d in sets {
                fetch::fetch(&data_root, d)?;
            }
            Ok(())
        }
        Command::Train(args) => train(&args),
        Command::Evaluate(args) => evaluate(&args),
        Command::Roc { scores, out } => roc(scores, out),
        Command::Sweep(args) => sweep(&args),
        Command::Report { out, json } => report(out, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn,capsad_core=info",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

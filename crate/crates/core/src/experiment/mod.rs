//! The per-class protocol: build splits, train, score the training set, fit
//! the threshold, score the balanced test set, classify, report.

mod config;
mod plot;
mod report;

pub use config::{fraction_label, ClassSelection, ExperimentConfig, Seeds, DATA_ROOT_ENV};
pub use plot::{emit_roc_comparison, roc_comparison, roc_svg, score_histogram_svg, RocComparison};
pub use report::{aggregate_table, collect_class_reports, format_table, AucSummary, ClassCell, ClassReport, RunReport, TableRow};

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::anomaly::{accuracy, classify, fit_threshold, write_score_dump, AnomalyRecord};
use crate::capsnet::{self, content_hash, NetworkParams};
use crate::data::{self, BinarySet, LabeledImageSet};
use crate::error::{config_err, Error, Result};
use crate::training::{self, reconstruction_loss, Example, TrainReport};
use crate::Label;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_SCORES_FILE: &str = "train-scores.csv";
pub const TEST_SCORES_FILE: &str = "test-scores.csv";
pub const TRAIN_REPORT_FILE: &str = "train-report.jsonl";
pub const CLASS_REPORT_FILE: &str = "report.json";

/// The decision rule of a plain two-capsule classifier: anomaly iff
/// `z_a > z_n`. A tie is normal.
pub fn baseline_classify(z_n: f64, z_a: f64) -> Label {
    if z_a > z_n {
        Label::Anomaly
    } else {
        Label::Normal
    }
}

/// Scores every example: capsule lengths, normal-capsule reconstruction
/// error, combined score. Order follows `examples`.
pub fn score_examples(params: &NetworkParams<f32>, examples: &[Example<f32>]) -> Result<Vec<AnomalyRecord>> {
    examples
        .par_iter()
        .map(|ex| {
            let (out, recon) = capsnet::infer(&ex.input, params)?;
            let r_l = reconstruction_loss(&ex.target, recon.data())?;
            let (z_n, z_a) = (out.z_n as f64, out.z_a as f64);
            if !(z_n.is_finite() && z_a.is_finite() && r_l.is_finite()) {
                return Err(Error::Numeric(format!("non-finite score components ({z_n}, {z_a}, {r_l})")));
            }
            AnomalyRecord::new(z_n, z_a, r_l, Some(ex.label))
        })
        .collect()
}

/// Splits and model inputs for one (class, seed).
pub struct PreparedClass {
    pub class: u8,
    pub seed: u64,
    pub train: BinarySet,
    pub test: BinarySet,
    pub train_examples: Vec<Example<f32>>,
    pub test_examples: Vec<Example<f32>>,
}

pub fn prepare_class(
    config: &ExperimentConfig,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
    class: u8,
    seed: u64,
) -> Result<PreparedClass> {
    let spec = config.split_spec(class, seed);
    let train = data::build_imbalanced_train_capped(train_set, spec, config.train_normal_cap)?;
    let test = data::build_balanced_test_capped(test_set, spec, config.test_per_class)?;
    let train_examples = train.examples(config.standardization)?;
    let test_examples = test.examples(config.standardization)?;
    Ok(PreparedClass { class, seed, train, test, train_examples, test_examples })
}

/// Trains (or loads, when `epochs = 0`) the model for one prepared class and
/// stores the checkpoint and training log in `dir`.
pub fn train_class(
    config: &ExperimentConfig,
    prepared: &PreparedClass,
    dir: &Path,
) -> Result<(NetworkParams<f32>, Option<TrainReport>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let start = match &config.checkpoint {
        Some(path) => {
            let params = capsnet::load_checkpoint(path)?;
            if params.scale != config.architecture()? {
                return Err(config_err!("checkpoint {} has a different architecture than the config", path.display()));
            }
            Some(params)
        }
        None => None,
    };
    if config.epochs == 0 {
        let params = start.ok_or_else(|| config_err!("epochs = 0 needs a checkpoint to evaluate"))?;
        capsnet::save_checkpoint(&params, &dir.join(CHECKPOINT_FILE))?;
        return Ok((params, None));
    }
    let train_cfg = config.train_config(prepared.seed)?;
    log::info!(
        "class {} seed {}: training on {} images ({} anomalies)",
        prepared.class,
        prepared.seed,
        prepared.train.len(),
        prepared.train.count(Label::Anomaly)
    );
    let (params, report) = match start {
        Some(p) => training::train_from(p, &prepared.train_examples, &train_cfg)?,
        None => training::train(&prepared.train_examples, &train_cfg)?,
    };
    capsnet::save_checkpoint(&params, &dir.join(CHECKPOINT_FILE))?;
    capsnet::write_atomic(&dir.join(TRAIN_REPORT_FILE), report.to_jsonl().as_bytes())?;
    Ok((params, Some(report)))
}

/// Scores, threshold fit, classification and metrics for a trained model.
pub fn evaluate_class(
    config: &ExperimentConfig,
    params: &NetworkParams<f32>,
    prepared: &PreparedClass,
    dir: &Path,
    train_seconds: f64,
) -> Result<ClassReport> {
    let start = Instant::now();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train_records = score_examples(params, &prepared.train_examples)?;
    write_score_dump(&dir.join(TRAIN_SCORES_FILE), &train_records)?;
    let threshold = fit_threshold(&train_records)?;

    let test_records = score_examples(params, &prepared.test_examples)?;
    write_score_dump(&dir.join(TEST_SCORES_FILE), &test_records)?;
    let labels = &prepared.test.labels;
    let proposed: Vec<Label> = test_records.iter().map(|r| classify(r.score, &threshold)).collect();
    let baseline: Vec<Label> = test_records.iter().map(|r| baseline_classify(r.z_n, r.z_a)).collect();
    let comparison = emit_roc_comparison(&test_records, dir)?;
    plot::write_histogram(&test_records, threshold.threshold, dir)?;

    let mean_recon = |label: Label| {
        let v: Vec<f64> = test_records.iter().filter(|r| r.label == Some(label)).map(|r| r.r_l).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let ckpt = std::fs::read(dir.join(CHECKPOINT_FILE)).map_err(|e| Error::io(dir.join(CHECKPOINT_FILE), e))?;

    let report = ClassReport {
        dataset: config.dataset,
        class: prepared.class,
        anomaly_fraction: config.anomaly_fraction,
        seed: prepared.seed,
        train_size: prepared.train.len(),
        train_anomalies: prepared.train.count(Label::Anomaly),
        test_size: prepared.test.len(),
        threshold,
        accuracy: accuracy(&proposed, labels)?,
        baseline_accuracy: accuracy(&baseline, labels)?,
        auc: comparison.summary(),
        recon_mse_normal: mean_recon(Label::Normal),
        recon_mse_anomaly: mean_recon(Label::Anomaly),
        checkpoint_hash: content_hash(&ckpt),
        train_seconds,
        eval_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    capsnet::write_atomic(&dir.join(CLASS_REPORT_FILE), json.as_bytes())?;
    log::info!(
        "class {} seed {}: accuracy {:.4} (baseline {:.4}), threshold {:.4}",
        report.class,
        report.seed,
        report.accuracy,
        report.baseline_accuracy,
        report.threshold.threshold
    );
    Ok(report)
}

/// Full protocol for one (class, seed) on already loaded data.
pub fn run_class(
    config: &ExperimentConfig,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
    class: u8,
    seed: u64,
) -> Result<ClassReport> {
    let dir = config.run_dir(class, seed);
    let prepared = prepare_class(config, train_set, test_set, class, seed)?;
    let start = Instant::now();
    let (params, _) = train_class(config, &prepared, &dir)?;
    evaluate_class(config, &params, &prepared, &dir, start.elapsed().as_secs_f64())
}

/// Loads the dataset, runs every selected (class, seed) on up to `workers`
/// threads, and writes the aggregate report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let (train_set, test_set) = data::load_dataset(&config.resolved_data_root(), config.dataset)?;
    let jobs: Vec<(u8, u64)> = config
        .normal_class
        .classes()
        .into_iter()
        .flat_map(|c| config.seeds().into_iter().map(move |s| (c, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<ClassReport>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(class, seed)) = jobs.get(i) else { break };
                let r = run_class(config, &train_set, &test_set, class, seed);
                let failed = r.is_err();
                results.lock().unwrap().push((i, r));
                if failed {
                    // stop handing out new jobs after the first failure
                    next.store(jobs.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let runs = results.into_iter().map(|(_, r)| r).collect::<Result<Vec<_>>>()?;
    let report = RunReport::new(config.clone(), runs, start.elapsed().as_secs_f64())?;
    let path = run_report_path(config);
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    capsnet::write_atomic(&path, json.as_bytes())?;
    Ok(report)
}

/// `<out>/<dataset>/run-<fraction>.json`
pub fn run_report_path(config: &ExperimentConfig) -> PathBuf {
    config
        .out
        .join(config.dataset.as_str())
        .join(format!("run-{}.json", fraction_label(config.anomaly_fraction)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_rule_examples() {
        assert_eq!(baseline_classify(0.8, 0.6), Label::Normal);
        assert_eq!(baseline_classify(0.2, 0.9), Label::Anomaly);
        assert_eq!(baseline_classify(0.5, 0.5), Label::Normal);
    }
}

//! Holdout experiments: split, optionally augment, train, evaluate, and
//! write the per-fold and aggregate report files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{
    aggregate, metrics, normalize_confusion, summarize, ConfusionMatrix, MetricsReport, Summary, METRIC_NAMES,
};
use super::splits::{make_splits, SplitOptions, SplitPlan};
use super::train::{predict_all, train_model, EpochStats, Example, TrainConfig};
use crate::augment::{audit_lineage, expand_dataset, read_lineage, write_expansion, AugmentConfig, LineageRow};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::signal::{read_dataset, SpectrogramImage, SplitRole};

const SPLIT_STREAM: u64 = 0x5B17;
const TRAIN_STREAM: u64 = 0x7EA1;
const AUGMENT_STREAM: u64 = 0xA06E;

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    /// 1-based.
    pub fold: usize,
    pub train_size: usize,
    pub augmented: usize,
    pub test_size: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub curve: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub folds: Vec<FoldResult>,
    /// `None` where a metric is undefined in every fold.
    pub aggregate: [Option<Summary>; 5],
    pub snapshot: String,
}

impl ExperimentReport {
    pub fn mean_accuracy(&self) -> Option<f64> {
        self.aggregate[0].map(|s| s.mean)
    }
}

/// Counts predictions on `test` after checking that no test image is part
/// of the training lineage.
pub fn evaluate(
    model: &Model,
    test: &[SpectrogramImage],
    train_ids: &HashSet<&str>,
    lineage: &[LineageRow],
) -> Result<ConfusionMatrix> {
    let test_ids: HashSet<&str> = test.iter().map(|i| i.id.as_str()).collect();
    if let Some(id) = test_ids.iter().find(|id| train_ids.contains(*id)) {
        return Err(Error::Lineage(format!(
            "`{id}` is in both the train and the test split"
        )));
    }
    audit_lineage(lineage, train_ids, &test_ids)?;
    let (h, w) = model.input_dims();
    if let Some(bad) = test.iter().find(|i| (i.image.height(), i.image.width()) != (h, w)) {
        return Err(Error::Dataset(format!(
            "`{}` is {}×{}, model expects {h}×{w}",
            bad.id,
            bad.image.height(),
            bad.image.width()
        )));
    }
    let pixels: Vec<Vec<f64>> = test.iter().map(|i| i.image.to_unit()).collect();
    let predicted = predict_all(model, &pixels)?;
    Ok(ConfusionMatrix::from_pairs(test.iter().map(|i| i.label).zip(predicted)))
}

fn check_images(images: &[SpectrogramImage], cfg: &RunConfig) -> Result<(usize, usize)> {
    let dims = cfg.channel_set.image_dims();
    for img in images {
        if img.provenance.channel_set != cfg.channel_set {
            return Err(Error::Dataset(format!(
                "`{}` is a {} image but the run expects {}",
                img.id, img.provenance.channel_set, cfg.channel_set
            )));
        }
        if (img.image.height(), img.image.width()) != dims {
            return Err(Error::Dataset(format!("`{}` is not {}×{}", img.id, dims.0, dims.1)));
        }
    }
    Ok(dims)
}

pub fn split_plan(images: &[SpectrogramImage], cfg: &RunConfig) -> Result<SplitPlan> {
    let labels: Vec<_> = images.iter().map(|i| i.label).collect();
    let groups: Vec<String> = images.iter().map(|i| i.provenance.subject_id.clone()).collect();
    let opts = SplitOptions {
        folds: cfg.folds,
        train_frac: cfg.train_frac,
        seed: derive_seed(cfg.seed, SPLIT_STREAM),
        mode: cfg.split_mode,
    };
    make_splits(&labels, cfg.group_by_subject.then_some(groups.as_slice()), &opts)
}

fn fold_sets(
    images: &[SpectrogramImage],
    train: &[usize],
    test: &[usize],
) -> (Vec<SpectrogramImage>, Vec<SpectrogramImage>) {
    (
        train.iter().map(|&i| images[i].with_split(SplitRole::Train)).collect(),
        test.iter().map(|&i| images[i].with_split(SplitRole::Test)).collect(),
    )
}

fn fold_augment_config(cfg: &RunConfig, fold: usize) -> AugmentConfig {
    AugmentConfig {
        seed: derive_seed(derive_seed(cfg.augmentation.seed, AUGMENT_STREAM), fold as u64),
        ..cfg.augmentation
    }
}

fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}"))
}

fn run_fold(
    images: &[SpectrogramImage],
    train_idx: &[usize],
    test_idx: &[usize],
    fold: usize,
    dims: (usize, usize),
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<FoldResult> {
    let (train, test) = fold_sets(images, train_idx, test_idx);
    let (train_set, lineage) = if cfg.augment {
        let exp = expand_dataset(&train, &fold_augment_config(cfg, fold))?;
        if let Some(out) = out {
            write_expansion(&fold_dir(out, fold), &exp)?;
        }
        (exp.images, exp.lineage)
    } else {
        (train, Vec::new())
    };
    let examples: Vec<Example> = train_set
        .iter()
        .map(|i| Example {
            pixels: i.image.to_unit(),
            label: i.label,
        })
        .collect();
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam,
        seed: derive_seed(derive_seed(cfg.seed, TRAIN_STREAM), fold as u64),
        stop_at_train_accuracy: None,
    };
    let (model, curve) = train_model(cfg.model, dims, &examples, &tcfg)?;
    if let Some(out) = out {
        Checkpoint::from_model(&model).write(&out.join(format!("model_fold{fold}.ckpt")))?;
    }
    let train_ids: HashSet<&str> = train_set.iter().map(|i| i.id.as_str()).collect();
    let confusion = evaluate(&model, &test, &train_ids, &lineage)?;
    Ok(FoldResult {
        fold,
        train_size: train_idx.len(),
        augmented: lineage.len(),
        test_size: test.len(),
        confusion,
        metrics: metrics(&confusion),
        curve,
    })
}

fn summaries(folds: &[FoldResult]) -> [Option<Summary>; 5] {
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.metrics).collect();
    match aggregate(&reports) {
        Ok(all) => all.map(Some),
        Err(_) => std::array::from_fn(|m| {
            let column: Vec<Option<f64>> = reports.iter().map(|r| r.values()[m]).collect();
            summarize(&column).ok()
        }),
    }
}

/// Runs every fold on in-memory images; writes report files when `out` is set.
pub fn run_on_images(images: &[SpectrogramImage], cfg: &RunConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dims = check_images(images, cfg)?;
    let plan = split_plan(images, cfg)?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let folds = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| run_fold(images, &f.train, &f.test, i + 1, dims, cfg, out))
        .collect::<Result<Vec<_>>>()?;
    let report = ExperimentReport {
        aggregate: summaries(&folds),
        folds,
        snapshot: cfg.snapshot(),
    };
    if let Some(out) = out {
        write_report(out, &report)?;
    }
    Ok(report)
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| Error::Config(vec!["dataset: no dataset manifest given".into()]))
}

fn out_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::Config(vec!["out: no output directory given".into()]))
}

/// Loads `cfg.dataset`, runs the experiment and writes the report to `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    let mut problems = cfg.problems();
    if cfg.dataset.is_none() {
        problems.push("dataset: no dataset manifest given".into());
    }
    if cfg.out.is_none() {
        problems.push("out: no output directory given".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let images = read_dataset(dataset_path(cfg)?)?;
    run_on_images(&images, cfg, Some(out_path(cfg)?))
}

/// Re-evaluates the checkpoints of a finished run on the same splits.
pub fn evaluate_checkpoints(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = out_path(cfg)?;
    let images = read_dataset(dataset_path(cfg)?)?;
    let dims = check_images(&images, cfg)?;
    let plan = split_plan(&images, cfg)?;
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, f) in plan.folds.iter().enumerate() {
        let fold = i + 1;
        let ckpt = Checkpoint::read(&out.join(format!("model_fold{fold}.ckpt")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(cfg.model, dims.0, dims.1, &mut rng)?;
        ckpt.restore(&mut model)?;
        let (train, test) = fold_sets(&images, &f.train, &f.test);
        let lineage_path = fold_dir(out, fold).join("augmented.csv");
        let lineage = if lineage_path.exists() {
            read_lineage(&lineage_path)?
        } else {
            Vec::new()
        };
        let mut train_ids: HashSet<&str> = train.iter().map(|i| i.id.as_str()).collect();
        train_ids.extend(lineage.iter().map(|r| r.path.as_str()));
        let confusion = evaluate(&model, &test, &train_ids, &lineage)?;
        folds.push(FoldResult {
            fold,
            train_size: train.len(),
            augmented: lineage.len(),
            test_size: test.len(),
            confusion,
            metrics: metrics(&confusion),
            curve: Vec::new(),
        });
    }
    let report = ExperimentReport {
        aggregate: summaries(&folds),
        folds,
        snapshot: cfg.snapshot(),
    };
    write_report(out, &report)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `report.csv`, `aggregate.csv`, `confusion_fold<i>.csv`,
/// `curve_fold<i>.csv` (when a curve exists) and `config.snapshot`.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = format!("fold,{},tp,fn,fp,tn\n", METRIC_NAMES.join(","));
    for f in &report.folds {
        let values: Vec<String> = f.metrics.values().iter().map(|v| fmt_opt(*v)).collect();
        let cm = f.confusion;
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            f.fold,
            values.join(","),
            cm.tp,
            cm.fn_,
            cm.fp,
            cm.tn
        )
        .expect("string write");
    }
    write_text(&dir.join("report.csv"), &csv)?;

    let mut agg = String::from("metric,mean,std,defined_folds\n");
    for (name, s) in METRIC_NAMES.iter().zip(&report.aggregate) {
        match s {
            Some(s) => writeln!(agg, "{name},{},{},{}", s.mean, fmt_opt(s.std), s.defined),
            None => writeln!(agg, "{name},undefined,undefined,0"),
        }
        .expect("string write");
    }
    write_text(&dir.join("aggregate.csv"), &agg)?;

    for f in &report.folds {
        let cm = f.confusion;
        let text = format!(
            "true,predicted_drowsy,predicted_alert\ndrowsy,{},{}\nalert,{},{}\n",
            cm.tp, cm.fn_, cm.fp, cm.tn
        );
        write_text(&dir.join(format!("confusion_fold{}.csv", f.fold)), &text)?;
        if !f.curve.is_empty() {
            let mut curve = String::from("epoch,mean_loss,train_accuracy\n");
            for s in &f.curve {
                writeln!(curve, "{},{},{}", s.epoch, s.mean_loss, s.train_accuracy).expect("string write");
            }
            write_text(&dir.join(format!("curve_fold{}.csv", f.fold)), &curve)?;
        }
    }
    write_text(&dir.join("config.snapshot"), &report.snapshot)
}

/// `table.csv` (mean and std rows in reporting column order) and
/// `confusion_normalized_fold<i>.csv` with each true-class row summing to one.
pub fn write_summary_tables(dir: &Path, report: &ExperimentReport) -> Result<()> {
    let mut table = format!("statistic,{}\n", METRIC_NAMES.join(","));
    let means: Vec<String> = report.aggregate.iter().map(|s| fmt_opt(s.map(|s| s.mean))).collect();
    let stds: Vec<String> = report
        .aggregate
        .iter()
        .map(|s| fmt_opt(s.and_then(|s| s.std)))
        .collect();
    writeln!(table, "mean,{}", means.join(",")).expect("string write");
    writeln!(table, "std,{}", stds.join(",")).expect("string write");
    write_text(&dir.join("table.csv"), &table)?;
    for f in &report.folds {
        let path = dir.join(format!("confusion_normalized_fold{}.csv", f.fold));
        match normalize_confusion(&f.confusion) {
            Ok(n) => write_text(
                &path,
                &format!(
                    "true,predicted_drowsy,predicted_alert\ndrowsy,{},{}\nalert,{},{}\n",
                    n[0][0], n[0][1], n[1][0], n[1][1]
                ),
            )?,
            Err(_) => write_text(
                &path,
                "true,predicted_drowsy,predicted_alert\ndrowsy,undefined,undefined\nalert,undefined,undefined\n",
            )?,
        }
    }
    Ok(())
}

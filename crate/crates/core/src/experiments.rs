//! Cross-validation, cross-cohort evaluation, gap reports and finetuning sweeps.
//!
//! Run directories follow `runs/<experiment>/<fold-or-n>/` with
//! `history.csv`, `checkpoint.bin` and `metrics.json` in each.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::splits::{kfold, FoldAssignment, SplitStrategy};
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::losses::LabelDice;
use crate::rng::{derive_seed, rng_from_seed, SeedPart};
use crate::tensor::Real;
use crate::train::{evaluate, fit, history_csv, save_checkpoint, EpochRecord, FitOptions, Resume, TrainConfig, VolumeScore};
use crate::unet::{ModelConfig, UNetModel};

/// Label columns of every report, in output order.
pub const LABELS: [&str; 4] = ["Labels", "RV", "LV", "MYO"];

/// Dice per label. `labels` is the mean of the three class dices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub labels: f64,
    pub rv: f64,
    pub lv: f64,
    pub myo: f64,
}

impl LabelScores {
    /// Reads a [`LabelDice`] whose classes are ordered RV, MYO, LV.
    pub fn from_dice(d: &LabelDice) -> Self {
        Self { labels: d.mean, rv: d.per_class[0], myo: d.per_class[1], lv: d.per_class[2] }
    }

    /// Values in [`LABELS`] order.
    pub fn values(&self) -> [f64; 4] {
        [self.labels, self.rv, self.lv, self.myo]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self { labels: v[0], rv: v[1], lv: v[2], myo: v[3] }
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        LABELS.iter().position(|l| *l == label).map(|i| self.values()[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> MeanSd {
    if values.is_empty() {
        return MeanSd { mean: f64::NAN, sd: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanSd { mean, sd: var.sqrt() }
}

/// Per-volume scores of one model on one dataset with their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub volumes: Vec<VolumeScore>,
    pub mean: LabelScores,
    pub sd: LabelScores,
}

pub fn evaluate_on_dataset<T: Real>(
    model: &UNetModel<T>,
    index: &DatasetIndex,
    cfg: &TrainConfig,
) -> Result<DatasetEvaluation> {
    let eval = evaluate(model, index, cfg)?;
    let per_volume: Vec<[f64; 4]> =
        eval.volumes.iter().map(|v| LabelScores::from_dice(&v.dice).values()).collect();
    let stats: Vec<MeanSd> = (0..4).map(|i| mean_sd(&per_volume.iter().map(|v| v[i]).collect::<Vec<_>>())).collect();
    Ok(DatasetEvaluation {
        volumes: eval.volumes,
        mean: LabelScores::from_values([0, 1, 2, 3].map(|i| stats[i].mean)),
        sd: LabelScores::from_values([0, 1, 2, 3].map(|i| stats[i].sd)),
    })
}

/// Where and how loudly experiment runs report.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Experiment directory; each run gets a subdirectory.
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl RunOptions {
    fn run_dir(&self, name: &str) -> Result<Option<PathBuf>> {
        let Some(root) = &self.out_dir else { return Ok(None) };
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        Ok(Some(dir))
    }
}

/// Writes `history.csv`, `checkpoint.bin` and `metrics.json` into `dir`.
pub fn write_run<T: Real, M: Serialize>(dir: &Path, history: &[EpochRecord], model: &UNetModel<T>, metrics: &M) -> Result<()> {
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    write("history.csv", history_csv(history)?.as_bytes())?;
    save_checkpoint(&dir.join("checkpoint.bin"), model)?;
    write("metrics.json", (serde_json::to_string_pretty(metrics)? + "\n").as_bytes())
}

/// Metrics of one cross-validation fold, as stored in its `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub train: LabelScores,
    pub test: LabelScores,
    /// Scores on the whole unseen cohort, when one was given.
    pub unseen: Option<LabelScores>,
}

pub struct CrossvalRun<T> {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldMetrics>,
    pub models: Vec<UNetModel<T>>,
    pub histories: Vec<Vec<EpochRecord>>,
    /// Optimizer state at the end of each fold, for continued finetuning.
    pub resumes: Vec<Resume>,
}

/// Model and training configuration of fold `fold`, with seeds derived from the base ones.
pub fn fold_configs(model: &ModelConfig, train: &TrainConfig, fold: usize) -> (ModelConfig, TrainConfig) {
    let tag = [SeedPart::Str("fold"), SeedPart::from(fold)];
    (
        ModelConfig { seed: derive_seed(model.seed, &tag), ..model.clone() },
        TrainConfig { seed: derive_seed(train.seed, &tag), ..train.clone() },
    )
}

/// Fold assignment used by [`run_crossval`] for this training configuration.
pub fn crossval_folds(index: &DatasetIndex, train: &TrainConfig, k: usize, strategy: SplitStrategy) -> Result<FoldAssignment> {
    kfold(index, k, derive_seed(train.seed, &[SeedPart::Str("split")]), strategy)
}

/// Trains one model per fold on the other `k − 1` folds, using the held-out
/// fold for validation, and scores every model on its train split, its test
/// split and, if given, the whole `unseen` cohort.
pub fn run_crossval<T: Real>(
    index: &DatasetIndex,
    unseen: Option<&DatasetIndex>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    k: usize,
    strategy: SplitStrategy,
    options: &RunOptions,
) -> Result<CrossvalRun<T>> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let assignment = crossval_folds(index, train_cfg, k, strategy)?;
    for w in &assignment.warnings {
        eprintln!("warning: {w}");
    }
    let mut run = CrossvalRun { assignment, folds: vec![], models: vec![], histories: vec![], resumes: vec![] };
    for fold in 0..k {
        let train_ids = run.assignment.train_ids(fold);
        let test_ids = run.assignment.test_ids(fold);
        let (train_set, test_set) = (index.subset(&train_ids), index.subset(&test_ids));
        let (mc, cfg) = fold_configs(model_cfg, train_cfg, fold);
        let model = UNetModel::<T>::build(&mc)?;
        let dir = options.run_dir(&format!("fold_{fold}"))?;
        if options.verbose {
            eprintln!("fold {fold}: {} train / {} test patients", train_ids.len(), test_ids.len());
        }
        let fit_opts = FitOptions { out_dir: dir.as_deref(), verbose: options.verbose, ..Default::default() };
        let result = fit(model, &train_set, Some(&test_set), &cfg, &fit_opts)?;
        let metrics = FoldMetrics {
            fold,
            train_patients: train_ids,
            test_patients: test_ids,
            best_epoch: result.best_epoch,
            epochs_run: result.history.len(),
            train: evaluate_on_dataset(&result.model, &train_set, &cfg)?.mean,
            test: evaluate_on_dataset(&result.model, &test_set, &cfg)?.mean,
            unseen: unseen.map(|u| evaluate_on_dataset(&result.model, u, &cfg).map(|e| e.mean)).transpose()?,
        };
        if let Some(dir) = &dir {
            write_run(dir, &result.history, &result.model, &metrics)?;
        }
        run.folds.push(metrics);
        run.resumes.push(Resume { lr: result.state.current_lr, adam: result.adam });
        run.models.push(result.model);
        run.histories.push(result.history);
    }
    Ok(run)
}

/// One (evaluation set, modality, label) cell of a gap report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub evaluation_dataset: String,
    /// `train`, `test` or `all`.
    pub modality: String,
    pub label: String,
    pub mean: f64,
    pub sd: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    /// `train-test` or `train-unseen`.
    pub kind: String,
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub training_dataset: String,
    pub unseen_dataset: Option<String>,
    pub rows: Vec<GapRow>,
    pub gaps: Vec<Gap>,
}

impl GapReport {
    pub fn row(&self, modality: &str, label: &str) -> Option<&GapRow> {
        self.rows.iter().find(|r| r.modality == modality && r.label == label)
    }

    pub fn gap(&self, kind: &str, label: &str) -> Option<f64> {
        self.gaps.iter().find(|g| g.kind == kind && g.label == label).map(|g| g.value)
    }
}

/// Fold-mean dice per modality and label, with `gap = mean(train) − mean(X)`.
/// Every fold must carry an unseen score or none may.
pub fn gap_report(training_dataset: &str, unseen_dataset: Option<&str>, folds: &[FoldMetrics]) -> Result<GapReport> {
    if folds.is_empty() {
        return Err(Error::Config("gap report needs at least one fold".into()));
    }
    let ids: BTreeSet<usize> = folds.iter().map(|f| f.fold).collect();
    if ids.len() != folds.len() {
        return Err(Error::Validation("fold indices repeat".into()));
    }
    let with_unseen = folds.iter().filter(|f| f.unseen.is_some()).count();
    if with_unseen != 0 && with_unseen != folds.len() {
        return Err(Error::Validation(format!(
            "{with_unseen} of {} folds carry unseen-cohort scores; modalities must share folds",
            folds.len()
        )));
    }
    if (with_unseen > 0) != unseen_dataset.is_some() {
        return Err(Error::Validation("unseen dataset name and unseen fold scores must come together".into()));
    }
    let mut modalities: Vec<(&str, &str, Vec<LabelScores>)> = vec![
        (training_dataset, "train", folds.iter().map(|f| f.train).collect()),
        (training_dataset, "test", folds.iter().map(|f| f.test).collect()),
    ];
    if let Some(name) = unseen_dataset {
        modalities.push((name, "all", folds.iter().filter_map(|f| f.unseen).collect()));
    }
    let mut rows = vec![];
    for (dataset, modality, scores) in &modalities {
        for (i, label) in LABELS.iter().enumerate() {
            let s = mean_sd(&scores.iter().map(|v| v.values()[i]).collect::<Vec<_>>());
            rows.push(GapRow {
                evaluation_dataset: dataset.to_string(),
                modality: modality.to_string(),
                label: label.to_string(),
                mean: s.mean,
                sd: s.sd,
                folds: scores.len(),
            });
        }
    }
    let mean = |modality: &str, label: &str| {
        rows.iter().find(|r| r.modality == modality && r.label == label).map(|r| r.mean).unwrap()
    };
    let mut gaps = vec![];
    for (kind, other) in [("train-test", "test"), ("train-unseen", "all")] {
        if other == "all" && unseen_dataset.is_none() {
            continue;
        }
        for label in LABELS {
            gaps.push(Gap { kind: kind.into(), label: label.into(), value: mean("train", label) - mean(other, label) });
        }
    }
    Ok(GapReport {
        training_dataset: training_dataset.to_string(),
        unseen_dataset: unseen_dataset.map(str::to_string),
        rows,
        gaps,
    })
}

/// Finetuning protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FinetuneMethod {
    /// Fresh model trained on A-train plus the added B patients.
    Retrain = 1,
    /// Baseline model trained further on A-train plus the added B patients.
    Continue = 2,
    /// Baseline model trained further on the added B patients only.
    BOnly = 3,
}

impl TryFrom<u8> for FinetuneMethod {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Self::Retrain),
            2 => Ok(Self::Continue),
            3 => Ok(Self::BOnly),
            _ => Err(format!("finetune method must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<FinetuneMethod> for u8 {
    fn from(m: FinetuneMethod) -> u8 {
        m as u8
    }
}

/// `count` evenly spaced integers from `lo` to `hi`: `lo + ⌊i·(hi − lo)/(count − 1)⌋`.
pub fn n_schedule(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count).map(|i| lo + i * (hi - lo) / (count - 1)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSpec {
    pub methods: Vec<FinetuneMethod>,
    pub n_schedule: Vec<usize>,
    /// Methods 2 and 3 start from a fresh Adam state and the initial learning
    /// rate; otherwise they continue the baseline's optimizer state.
    pub restart_optimizer: bool,
    /// Epoch cap for methods 2 and 3; `None` keeps `max_epochs`.
    pub continue_epochs: Option<usize>,
    /// Initial learning rate for methods 2 and 3; `None` keeps `initial_lr`.
    pub continue_lr: Option<f64>,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            methods: vec![FinetuneMethod::Retrain, FinetuneMethod::Continue, FinetuneMethod::BOnly],
            n_schedule: n_schedule(5, 150, 10),
            restart_optimizer: true,
            continue_epochs: None,
            continue_lr: None,
        }
    }
}

impl FinetuneSpec {
    pub fn validate(&self, b_patients: usize) -> Result<()> {
        if self.n_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("n_schedule {:?} is not strictly increasing", self.n_schedule)));
        }
        if let Some(&max) = self.n_schedule.last() {
            if max >= b_patients {
                return Err(Error::Config(format!(
                    "n = {max} added patients leaves no unseen patients out of {b_patients}"
                )));
            }
        }
        if self.continue_epochs == Some(0) {
            return Err(Error::Config("continue_epochs must be positive".into()));
        }
        if self.continue_lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("continue_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Baseline model of methods 2 and 3, with its optimizer state.
pub struct Baseline<T> {
    pub model: UNetModel<T>,
    pub resume: Option<Resume>,
}

/// Scores on the three evaluation sets of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub a_train: LabelScores,
    pub a_test: LabelScores,
    pub b_unseen: LabelScores,
}

impl SetScores {
    pub const NAMES: [&'static str; 3] = ["A-train", "A-test", "B-unseen"];

    pub fn sets(&self) -> [&LabelScores; 3] {
        [&self.a_train, &self.a_test, &self.b_unseen]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: FinetuneMethod,
    pub n: usize,
    pub added_patients: Vec<String>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub scores: SetScores,
}

pub struct SweepResult {
    pub baseline: SetScores,
    /// B patients held out of every run and used for `b_unseen`.
    pub b_eval_patients: Vec<String>,
    pub points: Vec<SweepPoint>,
}

fn score_sets<T: Real>(
    model: &UNetModel<T>,
    sets: [&DatasetIndex; 3],
    cfg: &TrainConfig,
) -> Result<SetScores> {
    Ok(SetScores {
        a_train: evaluate_on_dataset(model, sets[0], cfg)?.mean,
        a_test: evaluate_on_dataset(model, sets[1], cfg)?.mean,
        b_unseen: evaluate_on_dataset(model, sets[2], cfg)?.mean,
    })
}

/// Trains one model per (method, n) and scores it on A-train, A-test and the
/// B patients never added at any n. Added patients are prefixes of one seeded
/// shuffle of B, so larger n always extend smaller ones. Runs without a
/// validation set, so the training loss drives scheduling and selection.
pub fn finetune_sweep<T: Real>(
    spec: &FinetuneSpec,
    a_train: &DatasetIndex,
    a_test: &DatasetIndex,
    b: &DatasetIndex,
    baseline: &Baseline<T>,
    train_cfg: &TrainConfig,
    options: &RunOptions,
) -> Result<SweepResult> {
    spec.validate(b.len())?;
    train_cfg.validate()?;
    let mut order = b.patient_ids();
    order.sort();
    order.shuffle(&mut rng_from_seed(derive_seed(train_cfg.seed, &[SeedPart::Str("finetune-order")])));
    let n_max = spec.n_schedule.last().copied().unwrap_or(0);
    let b_eval_patients = order[n_max..].to_vec();
    let b_eval = b.subset(&b_eval_patients);
    let sets = [a_train, a_test, &b_eval];
    let base_scores = score_sets(&baseline.model, sets, train_cfg)?;

    let mut points = vec![];
    for &method in &spec.methods {
        for &n in &spec.n_schedule {
            let added = order[..n].to_vec();
            let b_added = b.subset(&added);
            let tag = [SeedPart::Str("finetune"), SeedPart::from(method as u64), SeedPart::from(n)];
            let mut cfg = TrainConfig { seed: derive_seed(train_cfg.seed, &tag), ..train_cfg.clone() };
            if method != FinetuneMethod::Retrain {
                cfg.max_epochs = spec.continue_epochs.unwrap_or(cfg.max_epochs);
                cfg.initial_lr = spec.continue_lr.unwrap_or(cfg.initial_lr);
                cfg.min_lr = cfg.min_lr.min(cfg.initial_lr);
            }
            if options.verbose {
                eprintln!("method {} n = {n}", method as u8);
            }
            let (model, history, best_epoch) = if n == 0 && method != FinetuneMethod::Retrain {
                (baseline.model.clone(), vec![], None)
            } else {
                let (start, train_set) = match method {
                    FinetuneMethod::Retrain => {
                        let mc = ModelConfig { seed: derive_seed(baseline.model.config().seed, &tag), ..baseline.model.config().clone() };
                        (UNetModel::build(&mc)?, a_train.union(&b_added))
                    }
                    FinetuneMethod::Continue => (baseline.model.clone(), a_train.union(&b_added)),
                    FinetuneMethod::BOnly => (baseline.model.clone(), b_added),
                };
                let resume = match method {
                    FinetuneMethod::Retrain => None,
                    _ if spec.restart_optimizer => None,
                    _ => baseline.resume.clone(),
                };
                let dir = options.run_dir(&format!("method{}_n{n:03}", method as u8))?;
                let fit_opts = FitOptions { out_dir: dir.as_deref(), verbose: options.verbose, resume };
                let r = fit(start, &train_set, None, &cfg, &fit_opts)?;
                (r.model, r.history, r.best_epoch)
            };
            let point = SweepPoint {
                method,
                n,
                added_patients: added,
                best_epoch,
                epochs_run: history.len(),
                scores: score_sets(&model, sets, &cfg)?,
            };
            if let Some(dir) = options.run_dir(&format!("method{}_n{n:03}", method as u8))? {
                write_run(&dir, &history, &model, &point)?;
            }
            points.push(point);
        }
    }
    Ok(SweepResult { baseline: base_scores, b_eval_patients, points })
}

/// Change of every label on every evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub evaluation_set: String,
    pub label: String,
    pub baseline: f64,
    pub finetuned: f64,
    pub delta: f64,
}

pub fn improvement_summary(baseline: &SetScores, finetuned: &SetScores) -> Vec<Delta> {
    let mut out = vec![];
    for (set, (b, f)) in SetScores::NAMES.iter().zip(baseline.sets().into_iter().zip(finetuned.sets())) {
        for (i, label) in LABELS.iter().enumerate() {
            let (bv, fv) = (b.values()[i], f.values()[i]);
            out.push(Delta {
                evaluation_set: set.to_string(),
                label: label.to_string(),
                baseline: bv,
                finetuned: fv,
                delta: fv - bv,
            });
        }
    }
    out
}

/// Sweep point of `method` with the highest B-unseen DSC_labels.
pub fn best_point(points: &[SweepPoint], method: FinetuneMethod) -> Option<&SweepPoint> {
    points
        .iter()
        .filter(|p| p.method == method)
        .max_by(|a, b| a.scores.b_unseen.labels.total_cmp(&b.scores.b_unseen.labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: f64) -> LabelScores {
        LabelScores { labels: v, rv: v, lv: v, myo: v }
    }

    fn fold(i: usize, train: LabelScores, test: LabelScores, unseen: Option<LabelScores>) -> FoldMetrics {
        FoldMetrics {
            fold: i,
            train_patients: vec![],
            test_patients: vec![],
            best_epoch: None,
            epochs_run: 0,
            train,
            test,
            unseen,
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(n_schedule(5, 150, 10), vec![5, 21, 37, 53, 69, 85, 101, 117, 133, 150]);
        assert_eq!(n_schedule(2, 12, 10), vec![2, 3, 4, 5, 6, 7, 8, 9, 10, 12]);
        assert_eq!(FinetuneSpec::default().n_schedule.len(), 10);
        let bad = FinetuneSpec { n_schedule: vec![3, 3], ..Default::default() };
        assert!(bad.validate(10).unwrap_err().is_config());
        assert!(FinetuneSpec::default().validate(150).unwrap_err().is_config());
        assert!(FinetuneSpec::default().validate(151).is_ok());
        let bad = FinetuneSpec { continue_epochs: Some(0), ..Default::default() };
        assert!(bad.validate(151).is_err());
        let bad = FinetuneSpec { continue_lr: Some(-1e-4), ..Default::default() };
        assert!(bad.validate(151).is_err());
    }

    #[test]
    fn mean_sd_population() {
        let s = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[0.7; 4]).sd, 0.0);
    }

    #[test]
    fn gap_arithmetic_and_shape() {
        let folds: Vec<FoldMetrics> = (0..4).map(|i| fold(i, scores(0.917), scores(0.899), Some(scores(0.781)))).collect();
        let r = gap_report("A", Some("B"), &folds).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert!(r.rows.iter().all(|row| row.folds == 4));
        let gap = r.gap("train-unseen", "Labels").unwrap();
        assert_eq!(gap, r.row("train", "Labels").unwrap().mean - r.row("all", "Labels").unwrap().mean);
        assert_eq!(format!("{gap:.3}"), "0.136");

        let same: Vec<FoldMetrics> = (0..4).map(|i| fold(i, scores(0.8), scores(0.8), None)).collect();
        let r = gap_report("A", None, &same).unwrap();
        assert_eq!(r.gaps.len(), 4);
        assert!(r.gaps.iter().all(|g| g.value == 0.0));
    }

    #[test]
    fn gap_rejects_mismatched_folds() {
        let mut folds: Vec<FoldMetrics> = (0..4).map(|i| fold(i, scores(0.9), scores(0.8), Some(scores(0.7)))).collect();
        folds[2].unseen = None;
        assert!(gap_report("A", Some("B"), &folds).is_err());
        folds[2].unseen = Some(scores(0.7));
        folds[3].fold = 0;
        assert!(gap_report("A", Some("B"), &folds).is_err());
        assert!(gap_report("A", None, &[]).is_err());
    }

    #[test]
    fn deltas() {
        let base = SetScores { a_train: scores(0.9), a_test: scores(0.85), b_unseen: scores(0.7) };
        let d = improvement_summary(&base, &base);
        assert_eq!(d.len(), 12);
        assert!(d.iter().all(|x| x.delta == 0.0));
        let better = SetScores { b_unseen: scores(0.8), ..base };
        let d = improvement_summary(&base, &better);
        let b = d.iter().find(|x| x.evaluation_set == "B-unseen" && x.label == "Labels").unwrap();
        assert!((b.delta - 0.1).abs() < 1e-12);
    }

    #[test]
    fn method_serde() {
        let m: Vec<FinetuneMethod> = serde_json::from_str("[1,2,3]").unwrap();
        assert_eq!(m, FinetuneSpec::default().methods);
        assert!(serde_json::from_str::<FinetuneMethod>("4").is_err());
        assert_eq!(serde_json::to_string(&FinetuneMethod::BOnly).unwrap(), "3");
    }

    #[test]
    fn label_scores_order() {
        let d = LabelDice::from_per_class(vec![0.7, 0.8, 0.9]);
        let s = LabelScores::from_dice(&d);
        assert_eq!((s.rv, s.myo, s.lv), (0.7, 0.8, 0.9));
        assert_eq!(s.get("LV"), Some(0.9));
        assert_eq!(s.get("bogus"), None);
    }
}

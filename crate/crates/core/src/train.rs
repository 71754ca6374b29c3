//! Training loop: batch assembly, Adam, plateau learning-rate decay, early
//! stopping, validation and best-model selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetIndex, VolumeSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::{dsc_labels_with, LabelDice, LossSpec};
use crate::preprocess::{apply_pipeline, one_hot, quantile, sample_seed, PipelineConfig};
use crate::rng::{derive_seed, rng_from_seed, SeedPart};
use crate::tensor::{read_checkpoint, write_checkpoint, Real, Tape, Tensor};
use crate::unet::{RunMode, UNetModel};

/// Smoothing term of evaluation dice.
pub const EVAL_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub clip_quantile: f64,
    pub distortion_probability: f64,
    pub distortion_steps: usize,
    pub distortion_limit: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            clip_quantile: p.clip_quantile,
            distortion_probability: p.distortion_probability,
            distortion_steps: p.distortion_steps,
            distortion_limit: p.distortion_limit,
        }
    }
}

impl AugmentConfig {
    pub fn pipeline(&self, target_size: [usize; 2], train_mode: bool, seed: u64) -> PipelineConfig {
        PipelineConfig {
            target_size,
            clip_quantile: self.clip_quantile,
            distortion_probability: self.distortion_probability,
            distortion_steps: self.distortion_steps,
            distortion_limit: self.distortion_limit,
            train_mode,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub min_lr: f64,
    /// A monitored loss must drop by more than this to count as improved.
    pub min_delta: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: LossSpec,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            initial_lr: 1e-3,
            lr_factor: 0.5,
            lr_patience: 5,
            min_lr: 1e-8,
            min_delta: 1e-4,
            early_stop_patience: 10,
            max_epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss: LossSpec::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if !(self.min_lr > 0.0 && self.initial_lr >= self.min_lr) {
            return bad("learning rates must satisfy 0 < min_lr <= initial_lr");
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return bad("patiences must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam needs betas in [0, 1) and a positive epsilon");
        }
        if self.min_delta < 0.0 {
            return bad("min_delta must be non-negative");
        }
        self.loss.validate(NUM_CLASSES)?;
        self.augment.pipeline([16, 16], true, 0).validate()
    }
}

/// Adam moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Real>(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam: `p ← p − lr·m̂/(√v̂ + ε)`.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract("gradient and moment lists must match the parameters".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.numel() {
            return Err(Error::Contract(format!("gradient {i} has {} values for {} parameters", g.len(), p.numel())));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} at element {j} is {:?}", g[j])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gv = gv.as_f64();
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let update = lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.epsilon);
            *pv = T::lit(pv.as_f64() - update);
        }
    }
    Ok(())
}

/// Scheduler and early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub current_lr: f64,
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    /// Non-improving epochs since the last improvement or learning-rate drop.
    pub plateau_epochs: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            current_lr: cfg.initial_lr,
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            plateau_epochs: 0,
        }
    }

    /// Records one epoch's monitored loss; returns true when it improved.
    pub fn lr_schedule_update(&mut self, loss: f64, cfg: &TrainConfig) -> bool {
        self.epoch += 1;
        let improved = loss < self.best_loss - cfg.min_delta;
        if improved {
            self.best_loss = loss;
            self.epochs_since_improvement = 0;
            self.plateau_epochs = 0;
        } else {
            self.epochs_since_improvement += 1;
            self.plateau_epochs += 1;
            if self.plateau_epochs > cfg.lr_patience {
                self.current_lr = (self.current_lr * cfg.lr_factor).max(cfg.min_lr);
                self.plateau_epochs = 0;
            }
        }
        improved
    }

    pub fn should_stop(&self, cfg: &TrainConfig) -> bool {
        self.epochs_since_improvement > cfg.early_stop_patience
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when training without a validation set.
    pub val_loss: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub dsc_rv: Option<f64>,
    pub dsc_lv: Option<f64>,
    pub dsc_myo: Option<f64>,
    pub dsc_labels: Option<f64>,
}

/// Network-ready slices of a dataset, preprocessed once in inference mode.
pub struct EvalSet<T> {
    volumes: Vec<PreparedVolume<T>>,
}

struct PreparedVolume<T> {
    patient_id: String,
    phase: crate::data::Phase,
    image: Tensor<T>,
    truth: Tensor<T>,
}

fn volume_clip(v: &VolumeSample, q: f64) -> Result<f32> {
    quantile(&v.image.data, q)
}

/// Preprocesses one slice into network-ready `[1, H, W]` image and `[C, H, W]` one-hot values.
fn prepare_slice(
    v: &VolumeSample,
    slice: usize,
    clip: f32,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (img, msk) = apply_pipeline(&v.image.slice(slice), &v.mask.slice(slice), clip, pipeline, seed)?;
    Ok((img.data, one_hot(&msk, NUM_CLASSES)?))
}

fn stack<T: Real>(items: Vec<(Vec<f32>, Vec<f32>)>, size: [usize; 2]) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = items.len();
    let mut x = Vec::with_capacity(b * size[0] * size[1]);
    let mut y = Vec::with_capacity(b * NUM_CLASSES * size[0] * size[1]);
    for (img, oh) in items {
        x.extend(img.into_iter().map(|v| T::lit(v as f64)));
        y.extend(oh.into_iter().map(|v| T::lit(v as f64)));
    }
    Ok((
        Tensor::new(vec![b, 1, size[0], size[1]], x)?,
        Tensor::new(vec![b, NUM_CLASSES, size[0], size[1]], y)?,
    ))
}

impl<T: Real> EvalSet<T> {
    pub fn new(index: &DatasetIndex, target_size: [usize; 2], augment: &AugmentConfig) -> Result<Self> {
        let pipeline = augment.pipeline(target_size, false, 0);
        let volumes = index
            .volumes()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|v| {
                let clip = volume_clip(v, pipeline.clip_quantile)?;
                let slices = (0..v.image.slices())
                    .map(|s| prepare_slice(v, s, clip, &pipeline, 0))
                    .collect::<Result<Vec<_>>>()?;
                let (image, truth) = stack(slices, target_size)?;
                Ok(PreparedVolume { patient_id: v.patient_id.clone(), phase: v.phase, image, truth })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { volumes })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

/// Scores of one patient-phase volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub patient_id: String,
    pub phase: crate::data::Phase,
    pub loss: f64,
    pub dice: LabelDice,
}

/// Per-volume scores and their means. `dice.per_class` is ordered RV, MYO, LV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub volumes: Vec<VolumeScore>,
    pub mean_loss: f64,
    pub dice: LabelDice,
}

impl Evaluation {
    fn from_scores(volumes: Vec<VolumeScore>) -> Self {
        let n = volumes.len().max(1) as f64;
        let mean_loss = volumes.iter().map(|v| v.loss).sum::<f64>() / n;
        let classes = volumes.first().map_or(NUM_CLASSES - 1, |v| v.dice.per_class.len());
        let per_class = (0..classes)
            .map(|c| volumes.iter().map(|v| v.dice.per_class[c]).sum::<f64>() / n)
            .collect();
        Self { volumes, mean_loss, dice: LabelDice::from_per_class(per_class) }
    }
}

/// Runs `model` in inference mode over `batch`-sized chunks of `image`.
pub fn predict_chunked<T: Real>(model: &UNetModel<T>, image: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
    let [s, _, h, w] = image.dims4("volume")?;
    let plane = h * w;
    let mut out = Vec::with_capacity(s * model.config().num_classes * plane);
    for start in (0..s).step_by(batch.max(1)) {
        let end = (start + batch).min(s);
        let chunk = Tensor::new(vec![end - start, 1, h, w], image.data()[start * plane..end * plane].to_vec())?;
        out.extend_from_slice(model.predict(&chunk)?.data());
    }
    Tensor::new(vec![s, model.config().num_classes, h, w], out)
}

pub fn evaluate_prepared<T: Real>(
    model: &UNetModel<T>,
    set: &EvalSet<T>,
    loss: &LossSpec,
    batch: usize,
) -> Result<Evaluation> {
    let scores = set
        .volumes
        .iter()
        .map(|v| {
            let pred = predict_chunked(model, &v.image, batch)?;
            let (l, _) = loss.evaluate(&pred, &v.truth)?;
            Ok(VolumeScore {
                patient_id: v.patient_id.clone(),
                phase: v.phase,
                loss: l,
                dice: dsc_labels_with(&pred, &v.truth, EVAL_SMOOTH, loss.eval_background())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_scores(scores))
}

/// Per-volume loss and dice of a frozen model on every volume of `index`.
pub fn evaluate<T: Real>(model: &UNetModel<T>, index: &DatasetIndex, cfg: &TrainConfig) -> Result<Evaluation> {
    let set = EvalSet::new(index, model.config().input_size, &cfg.augment)?;
    evaluate_prepared(model, &set, &cfg.loss, cfg.batch_size)
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    /// Parameters of the epoch with the lowest monitored loss.
    pub model: UNetModel<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub state: TrainState,
    /// Optimizer moments after the last epoch.
    pub adam: AdamState,
}

/// Optimizer state carried over from an earlier run.
#[derive(Debug, Clone)]
pub struct Resume {
    pub lr: f64,
    pub adam: AdamState,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Where `last_good.bin` is written if the loss diverges.
    pub out_dir: Option<&'a Path>,
    pub verbose: bool,
    /// Continue with this learning rate and Adam moments instead of starting fresh.
    /// Improvement and plateau counters still start from zero.
    pub resume: Option<Resume>,
}

/// Trains `model` on every slice of `train`, validating on `val` after each epoch.
/// Without a validation set the training loss drives scheduling and model selection.
pub fn fit<T: Real>(
    mut model: UNetModel<T>,
    train: &DatasetIndex,
    val: Option<&DatasetIndex>,
    cfg: &TrainConfig,
    options: &FitOptions<'_>,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    if train.is_empty() || train.volumes().next().is_none() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(val) = val {
        let train_ids = train.patient_ids();
        if let Some(p) = val.patients.iter().find(|p| train_ids.contains(&p.id)) {
            return Err(Error::Config(format!("patient {} is in both training and validation sets", p.id)));
        }
    }
    let size = model.config().input_size;
    let volumes: Vec<&VolumeSample> = train.volumes().collect();
    let clips = volumes
        .iter()
        .map(|v| volume_clip(v, cfg.augment.clip_quantile))
        .collect::<Result<Vec<_>>>()?;
    let slices: Vec<(usize, usize)> = volumes
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| (0..v.image.slices()).map(move |s| (vi, s)))
        .collect();
    let val_set = val.map(|v| EvalSet::<T>::new(v, size, &cfg.augment)).transpose()?;
    let pipeline = cfg.augment.pipeline(size, true, cfg.seed);

    let mut state = TrainState::new(cfg);
    let mut adam = AdamState::new(model.params());
    if let Some(r) = &options.resume {
        let shapes_match = r.adam.m.len() == adam.m.len() && r.adam.m.iter().zip(&adam.m).all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            return Err(Error::Config("resumed optimizer state does not match the model".into()));
        }
        state.current_lr = r.lr.clamp(cfg.min_lr, cfg.initial_lr);
        adam = r.adam.clone();
    }
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_monitored = f64::INFINITY;

    for epoch in 0..cfg.max_epochs {
        let mut order = slices.clone();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, &[SeedPart::Str("shuffle"), SeedPart::from(epoch)])));
        let lr = state.current_lr;
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items = chunk
                .par_iter()
                .map(|&(vi, s)| {
                    let v = volumes[vi];
                    let seed = sample_seed(pipeline.seed, &v.patient_id, v.phase.as_str(), s, epoch);
                    prepare_slice(v, s, clips[vi], &pipeline, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let (x, truth) = stack::<T>(items, size)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let dropout_seed = derive_seed(cfg.seed, &[SeedPart::Str("dropout"), SeedPart::from(epoch), SeedPart::from(bi)]);
            let (pred, stats) = model.forward_graph(&mut tape, &vars, xv, &RunMode::train(dropout_seed))?;
            let loss = cfg.loss.on_tape(&mut tape, pred, &truth)?;
            let value = tape.value(loss).data()[0].as_f64();
            let step = if value.is_finite() {
                tape.backward(loss).and_then(|_| {
                    let grads: Vec<Vec<T>> = vars
                        .iter()
                        .map(|&v| tape.grad_data(v).map_or_else(|| vec![T::zero(); tape.value(v).numel()], <[T]>::to_vec))
                        .collect();
                    let mut next = model.params().to_vec();
                    adam_step(&mut next, &grads, &mut adam, lr, cfg)?;
                    Ok(next)
                })
            } else {
                Err(Error::NonFinite(format!("training loss {value} at epoch {epoch}, batch {bi}")))
            };
            let next = match step {
                Ok(next) => next,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = options.out_dir {
                        save_checkpoint(&dir.join("last_good.bin"), &model)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            model.params_mut().clone_from_slice(&next);
            model.update_running_stats(&stats);
            loss_sum += value * chunk.len() as f64;
            count += chunk.len();
        }
        let train_loss = loss_sum / count as f64;
        let eval = val_set.as_ref().map(|s| evaluate_prepared(&model, s, &cfg.loss, cfg.batch_size)).transpose()?;
        let monitored = eval.as_ref().map_or(train_loss, |e| e.mean_loss);
        let dice = eval.as_ref().map(|e| &e.dice);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: eval.as_ref().map(|e| e.mean_loss),
            lr,
            dsc_rv: dice.map(|d| d.per_class[0]),
            dsc_myo: dice.map(|d| d.per_class[1]),
            dsc_lv: dice.map(|d| d.per_class[2]),
            dsc_labels: dice.map(|d| d.mean),
        };
        if options.verbose {
            eprintln!(
                "epoch {epoch:>3}  train {train_loss:.4}  val {}  dice {}  lr {lr:.1e}",
                record.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                record.dsc_labels.map_or("-".into(), |v| format!("{v:.3}")),
            );
        }
        history.push(record);
        if monitored < best_monitored {
            best_monitored = monitored;
            best = model.clone();
            best_epoch = Some(epoch);
        }
        state.lr_schedule_update(monitored, cfg);
        if state.should_stop(cfg) {
            break;
        }
    }
    Ok(FitResult { model: best, history, best_epoch, state, adam })
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &UNetModel<T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, &model.to_checkpoint())?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<UNetModel<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let ckpt = read_checkpoint(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse { path: path.to_path_buf(), message },
        other => other,
    })?;
    UNetModel::from_checkpoint(&ckpt)
}

/// CSV of the training history with columns
/// `epoch,train_loss,val_loss,lr,dsc_rv,dsc_lv,dsc_myo,dsc_labels`.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    w.write_record(["epoch", "train_loss", "val_loss", "lr", "dsc_rv", "dsc_lv", "dsc_myo", "dsc_labels"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            opt(r.val_loss),
            r.lr.to_string(),
            opt(r.dsc_rv),
            opt(r.dsc_lv),
            opt(r.dsc_myo),
            opt(r.dsc_labels),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, Distribution, SynthSpec};
    use crate::losses::{dsc_labels, LossKind};
    use crate::unet::ModelConfig;

    fn schedule(losses: &[f64]) -> (Vec<f64>, Option<usize>) {
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(&cfg);
        let mut lrs = vec![];
        let mut stop = None;
        for (e, &l) in losses.iter().enumerate() {
            s.lr_schedule_update(l, &cfg);
            lrs.push(s.current_lr);
            if stop.is_none() && s.should_stop(&cfg) {
                stop = Some(e);
            }
        }
        (lrs, stop)
    }

    #[test]
    fn lr_drops_after_sixth_flat_epoch() {
        let (lrs, _) = schedule(&[1.0; 7]);
        assert_eq!(&lrs[..6], &[1e-3; 6]);
        assert_eq!(lrs[6], 5e-4);
    }

    #[test]
    fn decreasing_losses_keep_lr() {
        let losses: Vec<f64> = (0..50).map(|i| 1.0 - 0.01 * i as f64).collect();
        let (lrs, stop) = schedule(&losses);
        assert!(lrs.iter().all(|&l| l == 1e-3));
        assert_eq!(stop, None);
    }

    #[test]
    fn lr_floor_and_monotone() {
        let cfg = TrainConfig::default();
        let mut s = TrainState::new(&cfg);
        let mut prev = s.current_lr;
        for _ in 0..1000 {
            s.lr_schedule_update(1.0, &cfg);
            assert!(s.current_lr <= prev && s.current_lr >= cfg.min_lr);
            prev = s.current_lr;
        }
        assert_eq!(s.current_lr, 1e-8);
    }

    #[test]
    fn early_stop_counter() {
        // epoch 0 sets the best loss, epochs 1..=11 are flat
        let (_, stop) = schedule(&[1.0; 12]);
        assert_eq!(stop, Some(11));
        let (_, stop) = schedule(&[1.0; 11]);
        assert_eq!(stop, None);
        let mut losses = vec![1.0; 10];
        losses.push(0.5);
        losses.extend([0.5; 10]);
        let (_, stop) = schedule(&losses);
        assert_eq!(stop, None);
        // changes smaller than min_delta do not count
        let tiny: Vec<f64> = (0..12).map(|i| 1.0 - 1e-6 * i as f64).collect();
        assert_eq!(schedule(&tiny).1, Some(11));
    }

    #[test]
    fn adam_zero_lr_and_first_step() {
        let cfg = TrainConfig::default();
        let mut p = vec![Tensor::<f64>::new(vec![1], vec![0.7]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.3]], &mut st, 0.0, &cfg).unwrap();
        assert_eq!(p[0].data()[0], 0.7);

        for g in [0.5f64, -2.0, 1e-3] {
            let mut p = vec![Tensor::<f64>::new(vec![1], vec![0.0]).unwrap()];
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &[vec![g]], &mut st, 1e-3, &cfg).unwrap();
            // hand evaluation at t = 1: m̂ = g, v̂ = g²
            let expect = 1e-3 * g.abs() / (g.abs() + 1e-8);
            assert!((p[0].data()[0].abs() - expect).abs() < 1e-15);
            assert_eq!(p[0].data()[0].signum(), -g.signum());
            let alt = 1e-3 * g.abs() / (g.abs() + 1e-8 * (1.0f64 - 0.999).sqrt());
            assert!((p[0].data()[0].abs() - alt).abs() < 1e-8 * 1e-3 / g.abs());
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let cfg = TrainConfig::default();
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[vec![1.0, f32::NAN]], &mut st, 1e-3, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    fn tiny_setup() -> (ModelConfig, DatasetIndex, DatasetIndex, TrainConfig) {
        let spec = SynthSpec { slices: 2, ..SynthSpec::new(Distribution::A, 4) }.downscaled(2.0);
        let data = synth_generate(&spec, 1).unwrap();
        let ids = data.patient_ids();
        let train = data.subset(&ids[..3]);
        let val = data.subset(&ids[3..]);
        let model = ModelConfig { input_size: [32, 32], base_channels: 4, seed: 2, ..Default::default() };
        let cfg = TrainConfig { batch_size: 4, max_epochs: 3, seed: 5, ..Default::default() };
        (model, train, val, cfg)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (mc, train, val, mut cfg) = tiny_setup();
        cfg.max_epochs = 0;
        let m = UNetModel::<f32>::build(&mc).unwrap();
        let r = fit(m.clone(), &train, Some(&val), &cfg, &FitOptions::default()).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(r.model.params(), m.params());
    }

    #[test]
    fn fit_is_deterministic_and_selects_best() {
        let (mc, train, val, cfg) = tiny_setup();
        let m = UNetModel::<f32>::build(&mc).unwrap();
        let a = fit(m.clone(), &train, Some(&val), &cfg, &FitOptions::default()).unwrap();
        let b = fit(m, &train, Some(&val), &cfg, &FitOptions::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.history.len(), 3);
        let min = a.history.iter().map(|r| r.val_loss.unwrap()).fold(f64::INFINITY, f64::min);
        let best = evaluate(&a.model, &val, &cfg).unwrap();
        assert_eq!(best.mean_loss, min);
        assert!(a.history.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn fit_rejects_empty_and_overlapping_sets() {
        let (mc, train, val, cfg) = tiny_setup();
        let m = UNetModel::<f32>::build(&mc).unwrap();
        let empty = DatasetIndex { cohort: "A".into(), patients: vec![] };
        assert!(matches!(fit(m.clone(), &empty, None, &cfg, &FitOptions::default()), Err(Error::Config(_))));
        assert!(fit(m, &train, Some(&train), &cfg, &FitOptions::default()).is_err());
        let _ = val;
    }

    #[test]
    fn diverging_loss_saves_last_good() {
        let (mc, train, _, mut cfg) = tiny_setup();
        cfg.initial_lr = 1e30;
        cfg.min_lr = 1e-8;
        cfg.max_epochs = 3;
        cfg.loss = LossSpec::new(LossKind::Bce);
        let dir = tempfile::tempdir().unwrap();
        let m = UNetModel::<f32>::build(&mc).unwrap();
        let r = fit(m, &train, None, &cfg, &FitOptions { out_dir: Some(dir.path()), ..Default::default() });
        match r {
            Err(Error::NonFinite(_)) => assert!(dir.path().join("last_good.bin").exists()),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.history)),
        }
    }

    #[test]
    fn oracle_predictions_score_one() {
        let (_, _, val, cfg) = tiny_setup();
        let set = EvalSet::<f32>::new(&val, [32, 32], &cfg.augment).unwrap();
        for v in &set.volumes {
            let d = dsc_labels(&v.truth, &v.truth, EVAL_SMOOTH).unwrap();
            assert!(d.per_class.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn history_csv_layout() {
        let rows = vec![EpochRecord {
            epoch: 0,
            train_loss: 0.5,
            val_loss: None,
            lr: 1e-3,
            dsc_rv: None,
            dsc_lv: None,
            dsc_myo: None,
            dsc_labels: None,
        }];
        let text = history_csv(&rows).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_loss,lr,dsc_rv,dsc_lv,dsc_myo,dsc_labels");
        assert_eq!(lines.next().unwrap(), "0,0.5,,0.001,,,,");
    }
}

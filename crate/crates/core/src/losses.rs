//! Segmentation losses and dice metrics.
//!
//! Tensors of shape `[B, C, H, W]` are treated channel-wise: channel 0 is
//! the background and is left out of every loss when
//! [`LossSpec::ignore_background`] is set. Tensors of any other rank are
//! treated as a single foreground channel.
//!
//! All sums run in `f64` regardless of the tensor precision.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Lower/upper clamp applied to predictions inside logarithms.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "BCE")]
    Bce,
    #[serde(rename = "WCE")]
    Wce,
    #[serde(rename = "JDL")]
    Jdl,
    #[serde(rename = "SDL")]
    Sdl,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Bce, LossKind::Wce, LossKind::Jdl, LossKind::Sdl];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "BCE",
            LossKind::Wce => "WCE",
            LossKind::Jdl => "JDL",
            LossKind::Sdl => "SDL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub kind: LossKind,
    /// One weight per class channel, background included. WCE only.
    pub class_weights: Vec<f64>,
    pub smooth: f64,
    pub ignore_background: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Sdl,
            class_weights: Vec::new(),
            smooth: 1.0,
            ignore_background: true,
        }
    }
}

impl LossSpec {
    /// Background score to use when binarizing predictions of a model trained
    /// with this loss: `None` when the background channel was trained.
    pub fn eval_background(&self) -> Option<f64> {
        self.ignore_background.then_some(0.5)
    }

    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// WCE spec with the given per-class weights.
    pub fn weighted(weights: Vec<f64>) -> Self {
        Self {
            kind: LossKind::Wce,
            class_weights: weights,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.smooth >= 0.0) {
            return Err(Error::Config(format!("smooth must be >= 0, got {}", self.smooth)));
        }
        if self.kind == LossKind::Wce {
            if self.class_weights.len() != num_classes {
                return Err(Error::Config(format!(
                    "WCE needs {num_classes} class weights, got {}",
                    self.class_weights.len()
                )));
            }
            if self.class_weights.iter().any(|w| !(*w >= 0.0)) {
                return Err(Error::Config("class weights must be non-negative".into()));
            }
        }
        let foreground = if self.ignore_background { num_classes.saturating_sub(1) } else { num_classes };
        if foreground == 0 {
            return Err(Error::Config(
                "loss needs at least one foreground class".into(),
            ));
        }
        Ok(())
    }

    /// Loss value and its gradient with respect to `pred`.
    pub fn evaluate<T: Real>(&self, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(f64, Vec<T>)> {
        let layout = Layout::of(pred, truth)?;
        self.validate(layout.channels)?;
        let channels = layout.included(self.ignore_background);
        let (p, g) = (pred.data(), truth.data());
        match self.kind {
            LossKind::Bce => {
                check_binary(truth)?;
                Ok(cross_entropy(p, g, &layout, &channels, None))
            }
            LossKind::Wce => {
                check_binary(truth)?;
                Ok(cross_entropy(p, g, &layout, &channels, Some(&self.class_weights)))
            }
            LossKind::Jdl => Ok(jaccard_distance(p, g, &layout, &channels, self.smooth)),
            LossKind::Sdl => Ok(soft_dice_loss(p, g, &layout, &channels, self.smooth)),
        }
    }

    /// Records the loss on `tape` as a function of `pred`.
    pub fn on_tape<T: Real>(&self, tape: &mut Tape<T>, pred: Var, truth: &Tensor<T>) -> Result<Var> {
        let (value, grad) = self.evaluate(tape.value(pred), truth)?;
        tape.scalar_fn(pred, T::lit(value), grad)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    batch: usize,
    channels: usize,
    plane: usize,
}

impl Layout {
    fn of<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(shape_err!(
                "prediction {:?} and truth {:?} differ in shape",
                pred.shape(),
                truth.shape()
            ));
        }
        Ok(match *pred.shape() {
            [b, c, h, w] => Layout { batch: b, channels: c, plane: h * w },
            _ => Layout { batch: 1, channels: 1, plane: pred.numel() },
        })
    }

    fn included(&self, ignore_background: bool) -> Vec<usize> {
        let start = usize::from(ignore_background && self.channels > 1);
        (start..self.channels).collect()
    }

    fn ranges(&self, c: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.batch).map(move |b| {
            let s = (b * self.channels + c) * self.plane;
            s..s + self.plane
        })
    }
}

fn check_binary<T: Real>(truth: &Tensor<T>) -> Result<()> {
    if truth.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation("ground truth must be binary {0, 1}".into()));
    }
    Ok(())
}

fn cross_entropy<T: Real>(
    p: &[T],
    g: &[T],
    layout: &Layout,
    channels: &[usize],
    weights: Option<&[f64]>,
) -> (f64, Vec<T>) {
    let n = (layout.batch * channels.len() * layout.plane) as f64;
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0;
    for &c in channels {
        let w = weights.map_or(1.0, |ws| ws[c]);
        for range in layout.ranges(c) {
            for i in range {
                let raw = p[i].as_f64();
                let pc = raw.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                let gv = g[i].as_f64();
                total += w * (gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln());
                if raw > LOG_CLAMP && raw < 1.0 - LOG_CLAMP {
                    grad[i] = T::lit(-w * (gv / pc - (1.0 - gv) / (1.0 - pc)) / n);
                }
            }
        }
    }
    (-total / n, grad)
}

/// Sums `(Σ g·p, Σ g, Σ p)` over the given channels.
fn overlap<T: Real>(p: &[T], g: &[T], layout: &Layout, channels: &[usize]) -> (f64, f64, f64) {
    let (mut inter, mut gs, mut ps) = (0.0, 0.0, 0.0);
    for &c in channels {
        for range in layout.ranges(c) {
            for i in range {
                let (pv, gv) = (p[i].as_f64(), g[i].as_f64());
                inter += gv * pv;
                gs += gv;
                ps += pv;
            }
        }
    }
    (inter, gs, ps)
}

fn jaccard_distance<T: Real>(
    p: &[T],
    g: &[T],
    layout: &Layout,
    channels: &[usize],
    smooth: f64,
) -> (f64, Vec<T>) {
    let (inter, gs, ps) = overlap(p, g, layout, channels);
    let num = inter + smooth;
    let den = gs + ps - inter + smooth;
    let mut grad = vec![T::zero(); p.len()];
    if den == 0.0 {
        // empty truth, empty prediction and smooth 0: treat as perfect overlap
        return (0.0, grad);
    }
    for &c in channels {
        for range in layout.ranges(c) {
            for i in range {
                let gv = g[i].as_f64();
                // d/dp of num/den where num' = g and den' = 1 - g
                let d = (gv * den - num * (1.0 - gv)) / (den * den);
                grad[i] = T::lit(-d);
            }
        }
    }
    (1.0 - num / den, grad)
}

fn soft_dice_loss<T: Real>(
    p: &[T],
    g: &[T],
    layout: &Layout,
    channels: &[usize],
    smooth: f64,
) -> (f64, Vec<T>) {
    let k = channels.len() as f64;
    let mut grad = vec![T::zero(); p.len()];
    let mut dice_sum = 0.0;
    for &c in channels {
        let (inter, gs, ps) = overlap(p, g, layout, std::slice::from_ref(&c));
        let num = 2.0 * inter + smooth;
        let den = gs + ps + smooth;
        if den == 0.0 {
            dice_sum += 1.0;
            continue;
        }
        dice_sum += num / den;
        for range in layout.ranges(c) {
            for i in range {
                let gv = g[i].as_f64();
                let d = (2.0 * gv * den - num) / (den * den);
                grad[i] = T::lit(-d / k);
            }
        }
    }
    (1.0 - dice_sum / k, grad)
}

/// Mean binary cross-entropy over every element.
pub fn bce<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let spec = LossSpec { ignore_background: false, ..LossSpec::new(LossKind::Bce) };
    Ok(spec.evaluate(pred, truth)?.0)
}

/// Class-weighted cross-entropy; `weights` has one entry per channel.
pub fn wce<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, weights: &[f64]) -> Result<f64> {
    let spec = LossSpec { ignore_background: false, ..LossSpec::weighted(weights.to_vec()) };
    Ok(spec.evaluate(pred, truth)?.0)
}

/// Jaccard distance with every element pooled into one overlap ratio.
pub fn jdl<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, smooth: f64) -> Result<f64> {
    let spec = LossSpec { smooth, ignore_background: false, ..LossSpec::new(LossKind::Jdl) };
    Ok(spec.evaluate(pred, truth)?.0)
}

/// Soft dice coefficient `(2 Σ g·p + s) / (Σ g + Σ p + s)` over every element.
pub fn dsc_class<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, smooth: f64) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(shape_err!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        ));
    }
    Ok(dice_of_slices(pred.data(), truth.data(), smooth))
}

fn dice_of_slices<T: Real>(p: &[T], g: &[T], smooth: f64) -> f64 {
    let (mut inter, mut gs, mut ps) = (0.0, 0.0, 0.0);
    for (&pv, &gv) in p.iter().zip(g) {
        let (pv, gv) = (pv.as_f64(), gv.as_f64());
        inter += gv * pv;
        gs += gv;
        ps += pv;
    }
    let den = gs + ps + smooth;
    if den == 0.0 {
        1.0
    } else {
        (2.0 * inter + smooth) / den
    }
}

/// Soft dice loss averaged over foreground channels of a `[B, C, H, W]` pair.
pub fn sdl<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, smooth: f64) -> Result<f64> {
    let spec = LossSpec { smooth, ..LossSpec::new(LossKind::Sdl) };
    Ok(spec.evaluate(pred, truth)?.0)
}

/// Per-class dice of foreground labels plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDice {
    /// Dice of classes `1..C` in class order.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

impl LabelDice {
    pub fn from_per_class(per_class: Vec<f64>) -> Self {
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        Self { per_class, mean }
    }
}

/// Index of the largest channel at each pixel of a `[B, C, H, W]` tensor.
/// Ties go to the lowest channel index.
pub fn argmax_channels<T: Real>(pred: &Tensor<T>) -> Result<Vec<u8>> {
    argmax_with_background(pred, None)
}

/// Argmax where channel 0 is optionally replaced by a constant score. A model
/// trained with the background channel excluded leaves that channel untrained,
/// so its output carries no information; `Some(0.5)` then labels a pixel
/// background exactly when no foreground probability exceeds one half.
pub fn argmax_with_background<T: Real>(pred: &Tensor<T>, background: Option<f64>) -> Result<Vec<u8>> {
    let [b, c, h, w] = pred.dims4("prediction")?;
    let plane = h * w;
    let d = pred.data();
    let mut labels = vec![0u8; b * plane];
    for bi in 0..b {
        for i in 0..plane {
            let score = |ch: usize| match (ch, background) {
                (0, Some(v)) => v,
                _ => d[(bi * c + ch) * plane + i].as_f64(),
            };
            let mut best = 0;
            let mut top = score(0);
            for ch in 1..c {
                let v = score(ch);
                if v > top {
                    best = ch;
                    top = v;
                }
            }
            labels[bi * plane + i] = best as u8;
        }
    }
    Ok(labels)
}

/// Evaluation dice: predictions are binarized by per-pixel argmax over all
/// channels (background included), then each foreground class is scored with
/// [`dsc_class`] pooled over the whole batch.
pub fn dsc_labels<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, smooth: f64) -> Result<LabelDice> {
    dsc_labels_with(pred, truth, smooth, None)
}

/// [`dsc_labels`] with the background score overridden as in
/// [`argmax_with_background`].
pub fn dsc_labels_with<T: Real>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    smooth: f64,
    background: Option<f64>,
) -> Result<LabelDice> {
    let [b, c, h, w] = pred.dims4("prediction")?;
    if truth.shape() != pred.shape() {
        return Err(shape_err!("truth shape {:?} differs from prediction", truth.shape()));
    }
    if c < 2 {
        return Err(Error::Config("dice over labels needs at least one foreground class".into()));
    }
    let labels = argmax_with_background(pred, background)?;
    let plane = h * w;
    let g = truth.data();
    let per_class = (1..c)
        .map(|ch| {
            let (mut inter, mut gs, mut ps) = (0.0, 0.0, 0.0);
            for bi in 0..b {
                for i in 0..plane {
                    let pv = f64::from(u8::from(labels[bi * plane + i] as usize == ch));
                    let gv = g[(bi * c + ch) * plane + i].as_f64();
                    inter += gv * pv;
                    gs += gv;
                    ps += pv;
                }
            }
            let den = gs + ps + smooth;
            if den == 0.0 {
                1.0
            } else {
                (2.0 * inter + smooth) / den
            }
        })
        .collect();
    Ok(LabelDice::from_per_class(per_class))
}

//! Finite-difference gradient checks of every tape op and of a tiny U-Net
//! under each loss, in `f64`.

use rand::Rng;

use crate::error::Result;
use crate::losses::{LossKind, LossSpec};
use crate::rng::{derive_seed, rng_from_seed, SeedPart};
use crate::tensor::{grad_check_many, BnMode, Coords, GradCheckReport, Tape, Tensor, Var};
use crate::unet::{ModelConfig, RunMode, UNetModel};

/// Step of the central differences.
pub const STEP: f64 = 1e-5;
/// Largest relative error accepted.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalarizes `y` as `Σ y·w` with fixed random weights so every output
/// coordinate reaches the gradient with a distinct factor.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.value(y).shape(), seed));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    coords: Coords,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    Ok(CheckResult { name: name.to_string(), report: grad_check_many(f, &inputs, STEP, coords)? })
}

/// One-hot truth with blocky regions so every class is present.
fn blocky_truth(b: usize, c: usize, size: usize) -> Tensor<f64> {
    let plane = size * size;
    let mut truth = vec![0.0; b * c * plane];
    for bi in 0..b {
        for i in 0..plane {
            let label = (i / size / 9 + i % size / 11 + bi) % c;
            truth[(bi * c + label) * plane + i] = 1.0;
        }
    }
    Tensor::new(vec![b, c, size, size], truth).unwrap()
}

/// Per-op checks over every coordinate of small inputs.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let s = |tag: &str| derive_seed(seed, &[SeedPart::Str(tag)]);
    let all = Coords::All;
    // max pooling is not differentiable at ties; distinct values keep the check meaningful
    let mut pool_in = random(&[2, 2, 4, 6], s("pool"));
    pool_in.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += i as f64 * 1e-2);
    // ELU is checked away from its kink at zero
    let mut elu_in = random(&[2, 3, 3, 3], s("elu"));
    elu_in.data_mut().iter_mut().for_each(|v| *v = if v.abs() < 0.05 { 0.3 } else { *v * 2.0 });
    let w = |tag: &str| s(&format!("{tag}-weights"));
    let mut out = vec![
        check("conv2d", vec![random(&[2, 2, 5, 4], s("conv-x")), random(&[3, 2, 3, 3], s("conv-k")), random(&[3], s("conv-b"))], all, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, w("conv"))
        })?,
        check("conv_transpose2d k2", vec![random(&[2, 3, 3, 2], s("up2-x")), random(&[3, 2, 2, 2], s("up2-k")), random(&[2], s("up2-b"))], all, |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 0, 0)?;
            weighted_sum(t, y, w("up2"))
        })?,
        check("conv_transpose2d k3", vec![random(&[2, 2, 3, 3], s("up3-x")), random(&[2, 3, 3, 3], s("up3-k")), random(&[3], s("up3-b"))], all, |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(t, y, w("up3"))
        })?,
        check("maxpool2", vec![pool_in], all, |t, v| {
            let y = t.maxpool2(v[0])?;
            weighted_sum(t, y, w("pool"))
        })?,
        check("batchnorm2d", vec![random(&[3, 2, 3, 3], s("bn-x")), random(&[2], s("bn-g")), random(&[2], s("bn-b"))], all, |t, v| {
            let (y, _) = t.batchnorm2d(v[0], v[1], v[2], BnMode::Batch)?;
            weighted_sum(t, y, w("bn"))
        })?,
        check("elu", vec![elu_in], all, |t, v| {
            let y = t.elu(v[0]);
            weighted_sum(t, y, w("elu"))
        })?,
        check("sigmoid", vec![random(&[2, 3, 3], s("sig"))], all, |t, v| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, w("sig"))
        })?,
        check("dropout", vec![random(&[2, 2, 4, 4], s("drop"))], all, |t, v| {
            let y = t.dropout(v[0], 0.4, true, 17)?;
            weighted_sum(t, y, w("drop"))
        })?,
        check("concat_channels", vec![random(&[2, 1, 3, 3], s("cat-a")), random(&[2, 2, 3, 3], s("cat-b"))], all, |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            weighted_sum(t, y, w("cat"))
        })?,
        check("mul", vec![random(&[4, 3], s("mul-a")), random(&[4, 3], s("mul-b"))], all, |t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum(y))
        })?,
    ];
    let truth = blocky_truth(2, 4, 4);
    let pred = random(&[2, 4, 4, 4], s("loss-p")).map(|v| 0.5 + 0.4 * v);
    for kind in LossKind::ALL {
        let spec = loss_spec(kind);
        let truth = truth.clone();
        out.push(check(&format!("loss {}", kind.name()), vec![pred.clone()], all, move |t, v| spec.on_tape(t, v[0], &truth))?);
    }
    Ok(out)
}

fn loss_spec(kind: LossKind) -> LossSpec {
    match kind {
        LossKind::Wce => LossSpec::weighted(vec![0.5, 2.0, 1.5, 1.0]),
        k => LossSpec::new(k),
    }
}

/// Full U-Net (32×32, base 4, batch 2) in train mode under each loss, over a
/// seeded sample of `per_input` coordinates of the image and every parameter tensor.
pub fn network_checks(seed: u64, per_input: usize) -> Result<Vec<CheckResult>> {
    let cfg = ModelConfig { input_size: [32, 32], base_channels: 4, seed, ..ModelConfig::default() };
    let model = UNetModel::<f64>::build(&cfg)?;
    let x = random(&[2, 1, 32, 32], derive_seed(seed, &[SeedPart::Str("image")]));
    let truth = blocky_truth(2, 4, 32);
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().cloned());
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let spec = loss_spec(kind);
            let mode = RunMode::train(derive_seed(seed, &[SeedPart::Str("dropout")]));
            check(
                &format!("unet 32x32 base 4 + {}", kind.name()),
                inputs.clone(),
                Coords::Sample { per_input, seed: derive_seed(seed, &[SeedPart::Str(kind.name())]) },
                |t, v| {
                    let (y, _) = model.forward_graph(t, &v[1..], v[0], &mode)?;
                    spec.on_tape(t, y, &truth)
                },
            )
        })
        .collect()
}

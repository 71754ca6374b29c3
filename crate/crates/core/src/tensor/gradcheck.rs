//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Smallest denominator used when forming relative errors, so coordinates whose
/// true gradient is zero are judged by absolute deviation instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    fn merge(&mut self, other: &GradCheckReport) {
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.max_absolute_error = self.max_absolute_error.max(other.max_absolute_error);
        self.coordinates_checked += other.coordinates_checked;
    }
}

/// Which coordinates of each input to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// At most `per_input` coordinates per input, drawn without replacement.
    Sample { per_input: usize, seed: u64 },
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    Ok((tape, vars, out))
}

fn scalar_at<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).data()[0].as_f64())
}

/// Compares tape gradients of `f` with respect to every input against
/// `(f(x + h) - f(x - h)) / 2h`.
pub fn grad_check_many<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    h: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match tape.grad_data(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        coordinates_checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_input, seed } if per_input < n => {
                let mut rng = rng_from_seed(seed.wrapping_add(which as u64));
                let mut idx = sample(&mut rng, n, per_input).into_vec();
                idx.sort_unstable();
                idx
            }
            Coords::Sample { .. } => (0..n).collect(),
        };
        let mut local = GradCheckReport {
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
            coordinates_checked: 0,
        };
        for idx in picks {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = T::lit(orig.as_f64() + h);
            let plus = scalar_at(&f, &work)?;
            work[which].data_mut()[idx] = T::lit(orig.as_f64() - h);
            let minus = scalar_at(&f, &work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[which][idx];
            local.max_relative_error = local.max_relative_error.max(relative_error(a, numeric));
            local.max_absolute_error = local.max_absolute_error.max((a - numeric).abs());
            local.coordinates_checked += 1;
        }
        report.merge(&local);
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`] over every coordinate.
pub fn grad_check<T, F>(f: F, input: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(
        |tape: &mut Tape<T>, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(input),
        h,
        Coords::All,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.1, -4.0, 2.5, 9.0, 0.0, 1.0]).unwrap();
        let r = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert_eq!(r.coordinates_checked, 6);
        assert!(r.max_relative_error < 1e-9, "{r:?}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: Var| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&mut tape, v).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad_data(v).unwrap(), &[2.0, 4.0, 6.0]);
        let r = grad_check(f, &x, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = Tensor::<f64>::zeros(&[2]);
        let err = grad_check(|_, v| Ok(v), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}

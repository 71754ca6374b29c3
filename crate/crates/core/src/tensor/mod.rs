//! Dense tensors and the reverse-mode tape used to train the network.

mod checkpoint;
mod conv;
mod gradcheck;
mod tape;

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointEntry};
pub use gradcheck::{grad_check, grad_check_many, relative_error, Coords, GradCheckReport, RELATIVE_FLOOR};
pub use tape::{BatchStats, BnMode, Tape, Var, BN_EPSILON};

/// Floating point precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Scalar element type. Implemented for `f32` (training) and `f64` (gradient checks).
pub trait Real:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    const PRECISION: Precision;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_slice(bytes: &[u8]) -> Vec<Self>;

    /// `c = alpha * a·b + beta * c` on strided matrices, `a` is m×k and `b` is k×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Real for $t {
            const PRECISION: Precision = $prec;

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
                values.iter().flat_map(|v| v.to_le_bytes()).collect()
            }

            fn from_le_slice(bytes: &[u8]) -> Vec<Self> {
                const W: usize = std::mem::size_of::<$t>();
                bytes
                    .chunks_exact(W)
                    .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= span(m, k, rsa, csa));
                assert!(b.len() as isize >= span(k, n, rsb, csb));
                assert!(c.len() as isize >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every strided access inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, Precision::F32, matrixmultiply::sgemm);
impl_real!(f64, Precision::F64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Returns `[B, C, H, W]` or a shape error naming `what`.
    pub fn dims4(&self, what: &str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(shape_err!("{what} must be 4-D, got {:?}", self.shape)),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel range `[start, end)` of a `[B, C, H, W]` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let [b, c, h, w] = self.dims4("input")?;
        if start >= end || end > c {
            return Err(shape_err!("channel range {start}..{end} outside 0..{c}"));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * (end - start) * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Tensor::new(vec![b, end - start, h, w], data)
    }
}

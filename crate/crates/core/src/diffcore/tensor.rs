use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Scalar type the differentiable ops are generic over (`f32` for training,
/// `f64` for finite-difference verification).
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c[m, n] += a[m, k] * b[k, n]` over arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_s: (isize, isize), b: &[Self], b_s: (isize, isize), c: &mut [Self], c_s: (isize, isize));
}

impl Real for f32 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[f32], a_s: (isize, isize), b: &[f32], b_s: (isize, isize), c: &mut [f32], c_s: (isize, isize)) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        // SAFETY: callers pass slices covering the strided extents.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), a_s.0, a_s.1, b.as_ptr(), b_s.0, b_s.1, 1.0, c.as_mut_ptr(), c_s.0, c_s.1);
        }
    }
}

impl Real for f64 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_s: (isize, isize), b: &[f64], b_s: (isize, isize), c: &mut [f64], c_s: (isize, isize)) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        // SAFETY: callers pass slices covering the strided extents.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), a_s.0, a_s.1, b.as_ptr(), b_s.0, b_s.1, 1.0, c.as_mut_ptr(), c_s.0, c_s.1);
        }
    }
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
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

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }
}

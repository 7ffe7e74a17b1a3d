//! Dense row-major tensors and the scalar types they can hold.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous buffer. Gradient
//! tracking (the `requires_grad` flag and the accumulated gradient) lives on
//! the [`Tape`](crate::autograd::Tape) node that wraps a tensor, so values can
//! be shared freely between tapes and threads.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = a · b + beta · c` where `a` is `m×k`, `b` is `k×n` and `c` is
    /// `m×n`, each described by (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_row_stride: usize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, strides: (usize, usize)) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * strides.0 + (cols - 1) * strides.1;
        assert!(last < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_row_stride: usize,
            ) {
                check_gemm_extent(a.len(), m, k, a_strides);
                check_gemm_extent(b.len(), k, n, b_strides);
                check_gemm_extent(c.len(), m, n, (c_row_stride, 1));
                // SAFETY: extents checked above; c does not alias a or b.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_row_stride as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {expected} elements, buffer has {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// The `index`-th slab along the leading axis.
    pub fn index_first(&self, index: usize) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("index_first", "rank-0 tensor"))?;
        if index >= outer {
            return Err(Error::shape(
                "index_first",
                format!("index {index} out of range for {outer}"),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let shown: Vec<_> = self.data.iter().take(PREVIEW).collect();
        write!(f, " {shown:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

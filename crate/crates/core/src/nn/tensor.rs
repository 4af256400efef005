use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type the network runs in. Training uses `f32`; the
/// gradient checker uses `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Stack of equally sized planes, plane-major and row-major within a plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub planes: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(planes: usize, width: usize, height: usize) -> Self {
        Self {
            planes,
            width,
            height,
            data: vec![T::zero(); planes * width * height],
        }
    }

    pub fn from_vec(planes: usize, width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), planes * width * height, "tensor data length");
        Self {
            planes,
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn plane(&self, p: usize) -> &[T] {
        let n = self.area();
        &self.data[p * n..(p + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, p: usize) -> &mut [T] {
        let n = self.area();
        &mut self.data[p * n..(p + 1) * n]
    }

    #[inline]
    pub fn at(&self, p: usize, x: usize, y: usize) -> T {
        self.data[p * self.area() + y * self.width + x]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            planes: self.planes,
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

//! Named parameter tensors shared by the optimizer, gradient checks and the
//! checkpoint writer.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distr::{Distribution, Uniform};
use rand::Rng;

/// Read-only view of one named tensor.
#[derive(Debug, Clone)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A fixed, ordered collection of real-valued tensors.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same
/// order; gradient containers share the type of the parameters they
/// describe, so zipping the two lists pairs each value with its gradient.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += scale * other`, elementwise over matching tensors.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.len(), src.data.len());
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn view1<'a>(name: String, a: &'a Array1<f64>) -> TensorView<'a> {
    TensorView {
        name,
        shape: vec![a.len()],
        data: a.as_slice().expect("contiguous tensor"),
    }
}

pub(crate) fn view2<'a>(name: String, a: &'a Array2<f64>) -> TensorView<'a> {
    TensorView {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("contiguous tensor"),
    }
}

pub(crate) fn slice1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous tensor")
}

pub(crate) fn slice2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous tensor")
}

/// Glorot-uniform matrix: entries in ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// `a ⊗ b` as an `a.len() x b.len()` matrix.
pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    &a.insert_axis(Axis(1)) * &b.insert_axis(Axis(0))
}

//! Energy functions between a projected composed entity and its ontology
//! embedding, and the per-sentence mean-energy regularizer.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use thiserror::Error;

use crate::params::{outer, slice1, slice2, view1, view2, xavier_uniform, Parameters, TensorView};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("angular energy is undefined for a zero vector ({0})")]
    ZeroVector(&'static str),
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{composed} composed entities but {targets} targets")]
    CountMismatch { composed: usize, targets: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("unknown energy kind {0:?} (expected euclidean, absolute or angular)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnergyKind {
    /// `‖a − b‖₂`
    Euclidean,
    /// `‖a − b‖₂²`, available for experiments; not one of the three defaults.
    SquaredEuclidean,
    /// `‖a − b‖₁`
    Absolute,
    /// Arc length between directions, `arccos` of the clamped cosine.
    Angular,
}

impl EnergyKind {
    pub const STANDARD: [EnergyKind; 3] =
        [EnergyKind::Euclidean, EnergyKind::Absolute, EnergyKind::Angular];

    pub fn as_str(self) -> &'static str {
        match self {
            EnergyKind::Euclidean => "euclidean",
            EnergyKind::SquaredEuclidean => "squared_euclidean",
            EnergyKind::Absolute => "absolute",
            EnergyKind::Angular => "angular",
        }
    }
}

impl fmt::Display for EnergyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnergyKind {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(EnergyKind::Euclidean),
            "squared_euclidean" => Ok(EnergyKind::SquaredEuclidean),
            "absolute" => Ok(EnergyKind::Absolute),
            "angular" => Ok(EnergyKind::Angular),
            other => Err(EnergyError::UnknownKind(other.to_string())),
        }
    }
}

/// An energy function with its angular clamping margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    kind: EnergyKind,
    epsilon: f64,
}

impl Energy {
    pub fn new(kind: EnergyKind, epsilon: f64) -> Result<Self, EnergyError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(EnergyError::InvalidEpsilon(epsilon));
        }
        Ok(Self { kind, epsilon })
    }

    pub fn kind(&self) -> EnergyKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn value(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64, EnergyError> {
        check_lengths(a, b)?;
        Ok(match self.kind {
            EnergyKind::Euclidean => squared_distance(a, b).sqrt(),
            EnergyKind::SquaredEuclidean => squared_distance(a, b),
            EnergyKind::Absolute => a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum(),
            EnergyKind::Angular => {
                let (cos, _, _) = cosine(a, b)?;
                cos.clamp(-1.0 + self.epsilon, 1.0 - self.epsilon).acos()
            }
        })
    }

    /// Energy and its gradient with respect to `a`.
    pub fn value_and_grad(
        &self,
        a: ArrayView1<f64>,
        b: ArrayView1<f64>,
    ) -> Result<(f64, Array1<f64>), EnergyError> {
        check_lengths(a, b)?;
        let diff = &a - &b;
        Ok(match self.kind {
            EnergyKind::Euclidean => {
                let norm = diff.dot(&diff).sqrt();
                if norm == 0.0 {
                    (0.0, Array1::zeros(a.len()))
                } else {
                    (norm, diff / norm)
                }
            }
            EnergyKind::SquaredEuclidean => (diff.dot(&diff), diff * 2.0),
            EnergyKind::Absolute => {
                let value = diff.iter().map(|d| d.abs()).sum();
                let grad = diff.mapv(|d| if d == 0.0 { 0.0 } else { d.signum() });
                (value, grad)
            }
            EnergyKind::Angular => {
                let (cos, norm_a, norm_b) = cosine(a, b)?;
                let lo = -1.0 + self.epsilon;
                let hi = 1.0 - self.epsilon;
                let value = cos.clamp(lo, hi).acos();
                if cos <= lo || cos >= hi {
                    (value, Array1::zeros(a.len()))
                } else {
                    // d/da cos = b / (|a||b|) − cos · a / |a|²
                    let d_cos = &b / (norm_a * norm_b) - &(&a * (cos / (norm_a * norm_a)));
                    let d_theta = -1.0 / (1.0 - cos * cos).sqrt();
                    (value, d_cos * d_theta)
                }
            }
        })
    }
}

impl Default for Energy {
    fn default() -> Self {
        Self {
            kind: EnergyKind::Euclidean,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

fn check_lengths(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(), EnergyError> {
    if a.len() != b.len() {
        return Err(EnergyError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity and both norms. Each product term is commutative, so
/// the result is bitwise symmetric in `(a, b)`.
fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, f64, f64), EnergyError> {
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 {
        return Err(EnergyError::ZeroVector("first argument"));
    }
    if norm_b == 0.0 {
        return Err(EnergyError::ZeroVector("second argument"));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok((dot / (norm_a * norm_b), norm_a, norm_b))
}

/// Affine map from the composition space into the ontology embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `d_e x d_c`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Projection {
    pub fn zeros(d_e: usize, d_c: usize) -> Self {
        Self {
            w: Array2::zeros((d_e, d_c)),
            b: Array1::zeros(d_e),
        }
    }

    pub fn init<R: Rng + ?Sized>(d_e: usize, d_c: usize, rng: &mut R) -> Self {
        Self {
            w: xavier_uniform(d_e, d_c, rng),
            b: Array1::zeros(d_e),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w: Array2::eye(d),
            b: Array1::zeros(d),
        }
    }

    pub fn apply(&self, c: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&c) + &self.b
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }
}

impl Parameters for Projection {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            view2("projection.w".into(), &self.w),
            view1("projection.b".into(), &self.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice2(&mut self.w), slice1(&mut self.b)]
    }
}

/// Mean energy over one sentence's entities and its exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerResult {
    pub value: f64,
    /// Per-entity energies in input order.
    pub energies: Vec<f64>,
    pub grad_projection: Projection,
    /// Gradient with respect to each composed entity vector.
    pub grad_composed: Vec<Array1<f64>>,
}

/// `(1/M) Σ f(W_p c_i + b_p, e_i)`, defined as 0 when `M = 0`.
pub fn regularizer(
    projection: &Projection,
    composed: &[ArrayView1<f64>],
    targets: &[ArrayView1<f64>],
    energy: &Energy,
) -> Result<RegularizerResult, EnergyError> {
    if composed.len() != targets.len() {
        return Err(EnergyError::CountMismatch {
            composed: composed.len(),
            targets: targets.len(),
        });
    }
    let mut grad_projection = Projection::zeros(projection.output_dim(), projection.input_dim());
    let count = composed.len();
    if count == 0 {
        return Ok(RegularizerResult {
            value: 0.0,
            energies: Vec::new(),
            grad_projection,
            grad_composed: Vec::new(),
        });
    }

    let scale = 1.0 / count as f64;
    let mut energies = Vec::with_capacity(count);
    let mut grad_composed = Vec::with_capacity(count);
    for (c, e) in composed.iter().zip(targets) {
        let projected = projection.apply(*c);
        let (value, grad) = energy.value_and_grad(projected.view(), *e)?;
        let grad = grad * scale;
        grad_projection.w += &outer(grad.view(), *c);
        grad_projection.b += &grad;
        grad_composed.push(projection.w.t().dot(&grad));
        energies.push(value);
    }
    let value = energies.iter().sum::<f64>() / count as f64;
    Ok(RegularizerResult {
        value,
        energies,
        grad_projection,
        grad_composed,
    })
}

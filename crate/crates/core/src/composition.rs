//! Semantic composition of an entity's subword representations into a
//! single entity vector.
//!
//! Three composers are provided:
//!
//! * **RAN**: recurrent additive network. Content `W_m x_t`, input and
//!   forget gates over `[h_{t-1}, x_t]`, memory
//!   `m_t = i_t ∘ (W_m x_t) + f_t ∘ m_{t-1}`, output `h_t = g(m_t)`.
//! * **Linear RAN**: no content or output layer, gates over
//!   `[m_{t-1}, x_t]`, memory `m_t = i_t ∘ x_t + f_t ∘ m_{t-1}`.
//! * **Linear**: `W_e (x_1 + ... + x_L) + L b_e`, order-free.
//!
//! Recurrent states start at zero and the composed vector is the state after
//! the last subword of the span. Every composer has an exact backward pass.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::params::{outer, slice1, slice2, view1, view2, xavier_uniform, Parameters, TensorView};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompositionError {
    #[error("cannot compose an empty span")]
    EmptySpan,
    #[error("span inputs have dimension {found}, composer expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("backward called with a {cache} cache on a {method} composer")]
    CacheMismatch { method: Method, cache: Method },
    #[error("unknown composition method {0:?} (expected ran, linear_ran or linear)")]
    UnknownMethod(String),
    #[error("unknown output nonlinearity {0:?} (expected tanh or identity)")]
    UnknownActivation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ran,
    LinearRan,
    Linear,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ran, Method::LinearRan, Method::Linear];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ran => "ran",
            Method::LinearRan => "linear_ran",
            Method::Linear => "linear",
        }
    }

    /// Parameter count when input and composed dimensions are both `d`.
    pub fn param_count(self, d: usize) -> usize {
        match self {
            Method::Ran => 5 * d * d + 2 * d,
            Method::LinearRan => 4 * d * d + 2 * d,
            Method::Linear => d * d + d,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CompositionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ran" => Ok(Method::Ran),
            "linear_ran" => Ok(Method::LinearRan),
            "linear" => Ok(Method::Linear),
            other => Err(CompositionError::UnknownMethod(other.to_string())),
        }
    }
}

/// Output nonlinearity `g` of the RAN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the output value `y = g(x)`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = CompositionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(CompositionError::UnknownActivation(other.to_string())),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RanParams {
    /// Content layer, `d_c x d_x`.
    pub w_m: Array2<f64>,
    /// Input gate over `[h_{t-1}, x_t]`, `d_c x (d_c + d_x)`.
    pub w_i: Array2<f64>,
    /// Forget gate over `[h_{t-1}, x_t]`, `d_c x (d_c + d_x)`.
    pub w_f: Array2<f64>,
    pub b_i: Array1<f64>,
    pub b_f: Array1<f64>,
    pub g: Activation,
}

impl RanParams {
    pub fn zeros(d_c: usize, d_x: usize, g: Activation) -> Self {
        Self {
            w_m: Array2::zeros((d_c, d_x)),
            w_i: Array2::zeros((d_c, d_c + d_x)),
            w_f: Array2::zeros((d_c, d_c + d_x)),
            b_i: Array1::zeros(d_c),
            b_f: Array1::zeros(d_c),
            g,
        }
    }

    pub fn init<R: Rng + ?Sized>(d_c: usize, d_x: usize, g: Activation, rng: &mut R) -> Self {
        Self {
            w_m: xavier_uniform(d_c, d_x, rng),
            w_i: xavier_uniform(d_c, d_c + d_x, rng),
            w_f: xavier_uniform(d_c, d_c + d_x, rng),
            b_i: Array1::zeros(d_c),
            b_f: Array1::zeros(d_c),
            g,
        }
    }

    pub fn d_c(&self) -> usize {
        self.w_m.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.w_m.ncols()
    }

    pub fn compose(&self, span: ArrayView2<f64>) -> Result<(Array1<f64>, RanCache), CompositionError> {
        check_span(span, self.d_x())?;
        let (len, d_c) = (span.nrows(), self.d_c());
        let mut h = Array2::zeros((len + 1, d_c));
        let mut m = Array2::zeros((len + 1, d_c));
        let mut content = Array2::zeros((len, d_c));
        let mut input_gate = Array2::zeros((len, d_c));
        let mut forget_gate = Array2::zeros((len, d_c));
        for t in 0..len {
            let x = span.row(t);
            let z = concatenate![Axis(0), h.row(t), x];
            let c_t = self.w_m.dot(&x);
            let i_t = (self.w_i.dot(&z) + &self.b_i).mapv(sigmoid);
            let f_t = (self.w_f.dot(&z) + &self.b_f).mapv(sigmoid);
            let m_t = &i_t * &c_t + &f_t * &m.row(t);
            let h_t = m_t.mapv(|v| self.g.apply(v));
            content.row_mut(t).assign(&c_t);
            input_gate.row_mut(t).assign(&i_t);
            forget_gate.row_mut(t).assign(&f_t);
            m.row_mut(t + 1).assign(&m_t);
            h.row_mut(t + 1).assign(&h_t);
        }
        let out = h.row(len).to_owned();
        Ok((
            out,
            RanCache {
                inputs: span.to_owned(),
                h,
                m,
                content,
                input_gate,
                forget_gate,
            },
        ))
    }

    pub fn backward(&self, cache: &RanCache, upstream: ArrayView1<f64>) -> (Self, Array2<f64>) {
        let d_c = self.d_c();
        let len = cache.inputs.nrows();
        let mut grads = Self::zeros(d_c, self.d_x(), self.g);
        let mut d_inputs = Array2::zeros(cache.inputs.raw_dim());
        let mut d_h = upstream.to_owned();
        let mut d_m_carry: Array1<f64> = Array1::zeros(d_c);
        for t in (0..len).rev() {
            let x = cache.inputs.row(t);
            let h_t = cache.h.row(t + 1);
            let i_t = cache.input_gate.row(t);
            let f_t = cache.forget_gate.row(t);
            let g = self.g;
            let d_m = &d_h * &h_t.mapv(|y| g.derivative_from_output(y)) + &d_m_carry;
            let d_i = &d_m * &cache.content.row(t);
            let d_f = &d_m * &cache.m.row(t);
            let d_content = &d_m * &i_t;
            d_m_carry = &d_m * &f_t;
            let d_ai = &d_i * &i_t.mapv(|v| v * (1.0 - v));
            let d_af = &d_f * &f_t.mapv(|v| v * (1.0 - v));
            let z = concatenate![Axis(0), cache.h.row(t), x];
            grads.w_i += &outer(d_ai.view(), z.view());
            grads.w_f += &outer(d_af.view(), z.view());
            grads.b_i += &d_ai;
            grads.b_f += &d_af;
            grads.w_m += &outer(d_content.view(), x);
            let d_z = self.w_i.t().dot(&d_ai) + self.w_f.t().dot(&d_af);
            d_h = d_z.slice(s![..d_c]).to_owned();
            let d_x = &d_z.slice(s![d_c..]) + &self.w_m.t().dot(&d_content);
            d_inputs.row_mut(t).assign(&d_x);
        }
        (grads, d_inputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RanCache {
    inputs: Array2<f64>,
    /// Rows 0..=L; row 0 is the zero initial state.
    h: Array2<f64>,
    m: Array2<f64>,
    content: Array2<f64>,
    input_gate: Array2<f64>,
    forget_gate: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRanParams {
    /// Input gate over `[m_{t-1}, x_t]`, `d x 2d`.
    pub w_i: Array2<f64>,
    /// Forget gate over `[m_{t-1}, x_t]`, `d x 2d`.
    pub w_f: Array2<f64>,
    pub b_i: Array1<f64>,
    pub b_f: Array1<f64>,
}

impl LinearRanParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_i: Array2::zeros((d, 2 * d)),
            w_f: Array2::zeros((d, 2 * d)),
            b_i: Array1::zeros(d),
            b_f: Array1::zeros(d),
        }
    }

    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            w_i: xavier_uniform(d, 2 * d, rng),
            w_f: xavier_uniform(d, 2 * d, rng),
            b_i: Array1::zeros(d),
            b_f: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.b_i.len()
    }

    pub fn compose(
        &self,
        span: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, LinearRanCache), CompositionError> {
        check_span(span, self.dim())?;
        let (len, d) = (span.nrows(), self.dim());
        let mut m = Array2::zeros((len + 1, d));
        let mut input_gate = Array2::zeros((len, d));
        let mut forget_gate = Array2::zeros((len, d));
        for t in 0..len {
            let x = span.row(t);
            let z = concatenate![Axis(0), m.row(t), x];
            let i_t = (self.w_i.dot(&z) + &self.b_i).mapv(sigmoid);
            let f_t = (self.w_f.dot(&z) + &self.b_f).mapv(sigmoid);
            let m_t = &i_t * &x + &f_t * &m.row(t);
            input_gate.row_mut(t).assign(&i_t);
            forget_gate.row_mut(t).assign(&f_t);
            m.row_mut(t + 1).assign(&m_t);
        }
        let out = m.row(len).to_owned();
        Ok((
            out,
            LinearRanCache {
                inputs: span.to_owned(),
                m,
                input_gate,
                forget_gate,
            },
        ))
    }

    pub fn backward(&self, cache: &LinearRanCache, upstream: ArrayView1<f64>) -> (Self, Array2<f64>) {
        let d = self.dim();
        let len = cache.inputs.nrows();
        let mut grads = Self::zeros(d);
        let mut d_inputs = Array2::zeros(cache.inputs.raw_dim());
        let mut d_m = upstream.to_owned();
        for t in (0..len).rev() {
            let x = cache.inputs.row(t);
            let m_prev = cache.m.row(t);
            let i_t = cache.input_gate.row(t);
            let f_t = cache.forget_gate.row(t);
            let d_ai = &d_m * &x * &i_t.mapv(|v| v * (1.0 - v));
            let d_af = &d_m * &m_prev * &f_t.mapv(|v| v * (1.0 - v));
            let z = concatenate![Axis(0), m_prev, x];
            grads.w_i += &outer(d_ai.view(), z.view());
            grads.w_f += &outer(d_af.view(), z.view());
            grads.b_i += &d_ai;
            grads.b_f += &d_af;
            let d_z = self.w_i.t().dot(&d_ai) + self.w_f.t().dot(&d_af);
            let d_x = &d_m * &i_t + &d_z.slice(s![d..]);
            d_inputs.row_mut(t).assign(&d_x);
            d_m = &d_m * &f_t + &d_z.slice(s![..d]);
        }
        (grads, d_inputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRanCache {
    inputs: Array2<f64>,
    /// Rows 0..=L; row 0 is the zero initial memory.
    m: Array2<f64>,
    input_gate: Array2<f64>,
    forget_gate: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `d_c x d_x`.
    pub w_e: Array2<f64>,
    pub b_e: Array1<f64>,
}

impl LinearParams {
    pub fn zeros(d_c: usize, d_x: usize) -> Self {
        Self {
            w_e: Array2::zeros((d_c, d_x)),
            b_e: Array1::zeros(d_c),
        }
    }

    pub fn init<R: Rng + ?Sized>(d_c: usize, d_x: usize, rng: &mut R) -> Self {
        Self {
            w_e: xavier_uniform(d_c, d_x, rng),
            b_e: Array1::zeros(d_c),
        }
    }

    pub fn compose(
        &self,
        span: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, LinearCache), CompositionError> {
        check_span(span, self.w_e.ncols())?;
        let len = span.nrows();
        let sum = order_free_sum(span);
        let out = self.w_e.dot(&sum) + &(&self.b_e * len as f64);
        Ok((out, LinearCache { sum, len }))
    }

    pub fn backward(&self, cache: &LinearCache, upstream: ArrayView1<f64>) -> (Self, Array2<f64>) {
        let grads = Self {
            w_e: outer(upstream, cache.sum.view()),
            b_e: &upstream * cache.len as f64,
        };
        let d_x = self.w_e.t().dot(&upstream);
        let d_inputs = d_x
            .broadcast((cache.len, d_x.len()))
            .expect("broadcast row")
            .to_owned();
        (grads, d_inputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCache {
    sum: Array1<f64>,
    len: usize,
}

/// Column sums taken over the rows in a canonical (lexicographic) order,
/// so any permutation of the rows yields bit-identical sums.
fn order_free_sum(span: ArrayView2<f64>) -> Array1<f64> {
    let mut rows: Vec<ArrayView1<f64>> = span.rows().into_iter().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut sum = Array1::zeros(span.ncols());
    for row in rows {
        sum += &row;
    }
    sum
}

fn check_span(span: ArrayView2<f64>, d_x: usize) -> Result<(), CompositionError> {
    if span.nrows() == 0 {
        return Err(CompositionError::EmptySpan);
    }
    if span.ncols() != d_x {
        return Err(CompositionError::DimensionMismatch {
            expected: d_x,
            found: span.ncols(),
        });
    }
    Ok(())
}

/// Parameters of one composition method. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub enum Composer {
    Ran(RanParams),
    LinearRan(LinearRanParams),
    Linear(LinearParams),
}

/// Forward intermediates needed by [`Composer::backward`].
#[derive(Debug, Clone, PartialEq)]
pub enum CompositionCache {
    Ran(RanCache),
    LinearRan(LinearRanCache),
    Linear(LinearCache),
}

impl CompositionCache {
    pub fn method(&self) -> Method {
        match self {
            CompositionCache::Ran(_) => Method::Ran,
            CompositionCache::LinearRan(_) => Method::LinearRan,
            CompositionCache::Linear(_) => Method::Linear,
        }
    }
}

/// A composed entity vector and the 1-based span it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedEntity {
    pub vector: Array1<f64>,
    pub start: usize,
    pub len: usize,
}

impl Composer {
    /// Fresh parameters. Linear RAN requires `d_c == d_x`.
    pub fn init<R: Rng + ?Sized>(
        method: Method,
        d_c: usize,
        d_x: usize,
        g: Activation,
        rng: &mut R,
    ) -> Result<Self, CompositionError> {
        Ok(match method {
            Method::Ran => Composer::Ran(RanParams::init(d_c, d_x, g, rng)),
            Method::LinearRan => {
                if d_c != d_x {
                    return Err(CompositionError::DimensionMismatch {
                        expected: d_x,
                        found: d_c,
                    });
                }
                Composer::LinearRan(LinearRanParams::init(d_x, rng))
            }
            Method::Linear => Composer::Linear(LinearParams::init(d_c, d_x, rng)),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Composer::Ran(_) => Method::Ran,
            Composer::LinearRan(_) => Method::LinearRan,
            Composer::Linear(_) => Method::Linear,
        }
    }

    /// Output dimension d_c.
    pub fn output_dim(&self) -> usize {
        match self {
            Composer::Ran(p) => p.d_c(),
            Composer::LinearRan(p) => p.dim(),
            Composer::Linear(p) => p.w_e.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Composer::Ran(p) => p.d_x(),
            Composer::LinearRan(p) => p.dim(),
            Composer::Linear(p) => p.w_e.ncols(),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        match self {
            Composer::Ran(p) => Composer::Ran(RanParams::zeros(p.d_c(), p.d_x(), p.g)),
            Composer::LinearRan(p) => Composer::LinearRan(LinearRanParams::zeros(p.dim())),
            Composer::Linear(p) => Composer::Linear(LinearParams::zeros(p.w_e.nrows(), p.w_e.ncols())),
        }
    }

    /// Composes the rows of `span` (one row per subword, in order).
    pub fn compose(
        &self,
        span: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, CompositionCache), CompositionError> {
        Ok(match self {
            Composer::Ran(p) => {
                let (c, cache) = p.compose(span)?;
                (c, CompositionCache::Ran(cache))
            }
            Composer::LinearRan(p) => {
                let (c, cache) = p.compose(span)?;
                (c, CompositionCache::LinearRan(cache))
            }
            Composer::Linear(p) => {
                let (c, cache) = p.compose(span)?;
                (c, CompositionCache::Linear(cache))
            }
        })
    }

    /// Gradients of `⟨upstream, c⟩` with respect to every parameter and
    /// every span input row.
    pub fn backward(
        &self,
        cache: &CompositionCache,
        upstream: ArrayView1<f64>,
    ) -> Result<(Composer, Array2<f64>), CompositionError> {
        if upstream.len() != self.output_dim() {
            return Err(CompositionError::DimensionMismatch {
                expected: self.output_dim(),
                found: upstream.len(),
            });
        }
        Ok(match (self, cache) {
            (Composer::Ran(p), CompositionCache::Ran(c)) => {
                let (g, dx) = p.backward(c, upstream);
                (Composer::Ran(g), dx)
            }
            (Composer::LinearRan(p), CompositionCache::LinearRan(c)) => {
                let (g, dx) = p.backward(c, upstream);
                (Composer::LinearRan(g), dx)
            }
            (Composer::Linear(p), CompositionCache::Linear(c)) => {
                let (g, dx) = p.backward(c, upstream);
                (Composer::Linear(g), dx)
            }
            (composer, cache) => {
                return Err(CompositionError::CacheMismatch {
                    method: composer.method(),
                    cache: cache.method(),
                })
            }
        })
    }
}

impl Parameters for Composer {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let name = |n: &str| format!("composition.{n}");
        match self {
            Composer::Ran(p) => vec![
                view2(name("w_m"), &p.w_m),
                view2(name("w_i"), &p.w_i),
                view2(name("w_f"), &p.w_f),
                view1(name("b_i"), &p.b_i),
                view1(name("b_f"), &p.b_f),
            ],
            Composer::LinearRan(p) => vec![
                view2(name("w_i"), &p.w_i),
                view2(name("w_f"), &p.w_f),
                view1(name("b_i"), &p.b_i),
                view1(name("b_f"), &p.b_f),
            ],
            Composer::Linear(p) => vec![view2(name("w_e"), &p.w_e), view1(name("b_e"), &p.b_e)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Composer::Ran(p) => vec![
                slice2(&mut p.w_m),
                slice2(&mut p.w_i),
                slice2(&mut p.w_f),
                slice1(&mut p.b_i),
                slice1(&mut p.b_f),
            ],
            Composer::LinearRan(p) => vec![
                slice2(&mut p.w_i),
                slice2(&mut p.w_f),
                slice1(&mut p.b_i),
                slice1(&mut p.b_f),
            ],
            Composer::Linear(p) => vec![slice2(&mut p.w_e), slice1(&mut p.b_e)],
        }
    }
}

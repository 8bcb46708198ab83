//! Central finite-difference verification of the composition and
//! regularizer gradients, one cell per (composition method, energy kind).

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::composition::{Activation, Composer, Method};
use crate::energy::{regularizer, Energy, EnergyKind, Projection, DEFAULT_EPSILON};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    /// Random configurations per cell.
    pub configs: usize,
    pub dims: Vec<usize>,
    pub span_lengths: Vec<usize>,
    /// Entities per configuration (M in the mean).
    pub entities: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this in magnitude are compared on an absolute
    /// scale of `tolerance * floor`.
    pub floor: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            configs: 27,
            dims: vec![2, 4, 8],
            span_lengths: vec![1, 2, 5],
            entities: 2,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

/// Analytic gradients of one configuration's loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub composer: Composer,
    pub projection: Projection,
    pub inputs: Vec<Array2<f64>>,
}

/// Post-processing hook applied to analytic gradients before comparison.
/// Used to confirm that the harness notices a wrong gradient.
pub type GradFault = dyn Fn(Method, EnergyKind, &mut Gradients);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellReport {
    pub method: String,
    pub energy: String,
    pub configs: usize,
    pub components: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Problem {
    composer: Composer,
    projection: Projection,
    inputs: Vec<Array2<f64>>,
    targets: Vec<Array1<f64>>,
    energy: Energy,
}

impl Problem {
    fn loss(&self) -> f64 {
        let composed: Vec<Array1<f64>> = self
            .inputs
            .iter()
            .map(|span| self.composer.compose(span.view()).expect("valid span").0)
            .collect();
        let cv: Vec<ArrayView1<f64>> = composed.iter().map(|c| c.view()).collect();
        let tv: Vec<ArrayView1<f64>> = self.targets.iter().map(|t| t.view()).collect();
        regularizer(&self.projection, &cv, &tv, &self.energy)
            .expect("valid energy")
            .value
    }

    fn analytic(&self) -> Gradients {
        let forward: Vec<_> = self
            .inputs
            .iter()
            .map(|span| self.composer.compose(span.view()).expect("valid span"))
            .collect();
        let cv: Vec<ArrayView1<f64>> = forward.iter().map(|(c, _)| c.view()).collect();
        let tv: Vec<ArrayView1<f64>> = self.targets.iter().map(|t| t.view()).collect();
        let reg = regularizer(&self.projection, &cv, &tv, &self.energy).expect("valid energy");
        let mut composer = self.composer.zeros_like();
        let mut inputs = Vec::with_capacity(forward.len());
        for ((_, cache), upstream) in forward.iter().zip(&reg.grad_composed) {
            let (g, d_x) = self
                .composer
                .backward(cache, upstream.view())
                .expect("matching cache");
            composer.add_scaled(&g, 1.0);
            inputs.push(d_x);
        }
        Gradients {
            composer,
            projection: reg.grad_projection,
            inputs,
        }
    }

    /// True when every point is away from the energy's non-differentiable set.
    fn is_smooth(&self) -> bool {
        for (span, target) in self.inputs.iter().zip(&self.targets) {
            let (c, _) = self.composer.compose(span.view()).expect("valid span");
            let p = self.projection.apply(c.view());
            let ok = match self.energy.kind() {
                EnergyKind::Absolute => p.iter().zip(target).all(|(a, b)| (a - b).abs() >= 1e-3),
                EnergyKind::Euclidean => (&p - target).dot(&(&p - target)).sqrt() >= 1e-3,
                EnergyKind::Angular => {
                    let cos = p.dot(target) / (p.dot(&p).sqrt() * target.dot(target).sqrt());
                    cos.abs() < 1.0 - 1e-6
                }
                EnergyKind::SquaredEuclidean => true,
            };
            if !ok {
                return false;
            }
        }
        true
    }
}

fn random_problem(
    method: Method,
    kind: EnergyKind,
    d: usize,
    len: usize,
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
) -> Problem {
    let mut composer = Composer::init(method, d, d, cfg.activation, rng).expect("square dims");
    // Nonzero biases so their gradients are exercised away from the init point.
    for tensor in composer.tensors_mut() {
        for v in tensor.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let mut projection = Projection::init(d, d, rng);
    projection.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let inputs = (0..cfg.entities)
        .map(|_| Array2::from_shape_simple_fn((len, d), || rng.random_range(-1.0..1.0)))
        .collect();
    let targets = (0..cfg.entities)
        .map(|_| Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0)))
        .collect();
    Problem {
        composer,
        projection,
        inputs,
        targets,
        energy: Energy::new(kind, DEFAULT_EPSILON).expect("valid epsilon"),
    }
}

struct Tally {
    components: usize,
    failures: usize,
    max_rel_error: f64,
}

impl Tally {
    fn record(&mut self, analytic: f64, numeric: f64, cfg: &GradcheckConfig) {
        let err = relative_error(analytic, numeric, cfg.floor);
        self.components += 1;
        if err > cfg.tolerance || !err.is_finite() {
            self.failures += 1;
        }
        if !(err <= self.max_rel_error) {
            self.max_rel_error = err;
        }
    }
}

fn central_difference(problem: &mut Problem, select: impl Fn(&mut Problem) -> &mut f64, step: f64) -> f64 {
    let original = *select(problem);
    *select(problem) = original + step;
    let plus = problem.loss();
    *select(problem) = original - step;
    let minus = problem.loss();
    *select(problem) = original;
    (plus - minus) / (2.0 * step)
}

/// Checks one (method, energy) cell over `cfg.configs` random configurations.
pub fn check_cell(
    method: Method,
    kind: EnergyKind,
    cfg: &GradcheckConfig,
    fault: Option<&GradFault>,
) -> CellReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cell_stream(method, kind));
    let mut tally = Tally {
        components: 0,
        failures: 0,
        max_rel_error: 0.0,
    };
    for k in 0..cfg.configs {
        let d = cfg.dims[k % cfg.dims.len()];
        let len = cfg.span_lengths[(k / cfg.dims.len()) % cfg.span_lengths.len()];
        let mut problem = loop {
            let candidate = random_problem(method, kind, d, len, cfg, &mut rng);
            if candidate.is_smooth() {
                break candidate;
            }
        };
        let mut grads = problem.analytic();
        if let Some(fault) = fault {
            fault(method, kind, &mut grads);
        }

        let analytic: Vec<Vec<f64>> = grads
            .composer
            .tensors()
            .iter()
            .map(|t| t.data.to_vec())
            .collect();
        for (ti, tensor) in analytic.iter().enumerate() {
            for (ei, &a) in tensor.iter().enumerate() {
                let n = central_difference(
                    &mut problem,
                    |p| &mut p.composer.tensors_mut().swap_remove(ti)[ei],
                    cfg.step,
                );
                tally.record(a, n, cfg);
            }
        }
        let analytic: Vec<Vec<f64>> = grads
            .projection
            .tensors()
            .iter()
            .map(|t| t.data.to_vec())
            .collect();
        for (ti, tensor) in analytic.iter().enumerate() {
            for (ei, &a) in tensor.iter().enumerate() {
                let n = central_difference(
                    &mut problem,
                    |p| &mut p.projection.tensors_mut().swap_remove(ti)[ei],
                    cfg.step,
                );
                tally.record(a, n, cfg);
            }
        }
        for (si, d_x) in grads.inputs.iter().enumerate() {
            for ((r, c), &a) in d_x.indexed_iter() {
                let n = central_difference(&mut problem, |p| &mut p.inputs[si][[r, c]], cfg.step);
                tally.record(a, n, cfg);
            }
        }
    }
    CellReport {
        method: method.to_string(),
        energy: kind.to_string(),
        configs: cfg.configs,
        components: tally.components,
        failures: tally.failures,
        max_rel_error: tally.max_rel_error,
        pass: tally.failures == 0 && tally.components > 0,
    }
}

fn cell_stream(method: Method, kind: EnergyKind) -> u64 {
    let m = Method::ALL.iter().position(|&x| x == method).unwrap_or(0) as u64;
    let e = match kind {
        EnergyKind::Euclidean => 0,
        EnergyKind::Absolute => 1,
        EnergyKind::Angular => 2,
        EnergyKind::SquaredEuclidean => 3,
    };
    m * 4 + e
}

/// All 3 x 3 cells.
pub fn run(cfg: &GradcheckConfig, fault: Option<&GradFault>) -> Vec<CellReport> {
    let mut reports = Vec::with_capacity(9);
    for method in Method::ALL {
        for kind in EnergyKind::STANDARD {
            reports.push(check_cell(method, kind, cfg, fault));
        }
    }
    reports
}

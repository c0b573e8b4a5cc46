//! Central finite-difference checks of the analytic gradients: log-loss
//! backpropagation, squared MMD, CORAL and the full penalized objective.
//!
//! Every case is drawn from a seeded generator, so a given seed always
//! reports the same worst case.

use rand::Rng;
use serde::Serialize;

use crate::divergence::{
    coral, grad_coral, mmd2, mmd2_value_and_grad, Divergence, KernelSpec, SampleMatrix,
};
use crate::error::Result;
use crate::model::{Architecture, Predictor};
use crate::rng::{derive_seed, derived_rng};
use crate::trainer::{objective, objective_and_gradient, EnvBatch, EnvBatches, PenaltyKind};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-4;
pub const SUITES: [&str; 4] = ["loss", "mmd2", "coral", "objective"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub cases: usize,
    /// Added to every analytic derivative; nonzero only to exercise the
    /// failure path.
    pub perturb: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            cases: 10,
            perturb: 0.0,
        }
    }
}

/// The worst coordinate of one case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn worst_of(
    suite: &'static str,
    case: usize,
    analytic: &[f64],
    numeric: &[f64],
    perturb: f64,
) -> CaseResult {
    let mut out = CaseResult {
        suite,
        case,
        coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_error: -1.0,
    };
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a + perturb;
        let e = rel_error(a, n);
        if e > out.rel_error {
            out = CaseResult {
                suite,
                case,
                coordinate: k,
                analytic: a,
                numeric: n,
                rel_error: e,
            };
        }
    }
    out
}

fn central(x: &[f64], f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut v = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        v[k] = x[k] + STEP;
        let up = f(&v)?;
        v[k] = x[k] - STEP;
        let down = f(&v)?;
        v[k] = x[k];
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

fn random_matrix(rng: &mut impl Rng, n: usize, d: usize, shift: f64) -> SampleMatrix {
    let data = (0..n * d)
        .map(|_| rng.random_range(-2.0..2.0) + shift)
        .collect();
    SampleMatrix::new(n, d, data).expect("finite entries")
}

fn random_arch(rng: &mut impl Rng) -> Architecture {
    if rng.random_bool(0.3) {
        Architecture::Linear
    } else {
        Architecture::Mlp {
            hidden_layers: rng.random_range(1..4),
            hidden_dim: rng.random_range(2..6),
        }
    }
}

/// Initialized predictor with jittered parameters, so no pre-activation
/// sits on the rectifier kink.
fn random_predictor(rng: &mut impl Rng, input_dim: usize, seed: u64) -> Result<Predictor> {
    let mut p = Predictor::init(random_arch(rng), input_dim, seed)?;
    p.params
        .iter_mut()
        .for_each(|v| *v += rng.random_range(-0.3..0.3));
    Ok(p)
}

fn random_batches(rng: &mut impl Rng, envs: usize, d: usize) -> EnvBatches {
    (0..envs)
        .map(|e| {
            let n = rng.random_range(5..9);
            let b = EnvBatch {
                features: (0..n)
                    .map(|_| {
                        (0..d)
                            .map(|_| rng.random_range(-2.0..2.0) + e as f64 * 0.3)
                            .collect()
                    })
                    .collect(),
                labels: (0..n).map(|i| (i % 2) as u8).collect(),
            };
            (e, b)
        })
        .collect()
}

fn loss_case(seed: u64, case: usize, perturb: f64) -> Result<CaseResult> {
    let mut rng = derived_rng(seed, &[0, case as u64]);
    let d = rng.random_range(1..5);
    let p = random_predictor(&mut rng, d, derive_seed(seed, &[0, case as u64, 1]))?;
    let n = rng.random_range(4..10);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let analytic = p.backward(&rows, &y, None)?;
    let numeric = central(&p.params, |v| {
        let q = Predictor {
            params: v.to_vec(),
            ..p.clone()
        };
        q.mean_loss(&rows, &y)
    })?;
    Ok(worst_of("loss", case, &analytic, &numeric, perturb))
}

/// Checks gradients of a two-sample divergence with respect to every entry
/// of both samples.
fn divergence_case(
    suite: &'static str,
    rng: &mut impl Rng,
    case: usize,
    perturb: f64,
    min_rows: usize,
    value: impl Fn(&SampleMatrix, &SampleMatrix) -> Result<f64>,
    grad: impl Fn(&SampleMatrix, &SampleMatrix) -> Result<(SampleMatrix, SampleMatrix)>,
) -> Result<CaseResult> {
    let d = rng.random_range(1..4);
    let (na, nb) = (rng.random_range(min_rows..7), rng.random_range(min_rows..7));
    let a = random_matrix(rng, na, d, 0.0);
    let b = random_matrix(rng, nb, d, 0.5);
    let (ga, gb) = grad(&a, &b)?;
    let split = a.n() * d;
    let joined: Vec<f64> = a.as_slice().iter().chain(b.as_slice()).copied().collect();
    let numeric = central(&joined, |v| {
        let pa = SampleMatrix::new(a.n(), d, v[..split].to_vec())?;
        let pb = SampleMatrix::new(b.n(), d, v[split..].to_vec())?;
        value(&pa, &pb)
    })?;
    let analytic: Vec<f64> = ga.as_slice().iter().chain(gb.as_slice()).copied().collect();
    Ok(worst_of(suite, case, &analytic, &numeric, perturb))
}

fn objective_case(seed: u64, case: usize, perturb: f64) -> Result<CaseResult> {
    let mut rng = derived_rng(seed, &[3, case as u64]);
    let d = rng.random_range(1..4);
    let envs = rng.random_range(2..4);
    let batches = random_batches(&mut rng, envs, d);
    let p = random_predictor(&mut rng, d, derive_seed(seed, &[3, case as u64, 1]))?;
    let kind = if rng.random_bool(0.5) {
        PenaltyKind::Marginal
    } else {
        PenaltyKind::Conditional
    };
    // fixed bandwidth: a median bandwidth would move under the difference
    let div = if rng.random_bool(0.5) {
        Divergence::Coral
    } else {
        Divergence::Mmd(KernelSpec::gaussian(rng.random_range(0.5..2.0)))
    };
    let lambda = rng.random_range(0.5..3.0);
    let (_, _, analytic, _) = objective_and_gradient(&p, &batches, lambda, kind, &div, 2)?;
    let numeric = central(&p.params, |v| {
        let q = Predictor {
            params: v.to_vec(),
            ..p.clone()
        };
        objective(&q, &batches, lambda, kind, &div, 2)
    })?;
    Ok(worst_of("objective", case, &analytic, &numeric, perturb))
}

/// Run every suite; one result (the worst coordinate) per case.
pub fn run(seed: u64, opts: &GradcheckOptions) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(SUITES.len() * opts.cases);
    for case in 0..opts.cases {
        out.push(loss_case(seed, case, opts.perturb)?);
    }
    for case in 0..opts.cases {
        let mut rng = derived_rng(seed, &[1, case as u64]);
        let sigma = rng.random_range(0.5..2.0);
        let k = KernelSpec::gaussian(sigma);
        out.push(divergence_case(
            "mmd2",
            &mut rng,
            case,
            opts.perturb,
            1,
            |a, b| mmd2(a, b, &k),
            |a, b| Ok(mmd2_value_and_grad(a, b, sigma).1),
        )?);
    }
    for case in 0..opts.cases {
        let mut rng = derived_rng(seed, &[2, case as u64]);
        out.push(divergence_case(
            "coral",
            &mut rng,
            case,
            opts.perturb,
            2,
            coral,
            grad_coral,
        )?);
    }
    for case in 0..opts.cases {
        out.push(objective_case(seed, case, opts.perturb)?);
    }
    Ok(out)
}

/// The case with the largest relative error.
pub fn worst(results: &[CaseResult]) -> Option<&CaseResult> {
    results
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
}

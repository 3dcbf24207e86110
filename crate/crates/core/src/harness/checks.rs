//! Self-checks of the numerical building blocks.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::config::ExperimentConfig;
use super::run::run_experiment;
use crate::env::ContextMode;
use crate::error::Result;
use crate::linalg;
use crate::net::{init_symmetric, Network, NetworkParams, NetworkShape, RewardModel};
use crate::rng::Rng;
use crate::uncertainty::{DensePrecision, Precision, PrecisionBackend};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn below(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            threshold,
            passed: value < threshold,
        }
    }
}

/// Parameters drawn i.i.d. `N(0, 2 / fan_in)` per layer.
pub fn random_params(shape: NetworkShape, rng: &mut Rng) -> Result<NetworkParams> {
    let mut values = Vec::with_capacity(shape.num_params());
    for (rows, cols) in shape.layer_dims() {
        let dist = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("valid normal");
        values.extend((0..rows * cols).map(|_| dist.sample(rng)));
    }
    NetworkParams::unflatten(shape, values)
}

/// Largest relative error `‖g_fd − g‖ / max(‖g_fd‖, ‖g‖)` of the analytic
/// gradient against central differences with the given step, over
/// `instances` random (params, input) pairs.
pub fn gradient_check(shape: NetworkShape, instances: usize, step: f64, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let mut net = Network::new(random_params(shape, rng)?);
        let x: Vec<f64> = (0..shape.input_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let g = net.param_gradient(&x)?;
        let mut fd = vec![0.0; g.len()];
        for i in 0..g.len() {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + step;
            let up = net.forward(&x)?;
            net.params_mut()[i] = orig - step;
            let down = net.forward(&x)?;
            net.params_mut()[i] = orig;
            fd[i] = (up - down) / (2.0 * step);
        }
        let diff = fd
            .iter()
            .zip(&g)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = linalg::norm_sq(&fd).sqrt().max(linalg::norm_sq(&g).sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Largest `|h(x; θ0)|` over random inputs with `x_j = x_{j+d/2}`.
pub fn init_null_check(shape: NetworkShape, instances: usize, rng: &mut Rng) -> Result<f64> {
    let net = Network::new(init_symmetric(rng, shape)?);
    let d = shape.input_dim;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let mut x = vec![0.0; d];
        if d.is_multiple_of(2) {
            for j in 0..d / 2 {
                let v = rng.random_range(-1.0..1.0);
                x[j] = v;
                x[j + d / 2] = v;
            }
        } else {
            for v in x.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        worst = worst.max(net.forward(&x)?.abs());
    }
    Ok(worst)
}

/// After `updates` random rank-1 updates at dimension `p`, the largest
/// entry difference of the incremental inverse against a direct inverse
/// and against a rebuilt state.
pub fn sherman_morrison_check(p: usize, updates: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let feats = Array2::from_shape_fn((updates, p), |_| rng.random_range(-1.0..1.0) / (p as f64).sqrt());
    let mut state = DensePrecision::new(p, 1.0, 1.0)?;
    for row in feats.rows() {
        state.update(row.as_slice().expect("row"))?;
    }
    let direct = linalg::spd_inverse(&state.v().view())?;
    let rebuilt = DensePrecision::rebuild(feats.view(), 1.0, 1.0)?;
    let max_diff = |a: &Array2<f64>, b: &Array2<f64>| {
        a.iter()
            .zip(b.iter())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };
    Ok((
        max_diff(state.v_inv(), &direct),
        max_diff(state.v_inv(), rebuilt.v_inv()),
    ))
}

/// Agreement of the two precision backends on random updates and queries.
pub fn backend_check(p: usize, updates: usize, rng: &mut Rng) -> Result<f64> {
    let mut dense = Precision::new(p, 1.0, 1.0, 1.0, PrecisionBackend::Dense)?;
    let mut low = Precision::new(p, 1.0, 1.0, 1.0, PrecisionBackend::LowRank)?;
    for _ in 0..updates {
        let u: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        dense.update(&u)?;
        low.update(&u)?;
    }
    let q = Array2::from_shape_fn((8, p), |_| rng.random_range(-1.0..1.0));
    let a = dense.quad_forms(q.view())?;
    let b = low.quad_forms(q.view())?;
    Ok(a.iter()
        .zip(&b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / x.abs().max(1e-12))))
}

/// Fraction of (round, pair) events with `|Δf − Δh| > ν σ` on a theory-mode
/// run derived from `base` (d = 5, K = 5, T = 500 unless overridden).
pub fn coverage_rate(base: &ExperimentConfig) -> Result<f64> {
    let cfg = ExperimentConfig {
        context_mode: ContextMode::Theory,
        diagnostics: true,
        ..base.clone()
    };
    let result = run_experiment(&cfg)?;
    let (bad, events) = result
        .repetitions
        .iter()
        .flat_map(|r| &r.diagnostics.rounds)
        .fold((0usize, 0usize), |acc, d| {
            (acc.0 + d.coverage_violations, acc.1 + d.coverage_events)
        });
    Ok(bad as f64 / events.max(1) as f64)
}

/// The default coverage configuration.
pub fn coverage_config() -> ExperimentConfig {
    ExperimentConfig {
        rounds: 500,
        arms: 5,
        dim: 5,
        reps: 1,
        ..Default::default()
    }
}

/// Runs the full check suite. `coverage` is `None` to skip the bandit run.
pub fn run_checks(rng: &mut Rng, coverage: Option<&ExperimentConfig>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for depth in [2, 3] {
        let shape = NetworkShape::new(depth, 50, 5)?;
        let err = gradient_check(shape, 20, 1e-5, rng)?;
        out.push(CheckOutcome::below(
            if depth == 2 {
                "gradient (L=2)"
            } else {
                "gradient (L=3)"
            },
            err,
            1e-4,
        ));
    }
    let null = init_null_check(NetworkShape::new(3, 50, 10)?, 100, rng)?;
    out.push(CheckOutcome::below("init null output (d=10)", null, 1e-10));
    let null_odd = init_null_check(NetworkShape::new(3, 50, 5)?, 100, rng)?;
    out.push(CheckOutcome::below("init null output (d=5)", null_odd, 1e-10));
    let (direct, rebuilt) = sherman_morrison_check(300, 100, rng)?;
    out.push(CheckOutcome::below("rank-1 inverse vs direct", direct, 1e-8));
    out.push(CheckOutcome::below("rank-1 inverse vs rebuild", rebuilt, 1e-8));
    out.push(CheckOutcome::below(
        "low-rank vs dense backend",
        backend_check(120, 80, rng)?,
        1e-8,
    ));
    if let Some(cfg) = coverage {
        out.push(CheckOutcome::below(
            "coverage violation rate",
            coverage_rate(cfg)?,
            0.5,
        ));
    }
    Ok(out)
}

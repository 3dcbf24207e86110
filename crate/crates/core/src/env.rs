//! Synthetic preference environments.
//!
//! A round offers `K` context-arm feature vectors. The latent reward `f` is
//! one of the synthetic functions below, and feedback follows the
//! Bradley-Terry-Luce model `P(x1 ≻ x2) = μ(f(x1) − f(x2))` with the sigmoid
//! link, or `P(y = 1 | x) = μ(f(x))` in the binary setting.

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

/// Largest magnitude passed to `exp` inside the sigmoid.
const EXP_CLAMP: f64 = 500.0;

/// Sigmoid `1 / (1 + e^{-z})`, evaluated without overflow.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-EXP_CLAMP, EXP_CLAMP);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log μ(z)`, stable for large |z|.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Sigmoid,
}

/// The link function μ together with its Lipschitz constant `L_μ` and
/// curvature floor `κ_μ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkFunction {
    pub kind: LinkKind,
    pub lipschitz: f64,
    pub kappa: f64,
}

impl Default for LinkFunction {
    fn default() -> Self {
        Self::sigmoid(1.0)
    }
}

impl LinkFunction {
    /// Sigmoid link with a configured `κ_μ`.
    pub fn sigmoid(kappa: f64) -> Self {
        Self {
            kind: LinkKind::Sigmoid,
            lipschitz: 0.25,
            kappa,
        }
    }

    /// Sigmoid link whose `κ_μ` is the smallest derivative over reward
    /// differences bounded by `2 * reward_bound`.
    pub fn sigmoid_with_reward_bound(reward_bound: f64) -> Result<Self> {
        if !(reward_bound.is_finite() && reward_bound > 0.0) {
            return Err(Error::Config(format!(
                "reward bound must be positive and finite, got {reward_bound}"
            )));
        }
        let s = sigmoid(2.0 * reward_bound);
        Ok(Self::sigmoid(s * (1.0 - s)))
    }

    pub fn value(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::Input(format!("link argument must be finite, got {z}")));
        }
        Ok(match self.kind {
            LinkKind::Sigmoid => sigmoid(z),
        })
    }

    pub fn derivative(&self, z: f64) -> Result<f64> {
        let s = self.value(z.abs())?;
        Ok(s * (1.0 - s))
    }
}

/// Where the scale of a cosine reward is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CosinePlacement {
    /// `cos(b · xᵀθ)`
    Inner,
    /// `b · cos(xᵀθ)`
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewardKind {
    /// `a · (xᵀθ)²`
    Square {
        scale: f64,
    },
    Cosine {
        scale: f64,
        placement: CosinePlacement,
    },
    /// `xᵀθ`, used to check the linear baselines on a realizable target.
    Linear,
}

impl RewardKind {
    /// Largest attainable |f(x)| given a bound on |xᵀθ|.
    pub fn bound(&self, inner_bound: f64) -> f64 {
        match *self {
            RewardKind::Square { scale } => scale.abs() * inner_bound * inner_bound,
            RewardKind::Cosine { scale, placement } => match placement {
                CosinePlacement::Inner => 1.0,
                CosinePlacement::Outer => scale.abs(),
            },
            RewardKind::Linear => inner_bound,
        }
    }
}

/// Latent reward `f(x)` parameterised by a hidden vector θ*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReward {
    pub kind: RewardKind,
    pub theta_star: Vec<f64>,
}

impl SyntheticReward {
    pub fn new(kind: RewardKind, theta_star: Vec<f64>) -> Result<Self> {
        if theta_star.is_empty() {
            return Err(Error::Config("reward vector must be non-empty".into()));
        }
        Ok(Self { kind, theta_star })
    }

    /// Draws θ* uniformly from (−1, 1)^d.
    pub fn sample(kind: RewardKind, d: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("reward dimension must be positive".into()));
        }
        let theta = (0..d).map(|_| uniform_open(rng)).collect();
        Self::new(kind, theta)
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> f64 {
        self.apply(x.iter().zip(&self.theta_star).map(|(a, b)| a * b).sum())
    }

    fn apply(&self, inner: f64) -> f64 {
        match self.kind {
            RewardKind::Square { scale } => scale * inner * inner,
            RewardKind::Cosine { scale, placement } => match placement {
                CosinePlacement::Inner => (scale * inner).cos(),
                CosinePlacement::Outer => scale * inner.cos(),
            },
            RewardKind::Linear => inner,
        }
    }

    /// Rewards of every arm in a round.
    pub fn eval_all(&self, contexts: &RoundContexts) -> Result<Vec<f64>> {
        check_dim(self.dim(), contexts.dim())?;
        Ok(contexts
            .features
            .rows()
            .into_iter()
            .map(|r| self.apply(r.iter().zip(&self.theta_star).map(|(a, b)| a * b).sum()))
            .collect())
    }
}

/// How raw uniform features are presented to the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Entries i.i.d. uniform(−1, 1), unnormalised.
    #[default]
    Raw,
    /// `x' = (x, x) / (√2 ‖x‖)`: unit norm with `x'_j = x'_{j+d}`.
    Theory,
}

impl ContextMode {
    /// Dimension of the vectors handed to the learner for raw dimension `d`.
    pub fn feature_dim(self, d: usize) -> usize {
        match self {
            ContextMode::Raw => d,
            ContextMode::Theory => 2 * d,
        }
    }
}

/// The `K` context-arm feature vectors of one round, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundContexts {
    pub round: usize,
    pub features: Array2<f64>,
}

impl RoundContexts {
    pub fn new(round: usize, features: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::Input("round contexts must be non-empty".into()));
        }
        Ok(Self { round, features })
    }

    pub fn num_arms(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn arm(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn arm_vec(&self, i: usize) -> Vec<f64> {
        self.features.row(i).to_vec()
    }
}

/// Uniform draw on the open interval (−1, 1).
fn uniform_open(rng: &mut Rng) -> f64 {
    loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v != -1.0 {
            return v;
        }
    }
}

/// Generates one round of contexts.
pub fn make_round_contexts(
    rng: &mut Rng,
    round: usize,
    num_arms: usize,
    d: usize,
    mode: ContextMode,
) -> Result<RoundContexts> {
    if num_arms < 2 {
        return Err(Error::Config(format!("need at least 2 arms, got {num_arms}")));
    }
    make_contexts_unchecked(rng, round, num_arms, d, mode)
}

/// As [`make_round_contexts`] but permits a single arm (binary feedback).
pub(crate) fn make_contexts_unchecked(
    rng: &mut Rng,
    round: usize,
    num_arms: usize,
    d: usize,
    mode: ContextMode,
) -> Result<RoundContexts> {
    if d == 0 || num_arms == 0 {
        return Err(Error::Config(format!(
            "arms and dimension must be positive, got K={num_arms}, d={d}"
        )));
    }
    let out_dim = mode.feature_dim(d);
    let mut features = Array2::zeros((num_arms, out_dim));
    let mut raw = vec![0.0; d];
    for mut row in features.rows_mut() {
        for v in raw.iter_mut() {
            *v = uniform_open(rng);
        }
        match mode {
            ContextMode::Raw => {
                for (dst, src) in row.iter_mut().zip(&raw) {
                    *dst = *src;
                }
            }
            ContextMode::Theory => {
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = std::f64::consts::SQRT_2 * norm;
                for j in 0..d {
                    let v = raw[j] / denom;
                    row[j] = v;
                    row[j + d] = v;
                }
            }
        }
    }
    RoundContexts::new(round, features)
}

/// One duel outcome; `preferred = true` means `x1 ≻ x2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceObservation {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub preferred: bool,
    pub round: usize,
}

impl PreferenceObservation {
    pub fn y(&self) -> f64 {
        if self.preferred {
            1.0
        } else {
            0.0
        }
    }
}

/// One single-arm binary outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryObservation {
    pub x: Vec<f64>,
    pub y: bool,
    pub round: usize,
}

impl BinaryObservation {
    pub fn y(&self) -> f64 {
        if self.y {
            1.0
        } else {
            0.0
        }
    }
}

fn bernoulli(p: f64, rng: &mut Rng) -> bool {
    rng.random::<f64>() < p
}

/// Draws `y ~ Bernoulli(μ(f(x1) − f(x2)))`.
pub fn sample_preference(
    f: &SyntheticReward,
    link: &LinkFunction,
    x1: &[f64],
    x2: &[f64],
    round: usize,
    rng: &mut Rng,
) -> Result<PreferenceObservation> {
    let p = link.value(f.eval(x1)? - f.eval(x2)?)?;
    Ok(PreferenceObservation {
        x1: x1.to_vec(),
        x2: x2.to_vec(),
        preferred: bernoulli(p, rng),
        round,
    })
}

/// Draws `y ~ Bernoulli(μ(f(x)))`.
pub fn sample_binary(
    f: &SyntheticReward,
    link: &LinkFunction,
    x: &[f64],
    round: usize,
    rng: &mut Rng,
) -> Result<BinaryObservation> {
    let p = link.value(f.eval(x)?)?;
    Ok(BinaryObservation {
        x: x.to_vec(),
        y: bernoulli(p, rng),
        round,
    })
}

/// Index of the first row maximising `values`.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The optimal arm of a round and its reward; ties go to the lowest index.
pub fn best_arm(f: &SyntheticReward, contexts: &RoundContexts) -> Result<(usize, f64)> {
    let rewards = f.eval_all(contexts)?;
    let i = argmax(&rewards);
    Ok((i, rewards[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn sigmoid_reference_points() {
        let mu = LinkFunction::default();
        assert_eq!(mu.value(0.0).unwrap(), 0.5);
        assert_relative_eq!(mu.value(1.0).unwrap(), 0.7310585786300049, epsilon = 1e-15);
        let a = mu.value(-2.3).unwrap();
        let b = mu.value(2.3).unwrap();
        assert_relative_eq!(a, 1.0 - b, epsilon = 1e-15);
        assert!(mu.value(700.0).unwrap() <= 1.0);
        assert!(mu.value(-700.0).unwrap() >= 0.0);
        assert!(mu.value(f64::NAN).is_err());
        assert!(mu.value(f64::INFINITY).is_err());
    }

    #[test]
    fn sigmoid_derivative_points() {
        let mu = LinkFunction::default();
        assert_eq!(mu.derivative(0.0).unwrap(), 0.25);
        assert_relative_eq!(mu.derivative(2.0).unwrap(), 0.10499358540350662, epsilon = 1e-15);
        assert_eq!(mu.derivative(1.7).unwrap(), mu.derivative(-1.7).unwrap());
        assert!(mu.derivative(f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn log_sigmoid_matches_naive_in_safe_range() {
        for z in [-30.0, -3.0, -0.1, 0.0, 0.5, 4.0, 30.0] {
            assert_relative_eq!(log_sigmoid(z), sigmoid(z).ln(), max_relative = 1e-12);
        }
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }

    #[test]
    fn reward_formulas() {
        // xᵀθ = 0.5
        let sq = SyntheticReward::new(RewardKind::Square { scale: 10.0 }, vec![0.5, 0.0]).unwrap();
        assert_relative_eq!(sq.eval(&[1.0, 3.0]).unwrap(), 2.5);
        assert_eq!(sq.eval(&[0.0, 0.0]).unwrap(), 0.0);
        let cos = SyntheticReward::new(
            RewardKind::Cosine {
                scale: 3.0,
                placement: CosinePlacement::Inner,
            },
            vec![1.0, -1.0],
        )
        .unwrap();
        assert_eq!(cos.eval(&[0.4, 0.4]).unwrap(), 1.0);
        let outer = SyntheticReward::new(
            RewardKind::Cosine {
                scale: 10.0,
                placement: CosinePlacement::Outer,
            },
            vec![1.0],
        )
        .unwrap();
        assert_relative_eq!(outer.eval(&[0.0]).unwrap(), 10.0);
        assert!(matches!(sq.eval(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn eval_is_bit_deterministic() {
        let mut rng = seeded(3);
        let f = SyntheticReward::sample(RewardKind::Square { scale: 10.0 }, 5, &mut rng).unwrap();
        let x = [0.1, -0.7, 0.33, 0.9, -0.2];
        assert_eq!(f.eval(&x).unwrap().to_bits(), f.eval(&x).unwrap().to_bits());
    }

    #[test]
    fn raw_contexts_in_open_cube() {
        let mut rng = seeded(11);
        let c = make_round_contexts(&mut rng, 1, 5, 5, ContextMode::Raw).unwrap();
        assert_eq!(c.features.dim(), (5, 5));
        assert!(c.features.iter().all(|v| *v > -1.0 && *v < 1.0));
    }

    #[test]
    fn theory_contexts_are_unit_and_duplicated() {
        let mut rng = seeded(12);
        let c = make_round_contexts(&mut rng, 1, 7, 4, ContextMode::Theory).unwrap();
        assert_eq!(c.dim(), 8);
        for row in c.features.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert_eq!(row[j], row[j + 4]);
            }
        }
    }

    #[test]
    fn contexts_are_seed_deterministic() {
        let a = make_round_contexts(&mut seeded(5), 1, 5, 5, ContextMode::Raw).unwrap();
        let b = make_round_contexts(&mut seeded(5), 1, 5, 5, ContextMode::Raw).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_configuration_errors() {
        let mut rng = seeded(0);
        assert!(matches!(
            make_round_contexts(&mut rng, 1, 1, 5, ContextMode::Raw),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_round_contexts(&mut rng, 1, 5, 0, ContextMode::Raw),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn best_arm_and_ties() {
        let f = SyntheticReward::new(RewardKind::Linear, vec![1.0]).unwrap();
        let c = RoundContexts::new(1, array![[0.1], [0.9], [0.3]]).unwrap();
        assert_eq!(best_arm(&f, &c).unwrap(), (1, 0.9));
        let flat = RoundContexts::new(1, array![[0.2], [0.2], [0.2]]).unwrap();
        assert_eq!(best_arm(&f, &flat).unwrap().0, 0);
    }

    #[test]
    fn best_arm_matches_exhaustive_scan() {
        let mut rng = seeded(99);
        let f = SyntheticReward::sample(RewardKind::Square { scale: 10.0 }, 5, &mut rng).unwrap();
        let c = make_round_contexts(&mut rng, 1, 25, 5, ContextMode::Raw).unwrap();
        let (idx, val) = best_arm(&f, &c).unwrap();
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 0..25 {
            let v = f.eval(&c.arm_vec(i)).unwrap();
            if v > best.1 {
                best = (i, v);
            }
        }
        assert_eq!((idx, val), best);
    }

    #[test]
    fn preference_probabilities() {
        let f = SyntheticReward::new(RewardKind::Linear, vec![1.0]).unwrap();
        let mu = LinkFunction::default();
        let mut rng = seeded(1);
        // Δf = 1 → 0.7310585786
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                sample_preference(&f, &mu, &[1.0], &[0.0], 1, &mut rng)
                    .unwrap()
                    .preferred
            })
            .count();
        let p = 0.7310585786300049;
        let freq = hits as f64 / n as f64;
        assert!(
            (freq - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(),
            "{freq}"
        );
    }

    #[test]
    fn binary_probability_at_five() {
        let mu = LinkFunction::default();
        assert_relative_eq!(mu.value(5.0).unwrap(), 0.9933071490757153, epsilon = 1e-12);
    }

    #[test]
    fn kappa_from_reward_bound() {
        let link = LinkFunction::sigmoid_with_reward_bound(1.0).unwrap();
        let s = sigmoid(2.0);
        assert_relative_eq!(link.kappa, s * (1.0 - s));
        assert!(LinkFunction::sigmoid_with_reward_bound(0.0).is_err());
    }
}

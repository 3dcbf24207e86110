//! Arm-selection rules.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::argmax;
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;
use crate::uncertainty::Precision;

/// Every selection rule the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "ndb-ucb")]
    NdbUcb,
    #[serde(rename = "ndb-ts")]
    NdbTs,
    #[serde(rename = "ncbf-ucb")]
    NcbfUcb,
    #[serde(rename = "ncbf-ts")]
    NcbfTs,
    #[serde(rename = "lindb-ucb")]
    LinDbUcb,
    #[serde(rename = "lindb-ts")]
    LinDbTs,
    #[serde(rename = "lincbf-ucb")]
    LinCbfUcb,
    #[serde(rename = "lincbf-ts")]
    LinCbfTs,
    #[serde(rename = "random")]
    Random,
}

/// How the exploratory choice is made.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exploration {
    Ucb,
    Ts,
    Uniform,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 9] = [
        PolicyKind::NdbUcb,
        PolicyKind::NdbTs,
        PolicyKind::NcbfUcb,
        PolicyKind::NcbfTs,
        PolicyKind::LinDbUcb,
        PolicyKind::LinDbTs,
        PolicyKind::LinCbfUcb,
        PolicyKind::LinCbfTs,
        PolicyKind::Random,
    ];

    pub fn token(self) -> &'static str {
        match self {
            PolicyKind::NdbUcb => "ndb-ucb",
            PolicyKind::NdbTs => "ndb-ts",
            PolicyKind::NcbfUcb => "ncbf-ucb",
            PolicyKind::NcbfTs => "ncbf-ts",
            PolicyKind::LinDbUcb => "lindb-ucb",
            PolicyKind::LinDbTs => "lindb-ts",
            PolicyKind::LinCbfUcb => "lincbf-ucb",
            PolicyKind::LinCbfTs => "lincbf-ts",
            PolicyKind::Random => "random",
        }
    }

    /// Duel policies pick two arms and learn from preferences.
    pub fn is_duel(self) -> bool {
        !matches!(
            self,
            PolicyKind::NcbfUcb | PolicyKind::NcbfTs | PolicyKind::LinCbfUcb | PolicyKind::LinCbfTs
        )
    }

    pub fn is_linear(self) -> bool {
        matches!(
            self,
            PolicyKind::LinDbUcb | PolicyKind::LinDbTs | PolicyKind::LinCbfUcb | PolicyKind::LinCbfTs
        )
    }

    pub fn is_neural(self) -> bool {
        matches!(
            self,
            PolicyKind::NdbUcb | PolicyKind::NdbTs | PolicyKind::NcbfUcb | PolicyKind::NcbfTs
        )
    }

    pub fn exploration(self) -> Exploration {
        match self {
            PolicyKind::NdbUcb | PolicyKind::NcbfUcb | PolicyKind::LinDbUcb | PolicyKind::LinCbfUcb => {
                Exploration::Ucb
            }
            PolicyKind::NdbTs | PolicyKind::NcbfTs | PolicyKind::LinDbTs | PolicyKind::LinCbfTs => {
                Exploration::Ts
            }
            PolicyKind::Random => Exploration::Uniform,
        }
    }

    /// The linear baseline with the same feedback and exploration rule.
    pub fn linear_counterpart(self) -> PolicyKind {
        match self {
            PolicyKind::NdbUcb => PolicyKind::LinDbUcb,
            PolicyKind::NdbTs => PolicyKind::LinDbTs,
            PolicyKind::NcbfUcb => PolicyKind::LinCbfUcb,
            PolicyKind::NcbfTs => PolicyKind::LinCbfTs,
            other => other,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.token() == lower)
            .ok_or_else(|| {
                let known: Vec<&str> = PolicyKind::ALL.iter().map(|k| k.token()).collect();
                Error::Config(format!(
                    "unknown policy '{s}' (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

/// Per-arm selection diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmScore {
    pub h: f64,
    pub sigma: f64,
    /// The Thompson draw, when one was made.
    pub sample: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DuelChoice {
    pub first: usize,
    pub second: usize,
    /// `σ` is measured against `first`.
    pub scores: Vec<ArmScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmChoice {
    pub arm: usize,
    pub scores: Vec<ArmScore>,
}

fn check_inputs(h: &[f64], state: &Precision, g: &ArrayView2<f64>, min_arms: usize) -> Result<()> {
    if h.len() < min_arms {
        return Err(Error::Input(format!(
            "need at least {min_arms} arms, got {}",
            h.len()
        )));
    }
    check_dim(h.len(), g.nrows())?;
    check_dim(state.dim(), g.ncols())?;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite reward estimate".into()));
    }
    Ok(())
}

fn check_nu(nu: f64) -> Result<()> {
    if nu >= 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("nu must be non-negative, got {nu}")))
    }
}

/// First arm greedily, second by `h(x) + ν σ(x, first)`.
pub fn select_duel_ucb(h: &[f64], state: &Precision, g: ArrayView2<f64>, nu: f64) -> Result<DuelChoice> {
    check_inputs(h, state, &g, 2)?;
    check_nu(nu)?;
    let first = argmax(h);
    let sigmas = state.sigmas_against(g, first)?;
    let optimistic: Vec<f64> = h.iter().zip(&sigmas).map(|(hv, s)| hv + nu * s).collect();
    let second = argmax(&optimistic);
    let scores = h
        .iter()
        .zip(&sigmas)
        .map(|(&h, &sigma)| ArmScore {
            h,
            sigma,
            sample: None,
        })
        .collect();
    Ok(DuelChoice {
        first,
        second,
        scores,
    })
}

/// First arm greedily, second by the largest draw of
/// `N(h(x) − h(first), ν² σ²(x, first))`, one draw per arm.
pub fn select_duel_ts(
    h: &[f64],
    state: &Precision,
    g: ArrayView2<f64>,
    nu: f64,
    rng: &mut Rng,
) -> Result<DuelChoice> {
    check_inputs(h, state, &g, 2)?;
    check_nu(nu)?;
    let first = argmax(h);
    let sigmas = state.sigmas_against(g, first)?;
    let h_first = h[first];
    let samples: Vec<f64> = h
        .iter()
        .zip(&sigmas)
        .map(|(hv, s)| {
            let z: f64 = rng.sample(StandardNormal);
            (hv - h_first) + nu * s * z
        })
        .collect();
    let second = argmax(&samples);
    let scores = h
        .iter()
        .zip(&sigmas)
        .zip(&samples)
        .map(|((&h, &sigma), &r)| ArmScore {
            h,
            sigma,
            sample: Some(r),
        })
        .collect();
    Ok(DuelChoice {
        first,
        second,
        scores,
    })
}

/// `argmax h(x) + ν σ(x)`.
pub fn select_arm_ucb(h: &[f64], state: &Precision, g: ArrayView2<f64>, nu: f64) -> Result<ArmChoice> {
    check_inputs(h, state, &g, 1)?;
    check_nu(nu)?;
    let sigmas = state.sigmas_single(g)?;
    let optimistic: Vec<f64> = h.iter().zip(&sigmas).map(|(hv, s)| hv + nu * s).collect();
    let arm = argmax(&optimistic);
    let scores = h
        .iter()
        .zip(&sigmas)
        .map(|(&h, &sigma)| ArmScore {
            h,
            sigma,
            sample: None,
        })
        .collect();
    Ok(ArmChoice { arm, scores })
}

/// `argmax` of one `N(h(x), ν² σ²(x))` draw per arm.
pub fn select_arm_ts(
    h: &[f64],
    state: &Precision,
    g: ArrayView2<f64>,
    nu: f64,
    rng: &mut Rng,
) -> Result<ArmChoice> {
    check_inputs(h, state, &g, 1)?;
    check_nu(nu)?;
    let sigmas = state.sigmas_single(g)?;
    let samples: Vec<f64> = h
        .iter()
        .zip(&sigmas)
        .map(|(hv, s)| {
            let z: f64 = rng.sample(StandardNormal);
            hv + nu * s * z
        })
        .collect();
    let arm = argmax(&samples);
    let scores = h
        .iter()
        .zip(&sigmas)
        .zip(&samples)
        .map(|((&h, &sigma), &r)| ArmScore {
            h,
            sigma,
            sample: Some(r),
        })
        .collect();
    Ok(ArmChoice { arm, scores })
}

/// Two distinct arms, uniformly without replacement.
pub fn select_random_duel(k: usize, rng: &mut Rng) -> Result<DuelChoice> {
    if k < 2 {
        return Err(Error::Input(format!("a duel needs at least 2 arms, got {k}")));
    }
    let first = rng.random_range(0..k);
    let mut second = rng.random_range(0..k - 1);
    if second >= first {
        second += 1;
    }
    Ok(DuelChoice {
        first,
        second,
        scores: vec![ArmScore::default(); k],
    })
}

/// One arm, uniformly.
pub fn select_random_arm(k: usize, rng: &mut Rng) -> Result<usize> {
    if k < 1 {
        return Err(Error::Input("need at least one arm".into()));
    }
    Ok(rng.random_range(0..k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::uncertainty::PrecisionBackend;
    use ndarray::Array2;

    fn state_with_history(p: usize, n: usize, seed: u64) -> Precision {
        let mut rng = seeded(seed);
        let feats = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
        Precision::rebuild(feats.view(), 1.0, 1.0, 1.0, PrecisionBackend::Dense).unwrap()
    }

    #[test]
    fn tokens_roundtrip() {
        for kind in PolicyKind::ALL {
            assert_eq!(kind.token().parse::<PolicyKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.token()));
            assert_eq!(serde_json::from_str::<PolicyKind>(&json).unwrap(), kind);
        }
        assert!("nosuch".parse::<PolicyKind>().is_err());
        assert!(PolicyKind::Random.is_duel());
        assert!(!PolicyKind::NcbfTs.is_duel());
        assert_eq!(PolicyKind::NdbTs.linear_counterpart(), PolicyKind::LinDbTs);
    }

    #[test]
    fn identical_features_give_greedy_duel() {
        let state = Precision::new(3, 1.0, 1.0, 1.0, PrecisionBackend::Dense).unwrap();
        let g = Array2::from_shape_fn((4, 3), |(_, j)| j as f64);
        let h = [0.2, 0.7, 0.7, 0.1];
        let c = select_duel_ucb(&h, &state, g.view(), 5.0).unwrap();
        assert_eq!((c.first, c.second), (1, 1));
        assert!(c.scores.iter().all(|s| s.sigma == 0.0));
    }

    #[test]
    fn duel_ucb_plug_in() {
        // σ(arm1, arm0) = 1.5 with V = I.
        let state = Precision::new(1, 1.0, 1.0, 1.0, PrecisionBackend::Dense).unwrap();
        let g = Array2::from_shape_vec((2, 1), vec![0.0, 1.5]).unwrap();
        let c = select_duel_ucb(&[1.0, 0.0], &state, g.view(), 1.0).unwrap();
        assert_eq!((c.first, c.second), (0, 1));
        assert!((c.scores[1].sigma - 1.5).abs() < 1e-15);
    }

    #[test]
    fn duel_ucb_matches_scan() {
        let mut rng = seeded(11);
        for inst in 0..50 {
            let k = 2 + inst % 6;
            let p = 7;
            let state = state_with_history(p, 12, inst as u64);
            let g = Array2::from_shape_fn((k, p), |_| rng.random_range(-1.0..1.0));
            let h: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nu = rng.random_range(0.0..3.0);
            let c = select_duel_ucb(&h, &state, g.view(), nu).unwrap();

            let dense = state.to_dense().unwrap();
            let mut first = 0;
            for i in 0..k {
                if h[i] > h[first] {
                    first = i;
                }
            }
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..k {
                let u = &g.row(i) - &g.row(first);
                let s = u.dot(&dense.v_inv().dot(&u)).max(0.0).sqrt();
                let score = h[i] + nu * s;
                if score > best.0 {
                    best = (score, i);
                }
            }
            assert_eq!(c.first, first);
            assert_eq!(c.second, best.1);
        }
    }

    #[test]
    fn duel_ucb_translation_invariant() {
        let mut rng = seeded(12);
        let state = state_with_history(5, 8, 1);
        let g = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let h: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = h.iter().map(|v| v + 0.375).collect();
        let a = select_duel_ucb(&h, &state, g.view(), 1.0).unwrap();
        let b = select_duel_ucb(&shifted, &state, g.view(), 1.0).unwrap();
        assert_eq!((a.first, a.second), (b.first, b.second));
    }

    #[test]
    fn duel_ts_zero_nu_and_self_pair() {
        let state = state_with_history(4, 6, 2);
        let mut rng = seeded(3);
        let g = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let h = [0.1, 0.9, -0.3, 0.4, 0.0];
        let c = select_duel_ts(&h, &state, g.view(), 0.0, &mut rng).unwrap();
        assert_eq!((c.first, c.second), (1, 1));
        let c = select_duel_ts(&h, &state, g.view(), 2.0, &mut rng).unwrap();
        assert_eq!(c.scores[1].sample, Some(0.0));
        assert_eq!(c.scores[1].sigma, 0.0);
    }

    #[test]
    fn duel_ts_two_arm_frequency() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let state = Precision::new(1, 1.0, 1.0, 1.0, PrecisionBackend::Dense).unwrap();
        let g = Array2::from_shape_vec((2, 1), vec![0.0, 0.8]).unwrap();
        let h = [0.5, 0.0];
        let nu = 1.0;
        let n = 100_000;
        let mut rng = seeded(99);
        let mut picked = 0usize;
        for _ in 0..n {
            if select_duel_ts(&h, &state, g.view(), nu, &mut rng).unwrap().second == 1 {
                picked += 1;
            }
        }
        // r(0) = 0 exactly, r(1) ~ N(-0.5, 0.8²).
        let p = Normal::new(0.0, 1.0).unwrap().cdf(-0.5 / 0.8);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        let freq = picked as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * sd, "freq={freq} p={p}");
    }

    #[test]
    fn arm_ucb_cases() {
        let state = Precision::new(2, 1.0, 1.0, 1.0, PrecisionBackend::Dense).unwrap();
        let g = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(select_arm_ucb(&[0.0, 0.0], &state, g.view(), 1.0).unwrap().arm, 1);
        let zero = Array2::zeros((3, 2));
        assert_eq!(
            select_arm_ucb(&[0.1, 0.5, 0.2], &state, zero.view(), 9.0)
                .unwrap()
                .arm,
            1
        );
        let bad = Array2::zeros((3, 5));
        assert!(matches!(
            select_arm_ucb(&[0.1, 0.5, 0.2], &state, bad.view(), 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn arm_ucb_matches_scan() {
        let mut rng = seeded(21);
        for inst in 0..50 {
            let k = 1 + inst % 7;
            let state = state_with_history(6, 10, 100 + inst as u64);
            let g = Array2::from_shape_fn((k, 6), |_| rng.random_range(-1.0..1.0));
            let h: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nu = rng.random_range(0.0..3.0);
            let dense = state.to_dense().unwrap();
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..k {
                let u = g.row(i);
                let s = u.dot(&dense.v_inv().dot(&u)).sqrt();
                if h[i] + nu * s > best.0 {
                    best = (h[i] + nu * s, i);
                }
            }
            assert_eq!(select_arm_ucb(&h, &state, g.view(), nu).unwrap().arm, best.1);
        }
    }

    #[test]
    fn arm_ts_cases() {
        let state = state_with_history(3, 4, 5);
        let mut rng = seeded(6);
        let g = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let h = [0.3, -0.1, 0.8, 0.2];
        assert_eq!(select_arm_ts(&h, &state, g.view(), 0.0, &mut rng).unwrap().arm, 2);
        let one = Array2::from_shape_vec((1, 3), vec![5.0, 5.0, 5.0]).unwrap();
        for _ in 0..20 {
            assert_eq!(
                select_arm_ts(&[0.0], &state, one.view(), 10.0, &mut rng)
                    .unwrap()
                    .arm,
                0
            );
        }
    }

    #[test]
    fn arm_ts_two_arm_frequency() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let state = Precision::new(2, 1.0, 1.0, 1.0, PrecisionBackend::Dense).unwrap();
        let g = Array2::from_shape_vec((2, 2), vec![0.6, 0.0, 0.0, 1.0]).unwrap();
        let h = [0.2, 0.0];
        let nu = 0.7;
        let n = 100_000;
        let mut rng = seeded(7);
        let picked = (0..n)
            .filter(|_| select_arm_ts(&h, &state, g.view(), nu, &mut rng).unwrap().arm == 1)
            .count();
        let scale = (nu * nu * (0.36 + 1.0)).sqrt();
        let p = Normal::new(0.0, 1.0).unwrap().cdf((0.0 - 0.2) / scale);
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        let freq = picked as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * sd, "freq={freq} p={p}");
    }

    #[test]
    fn random_selection() {
        let mut rng = seeded(8);
        assert_eq!(select_random_arm(1, &mut rng).unwrap(), 0);
        assert!(select_random_arm(0, &mut rng).is_err());
        assert!(select_random_duel(1, &mut rng).is_err());
        let k = 5;
        let n = 100_000;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            let c = select_random_duel(k, &mut rng).unwrap();
            assert_ne!(c.first, c.second);
            counts[c.first] += 1;
        }
        let p = 1.0 / k as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd);
        }
    }
}

//! Full-batch gradient descent on the preference and binary losses.
//!
//! Both losses share the form `−Σ_s log μ(s_s · Δ_s)` with `s_s = ±1` from
//! the label, where `Δ_s = h(x_{s,1}) − h(x_{s,2})` for duels and
//! `Δ_s = h(x_s)` for binary feedback. The regulariser is either
//! `λ‖θ‖²` (practical) or `(λ/2)‖θ − θ0‖²` with a `1/m` data-term scale
//! (theoretical).

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::RewardModel;
use crate::env::{log_sigmoid, sigmoid, BinaryObservation, PreferenceObservation};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    /// `λ‖θ‖²`, unscaled data term.
    #[default]
    Practical,
    /// `(λ/2)‖θ − θ0‖²`, data term scaled by `1/m`.
    Theoretical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dueling,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub grad_steps: usize,
    pub regularizer: Regularizer,
    pub loss: LossKind,
    /// Stop early once the gradient norm drops below this value.
    pub tolerance: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-3,
            grad_steps: 50,
            regularizer: Regularizer::Practical,
            loss: LossKind::Dueling,
            tolerance: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(tol) = self.tolerance {
            if !(tol > 0.0) {
                return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
            }
        }
        Ok(())
    }
}

/// Observations stacked into matrices for one training pass.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// Dueling: the `2n` rows `[x_{·,1}; x_{·,2}]`. Binary: the `n` rows.
    inputs: Array2<f64>,
    labels: Vec<f64>,
    kind: LossKind,
}

impl TrainingBatch {
    pub fn empty(kind: LossKind, dim: usize) -> Self {
        Self {
            inputs: Array2::zeros((0, dim)),
            labels: Vec::new(),
            kind,
        }
    }

    pub fn from_preferences(data: &[PreferenceObservation], dim: usize) -> Result<Self> {
        let n = data.len();
        let mut inputs = Array2::zeros((2 * n, dim));
        let mut labels = Vec::with_capacity(n);
        for (i, obs) in data.iter().enumerate() {
            check_dim(dim, obs.x1.len())?;
            check_dim(dim, obs.x2.len())?;
            inputs.row_mut(i).assign(&ndarray::ArrayView1::from(&obs.x1[..]));
            inputs
                .row_mut(n + i)
                .assign(&ndarray::ArrayView1::from(&obs.x2[..]));
            labels.push(obs.y());
        }
        Ok(Self {
            inputs,
            labels,
            kind: LossKind::Dueling,
        })
    }

    pub fn from_binary(data: &[BinaryObservation], dim: usize) -> Result<Self> {
        let mut inputs = Array2::zeros((data.len(), dim));
        let mut labels = Vec::with_capacity(data.len());
        for (i, obs) in data.iter().enumerate() {
            check_dim(dim, obs.x.len())?;
            inputs.row_mut(i).assign(&ndarray::ArrayView1::from(&obs.x[..]));
            labels.push(obs.y());
        }
        Ok(Self {
            inputs,
            labels,
            kind: LossKind::Binary,
        })
    }

    /// Appends one duel without restacking the whole history.
    pub fn push_preference(&mut self, obs: &PreferenceObservation) -> Result<()> {
        if self.kind != LossKind::Dueling {
            return Err(Error::Input("binary batch cannot take a preference".into()));
        }
        let dim = self.inputs.ncols();
        check_dim(dim, obs.x1.len())?;
        check_dim(dim, obs.x2.len())?;
        let n = self.labels.len();
        let first = self.inputs.slice(s![..n, ..]);
        let second = self.inputs.slice(s![n.., ..]);
        let x1 = ndarray::ArrayView2::from_shape((1, dim), &obs.x1[..]).expect("row");
        let x2 = ndarray::ArrayView2::from_shape((1, dim), &obs.x2[..]).expect("row");
        self.inputs = concatenate(Axis(0), &[first, x1, second, x2]).expect("same width");
        self.labels.push(obs.y());
        Ok(())
    }

    pub fn push_binary(&mut self, obs: &BinaryObservation) -> Result<()> {
        if self.kind != LossKind::Binary {
            return Err(Error::Input(
                "dueling batch cannot take a binary observation".into(),
            ));
        }
        let dim = self.inputs.ncols();
        check_dim(dim, obs.x.len())?;
        self.inputs
            .push_row(ndarray::ArrayView1::from(&obs.x[..]))
            .expect("same width");
        self.labels.push(obs.y());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// `Δ_s` for every observation, given model outputs on `inputs`.
    fn differences(&self, outputs: &[f64]) -> Vec<f64> {
        let n = self.labels.len();
        match self.kind {
            LossKind::Dueling => (0..n).map(|i| outputs[i] - outputs[n + i]).collect(),
            LossKind::Binary => outputs.to_vec(),
        }
    }
}

/// Outcome of a call to [`train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

fn data_scale<M: RewardModel>(model: &M, cfg: &TrainingConfig) -> f64 {
    match cfg.regularizer {
        Regularizer::Practical => 1.0,
        Regularizer::Theoretical => 1.0 / model.width_scale(),
    }
}

fn regularizer_value(theta: &[f64], theta0: &[f64], cfg: &TrainingConfig) -> f64 {
    match cfg.regularizer {
        Regularizer::Practical => cfg.lambda * theta.iter().map(|v| v * v).sum::<f64>(),
        Regularizer::Theoretical => {
            0.5 * cfg.lambda
                * theta
                    .iter()
                    .zip(theta0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
        }
    }
}

/// Loss value and gradient at the model's current parameters.
pub fn loss_gradient<M: RewardModel>(
    model: &M,
    theta0: &[f64],
    batch: &TrainingBatch,
    cfg: &TrainingConfig,
) -> Result<(f64, Vec<f64>)> {
    check_dim(model.num_params(), theta0.len())?;
    check_dim(model.input_dim(), batch.inputs.ncols())?;
    let scale = data_scale(model, cfg);
    let theta = model.params();
    let mut grad = vec![0.0; theta.len()];
    let mut data_term = 0.0;

    if !batch.is_empty() {
        let n = batch.len();
        let labels = &batch.labels;
        let kind = batch.kind;
        let (_, g) = model.backprop_batch(batch.inputs.view(), &mut |outputs| {
            let diffs = batch.differences(outputs);
            let mut coeffs = vec![0.0; outputs.len()];
            for (i, (&delta, &y)) in diffs.iter().zip(labels).enumerate() {
                let sign = if y > 0.5 { 1.0 } else { -1.0 };
                data_term -= log_sigmoid(sign * delta);
                let c = scale * (sigmoid(delta) - y);
                coeffs[i] = c;
                if kind == LossKind::Dueling {
                    coeffs[n + i] = -c;
                }
            }
            coeffs
        });
        grad = g;
    }

    let loss = scale * data_term + regularizer_value(theta, theta0, cfg);
    match cfg.regularizer {
        Regularizer::Practical => {
            for (g, t) in grad.iter_mut().zip(theta) {
                *g += 2.0 * cfg.lambda * t;
            }
        }
        Regularizer::Theoretical => {
            for ((g, t), t0) in grad.iter_mut().zip(theta).zip(theta0) {
                *g += cfg.lambda * (t - t0);
            }
        }
    }
    Ok((loss, grad))
}

/// Preference loss at the model's current parameters.
pub fn dueling_loss<M: RewardModel>(
    model: &M,
    theta0: &[f64],
    data: &[PreferenceObservation],
    cfg: &TrainingConfig,
) -> Result<f64> {
    let batch = TrainingBatch::from_preferences(data, model.input_dim())?;
    loss_value(model, theta0, &batch, cfg)
}

/// Binary cross-entropy loss at the model's current parameters.
pub fn binary_loss<M: RewardModel>(
    model: &M,
    theta0: &[f64],
    data: &[BinaryObservation],
    cfg: &TrainingConfig,
) -> Result<f64> {
    let batch = TrainingBatch::from_binary(data, model.input_dim())?;
    loss_value(model, theta0, &batch, cfg)
}

fn loss_value<M: RewardModel>(
    model: &M,
    theta0: &[f64],
    batch: &TrainingBatch,
    cfg: &TrainingConfig,
) -> Result<f64> {
    check_dim(model.num_params(), theta0.len())?;
    let scale = data_scale(model, cfg);
    let mut data_term = 0.0;
    if !batch.is_empty() {
        let outputs = model.forward_batch(batch.inputs.view());
        let diffs = batch.differences(outputs.as_slice().expect("contiguous"));
        for (&delta, &y) in diffs.iter().zip(&batch.labels) {
            let sign = if y > 0.5 { 1.0 } else { -1.0 };
            data_term -= log_sigmoid(sign * delta);
        }
    }
    Ok(scale * data_term + regularizer_value(model.params(), theta0, cfg))
}

/// Runs `cfg.grad_steps` full-batch gradient-descent steps from the model's
/// current parameters.
pub fn train<M: RewardModel>(
    model: &mut M,
    theta0: &[f64],
    batch: &TrainingBatch,
    cfg: &TrainingConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if batch.kind != cfg.loss {
        return Err(Error::Config(format!(
            "training configured for {:?} loss but batch holds {:?} observations",
            cfg.loss, batch.kind
        )));
    }
    let mut steps = 0;
    loop {
        let (loss, grad) = loss_gradient(model, theta0, batch, cfg)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::TrainingDiverged { step: steps, loss });
        }
        let converged = cfg.tolerance.is_some_and(|tol| grad_norm < tol);
        if steps == cfg.grad_steps || converged {
            return Ok(TrainReport {
                steps,
                final_loss: loss,
                final_grad_norm: grad_norm,
            });
        }
        for (t, g) in model.params_mut().iter_mut().zip(&grad) {
            *t -= cfg.learning_rate * g;
        }
        steps += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_symmetric, LinearModel, Network, NetworkShape};
    use crate::rng::seeded;
    use rand::Rng;

    fn theory_cfg() -> TrainingConfig {
        TrainingConfig {
            regularizer: Regularizer::Theoretical,
            ..TrainingConfig::default()
        }
    }

    fn small_net(seed: u64) -> Network {
        let shape = NetworkShape::new(3, 8, 4).unwrap();
        Network::new(init_symmetric(&mut seeded(seed), shape).unwrap())
    }

    fn random_prefs(n: usize, dim: usize, seed: u64) -> Vec<PreferenceObservation> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|r| PreferenceObservation {
                x1: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                x2: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                preferred: rng.random_bool(0.5),
                round: r + 1,
            })
            .collect()
    }

    #[test]
    fn empty_theoretical_loss_is_zero_at_anchor() {
        let net = small_net(1);
        let theta0 = net.params().to_vec();
        assert_eq!(dueling_loss(&net, &theta0, &[], &theory_cfg()).unwrap(), 0.0);
    }

    #[test]
    fn equal_outputs_give_log_two() {
        let net = small_net(1);
        let theta0 = net.params().to_vec();
        // Symmetric init with an odd-free even input: pick a duplicated pair.
        let obs = PreferenceObservation {
            x1: vec![0.3, -0.2, 0.3, -0.2],
            x2: vec![0.1, 0.5, 0.1, 0.5],
            preferred: true,
            round: 1,
        };
        let cfg = TrainingConfig {
            regularizer: Regularizer::Theoretical,
            ..Default::default()
        };
        let loss = dueling_loss(&net, &theta0, &[obs], &cfg).unwrap();
        // data term scaled by 1/m, regulariser zero at θ0.
        assert!((loss - std::f64::consts::LN_2 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn binary_data_term_symmetric_in_label() {
        let model = LinearModel::zeros(2);
        let cfg = TrainingConfig {
            loss: LossKind::Binary,
            ..Default::default()
        };
        for y in [true, false] {
            let obs = BinaryObservation {
                x: vec![0.4, 0.1],
                y,
                round: 1,
            };
            let loss = binary_loss(&model, &[0.0, 0.0], &[obs], &cfg).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn binary_equals_dueling_against_zero_input() {
        let net = small_net(3);
        let theta0 = net.params().to_vec();
        let mut rng = seeded(4);
        let mut net = net;
        for v in net.params_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        let cfg = TrainingConfig::default();
        let mut bin = Vec::new();
        let mut duel = Vec::new();
        for r in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_bool(0.4);
            bin.push(BinaryObservation {
                x: x.clone(),
                y,
                round: r,
            });
            duel.push(PreferenceObservation {
                x1: x,
                x2: vec![0.0; 4],
                preferred: y,
                round: r,
            });
        }
        let a = binary_loss(&net, &theta0, &bin, &cfg).unwrap();
        let b = dueling_loss(&net, &theta0, &duel, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn zero_steps_returns_start_exactly() {
        let mut net = small_net(5);
        let start = net.params().to_vec();
        let data = random_prefs(10, 4, 6);
        let batch = TrainingBatch::from_preferences(&data, 4).unwrap();
        let cfg = TrainingConfig {
            grad_steps: 0,
            ..Default::default()
        };
        let report = train(&mut net, &start, &batch, &cfg).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(net.params(), &start[..]);
    }

    #[test]
    fn empty_theoretical_training_is_fixed_point() {
        let mut net = small_net(8);
        let theta0 = net.params().to_vec();
        let batch = TrainingBatch::empty(LossKind::Dueling, 4);
        train(&mut net, &theta0, &batch, &theory_cfg()).unwrap();
        assert_eq!(net.params(), &theta0[..]);
    }

    #[test]
    fn loss_descends_on_fixed_batch() {
        let mut net = small_net(9);
        let theta0 = net.params().to_vec();
        let data = random_prefs(50, 4, 10);
        let batch = TrainingBatch::from_preferences(&data, 4).unwrap();
        let cfg = TrainingConfig {
            grad_steps: 1,
            ..Default::default()
        };
        let mut last = loss_value(&net, &theta0, &batch, &cfg).unwrap();
        for _ in 0..10 {
            train(&mut net, &theta0, &batch, &cfg).unwrap();
            let now = loss_value(&net, &theta0, &batch, &cfg).unwrap();
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let mut net = small_net(11);
        let theta0 = net.params().to_vec();
        let data = random_prefs(30, 4, 12);
        let batch = TrainingBatch::from_preferences(&data, 4).unwrap();
        let cfg = TrainingConfig {
            learning_rate: 1e200,
            grad_steps: 20,
            ..Default::default()
        };
        match train(&mut net, &theta0, &batch, &cfg) {
            Err(Error::TrainingDiverged { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn push_matches_restack() {
        let data = random_prefs(6, 3, 13);
        let mut incremental = TrainingBatch::empty(LossKind::Dueling, 3);
        for obs in &data {
            incremental.push_preference(obs).unwrap();
        }
        let full = TrainingBatch::from_preferences(&data, 3).unwrap();
        assert_eq!(incremental.inputs(), full.inputs());
        assert_eq!(incremental.labels(), full.labels());
        assert!(incremental
            .push_binary(&BinaryObservation {
                x: vec![0.0; 3],
                y: true,
                round: 1
            })
            .is_err());
    }

    #[test]
    fn gradient_matches_finite_difference_of_loss() {
        let mut net = small_net(14);
        let theta0 = net.params().to_vec();
        let mut rng = seeded(15);
        for v in net.params_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let data = random_prefs(12, 4, 16);
        let batch = TrainingBatch::from_preferences(&data, 4).unwrap();
        for cfg in [TrainingConfig::default(), theory_cfg()] {
            let (_, grad) = loss_gradient(&net, &theta0, &batch, &cfg).unwrap();
            let h = 1e-6;
            for j in (0..net.num_params()).step_by(7) {
                let mut plus = net.clone();
                plus.params_mut()[j] += h;
                let mut minus = net.clone();
                minus.params_mut()[j] -= h;
                let fd = (loss_value(&plus, &theta0, &batch, &cfg).unwrap()
                    - loss_value(&minus, &theta0, &batch, &cfg).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "coord {j}: {fd} vs {}",
                    grad[j]
                );
            }
        }
    }
}

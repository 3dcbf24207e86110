//! The online loop: train, select, observe, update.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use super::config::{ExperimentConfig, FeatureAnchor, FeatureScale};
use crate::env::{
    argmax, make_contexts_unchecked, sample_binary, sample_preference, LinkFunction, RoundContexts,
    SyntheticReward,
};
use crate::error::{Error, Result};
use crate::net::{
    init_symmetric, train, LinearModel, LossKind, Network, RewardModel, TrainReport, TrainingBatch,
    TrainingConfig,
};
use crate::policy::{
    select_arm_ts, select_arm_ucb, select_duel_ts, select_duel_ucb, select_random_arm, select_random_duel,
    Exploration,
};
use crate::rng::{repetition_seed, stream, Rng, Stream};
use crate::uncertainty::{
    theoretical_nu, EffectiveDimensionMode, EffectiveDimensionTracker, NuMode, Precision,
};

/// Cumulative regrets of one repetition, one entry per round.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub rep: usize,
    pub seed: u64,
    pub avg_regret_cum: Vec<f64>,
    pub weak_regret_cum: Vec<f64>,
}

impl RegretTrace {
    pub fn len(&self) -> usize {
        self.avg_regret_cum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.avg_regret_cum.is_empty()
    }

    pub fn final_avg(&self) -> f64 {
        self.avg_regret_cum.last().copied().unwrap_or(0.0)
    }

    pub fn final_weak(&self) -> f64 {
        self.weak_regret_cum.last().copied().unwrap_or(0.0)
    }

    /// Both series non-decreasing, weak never above average.
    pub fn check(&self) -> Result<()> {
        if self.avg_regret_cum.len() != self.weak_regret_cum.len() {
            return Err(Error::Input(format!(
                "trace {} has {} average and {} weak entries",
                self.rep,
                self.avg_regret_cum.len(),
                self.weak_regret_cum.len()
            )));
        }
        let mut prev = (0.0, 0.0);
        for (t, (&a, &w)) in self.avg_regret_cum.iter().zip(&self.weak_regret_cum).enumerate() {
            if !(a >= prev.0 && w >= prev.1) {
                return Err(Error::Input(format!(
                    "trace {} decreases at round {}",
                    self.rep,
                    t + 1
                )));
            }
            if w > a {
                return Err(Error::Input(format!(
                    "trace {}: weak regret {w} exceeds average regret {a} at round {}",
                    self.rep,
                    t + 1
                )));
            }
            prev = (a, w);
        }
        Ok(())
    }
}

/// What happened in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub first: usize,
    /// Equals `first` for single-arm policies.
    pub second: usize,
    pub best: usize,
    pub avg_regret: f64,
    pub weak_regret: f64,
    pub nu: f64,
    pub retrained: bool,
}

/// Optional per-round measurements.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundDiagnostics {
    pub round: usize,
    /// `log det(V_t / ridge)` after the round's update.
    pub log_det: f64,
    /// Running effective dimension, refreshed at retrain rounds.
    pub effective_dim: Option<f64>,
    /// Pairs (or arms) whose estimation error exceeded `ν σ`.
    pub coverage_violations: usize,
    pub coverage_events: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RepetitionDiagnostics {
    pub rounds: Vec<RoundDiagnostics>,
    pub final_train_loss: Option<f64>,
    pub retrains: usize,
    pub degeneracy_rebuilds: usize,
}

impl RepetitionDiagnostics {
    pub fn coverage_rate(&self) -> Option<f64> {
        let events: usize = self.rounds.iter().map(|r| r.coverage_events).sum();
        let bad: usize = self.rounds.iter().map(|r| r.coverage_violations).sum();
        (events > 0).then(|| bad as f64 / events as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionResult {
    pub trace: RegretTrace,
    pub diagnostics: RepetitionDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub repetitions: Vec<RepetitionResult>,
}

impl ExperimentResult {
    pub fn traces(&self) -> Vec<RegretTrace> {
        self.repetitions.iter().map(|r| r.trace.clone()).collect()
    }

    /// Mean final cumulative average regret over repetitions.
    pub fn mean_final_avg(&self) -> f64 {
        let n = self.repetitions.len() as f64;
        self.repetitions.iter().map(|r| r.trace.final_avg()).sum::<f64>() / n
    }

    /// Mean of `R_t / t` at round `t` (1-based) over repetitions.
    pub fn mean_rate_at(&self, t: usize) -> f64 {
        let n = self.repetitions.len() as f64;
        self.repetitions
            .iter()
            .map(|r| r.trace.avg_regret_cum[t - 1] / t as f64)
            .sum::<f64>()
            / n
    }
}

/// Model, data and confidence set of a learning policy.
struct Learner<M: RewardModel> {
    model: M,
    init: M,
    theta0: Vec<f64>,
    precision: Precision,
    batch: TrainingBatch,
    train_cfg: TrainingConfig,
    feature_scale: f64,
    anchor: FeatureAnchor,
    tracker: Option<EffectiveDimensionTracker>,
    effective_dim: Option<f64>,
    last_report: Option<TrainReport>,
    retrains: usize,
    degeneracy_rebuilds: usize,
}

impl<M: RewardModel> Learner<M> {
    fn new(init: M, cfg: &ExperimentConfig, duel: bool) -> Result<Self> {
        let p = init.num_params();
        let feature_scale = match cfg.feature_scale {
            FeatureScale::Unit => 1.0,
            FeatureScale::InvSqrtWidth => 1.0 / init.width_scale().sqrt(),
        };
        let backend = cfg.precision_backend.resolve(p, cfg.rounds);
        let precision = Precision::new(p, cfg.lambda, cfg.kappa_mu, feature_scale, backend)?;
        let loss = if duel { LossKind::Dueling } else { LossKind::Binary };
        let train_cfg = TrainingConfig {
            lambda: cfg.lambda,
            learning_rate: cfg.learning_rate,
            grad_steps: cfg.grad_steps,
            regularizer: cfg.regularizer,
            loss,
            tolerance: None,
        };
        train_cfg.validate()?;
        let tracker = if cfg.nu_mode == NuMode::Theoretical || cfg.diagnostics {
            let mode = if duel {
                EffectiveDimensionMode::Duel
            } else {
                EffectiveDimensionMode::Binary
            };
            Some(EffectiveDimensionTracker::new(
                p,
                cfg.lambda,
                cfg.kappa_mu,
                mode,
                feature_scale,
            )?)
        } else {
            None
        };
        Ok(Self {
            theta0: init.params().to_vec(),
            model: init.clone(),
            init: init.clone(),
            precision,
            batch: TrainingBatch::empty(loss, init.input_dim()),
            train_cfg,
            feature_scale,
            anchor: cfg.feature_anchor,
            tracker,
            effective_dim: None,
            last_report: None,
            retrains: 0,
            degeneracy_rebuilds: 0,
        })
    }

    /// The model whose gradients serve as features.
    fn feature_model(&self) -> &M {
        match self.anchor {
            FeatureAnchor::ThetaT => &self.model,
            FeatureAnchor::Theta0 => &self.init,
        }
    }

    /// Scaled update vectors of every stored observation.
    fn stored_features(&self) -> Array2<f64> {
        let g = self.feature_model().gradient_rows(self.batch.inputs().view());
        let mut u = match self.batch.kind() {
            LossKind::Dueling => {
                let n = self.batch.len();
                &g.slice(s![..n, ..]) - &g.slice(s![n.., ..])
            }
            LossKind::Binary => g,
        };
        u *= self.feature_scale;
        u
    }

    fn rebuild_precision(&mut self) -> Result<()> {
        let features = self.stored_features();
        self.precision.reset_from(features.view())
    }

    fn retrain(&mut self) -> Result<()> {
        if self.batch.is_empty() {
            return Ok(());
        }
        self.last_report = Some(train(
            &mut self.model,
            &self.theta0,
            &self.batch,
            &self.train_cfg,
        )?);
        self.retrains += 1;
        if self.anchor == FeatureAnchor::ThetaT && !self.model.constant_features() {
            self.rebuild_precision()?;
        }
        Ok(())
    }

    fn refresh_effective_dim(&mut self) -> Result<()> {
        if let Some(tracker) = &self.tracker {
            self.effective_dim = Some(tracker.value()?);
        }
        Ok(())
    }

    fn nu(&self, cfg: &ExperimentConfig) -> Result<f64> {
        match cfg.nu_mode {
            NuMode::Fixed => Ok(cfg.nu),
            NuMode::Theoretical => theoretical_nu(&cfg.confidence(), self.effective_dim.unwrap_or(0.0)),
        }
    }

    /// Runs `f`, rebuilding the precision state once if it reports a
    /// degenerate quadratic form.
    fn with_recovery<T>(&mut self, f: impl Fn(&Self) -> Result<T>) -> Result<T> {
        match f(self) {
            Err(Error::Degenerate { .. }) => {
                self.degeneracy_rebuilds += 1;
                self.rebuild_precision()?;
                f(self)
            }
            other => other,
        }
    }

    fn update(&mut self, u: &[f64]) -> Result<()> {
        match self.precision.update(u) {
            Err(Error::Degenerate { .. }) => {
                // The observation is already stored, so a rebuild includes it.
                self.degeneracy_rebuilds += 1;
                self.rebuild_precision()
            }
            other => other.map(|_| ()),
        }
    }
}

/// One repetition's state.
pub struct Repetition<M: RewardModel> {
    cfg: ExperimentConfig,
    reward: SyntheticReward,
    link: LinkFunction,
    learner: Option<Learner<M>>,
    contexts_rng: Rng,
    feedback_rng: Rng,
    policy_rng: Rng,
    round: usize,
    trace: RegretTrace,
    diagnostics: RepetitionDiagnostics,
}

impl<M: RewardModel> Repetition<M> {
    fn with_model(cfg: &ExperimentConfig, rep: usize, model: Option<M>) -> Result<Self> {
        let seed = repetition_seed(cfg.seed, rep);
        let reward = SyntheticReward::sample(
            cfg.reward_kind(),
            cfg.feature_dim(),
            &mut stream(seed, Stream::RewardVector),
        )?;
        let duel = cfg.policy.is_duel();
        let learner = model.map(|m| Learner::new(m, cfg, duel)).transpose()?;
        Ok(Self {
            cfg: cfg.clone(),
            reward,
            link: LinkFunction::sigmoid(cfg.kappa_mu),
            learner,
            contexts_rng: stream(seed, Stream::Contexts),
            feedback_rng: stream(seed, Stream::Feedback),
            policy_rng: stream(seed, Stream::Policy),
            round: 0,
            trace: RegretTrace {
                rep,
                seed,
                avg_regret_cum: Vec::with_capacity(cfg.rounds),
                weak_regret_cum: Vec::with_capacity(cfg.rounds),
            },
            diagnostics: RepetitionDiagnostics::default(),
        })
    }

    pub fn reward(&self) -> &SyntheticReward {
        &self.reward
    }

    pub fn trace(&self) -> &RegretTrace {
        &self.trace
    }

    /// Plays round `t = self.round + 1`.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.round + 1;
        self.play(t).map_err(|e| e.at_round(t))
    }

    fn play(&mut self, t: usize) -> Result<RoundRecord> {
        let cfg = &self.cfg;
        let duel = cfg.policy.is_duel();
        let contexts =
            make_contexts_unchecked(&mut self.contexts_rng, t, cfg.arms, cfg.dim, cfg.context_mode)?;
        let rewards = self.reward.eval_all(&contexts)?;
        let best = argmax(&rewards);
        let f_star = rewards[best];
        let mut retrained = false;
        let mut nu = cfg.nu;
        let mut diag = RoundDiagnostics {
            round: t,
            ..Default::default()
        };

        let (first, second) = match self.learner.as_mut() {
            None => {
                if duel {
                    let c = select_random_duel(cfg.arms, &mut self.policy_rng)?;
                    (c.first, c.second)
                } else {
                    let a = select_random_arm(cfg.arms, &mut self.policy_rng)?;
                    (a, a)
                }
            }
            Some(learner) => {
                if (t - 1).is_multiple_of(cfg.retrain_every) {
                    learner.retrain()?;
                    learner.refresh_effective_dim()?;
                    retrained = true;
                }
                if let Some(tracker) = learner.tracker.as_mut() {
                    tracker.add_round(&learner.init.gradient_rows(contexts.features.view()))?;
                }
                nu = learner.nu(cfg)?;
                let h = learner.model.forward_batch(contexts.features.view()).to_vec();
                let g = learner.feature_model().gradient_rows(contexts.features.view());
                if cfg.diagnostics {
                    let (bad, events) = learner
                        .with_recovery(|l| coverage_counts(&l.precision, &rewards, &h, g.view(), nu, duel))?;
                    diag.coverage_violations = bad;
                    diag.coverage_events = events;
                }
                let rng = &mut self.policy_rng;
                let chosen = match (duel, cfg.policy.exploration()) {
                    (true, Exploration::Ts) => {
                        // Each attempt draws from a copy so a retry sees the same draws.
                        let (c, advanced) = learner.with_recovery(|l| {
                            let mut r = rng.clone();
                            select_duel_ts(&h, &l.precision, g.view(), nu, &mut r).map(|c| (c, r))
                        })?;
                        *rng = advanced;
                        (c.first, c.second)
                    }
                    (true, _) => {
                        let c = learner.with_recovery(|l| select_duel_ucb(&h, &l.precision, g.view(), nu))?;
                        (c.first, c.second)
                    }
                    (false, Exploration::Ts) => {
                        let (c, advanced) = learner.with_recovery(|l| {
                            let mut r = rng.clone();
                            select_arm_ts(&h, &l.precision, g.view(), nu, &mut r).map(|c| (c, r))
                        })?;
                        *rng = advanced;
                        (c.arm, c.arm)
                    }
                    (false, _) => {
                        let c = learner.with_recovery(|l| select_arm_ucb(&h, &l.precision, g.view(), nu))?;
                        (c.arm, c.arm)
                    }
                };
                let scale = learner.feature_scale;
                let u: Vec<f64> = if duel {
                    g.row(chosen.0)
                        .iter()
                        .zip(g.row(chosen.1))
                        .map(|(a, b)| (a - b) * scale)
                        .collect()
                } else {
                    g.row(chosen.0).iter().map(|a| a * scale).collect()
                };
                let x1 = contexts.arm_vec(chosen.0);
                if duel {
                    let x2 = contexts.arm_vec(chosen.1);
                    let obs =
                        sample_preference(&self.reward, &self.link, &x1, &x2, t, &mut self.feedback_rng)?;
                    if chosen.0 != chosen.1 {
                        learner.batch.push_preference(&obs)?;
                    }
                } else {
                    let obs = sample_binary(&self.reward, &self.link, &x1, t, &mut self.feedback_rng)?;
                    learner.batch.push_binary(&obs)?;
                }
                learner.update(&u)?;
                diag.log_det = learner.precision.log_det_gain();
                diag.effective_dim = if retrained { learner.effective_dim } else { None };
                chosen
            }
        };

        let (f1, f2) = (rewards[first], rewards[second]);
        let avg_regret = f_star - 0.5 * (f1 + f2);
        let weak_regret = f_star - f1.max(f2);
        let prev = (
            self.trace.avg_regret_cum.last().copied().unwrap_or(0.0),
            self.trace.weak_regret_cum.last().copied().unwrap_or(0.0),
        );
        self.trace.avg_regret_cum.push(prev.0 + avg_regret);
        self.trace.weak_regret_cum.push(prev.1 + weak_regret);
        if self.cfg.diagnostics {
            self.diagnostics.rounds.push(diag);
        }
        self.round = t;
        Ok(RoundRecord {
            round: t,
            first,
            second,
            best,
            avg_regret,
            weak_regret,
            nu,
            retrained,
        })
    }

    pub fn finish(mut self) -> RepetitionResult {
        if let Some(l) = &self.learner {
            self.diagnostics.final_train_loss = l.last_report.map(|r| r.final_loss);
            self.diagnostics.retrains = l.retrains;
            self.diagnostics.degeneracy_rebuilds = l.degeneracy_rebuilds;
        }
        RepetitionResult {
            trace: self.trace,
            diagnostics: self.diagnostics,
        }
    }

    fn run_to_end(mut self) -> Result<RepetitionResult> {
        while self.round < self.cfg.rounds {
            self.run_round()?;
        }
        Ok(self.finish())
    }
}

impl Repetition<Network> {
    /// A neural-policy repetition; the network is drawn from the
    /// repetition's init stream.
    pub fn neural(cfg: &ExperimentConfig, rep: usize) -> Result<Self> {
        let seed = repetition_seed(cfg.seed, rep);
        let params = init_symmetric(&mut stream(seed, Stream::NetworkInit), cfg.network_shape()?)?;
        Self::with_model(cfg, rep, Some(Network::new(params)))
    }
}

impl Repetition<LinearModel> {
    pub fn linear(cfg: &ExperimentConfig, rep: usize) -> Result<Self> {
        Self::with_model(cfg, rep, Some(LinearModel::zeros(cfg.feature_dim())))
    }

    pub fn random(cfg: &ExperimentConfig, rep: usize) -> Result<Self> {
        Self::with_model(cfg, rep, None)
    }
}

/// Counts `|Δf − Δh| > ν σ` over all arm pairs (duel) or arms (binary).
fn coverage_counts(
    precision: &Precision,
    f: &[f64],
    h: &[f64],
    g: ArrayView2<f64>,
    nu: f64,
    duel: bool,
) -> Result<(usize, usize)> {
    let k = f.len();
    let mut bad = 0;
    let mut events = 0;
    if duel {
        for j in 0..k {
            let sigmas = precision.sigmas_against(g, j)?;
            for i in (j + 1)..k {
                let err = ((f[i] - f[j]) - (h[i] - h[j])).abs();
                events += 1;
                if err > nu * sigmas[i] {
                    bad += 1;
                }
            }
        }
    } else {
        let sigmas = precision.sigmas_single(g)?;
        for i in 0..k {
            events += 1;
            if (f[i] - h[i]).abs() > nu * sigmas[i] {
                bad += 1;
            }
        }
    }
    Ok((bad, events))
}

/// Runs repetition `rep` of `cfg` to completion.
pub fn run_repetition(cfg: &ExperimentConfig, rep: usize) -> Result<RepetitionResult> {
    let run = || -> Result<RepetitionResult> {
        if cfg.policy.is_neural() {
            Repetition::neural(cfg, rep)?.run_to_end()
        } else if cfg.policy.is_linear() {
            Repetition::linear(cfg, rep)?.run_to_end()
        } else {
            Repetition::random(cfg, rep)?.run_to_end()
        }
    };
    run().map_err(|e| e.at_repetition(rep))
}

/// Runs all repetitions, in parallel on the current rayon pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let repetitions = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_repetition(cfg, rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        repetitions,
    })
}

/// Contexts of round `t` for repetition `rep`, as the loop would draw them
/// when called for rounds `1..=t` in order.
pub fn replay_contexts(cfg: &ExperimentConfig, rep: usize, rounds: usize) -> Result<Vec<RoundContexts>> {
    let seed = repetition_seed(cfg.seed, rep);
    let mut rng = stream(seed, Stream::Contexts);
    (1..=rounds)
        .map(|t| make_contexts_unchecked(&mut rng, t, cfg.arms, cfg.dim, cfg.context_mode))
        .collect()
}

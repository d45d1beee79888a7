//! Objective-conditioned policy trained by backpropagation through virtual
//! rollouts of the frozen dynamics ensemble.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cartpole::{self, ActionSource, EnvState, Objective, ACTION_LIMIT};
use crate::dataset::{NormStats, TransitionBatch};
use crate::diffcore::{AdamConfig, AdamState, GradientBuffer, Matrix, Mlp, NodeId, OutputActivation, ParamId, Tape};
use crate::ensemble::{Dynamics, EnsembleModel, STATE_DIM};
use crate::error::{Error, Result};

pub const POLICY_INPUT_DIM: usize = STATE_DIM + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Virtual rollout horizon.
    pub horizon: usize,
    pub gamma: f64,
    /// Number of fixed `(s0, omega)` pairs.
    pub population: usize,
    pub minibatch: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Stop once the best return of the last `plateau_window` epochs improves
    /// on the best earlier return by less than `plateau_tolerance` (relative).
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    /// Pairs per worker-local tape; fixes the reduction order.
    pub chunk_size: usize,
    /// Train a fixed-objective specialist instead of a variable objective policy.
    pub fixed_objective: Option<Objective>,
    /// Rescale the minibatch gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 65,
            gamma: 1.0,
            population: 2000,
            minibatch: 100,
            max_epochs: 200,
            learning_rate: 1e-3,
            seed: 0,
            hidden: vec![10, 10],
            plateau_window: 5,
            plateau_tolerance: 0.01,
            chunk_size: 10,
            fixed_objective: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=200).contains(&self.horizon) {
            return Err(Error::Config(format!("horizon {} outside [1, 200]", self.horizon)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.population == 0 || self.minibatch == 0 || self.chunk_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("population, minibatch, chunk_size and max_epochs must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        AdamConfig::with_learning_rate(self.learning_rate).validate()
    }
}

/// `pi(s, omega) = 2 tanh(net([normalized s, normalized omega]))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    net: Mlp,
    state_scale: [f64; 4],
    state_shift: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyManifest {
    pub config: TrainConfig,
    pub mu_s: [f64; 4],
    pub sigma_s: [f64; 4],
    pub omega_x_range: (f64, f64),
    pub omega_theta_range: (f64, f64),
    pub fingerprint: String,
    pub epochs_run: usize,
}

impl PolicyModel {
    pub fn new(norm: &NormStats, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![POLICY_INPUT_DIM];
        dims.extend(hidden);
        dims.push(1);
        Self::from_net(Mlp::new(&dims, OutputActivation::Tanh, seed)?, norm)
    }

    pub fn from_net(net: Mlp, norm: &NormStats) -> Result<Self> {
        if net.input_dim() != POLICY_INPUT_DIM || net.output_dim() != 1 || net.output_activation() != OutputActivation::Tanh {
            return Err(Error::Config("policy net must map 6 inputs to one tanh output".into()));
        }
        Ok(Self {
            net,
            state_scale: std::array::from_fn(|d| 1.0 / norm.sigma_s[d]),
            state_shift: std::array::from_fn(|d| -norm.mu_s[d] / norm.sigma_s[d]),
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn fingerprint(&self) -> String {
        self.net.fingerprint()
    }

    fn input_row(&self, s: &EnvState, obj: &Objective, row: &mut [f64]) {
        for (d, v) in s.to_array().iter().enumerate() {
            row[d] = v * self.state_scale[d] + self.state_shift[d];
        }
        row[STATE_DIM..].copy_from_slice(&obj.normalized());
    }

    pub fn act_batch(&self, states: &[EnvState], objectives: &[Objective]) -> Vec<f64> {
        let mut input = Matrix::zeros(states.len(), POLICY_INPUT_DIM);
        for (r, (s, o)) in states.iter().zip(objectives).enumerate() {
            self.input_row(s, o, input.row_mut(r));
        }
        self.net
            .forward_unchecked(&input)
            .into_vec()
            .into_iter()
            .map(|v| v * ACTION_LIMIT)
            .collect()
    }

    pub fn action(&self, s: &EnvState, obj: &Objective) -> f64 {
        self.act_batch(std::slice::from_ref(s), std::slice::from_ref(obj))[0]
    }

    /// Taped actions (`n x 1`) for `states` (`n x 4`) and the per-row objective
    /// inputs produced by [`objective_inputs`].
    pub fn act_on_tape(&self, tape: &mut Tape<'_>, param: ParamId, states: NodeId, omega: NodeId) -> Result<NodeId> {
        let s = tape.col_affine(states, &self.state_scale, &self.state_shift)?;
        let input = tape.concat(s, omega)?;
        let out = tape.mlp(param, input)?;
        Ok(tape.scale(out, ACTION_LIMIT))
    }

    pub fn save(&self, dir: &Path, manifest: &PolicyManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.save(&dir.join("policy.json"))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, PolicyManifest)> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: PolicyManifest = serde_json::from_str(&text)?;
        let net = Mlp::load(&dir.join("policy.json"))?;
        let norm = NormStats {
            mu_s: manifest.mu_s,
            sigma_s: manifest.sigma_s,
            mu_ds: [0.0; 4],
            sigma_ds: [1.0; 4],
        };
        Ok((Self::from_net(net, &norm)?, manifest))
    }

    pub fn manifest(&self, config: &TrainConfig, norm: &NormStats, epochs_run: usize) -> PolicyManifest {
        PolicyManifest {
            config: config.clone(),
            mu_s: norm.mu_s,
            sigma_s: norm.sigma_s,
            omega_x_range: cartpole::OMEGA_X_RANGE,
            omega_theta_range: cartpole::OMEGA_THETA_RANGE,
            fingerprint: self.fingerprint(),
            epochs_run,
        }
    }
}

impl ActionSource for &PolicyModel {
    fn act(&mut self, state: &EnvState, objective: &Objective) -> f64 {
        self.action(state, objective)
    }
}

/// Constant `n x 2` policy input block for the given objectives.
pub fn objective_inputs(objectives: &[Objective]) -> Matrix {
    let rows: Vec<[f64; 2]> = objectives.iter().map(Objective::normalized).collect();
    Matrix::from_rows(&rows)
}

fn state_matrix(states: &[EnvState]) -> Matrix {
    let rows: Vec<[f64; 4]> = states.iter().map(|s| s.to_array()).collect();
    Matrix::from_rows(&rows)
}

/// One untaped virtual trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualRollout {
    /// `horizon + 1` states including `s0`.
    pub states: Vec<EnvState>,
    pub actions: Vec<f64>,
    /// `rewards[t] = reward(states[t + 1], omega)`.
    pub rewards: Vec<f64>,
    pub discounted_return: f64,
}

/// Alternates policy and model for `horizon` steps and sums discounted rewards.
pub fn rollout(
    policy: &mut impl ActionSource,
    model: &impl Dynamics,
    s0: EnvState,
    omega: Objective,
    horizon: usize,
    gamma: f64,
) -> Result<VirtualRollout> {
    let mut states = vec![s0];
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut ret = 0.0;
    let mut discount = 1.0;
    let mut s = s0;
    for t in 0..horizon {
        let a = policy.act(&s, &omega).clamp(-ACTION_LIMIT, ACTION_LIMIT);
        s = model.predict_batch(&[s], &[a])?[0];
        if !s.is_finite() {
            return Err(Error::RolloutDiverged { step: t });
        }
        let r = cartpole::reward(&s, &omega);
        ret += discount * r;
        discount *= gamma;
        states.push(s);
        actions.push(a);
        rewards.push(r);
    }
    Ok(VirtualRollout {
        states,
        actions,
        rewards,
        discounted_return: ret,
    })
}

/// Batched untaped virtual returns, one per `(start, objective)` pair.
pub fn virtual_returns(
    policy: &PolicyModel,
    model: &impl Dynamics,
    starts: &[EnvState],
    objectives: &[Objective],
    horizon: usize,
    gamma: f64,
) -> Result<Vec<f64>> {
    let mut states = starts.to_vec();
    let mut returns = vec![0.0; starts.len()];
    let mut discount = 1.0;
    for t in 0..horizon {
        let actions = policy.act_batch(&states, objectives);
        states = model.predict_batch(&states, &actions)?;
        if states.iter().any(|s| !s.is_finite()) {
            return Err(Error::RolloutDiverged { step: t });
        }
        for ((ret, s), o) in returns.iter_mut().zip(&states).zip(objectives) {
            *ret += discount * cartpole::reward(s, o);
        }
        discount *= gamma;
    }
    Ok(returns)
}

/// Node handles of a taped batch rollout.
#[derive(Debug, Clone)]
pub struct TapedRollout {
    /// `n x 1` discounted returns.
    pub returns: NodeId,
    pub actions: Vec<NodeId>,
    pub states: Vec<NodeId>,
}

/// Records a batch of virtual rollouts so the returns are differentiable
/// with respect to the policy parameters.
#[allow(clippy::too_many_arguments)]
pub fn rollout_on_tape(
    tape: &mut Tape<'_>,
    policy: &PolicyModel,
    policy_param: ParamId,
    model: &EnsembleModel,
    model_params: &[ParamId],
    starts: &[EnvState],
    objectives: &[Objective],
    horizon: usize,
    gamma: f64,
) -> Result<TapedRollout> {
    if !model.is_frozen() {
        return Err(Error::Config("virtual rollouts need a frozen ensemble".into()));
    }
    let omega = tape.constant(objective_inputs(objectives));
    let mut s = tape.constant(state_matrix(starts));
    let mut states = vec![s];
    let mut actions = Vec::with_capacity(horizon);
    let mut total: Option<NodeId> = None;
    let mut discount = 1.0;
    for t in 0..horizon {
        let a = policy.act_on_tape(tape, policy_param, s, omega)?;
        s = model.predict_on_tape(tape, model_params, s, a)?;
        if !tape.value(s).is_finite() {
            return Err(Error::RolloutDiverged { step: t });
        }
        let r = cartpole::reward_on_tape(tape, s, objectives)?;
        let r = if discount == 1.0 { r } else { tape.scale(r, discount) };
        total = Some(match total {
            Some(acc) => tape.add(acc, r)?,
            None => r,
        });
        discount *= gamma;
        states.push(s);
        actions.push(a);
    }
    let returns = total.ok_or_else(|| Error::Config("horizon must be >= 1".into()))?;
    Ok(TapedRollout {
        returns,
        actions,
        states,
    })
}

/// Returns of one chunk and the gradient of their sum w.r.t. the policy.
fn chunk_gradient(
    policy: &PolicyModel,
    model: &EnsembleModel,
    starts: &[EnvState],
    objectives: &[Objective],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, GradientBuffer)> {
    let mut tape = Tape::new();
    let pp = tape.register(&policy.net, true);
    let mp = model.register(&mut tape);
    let roll = rollout_on_tape(&mut tape, policy, pp, model, &mp, starts, objectives, cfg.horizon, cfg.gamma)?;
    let returns = tape.value(roll.returns).data().to_vec();
    let sum = tape.sum_all(roll.returns);
    let grads = tape.backward(sum, 1.0)?;
    Ok((returns, grads.param(pp).cloned().expect("policy registered trainable")))
}

/// Minibatch loss `-mean(R)` and its gradient, reduced over chunks in index order.
pub fn minibatch_loss_and_gradient(
    policy: &PolicyModel,
    model: &EnsembleModel,
    starts: &[EnvState],
    objectives: &[Objective],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>, GradientBuffer)> {
    let idx: Vec<usize> = (0..starts.len()).collect();
    let parts: Vec<(Vec<f64>, GradientBuffer)> = idx
        .par_chunks(cfg.chunk_size)
        .map(|c| {
            let lo = c[0];
            let hi = lo + c.len();
            chunk_gradient(policy, model, &starts[lo..hi], &objectives[lo..hi], cfg)
        })
        .collect::<Result<_>>()?;
    let mut grad = GradientBuffer::zeros_like(&policy.net);
    let mut returns = Vec::with_capacity(starts.len());
    for (r, g) in &parts {
        returns.extend_from_slice(r);
        grad.add_assign(g);
    }
    let n = starts.len() as f64;
    grad.scale(-1.0 / n);
    let loss = -returns.iter().sum::<f64>() / n;
    Ok((loss, returns, grad))
}

/// Fixed `(s0, omega)` training population.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPopulation {
    pub starts: Vec<EnvState>,
    pub objectives: Vec<Objective>,
}

impl RolloutPopulation {
    /// `s0` uniform over batch states; `omega` from the sampling box unless fixed.
    pub fn sample(batch: &TransitionBatch, cfg: &TrainConfig) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut starts = Vec::with_capacity(cfg.population);
        let mut objectives = Vec::with_capacity(cfg.population);
        for _ in 0..cfg.population {
            let i = rng.random_range(0..batch.len());
            starts.push(batch.transitions[i].s);
            objectives.push(match cfg.fixed_objective {
                Some(o) => o,
                None => cartpole::sample_objective(&mut rng),
            });
        }
        Ok(Self { starts, objectives })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_virtual_return: f64,
    pub std_virtual_return: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub epochs: Vec<EpochStats>,
    pub stop: StopReason,
}

impl LearningCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_virtual_return,std_virtual_return\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_virtual_return, e.std_virtual_return));
        }
        out
    }
}

fn plateaued(history: &[EpochStats], window: usize, tolerance: f64) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let (before, recent) = history.split_at(history.len() - window);
    let best = |s: &[EpochStats]| s.iter().map(|e| e.mean_virtual_return).fold(f64::NEG_INFINITY, f64::max);
    let (b, r) = (best(before), best(recent));
    (r - b) / b.abs().max(1e-12) < tolerance
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains a policy on the frozen `model`, calling `observer` after each epoch.
pub fn train_policy_with(
    model: &EnsembleModel,
    batch: &TransitionBatch,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochStats, &PolicyModel),
) -> Result<(PolicyModel, LearningCurve)> {
    cfg.validate()?;
    if !model.is_frozen() {
        return Err(Error::Config("policy training needs a frozen ensemble".into()));
    }
    let population = RolloutPopulation::sample(batch, cfg)?;
    let mut policy = PolicyModel::new(model.norm(), &cfg.hidden, cfg.seed)?;
    let mut adam = AdamState::new(&policy.net, AdamConfig::with_learning_rate(cfg.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let mut order: Vec<usize> = (0..population.len()).collect();
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_returns = Vec::with_capacity(population.len());
        let mut losses = Vec::new();
        for (mb, idx) in order.chunks(cfg.minibatch).enumerate() {
            let starts: Vec<EnvState> = idx.iter().map(|&i| population.starts[i]).collect();
            let objectives: Vec<Objective> = idx.iter().map(|&i| population.objectives[i]).collect();
            let (loss, returns, mut grad) =
                minibatch_loss_and_gradient(&policy, model, &starts, &objectives, cfg).map_err(|e| match e {
                    Error::RolloutDiverged { step } => Error::NanLoss { epoch, minibatch: mb, step },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, minibatch: mb, step: cfg.horizon });
            }
            if let Some(max_norm) = cfg.grad_clip {
                let norm = grad.norm();
                if norm > max_norm {
                    grad.scale(max_norm / norm);
                }
            }
            adam.step(&mut policy.net, &grad)?;
            losses.push(loss);
            epoch_returns.extend(returns);
        }
        let (mean, std) = mean_std(&epoch_returns);
        let stats = EpochStats {
            epoch,
            mean_virtual_return: mean,
            std_virtual_return: std,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        };
        observer(&stats, &policy);
        history.push(stats);
        if plateaued(&history, cfg.plateau_window, cfg.plateau_tolerance) {
            stop = StopReason::Plateau;
            break;
        }
    }
    Ok((policy, LearningCurve { epochs: history, stop }))
}

pub fn train_policy(model: &EnsembleModel, batch: &TransitionBatch, cfg: &TrainConfig) -> Result<(PolicyModel, LearningCurve)> {
    train_policy_with(model, batch, cfg, |_, _| {})
}

/// Max relative error between the BPTT gradient of `-mean(R)` and central
/// finite differences over every policy parameter.
pub fn policy_gradient_check(
    policy: &PolicyModel,
    model: &EnsembleModel,
    starts: &[EnvState],
    objectives: &[Objective],
    cfg: &TrainConfig,
    step: f64,
) -> Result<f64> {
    if cfg.horizon > 5 {
        return Err(Error::Config("gradient check expects horizon <= 5".into()));
    }
    let (_, _, grad) = minibatch_loss_and_gradient(policy, model, starts, objectives, cfg)?;
    let analytic = grad.values();
    let loss_at = |p: &PolicyModel| -> Result<f64> {
        let r = virtual_returns(p, model, starts, objectives, cfg.horizon, cfg.gamma)?;
        Ok(-r.iter().sum::<f64>() / r.len() as f64)
    };
    let mut worst: f64 = 0.0;
    let mut probe = policy.clone();
    for (i, &g) in analytic.iter().enumerate() {
        let orig = *probe.net.param_mut(i);
        *probe.net.param_mut(i) = orig + step;
        let up = loss_at(&probe)?;
        *probe.net.param_mut(i) = orig - step;
        let down = loss_at(&probe)?;
        *probe.net.param_mut(i) = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(g, fd));
    }
    Ok(worst)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

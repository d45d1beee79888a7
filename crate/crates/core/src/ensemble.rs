//! Ensemble of one-step dynamics models regressed on normalized state deltas.
//!
//! Each member maps `(normalized state, raw action)` to the normalized delta
//! `(delta - mu_ds) / sigma_ds`. The ensemble prediction averages members in
//! normalized space, then denormalizes and adds the delta to the state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cartpole::{self, angle_diff, EnvState, PhysicsParams};
use crate::dataset::{NormStats, TransitionBatch};
use crate::diffcore::{hex, AdamConfig, AdamState, Matrix, Mlp, NodeId, OutputActivation, ParamId, Tape};
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const INPUT_DIM: usize = STATE_DIM + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub k: usize,
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            k: 8,
            hidden: vec![20, 20],
            max_epochs: 100,
            patience: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("k, batch_size and max_epochs must be >= 1".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must be in (0, 1)".into()));
        }
        AdamConfig::with_learning_rate(self.learning_rate).validate()
    }

    pub fn member_dims(&self) -> Vec<usize> {
        let mut dims = vec![INPUT_DIM];
        dims.extend(&self.hidden);
        dims.push(STATE_DIM);
        dims
    }

    /// Initialization seed of member `k`.
    pub fn member_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(k as u64)
    }
}

/// Anything that predicts successor states for a batch of `(state, action)` pairs.
pub trait Dynamics {
    fn predict_batch(&self, states: &[EnvState], actions: &[f64]) -> Result<Vec<EnvState>>;
}

/// The true simulator, as a drop-in replacement for a learned model.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleDynamics(pub PhysicsParams);

impl Dynamics for OracleDynamics {
    fn predict_batch(&self, states: &[EnvState], actions: &[f64]) -> Result<Vec<EnvState>> {
        states
            .iter()
            .zip(actions)
            .map(|(s, &a)| cartpole::step(s, a, &self.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<Mlp>,
    norm: NormStats,
    frozen: bool,
}

fn inverse_scale_shift(mu: &[f64; 4], sigma: &[f64; 4]) -> ([f64; 4], [f64; 4]) {
    (
        std::array::from_fn(|d| 1.0 / sigma[d]),
        std::array::from_fn(|d| -mu[d] / sigma[d]),
    )
}

impl EnsembleModel {
    /// Wraps pre-built members. The result is frozen.
    pub fn new(members: Vec<Mlp>, norm: NormStats) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Config("ensemble needs K >= 1".into()))?;
        if first.input_dim() != INPUT_DIM || first.output_dim() != STATE_DIM {
            return Err(Error::DimensionMismatch {
                context: "ensemble member io",
                expected: INPUT_DIM,
                got: first.input_dim(),
            });
        }
        if members.iter().any(|m| m.dims() != first.dims()) {
            return Err(Error::Config("ensemble members must share an architecture".into()));
        }
        Ok(Self {
            members,
            norm,
            frozen: true,
        })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn members_mut(&mut self) -> Result<&mut [Mlp]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.members)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Hash over every member's parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.members {
            h.update(m.fingerprint().as_bytes());
        }
        hex(&h.finalize())
    }

    fn input_matrix(&self, states: &[EnvState], actions: &[f64]) -> Matrix {
        let (scale, shift) = inverse_scale_shift(&self.norm.mu_s, &self.norm.sigma_s);
        let mut m = Matrix::zeros(states.len(), INPUT_DIM);
        for (r, (s, &a)) in states.iter().zip(actions).enumerate() {
            let row = m.row_mut(r);
            for (d, v) in s.to_array().iter().enumerate() {
                row[d] = v * scale[d] + shift[d];
            }
            row[STATE_DIM] = a;
        }
        m
    }

    /// Mean member output in normalized delta space.
    fn mean_normalized(&self, input: &Matrix) -> Matrix {
        let mut acc = self.members[0].forward_unchecked(input);
        for m in &self.members[1..] {
            acc.add_assign(&m.forward_unchecked(input));
        }
        let inv_k = 1.0 / self.k() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v *= inv_k);
        acc
    }

    /// Predicted successor state for one `(state, action)` pair.
    pub fn predict_mean(&self, s: &EnvState, a: f64) -> Result<EnvState> {
        Ok(self.predict_batch(std::slice::from_ref(s), &[a])?[0])
    }

    /// Registers every member on `tape` with frozen weights.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<ParamId> {
        self.members.iter().map(|m| tape.register(m, false)).collect()
    }

    /// Taped ensemble prediction for `states` (`n x 4`) and `actions` (`n x 1`).
    /// Gradients reach the inputs, never the member weights.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape<'_>,
        members: &[ParamId],
        states: NodeId,
        actions: NodeId,
    ) -> Result<NodeId> {
        let (scale, shift) = inverse_scale_shift(&self.norm.mu_s, &self.norm.sigma_s);
        let s_norm = tape.col_affine(states, &scale, &shift)?;
        let input = tape.concat(s_norm, actions)?;
        let mut acc = tape.mlp(members[0], input)?;
        for &m in &members[1..] {
            let out = tape.mlp(m, input)?;
            acc = tape.add(acc, out)?;
        }
        let mean = tape.scale(acc, 1.0 / members.len() as f64);
        let delta = tape.col_affine(mean, &self.norm.sigma_ds, &self.norm.mu_ds)?;
        let next = tape.add(states, delta)?;
        tape.wrap_column(next, 1, -std::f64::consts::PI, std::f64::consts::PI)
    }

    pub fn save(&self, dir: &Path, manifest: &EnsembleManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, m) in self.members.iter().enumerate() {
            m.save(&dir.join(format!("member_{k}.json")))?;
        }
        self.norm.save(&dir.join("norm_stats.json"))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, EnsembleManifest)> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)?;
        let members = (0..manifest.k)
            .map(|k| Mlp::load(&dir.join(format!("member_{k}.json"))))
            .collect::<Result<Vec<_>>>()?;
        let norm = NormStats::load(&dir.join("norm_stats.json"))?;
        Ok((Self::new(members, norm)?, manifest))
    }
}

impl Dynamics for EnsembleModel {
    fn predict_batch(&self, states: &[EnvState], actions: &[f64]) -> Result<Vec<EnvState>> {
        if states.len() != actions.len() {
            return Err(Error::DimensionMismatch {
                context: "predict_batch actions",
                expected: states.len(),
                got: actions.len(),
            });
        }
        if states.iter().any(|s| !s.is_finite()) || actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("ensemble prediction input".into()));
        }
        let mean = self.mean_normalized(&self.input_matrix(states, actions));
        Ok(states
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let z = mean.row(r);
                let base = s.to_array();
                let next: [f64; 4] = std::array::from_fn(|d| {
                    base[d] + (z[d] * self.norm.sigma_ds[d] + self.norm.mu_ds[d])
                });
                let mut out = EnvState::from_array(next);
                out.theta = cartpole::wrap_angle(out.theta);
                out
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub member: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub holdout_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub k: usize,
    pub config: EnsembleConfig,
    pub holdout_episodes: Vec<usize>,
    pub members: Vec<MemberReport>,
    pub fingerprint: String,
}

/// Deterministic 90/10-style split of episode ids; returns `(train, holdout)`.
pub fn split_episodes(batch: &TransitionBatch, cfg: &EnsembleConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ids: Vec<usize> = batch.episodes().iter().map(|e| e[0].episode_id).collect();
    if ids.len() < 2 {
        return Err(Error::Config("need at least two episodes for a holdout split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    ids.shuffle(&mut rng);
    let n_hold = ((ids.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut holdout = ids.split_off(ids.len() - n_hold);
    ids.sort_unstable();
    holdout.sort_unstable();
    Ok((ids, holdout))
}

struct RegressionSet {
    inputs: Matrix,
    targets: Matrix,
}

fn regression_set(batch: &TransitionBatch, norm: &NormStats, episodes: &[usize]) -> RegressionSet {
    let (scale, shift) = inverse_scale_shift(&norm.mu_s, &norm.sigma_s);
    let (dscale, dshift) = inverse_scale_shift(&norm.mu_ds, &norm.sigma_ds);
    let keep: std::collections::HashSet<usize> = episodes.iter().copied().collect();
    let rows: Vec<_> = batch
        .transitions
        .iter()
        .filter(|t| keep.contains(&t.episode_id))
        .collect();
    let mut inputs = Matrix::zeros(rows.len(), INPUT_DIM);
    let mut targets = Matrix::zeros(rows.len(), STATE_DIM);
    for (r, t) in rows.iter().enumerate() {
        let s = t.s.to_array();
        let d = t.delta();
        let x = inputs.row_mut(r);
        for i in 0..STATE_DIM {
            x[i] = s[i] * scale[i] + shift[i];
        }
        x[STATE_DIM] = t.a;
        let y = targets.row_mut(r);
        for i in 0..STATE_DIM {
            y[i] = d[i] * dscale[i] + dshift[i];
        }
    }
    RegressionSet { inputs, targets }
}

fn gather(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

fn mse(net: &Mlp, set: &RegressionSet) -> f64 {
    let chunk = 4096;
    let n = set.inputs.rows();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let pred = net.forward_unchecked(&gather(&set.inputs, &idx));
        let tgt = gather(&set.targets, &idx);
        total += pred
            .data()
            .iter()
            .zip(tgt.data())
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>();
        start += chunk;
    }
    total / (n * STATE_DIM) as f64
}

fn train_member(
    member: usize,
    cfg: &EnsembleConfig,
    train: &RegressionSet,
    holdout: &RegressionSet,
) -> Result<(Mlp, MemberReport)> {
    let seed = cfg.member_seed(member);
    let mut net = Mlp::new(&cfg.member_dims(), OutputActivation::Identity, seed)?;
    let mut adam = AdamState::new(&net, AdamConfig::with_learning_rate(cfg.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(member as u64);

    let mut order: Vec<usize> = (0..train.inputs.rows()).collect();
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let x = gather(&train.inputs, idx);
            let y = gather(&train.targets, idx);
            let grads = {
                let mut tape = Tape::new();
                let p = tape.register(&net, true);
                let xin = tape.constant(x);
                let pred = tape.mlp(p, xin)?;
                let neg_y = y.map(|v| -v);
                let err = tape.add_const(pred, &neg_y)?;
                let sq = tape.square(err);
                let loss = tape.mean_all(sq);
                let l = tape.value(loss).get(0, 0);
                if !l.is_finite() {
                    return Err(Error::Diverged { member, epoch, loss: l });
                }
                tape.backward(loss, 1.0)?
                    .param(p)
                    .cloned()
                    .expect("trainable member")
            };
            adam.step(&mut net, &grads)
                .map_err(|_| Error::Diverged { member, epoch, loss: f64::NAN })?;
        }
        epochs_run = epoch + 1;
        let h = mse(&net, holdout);
        if !h.is_finite() {
            return Err(Error::Diverged { member, epoch, loss: h });
        }
        if h < best.0 {
            best = (h, net.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    let (holdout_mse, net, best_epoch) = best;
    Ok((
        net,
        MemberReport {
            member,
            seed,
            epochs_run,
            best_epoch,
            holdout_mse,
        },
    ))
}

/// Trains `cfg.k` members independently by minibatch Adam on the normalized
/// one-step delta regression. Members differ only in init and shuffle seeds.
pub fn train_ensemble(batch: &TransitionBatch, cfg: &EnsembleConfig) -> Result<(EnsembleModel, EnsembleManifest)> {
    cfg.validate()?;
    let norm = NormStats::compute(batch)?;
    let (train_eps, holdout_eps) = split_episodes(batch, cfg)?;
    let train = regression_set(batch, &norm, &train_eps);
    let holdout = regression_set(batch, &norm, &holdout_eps);

    let trained: Vec<(Mlp, MemberReport)> = (0..cfg.k)
        .into_par_iter()
        .map(|k| train_member(k, cfg, &train, &holdout))
        .collect::<Result<_>>()?;
    let (members, reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let model = EnsembleModel::new(members, norm)?;
    let manifest = EnsembleManifest {
        k: cfg.k,
        config: cfg.clone(),
        holdout_episodes: holdout_eps,
        members: reports,
        fingerprint: model.fingerprint(),
    };
    Ok((model, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub horizon: usize,
    pub samples: usize,
    /// Per-dimension RMSE of the open-loop prediction after `horizon` steps.
    pub rmse: [f64; 4],
    /// RMSE in units of the state standard deviation, pooled over dimensions.
    pub normalized_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub one_step_rmse: [f64; 4],
    pub drift: Vec<DriftPoint>,
    /// Fraction of consecutive horizon pairs where the pooled drift decreased.
    pub drift_violation_fraction: f64,
}

/// Open-loop error of `model` replaying logged actions on `episodes`.
pub fn drift_at(
    model: &impl Dynamics,
    batch: &TransitionBatch,
    episodes: &[usize],
    horizon: usize,
    sigma_s: &[f64; 4],
) -> Result<DriftPoint> {
    let keep: std::collections::HashSet<usize> = episodes.iter().copied().collect();
    let mut starts: Vec<&[crate::dataset::Transition]> = Vec::new();
    for ep in batch.episodes() {
        if !keep.contains(&ep[0].episode_id) || ep.len() < horizon {
            continue;
        }
        for t0 in 0..=ep.len() - horizon {
            starts.push(&ep[t0..t0 + horizon]);
        }
    }
    if starts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut states: Vec<EnvState> = starts.iter().map(|w| w[0].s).collect();
    for t in 0..horizon {
        let actions: Vec<f64> = starts.iter().map(|w| w[t].a).collect();
        states = model.predict_batch(&states, &actions)?;
    }
    let mut sq = [0.0; 4];
    for (w, pred) in starts.iter().zip(&states) {
        let truth = w[horizon - 1].s_next;
        let err = [
            pred.x - truth.x,
            angle_diff(pred.theta, truth.theta),
            pred.x_dot - truth.x_dot,
            pred.theta_dot - truth.theta_dot,
        ];
        for d in 0..4 {
            sq[d] += err[d] * err[d];
        }
    }
    let n = starts.len() as f64;
    let rmse = sq.map(|v| (v / n).sqrt());
    let normalized_rmse = ((0..4).map(|d| (rmse[d] / sigma_s[d]).powi(2)).sum::<f64>() / 4.0).sqrt();
    Ok(DriftPoint {
        horizon,
        samples: starts.len(),
        rmse,
        normalized_rmse,
    })
}

pub const REPORT_HORIZONS: [usize; 4] = [1, 10, 65, 80];

pub fn model_report(
    model: &impl Dynamics,
    batch: &TransitionBatch,
    episodes: &[usize],
    horizons: &[usize],
    sigma_s: &[f64; 4],
) -> Result<ModelReport> {
    let one_step = drift_at(model, batch, episodes, 1, sigma_s)?;
    let drift = horizons
        .iter()
        .map(|&h| drift_at(model, batch, episodes, h, sigma_s))
        .collect::<Result<Vec<_>>>()?;
    let pairs = drift.windows(2).count();
    let violations = drift
        .windows(2)
        .filter(|w| w[1].normalized_rmse < w[0].normalized_rmse)
        .count();
    Ok(ModelReport {
        one_step_rmse: one_step.rmse,
        drift,
        drift_violation_fraction: if pairs == 0 { 0.0 } else { violations as f64 / pairs as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BatchHeader, Transition};

    fn unit_norm() -> NormStats {
        NormStats {
            mu_s: [0.0; 4],
            sigma_s: [1.0; 4],
            mu_ds: [0.01, 0.02, 0.03, 0.04],
            sigma_ds: [0.5; 4],
        }
    }

    /// Member that outputs a constant vector regardless of input.
    fn constant_member(c: [f64; 4]) -> Mlp {
        Mlp::from_parts(
            &[INPUT_DIM, STATE_DIM],
            OutputActivation::Identity,
            vec![vec![0.0; INPUT_DIM * STATE_DIM]],
            vec![c.to_vec()],
        )
        .unwrap()
    }

    #[test]
    fn single_member_is_its_own_mean() {
        let m = Mlp::new(&[5, 20, 20, 4], OutputActivation::Identity, 4).unwrap();
        let norm = unit_norm();
        let model = EnsembleModel::new(vec![m.clone()], norm).unwrap();
        let s = EnvState::new(0.2, 1.0, -0.3, 0.5);
        let out = m.forward(&[0.2, 1.0, -0.3, 0.5, 0.7]).unwrap();
        let p = model.predict_mean(&s, 0.7).unwrap();
        let base = s.to_array();
        let expect: [f64; 4] = std::array::from_fn(|d| base[d] + out[d] * 0.5 + norm.mu_ds[d]);
        assert!((p.x - expect[0]).abs() < 1e-12);
        assert!((p.theta - cartpole::wrap_angle(expect[1])).abs() < 1e-12);
        assert!((p.x_dot - expect[2]).abs() < 1e-12);
        assert!((p.theta_dot - expect[3]).abs() < 1e-12);
    }

    #[test]
    fn opposite_members_cancel() {
        let c = [0.3, -0.2, 1.0, 0.5];
        let model = EnsembleModel::new(
            vec![constant_member(c), constant_member(c.map(|v| -v))],
            unit_norm(),
        )
        .unwrap();
        let s = EnvState::new(1.0, 0.5, 0.0, -1.0);
        let p = model.predict_mean(&s, 1.0).unwrap();
        let mu = unit_norm().mu_ds;
        assert_eq!(p.to_array(), [1.0 + mu[0], 0.5 + mu[1], mu[2], -1.0 + mu[3]]);
    }

    #[test]
    fn prediction_wraps_angle() {
        let model = EnsembleModel::new(vec![constant_member([0.0, 1.0, 0.0, 0.0])], unit_norm()).unwrap();
        let p = model.predict_mean(&EnvState::new(0.0, 3.0, 0.0, 0.0), 0.0).unwrap();
        assert!(p.theta < -2.0 && p.theta >= -std::f64::consts::PI);
    }

    #[test]
    fn taped_prediction_is_bit_identical() {
        let members: Vec<_> = (0..3)
            .map(|k| Mlp::new(&[5, 20, 20, 4], OutputActivation::Identity, k).unwrap())
            .collect();
        let model = EnsembleModel::new(members, unit_norm()).unwrap();
        let states = [EnvState::new(0.1, 3.1, 0.2, 2.0), EnvState::new(-2.0, -0.3, 1.0, -1.0)];
        let actions = [1.5, -0.5];
        let plain = model.predict_batch(&states, &actions).unwrap();
        let mut tape = Tape::new();
        let pids = model.register(&mut tape);
        let rows: Vec<[f64; 4]> = states.iter().map(|s| s.to_array()).collect();
        let s = tape.leaf(Matrix::from_rows(&rows));
        let a = tape.leaf(Matrix::from_vec(2, 1, actions.to_vec()));
        let next = model.predict_on_tape(&mut tape, &pids, s, a).unwrap();
        for (r, p) in plain.iter().enumerate() {
            assert_eq!(tape.value(next).row(r), &p.to_array());
        }
    }

    #[test]
    fn frozen_model_refuses_mutation() {
        let mut model = EnsembleModel::new(vec![constant_member([0.0; 4])], unit_norm()).unwrap();
        assert!(matches!(model.members_mut(), Err(Error::Frozen)));
        model.set_frozen(false);
        assert!(model.members_mut().is_ok());
    }

    #[test]
    fn rejects_mixed_architectures() {
        let a = Mlp::new(&[5, 20, 4], OutputActivation::Identity, 0).unwrap();
        let b = Mlp::new(&[5, 10, 4], OutputActivation::Identity, 0).unwrap();
        assert!(EnsembleModel::new(vec![a, b], unit_norm()).is_err());
        assert!(EnsembleModel::new(vec![], unit_norm()).is_err());
    }

    fn toy_batch(episodes: usize, steps: usize, f: impl Fn(&EnvState, f64) -> EnvState) -> TransitionBatch {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut transitions = Vec::new();
        for ep in 0..episodes {
            for t in 0..steps {
                let s = EnvState::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let a = rng.random_range(-2.0..=2.0);
                transitions.push(Transition {
                    s,
                    a,
                    s_next: f(&s, a),
                    episode_id: ep,
                    step_index: t,
                });
            }
        }
        TransitionBatch {
            header: BatchHeader {
                version: 1,
                seed: 9,
                episodes,
                steps,
            },
            transitions,
        }
    }

    #[test]
    fn learns_constant_dynamics() {
        let batch = toy_batch(20, 100, |s, _| *s);
        let cfg = EnsembleConfig {
            k: 2,
            max_epochs: 60,
            ..EnsembleConfig::default()
        };
        let (model, manifest) = train_ensemble(&batch, &cfg).unwrap();
        assert!(model.is_frozen());
        for m in &manifest.members {
            assert!(m.holdout_mse < 1e-4, "{m:?}");
        }
    }

    #[test]
    fn learns_linear_dynamics() {
        let batch = toy_batch(20, 100, |s, a| EnvState { x: s.x + 0.1 * a, ..*s });
        let cfg = EnsembleConfig {
            k: 2,
            max_epochs: 60,
            learning_rate: 3e-3,
            ..EnsembleConfig::default()
        };
        let (model, _) = train_ensemble(&batch, &cfg).unwrap();
        let (_, holdout) = split_episodes(&batch, &cfg).unwrap();
        let mut se = 0.0;
        let mut n = 0;
        for t in batch.transitions.iter().filter(|t| holdout.contains(&t.episode_id)) {
            let p = model.predict_mean(&t.s, t.a).unwrap();
            se += (p.x - t.s_next.x).powi(2);
            n += 1;
        }
        assert!(se / (n as f64) < 1e-5, "mse {}", se / n as f64);
    }

    #[test]
    fn oracle_model_has_zero_drift() {
        let params = PhysicsParams::default();
        let batch = crate::dataset::generate_batch(4, 100, 2, &params).unwrap();
        let sigma = NormStats::compute(&batch).unwrap().sigma_s;
        let report = model_report(&OracleDynamics(params), &batch, &[0, 1, 2, 3], &REPORT_HORIZONS, &sigma).unwrap();
        for d in &report.drift {
            assert_eq!(d.rmse, [0.0; 4], "h={}", d.horizon);
        }
        assert_eq!(report.drift[0].rmse, report.one_step_rmse);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let params = PhysicsParams::default();
        let batch = crate::dataset::generate_batch(30, 2, 2, &params).unwrap();
        let cfg = EnsembleConfig::default();
        let (a, b) = split_episodes(&batch, &cfg).unwrap();
        assert_eq!(b.len(), 3);
        assert!(a.iter().all(|e| !b.contains(e)));
        assert_eq!(split_episodes(&batch, &cfg).unwrap(), (a, b));
    }
}

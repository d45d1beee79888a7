//! True-environment evaluation: objective grid returns, virtual/real
//! consistency, specialist comparison and the objective switch scenario.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cartpole::{
    self, angle_diff, run_episode, run_schedule, EnvState, Episode, Objective, ObjectiveSchedule, PhysicsParams,
    RandomPolicy,
};
use crate::dataset::TransitionBatch;
use crate::ensemble::{Dynamics, EnsembleModel};
use crate::error::{Error, Result};
use crate::trainer::{self, rollout, virtual_returns, LearningCurve, PolicyModel, TrainConfig, VirtualRollout};

pub const EVAL_STEPS: usize = 250;
pub const START_SET_SEED: u64 = 2022;
pub const SCENARIO_SWITCH_STEP: usize = 150;
pub const SCENARIO_TARGET_TOLERANCE: f64 = 0.25;
pub const SCENARIO_UPRIGHT_ANGLE: f64 = 0.4;

/// Fixed start-state set shared by every policy and objective.
pub fn start_states(n: usize, seed: u64) -> Vec<EnvState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| cartpole::sample_initial_state(&mut rng)).collect()
}

/// One column of the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridObjective {
    Fixed(Objective),
    /// A fresh objective from the training box for every start state.
    Sampled,
}

impl GridObjective {
    pub fn label(&self) -> String {
        match self {
            Self::Fixed(o) => format!("({},{})", o.omega_x, o.omega_theta),
            Self::Sampled => "p(omega)".to_string(),
        }
    }

    /// Per-start objectives; sampled ones depend only on `seed`.
    pub fn per_start(&self, n: usize, seed: u64) -> Vec<Objective> {
        match self {
            Self::Fixed(o) => vec![*o; n],
            Self::Sampled => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(3);
                (0..n).map(|_| cartpole::sample_objective(&mut rng)).collect()
            }
        }
    }
}

/// The four fixed objectives and the sampled column of the benchmark table.
pub fn benchmark_grid() -> Vec<GridObjective> {
    vec![
        GridObjective::Fixed(Objective::new(-1.0, 0.0)),
        GridObjective::Fixed(Objective::new(-1.0, 3.0)),
        GridObjective::Fixed(Objective::new(0.0, 1.0)),
        GridObjective::Fixed(Objective::new(1.0, 2.0)),
        GridObjective::Sampled,
    ]
}

/// Real and virtual returns of one policy from a shared start set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReturns {
    pub real: Vec<f64>,
    /// Virtual returns over the training horizon.
    pub virtual_train_horizon: Vec<f64>,
    /// Virtual returns over the evaluation length.
    pub virtual_eval_horizon: Vec<f64>,
}

pub fn real_returns(
    policy: &PolicyModel,
    starts: &[EnvState],
    objectives: &[Objective],
    steps: usize,
    params: &PhysicsParams,
) -> Result<Vec<f64>> {
    starts
        .par_iter()
        .zip(objectives)
        .map(|(s, o)| Ok(run_episode(&mut &*policy, *o, *s, steps, params)?.total_return))
        .collect()
}

/// Real returns of the uniform random policy; start `i` uses stream `i`.
pub fn random_policy_returns(
    starts: &[EnvState],
    objectives: &[Objective],
    steps: usize,
    seed: u64,
    params: &PhysicsParams,
) -> Result<Vec<f64>> {
    starts
        .par_iter()
        .zip(objectives)
        .enumerate()
        .map(|(i, (s, o))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Ok(run_episode(&mut RandomPolicy::new(rng), *o, *s, steps, params)?.total_return)
        })
        .collect()
}

pub fn policy_returns(
    policy: &PolicyModel,
    model: &EnsembleModel,
    starts: &[EnvState],
    objectives: &[Objective],
    train_horizon: usize,
    params: &PhysicsParams,
) -> Result<PolicyReturns> {
    Ok(PolicyReturns {
        real: real_returns(policy, starts, objectives, EVAL_STEPS, params)?,
        virtual_train_horizon: virtual_returns(policy, model, starts, objectives, train_horizon, 1.0)?,
        virtual_eval_horizon: virtual_returns(policy, model, starts, objectives, EVAL_STEPS, 1.0)?,
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean over `v` (zero for a single sample).
pub fn std_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub label: String,
    pub objective: GridObjective,
    pub mean_return: f64,
    pub std_error: f64,
    pub per_seed_mean: Vec<f64>,
    pub virtual_train_horizon_mean: f64,
    pub virtual_train_horizon_std_error: f64,
    pub virtual_eval_horizon_mean: f64,
    pub virtual_eval_horizon_std_error: f64,
    pub per_seed_virtual_train_horizon: Vec<f64>,
    pub per_seed_virtual_eval_horizon: Vec<f64>,
    pub random_policy_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub start_seed: u64,
    pub n_starts: usize,
    pub steps: usize,
    pub train_horizon: usize,
    pub n_policies: usize,
    pub entries: Vec<GridEntry>,
}

impl EvalReport {
    pub fn entry(&self, label: &str) -> Option<&GridEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "objective,mean_return,std_error,virtual_h_train_mean,virtual_h_train_std_error,virtual_h_eval_mean,virtual_h_eval_std_error,random_policy_mean\n",
        );
        for e in &self.entries {
            out.push_str(&format!(
                "\"{}\",{},{},{},{},{},{},{}\n",
                e.label,
                e.mean_return,
                e.std_error,
                e.virtual_train_horizon_mean,
                e.virtual_train_horizon_std_error,
                e.virtual_eval_horizon_mean,
                e.virtual_eval_horizon_std_error,
                e.random_policy_mean
            ));
        }
        out
    }
}

/// Evaluates every policy (one per training seed) on every grid column.
pub fn evaluate_grid(
    policies: &[PolicyModel],
    model: &EnsembleModel,
    grid: &[GridObjective],
    n_starts: usize,
    start_seed: u64,
    train_horizon: usize,
    params: &PhysicsParams,
) -> Result<EvalReport> {
    if policies.is_empty() || n_starts == 0 {
        return Err(Error::Config("evaluation needs at least one policy and one start".into()));
    }
    let starts = start_states(n_starts, start_seed);
    let mut entries = Vec::with_capacity(grid.len());
    for g in grid {
        let objectives = g.per_start(n_starts, start_seed);
        let mut real = Vec::new();
        let mut v_train = Vec::new();
        let mut v_eval = Vec::new();
        for p in policies {
            let r = policy_returns(p, model, &starts, &objectives, train_horizon, params)?;
            real.push(mean(&r.real));
            v_train.push(mean(&r.virtual_train_horizon));
            v_eval.push(mean(&r.virtual_eval_horizon));
        }
        let random = random_policy_returns(&starts, &objectives, EVAL_STEPS, start_seed, params)?;
        entries.push(GridEntry {
            label: g.label(),
            objective: *g,
            mean_return: mean(&real),
            std_error: std_error(&real),
            per_seed_mean: real,
            virtual_train_horizon_mean: mean(&v_train),
            virtual_train_horizon_std_error: std_error(&v_train),
            virtual_eval_horizon_mean: mean(&v_eval),
            virtual_eval_horizon_std_error: std_error(&v_eval),
            per_seed_virtual_train_horizon: v_train,
            per_seed_virtual_eval_horizon: v_eval,
            random_policy_mean: mean(&random),
        });
    }
    Ok(EvalReport {
        start_seed,
        n_starts,
        steps: EVAL_STEPS,
        train_horizon,
        n_policies: policies.len(),
        entries,
    })
}

/// A fixed-objective policy trained with the variable objective budget.
#[derive(Debug, Clone)]
pub struct Specialist {
    pub objective: Objective,
    pub seed: u64,
    pub policy: PolicyModel,
    pub curve: LearningCurve,
}

pub fn train_specialists(
    model: &EnsembleModel,
    batch: &TransitionBatch,
    cfg: &TrainConfig,
    objectives: &[Objective],
    seeds: &[u64],
) -> Result<Vec<Specialist>> {
    let mut out = Vec::new();
    for o in objectives {
        for &seed in seeds {
            let spec_cfg = TrainConfig {
                fixed_objective: Some(*o),
                seed,
                ..cfg.clone()
            };
            let (policy, curve) = trainer::train_policy(model, batch, &spec_cfg)?;
            out.push(Specialist {
                objective: *o,
                seed,
                policy,
                curve,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistGap {
    pub objective: Objective,
    pub vop_mean: f64,
    pub specialist_mean: f64,
    /// `vop_mean - specialist_mean`.
    pub gap: f64,
    /// Whether `vop_mean >= specialist_mean - tolerance * |specialist_mean|`.
    pub on_par: bool,
}

/// VOP-minus-specialist real return per objective on the shared start set.
pub fn specialist_gaps(
    vops: &[PolicyModel],
    specialists: &[Specialist],
    n_starts: usize,
    start_seed: u64,
    tolerance: f64,
    params: &PhysicsParams,
) -> Result<Vec<SpecialistGap>> {
    let starts = start_states(n_starts, start_seed);
    let mut objectives: Vec<Objective> = Vec::new();
    for s in specialists {
        if !objectives.contains(&s.objective) {
            objectives.push(s.objective);
        }
    }
    let policy_mean = |p: &PolicyModel, o: Objective| -> Result<f64> {
        Ok(mean(&real_returns(p, &starts, &vec![o; n_starts], EVAL_STEPS, params)?))
    };
    objectives
        .into_iter()
        .map(|o| {
            let vop = vops.iter().map(|p| policy_mean(p, o)).collect::<Result<Vec<_>>>()?;
            let spec = specialists
                .iter()
                .filter(|s| s.objective == o)
                .map(|s| policy_mean(&s.policy, o))
                .collect::<Result<Vec<_>>>()?;
            let (vop_mean, specialist_mean) = (mean(&vop), mean(&spec));
            Ok(SpecialistGap {
                objective: o,
                vop_mean,
                specialist_mean,
                gap: vop_mean - specialist_mean,
                on_par: vop_mean >= specialist_mean - tolerance * specialist_mean.abs(),
            })
        })
        .collect()
}

/// Target `-1` for the first 150 steps, then `+1` for 100 more.
pub fn switch_schedule(omega_theta: f64) -> ObjectiveSchedule {
    ObjectiveSchedule {
        initial: Objective::new(-1.0, omega_theta),
        changes: vec![(SCENARIO_SWITCH_STEP, Objective::new(1.0, omega_theta))],
    }
}

/// Cart at the left wall with the pole hanging down.
pub fn scenario_start() -> EnvState {
    EnvState::new(-cartpole::X_LIMIT, -std::f64::consts::PI, 0.0, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFlags {
    pub final_x: f64,
    pub max_abs_theta_after_switch: f64,
    /// First step after the switch with `|x - 1| < 0.25`.
    pub first_reach_step: Option<usize>,
    /// `|x - 1| < 0.25` at the last step.
    pub reached_target: bool,
    /// Pole stayed within 0.4 rad after the switch.
    pub kept_upright: bool,
    /// Pole passed beyond pi/2 after the switch.
    pub swung_through: bool,
}

impl ScenarioFlags {
    pub fn from_states(states: &[EnvState]) -> Self {
        let after = &states[SCENARIO_SWITCH_STEP.min(states.len() - 1)..];
        let max_theta = after.iter().map(|s| s.theta.abs()).fold(0.0, f64::max);
        let near = |s: &EnvState| (s.x - 1.0).abs() < SCENARIO_TARGET_TOLERANCE;
        let final_x = states[states.len() - 1].x;
        Self {
            final_x,
            max_abs_theta_after_switch: max_theta,
            first_reach_step: after.iter().position(near).map(|i| i + SCENARIO_SWITCH_STEP),
            reached_target: (final_x - 1.0).abs() < SCENARIO_TARGET_TOLERANCE,
            kept_upright: max_theta < SCENARIO_UPRIGHT_ANGLE,
            swung_through: max_theta > std::f64::consts::FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub omega_theta: f64,
    pub episode: Episode,
    pub flags: ScenarioFlags,
}

pub fn objective_switch_scenario(policy: &PolicyModel, omega_theta: f64, params: &PhysicsParams) -> Result<ScenarioResult> {
    let episode = run_schedule(&mut &*policy, &switch_schedule(omega_theta), scenario_start(), EVAL_STEPS, params)?;
    let flags = ScenarioFlags::from_states(&episode.states);
    Ok(ScenarioResult {
        omega_theta,
        episode,
        flags,
    })
}

/// `t,x,theta,x_dot,theta_dot,a,r,omega_x,omega_theta`; the last row holds
/// the final state only.
pub fn episode_csv(ep: &Episode) -> String {
    let mut out = String::from("t,x,theta,x_dot,theta_dot,a,r,omega_x,omega_theta\n");
    for (t, s) in ep.states.iter().enumerate() {
        out.push_str(&format!("{t},{},{},{},{}", s.x, s.theta, s.x_dot, s.theta_dot));
        match (ep.actions.get(t), ep.rewards.get(t), ep.objectives.get(t)) {
            (Some(a), Some(r), Some(o)) => out.push_str(&format!(",{a},{r},{},{}\n", o.omega_x, o.omega_theta)),
            _ => out.push_str(",,,,\n"),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub virtual_rollout: VirtualRollout,
    pub real: Episode,
    /// Euclidean state distance per step, with the angle difference wrapped.
    pub divergence: Vec<f64>,
}

pub fn state_distance(a: &EnvState, b: &EnvState) -> f64 {
    let d = [a.x - b.x, angle_diff(a.theta, b.theta), a.x_dot - b.x_dot, a.theta_dot - b.theta_dot];
    d.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Paired model and true-environment trajectories from one start.
pub fn transfer_check(
    policy: &PolicyModel,
    model: &impl Dynamics,
    omega: Objective,
    start: EnvState,
    steps: usize,
    params: &PhysicsParams,
) -> Result<TransferResult> {
    let virtual_rollout = rollout(&mut &*policy, model, start, omega, steps, 1.0)?;
    let real = run_episode(&mut &*policy, omega, start, steps, params)?;
    let divergence = virtual_rollout
        .states
        .iter()
        .zip(&real.states)
        .map(|(v, r)| state_distance(v, r))
        .collect();
    Ok(TransferResult {
        virtual_rollout,
        real,
        divergence,
    })
}

/// States with the pole roughly horizontal, used to probe objective sensitivity.
pub fn mid_swing_states(n: usize, seed: u64) -> Vec<EnvState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            EnvState::new(
                rng.random_range(-1.0..=1.0),
                side * rng.random_range(0.8..=2.3),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-3.0..=3.0),
            )
        })
        .collect()
}

/// Mean absolute action difference between two objectives over `states`.
pub fn conditioning_gap(policy: &PolicyModel, states: &[EnvState], a: Objective, b: Objective) -> f64 {
    let pa = policy.act_batch(states, &vec![a; states.len()]);
    let pb = policy.act_batch(states, &vec![b; states.len()]);
    mean(&pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
}

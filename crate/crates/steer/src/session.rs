use std::time::Duration;

use serde::Serialize;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::MissedTickBehavior;
use vop_core::cartpole::{self, EnvState, Objective, PhysicsParams};
use vop_core::evaluator;
use vop_core::PolicyModel;

pub const DEFAULT_TICK_HZ: f64 = 50.0;
pub const MAX_STEP_TICKS: usize = 10_000;

/// One streamed snapshot. `s` is the state after tick `tick`, produced by
/// action `a` under objective `omega`; `r` is the reward on `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Frame {
    pub tick: u64,
    pub s: [f64; 4],
    pub a: f64,
    pub r: f64,
    pub omega: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionState {
    pub state: EnvState,
    pub objective: Objective,
    pub tick: u64,
    pub running: bool,
    pub policy_id: String,
    pub tick_hz: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum SteerError {
    #[error("{0}")]
    Rejected(String),
    #[error("session stopped")]
    Closed,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub tick_hz: f64,
    pub start: EnvState,
    pub objective: Objective,
    pub running: bool,
    pub params: PhysicsParams,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            tick_hz: DEFAULT_TICK_HZ,
            start: evaluator::scenario_start(),
            objective: Objective::new(0.0, 1.0),
            running: true,
            params: PhysicsParams::default(),
        }
    }
}

/// The single authoritative simulation state, advanced one env step per tick.
#[derive(Debug, Clone)]
pub struct Session {
    policy: PolicyModel,
    params: PhysicsParams,
    policy_id: String,
    tick_hz: f64,
    state: EnvState,
    objective: Objective,
    tick: u64,
    running: bool,
}

impl Session {
    pub fn new(policy: PolicyModel, cfg: &SessionConfig) -> Self {
        Self {
            policy_id: policy.fingerprint(),
            policy,
            params: cfg.params,
            tick_hz: cfg.tick_hz,
            state: cfg.start,
            objective: cfg.objective,
            tick: 0,
            running: cfg.running,
        }
    }

    pub fn snapshot(&self) -> SessionState {
        SessionState {
            state: self.state,
            objective: self.objective,
            tick: self.tick,
            running: self.running,
            policy_id: self.policy_id.clone(),
            tick_hz: self.tick_hz,
        }
    }

    pub fn advance(&mut self) -> Result<Frame, SteerError> {
        let (a, next, r) = cartpole::closed_loop_tick(&mut &self.policy, &self.state, &self.objective, &self.params)
            .map_err(|e| SteerError::Rejected(e.to_string()))?;
        self.state = next;
        self.tick += 1;
        Ok(Frame {
            tick: self.tick,
            s: next.to_array(),
            a,
            r,
            omega: [self.objective.omega_x, self.objective.omega_theta],
        })
    }

    /// Updates either component; rejects objectives outside the training box.
    pub fn set_objective(&mut self, omega_x: Option<f64>, omega_theta: Option<f64>) -> Result<(), SteerError> {
        let next = Objective::new(
            omega_x.unwrap_or(self.objective.omega_x),
            omega_theta.unwrap_or(self.objective.omega_theta),
        );
        if !next.in_training_box() {
            let (xr, tr) = (cartpole::OMEGA_X_RANGE, cartpole::OMEGA_THETA_RANGE);
            return Err(SteerError::Rejected(format!(
                "objective ({}, {}) outside the training box omega_x in [{}, {}], omega_theta in [{}, {}]",
                next.omega_x, next.omega_theta, xr.0, xr.1, tr.0, tr.1
            )));
        }
        self.objective = next;
        Ok(())
    }

    /// Restarts at rest from `(x, theta)`; missing fields default to the
    /// scenario start. Returns the tick-0 frame.
    pub fn reset(&mut self, x: Option<f64>, theta: Option<f64>) -> Result<Frame, SteerError> {
        let start = evaluator::scenario_start();
        let x = x.unwrap_or(start.x);
        let theta = theta.unwrap_or(start.theta);
        if !(x.is_finite() && x.abs() <= cartpole::X_LIMIT) || !theta.is_finite() {
            return Err(SteerError::Rejected(format!(
                "reset state x={x}, theta={theta} invalid; need |x| <= {} and finite theta",
                cartpole::X_LIMIT
            )));
        }
        self.state = EnvState::new(x, cartpole::wrap_angle(theta), 0.0, 0.0);
        self.tick = 0;
        Ok(Frame {
            tick: 0,
            s: self.state.to_array(),
            a: 0.0,
            r: 0.0,
            omega: [self.objective.omega_x, self.objective.omega_theta],
        })
    }
}

type Reply<T> = oneshot::Sender<Result<T, SteerError>>;

enum Command {
    Objective {
        omega_x: Option<f64>,
        omega_theta: Option<f64>,
        reply: Reply<SessionState>,
    },
    Reset {
        x: Option<f64>,
        theta: Option<f64>,
        reply: Reply<SessionState>,
    },
    SetRunning(bool, Reply<SessionState>),
    Step(usize, Reply<Vec<Frame>>),
    Snapshot(Reply<SessionState>),
}

/// Cloneable access to a running session task.
#[derive(Clone)]
pub struct SessionHandle {
    commands: mpsc::Sender<Command>,
    frames: broadcast::Sender<Frame>,
}

impl SessionHandle {
    async fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, SteerError> {
        let (tx, rx) = oneshot::channel();
        self.commands.send(make(tx)).await.map_err(|_| SteerError::Closed)?;
        rx.await.map_err(|_| SteerError::Closed)?
    }

    pub async fn set_objective(&self, omega_x: Option<f64>, omega_theta: Option<f64>) -> Result<SessionState, SteerError> {
        self.call(|reply| Command::Objective { omega_x, omega_theta, reply }).await
    }

    pub async fn reset(&self, x: Option<f64>, theta: Option<f64>) -> Result<SessionState, SteerError> {
        self.call(|reply| Command::Reset { x, theta, reply }).await
    }

    pub async fn pause(&self) -> Result<SessionState, SteerError> {
        self.call(|reply| Command::SetRunning(false, reply)).await
    }

    pub async fn resume(&self) -> Result<SessionState, SteerError> {
        self.call(|reply| Command::SetRunning(true, reply)).await
    }

    /// Advances exactly `ticks` steps regardless of the running flag.
    pub async fn step(&self, ticks: usize) -> Result<Vec<Frame>, SteerError> {
        if ticks > MAX_STEP_TICKS {
            return Err(SteerError::Rejected(format!("ticks must be <= {MAX_STEP_TICKS}")));
        }
        self.call(|reply| Command::Step(ticks, reply)).await
    }

    pub async fn snapshot(&self) -> Result<SessionState, SteerError> {
        self.call(Command::Snapshot).await
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Frame> {
        self.frames.subscribe()
    }
}

/// Spawns the tick loop on the current tokio runtime.
pub fn spawn_session(policy: PolicyModel, cfg: SessionConfig) -> SessionHandle {
    let (commands, mut rx) = mpsc::channel::<Command>(64);
    let (frames, _) = broadcast::channel(1024);
    let out = frames.clone();
    let period = Duration::from_secs_f64(1.0 / cfg.tick_hz.max(1e-3));
    let mut session = Session::new(policy, &cfg);
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(MissedTickBehavior::Skip);
        loop {
            tokio::select! {
                biased;
                cmd = rx.recv() => {
                    let Some(cmd) = cmd else { break };
                    handle(&mut session, cmd, &out);
                }
                _ = interval.tick(), if session.running => {
                    match session.advance() {
                        Ok(f) => {
                            let _ = out.send(f);
                        }
                        Err(_) => session.running = false,
                    }
                }
            }
        }
    });
    SessionHandle { commands, frames }
}

fn handle(session: &mut Session, cmd: Command, frames: &broadcast::Sender<Frame>) {
    match cmd {
        Command::Objective { omega_x, omega_theta, reply } => {
            let r = session.set_objective(omega_x, omega_theta).map(|_| session.snapshot());
            let _ = reply.send(r);
        }
        Command::Reset { x, theta, reply } => {
            let r = session.reset(x, theta).map(|f| {
                let _ = frames.send(f);
                session.snapshot()
            });
            let _ = reply.send(r);
        }
        Command::SetRunning(running, reply) => {
            session.running = running;
            let _ = reply.send(Ok(session.snapshot()));
        }
        Command::Step(ticks, reply) => {
            let mut out = Vec::with_capacity(ticks);
            let mut result = Ok(());
            for _ in 0..ticks {
                match session.advance() {
                    Ok(f) => {
                        let _ = frames.send(f);
                        out.push(f);
                    }
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                }
            }
            let _ = reply.send(result.map(|_| out));
        }
        Command::Snapshot(reply) => {
            let _ = reply.send(Ok(session.snapshot()));
        }
    }
}

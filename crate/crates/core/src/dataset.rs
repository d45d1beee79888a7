//! Offline transition batch generated by the uniform random policy, its
//! normalization statistics, and the JSON Lines file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cartpole::{self, angle_diff, ActionSource, EnvState, Objective, PhysicsParams, RandomPolicy, ACTION_LIMIT};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: EnvState,
    pub a: f64,
    pub s_next: EnvState,
    pub episode_id: usize,
    pub step_index: usize,
}

impl Transition {
    /// `s_next - s` with the angle component taken as the shortest wrapped difference.
    pub fn delta(&self) -> [f64; 4] {
        state_delta(&self.s, &self.s_next)
    }
}

pub fn state_delta(s: &EnvState, s_next: &EnvState) -> [f64; 4] {
    [
        s_next.x - s.x,
        angle_diff(s_next.theta, s.theta),
        s_next.x_dot - s.x_dot,
        s_next.theta_dot - s.theta_dot,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchHeader {
    pub version: u32,
    pub seed: u64,
    pub episodes: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub header: BatchHeader,
    pub transitions: Vec<Transition>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    ep: usize,
    t: usize,
    s: EnvState,
    a: f64,
    sn: EnvState,
}

/// Runs `episodes` random-action episodes of `steps` transitions each.
///
/// Episode `i` draws from its own ChaCha stream `(seed, i)`, so the output is
/// independent of how episodes are scheduled across threads.
pub fn generate_batch(
    episodes: usize,
    steps: usize,
    seed: u64,
    params: &PhysicsParams,
) -> Result<TransitionBatch> {
    if episodes == 0 || steps == 0 {
        return Err(Error::Config("episodes and steps must be >= 1".into()));
    }
    params.validate()?;
    let per_episode: Vec<Vec<Transition>> = (0..episodes)
        .into_par_iter()
        .map(|ep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ep as u64);
            let mut s = cartpole::sample_initial_state(&mut rng);
            let mut policy = RandomPolicy::new(rng);
            let idle = Objective::new(0.0, 0.0);
            let mut out = Vec::with_capacity(steps);
            for t in 0..steps {
                let a = policy.act(&s, &idle);
                let s_next = cartpole::step(&s, a, params)?;
                out.push(Transition {
                    s,
                    a,
                    s_next,
                    episode_id: ep,
                    step_index: t,
                });
                s = s_next;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(TransitionBatch {
        header: BatchHeader {
            version: FORMAT_VERSION,
            seed,
            episodes,
            steps,
        },
        transitions: per_episode.into_iter().flatten().collect(),
    })
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Transitions grouped by episode, in file order.
    pub fn episodes(&self) -> Vec<&[Transition]> {
        self.transitions
            .chunk_by(|a, b| a.episode_id == b.episode_id)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n").map_err(io)?;
        for t in &self.transitions {
            let rec = Record {
                ep: t.episode_id,
                t: t.step_index,
                s: t.s,
                a: t.a,
                sn: t.s_next,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let invalid = |record: usize, message: String| Error::Validation {
            path: path.to_path_buf(),
            record,
            message,
        };

        let header_line = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: BatchHeader =
            serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(parse_err(1, format!("unsupported version {}", header.version)));
        }

        let mut transitions: Vec<Transition> = Vec::with_capacity(header.episodes * header.steps);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
            let record = transitions.len();
            if !(rec.a.is_finite() && rec.a.abs() <= ACTION_LIMIT) {
                return Err(invalid(record, format!("action {} outside [-2, 2]", rec.a)));
            }
            if !rec.s.is_valid() || !rec.sn.is_valid() {
                return Err(invalid(record, "state outside the valid box".into()));
            }
            let expected_t = match transitions.last() {
                Some(prev) if prev.episode_id == rec.ep => prev.step_index + 1,
                _ => 0,
            };
            if rec.t != expected_t {
                return Err(invalid(
                    record,
                    format!("episode {} step {} not contiguous (expected {expected_t})", rec.ep, rec.t),
                ));
            }
            transitions.push(Transition {
                s: rec.s,
                a: rec.a,
                s_next: rec.sn,
                episode_id: rec.ep,
                step_index: rec.t,
            });
        }
        let expected = header.episodes * header.steps;
        if transitions.is_empty() || transitions.len() != expected {
            return Err(parse_err(
                transitions.len() + 2,
                format!("expected {expected} records, found {}", transitions.len()),
            ));
        }
        Ok(Self {
            header,
            transitions,
        })
    }
}

/// Per-dimension mean and population standard deviation of states and of
/// wrapped one-step deltas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mu_s: [f64; 4],
    pub sigma_s: [f64; 4],
    pub mu_ds: [f64; 4],
    pub sigma_ds: [f64; 4],
}

fn mean_std(rows: impl Iterator<Item = [f64; 4]> + Clone) -> ([f64; 4], [f64; 4]) {
    let mut n = 0usize;
    let mut mean = [0.0; 4];
    for r in rows.clone() {
        n += 1;
        for d in 0..4 {
            mean[d] += r[d];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = [0.0; 4];
    for r in rows {
        for d in 0..4 {
            var[d] += (r[d] - mean[d]).powi(2);
        }
    }
    let std = var.map(|v| (v / n as f64).sqrt().max(SIGMA_FLOOR));
    (mean, std)
}

impl NormStats {
    pub fn compute(batch: &TransitionBatch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (mu_s, sigma_s) = mean_std(batch.transitions.iter().map(|t| t.s.to_array()));
        let (mu_ds, sigma_ds) = mean_std(batch.transitions.iter().map(Transition::delta));
        Ok(Self {
            mu_s,
            sigma_s,
            mu_ds,
            sigma_ds,
        })
    }

    pub fn normalize_state(&self, s: &EnvState) -> [f64; 4] {
        let a = s.to_array();
        std::array::from_fn(|d| (a[d] - self.mu_s[d]) / self.sigma_s[d])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

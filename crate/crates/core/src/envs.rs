//! Small continuous-control environments with known dynamics.
//!
//! Both environments keep their full physical state in the observation
//! vector, so a step is a pure function of `(observation, action)`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Pendulum,
    Pointmass2d,
}

impl std::fmt::Display for EnvName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvName::Pendulum => write!(f, "pendulum"),
            EnvName::Pointmass2d => write!(f, "pointmass2d"),
        }
    }
}

// Pendulum constants.
const GRAVITY: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
const MAX_TORQUE: f64 = 2.0;
const MAX_SPEED: f64 = 8.0;
const PENDULUM_DT: f64 = 0.05;

// Point-mass constants.
const MAX_FORCE: f64 = 1.0;
const MAX_VELOCITY: f64 = 2.0;
const POINTMASS_DT: f64 = 0.1;
pub const POINTMASS_GOAL: [f64; 2] = [0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub dt: f64,
}

impl EnvSpec {
    pub fn new(name: EnvName, horizon: usize) -> Self {
        match name {
            EnvName::Pendulum => EnvSpec {
                name,
                obs_dim: 3,
                act_dim: 1,
                action_low: vec![-MAX_TORQUE],
                action_high: vec![MAX_TORQUE],
                horizon,
                dt: PENDULUM_DT,
            },
            EnvName::Pointmass2d => EnvSpec {
                name,
                obs_dim: 4,
                act_dim: 2,
                action_low: vec![-MAX_FORCE; 2],
                action_high: vec![MAX_FORCE; 2],
                horizon,
                dt: POINTMASS_DT,
            },
        }
    }

    pub fn pendulum() -> Self {
        Self::new(EnvName::Pendulum, 200)
    }

    pub fn pointmass2d() -> Self {
        Self::new(EnvName::Pointmass2d, 200)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        let finite = self
            .action_low
            .iter()
            .chain(&self.action_high)
            .all(|v| v.is_finite());
        if !finite || self.action_low.len() != self.act_dim || self.action_high.len() != self.act_dim {
            return Err(Error::config("action bounds must be finite, one pair per dimension"));
        }
        Ok(())
    }

    /// Finite bound on `|r(s, a)|`.
    pub fn reward_bound(&self) -> f64 {
        match self.name {
            EnvName::Pendulum => PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE,
            EnvName::Pointmass2d => {
                let dx = 1.0 + POINTMASS_GOAL[0].abs();
                let dy = 1.0 + POINTMASS_GOAL[1].abs();
                dx * dx + dy * dy + 0.01 * 2.0 * MAX_FORCE * MAX_FORCE
            }
        }
    }

    /// Midpoint and half-width of each action dimension.
    pub fn action_center_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let center = self
            .action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        let half = self
            .action_low
            .iter()
            .zip(&self.action_high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect();
        (center, half)
    }
}

/// Environment state. The observation holds the complete physical state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub step_count: usize,
}

impl EnvState {
    /// Pendulum angle in `[-π, π]`, zero at upright.
    pub fn pendulum_angle(&self) -> f64 {
        self.obs[1].atan2(self.obs[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    pub clipped: bool,
}

/// Initial state from the environment's fixed initial distribution.
pub fn reset(spec: &EnvSpec, seed: u64) -> EnvState {
    let mut r = rng::stream(seed);
    reset_with(spec, &mut r)
}

pub fn reset_with<R: Rng + ?Sized>(spec: &EnvSpec, r: &mut R) -> EnvState {
    let obs = match spec.name {
        EnvName::Pendulum => {
            let theta: f64 = r.random_range(-PI..=PI);
            let theta_dot: f64 = r.random_range(-1.0..=1.0);
            vec![theta.cos(), theta.sin(), theta_dot]
        }
        EnvName::Pointmass2d => {
            let x: f64 = r.random_range(-1.0..=1.0);
            let y: f64 = r.random_range(-1.0..=1.0);
            vec![x, y, 0.0, 0.0]
        }
    };
    EnvState { obs, step_count: 0 }
}

/// Clips `action` into the declared bounds. Returns whether anything changed.
pub fn clip_action(spec: &EnvSpec, action: &[f64]) -> (Vec<f64>, bool) {
    let mut clipped = false;
    let out = action
        .iter()
        .zip(spec.action_low.iter().zip(&spec.action_high))
        .map(|(&a, (&lo, &hi))| {
            let c = a.clamp(lo, hi);
            clipped |= c != a;
            c
        })
        .collect();
    (out, clipped)
}

/// Ground-truth transition on observations; `action` must already be in bounds.
pub fn transition(spec: &EnvSpec, obs: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
    match spec.name {
        EnvName::Pendulum => {
            let theta = obs[1].atan2(obs[0]);
            let theta_dot = obs[2];
            let u = action[0];
            let reward = -(theta * theta + 0.1 * theta_dot * theta_dot + 0.001 * u * u);
            let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u;
            let new_dot = (theta_dot + accel * spec.dt).clamp(-MAX_SPEED, MAX_SPEED);
            let new_theta = theta + new_dot * spec.dt;
            (vec![new_theta.cos(), new_theta.sin(), new_dot], reward)
        }
        EnvName::Pointmass2d => {
            let (p, v) = ([obs[0], obs[1]], [obs[2], obs[3]]);
            let dist2 = (p[0] - POINTMASS_GOAL[0]).powi(2) + (p[1] - POINTMASS_GOAL[1]).powi(2);
            let force2 = action[0] * action[0] + action[1] * action[1];
            let reward = -dist2 - 0.01 * force2;
            let mut next = vec![0.0; 4];
            for d in 0..2 {
                let mut vel = (v[d] + action[d] * spec.dt).clamp(-MAX_VELOCITY, MAX_VELOCITY);
                let mut pos = p[d] + vel * spec.dt;
                if !(-1.0..=1.0).contains(&pos) {
                    pos = pos.clamp(-1.0, 1.0);
                    vel = 0.0;
                }
                next[d] = pos;
                next[2 + d] = vel;
            }
            (next, reward)
        }
    }
}

/// One environment step. Out-of-range actions are clipped and the event logged.
pub fn step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
    if action.len() != spec.act_dim {
        return Err(Error::Input(format!(
            "action has {} dimensions, expected {}",
            action.len(),
            spec.act_dim
        )));
    }
    if action.iter().any(|a| a.is_nan()) {
        return Err(Error::Input("NaN in action".into()));
    }
    let (a, clipped) = clip_action(spec, action);
    if clipped {
        log::debug!("{}: action {:?} clipped to {:?}", spec.name, action, a);
    }
    let (obs, reward) = transition(spec, &state.obs, &a);
    let step_count = state.step_count + 1;
    Ok(StepOutcome {
        next: EnvState { obs, step_count },
        reward,
        done: step_count >= spec.horizon,
        clipped,
    })
}

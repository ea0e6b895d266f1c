//! Small continuous-control tasks with bounded actions and fixed-length
//! episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Steps per episode as seen by the agent.
    pub episode_len: usize,
    /// Per-step reward range `(lo, hi)`.
    pub reward_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode over (always a time limit for the built-in tasks).
    pub done: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
    fn observe(&self) -> Vec<f64>;
    /// Complete dynamic state, for checkpoints.
    fn state(&self) -> Vec<f64>;
    fn set_state(&mut self, state: &[f64]) -> Result<()>;
}

fn check_action(action: &[f64], dim: usize) -> Result<Vec<f64>> {
    if action.len() != dim {
        return Err(shape_err("action", dim, action.len()));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("action {action:?}")));
    }
    Ok(action.iter().map(|a| a.clamp(-1.0, 1.0)).collect())
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(th: f64) -> f64 {
    let r = (th + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Rod pendulum (uniform rod, pivot at one end) that has to be swung up
/// and balanced. `θ = 0` is upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    pub theta: f64,
    pub omega: f64,
    t: usize,
}

impl Pendulum {
    pub const G: f64 = 10.0;
    pub const M: f64 = 1.0;
    pub const L: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_STEPS: usize = 1000;

    pub fn new() -> Self {
        let worst = PI * PI + 0.1 * Self::MAX_SPEED.powi(2) + 0.001 * Self::MAX_TORQUE.powi(2);
        Self {
            spec: EnvSpec {
                name: "pendulum_swingup".into(),
                obs_dim: 3,
                act_dim: 1,
                episode_len: Self::MAX_STEPS,
                reward_range: (-worst, 0.0),
            },
            theta: PI,
            omega: 0.0,
            t: 0,
        }
    }

    /// Puts the pendulum in a given state at the start of an episode.
    pub fn set(&mut self, theta: f64, omega: f64) {
        self.theta = wrap_angle(theta);
        self.omega = omega;
        self.t = 0;
    }

    /// Mechanical energy, zero potential at the pivot height.
    pub fn energy(theta: f64, omega: f64) -> f64 {
        let inertia = Self::M * Self::L * Self::L / 3.0;
        0.5 * inertia * omega * omega + Self::M * Self::G * Self::L / 2.0 * theta.cos()
    }

    pub fn reward(theta: f64, omega: f64, torque: f64) -> f64 {
        let th = wrap_angle(theta);
        -(th * th + 0.1 * omega * omega + 0.001 * torque * torque)
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // (−π, π]
        let th = PI - rng.random::<f64>() * 2.0 * PI;
        self.set(th, 0.0);
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        let a = check_action(action, 1)?;
        let u = a[0] * Self::MAX_TORQUE;
        let reward = Self::reward(self.theta, self.omega, u);
        let (g, m, l) = (Self::G, Self::M, Self::L);
        let acc = 3.0 * g / (2.0 * l) * self.theta.sin() + 3.0 / (m * l * l) * u;
        self.omega = (self.omega + acc * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta = wrap_angle(self.theta + self.omega * Self::DT);
        self.t += 1;
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.t >= Self::MAX_STEPS,
        })
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega / Self::MAX_SPEED]
    }

    fn state(&self) -> Vec<f64> {
        vec![self.theta, self.omega, self.t as f64]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        let [theta, omega, t] = state else {
            return Err(shape_err("pendulum state", 3, state.len()));
        };
        self.theta = *theta;
        self.omega = *omega;
        self.t = *t as usize;
        Ok(())
    }
}

/// 2-D double integrator in the box `[−1, 1]²` with a fixed goal.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    t: usize,
}

impl PointMass {
    pub const GOAL: [f64; 2] = [0.5, 0.5];
    pub const DT: f64 = 0.05;
    pub const ACCEL: f64 = 2.0;
    pub const MAX_SPEED: f64 = 1.0;
    pub const SIGMA: f64 = 0.25;
    pub const MAX_STEPS: usize = 1000;

    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "point_mass".into(),
                obs_dim: 6,
                act_dim: 2,
                episode_len: Self::MAX_STEPS,
                reward_range: (0.0, 1.0),
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            t: 0,
        }
    }

    pub fn set(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.t = 0;
    }

    fn reward(&self) -> f64 {
        let d2: f64 = (0..2).map(|i| (self.pos[i] - Self::GOAL[i]).powi(2)).sum();
        (-d2 / (Self::SIGMA * Self::SIGMA)).exp()
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        self.set(pos, [0.0; 2]);
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        let a = check_action(action, 2)?;
        let reward = self.reward();
        for i in 0..2 {
            self.vel[i] = (self.vel[i] + a[i] * Self::ACCEL * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
            let p = self.pos[i] + self.vel[i] * Self::DT;
            if p.abs() > 1.0 {
                self.vel[i] = 0.0;
            }
            self.pos[i] = p.clamp(-1.0, 1.0);
        }
        self.t += 1;
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.t >= Self::MAX_STEPS,
        })
    }

    fn observe(&self) -> Vec<f64> {
        let [px, py] = self.pos;
        let [vx, vy] = self.vel;
        vec![px, py, vx, vy, Self::GOAL[0] - px, Self::GOAL[1] - py]
    }

    fn state(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.t as f64]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        let [px, py, vx, vy, t] = state else {
            return Err(shape_err("point mass state", 5, state.len()));
        };
        self.pos = [*px, *py];
        self.vel = [*vx, *vy];
        self.t = *t as usize;
        Ok(())
    }
}

/// Repeats every action `k` times and sums the rewards.
pub struct ActionRepeat<E> {
    inner: E,
    k: usize,
    spec: EnvSpec,
}

impl<E: Env> ActionRepeat<E> {
    pub fn new(inner: E, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("action_repeat must be at least 1".into()));
        }
        let base = inner.spec().clone();
        let spec = EnvSpec {
            episode_len: base.episode_len.div_ceil(k),
            reward_range: (base.reward_range.0 * k as f64, base.reward_range.1 * k as f64),
            ..base
        };
        Ok(Self { inner, k, spec })
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut E {
        &mut self.inner
    }
}

impl<E: Env> Env for ActionRepeat<E> {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        let mut total = 0.0;
        let mut last = None;
        for _ in 0..self.k {
            let s = self.inner.step(action)?;
            total += s.reward;
            let done = s.done;
            last = Some(s);
            if done {
                break;
            }
        }
        let mut s = last.expect("k >= 1");
        s.reward = total;
        Ok(s)
    }

    fn observe(&self) -> Vec<f64> {
        self.inner.observe()
    }

    fn state(&self) -> Vec<f64> {
        self.inner.state()
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        self.inner.set_state(state)
    }
}

pub const ENV_NAMES: [&str; 2] = ["pendulum_swingup", "point_mass"];

/// Builds a named task wrapped in an action repeat.
pub fn make_env(name: &str, action_repeat: usize) -> Result<Box<dyn Env>> {
    Ok(match name {
        "pendulum_swingup" => Box::new(ActionRepeat::new(Pendulum::new(), action_repeat)?),
        "point_mass" => Box::new(ActionRepeat::new(PointMass::new(), action_repeat)?),
        other => return Err(Error::UnknownEnv(other.to_string())),
    })
}

/// The scripted energy-shaping swing-up law, as a normalized action.
/// Pumps energy towards the upright level with no balancing mode.
pub fn energy_shaping_action(theta: f64, omega: f64, gain: f64) -> f64 {
    let e_top = Pendulum::M * Pendulum::G * Pendulum::L / 2.0;
    let u = gain * (e_top - Pendulum::energy(theta, omega)) * omega;
    (u / Pendulum::MAX_TORQUE).clamp(-1.0, 1.0)
}

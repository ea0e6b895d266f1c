//! Twin-critic deterministic actor-critic on top of the latent encoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ema_blend, AdamW, Binding, Graph, Mlp, MlpSpec, ParamStore, Tensor, Var};
use crate::replay::SegmentBatch;
use crate::repr::Representation;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub actor_delay: usize,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub nstep: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub critic_grads_to_encoder: bool,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_delay: 2,
            policy_noise: 0.2,
            noise_clip: 0.3,
            nstep: 3,
            lr: 3e-4,
            weight_decay: 0.0,
            hidden: vec![512, 512],
            critic_grads_to_encoder: true,
        }
    }
}

/// Linear decay of the exploration standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub start: f64,
    pub end: f64,
    pub duration: u64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
            duration: 50_000,
        }
    }
}

impl NoiseSchedule {
    pub fn std(&self, step: u64) -> f64 {
        let frac = if self.duration == 0 {
            1.0
        } else {
            (step as f64 / self.duration as f64).min(1.0)
        };
        self.start * (1.0 - frac) + self.end * frac
    }
}

/// `width` draws of `clip(N(0, σ²), −c, c)`.
pub fn smoothing_noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64, clip: f64, width: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    (0..width).map(|_| normal.sample(rng).clamp(-clip, clip)).collect()
}

/// `Σ_{n<N} γⁿ r_n + γᴺ q`, truncated at the first terminal transition
/// (which also drops the bootstrap). `rewards[n][b]`, `terminal[n][b]`.
pub fn nstep_target(rewards: &[Vec<f64>], terminal: &[Vec<bool>], bootstrap: &[f64], gamma: f64, n: usize) -> Vec<f64> {
    bootstrap
        .iter()
        .enumerate()
        .map(|(b, &q)| {
            let mut y = 0.0;
            let mut disc = 1.0;
            for k in 0..n {
                y += disc * rewards[k][b];
                disc *= gamma;
                if terminal[k][b] {
                    return y;
                }
            }
            y + disc * q
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Td3Stats {
    pub critic_loss: f64,
    /// Only set on calls that stepped the actor.
    pub actor_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Td3<T> {
    cfg: Td3Config,
    act_dim: usize,
    q1: Mlp,
    q2: Mlp,
    actor_net: Mlp,
    pub critic: ParamStore<T>,
    pub critic_target: ParamStore<T>,
    pub actor: ParamStore<T>,
    pub actor_target: ParamStore<T>,
    opt: AdamW,
    pub calls: u64,
    pub actor_updates: u64,
}

impl<T: Scalar> Td3<T> {
    pub fn new<R: Rng + ?Sized>(cfg: Td3Config, latent_width: usize, act_dim: usize, rng: &mut R) -> Result<Self> {
        if cfg.nstep == 0 || cfg.actor_delay == 0 {
            return Err(Error::Config("nstep and actor_delay must be positive".into()));
        }
        let mut critic = ParamStore::new("critic");
        let qspec = MlpSpec::new(latent_width + act_dim, &cfg.hidden, 1);
        let q1 = Mlp::new(qspec.clone(), "q1", &mut critic, rng);
        let q2 = Mlp::new(qspec, "q2", &mut critic, rng);
        let mut actor = ParamStore::new("actor");
        let actor_net = Mlp::new(MlpSpec::new(latent_width, &cfg.hidden, act_dim), "pi", &mut actor, rng);
        let opt = AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        Ok(Self {
            critic_target: critic.clone_as("critic_target"),
            actor_target: actor.clone_as("actor_target"),
            cfg,
            act_dim,
            q1,
            q2,
            actor_net,
            critic,
            actor,
            opt,
            calls: 0,
            actor_updates: 0,
        })
    }

    pub fn config(&self) -> &Td3Config {
        &self.cfg
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn set_optimizer(&mut self, opt: AdamW) {
        self.opt = opt;
    }

    pub fn stores(&self) -> [&ParamStore<T>; 4] {
        [&self.critic, &self.critic_target, &self.actor, &self.actor_target]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 4] {
        [
            &mut self.critic,
            &mut self.critic_target,
            &mut self.actor,
            &mut self.actor_target,
        ]
    }

    /// `tanh(π(z))` on the tape.
    pub fn policy_var(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, binding: Binding) -> Result<Var> {
        let h = self.actor_net.forward(g, store, z, binding)?;
        Ok(g.tanh(h))
    }

    /// Both critics on the tape, `[B, 1]` each.
    pub fn q_vars(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, a: Var, binding: Binding) -> Result<(Var, Var)> {
        let za = g.concat_cols(z, a)?;
        Ok((
            self.q1.forward(g, store, za, binding)?,
            self.q2.forward(g, store, za, binding)?,
        ))
    }

    /// Deterministic action for a `[B, W]` latent batch.
    pub fn policy(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let a = self.policy_var(&mut g, &self.actor, zv, Binding::Frozen)?;
        Ok(g.value(a).clone())
    }

    /// Min of the target critics at the smoothed target action.
    fn bootstrap<R: Rng + ?Sized>(&self, z: &Tensor<T>, rng: &mut R) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let a = self.policy_var(&mut g, &self.actor_target, zv, Binding::Frozen)?;
        let mut noisy = g.value(a).clone();
        let eps = smoothing_noise(rng, self.cfg.policy_noise, self.cfg.noise_clip, noisy.numel());
        for (v, e) in noisy.data_mut().iter_mut().zip(eps) {
            *v = (*v + T::of(e)).max(-T::one()).min(T::one());
        }
        let av = g.constant(noisy);
        let (q1, q2) = self.q_vars(&mut g, &self.critic_target, zv, av, Binding::Frozen)?;
        let m = g.min(q1, q2)?;
        Ok(g.value(m).data().iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// n-step TD targets. The bootstrap latent comes from the online encoder.
    pub fn critic_target<R: Rng + ?Sized>(
        &self,
        repr: &Representation<T>,
        batch: &SegmentBatch<T>,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let n = self.cfg.nstep;
        if batch.span() < n {
            return Err(Error::Config(format!(
                "segment of {} steps is shorter than nstep {n}",
                batch.span()
            )));
        }
        let z = repr.encode(&batch.obs[n])?;
        let q = self.bootstrap(&z, rng)?;
        let rewards: Vec<Vec<f64>> = batch.rewards[..n]
            .iter()
            .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
            .collect();
        let y = nstep_target(&rewards, &batch.terminal[..n], &q, self.cfg.gamma, n);
        Ok(y.into_iter().map(T::of).collect())
    }

    /// `mean_b [(q1 − y)² + (q2 − y)²]` at the stored first action.
    pub fn critic_loss(&self, g: &mut Graph<T>, repr: &Representation<T>, batch: &SegmentBatch<T>, y: &[T]) -> Result<Var> {
        let o = g.constant(batch.obs[0].clone());
        let binding = if self.cfg.critic_grads_to_encoder {
            Binding::Trainable
        } else {
            Binding::Frozen
        };
        let z = repr.encode_var(g, o, binding)?;
        let a = g.constant(batch.actions[0].clone());
        let (q1, q2) = self.q_vars(g, &self.critic, z, a, Binding::Trainable)?;
        let yv = g.constant(Tensor::new(vec![y.len(), 1], y.to_vec())?);
        let d1 = g.sub(q1, yv)?;
        let d2 = g.sub(q2, yv)?;
        let s1 = g.square(d1);
        let s2 = g.square(d2);
        let s = g.add(s1, s2)?;
        Ok(g.mean(s))
    }

    /// `−mean_b min_k q_k(z, π(z))` with a detached latent and frozen critics.
    pub fn actor_loss(&self, g: &mut Graph<T>, repr: &Representation<T>, batch: &SegmentBatch<T>) -> Result<Var> {
        let z = g.constant(repr.encode(&batch.obs[0])?);
        let a = self.policy_var(g, &self.actor, z, Binding::Trainable)?;
        let (q1, q2) = self.q_vars(g, &self.critic, z, a, Binding::Frozen)?;
        let m = g.min(q1, q2)?;
        let mean = g.mean(m);
        Ok(g.scale(mean, -T::one()))
    }

    /// Critic step (plus encoder step when critic gradients reach it), a
    /// delayed actor step, then the target-network updates.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        repr: &mut Representation<T>,
        batch: &SegmentBatch<T>,
        rng: &mut R,
    ) -> Result<Td3Stats> {
        self.calls += 1;
        let y = self.critic_target(repr, batch, rng)?;
        let mut g = Graph::new();
        let loss = self.critic_loss(&mut g, repr, batch, &y)?;
        let critic_loss = g.value(loss).data()[0].to_f64_lossy();
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {critic_loss}")));
        }
        g.backward(loss)?;
        g.accumulate_into(&mut self.critic);
        self.opt.step(&mut self.critic);
        if self.cfg.critic_grads_to_encoder && g.accumulate_into(&mut repr.enc) > 0 {
            repr.step_encoder();
        }
        let mut actor_loss = None;
        if self.calls % self.cfg.actor_delay as u64 == 0 {
            let mut g = Graph::new();
            let loss = self.actor_loss(&mut g, repr, batch)?;
            let v = g.value(loss).data()[0].to_f64_lossy();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("actor loss {v}")));
            }
            g.backward(loss)?;
            g.accumulate_into(&mut self.actor);
            self.opt.step(&mut self.actor);
            self.actor_updates += 1;
            actor_loss = Some(v);
        }
        let tau = T::of(self.cfg.tau);
        ema_blend(&mut self.critic_target, &self.critic, tau)?;
        ema_blend(&mut self.actor_target, &self.actor, tau)?;
        Ok(Td3Stats {
            critic_loss,
            actor_loss,
        })
    }

    /// Action for one observation: exploit when `noise_std` is `None`,
    /// otherwise Gaussian exploration noise, clipped to `[−1, 1]`.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        repr: &Representation<T>,
        obs: &[T],
        noise_std: Option<f64>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let o = Tensor::new(vec![1, obs.len()], obs.to_vec())?;
        self.act_from_latent(&repr.encode(&o)?, noise_std, rng)
    }

    /// [`Self::select_action`] for an already encoded `[1, W]` latent.
    pub fn act_from_latent<R: Rng + ?Sized>(&self, z: &Tensor<T>, noise_std: Option<f64>, rng: &mut R) -> Result<Vec<f64>> {
        let a = self.policy(z)?;
        let mut out: Vec<f64> = a.data().iter().map(|v| v.to_f64_lossy()).collect();
        if let Some(std) = noise_std {
            let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
            out.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        if out.len() != self.act_dim || out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("policy output {out:?}")));
        }
        Ok(out)
    }
}

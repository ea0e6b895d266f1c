//! Training configuration.
//!
//! Config files are TOML. Keys may sit at the top level or inside one
//! level of `[section]` tables; sections are only for grouping, so every
//! key name must be unique across the file. Unknown keys are rejected.
//!
//! ```toml
//! seed = 3
//! [td3]
//! nstep = 1
//! [encoder]
//! fsq_levels = [8, 6, 5]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::ENV_NAMES;
use crate::error::{Error, Result};
use crate::nn::AdamW;
use crate::repr::{ReprConfig, TargetMode};
use crate::td3::{NoiseSchedule, Td3Config};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // run
    pub seed: u64,
    pub eval_seed: u64,
    pub env: String,
    pub action_repeat: usize,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub num_eval_episodes: usize,
    pub random_episodes: usize,
    pub utd: usize,
    pub out_dir: Option<String>,
    pub precision: Precision,
    pub probe_size: usize,
    pub checkpoint_every: u64,
    /// Stop once an evaluation mean reaches this return.
    pub target_return: Option<f64>,
    /// Log `wall_time_s = 0` so metrics files are comparable bytewise.
    pub deterministic_clock: bool,

    // replay
    pub buffer_capacity: usize,
    pub batch_size: usize,

    // td3
    pub gamma: f64,
    pub tau: f64,
    pub actor_delay: usize,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub nstep: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mlp_hidden: Vec<usize>,
    pub critic_grads_to_encoder: bool,
    pub expl_noise_start: f64,
    pub expl_noise_end: f64,
    pub expl_noise_duration: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    // representation
    pub horizon: usize,
    pub gamma_rep: f64,
    pub enc_lr: f64,
    pub enc_tau: f64,
    pub enc_hidden: Vec<usize>,
    pub fsq_levels: Vec<u32>,
    pub fsq_literal_bound: bool,
    pub latent_width: usize,
    pub target_mode: TargetMode,
    pub ablate_reward_head: bool,
    pub ablate_reconstruction: bool,
    pub ablate_projection: bool,
    /// Identity in place of the quantizer.
    pub ablate_fsq: bool,
    /// Plain TD3 on observations.
    pub identity_encoder: bool,
    pub projection_width: usize,
    pub reward_weight: f64,
    pub reconstruction_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let r = ReprConfig::default();
        let t = Td3Config::default();
        let n = NoiseSchedule::default();
        let adam = AdamW::default();
        Self {
            seed: 1,
            eval_seed: 10_007,
            env: "pendulum_swingup".into(),
            action_repeat: 2,
            total_env_steps: 100_000,
            eval_every: 10_000,
            num_eval_episodes: 10,
            random_episodes: 10,
            utd: 1,
            out_dir: None,
            precision: Precision::F32,
            probe_size: 512,
            checkpoint_every: 0,
            target_return: None,
            deterministic_clock: false,
            buffer_capacity: 1_000_000,
            batch_size: 256,
            gamma: t.gamma,
            tau: t.tau,
            actor_delay: t.actor_delay,
            policy_noise: t.policy_noise,
            noise_clip: t.noise_clip,
            nstep: t.nstep,
            lr: t.lr,
            weight_decay: t.weight_decay,
            mlp_hidden: t.hidden,
            critic_grads_to_encoder: t.critic_grads_to_encoder,
            expl_noise_start: n.start,
            expl_noise_end: n.end,
            expl_noise_duration: n.duration,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            horizon: r.horizon,
            gamma_rep: r.gamma_rep,
            enc_lr: r.enc_lr,
            enc_tau: r.enc_tau,
            enc_hidden: r.enc_hidden,
            fsq_levels: r.fsq_levels,
            fsq_literal_bound: r.fsq_literal_bound,
            latent_width: r.latent_width,
            target_mode: r.target_mode,
            ablate_reward_head: r.reward_head,
            ablate_reconstruction: r.reconstruction,
            ablate_projection: r.projection,
            ablate_fsq: !r.quantize,
            identity_encoder: r.identity_encoder,
            projection_width: r.projection_width,
            reward_weight: r.reward_weight,
            reconstruction_weight: r.reconstruction_weight,
        }
    }
}

impl TrainConfig {
    pub fn repr(&self) -> ReprConfig {
        ReprConfig {
            horizon: self.horizon,
            gamma_rep: self.gamma_rep,
            enc_lr: self.enc_lr,
            enc_tau: self.enc_tau,
            weight_decay: self.weight_decay,
            fsq_levels: self.fsq_levels.clone(),
            fsq_literal_bound: self.fsq_literal_bound,
            latent_width: self.latent_width,
            enc_hidden: self.enc_hidden.clone(),
            hidden: self.mlp_hidden.clone(),
            target_mode: self.target_mode,
            quantize: !self.ablate_fsq,
            identity_encoder: self.identity_encoder,
            reward_head: self.ablate_reward_head,
            reconstruction: self.ablate_reconstruction,
            projection: self.ablate_projection,
            projection_width: self.projection_width,
            reward_weight: self.reward_weight,
            reconstruction_weight: self.reconstruction_weight,
        }
    }

    pub fn td3(&self) -> Td3Config {
        Td3Config {
            gamma: self.gamma,
            tau: self.tau,
            actor_delay: self.actor_delay,
            policy_noise: self.policy_noise,
            noise_clip: self.noise_clip,
            nstep: self.nstep,
            lr: self.lr,
            weight_decay: self.weight_decay,
            hidden: self.mlp_hidden.clone(),
            critic_grads_to_encoder: self.critic_grads_to_encoder,
        }
    }

    /// Optimizer settings shared by every network, at learning rate `lr`.
    pub fn adam(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn noise(&self) -> NoiseSchedule {
        NoiseSchedule {
            start: self.expl_noise_start,
            end: self.expl_noise_end,
            duration: self.expl_noise_duration,
        }
    }

    /// Transitions per sampled window, covering both the horizon and the
    /// n-step target.
    pub fn span(&self) -> usize {
        self.horizon.max(self.nstep)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !ENV_NAMES.contains(&self.env.as_str()) {
            return Err(Error::UnknownEnv(self.env.clone()));
        }
        if self.horizon == 0 || self.nstep == 0 {
            return bad("horizon and nstep must be at least 1");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch_size and buffer_capacity must be positive");
        }
        if self.action_repeat == 0 || self.actor_delay == 0 {
            return bad("action_repeat and actor_delay must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.probe_size < 2 {
            return bad("probe_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.enc_tau) {
            return bad("tau and enc_tau must lie in [0, 1]");
        }
        let beta = 0.0..1.0;
        if !beta.contains(&self.adam_beta1) || !beta.contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and adam_eps must be positive");
        }
        if !self.identity_encoder && !self.ablate_fsq {
            let c = self.fsq_levels.len();
            if c == 0 || self.latent_width % c != 0 {
                return Err(Error::Config(format!(
                    "latent_width {} is not a multiple of the {} FSQ channels",
                    self.latent_width, c
                )));
            }
        }
        Ok(())
    }

    /// Parses a config document, flattening one level of sections.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table = parse_table(text)?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table = parse_table(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides on top of a flattened table.
    pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            table.insert(k.to_string(), parse_value(v));
        }
        Ok(())
    }
}

/// Reads a TOML value; anything that is not valid TOML becomes a string,
/// so `env=point_mass` works without quotes.
fn parse_value(v: &str) -> toml::Value {
    format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

/// Parses TOML and merges the keys of top-level tables into the root.
pub fn parse_table(text: &str) -> Result<toml::Table> {
    let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut flat = toml::Table::new();
    for (k, v) in raw {
        match v {
            toml::Value::Table(section) => {
                for (sk, sv) in section {
                    if matches!(sv, toml::Value::Table(_)) {
                        return Err(Error::Config(format!("nested section `{k}.{sk}` is not supported")));
                    }
                    if flat.insert(sk.clone(), sv).is_some() {
                        return Err(Error::Config(format!("key `{sk}` is set twice")));
                    }
                }
            }
            other => {
                if flat.insert(k.clone(), other).is_some() {
                    return Err(Error::Config(format!("key `{k}` is set twice")));
                }
            }
        }
    }
    Ok(flat)
}

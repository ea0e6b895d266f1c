//! Self-predictive representation: quantized encoder, residual latent
//! dynamics, multi-step latent consistency and optional auxiliary heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsq::FsqSpec;
use crate::nn::{ema_blend, AdamW, Binding, Graph, Mlp, MlpSpec, ParamStore, Tensor, Var};
use crate::replay::SegmentBatch;
use crate::scalar::Scalar;

pub const COSINE_EPS: f64 = 1e-8;

/// Where the consistency targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Momentum copy of the encoder.
    #[default]
    Ema,
    /// The online encoder itself, gradients severed.
    StopGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprConfig {
    pub horizon: usize,
    pub gamma_rep: f64,
    pub enc_lr: f64,
    pub enc_tau: f64,
    pub weight_decay: f64,
    pub fsq_levels: Vec<u32>,
    pub fsq_literal_bound: bool,
    pub latent_width: usize,
    pub enc_hidden: Vec<usize>,
    pub hidden: Vec<usize>,
    pub target_mode: TargetMode,
    /// `false` replaces quantization by the identity.
    pub quantize: bool,
    /// Raw observations as latents; no representation learning at all.
    pub identity_encoder: bool,
    pub reward_head: bool,
    pub reconstruction: bool,
    pub projection: bool,
    pub projection_width: usize,
    pub reward_weight: f64,
    pub reconstruction_weight: f64,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            gamma_rep: 0.9,
            enc_lr: 1e-4,
            enc_tau: 0.005,
            weight_decay: 0.0,
            fsq_levels: vec![8, 8],
            fsq_literal_bound: false,
            latent_width: 512,
            enc_hidden: vec![256],
            hidden: vec![512, 512],
            target_mode: TargetMode::Ema,
            quantize: true,
            identity_encoder: false,
            reward_head: false,
            reconstruction: false,
            projection: false,
            projection_width: 512,
            reward_weight: 1.0,
            reconstruction_weight: 1.0,
        }
    }
}

/// Latents of an `H`-step rollout: `ẑ_0` from the online encoder, then
/// `ẑ_{h+1} = f(ẑ_h + d(ẑ_h, a_h))`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub latents: Vec<Var>,
}

/// Consistency targets `z̄_1..z̄_H` (projected when the projection head is on).
#[derive(Clone, Debug)]
pub struct RepTargets<T> {
    pub latents: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct RepLosses {
    pub total: Var,
    pub consistency: Var,
    pub reward: Option<Var>,
    pub reconstruction: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RepStats {
    pub total: f64,
    pub consistency: f64,
    pub reward: f64,
    pub reconstruction: f64,
}

#[derive(Clone, Debug)]
pub struct Representation<T> {
    cfg: ReprConfig,
    obs_dim: usize,
    act_dim: usize,
    width: usize,
    fsq: Option<FsqSpec>,
    encoder: Option<Mlp>,
    dynamics: Mlp,
    reward_head: Option<Mlp>,
    decoder: Option<Mlp>,
    projector: Option<Mlp>,
    pub enc: ParamStore<T>,
    pub enc_target: ParamStore<T>,
    pub dynamics_params: ParamStore<T>,
    pub heads: ParamStore<T>,
    pub proj: ParamStore<T>,
    pub proj_target: ParamStore<T>,
    opt: AdamW,
}

impl<T: Scalar> Representation<T> {
    pub fn new<R: Rng + ?Sized>(cfg: ReprConfig, obs_dim: usize, act_dim: usize, rng: &mut R) -> Result<Self> {
        if cfg.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let width = if cfg.identity_encoder { obs_dim } else { cfg.latent_width };
        let fsq = if cfg.quantize && !cfg.identity_encoder {
            Some(FsqSpec::for_width(&cfg.fsq_levels, width)?.with_literal_bound(cfg.fsq_literal_bound))
        } else {
            None
        };
        let mut enc = ParamStore::new("encoder");
        let encoder = (!cfg.identity_encoder)
            .then(|| Mlp::new(MlpSpec::new(obs_dim, &cfg.enc_hidden, width).orthogonal(), "encoder", &mut enc, rng));
        let enc_target = enc.clone_as("encoder_target");
        let mut dynamics_params = ParamStore::new("dynamics");
        let dynamics = Mlp::new(
            MlpSpec::new(width + act_dim, &cfg.hidden, width),
            "dynamics",
            &mut dynamics_params,
            rng,
        );
        let mut heads = ParamStore::new("heads");
        let reward_head = cfg
            .reward_head
            .then(|| Mlp::new(MlpSpec::new(width + act_dim, &cfg.hidden, 1), "reward_head", &mut heads, rng));
        let decoder = cfg
            .reconstruction
            .then(|| Mlp::new(MlpSpec::new(width, &cfg.hidden, obs_dim), "decoder", &mut heads, rng));
        let mut proj = ParamStore::new("projection");
        let projector = cfg
            .projection
            .then(|| Mlp::new(MlpSpec::new(width, &[], cfg.projection_width), "projection", &mut proj, rng));
        let proj_target = proj.clone_as("projection_target");
        let opt = AdamW {
            lr: cfg.enc_lr,
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        Ok(Self {
            cfg,
            obs_dim,
            act_dim,
            width,
            fsq,
            encoder,
            dynamics,
            reward_head,
            decoder,
            projector,
            enc,
            enc_target,
            dynamics_params,
            heads,
            proj,
            proj_target,
            opt,
        })
    }

    pub fn config(&self) -> &ReprConfig {
        &self.cfg
    }

    pub fn latent_width(&self) -> usize {
        self.width
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn fsq(&self) -> Option<&FsqSpec> {
        self.fsq.as_ref()
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn set_optimizer(&mut self, opt: AdamW) {
        self.opt = opt;
    }

    pub fn stores(&self) -> [&ParamStore<T>; 6] {
        [
            &self.enc,
            &self.enc_target,
            &self.dynamics_params,
            &self.heads,
            &self.proj,
            &self.proj_target,
        ]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 6] {
        [
            &mut self.enc,
            &mut self.enc_target,
            &mut self.dynamics_params,
            &mut self.heads,
            &mut self.proj,
            &mut self.proj_target,
        ]
    }

    /// `f`, or the identity in the no-quantization ablation.
    pub fn quantize_var(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match &self.fsq {
            Some(f) => f.quantize_ste(g, x),
            None => Ok(x),
        }
    }

    fn quantize_hard(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        match &self.fsq {
            Some(f) => Ok(f.quantize(&x)?.0),
            None => Ok(x),
        }
    }

    /// Online encoder on the tape. `Frozen` keeps parameters off the
    /// gradient path but still applies the straight-through quantizer.
    pub fn encode_var(&self, g: &mut Graph<T>, x: Var, binding: Binding) -> Result<Var> {
        match &self.encoder {
            None => Ok(x),
            Some(e) => {
                let h = e.forward(g, &self.enc, x, binding)?;
                self.quantize_var(g, h)
            }
        }
    }

    fn encode_with(&self, store: &ParamStore<T>, obs: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.encoder {
            None => Ok(obs.clone()),
            Some(e) => self.quantize_hard(e.eval(store, obs)?),
        }
    }

    /// Hard latent of a `[B, O]` batch under the online encoder.
    pub fn encode(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        self.encode_with(&self.enc, obs)
    }

    /// Latent and codebook indices (empty without quantization).
    pub fn encode_codes(&self, obs: &Tensor<T>) -> Result<(Tensor<T>, Vec<u64>)> {
        let z = self.encode(obs)?;
        let codes = match &self.fsq {
            Some(f) => f.codes(&z)?,
            None => Vec::new(),
        };
        Ok((z, codes))
    }

    /// Hard latent of the consistency target encoder.
    pub fn encode_target(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        match self.cfg.target_mode {
            TargetMode::Ema => self.encode_with(&self.enc_target, obs),
            TargetMode::StopGradient => self.encode_with(&self.enc, obs),
        }
    }

    fn step_var(&self, g: &mut Graph<T>, z: Var, a: Var, binding: Binding) -> Result<Var> {
        let za = g.concat_cols(z, a)?;
        let delta = self.dynamics.forward(g, &self.dynamics_params, za, binding)?;
        let next = g.add(z, delta)?;
        self.quantize_var(g, next)
    }

    /// One hard latent transition.
    pub fn predict_next(&self, z: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (zv, av) = (g.constant(z.clone()), g.constant(a.clone()));
        let out = self.step_var(&mut g, zv, av, Binding::Frozen)?;
        Ok(g.value(out).clone())
    }

    fn horizon_of(&self, batch: &SegmentBatch<T>) -> Result<usize> {
        let h = self.cfg.horizon;
        if batch.span() < h {
            return Err(Error::Config(format!(
                "segment of {} steps is shorter than the horizon {h}",
                batch.span()
            )));
        }
        Ok(h)
    }

    pub fn rollout(&self, g: &mut Graph<T>, batch: &SegmentBatch<T>) -> Result<Rollout> {
        let h = self.horizon_of(batch)?;
        let o0 = g.constant(batch.obs[0].clone());
        let mut z = self.encode_var(g, o0, Binding::Trainable)?;
        let mut latents = vec![z];
        for k in 0..h {
            let a = g.constant(batch.actions[k].clone());
            z = self.step_var(g, z, a, Binding::Trainable)?;
            latents.push(z);
        }
        Ok(Rollout { latents })
    }

    /// Target latents for steps `1..=H`, computed off the tape.
    pub fn targets(&self, batch: &SegmentBatch<T>) -> Result<RepTargets<T>> {
        let h = self.horizon_of(batch)?;
        let b = batch.batch_size();
        let stacked = Tensor::vstack(&batch.obs[1..=h].iter().collect::<Vec<_>>())?;
        let mut z = self.encode_target(&stacked)?;
        if let Some(p) = &self.projector {
            let store = match self.cfg.target_mode {
                TargetMode::Ema => &self.proj_target,
                TargetMode::StopGradient => &self.proj,
            };
            z = p.eval(store, &z)?;
        }
        let w = z.cols();
        let latents = z
            .data()
            .chunks(b * w)
            .map(|c| Tensor::new(vec![b, w], c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(RepTargets { latents })
    }

    /// `−(1/B) Σ_b Σ_h γ_rep^h cos(ẑ_{h+1}, z̄_{h+1})`.
    pub fn consistency_loss(&self, g: &mut Graph<T>, rollout: &Rollout, targets: &RepTargets<T>) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (h, target) in targets.latents.iter().enumerate() {
            let mut pred = rollout.latents[h + 1];
            if let Some(p) = &self.projector {
                pred = p.forward(g, &self.proj, pred, Binding::Trainable)?;
            }
            let t = g.constant(target.clone());
            let cos = g.cosine_rows(pred, t, T::of(COSINE_EPS))?;
            let m = g.mean(cos);
            let term = g.scale(m, -T::of(self.cfg.gamma_rep.powi(h as i32)));
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        total.ok_or_else(|| Error::Config("empty horizon".into()))
    }

    /// Full consistency loss on a fresh rollout.
    pub fn representation_loss(&self, g: &mut Graph<T>, batch: &SegmentBatch<T>, targets: &RepTargets<T>) -> Result<Var> {
        let r = self.rollout(g, batch)?;
        self.consistency_loss(g, &r, targets)
    }

    /// `Σ_h γ_rep^h mean_b (r̂_h − r_h)²` with `r̂_h = g(ẑ_h, a_h)`.
    pub fn reward_loss(&self, g: &mut Graph<T>, rollout: &Rollout, batch: &SegmentBatch<T>) -> Result<Var> {
        let head = self.reward_head.as_ref().ok_or(Error::HeadDisabled("reward head"))?;
        let h = self.horizon_of(batch)?;
        let b = batch.batch_size();
        let mut total: Option<Var> = None;
        for k in 0..h {
            let a = g.constant(batch.actions[k].clone());
            let za = g.concat_cols(rollout.latents[k], a)?;
            let pred = head.forward(g, &self.heads, za, Binding::Trainable)?;
            let r = g.constant(Tensor::new(vec![b, 1], batch.rewards[k].clone())?);
            let d = g.sub(pred, r)?;
            let sq = g.square(d);
            let m = g.mean(sq);
            let term = g.scale(m, T::of(self.cfg.gamma_rep.powi(k as i32)));
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        total.ok_or_else(|| Error::Config("empty horizon".into()))
    }

    /// Mean over the `H + 1` rollout steps of `mean_b ‖h(ẑ_k) − o_k‖²`.
    pub fn reconstruction_loss(&self, g: &mut Graph<T>, rollout: &Rollout, batch: &SegmentBatch<T>) -> Result<Var> {
        let dec = self.decoder.as_ref().ok_or(Error::HeadDisabled("reconstruction decoder"))?;
        let steps = rollout.latents.len();
        let norm = T::of(self.obs_dim as f64 / steps as f64);
        let mut total: Option<Var> = None;
        for (k, &z) in rollout.latents.iter().enumerate() {
            let pred = dec.forward(g, &self.heads, z, Binding::Trainable)?;
            let o = g.constant(batch.obs[k].clone());
            let d = g.sub(pred, o)?;
            let sq = g.square(d);
            let m = g.mean(sq);
            let term = g.scale(m, norm);
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        total.ok_or_else(|| Error::Config("empty rollout".into()))
    }

    /// Every enabled objective on one rollout, plus their weighted sum.
    pub fn losses(&self, g: &mut Graph<T>, batch: &SegmentBatch<T>, targets: &RepTargets<T>) -> Result<RepLosses> {
        let r = self.rollout(g, batch)?;
        let consistency = self.consistency_loss(g, &r, targets)?;
        let mut total = consistency;
        let reward = if self.reward_head.is_some() {
            let l = self.reward_loss(g, &r, batch)?;
            let w = g.scale(l, T::of(self.cfg.reward_weight));
            total = g.add(total, w)?;
            Some(l)
        } else {
            None
        };
        let reconstruction = if self.decoder.is_some() {
            let l = self.reconstruction_loss(g, &r, batch)?;
            let w = g.scale(l, T::of(self.cfg.reconstruction_weight));
            total = g.add(total, w)?;
            Some(l)
        } else {
            None
        };
        Ok(RepLosses {
            total,
            consistency,
            reward,
            reconstruction,
        })
    }

    /// One optimizer step on the enabled objectives, then the target update.
    pub fn update(&mut self, batch: &SegmentBatch<T>) -> Result<RepStats> {
        if self.encoder.is_none() {
            return Ok(RepStats::default());
        }
        let targets = self.targets(batch)?;
        let mut g = Graph::new();
        let l = self.losses(&mut g, batch, &targets)?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].to_f64_lossy());
        let stats = RepStats {
            total: val(Some(l.total)),
            consistency: val(Some(l.consistency)),
            reward: val(l.reward),
            reconstruction: val(l.reconstruction),
        };
        if !stats.total.is_finite() {
            return Err(Error::NonFinite(format!("representation loss {:?}", stats)));
        }
        g.backward(l.total)?;
        for store in [&mut self.enc, &mut self.dynamics_params, &mut self.heads, &mut self.proj] {
            g.accumulate_into(store);
            self.opt.step(store);
        }
        self.update_targets()?;
        Ok(stats)
    }

    /// Applies encoder gradients accumulated elsewhere (e.g. by the critic).
    pub fn step_encoder(&mut self) {
        self.opt.step(&mut self.enc);
    }

    pub fn update_targets(&mut self) -> Result<()> {
        match self.cfg.target_mode {
            TargetMode::Ema => {
                let tau = T::of(self.cfg.enc_tau);
                ema_blend(&mut self.enc_target, &self.enc, tau)?;
                ema_blend(&mut self.proj_target, &self.proj, tau)
            }
            TargetMode::StopGradient => {
                self.enc_target.copy_values_from(&self.enc)?;
                self.proj_target.copy_values_from(&self.proj)
            }
        }
    }

    /// Whether every rollout latent lies on the quantization grid.
    pub fn latents_valid(&self, g: &Graph<T>, rollout: &Rollout) -> bool {
        match &self.fsq {
            None => true,
            Some(f) => rollout.latents.iter().all(|&z| f.is_valid(g.value(z))),
        }
    }
}

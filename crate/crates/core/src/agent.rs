//! Representation + TD3, updated together once per decision step.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, ParamStore, Tensor};
use crate::replay::SegmentBatch;
use crate::repr::{RepStats, Representation};
use crate::scalar::Scalar;
use crate::td3::{Td3, Td3Stats};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub rep: RepStats,
    pub td3: Td3Stats,
}

#[derive(Clone, Debug)]
pub struct Agent<T> {
    pub repr: Representation<T>,
    pub td3: Td3<T>,
}

impl<T: Scalar> Agent<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, obs_dim: usize, act_dim: usize, rng: &mut R) -> Result<Self> {
        let mut repr = Representation::new(cfg.repr(), obs_dim, act_dim, rng)?;
        let mut td3 = Td3::new(cfg.td3(), repr.latent_width(), act_dim, rng)?;
        repr.set_optimizer(cfg.adam(cfg.enc_lr));
        td3.set_optimizer(cfg.adam(cfg.lr));
        Ok(Self { repr, td3 })
    }

    /// Representation update, then critic/actor/target updates.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &SegmentBatch<T>, rng: &mut R) -> Result<UpdateStats> {
        let rep = self.repr.update(batch)?;
        let td3 = self.td3.update(&mut self.repr, batch, rng)?;
        Ok(UpdateStats { rep, td3 })
    }

    /// Action for one observation plus the codebook indices of its latent
    /// (empty without quantization).
    pub fn act<R: Rng + ?Sized>(&self, obs: &[T], noise_std: Option<f64>, rng: &mut R) -> Result<(Vec<f64>, Vec<u64>)> {
        let o = Tensor::new(vec![1, obs.len()], obs.to_vec())?;
        let (z, codes) = self.repr.encode_codes(&o)?;
        let out = self.td3.act_from_latent(&z, noise_std, rng)?;
        Ok((out, codes))
    }

    pub fn stores(&self) -> Vec<&ParamStore<T>> {
        let mut v: Vec<&ParamStore<T>> = self.repr.stores().into_iter().collect();
        v.extend(self.td3.stores());
        v
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint<T>) {
        for s in self.stores() {
            ckpt.put_store(s);
        }
        ckpt.meta["td3_calls"] = self.td3.calls.into();
        ckpt.meta["actor_updates"] = self.td3.actor_updates.into();
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        for s in self.repr.stores_mut() {
            ckpt.restore_store(s)?;
        }
        for s in self.td3.stores_mut() {
            ckpt.restore_store(s)?;
        }
        let count = |k: &str| {
            ckpt.meta[k]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("missing counter `{k}`")))
        };
        self.td3.calls = count("td3_calls")?;
        self.td3.actor_updates = count("actor_updates")?;
        Ok(())
    }
}

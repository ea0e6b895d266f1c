//! FIFO replay memory with episode-aware window sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Checkpoint, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord<T> {
    pub obs: Vec<T>,
    pub action: Vec<T>,
    pub reward: T,
    pub next_obs: Vec<T>,
    /// Last transition of its episode (time limit or absorbing state).
    pub done: bool,
    /// Absorbing state: no bootstrapping past this transition.
    pub terminal: bool,
}

#[derive(Clone, Debug)]
struct Slot<T> {
    rec: TransitionRecord<T>,
    episode: u64,
}

/// `B` windows of `span` consecutive transitions, stored time-major.
#[derive(Clone, Debug)]
pub struct SegmentBatch<T> {
    /// `span + 1` tensors `[B, O]`.
    pub obs: Vec<Tensor<T>>,
    /// `span` tensors `[B, A]`.
    pub actions: Vec<Tensor<T>>,
    /// `rewards[k][b]` follows `actions[k]`.
    pub rewards: Vec<Vec<T>>,
    pub terminal: Vec<Vec<bool>>,
    pub done: Vec<Vec<bool>>,
    /// Logical buffer positions of the sampled starts.
    pub starts: Vec<usize>,
}

impl<T: Scalar> SegmentBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.starts.len()
    }

    pub fn span(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    slots: VecDeque<Slot<T>>,
    /// (episode id, stored transitions) for every episode in the buffer.
    runs: VecDeque<(u64, usize)>,
    next_episode: u64,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            obs_dim,
            act_dim,
            slots: VecDeque::with_capacity(capacity.min(1 << 20)),
            runs: VecDeque::new(),
            next_episode: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&TransitionRecord<T>> {
        self.slots.get(i).map(|s| &s.rec)
    }

    pub fn push(&mut self, rec: TransitionRecord<T>) -> Result<()> {
        if rec.obs.len() != self.obs_dim || rec.next_obs.len() != self.obs_dim {
            return Err(shape_err("replay observation", self.obs_dim, rec.obs.len()));
        }
        if rec.action.len() != self.act_dim {
            return Err(shape_err("replay action", self.act_dim, rec.action.len()));
        }
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
            let front = self.runs.front_mut().expect("non-empty buffer has a run");
            front.1 -= 1;
            if front.1 == 0 {
                self.runs.pop_front();
            }
        }
        let episode = self.next_episode;
        match self.runs.back_mut() {
            Some((id, n)) if *id == episode => *n += 1,
            _ => self.runs.push_back((episode, 1)),
        }
        if rec.done {
            self.next_episode += 1;
        }
        self.slots.push_back(Slot { rec, episode });
        Ok(())
    }

    /// Number of start positions with `span` transitions inside one episode.
    pub fn valid_starts(&self, span: usize) -> usize {
        if span == 0 {
            return 0;
        }
        self.runs.iter().map(|&(_, n)| (n + 1).saturating_sub(span)).sum()
    }

    pub fn is_valid_start(&self, start: usize, span: usize) -> bool {
        span > 0
            && start + span <= self.slots.len()
            && self.slots[start].episode == self.slots[start + span - 1].episode
    }

    /// Uniform sample of `batch` in-episode windows of `span` transitions.
    pub fn sample_segments<R: Rng + ?Sized>(
        &self,
        batch: usize,
        span: usize,
        rng: &mut R,
    ) -> Result<SegmentBatch<T>> {
        let valid = self.valid_starts(span);
        if batch == 0 || valid < batch {
            return Err(Error::NotReady(format!(
                "{valid} valid windows of {span} transitions, need {batch}"
            )));
        }
        let hi = self.slots.len() - span + 1;
        let mut starts = Vec::with_capacity(batch);
        while starts.len() < batch {
            let s = rng.random_range(0..hi);
            if self.is_valid_start(s, span) {
                starts.push(s);
            }
        }
        Ok(self.gather(starts, span))
    }

    fn gather(&self, starts: Vec<usize>, span: usize) -> SegmentBatch<T> {
        let b = starts.len();
        let (o, a) = (self.obs_dim, self.act_dim);
        let mut obs = Vec::with_capacity(span + 1);
        let mut actions = Vec::with_capacity(span);
        let mut rewards = Vec::with_capacity(span);
        let mut terminal = Vec::with_capacity(span);
        let mut done = Vec::with_capacity(span);
        for k in 0..=span {
            let mut ob = Vec::with_capacity(b * o);
            for &s in &starts {
                if k < span {
                    ob.extend_from_slice(&self.slots[s + k].rec.obs);
                } else {
                    ob.extend_from_slice(&self.slots[s + span - 1].rec.next_obs);
                }
            }
            obs.push(Tensor::new(vec![b, o], ob).expect("widths checked on push"));
            if k == span {
                break;
            }
            let recs: Vec<&TransitionRecord<T>> = starts.iter().map(|&s| &self.slots[s + k].rec).collect();
            let act: Vec<T> = recs.iter().flat_map(|r| r.action.iter().copied()).collect();
            actions.push(Tensor::new(vec![b, a], act).expect("widths checked on push"));
            rewards.push(recs.iter().map(|r| r.reward).collect());
            terminal.push(recs.iter().map(|r| r.terminal).collect());
            done.push(recs.iter().map(|r| r.done).collect());
        }
        SegmentBatch {
            obs,
            actions,
            rewards,
            terminal,
            done,
            starts,
        }
    }

    /// `n` stored observations drawn uniformly with replacement, as `[n, O]`.
    pub fn sample_observations<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor<T>> {
        if self.is_empty() || n == 0 {
            return Err(Error::NotReady("no stored observations".into()));
        }
        let mut data = Vec::with_capacity(n * self.obs_dim);
        for _ in 0..n {
            let i = rng.random_range(0..self.slots.len());
            data.extend_from_slice(&self.slots[i].rec.obs);
        }
        Tensor::new(vec![n, self.obs_dim], data)
    }

    /// Stores the buffer contents under `replay/*`.
    pub fn save_into(&self, ckpt: &mut Checkpoint<T>) {
        let n = self.slots.len();
        ckpt.meta["replay"] = serde_json::json!({
            "capacity": self.capacity,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "len": n,
            "first_episode": self.slots.front().map_or(self.next_episode, |s| s.episode),
            "next_episode": self.next_episode,
        });
        if n == 0 {
            return;
        }
        let cat = |f: &dyn Fn(&TransitionRecord<T>) -> Vec<T>, w: usize| {
            let data: Vec<T> = self.slots.iter().flat_map(|s| f(&s.rec)).collect();
            Tensor::new(vec![n, w], data).expect("consistent widths")
        };
        let flag = |b: bool| if b { T::one() } else { T::zero() };
        ckpt.push("replay/obs", cat(&|r| r.obs.clone(), self.obs_dim));
        ckpt.push("replay/action", cat(&|r| r.action.clone(), self.act_dim));
        ckpt.push("replay/next_obs", cat(&|r| r.next_obs.clone(), self.obs_dim));
        ckpt.push(
            "replay/scalars",
            cat(&|r| vec![r.reward, flag(r.done), flag(r.terminal)], 3),
        );
    }

    pub fn load_from(ckpt: &Checkpoint<T>) -> Result<Self> {
        let meta = &ckpt.meta["replay"];
        let field = |k: &str| {
            meta[k]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("replay metadata lacks `{k}`")))
        };
        let mut buf = Self::new(
            field("capacity")? as usize,
            field("obs_dim")? as usize,
            field("act_dim")? as usize,
        );
        let n = field("len")? as usize;
        buf.next_episode = field("first_episode")?;
        if n > 0 {
            let obs = ckpt.get("replay/obs")?;
            let act = ckpt.get("replay/action")?;
            let next = ckpt.get("replay/next_obs")?;
            let sc = ckpt.get("replay/scalars")?;
            if obs.rows() != n || act.rows() != n || next.rows() != n || sc.rows() != n {
                return Err(Error::Checkpoint("replay record count mismatch".into()));
            }
            for i in 0..n {
                let s = sc.row(i);
                buf.push(TransitionRecord {
                    obs: obs.row(i).to_vec(),
                    action: act.row(i).to_vec(),
                    reward: s[0],
                    next_obs: next.row(i).to_vec(),
                    done: s[1] != T::zero(),
                    terminal: s[2] != T::zero(),
                })?;
            }
        }
        if buf.next_episode != field("next_episode")? {
            return Err(Error::Checkpoint("replay episode bookkeeping is inconsistent".into()));
        }
        Ok(buf)
    }
}

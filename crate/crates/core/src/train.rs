//! The training loop: random seed episodes, then one environment step and
//! `utd` update blocks per decision step, with periodic evaluation, probes
//! and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::{Agent, UpdateStats};
use crate::config::{Precision, TrainConfig};
use crate::diagnostics::{collapse_probe, CollapseReport, MetricsRow, MetricsSink};
use crate::envs::{make_env, Env};
use crate::error::{Error, Result};
use crate::fsq::CodeHistory;
use crate::nn::checkpoint::peek_header;
use crate::nn::{Checkpoint, Tensor};
use crate::replay::{ReplayBuffer, TransitionRecord};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub mean: f64,
}

/// Exploit-mode returns. Episode `i` starts from a reset seed derived from
/// `eval_seed`, so repeated calls see the same start states.
pub fn evaluate<T: Scalar>(agent: &Agent<T>, env: &mut dyn Env, episodes: usize, eval_seed: u64) -> Result<EvalResult> {
    let mut seeds = ChaCha8Rng::seed_from_u64(eval_seed);
    // exploit mode never draws from this
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(seeds.next_u64());
        let mut total = 0.0;
        loop {
            let o: Vec<T> = obs.iter().map(|&v| T::of(v)).collect();
            let (a, _) = agent.act(&o, None, &mut unused)?;
            let s = env.step(&a)?;
            total += s.reward;
            obs = s.obs;
            if s.done {
                break;
            }
        }
        returns.push(total);
    }
    let mean = if returns.is_empty() {
        0.0
    } else {
        returns.iter().sum::<f64>() / returns.len() as f64
    };
    Ok(EvalResult { returns, mean })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct LossAcc {
    rep: f64,
    critic: f64,
    actor: f64,
    n: u64,
    n_actor: u64,
}

impl LossAcc {
    fn add(&mut self, s: &UpdateStats) {
        self.rep += s.rep.total;
        self.critic += s.td3.critic_loss;
        self.n += 1;
        if let Some(a) = s.td3.actor_loss {
            self.actor += a;
            self.n_actor += 1;
        }
    }

    fn means(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let m = |s: f64, n: u64| (n > 0).then(|| s / n as f64);
        (m(self.rep, self.n), m(self.critic, self.n), m(self.actor, self.n_actor))
    }
}

/// Everything needed to continue a run exactly where it stopped.
pub struct RunState<T> {
    pub cfg: TrainConfig,
    pub agent: Agent<T>,
    pub replay: ReplayBuffer<T>,
    env: Box<dyn Env>,
    env_rng: ChaCha8Rng,
    learner_rng: ChaCha8Rng,
    /// Decision steps taken, random seed episodes included.
    pub env_step: u64,
    /// Decision steps after the random seed episodes.
    pub train_step: u64,
    /// Completed episodes.
    pub episode: u64,
    /// Update blocks performed.
    pub updates: u64,
    obs: Vec<f64>,
    episode_return: f64,
    pub last_episode_return: Option<f64>,
    pub history: Option<CodeHistory>,
    acc: LossAcc,
    random_done: bool,
    last_logged: Option<u64>,
    wall_offset: f64,
    pub reached_target: bool,
}

impl<T: Scalar> RunState<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = make_env(&cfg.env, cfg.action_repeat)?;
        let spec = env.spec().clone();
        let mut env_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        env_rng.set_stream(1);
        let mut learner_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        learner_rng.set_stream(2);
        let agent = Agent::new(&cfg, spec.obs_dim, spec.act_dim, &mut learner_rng)?;
        let replay = ReplayBuffer::new(cfg.buffer_capacity, spec.obs_dim, spec.act_dim);
        let obs = env.reset(env_rng.next_u64());
        let history = agent.repr.fsq().map(CodeHistory::new);
        Ok(Self {
            cfg,
            agent,
            replay,
            env,
            env_rng,
            learner_rng,
            env_step: 0,
            train_step: 0,
            episode: 0,
            updates: 0,
            obs,
            episode_return: 0.0,
            last_episode_return: None,
            history,
            acc: LossAcc::default(),
            random_done: false,
            last_logged: None,
            wall_offset: 0.0,
            reached_target: false,
        })
    }

    pub fn env(&self) -> &dyn Env {
        self.env.as_ref()
    }

    fn obs_t(&self) -> Vec<T> {
        self.obs.iter().map(|&v| T::of(v)).collect()
    }

    /// One environment transition with the given action.
    fn transition(&mut self, action: Vec<f64>) -> Result<()> {
        let o = self.obs_t();
        let s = self.env.step(&action)?;
        self.replay.push(TransitionRecord {
            obs: o,
            action: action.iter().map(|&v| T::of(v)).collect(),
            reward: T::of(s.reward),
            next_obs: s.obs.iter().map(|&v| T::of(v)).collect(),
            done: s.done,
            terminal: false,
        })?;
        self.episode_return += s.reward;
        self.env_step += 1;
        if s.done {
            self.last_episode_return = Some(self.episode_return);
            self.episode_return = 0.0;
            self.episode += 1;
            self.obs = self.env.reset(self.env_rng.next_u64());
        } else {
            self.obs = s.obs;
        }
        Ok(())
    }

    fn observe_codes(&mut self, codes: &[u64]) {
        if let Some(h) = &mut self.history {
            h.observe(codes);
        }
    }

    /// Uniform random actions for `random_episodes` full episodes.
    pub fn collect_random(&mut self) -> Result<()> {
        if self.random_done {
            return Ok(());
        }
        let target = self.episode + self.cfg.random_episodes as u64;
        let act_dim = self.env.spec().act_dim;
        while self.episode < target {
            if self.history.is_some() {
                let o = Tensor::new(vec![1, self.obs.len()], self.obs_t())?;
                let (_, codes) = self.agent.repr.encode_codes(&o)?;
                self.observe_codes(&codes);
            }
            let a: Vec<f64> = (0..act_dim).map(|_| self.env_rng.random_range(-1.0..=1.0)).collect();
            self.transition(a)?;
        }
        self.random_done = true;
        Ok(())
    }

    pub fn expl_noise_std(&self) -> f64 {
        self.cfg.noise().std(self.env_step)
    }

    pub fn ready_to_update(&self) -> bool {
        self.random_done && self.replay.valid_starts(self.cfg.span()) >= self.cfg.batch_size
    }

    /// One exploration step followed by `utd` update blocks.
    pub fn step(&mut self) -> Result<()> {
        let std = self.expl_noise_std();
        let (a, codes) = self.agent.act(&self.obs_t(), Some(std), &mut self.env_rng)?;
        self.observe_codes(&codes);
        self.transition(a)?;
        self.train_step += 1;
        if self.ready_to_update() {
            for _ in 0..self.cfg.utd {
                let batch = self
                    .replay
                    .sample_segments(self.cfg.batch_size, self.cfg.span(), &mut self.learner_rng)?;
                let stats = self.agent.update(&batch, &mut self.learner_rng)?;
                self.acc.add(&stats);
                self.updates += 1;
            }
        }
        Ok(())
    }

    /// Probe batch drawn with its own generator, so probing never shifts
    /// the training streams.
    pub fn probe(&self) -> Result<Option<CollapseReport>> {
        if self.replay.len() < 2 {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ self.env_step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(3);
        let probe = self.replay.sample_observations(self.cfg.probe_size, &mut rng)?;
        collapse_probe(&self.agent.repr, &probe).map(Some)
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalResult> {
        let mut env = make_env(&self.cfg.env, self.cfg.action_repeat)?;
        evaluate(&self.agent, env.as_mut(), episodes, self.cfg.eval_seed)
    }

    pub fn active_fraction(&self) -> Option<f64> {
        self.history.as_ref().map(CodeHistory::active_fraction)
    }

    /// Evaluation, probe and loss means since the previous row.
    pub fn metrics_row(&mut self, wall: f64) -> Result<MetricsRow> {
        let eval = self.evaluate(self.cfg.num_eval_episodes)?;
        let probe = self.probe()?;
        let (rep, critic, actor) = self.acc.means();
        self.acc = LossAcc::default();
        Ok(MetricsRow {
            env_step: self.env_step,
            episode: self.episode,
            episodic_return: self.last_episode_return,
            eval_return_mean: (self.cfg.num_eval_episodes > 0).then_some(eval.mean),
            rep_loss: rep,
            critic_loss: critic,
            actor_loss: actor,
            latent_rank: probe.map(|p| p.rank as u64),
            latent_rank_max: probe.map(|p| p.rank_max as u64),
            codebook_active_frac: self.active_fraction(),
            expl_noise_std: self.expl_noise_std(),
            wall_time_s: if self.cfg.deterministic_clock { 0.0 } else { wall },
        })
    }

    /// Runs until `total_env_steps` training steps (or the target return).
    /// NaN losses abort after writing `nan_snapshot.ckpt` into `out_dir`.
    pub fn run(&mut self, sink: &mut MetricsSink, out_dir: &Path) -> Result<()> {
        let start = Instant::now();
        let base = self.wall_offset;
        let wall = move || base + start.elapsed().as_secs_f64();
        self.collect_random()?;
        let total = self.cfg.total_env_steps;
        if self.last_logged.is_none() {
            self.log(sink, wall())?;
        }
        while self.train_step < total && !self.reached_target {
            if let Err(e) = self.step() {
                if matches!(e, Error::NonFinite(_)) {
                    self.wall_offset = wall();
                    let _ = self.save(&out_dir.join("nan_snapshot.ckpt"));
                }
                return Err(e);
            }
            if self.train_step % self.cfg.eval_every == 0 || self.train_step == total {
                self.log(sink, wall())?;
            }
            if self.cfg.checkpoint_every > 0 && self.train_step % self.cfg.checkpoint_every == 0 {
                self.wall_offset = wall();
                self.save(&out_dir.join(format!("step_{}.ckpt", self.train_step)))?;
            }
        }
        self.wall_offset = wall();
        Ok(())
    }

    fn log(&mut self, sink: &mut MetricsSink, wall: f64) -> Result<()> {
        let row = self.metrics_row(wall)?;
        sink.record(&row)?;
        self.last_logged = Some(self.train_step);
        if let (Some(t), Some(m)) = (self.cfg.target_return, row.eval_return_mean) {
            if m >= t {
                self.reached_target = true;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut ckpt = Checkpoint::default();
        self.agent.save_into(&mut ckpt);
        self.replay.save_into(&mut ckpt);
        let m = &mut ckpt.meta;
        m["config"] = serde_json::to_value(&self.cfg)?;
        m["run"] = json!({
            "env_step": self.env_step,
            "train_step": self.train_step,
            "episode": self.episode,
            "updates": self.updates,
            "obs": self.obs,
            "episode_return": self.episode_return,
            "last_episode_return": self.last_episode_return,
            "env_state": self.env.state(),
            "random_done": self.random_done,
            "last_logged": self.last_logged,
            "wall_offset": if self.cfg.deterministic_clock { 0.0 } else { self.wall_offset },
            "reached_target": self.reached_target,
        });
        m["env_rng"] = serde_json::to_value(&self.env_rng)?;
        m["learner_rng"] = serde_json::to_value(&self.learner_rng)?;
        m["history"] = serde_json::to_value(&self.history)?;
        m["losses"] = serde_json::to_value(self.acc)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let meta = &ckpt.meta;
        let get = |k: &str| -> Result<&serde_json::Value> {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{k}`")))
        };
        let cfg: TrainConfig = serde_json::from_value(get("config")?.clone())?;
        let mut s = Self::new(cfg)?;
        s.agent.load_from(ckpt)?;
        s.replay = ReplayBuffer::load_from(ckpt)?;
        #[derive(Deserialize)]
        struct Run {
            env_step: u64,
            train_step: u64,
            episode: u64,
            updates: u64,
            obs: Vec<f64>,
            episode_return: f64,
            last_episode_return: Option<f64>,
            env_state: Vec<f64>,
            random_done: bool,
            last_logged: Option<u64>,
            wall_offset: f64,
            reached_target: bool,
        }
        let r: Run = serde_json::from_value(get("run")?.clone())?;
        s.env.set_state(&r.env_state)?;
        s.env_step = r.env_step;
        s.train_step = r.train_step;
        s.episode = r.episode;
        s.updates = r.updates;
        s.obs = r.obs;
        s.episode_return = r.episode_return;
        s.last_episode_return = r.last_episode_return;
        s.random_done = r.random_done;
        s.last_logged = r.last_logged;
        s.wall_offset = r.wall_offset;
        s.reached_target = r.reached_target;
        s.env_rng = serde_json::from_value(get("env_rng")?.clone())?;
        s.learner_rng = serde_json::from_value(get("learner_rng")?.clone())?;
        s.history = serde_json::from_value(get("history")?.clone())?;
        s.acc = serde_json::from_value(get("losses")?.clone())?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Writes `config.toml`, trains and saves `final.ckpt` under `out_dir`.
pub fn train<T: Scalar>(cfg: TrainConfig, out_dir: &Path) -> Result<RunState<T>> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut sink = MetricsSink::open(out_dir, false)?;
    let mut state = RunState::new(cfg)?;
    state.run(&mut sink, out_dir)?;
    state.save(&out_dir.join("final.ckpt"))?;
    Ok(state)
}

/// Continues a checkpointed run, appending to the metrics files in
/// `out_dir`. `total_env_steps` may extend the original budget.
pub fn resume<T: Scalar>(ckpt: &Path, out_dir: &Path, total_env_steps: Option<u64>) -> Result<RunState<T>> {
    let mut state = RunState::<T>::load(ckpt)?;
    if let Some(n) = total_env_steps {
        state.cfg.total_env_steps = n;
    }
    let mut sink = MetricsSink::open(out_dir, true)?;
    state.run(&mut sink, out_dir)?;
    state.save(&out_dir.join("final.ckpt"))?;
    Ok(state)
}

/// Default output directory: `$IQRL_OUT`, else `runs/<env>_seed<seed>`.
pub fn default_out_dir(cfg: &TrainConfig) -> PathBuf {
    if let Some(d) = &cfg.out_dir {
        return PathBuf::from(d);
    }
    let base = std::env::var_os("IQRL_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    base.join(format!("{}_seed{}", cfg.env, cfg.seed))
}

/// A checkpoint loaded at whichever scalar width it was written with.
pub enum LoadedRun {
    F32(RunState<f32>),
    F64(RunState<f64>),
}

macro_rules! with_run {
    ($self:expr, $s:ident => $body:expr) => {
        match $self {
            LoadedRun::F32($s) => $body,
            LoadedRun::F64($s) => $body,
        }
    };
}

impl LoadedRun {
    pub fn load(path: &Path) -> Result<Self> {
        let (_, width) = peek_header(path)?;
        match width {
            4 => RunState::load(path).map(LoadedRun::F32),
            8 => RunState::load(path).map(LoadedRun::F64),
            w => Err(Error::Checkpoint(format!("unsupported scalar width {w}"))),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            LoadedRun::F32(_) => Precision::F32,
            LoadedRun::F64(_) => Precision::F64,
        }
    }

    pub fn cfg(&self) -> &TrainConfig {
        with_run!(self, s => &s.cfg)
    }

    pub fn env_step(&self) -> u64 {
        with_run!(self, s => s.env_step)
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalResult> {
        with_run!(self, s => s.evaluate(episodes))
    }

    pub fn probe(&self) -> Result<Option<CollapseReport>> {
        with_run!(self, s => s.probe())
    }

    pub fn active_fraction(&self) -> Option<f64> {
        with_run!(self, s => s.active_fraction())
    }

    pub fn fsq(&self) -> Option<crate::fsq::FsqSpec> {
        with_run!(self, s => s.agent.repr.fsq().cloned())
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion. Pass a criterion
//! number (or a word from its title) as the first argument to run a subset.

use std::collections::{BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use iqrl::agent::Agent;
use iqrl::config::{Precision, TrainConfig};
use iqrl::diagnostics::{read_metrics_csv, read_metrics_jsonl, MetricsRow};
use iqrl::envs::{energy_shaping_action, make_env};
use iqrl::fsq::{Codeword, FsqSpec};
use iqrl::nn::{Graph, ParamStore, Tensor, Var};
use iqrl::replay::{ReplayBuffer, SegmentBatch, TransitionRecord};
use iqrl::repr::TargetMode;
use iqrl::td3::nstep_target;
use iqrl::train::{resume, train, RunState};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const TABLE2_LEVELS: [&[u32]; 5] = [&[5, 3], &[8, 8], &[8, 6, 5], &[8, 8, 8], &[8, 5, 5, 5]];

/// Scripted energy-shaping oracle: 90th-percentile return, frozen before
/// the learner was built.
const R_STAR: f64 = -2603.94;

// ---------------------------------------------------------------- helpers

fn mini_cfg() -> TrainConfig {
    TrainConfig {
        horizon: 3,
        nstep: 3,
        latent_width: 6,
        fsq_levels: vec![5, 3],
        enc_hidden: vec![8],
        mlp_hidden: vec![8, 8],
        projection_width: 4,
        batch_size: 5,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

fn pendulum_batch(seed: u64, b: usize, span: usize) -> SegmentBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = make_env("pendulum_swingup", 2).unwrap();
    let mut buf = ReplayBuffer::new(2000, 3, 1);
    let mut obs = env.reset(rng.next_u64());
    for _ in 0..600 {
        let a = vec![rng.random_range(-1.0..=1.0)];
        let s = env.step(&a).unwrap();
        buf.push(TransitionRecord {
            obs: obs.clone(),
            action: a,
            reward: s.reward,
            next_obs: s.obs.clone(),
            done: s.done,
            terminal: false,
        })
        .unwrap();
        obs = if s.done { env.reset(rng.next_u64()) } else { s.obs };
    }
    buf.sample_segments(b, span, &mut rng).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, span: usize, obs_dim: usize, scale: f64) -> SegmentBatch<f64> {
    let mut t = |r: usize, c: usize| {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    };
    let obs = (0..=span).map(|_| t(b, obs_dim)).collect();
    let actions = (0..span).map(|_| t(b, 1).map(|v| (v / scale).clamp(-1.0, 1.0))).collect();
    let rewards = (0..span).map(|_| t(1, b).data().to_vec()).collect();
    SegmentBatch {
        obs,
        actions,
        rewards,
        terminal: vec![vec![false; b]; span],
        done: vec![vec![false; b]; span],
        starts: (0..b).collect(),
    }
}

fn agent(cfg: &TrainConfig, seed: u64) -> Agent<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Agent::new(cfg, 3, 1, &mut rng).unwrap()
}

type Pick = fn(&mut Agent<f64>) -> &mut ParamStore<f64>;

fn pick_enc(a: &mut Agent<f64>) -> &mut ParamStore<f64> {
    &mut a.repr.enc
}
fn pick_dyn(a: &mut Agent<f64>) -> &mut ParamStore<f64> {
    &mut a.repr.dynamics_params
}
fn pick_heads(a: &mut Agent<f64>) -> &mut ParamStore<f64> {
    &mut a.repr.heads
}
fn pick_proj(a: &mut Agent<f64>) -> &mut ParamStore<f64> {
    &mut a.repr.proj
}
fn pick_critic(a: &mut Agent<f64>) -> &mut ParamStore<f64> {
    &mut a.td3.critic
}
fn pick_actor(a: &mut Agent<f64>) -> &mut ParamStore<f64> {
    &mut a.td3.actor
}

type LossFn<'a> = dyn Fn(&Agent<f64>, &mut Graph<f64>) -> Var + 'a;

/// Largest relative error between tape gradients and central differences
/// over every coordinate of the picked stores. Quantizer rounding offsets
/// are recorded once and replayed, so the differenced function is the
/// smooth surrogate whose derivative is the straight-through gradient.
fn fd_max_rel_err(a: &Agent<f64>, picks: &[(&str, Pick)], loss: &LossFn) -> Result<f64, String> {
    let mut g = Graph::recording_residuals();
    let l = loss(a, &mut g);
    g.backward(l).map_err(|e| e.to_string())?;
    let residuals = g.take_residuals();
    let eval = |m: &Agent<f64>| {
        let mut g = Graph::replaying_residuals(residuals.clone());
        let l = loss(m, &mut g);
        g.value(l).data()[0]
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (name, pick) in picks {
        let mut work = a.clone();
        let store = pick(&mut work);
        store.zero_grad();
        ensure!(g.accumulate_into(store) > 0, "{name} receives no gradient");
        for i in 0..store.len() {
            let grads = store.get(i).grad.data().to_vec();
            for (j, &an) in grads.iter().enumerate() {
                let mut plus = a.clone();
                pick(&mut plus).get_mut(i).value.data_mut()[j] += h;
                let mut minus = a.clone();
                pick(&mut minus).get_mut(i).value.data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                if err > worst {
                    worst = err;
                }
            }
        }
    }
    Ok(worst)
}

fn percentile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

// ------------------------------------------------------------- criteria

fn c1_codebook() -> Outcome {
    let t = Instant::now();
    let expected = [15u64, 64, 240, 512, 1000];
    for (levels, &n) in TABLE2_LEVELS.iter().zip(&expected) {
        let spec = FsqSpec::new(levels, 1).map_err(|e| e.to_string())?;
        ensure!(spec.codebook_size() == n, "{levels:?}: size {} != {n}", spec.codebook_size());
        // oracle: the Cartesian product of per-channel grids {−(L−1)/2 + j}
        let mut grid: Vec<Vec<f64>> = vec![vec![]];
        for &l in levels.iter() {
            let vals: Vec<f64> = (0..l).map(|j| -(l as f64 - 1.0) / 2.0 + j as f64).collect();
            grid = grid
                .into_iter()
                .flat_map(|p| vals.iter().map(move |&v| [p.clone(), vec![v]].concat()))
                .collect();
        }
        ensure!(grid.len() as u64 == n, "{levels:?}: oracle enumerates {}", grid.len());
        let mut seen = HashSet::new();
        for w in &grid {
            let i = spec.codeword_to_index(&Codeword(w.clone())).map_err(|e| e.to_string())?;
            ensure!(i < n, "{levels:?}: index {i} out of range");
            ensure!(seen.insert(i), "{levels:?}: index {i} reused");
            let back = spec.index_to_codeword(i).map_err(|e| e.to_string())?;
            ensure!(back.0 == *w, "{levels:?}: {w:?} -> {i} -> {:?}", back.0);
        }
        for i in 0..n {
            let w = spec.index_to_codeword(i).map_err(|e| e.to_string())?;
            ensure!(spec.codeword_to_index(&w).map_err(|e| e.to_string())? == i, "index {i} does not round-trip");
        }
        ensure!(spec.index_to_codeword(n).is_err(), "{levels:?}: index {n} accepted");
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.2}s");
    Ok(format!("sizes {expected:?}, bijective round trips, {secs:.3}s"))
}

fn c2_ste() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for levels in TABLE2_LEVELS {
        let spec = FsqSpec::new(levels, 1).map_err(|e| e.to_string())?;
        let c = levels.len();
        for _ in 0..100 {
            let x: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::new(vec![1, c], x.clone()).unwrap());
            let q = spec.quantize_ste(&mut g, xv).map_err(|e| e.to_string())?;
            let wv = g.constant(Tensor::new(vec![1, c], w.clone()).unwrap());
            let p = g.mul(q, wv).unwrap();
            let l = g.sum(p);
            g.backward(l).map_err(|e| e.to_string())?;
            let grad = g.grad(xv).ok_or("no gradient reaches the input")?.to_vec();
            let h = 1e-6;
            for i in 0..c {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let bp = spec.bound(&xp).unwrap()[i];
                let bm = spec.bound(&xm).unwrap()[i];
                let fd = w[i] * (bp - bm) / (2.0 * h);
                let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-12);
                worst = worst.max(err);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(worst <= 1e-3, "max rel err {worst:.2e}");
    ensure!(secs < 10.0, "took {secs:.2}s");
    Ok(format!("max rel err {worst:.2e} over 500 vectors, {secs:.2}s"))
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let mut report = Vec::new();
    let mut worst_all: f64 = 0.0;
    let mut record = |name: &str, e: f64| {
        worst_all = worst_all.max(e);
        report.push(format!("{name} {e:.1e}"));
    };
    for seed in 0..2u64 {
        let batch = pendulum_batch(100 + seed, 5, 3);

        // representation loss, with and without a projection head
        for projection in [false, true] {
            let cfg = TrainConfig { ablate_projection: projection, ..mini_cfg() };
            let a = agent(&cfg, seed);
            let targets = a.repr.targets(&batch).unwrap();
            let mut picks: Vec<(&str, Pick)> = vec![("encoder", pick_enc), ("dynamics", pick_dyn)];
            if projection {
                picks.push(("projection", pick_proj));
            }
            let e = fd_max_rel_err(&a, &picks, &|m, g| m.repr.representation_loss(g, &batch, &targets).unwrap())?;
            record(if projection { "rep+proj" } else { "rep" }, e);
        }

        let cfg = TrainConfig {
            ablate_reward_head: true,
            ablate_reconstruction: true,
            ..mini_cfg()
        };
        let a = agent(&cfg, 10 + seed);
        let picks: [(&str, Pick); 3] = [("encoder", pick_enc), ("dynamics", pick_dyn), ("heads", pick_heads)];
        let e = fd_max_rel_err(&a, &picks, &|m, g| {
            let r = m.repr.rollout(g, &batch).unwrap();
            m.repr.reward_loss(g, &r, &batch).unwrap()
        })?;
        record("reward", e);
        let e = fd_max_rel_err(&a, &picks, &|m, g| {
            let r = m.repr.rollout(g, &batch).unwrap();
            m.repr.reconstruction_loss(g, &r, &batch).unwrap()
        })?;
        record("reconstruction", e);

        let a = agent(&mini_cfg(), 20 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = a.td3.critic_target(&a.repr, &batch, &mut rng).unwrap();
        let e = fd_max_rel_err(&a, &[("critic", pick_critic), ("encoder", pick_enc)], &|m, g| {
            m.td3.critic_loss(g, &m.repr, &batch, &y).unwrap()
        })?;
        record("critic", e);
        let e = fd_max_rel_err(&a, &[("actor", pick_actor)], &|m, g| m.td3.actor_loss(g, &m.repr, &batch).unwrap())?;
        record("actor", e);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(worst_all <= 1e-3, "max rel err {worst_all:.2e}: {}", report.join(", "));
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("max rel err {worst_all:.1e} ({}), {secs:.1}s", report[..6].join(", ")))
}

fn c4_loss_bound() -> Outcome {
    let bound: f64 = (0..5).map(|h| 0.9f64.powi(h)).sum();
    ensure!((bound - 4.0951).abs() < 1e-12, "bound {bound}");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut extreme: f64 = 0.0;
    let mut a = agent(&TrainConfig { horizon: 5, ..mini_cfg() }, 0);
    for i in 0..1000u64 {
        if i % 50 == 0 {
            let cfg = TrainConfig {
                horizon: 5,
                ablate_projection: i % 100 == 0,
                ablate_fsq: i % 150 == 0,
                target_mode: if i % 200 == 0 { TargetMode::StopGradient } else { TargetMode::Ema },
                ..mini_cfg()
            };
            a = agent(&cfg, i);
        }
        let scale = [0.1, 1.0, 10.0, 1e3][(i % 4) as usize];
        let batch = random_batch(&mut rng, 8, 5, 3, scale);
        let targets = a.repr.targets(&batch).unwrap();
        let mut g = Graph::new();
        let l = a.repr.representation_loss(&mut g, &batch, &targets).unwrap();
        let v = g.value(l).data()[0];
        if !(v.abs() <= bound) {
            violations += 1;
        }
        extreme = extreme.max(v.abs());
    }
    ensure!(violations == 0, "{violations} violations (max |L| = {extreme})");
    Ok(format!("0/1000 violations, max |L| = {extreme:.4} <= {bound:.4}"))
}

fn c5_isolation() -> Outcome {
    let targets_tags: BTreeSet<&str> = ["encoder_target", "projection_target", "critic_target", "actor_target"].into();
    let cfg = TrainConfig {
        ablate_reward_head: true,
        ablate_reconstruction: true,
        ablate_projection: true,
        ..mini_cfg()
    };
    let a = agent(&cfg, 5);
    let batch = pendulum_batch(5, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = a.td3.critic_target(&a.repr, &batch, &mut rng).unwrap();
    let targets = a.repr.targets(&batch).unwrap();

    let mut tapes: Vec<(&str, Graph<f64>)> = Vec::new();
    let mut g = Graph::new();
    let l = a.repr.losses(&mut g, &batch, &targets).unwrap().total;
    g.backward(l).unwrap();
    tapes.push(("representation", g));
    let mut g = Graph::new();
    let l = a.td3.critic_loss(&mut g, &a.repr, &batch, &y).unwrap();
    g.backward(l).unwrap();
    tapes.push(("critic", g));
    let mut g = Graph::new();
    let l = a.td3.actor_loss(&mut g, &a.repr, &batch).unwrap();
    g.backward(l).unwrap();
    tapes.push(("actor", g));

    for (name, g) in &tapes {
        let tags = g.param_tags();
        for t in &tags {
            ensure!(!targets_tags.contains(t.as_str()), "{name} loss binds target store {t}");
        }
        let mut m = a.clone();
        let stores: [&mut ParamStore<f64>; 4] = [
            &mut m.repr.enc_target,
            &mut m.repr.proj_target,
            &mut m.td3.critic_target,
            &mut m.td3.actor_target,
        ];
        for s in stores {
            ensure!(g.accumulate_into(s) == 0 && s.grad_is_zero(), "{name} loss reaches {}", s.tag());
        }
    }
    let actor_tags = tapes[2].1.param_tags();
    ensure!(
        actor_tags == BTreeSet::from(["actor".to_string()]),
        "actor loss binds {actor_tags:?}"
    );
    let mut m = a.clone();
    ensure!(tapes[2].1.accumulate_into(&mut m.td3.critic) == 0, "actor loss reaches the critics");
    ensure!(tapes[2].1.accumulate_into(&mut m.repr.enc) == 0, "actor loss reaches the encoder");

    // task-agnosticism with the heads off
    let plain = agent(&mini_cfg(), 6);
    let mut shifted = batch.clone();
    for row in &mut shifted.rewards {
        row.iter_mut().for_each(|r| *r = *r * -3.0 + 17.0);
    }
    let loss = |b: &SegmentBatch<f64>| {
        let t = plain.repr.targets(b).unwrap();
        let mut g = Graph::new();
        let l = plain.repr.representation_loss(&mut g, b, &t).unwrap();
        g.value(l).data()[0].to_bits()
    };
    ensure!(loss(&batch) == loss(&shifted), "rewards change the representation loss");
    let mut r1 = plain.repr.clone();
    let mut r2 = plain.repr.clone();
    r1.update(&batch).unwrap();
    r2.update(&shifted).unwrap();
    for (x, y) in r1.stores().iter().zip(r2.stores()) {
        ensure!(x.sq_distance(y).unwrap() == 0.0, "rewards change the {} update", x.tag());
    }
    Ok("no gradient reaches EMA/target stores; actor touches only the actor; rewards leave the representation loss bitwise unchanged".into())
}

fn c9_nstep() -> Outcome {
    let g = 0.99f64;
    ensure!(
        (nstep_target(&[vec![1.0], vec![1.0], vec![1.0]], &vec![vec![false]; 3], &[0.0], g, 3)[0] - 2.9701).abs() < 1e-12,
        "three unit rewards do not give 2.9701"
    );
    let mut checked = 0;
    for (nstep, c) in [(3usize, 0.0f64), (3, 2.5), (1, -4.0), (5, 1.25)] {
        let cfg = TrainConfig { nstep, horizon: nstep.max(3), gamma: g, ..mini_cfg() };
        let mut a = agent(&cfg, 9);
        // constant target critics: zero weights, output bias c
        for p in a.td3.critic_target.iter_mut() {
            p.value.fill(0.0);
        }
        let last = a.td3.critic_target.names().iter().filter(|n| n.ends_with(".bias") && !n.contains(".ln.")).map(|n| n.to_string()).collect::<Vec<_>>();
        for prefix in ["q1.", "q2."] {
            let name = last.iter().filter(|n| n.starts_with(prefix)).max().unwrap().clone();
            a.td3.critic_target.by_name_mut(&name).unwrap().value.fill(c);
        }
        let span = nstep.max(3);
        let mut rng = ChaCha8Rng::seed_from_u64(nstep as u64);
        let mut batch = random_batch(&mut rng, 5, span, 3, 1.0);
        for r in batch.rewards.iter_mut() {
            r[0] = 1.0;
        }
        // row 2: terminal at k = 1; row 3: terminal at k = 0;
        // row 4: truncated (done, not terminal) at k = 1
        if nstep > 1 {
            batch.terminal[1][2] = true;
            batch.done[1][2] = true;
            batch.done[1][4] = true;
        }
        batch.terminal[0][3] = true;
        batch.done[0][3] = true;
        let y = a.td3.critic_target(&a.repr, &batch, &mut rng).unwrap();
        let r = |k: usize, b: usize| batch.rewards[k][b];
        for b in 0..5 {
            let expect = match (b, nstep) {
                (3, _) => r(0, 3),
                (2, n) if n > 1 => r(0, 2) + g * r(1, 2),
                (_, 1) => r(0, b) + g * c,
                (_, 3) => r(0, b) + g * r(1, b) + g * g * r(2, b) + g.powi(3) * c,
                (_, 5) => (0..5).map(|k| g.powi(k as i32) * r(k, b)).sum::<f64>() + g.powi(5) * c,
                _ => unreachable!(),
            };
            ensure!((y[b] - expect).abs() <= 1e-6, "nstep {nstep}, c {c}, row {b}: {} vs {expect}", y[b]);
            checked += 1;
        }
        if nstep == 3 && c == 0.0 {
            ensure!((y[0] - 2.9701).abs() <= 1e-6, "unit-reward row gives {}", y[0]);
        }
    }
    Ok(format!("{checked} targets match closed forms to 1e-6, incl. 2.9701"))
}

fn c10_determinism() -> Outcome {
    let cfg = TrainConfig {
        total_env_steps: 300,
        eval_every: 100,
        checkpoint_every: 100,
        num_eval_episodes: 2,
        random_episodes: 1,
        probe_size: 128,
        batch_size: 32,
        mlp_hidden: vec![32, 32],
        enc_hidden: vec![32],
        latent_width: 16,
        projection_width: 16,
        precision: Precision::F64,
        deterministic_clock: true,
        ..TrainConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train::<f64>(cfg.clone(), a.path()).map_err(|e| e.to_string())?;
    train::<f64>(cfg, b.path()).map_err(|e| e.to_string())?;
    for f in ["metrics.csv", "metrics.jsonl", "step_100.ckpt", "final.ckpt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        ensure!(x == y, "{f} differs between identical runs");
    }
    let c = tempfile::tempdir().unwrap();
    let s = resume::<f64>(&a.path().join("step_200.ckpt"), c.path(), None).map_err(|e| e.to_string())?;
    ensure!(s.train_step == 300, "resumed run stopped at {}", s.train_step);
    ensure!(
        std::fs::read(a.path().join("final.ckpt")).unwrap() == std::fs::read(c.path().join("final.ckpt")).unwrap(),
        "resumed final state differs"
    );
    let full = read_metrics_jsonl(&a.path().join("metrics.jsonl")).unwrap();
    let tail = read_metrics_jsonl(&c.path().join("metrics.jsonl")).unwrap();
    ensure!(tail.len() == 1 && tail[0] == full[full.len() - 1], "resumed metrics differ");
    Ok("identical 64-bit runs are bytewise equal; resume over steps 200..300 is bitwise equal".into())
}

// ----------------------------------------------------------- desk runs

fn desk(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        total_env_steps: 45_000,
        eval_every: 2_500,
        num_eval_episodes: 5,
        random_episodes: 10,
        probe_size: 256,
        batch_size: 64,
        mlp_hidden: vec![64, 64],
        enc_hidden: vec![64],
        latent_width: 32,
        projection_width: 32,
        expl_noise_duration: 20_000,
        precision: Precision::F32,
        ..TrainConfig::default()
    }
}

struct DeskRuns {
    fsq: Vec<Vec<MetricsRow>>,
    no_fsq: Vec<Vec<MetricsRow>>,
    identity: Vec<Vec<MetricsRow>>,
    /// Decision step at which each FSQ run first evaluated at or above R*.
    reached: Vec<Option<u64>>,
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn run_rows(cfg: TrainConfig, dir: &Path) -> Vec<MetricsRow> {
    train::<f32>(cfg, dir).expect("desk run");
    read_metrics_csv(&dir.join("metrics.csv")).expect("metrics")
}

fn first_reaching(rows: &[MetricsRow], target: f64) -> Option<u64> {
    rows.iter().find(|r| r.eval_return_mean.is_some_and(|m| m >= target)).map(|r| r.env_step)
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let mut out = DeskRuns { fsq: vec![], no_fsq: vec![], identity: vec![], reached: vec![] };
        for seed in SEEDS {
            let dir = root.path().join(format!("fsq{seed}"));
            let rows = run_rows(desk(seed), &dir);
            let mut reached = first_reaching(&rows, R_STAR);
            if reached.is_none() {
                // keep going up to 100k decision steps, stopping at R*
                let mut s = RunState::<f32>::load(&dir.join("final.ckpt")).unwrap();
                s.cfg.total_env_steps = 100_000 - 5_000;
                s.cfg.target_return = Some(R_STAR);
                let ext = dir.join("extended");
                let mut sink = iqrl::diagnostics::MetricsSink::open(&ext, false).unwrap();
                s.run(&mut sink, &ext).unwrap();
                reached = first_reaching(&read_metrics_csv(&ext.join("metrics.csv")).unwrap(), R_STAR);
            }
            out.reached.push(reached);
            out.fsq.push(rows);
            out.no_fsq.push(run_rows(
                TrainConfig { ablate_fsq: true, ..desk(seed) },
                &root.path().join(format!("nofsq{seed}")),
            ));
            out.identity.push(run_rows(
                TrainConfig { identity_encoder: true, ..desk(seed) },
                &root.path().join(format!("identity{seed}")),
            ));
        }
        out
    })
}

fn c6_rank() -> Outcome {
    let runs = desk_runs();
    let mut wins = 0;
    let mut notes = Vec::new();
    for (i, (f, n)) in runs.fsq.iter().zip(&runs.no_fsq).enumerate() {
        let first = &f[0];
        let rmax = first.latent_rank_max.ok_or("no rank in first row")?;
        ensure!(rmax == 32, "rank_max {rmax} != min(B, W) = 32");
        ensure!(first.latent_rank == Some(rmax), "seed {}: initial rank {:?} < {rmax}", SEEDS[i], first.latent_rank);
        ensure!(f.last().unwrap().env_step == 50_000, "FSQ run ends at {}", f.last().unwrap().env_step);
        let min_rank = f.iter().filter_map(|r| r.latent_rank).min().unwrap();
        ensure!(
            min_rank as f64 >= 0.9 * rmax as f64,
            "seed {}: FSQ rank dips to {min_rank} < 0.9 * {rmax}",
            SEEDS[i]
        );
        let (rf, rn) = (f.last().unwrap().latent_rank.unwrap(), n.last().unwrap().latent_rank.unwrap());
        if rf >= rn {
            wins += 1;
        }
        notes.push(format!("seed {}: FSQ min {min_rank} final {rf} vs no-FSQ final {rn}", SEEDS[i]));
    }
    ensure!(wins >= 2, "FSQ final rank >= no-FSQ on only {wins}/3 seeds: {}", notes.join("; "));
    Ok(format!("{wins}/3 seeds FSQ >= no-FSQ; {}", notes.join("; ")))
}

fn recompute_r_star() -> f64 {
    let mut seeds = ChaCha8Rng::seed_from_u64(12345);
    let mut env = make_env("pendulum_swingup", 2).unwrap();
    let returns: Vec<f64> = (0..2000)
        .map(|_| {
            env.reset(seeds.next_u64());
            let mut total = 0.0;
            loop {
                let s = env.state();
                let st = env.step(&[energy_shaping_action(s[0], s[1], 100.0)]).unwrap();
                total += st.reward;
                if st.done {
                    break total;
                }
            }
        })
        .collect();
    percentile(&returns, 0.9)
}

fn c8_learning() -> Outcome {
    let check = recompute_r_star();
    ensure!(
        (check - R_STAR).abs() <= 0.05 * R_STAR.abs(),
        "scripted controller p90 {check:.1} drifted from R* = {R_STAR}"
    );
    let runs = desk_runs();
    let reached: Vec<String> = runs
        .reached
        .iter()
        .map(|r| r.map_or("never".into(), |s| s.to_string()))
        .collect();
    let all = runs.reached.iter().all(|r| r.is_some_and(|s| s <= 100_000));
    let finals = |v: &Vec<Vec<MetricsRow>>| -> Vec<f64> {
        v.iter().map(|rows| rows.last().unwrap().eval_return_mean.unwrap()).collect()
    };
    let (fq, id) = (finals(&runs.fsq), finals(&runs.identity));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let detail = format!(
        "R* = {R_STAR} (recomputed {check:.1}); reached at steps [{}]; final eval iQRL {fq:.1?} (mean {:.1}) vs identity-encoder TD3 {id:.1?} (mean {:.1})",
        reached.join(", "),
        mean(&fq),
        mean(&id)
    );
    ensure!(all, "not every seed reached R* within 100k steps: {detail}");
    ensure!(mean(&fq) >= mean(&id), "iQRL final eval below the TD3 baseline: {detail}");
    Ok(detail)
}

fn c7_codebook_activity() -> Outcome {
    let trace = |levels: Vec<u32>| -> Vec<f64> {
        let cfg = TrainConfig {
            fsq_levels: levels,
            latent_width: 48,
            projection_width: 48,
            random_episodes: 0,
            ..desk(7)
        };
        let mut s = RunState::<f32>::new(cfg).unwrap();
        let mut out = Vec::new();
        for _ in 0..8000 {
            s.step().unwrap();
            out.push(s.active_fraction().unwrap());
        }
        out
    };
    let small = trace(vec![5, 3]);
    let large = trace(vec![8, 8, 8]);
    for (name, t) in [("|C|=15", &small), ("|C|=512", &large)] {
        ensure!(t.windows(2).all(|w| w[1] >= w[0]), "{name} active fraction decreases");
    }
    let mut tested = 0;
    for k in 1..=100 {
        let th = k as f64 / 100.0;
        let Some(tl) = large.iter().position(|&f| f >= th) else { continue };
        let ts = small.iter().position(|&f| f >= th);
        ensure!(ts.is_some_and(|ts| ts <= tl), "threshold {th}: |C|=15 at {ts:?}, |C|=512 at {tl}");
        tested += 1;
    }
    Ok(format!(
        "monotone; {tested} thresholds reached no later with |C|=15 (final {:.3} vs {:.3} after 8000 steps)",
        small.last().unwrap(),
        large.last().unwrap()
    ))
}

fn validate_schema(dir: &Path, cfg: &TrainConfig) -> Result<usize, String> {
    let csv = read_metrics_csv(&dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let jsonl = read_metrics_jsonl(&dir.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    ensure!(!csv.is_empty() && csv.len() == jsonl.len(), "{} csv rows vs {} jsonl rows", csv.len(), jsonl.len());
    let quantized = !cfg.ablate_fsq && !cfg.identity_encoder;
    let width = if cfg.identity_encoder { 3 } else { cfg.latent_width };
    for (i, (r, j)) in csv.iter().zip(&jsonl).enumerate() {
        ensure!(r.env_step == j.env_step && r.episode == j.episode, "row {i}: csv and jsonl disagree");
        if i > 0 {
            ensure!(r.env_step > csv[i - 1].env_step, "row {i}: env_step not increasing");
            ensure!(r.episode >= csv[i - 1].episode, "row {i}: episode decreases");
            for (n, v) in [("rep_loss", r.rep_loss), ("critic_loss", r.critic_loss), ("actor_loss", r.actor_loss)] {
                ensure!(v.is_some_and(f64::is_finite), "row {i}: {n} = {v:?}");
            }
        }
        ensure!(r.eval_return_mean.is_some_and(f64::is_finite), "row {i}: eval return");
        ensure!(r.latent_rank_max == Some(cfg.probe_size.min(width) as u64), "row {i}: rank_max {:?}", r.latent_rank_max);
        ensure!(r.latent_rank <= r.latent_rank_max, "row {i}: rank above max");
        match r.codebook_active_frac {
            Some(f) => ensure!(quantized && f > 0.0 && f <= 1.0, "row {i}: active fraction {f}"),
            None => ensure!(!quantized, "row {i}: missing active fraction"),
        }
        let (lo, hi) = (cfg.expl_noise_end.min(cfg.expl_noise_start), cfg.expl_noise_end.max(cfg.expl_noise_start));
        ensure!(r.expl_noise_std >= lo && r.expl_noise_std <= hi, "row {i}: noise {}", r.expl_noise_std);
        ensure!(r.wall_time_s >= 0.0, "row {i}: wall time");
    }
    ensure!(csv.last().unwrap().env_step == 2_000, "run ends at {}", csv.last().unwrap().env_step);
    Ok(csv.len())
}

fn c11_ablations() -> Outcome {
    let smoke = |cfg: TrainConfig| TrainConfig {
        total_env_steps: 1_500,
        random_episodes: 1,
        eval_every: 500,
        num_eval_episodes: 1,
        ..cfg
    };
    let base = smoke(desk(11));
    let mut variants: Vec<(String, TrainConfig)> = vec![
        ("reward head".into(), TrainConfig { ablate_reward_head: true, ..base.clone() }),
        ("reconstruction".into(), TrainConfig { ablate_reconstruction: true, ..base.clone() }),
        ("projection".into(), TrainConfig { ablate_projection: true, ..base.clone() }),
        ("stop-gradient".into(), TrainConfig { target_mode: TargetMode::StopGradient, ..base.clone() }),
        ("no-FSQ".into(), TrainConfig { ablate_fsq: true, ..base.clone() }),
    ];
    for w in [64, 512, 1024] {
        variants.push((format!("W={w}"), TrainConfig { latent_width: w, projection_width: w, ..base.clone() }));
    }
    for levels in [vec![5, 3], vec![8, 8], vec![8, 8, 8]] {
        variants.push((
            format!("|C|={}", levels.iter().product::<u32>()),
            TrainConfig { fsq_levels: levels, latent_width: 48, projection_width: 48, ..base.clone() },
        ));
    }
    // every on/off combination of the five flags, on small nets
    let tiny = TrainConfig {
        mlp_hidden: vec![16, 16],
        enc_hidden: vec![16],
        latent_width: 8,
        projection_width: 8,
        batch_size: 16,
        probe_size: 64,
        ..base.clone()
    };
    for mask in 0..32u32 {
        let on = |b: u32| mask & (1 << b) != 0;
        variants.push((
            format!("flags {mask:05b}"),
            TrainConfig {
                ablate_reward_head: on(0),
                ablate_reconstruction: on(1),
                ablate_projection: on(2),
                target_mode: if on(3) { TargetMode::StopGradient } else { TargetMode::Ema },
                ablate_fsq: on(4),
                ..tiny.clone()
            },
        ));
    }
    let root = tempfile::tempdir().unwrap();
    let mut rows = 0;
    for (i, (name, cfg)) in variants.iter().enumerate() {
        let dir = root.path().join(i.to_string());
        train::<f32>(cfg.clone(), &dir).map_err(|e| format!("{name}: {e}"))?;
        rows += validate_schema(&dir, cfg).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("{} runs of 2k decision steps, {rows} schema-valid rows, no NaN", variants.len()))
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "FSQ codebook exactness", c1_codebook),
        (2, "STE correctness", c2_ste),
        (3, "gradient suite", c3_gradients),
        (4, "loss bound", c4_loss_bound),
        (5, "gradient isolation", c5_isolation),
        (6, "rank preservation", c6_rank),
        (7, "codebook activity", c7_codebook_activity),
        (8, "learning at desk scale", c8_learning),
        (9, "n-step target exactness", c9_nstep),
        (10, "determinism and persistence", c10_determinism),
        (11, "ablation smoke matrix", c11_ablations),
    ];
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if let Some(fl) = &filter {
            if fl != &n.to_string() && !name.contains(fl.as_str()) {
                continue;
            }
        }
        ran += 1;
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} [{secs:.1}s]: {why}");
            }
        }
    }
    std::panic::set_hook(hook);
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

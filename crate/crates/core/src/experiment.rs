//! Training loop, threshold metrics, rollout-length ablation and the
//! command-tracking heatmap.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{HeatmapConfig, TrainConfig};
use crate::dyna::{merge_rollouts, scheduler_ns, synth_extend, PredictiveModel, SchedulerConfig, TransitionBuilder, TransitionSet};
use crate::env::{env_reset, env_step, Command, EnvParams, EnvState, VecEnv, PHYS_DIM};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::policy::{Actor, Critic};
use crate::ppo::{ppo_update, PpoStats, RolloutBatch};
use crate::scalar::Real;

pub const METRICS_HEADER: &str =
    "iter,n_r,n_s,sim_steps_cum,syn_steps_cum,mean_return,task_return,model_loss,policy_loss,value_loss,clip_frac,wall_s";
pub const HEATMAP_HEADER: &str = "vx_cmd,wz_cmd,mae_vx,mae_wz,mae_total,falls";

const STREAM_POLICY: u64 = 1 << 40;
const STREAM_PPO: u64 = (1 << 40) + 1;
const STREAM_MODEL: u64 = (1 << 40) + 2;
const STREAM_SYNTH: u64 = (1 << 40) + 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn init_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: u64,
    pub n_r: usize,
    pub n_s: usize,
    pub sim_steps_cum: u64,
    pub syn_steps_cum: u64,
    /// Mean undiscounted return of recently completed simulated episodes; NaN if none.
    pub mean_return: f64,
    /// Same episodes, task term only.
    pub task_return: f64,
    /// NaN when no predictive model is trained.
    pub model_loss: f64,
    pub ppo: PpoStats,
    pub wall_s: f64,
}

impl IterationMetrics {
    pub fn total_steps(&self) -> u64 {
        self.sim_steps_cum + self.syn_steps_cum
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.n_r,
            self.n_s,
            self.sim_steps_cum,
            self.syn_steps_cum,
            self.mean_return,
            self.task_return,
            self.model_loss,
            self.ppo.policy_loss,
            self.ppo.value_loss,
            self.ppo.clip_frac,
            self.wall_s
        )
    }
}

pub fn metrics_csv(series: &[IterationMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in series {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Read a metrics CSV written by [`train_run`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<IterationMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Invalid("metrics CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(Error::Invalid(format!("metrics row `{line}`")));
            }
            let int = |i: usize| f[i].parse::<u64>().map_err(|_| Error::Invalid(format!("metrics field {i} in `{line}`")));
            let real = |i: usize| f[i].parse::<f64>().map_err(|_| Error::Invalid(format!("metrics field {i} in `{line}`")));
            Ok(IterationMetrics {
                iter: int(0)?,
                n_r: int(1)? as usize,
                n_s: int(2)? as usize,
                sim_steps_cum: int(3)?,
                syn_steps_cum: int(4)?,
                mean_return: real(5)?,
                task_return: real(6)?,
                model_loss: real(7)?,
                ppo: PpoStats { policy_loss: real(8)?, value_loss: real(9)?, clip_frac: real(10)?, ..PpoStats::default() },
                wall_s: real(11)?,
            })
        })
        .collect()
}

/// Everything visible to an observer after an iteration completes.
pub struct IterationView<'a, S> {
    pub metrics: &'a IterationMetrics,
    pub simulated: &'a TransitionSet<S>,
    pub batch: &'a RolloutBatch<S>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub metrics: Vec<IterationMetrics>,
    pub actor: Actor<S>,
    pub critic: Critic<S>,
    pub model: Option<PredictiveModel<S>>,
    pub reached_threshold: bool,
}

struct EpisodeTracker {
    running: Vec<(f64, f64)>,
    recent: VecDeque<(f64, f64)>,
    window: usize,
    this_iter: Vec<(f64, f64)>,
}

impl EpisodeTracker {
    fn new(envs: usize, window: usize) -> Self {
        Self { running: vec![(0.0, 0.0); envs], recent: VecDeque::new(), window, this_iter: Vec::new() }
    }

    fn record(&mut self, env: usize, reward: f64, task: f64, done: bool) {
        let acc = &mut self.running[env];
        acc.0 += reward;
        acc.1 += task;
        if done {
            let ep = std::mem::take(acc);
            self.this_iter.push(ep);
            if self.window > 0 {
                self.recent.push_back(ep);
                if self.recent.len() > self.window {
                    self.recent.pop_front();
                }
            }
        }
    }

    /// `(mean return, mean task return)` for the iteration, then reset.
    fn close_iteration(&mut self) -> (f64, f64) {
        let eps: Vec<(f64, f64)> =
            if self.window > 0 { self.recent.iter().copied().collect() } else { std::mem::take(&mut self.this_iter) };
        self.this_iter.clear();
        if eps.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = eps.len() as f64;
        (eps.iter().map(|e| e.0).sum::<f64>() / n, eps.iter().map(|e| e.1).sum::<f64>() / n)
    }
}

pub fn train_run<S: Real>(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome<S>> {
    train_run_observed(cfg, out, |_: &IterationView<S>| Ok(()))
}

/// Alternate simulated collection, model fitting, synthetic tail generation
/// and the on-policy update until the step budget is spent.
pub fn train_run_observed<S: Real, F>(cfg: &TrainConfig, out: Option<&Path>, mut observe: F) -> Result<TrainOutcome<S>>
where
    F: FnMut(&IterationView<S>) -> Result<()>,
{
    cfg.validate()?;
    let run = &cfg.run;
    let (k, n) = (run.envs, run.rollout);
    let seed = run.seed;
    let actor_seed = init_seed(seed, 1);
    let critic_seed = init_seed(seed, 2);
    let model_seed = init_seed(seed, 3);

    let mut env = VecEnv::<S>::new(cfg.env.cast(), k, seed)?;
    if run.randomize_phase {
        env.randomize_episode_phase();
    }
    let mut actor = Actor::<S>::new(cfg.policy.hidden.clone(), cfg.policy.activation, cfg.policy.init_log_std, actor_seed)?;
    let mut critic = Critic::<S>::new(cfg.policy.hidden.clone(), cfg.policy.activation, critic_seed)?;
    let mut optimizer = Adam::<S>::new(AdamConfig::default());
    let mut model = if cfg.scheduler.is_disabled() { None } else { Some(PredictiveModel::<S>::new(&cfg.model, model_seed)?) };

    let mut policy_rng = stream_rng(seed, STREAM_POLICY);
    let mut ppo_rng = stream_rng(seed, STREAM_PPO);
    let mut model_rng = stream_rng(seed, STREAM_MODEL);
    let mut synth_rng = stream_rng(seed, STREAM_SYNTH);

    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
            writeln!(w, "{METRICS_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let save = |dir: &Path, iteration: u64, actor: &Actor<S>, critic: &Critic<S>, model: &Option<PredictiveModel<S>>| {
        checkpoint::save(
            dir,
            &Checkpoint {
                iteration,
                actor: actor.clone(),
                actor_seed,
                critic: critic.clone(),
                critic_seed,
                model: model.clone().map(|m| (m, model_seed)),
            },
        )
    };

    let start = Instant::now();
    let mut episodes = EpisodeTracker::new(k, run.return_window);
    let mut metrics = Vec::new();
    let (mut sim_cum, mut syn_cum) = (0u64, 0u64);
    let mut reached = false;
    let mut i = 0u64;
    while sim_cum + syn_cum < run.budget {
        let snapshot = out.map(|_| (actor.clone(), critic.clone(), model.clone()));
        let step = (|| -> Result<(IterationMetrics, TransitionSet<S>, RolloutBatch<S>)> {
            let n_s = if cfg.scheduler.is_disabled() { 0 } else { scheduler_ns(&cfg.scheduler, i) };
            let n_r = n - n_s;

            let mut builder = TransitionBuilder::new(k, false);
            for _ in 0..n_r {
                let obs = env.observations().to_owned();
                let sample = actor.act(obs.view(), &mut policy_rng, false)?;
                let steps = env.step(sample.clamped.view())?;
                let mut next_state = Array2::zeros((k, PHYS_DIM));
                let mut rewards = ndarray::Array1::zeros(k);
                let mut dones = Vec::with_capacity(k);
                for (e, s) in steps.iter().enumerate() {
                    next_state.row_mut(e).assign(&ndarray::ArrayView1::from(&s.result.obs[..PHYS_DIM]));
                    rewards[e] = s.result.reward;
                    dones.push(s.result.done);
                    episodes.record(e, s.result.reward.as_f64(), s.result.reward_task.as_f64(), s.result.done);
                }
                builder.push(obs, sample.raw, sample.clamped, sample.log_prob, next_state, rewards, dones)?;
            }
            let simulated = builder.finish();
            let sim_next_obs = env.observations().to_owned();

            let model_loss = match model.as_mut() {
                Some(m) => m.train(&simulated, cfg.model.epochs, cfg.model.lr, &mut model_rng)?.as_f64(),
                None => f64::NAN,
            };
            let tail = match (&model, n_s) {
                (Some(m), ns) if ns > 0 => Some(synth_extend(m, &actor, sim_next_obs.view(), ns, &mut synth_rng)?),
                _ => None,
            };
            let batch = merge_rollouts(&simulated, tail.as_ref(), sim_next_obs.view(), &critic, n)?;
            if batch.synthetic_counts().iter().any(|&c| c != n_s) {
                return Err(Error::Invalid(format!("iteration {i}: synthetic tail length differs from N_s = {n_s}")));
            }
            let ppo = ppo_update(&mut actor, &mut critic, &mut optimizer, &batch, &cfg.ppo, &mut ppo_rng)?;

            let (mean_return, task_return) = episodes.close_iteration();
            sim_cum += (k * n_r) as u64;
            syn_cum += (k * n_s) as u64;
            let m = IterationMetrics {
                iter: i,
                n_r,
                n_s,
                sim_steps_cum: sim_cum,
                syn_steps_cum: syn_cum,
                mean_return,
                task_return,
                model_loss,
                ppo,
                wall_s: if run.log_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
            };
            Ok((m, simulated, batch))
        })();

        let (m, simulated, batch) = match step {
            Ok(v) => v,
            Err(e) => {
                if let (true, Some(dir), Some((a, c, md))) = (e.is_numerical(), out, snapshot.as_ref()) {
                    save(&dir.join("checkpoints").join("abort"), i, a, c, md)?;
                }
                return Err(e);
            }
        };
        observe(&IterationView { metrics: &m, simulated: &simulated, batch: &batch })?;
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", m.csv_row())?;
            w.flush()?;
        }
        if let Some(dir) = out {
            if run.checkpoint_every > 0 && (i + 1).is_multiple_of(run.checkpoint_every) {
                save(&dir.join("checkpoints").join(format!("iter_{:06}", i + 1)), i + 1, &actor, &critic, &model)?;
            }
        }
        let hit = cfg.threshold.delta.is_some_and(|d| m.mean_return >= d);
        metrics.push(m);
        i += 1;
        if hit {
            reached = true;
            if run.stop_at_threshold {
                break;
            }
        }
    }
    if let Some(dir) = out {
        save(&dir.join("checkpoints").join("final"), i, &actor, &critic, &model)?;
    }
    Ok(TrainOutcome { metrics, actor, critic, model, reached_threshold: reached })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSteps {
    /// Cumulative simulated steps at the first iteration reaching the threshold.
    pub reached: Option<u64>,
    /// `reached`, or all simulated steps of the run when never reached.
    pub capped: u64,
}

pub fn steps_to_threshold(series: &[IterationMetrics], delta: f64) -> Result<ThresholdSteps> {
    let last = series.last().ok_or_else(|| Error::Invalid("empty metrics series".into()))?;
    let reached = series.iter().find(|m| m.mean_return >= delta).map(|m| m.sim_steps_cum);
    Ok(ThresholdSteps { reached, capped: reached.unwrap_or(last.sim_steps_cum) })
}

/// Threshold as `fraction` × the mean of finite `mean_return` values over the
/// trailing `tail` fraction of iterations.
pub fn calibrate_delta(series: &[IterationMetrics], fraction: f64, tail: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Invalid("calibration run produced no iterations".into()));
    }
    if !(tail > 0.0 && tail <= 1.0) {
        return Err(Error::Config("calibration.tail must lie in (0, 1]".into()));
    }
    let count = ((series.len() as f64 * tail).ceil() as usize).max(1);
    let finite: Vec<f64> =
        series[series.len() - count..].iter().map(|m| m.mean_return).filter(|r| r.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Invalid("no completed episodes in the calibration window".into()));
    }
    Ok(fraction * finite.iter().sum::<f64>() / finite.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub delta: f64,
    pub reference_return: f64,
    pub iterations: usize,
    pub budget: u64,
}

/// Reference run (plain on-policy updates, `calibration.budget` steps) and
/// the derived threshold.
pub fn run_calibration(cfg: &TrainConfig, out: Option<&Path>) -> Result<Calibration> {
    let mut reference = cfg.clone();
    reference.run.budget = cfg.calibration.budget;
    reference.run.stop_at_threshold = false;
    reference.scheduler = SchedulerConfig::DISABLED;
    reference.threshold.delta = None;
    let outcome = train_run::<f64>(&reference, out)?;
    let delta = calibrate_delta(&outcome.metrics, cfg.calibration.fraction, cfg.calibration.tail)?;
    Ok(Calibration {
        delta,
        reference_return: delta / cfg.calibration.fraction,
        iterations: outcome.metrics.len(),
        budget: reference.run.budget,
    })
}

/// Scalar summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rollout: usize,
    pub seed: u64,
    pub max_return: f64,
    pub steps_to_delta: Option<u64>,
    pub steps_to_delta_capped: u64,
}

impl RunSummary {
    pub fn from_metrics(rollout: usize, seed: u64, series: &[IterationMetrics], delta: Option<f64>) -> Result<Self> {
        let max_return = series.iter().map(|m| m.mean_return).filter(|r| r.is_finite()).fold(f64::NAN, f64::max);
        let (reached, capped) = match delta {
            Some(d) => {
                let t = steps_to_threshold(series, d)?;
                (t.reached, t.capped)
            }
            None => (None, series.last().map_or(0, |m| m.sim_steps_cum)),
        };
        Ok(Self { rollout, seed, max_return, steps_to_delta: reached, steps_to_delta_capped: capped })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rollout: usize,
    pub runs: usize,
    pub max_return_mean: f64,
    pub max_return_std: f64,
    pub success_pct: f64,
    /// Over successful runs only; NaN if none succeeded.
    pub steps_to_delta_mean: f64,
    pub steps_to_delta_std: f64,
    pub steps_capped_mean: f64,
    pub steps_capped_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub delta: Option<f64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunSummary>,
}

/// Population mean and standard deviation; NaN for an empty sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize_ablation(runs: Vec<RunSummary>, delta: Option<f64>) -> AblationSummary {
    let mut lengths: Vec<usize> = runs.iter().map(|r| r.rollout).collect();
    lengths.dedup();
    lengths.sort_unstable();
    lengths.dedup();
    let rows = lengths
        .into_iter()
        .map(|len| {
            let group: Vec<&RunSummary> = runs.iter().filter(|r| r.rollout == len).collect();
            let maxes: Vec<f64> = group.iter().map(|r| r.max_return).collect();
            let hits: Vec<f64> = group.iter().filter_map(|r| r.steps_to_delta).map(|s| s as f64).collect();
            let capped: Vec<f64> = group.iter().map(|r| r.steps_to_delta_capped as f64).collect();
            let (max_return_mean, max_return_std) = mean_std(&maxes);
            let (steps_to_delta_mean, steps_to_delta_std) = mean_std(&hits);
            let (steps_capped_mean, steps_capped_std) = mean_std(&capped);
            AblationRow {
                rollout: len,
                runs: group.len(),
                max_return_mean,
                max_return_std,
                success_pct: 100.0 * hits.len() as f64 / group.len() as f64,
                steps_to_delta_mean,
                steps_to_delta_std,
                steps_capped_mean,
                steps_capped_std,
            }
        })
        .collect();
    AblationSummary { delta, rows, runs }
}

pub const ABLATION_CSV_HEADER: &str = "rollout,runs,max_return_mean,max_return_std,success_pct,steps_to_delta_mean,steps_to_delta_std,steps_capped_mean,steps_capped_std";

impl AblationSummary {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.rollout,
                r.runs,
                r.max_return_mean,
                r.max_return_std,
                r.success_pct,
                r.steps_to_delta_mean,
                r.steps_to_delta_std,
                r.steps_capped_mean,
                r.steps_capped_std
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        // serde_json rejects NaN; encode missing statistics as null.
        let value = serde_json::to_value(self).unwrap_or(serde_json::Value::Null);
        serde_json::to_string_pretty(&value).expect("json")
    }
}

/// Plain on-policy runs for every `(length, seed)` pair with the scheduler
/// disabled. Each run writes to `out/N{len}_seed{seed}` when `out` is given.
pub fn ablate_rollout_lengths(base: &TrainConfig, lengths: &[usize], seeds: &[u64], out: Option<&Path>) -> Result<AblationSummary> {
    if lengths.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one rollout length and one seed".into()));
    }
    let mut runs = Vec::with_capacity(lengths.len() * seeds.len());
    for &len in lengths {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.run.rollout = len;
            cfg.run.seed = seed;
            cfg.scheduler = SchedulerConfig::DISABLED;
            let dir = out.map(|o| o.join(format!("N{len}_seed{seed}")));
            let outcome = train_run::<f64>(&cfg, dir.as_deref())?;
            runs.push(RunSummary::from_metrics(len, seed, &outcome.metrics, base.threshold.delta)?);
        }
    }
    Ok(summarize_ablation(runs, base.threshold.delta))
}

/// Grid of commanded `(v_x, ω_z)` pairs evaluated by the heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSpec {
    pub vx: Vec<f64>,
    pub wz: Vec<f64>,
    pub trials: usize,
    pub warmup: usize,
    pub measure: usize,
}

impl HeatmapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vx.is_empty() || self.wz.is_empty() || self.trials == 0 || self.measure == 0 {
            return Err(Error::Config("heatmap needs a non-empty grid, trials >= 1 and measure > 0".into()));
        }
        Ok(())
    }
}

impl From<&HeatmapConfig> for HeatmapSpec {
    fn from(c: &HeatmapConfig) -> Self {
        Self { vx: c.vx.clone(), wz: c.wz.clone(), trials: c.trials, warmup: c.warmup, measure: c.measure }
    }
}

/// Measured planar forward velocity and yaw rate after one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingSample {
    pub vx: f64,
    pub wz: f64,
    pub fell: bool,
}

/// Anything that can be commanded and then stepped: a trained policy in the
/// surrogate, or a scripted stand-in.
pub trait TrackingSubject {
    fn begin(&mut self, vx_cmd: f64, wz_cmd: f64, trial: usize, cell: usize);
    fn advance(&mut self) -> Result<TrackingSample>;
}

/// Deterministic policy acting in the surrogate environment.
pub struct PolicySubject<'a, S> {
    actor: &'a Actor<S>,
    params: EnvParams<S>,
    seed: u64,
    state: EnvState<S>,
    command: Command<S>,
    rng: ChaCha8Rng,
}

impl<'a, S: Real> PolicySubject<'a, S> {
    /// `episode_len` is raised to cover the evaluation window if needed.
    pub fn new(actor: &'a Actor<S>, params: &EnvParams<S>, seed: u64, steps: usize) -> Self {
        let mut params = params.clone();
        params.episode_len = params.episode_len.max(steps);
        Self {
            actor,
            params,
            seed,
            state: EnvState::zero(),
            command: Command::zero(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<S: Real> TrackingSubject for PolicySubject<'_, S> {
    fn begin(&mut self, vx_cmd: f64, wz_cmd: f64, trial: usize, cell: usize) {
        self.rng = stream_rng(self.seed, ((cell as u64) << 16) | trial as u64);
        let (state, _, _) = env_reset(&self.params, &mut self.rng);
        self.state = state;
        self.command = Command::new(S::lit(vx_cmd), S::zero(), S::lit(wz_cmd));
    }

    fn advance(&mut self) -> Result<TrackingSample> {
        let obs = crate::env::observe(&self.state, &self.command);
        let obs = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        let sample = self.actor.act(obs.view(), &mut self.rng, true)?;
        let row = sample.clamped.row(0);
        let action = [row[0], row[1], row[2], row[3]];
        let out = env_step(&self.params, &self.state, &self.command, &action, &mut self.rng)?;
        self.state = out.next_state;
        Ok(TrackingSample {
            vx: out.next_state.v[0].as_f64(),
            wz: out.next_state.w.as_f64(),
            fell: out.done_reason == Some(crate::env::DoneReason::Fall),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub vx_cmd: f64,
    pub wz_cmd: f64,
    pub mae_vx: f64,
    pub mae_wz: f64,
    /// Mean of the two channel errors.
    pub mae_total: f64,
    pub falls: usize,
}

/// Per cell and trial: warm up, then average `|v_x − v_x^cmd|` and
/// `|ω_z − ω_z^cmd|` over the measurement window. A fall ends the trial and
/// its error is taken over the steps measured before it.
pub fn eval_tracking_heatmap<T: TrackingSubject>(subject: &mut T, spec: &HeatmapSpec) -> Result<Vec<HeatmapCell>> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(spec.vx.len() * spec.wz.len());
    for (vi, &vx_cmd) in spec.vx.iter().enumerate() {
        for (wi, &wz_cmd) in spec.wz.iter().enumerate() {
            let cell = vi * spec.wz.len() + wi;
            let mut falls = 0;
            let mut trial_errors = Vec::with_capacity(spec.trials);
            for trial in 0..spec.trials {
                subject.begin(vx_cmd, wz_cmd, trial, cell);
                let (mut sum_vx, mut sum_wz, mut measured) = (0.0, 0.0, 0usize);
                for t in 0..spec.warmup + spec.measure {
                    let s = subject.advance()?;
                    if t >= spec.warmup {
                        sum_vx += (s.vx - vx_cmd).abs();
                        sum_wz += (s.wz - wz_cmd).abs();
                        measured += 1;
                    }
                    if s.fell {
                        falls += 1;
                        break;
                    }
                }
                if measured > 0 {
                    trial_errors.push((sum_vx / measured as f64, sum_wz / measured as f64));
                }
            }
            let (mae_vx, mae_wz) = if trial_errors.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let n = trial_errors.len() as f64;
                (trial_errors.iter().map(|e| e.0).sum::<f64>() / n, trial_errors.iter().map(|e| e.1).sum::<f64>() / n)
            };
            cells.push(HeatmapCell { vx_cmd, wz_cmd, mae_vx, mae_wz, mae_total: 0.5 * (mae_vx + mae_wz), falls });
        }
    }
    Ok(cells)
}

pub fn heatmap_csv(cells: &[HeatmapCell]) -> String {
    let mut s = format!("{HEATMAP_HEADER}\n");
    for c in cells {
        s.push_str(&format!("{},{},{},{},{},{}\n", c.vx_cmd, c.wz_cmd, c.mae_vx, c.mae_wz, c.mae_total, c.falls));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(returns: &[f64], k: u64, n_r: u64) -> Vec<IterationMetrics> {
        returns
            .iter()
            .enumerate()
            .map(|(i, &r)| IterationMetrics {
                iter: i as u64,
                n_r: n_r as usize,
                n_s: 0,
                sim_steps_cum: (i as u64 + 1) * k * n_r,
                syn_steps_cum: 0,
                mean_return: r,
                task_return: r,
                model_loss: f64::NAN,
                ppo: PpoStats::default(),
                wall_s: 0.0,
            })
            .collect()
    }

    #[test]
    fn threshold_fixture() {
        let s = fixture(&[10.0, 21.0, 22.0], 4, 20);
        assert_eq!(steps_to_threshold(&s, 20.5).unwrap(), ThresholdSteps { reached: Some(160), capped: 160 });
        assert_eq!(steps_to_threshold(&s, 30.0).unwrap(), ThresholdSteps { reached: None, capped: 240 });
        assert_eq!(steps_to_threshold(&s, 5.0).unwrap().reached, Some(80));
        assert!(steps_to_threshold(&[], 1.0).is_err());
    }

    #[test]
    fn threshold_skips_iterations_without_episodes() {
        let s = fixture(&[f64::NAN, f64::NAN, 3.0], 1, 1);
        assert_eq!(steps_to_threshold(&s, 1.0).unwrap().reached, Some(3));
    }

    #[test]
    fn calibration_of_constant_returns() {
        let s = fixture(&[7.0; 20], 1, 1);
        assert!((calibrate_delta(&s, 0.85, 0.1).unwrap() - 0.85 * 7.0).abs() < 1e-12);
        assert!(calibrate_delta(&[], 0.85, 0.1).is_err());
        assert!(calibrate_delta(&fixture(&[f64::NAN; 3], 1, 1), 0.85, 0.1).is_err());
    }

    #[test]
    fn ablation_summary_statistics() {
        let runs = vec![
            RunSummary { rollout: 20, seed: 0, max_return: 10.0, steps_to_delta: Some(100), steps_to_delta_capped: 100 },
            RunSummary { rollout: 20, seed: 0, max_return: 10.0, steps_to_delta: Some(100), steps_to_delta_capped: 100 },
            RunSummary { rollout: 24, seed: 1, max_return: 4.0, steps_to_delta: None, steps_to_delta_capped: 500 },
        ];
        let table = summarize_ablation(runs, Some(5.0));
        assert_eq!(table.rows.len(), 2);
        let r20 = &table.rows[0];
        assert_eq!((r20.rollout, r20.runs), (20, 2));
        assert_eq!(r20.max_return_std, 0.0);
        assert_eq!(r20.steps_to_delta_std, 0.0);
        assert_eq!(r20.success_pct, 100.0);
        let r24 = &table.rows[1];
        assert_eq!(r24.success_pct, 0.0);
        assert!(r24.steps_to_delta_mean.is_nan());
        assert_eq!(r24.steps_capped_mean, 500.0);
        assert!(table.to_json().contains("\"steps_to_delta_mean\": null"));
        assert_eq!(table.to_csv().lines().count(), 3);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let s = fixture(&[1.5, f64::NAN], 2, 3);
        let text = metrics_csv(&s);
        assert!(text.starts_with(METRICS_HEADER));
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].mean_return, 1.5);
        assert!(back[1].mean_return.is_nan());
        assert_eq!(back[1].sim_steps_cum, 12);
    }

    struct Scripted {
        offset_vx: f64,
        cmd: (f64, f64),
    }

    impl TrackingSubject for Scripted {
        fn begin(&mut self, vx: f64, wz: f64, _: usize, _: usize) {
            self.cmd = (vx, wz);
        }
        fn advance(&mut self) -> Result<TrackingSample> {
            Ok(TrackingSample { vx: self.cmd.0 + self.offset_vx, wz: self.cmd.1, fell: false })
        }
    }

    #[test]
    fn scripted_heatmap() {
        let spec = HeatmapSpec::from(&HeatmapConfig::default());
        let cells = eval_tracking_heatmap(&mut Scripted { offset_vx: 0.0, cmd: (0.0, 0.0) }, &spec).unwrap();
        assert_eq!(cells.len(), 81);
        assert!(cells.iter().all(|c| c.mae_vx == 0.0 && c.mae_wz == 0.0 && c.mae_total == 0.0));
        let one = HeatmapSpec { vx: vec![0.5], wz: vec![0.0], trials: 1, warmup: 50, measure: 250 };
        let cells = eval_tracking_heatmap(&mut Scripted { offset_vx: 0.1, cmd: (0.0, 0.0) }, &one).unwrap();
        assert_eq!(cells.len(), 1);
        assert!((cells[0].mae_vx - 0.1).abs() < 1e-9);
        assert_eq!(heatmap_csv(&cells).lines().next(), Some(HEATMAP_HEADER));
    }
}

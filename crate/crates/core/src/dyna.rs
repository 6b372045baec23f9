//! Learned one-step dynamics, the synthetic-step scheduler, synthetic tail
//! generation and the merge of simulated and synthetic rollout segments.
//!
//! Each iteration the model is refit on that iteration's simulated
//! transitions only, then rolled forward from where every environment's
//! simulated segment ended. Commands are held fixed along the synthetic tail
//! and synthetic steps never terminate; the critic closes the return at the
//! model-predicted state after the last synthetic step.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{assemble_obs, Command, ACTION_DIM, OBS_DIM, PHYS_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, MlpSpec};
use crate::policy::{Actor, Critic};
use crate::ppo::RolloutBatch;
use crate::scalar::Real;

pub const MODEL_INPUT_DIM: usize = OBS_DIM + ACTION_DIM;
/// Next physical state plus reward.
pub const MODEL_OUTPUT_DIM: usize = PHYS_DIM + 1;
/// Largest synthetic extension accepted at config validation.
pub const DEFAULT_MAX_SYNTHETIC: usize = 4;
pub const STD_FLOOR: f64 = 1e-6;

/// Clamped linear ramp of the synthetic step count from `x` (at iteration
/// `a`) to `y` (at iteration `b`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub a: u64,
    pub b: u64,
    pub x: usize,
    pub y: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self::DISABLED
    }
}

impl SchedulerConfig {
    pub const DISABLED: SchedulerConfig = SchedulerConfig { a: 0, b: 0, x: 0, y: 0 };

    pub fn is_disabled(&self) -> bool {
        self.y == 0
    }

    pub fn validate(&self, rollout_len: usize, max_synthetic: usize) -> Result<()> {
        if self.b < self.a {
            return Err(Error::Config(format!("scheduler.b ({}) < scheduler.a ({})", self.b, self.a)));
        }
        if self.y < self.x {
            return Err(Error::Config(format!("scheduler.y ({}) < scheduler.x ({})", self.y, self.x)));
        }
        if self.y >= rollout_len {
            return Err(Error::Config(format!("scheduler.y ({}) must be < rollout length {rollout_len}", self.y)));
        }
        if self.y > max_synthetic {
            return Err(Error::Config(format!(
                "scheduler.y ({}) exceeds the short-horizon limit {max_synthetic}",
                self.y
            )));
        }
        Ok(())
    }
}

/// Synthetic steps for iteration `i`:
/// `round(min(max(x + (i − a)/(b − a)·(y − x), x), y))`, stepping from `x`
/// to `y` at `b` when `a == b`.
pub fn scheduler_ns(cfg: &SchedulerConfig, i: u64) -> usize {
    if cfg.b == cfg.a {
        return if i < cfg.b { cfg.x } else { cfg.y };
    }
    let (x, y) = (cfg.x as f64, cfg.y as f64);
    let ramp = x + (i as f64 - cfg.a as f64) / (cfg.b as f64 - cfg.a as f64) * (y - x);
    ramp.max(x).min(y).round() as usize
}

/// Running per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<S> {
    mean: Array1<S>,
    var: Array1<S>,
    count: f64,
}

impl<S: Real> Normalizer<S> {
    /// Mean 0, std 1, no observations yet.
    pub fn identity(dim: usize) -> Self {
        Self { mean: Array1::zeros(dim), var: Array1::ones(dim), count: 0.0 }
    }

    pub fn from_parts(mean: Array1<S>, var: Array1<S>, count: f64) -> Result<Self> {
        if mean.len() != var.len() || var.iter().any(|v| !(*v >= S::zero())) || !(count >= 0.0) {
            return Err(Error::Shape("normalizer statistics are inconsistent".into()));
        }
        Ok(Self { mean, var, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<S> {
        &self.mean
    }

    pub fn var(&self) -> &Array1<S> {
        &self.var
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn std(&self) -> Array1<S> {
        let floor = S::lit(STD_FLOOR);
        self.var.mapv(|v| v.sqrt().max(floor))
    }

    /// Merge a batch into the running statistics (parallel-variance update).
    pub fn fit(&mut self, data: ArrayView2<S>) -> Result<()> {
        if data.ncols() != self.dim() {
            return Err(Error::Shape(format!("normalizer width {} vs data {}", self.dim(), data.ncols())));
        }
        let n = data.nrows();
        if n == 0 {
            return Ok(());
        }
        let nb = S::lit(n as f64);
        let batch_mean = data.sum_axis(Axis(0)) / nb;
        let centered = &data - &batch_mean;
        let batch_var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / nb;
        if self.count == 0.0 {
            self.mean = batch_mean;
            self.var = batch_var;
        } else {
            let na = S::lit(self.count);
            let total = na + nb;
            let delta = &batch_mean - &self.mean;
            self.mean = &self.mean + &(&delta * (nb / total));
            self.var = (&self.var * na + &batch_var * nb + &delta.mapv(|d| d * d) * (na * nb / total)) / total;
        }
        self.count += n as f64;
        Ok(())
    }

    pub fn apply(&self, data: ArrayView2<S>) -> Array2<S> {
        (&data - &self.mean) / &self.std()
    }

    pub fn invert(&self, data: ArrayView2<S>) -> Array2<S> {
        &data * &self.std() + &self.mean
    }
}

/// Per-environment sequences of `{obs, action, next_state, reward, done}`.
/// Rows are laid out `[env][step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet<S> {
    pub num_envs: usize,
    pub steps: usize,
    /// `(K·M, 20)`
    pub obs: Array2<S>,
    /// Sampled actions before clamping, `(K·M, 4)`.
    pub raw_actions: Array2<S>,
    /// Actions applied to the plant or model, `(K·M, 4)`.
    pub actions: Array2<S>,
    pub log_probs: Array1<S>,
    /// Observed physical part of the next state, `(K·M, 13)`.
    pub next_state: Array2<S>,
    pub rewards: Array1<S>,
    pub dones: Vec<bool>,
    pub synthetic: Vec<bool>,
}

impl<S: Real> TransitionSet<S> {
    pub fn empty(num_envs: usize) -> Self {
        Self {
            num_envs,
            steps: 0,
            obs: Array2::zeros((0, OBS_DIM)),
            raw_actions: Array2::zeros((0, ACTION_DIM)),
            actions: Array2::zeros((0, ACTION_DIM)),
            log_probs: Array1::zeros(0),
            next_state: Array2::zeros((0, PHYS_DIM)),
            rewards: Array1::zeros(0),
            dones: Vec::new(),
            synthetic: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, env: usize, step: usize) -> usize {
        env * self.steps + step
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let n = self.len();
        if self.obs.dim() != (n, OBS_DIM)
            || self.raw_actions.dim() != (n, ACTION_DIM)
            || self.actions.dim() != (n, ACTION_DIM)
            || self.log_probs.len() != n
            || self.next_state.dim() != (n, PHYS_DIM)
            || self.rewards.len() != n
            || self.dones.len() != n
            || self.synthetic.len() != n
        {
            return Err(Error::Shape(format!(
                "transition set arrays disagree with K={}, M={}",
                self.num_envs, self.steps
            )));
        }
        Ok(())
    }

    /// Every non-terminal record's next state is the following record's state.
    pub fn check_chain(&self) -> Result<()> {
        self.validate_shapes()?;
        for e in 0..self.num_envs {
            for t in 0..self.steps.saturating_sub(1) {
                let i = self.index(e, t);
                if self.dones[i] {
                    continue;
                }
                if self.next_state.row(i) != self.obs.slice(s![i + 1, ..PHYS_DIM]) {
                    return Err(Error::ChainBreak(format!("env {e}: step {t} -> {}", t + 1)));
                }
            }
        }
        Ok(())
    }

    /// Model inputs `[obs, action]` and targets `[next_state, reward]`.
    pub fn model_pairs(&self) -> (Array2<S>, Array2<S>) {
        let inputs = concatenate![Axis(1), self.obs, self.actions];
        let rewards = self.rewards.view().insert_axis(Axis(1));
        let targets = concatenate![Axis(1), self.next_state, rewards];
        (inputs, targets)
    }
}

/// Incremental builder that collects records step-major and emits `[env][step]`.
#[derive(Debug)]
pub struct TransitionBuilder<S> {
    num_envs: usize,
    steps: Vec<StepRecords<S>>,
    synthetic: bool,
}

#[derive(Debug)]
struct StepRecords<S> {
    obs: Array2<S>,
    raw_actions: Array2<S>,
    actions: Array2<S>,
    log_probs: Array1<S>,
    next_state: Array2<S>,
    rewards: Array1<S>,
    dones: Vec<bool>,
}

impl<S: Real> TransitionBuilder<S> {
    pub fn new(num_envs: usize, synthetic: bool) -> Self {
        Self { num_envs, steps: Vec::new(), synthetic }
    }

    /// Append one step for all `K` environments.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        obs: Array2<S>,
        raw_actions: Array2<S>,
        actions: Array2<S>,
        log_probs: Array1<S>,
        next_state: Array2<S>,
        rewards: Array1<S>,
        dones: Vec<bool>,
    ) -> Result<()> {
        let k = self.num_envs;
        if obs.dim() != (k, OBS_DIM)
            || raw_actions.dim() != (k, ACTION_DIM)
            || actions.dim() != (k, ACTION_DIM)
            || log_probs.len() != k
            || next_state.dim() != (k, PHYS_DIM)
            || rewards.len() != k
            || dones.len() != k
        {
            return Err(Error::Shape(format!("step records do not cover {k} environments")));
        }
        self.steps.push(StepRecords { obs, raw_actions, actions, log_probs, next_state, rewards, dones });
        Ok(())
    }

    pub fn finish(self) -> TransitionSet<S> {
        let k = self.num_envs;
        let m = self.steps.len();
        if m == 0 {
            return TransitionSet::empty(k);
        }
        let order: Vec<(usize, usize)> = (0..k).flat_map(|e| (0..m).map(move |t| (e, t))).collect();
        let rows2 = |f: &dyn Fn(&StepRecords<S>) -> &Array2<S>, width: usize| {
            let mut out = Array2::zeros((k * m, width));
            for (r, &(e, t)) in order.iter().enumerate() {
                out.row_mut(r).assign(&f(&self.steps[t]).row(e));
            }
            out
        };
        let rows1 = |f: &dyn Fn(&StepRecords<S>) -> &Array1<S>| {
            Array1::from_iter(order.iter().map(|&(e, t)| f(&self.steps[t])[e]))
        };
        TransitionSet {
            num_envs: k,
            steps: m,
            obs: rows2(&|s| &s.obs, OBS_DIM),
            raw_actions: rows2(&|s| &s.raw_actions, ACTION_DIM),
            actions: rows2(&|s| &s.actions, ACTION_DIM),
            log_probs: rows1(&|s| &s.log_probs),
            next_state: rows2(&|s| &s.next_state, PHYS_DIM),
            rewards: rows1(&|s| &s.rewards),
            dones: order.iter().map(|&(e, t)| self.steps[t].dones[e]).collect(),
            synthetic: vec![self.synthetic; k * m],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![128; 4], activation: Activation::Elu, epochs: 10, lr: 3e-3, batch_size: 64 }
    }
}

impl ModelConfig {
    /// Reference setting: four hidden layers of 216 units, 25 epochs per iteration.
    pub fn reference() -> Self {
        Self { hidden: vec![216; 4], epochs: 25, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec().validate()?;
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("model.lr must be > 0 and model.batch_size >= 1".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec::new(MODEL_INPUT_DIM, self.hidden.clone(), MODEL_OUTPUT_DIM).with_activation(self.activation)
    }
}

/// `f_θ(obs, action) → (next physical state, reward)` with input/output normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveModel<S> {
    pub net: Mlp<S>,
    pub input_norm: Normalizer<S>,
    pub output_norm: Normalizer<S>,
    pub optimizer: Adam<S>,
    pub batch_size: usize,
}

impl<S: Real> PredictiveModel<S> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::from_net(Mlp::init(config.spec(), seed)?, config.batch_size)
    }

    pub fn from_net(net: Mlp<S>, batch_size: usize) -> Result<Self> {
        if net.spec().input_dim != MODEL_INPUT_DIM || net.spec().output_dim != MODEL_OUTPUT_DIM {
            return Err(Error::Shape(format!("predictive model must map {MODEL_INPUT_DIM} -> {MODEL_OUTPUT_DIM}")));
        }
        Ok(Self {
            net,
            input_norm: Normalizer::identity(MODEL_INPUT_DIM),
            output_norm: Normalizer::identity(MODEL_OUTPUT_DIM),
            optimizer: Adam::new(AdamConfig::default()),
            batch_size: batch_size.max(1),
        })
    }

    /// Fit normalizers on `data`, then run `epochs` passes of minibatch Adam on
    /// the per-record squared error in normalized space. Returns the mean loss
    /// over the final epoch.
    pub fn train<R: Rng + ?Sized>(&mut self, data: &TransitionSet<S>, epochs: usize, lr: f64, rng: &mut R) -> Result<S> {
        data.validate_shapes()?;
        if data.is_empty() {
            return Err(Error::Invalid("model training needs at least one transition".into()));
        }
        if data.synthetic.iter().any(|&f| f) {
            return Err(Error::Invalid("model training accepts simulated transitions only".into()));
        }
        if epochs == 0 {
            return Err(Error::Invalid("model training needs at least one epoch".into()));
        }
        let (inputs, targets) = data.model_pairs();
        self.input_norm.fit(inputs.view())?;
        self.output_norm.fit(targets.view())?;
        let x = self.input_norm.apply(inputs.view());
        let y = self.output_norm.apply(targets.view());

        let n = x.nrows();
        let lr = S::lit(lr);
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_loss = S::zero();
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut sum = S::zero();
            for idx in order.chunks(self.batch_size) {
                let xb = x.select(Axis(0), idx);
                let yb = y.select(Axis(0), idx);
                let (pred, cache) = self.net.forward(xb.view())?;
                let diff = pred - yb;
                let sq = diff.mapv(|d| d * d).sum();
                if !sq.is_finite() {
                    return Err(Error::NonFinite("predictive model loss".into()));
                }
                sum += sq;
                let scale = S::lit(2.0 / idx.len() as f64);
                let grad = diff * scale;
                let grads = self.net.backward(&cache, grad.view())?;
                self.optimizer.update(&mut self.net.slices_mut(), &grads.slices(), lr)?;
            }
            epoch_loss = sum / S::lit(n as f64);
        }
        Ok(epoch_loss)
    }

    /// Mean per-record squared error in normalized space, without updating anything.
    pub fn loss(&self, data: &TransitionSet<S>) -> Result<S> {
        let (inputs, targets) = data.model_pairs();
        let pred = self.net.predict(self.input_norm.apply(inputs.view()).view())?;
        let y = self.output_norm.apply(targets.view());
        Ok((pred - y).mapv(|d| d * d).sum() / S::lit(data.len() as f64))
    }

    /// Denormalized prediction split into next physical state and a
    /// non-negative reward.
    pub fn predict(&self, obs: ArrayView2<S>, actions: ArrayView2<S>) -> Result<(Array2<S>, Array1<S>)> {
        if obs.ncols() != OBS_DIM || actions.ncols() != ACTION_DIM || obs.nrows() != actions.nrows() {
            return Err(Error::Shape(format!("model predict: obs {:?}, actions {:?}", obs.dim(), actions.dim())));
        }
        let inputs = concatenate![Axis(1), obs, actions];
        let out = self.net.predict(self.input_norm.apply(inputs.view()).view())?;
        let out = self.output_norm.invert(out.view());
        let next = out.slice(s![.., ..PHYS_DIM]).to_owned();
        let reward = out.column(PHYS_DIM).mapv(|r| r.max(S::zero()));
        Ok((next, reward))
    }
}

/// Synthetic continuation of every environment row.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTail<S> {
    pub set: TransitionSet<S>,
    /// Observation after the last synthetic step of each row, `(K, 20)`.
    pub final_obs: Array2<S>,
}

/// Roll the model forward `n_s` steps from `tail_obs` with stochastic actions
/// from `actor`. Commands are copied from each row's starting observation.
pub fn synth_extend<S: Real, R: Rng + ?Sized>(
    model: &PredictiveModel<S>,
    actor: &Actor<S>,
    tail_obs: ArrayView2<S>,
    n_s: usize,
    rng: &mut R,
) -> Result<SyntheticTail<S>> {
    if tail_obs.ncols() != OBS_DIM || actor.mean.spec().input_dim != OBS_DIM {
        return Err(Error::Shape("synthetic rollout: observation width mismatch".into()));
    }
    let k = tail_obs.nrows();
    let commands: Vec<Command<S>> =
        tail_obs.rows().into_iter().map(|r| Command::from_obs(&r.to_vec())).collect();
    let mut builder = TransitionBuilder::new(k, true);
    let mut obs = tail_obs.to_owned();
    for _ in 0..n_s {
        let sample = actor.act(obs.view(), rng, false)?;
        let (next, rewards) = model.predict(obs.view(), sample.clamped.view())?;
        let mut next_obs = Array2::zeros((k, OBS_DIM));
        for e in 0..k {
            let row = assemble_obs(&next.row(e).to_vec(), &commands[e], &sample.clamped.row(e).to_vec());
            next_obs.row_mut(e).assign(&ArrayView1::from(&row[..]));
        }
        builder.push(obs, sample.raw, sample.clamped, sample.log_prob, next, rewards, vec![false; k])?;
        obs = next_obs;
    }
    Ok(SyntheticTail { set: builder.finish(), final_obs: obs })
}

/// Concatenate each row's simulated prefix and synthetic suffix into a
/// rollout batch of length `rollout_len`, with critic values and bootstrap.
///
/// `sim_next_obs` is the policy observation after each row's last simulated
/// step (already reset if that step ended an episode).
pub fn merge_rollouts<S: Real>(
    sim: &TransitionSet<S>,
    synthetic: Option<&SyntheticTail<S>>,
    sim_next_obs: ArrayView2<S>,
    critic: &Critic<S>,
    rollout_len: usize,
) -> Result<RolloutBatch<S>> {
    sim.check_chain()?;
    let k = sim.num_envs;
    if sim_next_obs.dim() != (k, OBS_DIM) {
        return Err(Error::Shape(format!("next observations {:?} for {k} environments", sim_next_obs.dim())));
    }
    if sim.steps > 0 {
        for e in 0..k {
            let last = sim.index(e, sim.steps - 1);
            if !sim.dones[last] && sim.next_state.row(last) != sim_next_obs.slice(s![e, ..PHYS_DIM]) {
                return Err(Error::ChainBreak(format!("env {e}: next observation does not follow last simulated step")));
            }
        }
    }
    let empty = TransitionSet::empty(k);
    let (syn, bootstrap_obs) = match synthetic {
        Some(tail) => (&tail.set, tail.final_obs.view()),
        None => (&empty, sim_next_obs),
    };
    if syn.num_envs != k {
        return Err(Error::Shape(format!("synthetic tail covers {} environments, simulated {k}", syn.num_envs)));
    }
    syn.check_chain()?;
    if syn.steps > 0 {
        for e in 0..k {
            if syn.obs.row(syn.index(e, 0)) != sim_next_obs.row(e) {
                return Err(Error::ChainBreak(format!("env {e}: synthetic tail does not start where simulation ended")));
            }
        }
        if synthetic.map(|t| t.final_obs.dim()) != Some((k, OBS_DIM)) {
            return Err(Error::Shape("synthetic final observations".into()));
        }
    }
    let n = sim.steps + syn.steps;
    if n != rollout_len {
        return Err(Error::Shape(format!("N_r + N_s = {} + {} != rollout length {rollout_len}", sim.steps, syn.steps)));
    }

    let mut obs = Array2::zeros((k * n, OBS_DIM));
    let mut actions = Array2::zeros((k * n, ACTION_DIM));
    let mut log_probs = Array1::zeros(k * n);
    let mut rewards = Array2::zeros((k, n));
    let mut dones = Array2::from_elem((k, n), false);
    let mut flags = Array2::from_elem((k, n), false);
    for e in 0..k {
        for t in 0..n {
            let (src, j, synthetic_step) = if t < sim.steps {
                (sim, sim.index(e, t), false)
            } else {
                (syn, syn.index(e, t - sim.steps), true)
            };
            let r = e * n + t;
            obs.row_mut(r).assign(&src.obs.row(j));
            actions.row_mut(r).assign(&src.raw_actions.row(j));
            log_probs[r] = src.log_probs[j];
            rewards[[e, t]] = src.rewards[j];
            dones[[e, t]] = src.dones[j];
            flags[[e, t]] = synthetic_step;
        }
    }
    let values = critic
        .value_eval(obs.view())?
        .into_shape_with_order((k, n))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let bootstrap_values = critic.value_eval(bootstrap_obs)?;
    let batch = RolloutBatch {
        num_envs: k,
        steps: n,
        obs,
        actions,
        log_probs,
        rewards,
        dones,
        values,
        synthetic: flags,
        bootstrap_values,
    };
    batch.validate()?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scheduler_reference_configs() {
        let two = SchedulerConfig { a: 0, b: 500, x: 0, y: 2 };
        assert_eq!(scheduler_ns(&two, 0), 0);
        assert_eq!(scheduler_ns(&two, 250), 1);
        assert_eq!(scheduler_ns(&two, 500), 2);
        assert_eq!(scheduler_ns(&two, 1_000_000), 2);
        let four = SchedulerConfig { a: 0, b: 500, x: 0, y: 4 };
        assert_eq!(scheduler_ns(&four, 500), 4);
        assert_eq!(scheduler_ns(&four, 1_000_000), 4);
    }

    #[test]
    fn scheduler_step_when_a_equals_b() {
        let fixed = SchedulerConfig { a: 0, b: 0, x: 2, y: 2 };
        assert_eq!(scheduler_ns(&fixed, 0), 2);
        let step = SchedulerConfig { a: 10, b: 10, x: 1, y: 3 };
        assert_eq!(scheduler_ns(&step, 9), 1);
        assert_eq!(scheduler_ns(&step, 10), 3);
    }

    #[test]
    fn scheduler_before_start_holds_x() {
        let cfg = SchedulerConfig { a: 100, b: 200, x: 1, y: 3 };
        assert_eq!(scheduler_ns(&cfg, 0), 1);
        assert_eq!(scheduler_ns(&cfg, 150), 2);
    }

    #[test]
    fn scheduler_validation() {
        assert!(SchedulerConfig { a: 5, b: 4, x: 0, y: 2 }.validate(24, 4).is_err());
        assert!(SchedulerConfig { a: 0, b: 4, x: 3, y: 2 }.validate(24, 4).is_err());
        assert!(SchedulerConfig { a: 0, b: 4, x: 0, y: 5 }.validate(24, 4).is_err());
        assert!(SchedulerConfig { a: 0, b: 4, x: 0, y: 4 }.validate(4, 4).is_err());
        SchedulerConfig { a: 0, b: 500, x: 0, y: 4 }.validate(24, 4).unwrap();
    }

    #[test]
    fn normalizer_constant_data() {
        let mut norm = Normalizer::<f64>::identity(2);
        norm.fit(Array2::from_elem((10, 2), 3.0).view()).unwrap();
        assert_eq!(norm.std(), Array1::from_elem(2, STD_FLOOR));
        assert!(norm.apply(Array2::from_elem((3, 2), 3.0).view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalizer_incremental_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array2::from_shape_simple_fn((300, 3), || rng.random_range(-2.0..5.0));
        let mut whole = Normalizer::<f64>::identity(3);
        whole.fit(data.view()).unwrap();
        let mut parts = Normalizer::<f64>::identity(3);
        for chunk in data.axis_chunks_iter(Axis(0), 70) {
            parts.fit(chunk).unwrap();
        }
        for d in 0..3 {
            assert!((whole.mean()[d] - parts.mean()[d]).abs() < 1e-12);
            assert!((whole.var()[d] - parts.var()[d]).abs() < 1e-12);
        }
        let x = data.slice(s![..5, ..]);
        let back = parts.invert(parts.apply(x).view());
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_predicts_zero_state_and_reward() {
        let model = PredictiveModel::from_net(Mlp::<f64>::zeros(ModelConfig::default().spec()).unwrap(), 8).unwrap();
        let obs = Array2::from_elem((3, OBS_DIM), 0.4);
        let acts = Array2::from_elem((3, ACTION_DIM), -0.2);
        let (next, r) = model.predict(obs.view(), acts.view()).unwrap();
        assert!(next.iter().all(|&v| v == 0.0));
        assert!(r.iter().all(|&v| v == 0.0));
        assert!(model.predict(obs.view(), Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn builder_orders_rows_by_environment() {
        let mut b = TransitionBuilder::<f64>::new(2, false);
        for t in 0..3 {
            let v = t as f64;
            b.push(
                Array2::from_shape_fn((2, OBS_DIM), |(e, _)| 10.0 * e as f64 + v),
                Array2::zeros((2, 4)),
                Array2::zeros((2, 4)),
                Array1::zeros(2),
                Array2::zeros((2, PHYS_DIM)),
                Array1::from_vec(vec![v, 10.0 + v]),
                vec![false, t == 1],
            )
            .unwrap();
        }
        let set = b.finish();
        assert_eq!(set.rewards.to_vec(), vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(set.dones, vec![false, false, false, false, true, false]);
        assert_eq!(set.obs[[4, 0]], 11.0);
    }
}

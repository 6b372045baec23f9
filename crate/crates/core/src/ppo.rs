//! Generalized advantage estimation and the clipped-surrogate update.
//!
//! Rollouts may mix simulated and synthetic steps; neither routine looks at
//! the synthetic flags, which exist only for validation and bookkeeping.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::{global_norm, Adam, MlpGrads};
use crate::policy::{Actor, Critic};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyper {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.005,
            max_grad_norm: 1.0,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        check_discount(self.gamma, self.lambda)?;
        if !(self.clip > 0.0) {
            return Err(Error::Config("ppo.clip must be > 0".into()));
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::Config("ppo.epochs and ppo.minibatches must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.max_grad_norm > 0.0) || !(self.value_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(Error::Config("ppo learning rate, coefficients and grad-norm clip must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_discount(gamma: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("gamma {gamma} and lambda {lambda} must lie in [0, 1]")));
    }
    Ok(())
}

/// `K` environments × `N` steps of on-policy data, row-major by environment.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch<S> {
    pub num_envs: usize,
    pub steps: usize,
    /// `(K·N, 20)`
    pub obs: Array2<S>,
    /// Unclamped actions, `(K·N, 4)`.
    pub actions: Array2<S>,
    pub log_probs: Array1<S>,
    /// `(K, N)`
    pub rewards: Array2<S>,
    pub dones: Array2<bool>,
    pub values: Array2<S>,
    pub synthetic: Array2<bool>,
    /// Value of the state following step `N` of each row.
    pub bootstrap_values: Array1<S>,
}

impl<S: Real> RolloutBatch<S> {
    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let (k, n) = (self.num_envs, self.steps);
        let flat = k * n;
        if k == 0 || n == 0 {
            return Err(Error::Shape("empty rollout batch".into()));
        }
        if self.obs.dim() != (flat, OBS_DIM)
            || self.actions.dim() != (flat, ACTION_DIM)
            || self.log_probs.len() != flat
            || self.rewards.dim() != (k, n)
            || self.dones.dim() != (k, n)
            || self.values.dim() != (k, n)
            || self.synthetic.dim() != (k, n)
            || self.bootstrap_values.len() != k
        {
            return Err(Error::Shape(format!("rollout arrays disagree with K={k}, N={n}")));
        }
        for (row, (flags, dones)) in self.synthetic.rows().into_iter().zip(self.dones.rows()).enumerate() {
            if !is_suffix(flags.iter().copied()) {
                return Err(Error::Invalid(format!("row {row}: synthetic steps are not a contiguous suffix")));
            }
            if flags.iter().zip(dones).any(|(&s, &d)| s && d) {
                return Err(Error::Invalid(format!("row {row}: synthetic step marked done")));
            }
        }
        Ok(())
    }

    /// Number of synthetic steps in each row.
    pub fn synthetic_counts(&self) -> Vec<usize> {
        self.synthetic.rows().into_iter().map(|r| r.iter().filter(|&&f| f).count()).collect()
    }
}

/// True when every `true` comes after every `false`.
pub fn is_suffix(flags: impl IntoIterator<Item = bool>) -> bool {
    let mut seen = false;
    for f in flags {
        if seen && !f {
            return false;
        }
        seen |= f;
    }
    true
}

/// Raw (unnormalized) advantages and value targets.
///
/// `δ_t = r_t + γ(1−d_t)V_{t+1} − V_t`, `A_t = δ_t + γλ(1−d_t)A_{t+1}`,
/// `returns = A + V`, with `V_N` taken from `bootstrap_values`.
pub fn compute_gae<S: Real>(
    rewards: ArrayView2<S>,
    values: ArrayView2<S>,
    dones: ArrayView2<bool>,
    bootstrap_values: ArrayView1<S>,
    gamma: f64,
    lambda: f64,
) -> Result<(Array2<S>, Array2<S>)> {
    check_discount(gamma, lambda)?;
    let (k, n) = rewards.dim();
    if values.dim() != (k, n) || dones.dim() != (k, n) || bootstrap_values.len() != k {
        return Err(Error::Shape(format!(
            "gae: rewards {:?}, values {:?}, dones {:?}, bootstrap {}",
            rewards.dim(),
            values.dim(),
            dones.dim(),
            bootstrap_values.len()
        )));
    }
    let gamma = S::lit(gamma);
    let gl = gamma * S::lit(lambda);
    let mut adv = Array2::zeros((k, n));
    for e in 0..k {
        let mut next_value = bootstrap_values[e];
        let mut next_adv = S::zero();
        for t in (0..n).rev() {
            let live = if dones[[e, t]] { S::zero() } else { S::one() };
            let delta = rewards[[e, t]] + gamma * live * next_value - values[[e, t]];
            next_adv = delta + gl * live * next_adv;
            adv[[e, t]] = next_adv;
            next_value = values[[e, t]];
        }
    }
    let returns = &adv + &values;
    Ok((adv, returns))
}

/// `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`
pub fn clipped_surrogate<S: Real>(ratio: S, advantage: S, clip: S) -> S {
    let clipped = ratio.max(S::one() - clip).min(S::one() + clip);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
}

/// One minibatch of flattened training rows.
#[derive(Debug, Clone)]
pub struct Minibatch<S> {
    pub obs: Array2<S>,
    pub actions: Array2<S>,
    pub old_log_probs: Array1<S>,
    pub advantages: Array1<S>,
    pub returns: Array1<S>,
}

/// Gradients of the combined PPO loss.
#[derive(Debug, Clone)]
pub struct PpoGrads<S> {
    pub actor: MlpGrads<S>,
    pub log_std: Array1<S>,
    pub critic: MlpGrads<S>,
}

impl<S: Real> PpoGrads<S> {
    fn slices(&self) -> Vec<&[S]> {
        let mut v = self.actor.slices();
        v.push(self.log_std.as_slice().expect("contiguous"));
        v.extend(self.critic.slices());
        v
    }

    fn scale(&mut self, k: S) {
        self.actor.scale(k);
        self.log_std.mapv_inplace(|v| v * k);
        self.critic.scale(k);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<S> {
    pub total: S,
    pub policy: S,
    pub value: S,
    pub entropy: S,
    pub approx_kl: S,
    pub clip_frac: S,
}

/// Loss `−mean(surrogate) + c_v·mean((V − R)²) − c_e·entropy` and its
/// exact gradient with respect to every actor and critic parameter.
pub fn loss_and_grads<S: Real>(
    actor: &Actor<S>,
    critic: &Critic<S>,
    mb: &Minibatch<S>,
    hyper: &PpoHyper,
) -> Result<(LossParts<S>, PpoGrads<S>)> {
    let b = mb.obs.nrows();
    let inv_b = S::one() / S::lit(b as f64);
    let clip = S::lit(hyper.clip);
    let (mean, cache_a) = actor.forward_train(mb.obs.view())?;
    let new_lp = actor.log_prob_given_mean(mb.actions.view(), mean.view());
    let inv_var: Vec<S> = actor.log_std.iter().map(|&ls| (-(ls + ls)).exp()).collect();

    let mut g_mean = Array2::zeros((b, ACTION_DIM));
    let mut g_log_std = Array1::zeros(ACTION_DIM);
    let mut surrogate_sum = S::zero();
    let mut kl_sum = S::zero();
    let mut clipped = 0usize;
    for i in 0..b {
        let ratio = (new_lp[i] - mb.old_log_probs[i]).exp();
        let adv = mb.advantages[i];
        let unclipped = ratio * adv;
        let obj = clipped_surrogate(ratio, adv, clip);
        surrogate_sum += obj;
        kl_sum += ratio - S::one() - ratio.ln();
        if (ratio - S::one()).abs() > clip {
            clipped += 1;
        }
        // d obj / d log π: the unclipped branch is active whenever it is the minimum.
        let d_obj = if unclipped <= obj { adv * ratio } else { S::zero() };
        let d_lp = -d_obj * inv_b;
        if d_lp != S::zero() {
            for d in 0..ACTION_DIM {
                let diff = mb.actions[[i, d]] - mean[[i, d]];
                g_mean[[i, d]] = d_lp * diff * inv_var[d];
                g_log_std[d] += d_lp * (diff * diff * inv_var[d] - S::one());
            }
        }
    }
    let entropy = actor.entropy();
    let c_e = S::lit(hyper.entropy_coef);
    g_log_std.mapv_inplace(|g| g - c_e);

    let (values, cache_c) = critic.value.forward(mb.obs.view())?;
    let c_v = S::lit(hyper.value_coef);
    let mut g_value = Array2::zeros((b, 1));
    let mut value_sum = S::zero();
    for i in 0..b {
        let err = values[[i, 0]] - mb.returns[i];
        value_sum += err * err;
        g_value[[i, 0]] = c_v * S::lit(2.0) * err * inv_b;
    }

    let policy = -surrogate_sum * inv_b;
    let value = value_sum * inv_b;
    let total = policy + c_v * value - c_e * entropy;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("ppo loss (policy {policy}, value {value})")));
    }
    let grads = PpoGrads {
        actor: actor.mean.backward(&cache_a, g_mean.view())?,
        log_std: g_log_std,
        critic: critic.value.backward(&cache_c, g_value.view())?,
    };
    let parts = LossParts {
        total,
        policy,
        value,
        entropy,
        approx_kl: kl_sum * inv_b,
        clip_frac: S::lit(clipped as f64) * inv_b,
    };
    Ok((parts, grads))
}

/// Normalize to zero mean and unit (population) standard deviation.
pub fn normalize_advantages<S: Real>(adv: &mut Array1<S>) {
    let n = S::lit(adv.len() as f64);
    let mean = adv.sum() / n;
    let var = adv.iter().map(|&a| (a - mean) * (a - mean)).sum::<S>() / n;
    let denom = var.sqrt() + S::lit(1e-8);
    adv.mapv_inplace(|a| (a - mean) / denom);
}

fn gather_rows<S: Real>(src: &Array2<S>, idx: &[usize]) -> Array2<S> {
    src.select(Axis(0), idx)
}

/// Clipped-surrogate optimisation over shuffled minibatches.
///
/// The optimizer holds the actor mean net, the log-std vector and the critic
/// as one parameter list, in that order.
pub fn ppo_update<S: Real, R: Rng + ?Sized>(
    actor: &mut Actor<S>,
    critic: &mut Critic<S>,
    optimizer: &mut Adam<S>,
    batch: &RolloutBatch<S>,
    hyper: &PpoHyper,
    rng: &mut R,
) -> Result<PpoStats> {
    hyper.validate()?;
    batch.validate()?;
    let (adv, returns) = compute_gae(
        batch.rewards.view(),
        batch.values.view(),
        batch.dones.view(),
        batch.bootstrap_values.view(),
        hyper.gamma,
        hyper.lambda,
    )?;
    let total = batch.len();
    let mut adv = adv.into_shape_with_order(total).map_err(|e| Error::Shape(e.to_string()))?;
    let returns = returns.into_shape_with_order(total).map_err(|e| Error::Shape(e.to_string()))?;
    normalize_advantages(&mut adv);

    let mb_count = hyper.minibatches.min(total);
    let mb_size = total.div_ceil(mb_count);
    let lr = S::lit(hyper.lr);
    let max_norm = S::lit(hyper.max_grad_norm);
    let mut order: Vec<usize> = (0..total).collect();
    let mut acc = PpoStats::default();
    let mut updates = 0usize;
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb_size) {
            let mb = Minibatch {
                obs: gather_rows(&batch.obs, idx),
                actions: gather_rows(&batch.actions, idx),
                old_log_probs: batch.log_probs.select(Axis(0), idx),
                advantages: adv.select(Axis(0), idx),
                returns: returns.select(Axis(0), idx),
            };
            let (parts, mut grads) = loss_and_grads(actor, critic, &mb, hyper)?;
            let norm = global_norm(&grads.slices());
            if !norm.is_finite() {
                return Err(Error::NonFinite("ppo gradient norm".into()));
            }
            if norm > max_norm {
                grads.scale(max_norm / (norm + S::lit(1e-6)));
            }
            {
                let mut params = actor.mean.slices_mut();
                params.push(actor.log_std.as_slice_mut().expect("contiguous"));
                params.extend(critic.value.slices_mut());
                optimizer.update(&mut params, &grads.slices(), lr)?;
            }
            actor.clamp_log_std();
            acc.policy_loss += parts.policy.as_f64();
            acc.value_loss += parts.value.as_f64();
            acc.entropy += parts.entropy.as_f64();
            acc.approx_kl += parts.approx_kl.as_f64();
            acc.clip_frac += parts.clip_frac.as_f64();
            acc.grad_norm += norm.as_f64();
            updates += 1;
        }
    }
    let n = updates as f64;
    Ok(PpoStats {
        policy_loss: acc.policy_loss / n,
        value_loss: acc.value_loss / n,
        entropy: acc.entropy / n,
        approx_kl: acc.approx_kl / n,
        clip_frac: acc.clip_frac / n,
        grad_norm: acc.grad_norm / n,
    })
}

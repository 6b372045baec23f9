//! Diagonal-Gaussian actor with state-independent log-std, and a value critic.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::{ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, ForwardCache, Mlp, MlpSpec};
use crate::scalar::Real;

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;

/// `½·ln(2π)`
pub fn half_log_two_pi<S: Real>() -> S {
    S::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Log density of `x` under `N(mean, exp(log_std)²)` for one dimension.
#[inline]
pub fn normal_log_density<S: Real>(x: S, mean: S, log_std: S) -> S {
    let z = (x - mean) / log_std.exp();
    -S::lit(0.5) * z * z - log_std - half_log_two_pi()
}

/// Differential entropy of one Gaussian dimension: `log_std + ½·ln(2πe)`.
#[inline]
pub fn normal_entropy<S: Real>(log_std: S) -> S {
    log_std + half_log_two_pi::<S>() + S::lit(0.5)
}

#[derive(Debug, Clone)]
pub struct ActionSample<S> {
    /// Sampled (or mean) actions before clamping; these carry `log_prob`.
    pub raw: Array2<S>,
    /// Actions clamped to `[-1, 1]` as sent to the plant.
    pub clamped: Array2<S>,
    pub log_prob: Array1<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor<S> {
    pub mean: Mlp<S>,
    pub log_std: Array1<S>,
}

impl<S: Real> Actor<S> {
    pub fn new(hidden: Vec<usize>, activation: Activation, init_log_std: f64, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(OBS_DIM, hidden, ACTION_DIM).with_activation(activation);
        let mean = Mlp::init(spec, seed)?;
        let mut actor = Self { mean, log_std: Array1::from_elem(ACTION_DIM, S::lit(init_log_std)) };
        actor.clamp_log_std();
        Ok(actor)
    }

    pub fn from_parts(mean: Mlp<S>, log_std: Array1<S>) -> Result<Self> {
        if mean.spec().input_dim != OBS_DIM || mean.spec().output_dim != ACTION_DIM || log_std.len() != ACTION_DIM {
            return Err(Error::Shape("actor must map 20 observations to 4 actions".into()));
        }
        if !log_std.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("actor log_std".into()));
        }
        let mut actor = Self { mean, log_std };
        actor.clamp_log_std();
        Ok(actor)
    }

    pub fn clamp_log_std(&mut self) {
        let (lo, hi) = (S::lit(LOG_STD_MIN), S::lit(LOG_STD_MAX));
        self.log_std.mapv_inplace(|v| v.max(lo).min(hi));
    }

    fn check_obs(obs: &ArrayView2<S>) -> Result<()> {
        if obs.ncols() != OBS_DIM {
            return Err(Error::Shape(format!("observation width {} != {OBS_DIM}", obs.ncols())));
        }
        Ok(())
    }

    pub fn mean_actions(&self, obs: ArrayView2<S>) -> Result<Array2<S>> {
        Self::check_obs(&obs)?;
        self.mean.predict(obs)
    }

    /// Draw actions. The log-probability is that of the unclamped sample.
    pub fn act<R: Rng + ?Sized>(&self, obs: ArrayView2<S>, rng: &mut R, deterministic: bool) -> Result<ActionSample<S>> {
        let mean = self.mean_actions(obs)?;
        let raw = if deterministic {
            mean.clone()
        } else {
            let std = self.log_std.mapv(|v| v.exp());
            let mut a = mean.clone();
            for mut row in a.rows_mut() {
                for (x, s) in row.iter_mut().zip(&std) {
                    let n: f64 = rng.sample(StandardNormal);
                    *x += *s * S::lit(n);
                }
            }
            a
        };
        let log_prob = self.log_prob_given_mean(raw.view(), mean.view());
        let one = S::one();
        let clamped = raw.mapv(|v| v.max(-one).min(one));
        Ok(ActionSample { raw, clamped, log_prob })
    }

    pub fn log_prob_given_mean(&self, actions: ArrayView2<S>, mean: ArrayView2<S>) -> Array1<S> {
        let mut out = Array1::zeros(actions.nrows());
        for (r, lp) in out.iter_mut().enumerate() {
            *lp = actions
                .row(r)
                .iter()
                .zip(mean.row(r))
                .zip(&self.log_std)
                .map(|((&a, &m), &ls)| normal_log_density(a, m, ls))
                .sum();
        }
        out
    }

    pub fn entropy(&self) -> S {
        self.log_std.iter().map(|&ls| normal_entropy(ls)).sum()
    }

    pub fn log_prob_entropy(&self, obs: ArrayView2<S>, actions: ArrayView2<S>) -> Result<(Array1<S>, Array1<S>)> {
        if actions.dim() != (obs.nrows(), ACTION_DIM) {
            return Err(Error::Shape(format!("actions {:?} for {} observations", actions.dim(), obs.nrows())));
        }
        let mean = self.mean_actions(obs)?;
        let lp = self.log_prob_given_mean(actions, mean.view());
        let ent = Array1::from_elem(obs.nrows(), self.entropy());
        Ok((lp, ent))
    }

    /// Mean actions plus the cache needed to backpropagate into the mean net.
    pub fn forward_train(&self, obs: ArrayView2<S>) -> Result<(Array2<S>, ForwardCache<S>)> {
        Self::check_obs(&obs)?;
        self.mean.forward(obs)
    }

    pub fn all_finite(&self) -> bool {
        self.mean.all_finite() && self.log_std.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic<S> {
    pub value: Mlp<S>,
}

impl<S: Real> Critic<S> {
    pub fn new(hidden: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(OBS_DIM, hidden, 1).with_activation(activation);
        Ok(Self { value: Mlp::init(spec, seed)? })
    }

    pub fn from_net(value: Mlp<S>) -> Result<Self> {
        if value.spec().input_dim != OBS_DIM || value.spec().output_dim != 1 {
            return Err(Error::Shape("critic must map 20 observations to 1 value".into()));
        }
        Ok(Self { value })
    }

    pub fn value_eval(&self, obs: ArrayView2<S>) -> Result<Array1<S>> {
        if obs.ncols() != OBS_DIM {
            return Err(Error::Shape(format!("observation width {} != {OBS_DIM}", obs.ncols())));
        }
        Ok(self.value.predict(obs)?.remove_axis(Axis(1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs_batch(rows: usize, seed: u64) -> Array2<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, OBS_DIM), || r.random_range(-1.0..1.0))
    }

    #[test]
    fn deterministic_act_returns_mean() {
        let actor = Actor::<f64>::new(vec![16, 16], Activation::Elu, 0.5f64.ln(), 1).unwrap();
        let obs = obs_batch(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = actor.act(obs.view(), &mut rng, true).unwrap();
        let b = actor.act(obs.view(), &mut rng, true).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.raw, actor.mean_actions(obs.view()).unwrap());
    }

    #[test]
    fn log_prob_at_mean_with_unit_std() {
        let mut actor = Actor::<f64>::new(vec![8], Activation::Elu, 0.0, 1).unwrap();
        actor.mean.layers_mut().iter_mut().for_each(|l| {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        });
        let zeros = Array2::zeros((1, 4));
        let (lp, ent) = actor.log_prob_entropy(obs_batch(1, 0).view(), zeros.view()).unwrap();
        let expect = -2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp[0] - expect).abs() < 1e-12);
        assert!((lp[0] - (-3.675754)).abs() < 1e-6);
        assert!((ent[0] - 5.675754).abs() < 1e-6);
    }

    #[test]
    fn doubling_std_adds_four_log_two() {
        let mut actor = Actor::<f64>::new(vec![8], Activation::Elu, -1.0, 1).unwrap();
        let e1 = actor.entropy();
        actor.log_std.mapv_inplace(|v| v + 2f64.ln());
        assert!((actor.entropy() - e1 - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sampled_log_prob_is_consistent_and_pre_clamp() {
        let actor = Actor::<f64>::new(vec![8], Activation::Elu, 0.5, 3).unwrap();
        let obs = obs_batch(64, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = actor.act(obs.view(), &mut rng, false).unwrap();
        let (lp, _) = actor.log_prob_entropy(obs.view(), s.raw.view()).unwrap();
        for (a, b) in lp.iter().zip(&s.log_prob) {
            assert!((a - b).abs() < 1e-12);
        }
        // std e^0.5 guarantees some samples leave [-1, 1].
        assert!(s.raw.iter().any(|v| v.abs() > 1.0));
        assert!(s.clamped.iter().all(|v| v.abs() <= 1.0));
        let (lp_clamped, _) = actor.log_prob_entropy(obs.view(), s.clamped.view()).unwrap();
        assert!(lp_clamped.iter().zip(&s.log_prob).any(|(a, b)| a != b));
    }

    #[test]
    fn sample_std_matches_log_std() {
        let actor = Actor::<f64>::new(vec![8], Activation::Elu, 0.5f64.ln(), 3).unwrap();
        let obs = Array2::from_shape_fn((10_000, OBS_DIM), |(_, c)| 0.1 * c as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = actor.act(obs.view(), &mut rng, false).unwrap();
        for d in 0..4 {
            let col = s.raw.column(d);
            let mean = col.mean().unwrap();
            let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
            assert!((std / 0.5 - 1.0).abs() < 0.05, "dim {d}: {std}");
        }
    }

    #[test]
    fn log_std_clamped() {
        let actor = Actor::<f64>::new(vec![8], Activation::Elu, 3.0, 0).unwrap();
        assert!(actor.log_std.iter().all(|&v| v == LOG_STD_MAX));
        let actor = Actor::<f64>::from_parts(actor.mean.clone(), Array1::from_elem(4, -9.0)).unwrap();
        assert!(actor.log_std.iter().all(|&v| v == LOG_STD_MIN));
    }

    #[test]
    fn bad_widths_rejected() {
        let actor = Actor::<f64>::new(vec![8], Activation::Elu, 0.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(actor.act(Array2::zeros((2, 19)).view(), &mut rng, true).is_err());
        assert!(actor.log_prob_entropy(obs_batch(2, 0).view(), Array2::zeros((2, 3)).view()).is_err());
        let mut bad = obs_batch(2, 0);
        bad[[0, 0]] = f64::NAN;
        assert!(actor.act(bad.view(), &mut rng, true).is_err());
    }

    #[test]
    fn critic_delegates_to_network() {
        let critic = Critic::<f64>::new(vec![16], Activation::Elu, 4).unwrap();
        let obs = obs_batch(5, 1);
        let v = critic.value_eval(obs.view()).unwrap();
        let raw = critic.value.predict(obs.view()).unwrap();
        for r in 0..5 {
            assert_eq!(v[r], raw[[r, 0]]);
            assert_eq!(critic.value_eval(obs.slice(ndarray::s![r..r + 1, ..])).unwrap()[0], v[r]);
        }
        let zero = Critic::from_net(Mlp::<f64>::zeros(MlpSpec::new(OBS_DIM, vec![4], 1)).unwrap()).unwrap();
        assert!(zero.value_eval(obs.view()).unwrap().iter().all(|&x| x == 0.0));
    }
}

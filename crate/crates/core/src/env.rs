//! Planar quadruped surrogate.
//!
//! Four abstract joints track position targets through a PD law; joint
//! velocity drives the body's planar velocity and yaw rate through fixed
//! mixing matrices, and body velocity feeds a first-order tilt signal that
//! stands in for projected gravity. Integration is semi-implicit Euler.
//!
//! The tracking reward is `r = r_task · exp(σ_aux · r_aux)` with
//! `r_task ∈ (0, 1]` and `r_aux ≤ 0`, so every reward lies in `[0, r_task]`.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const NUM_JOINTS: usize = 4;
pub const ACTION_DIM: usize = NUM_JOINTS;
/// `q, q̇, g, v, ω`.
pub const PHYS_DIM: usize = 4 + 4 + 2 + 2 + 1;
pub const COMMAND_DIM: usize = 3;
/// Physical state, command, previous action.
pub const OBS_DIM: usize = PHYS_DIM + COMMAND_DIM + ACTION_DIM;

/// Offsets into the observation vector.
pub mod layout {
    pub const Q: usize = 0;
    pub const QD: usize = 4;
    pub const G: usize = 8;
    pub const V: usize = 10;
    pub const W: usize = 12;
    pub const CMD: usize = 13;
    pub const PREV_ACTION: usize = 16;
}

/// Joint-velocity to body-acceleration mixing, drawn once from seed 0,
/// entries uniform in [-0.5, 0.5], rounded to four decimals.
pub const DEFAULT_MIX_LIN: [[f64; 4]; 2] = [[0.1370, -0.2302, -0.4590, -0.4835], [0.3133, 0.4128, 0.1066, 0.2295]];
pub const DEFAULT_MIX_YAW: [f64; 4] = [0.0436, 0.4351, 0.3159, -0.4973];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvParams<S> {
    pub dt: S,
    pub kp: S,
    pub kd: S,
    pub joint_damping: S,
    pub mix_lin: [[S; 4]; 2],
    pub mix_yaw: [S; 4],
    pub lin_damping: S,
    pub yaw_damping: S,
    pub tilt_coupling: S,
    pub tilt_relaxation: S,
    pub tilt_limit: S,
    pub episode_len: usize,
    pub obs_noise_std: S,
    pub reset_noise_std: S,
    pub vx_range: [S; 2],
    pub vy_range: [S; 2],
    pub wz_range: [S; 2],
    pub w_lin: S,
    pub w_ang: S,
    pub sigma_lin: S,
    pub sigma_ang: S,
    pub c_rate: S,
    pub c_qd: S,
    pub c_tilt: S,
    pub sigma_aux: S,
}

impl Default for EnvParams<f64> {
    fn default() -> Self {
        Self {
            dt: 0.02,
            kp: 20.0,
            kd: 0.5,
            joint_damping: 0.1,
            mix_lin: DEFAULT_MIX_LIN,
            mix_yaw: DEFAULT_MIX_YAW,
            lin_damping: 1.0,
            yaw_damping: 1.0,
            tilt_coupling: 0.05,
            tilt_relaxation: 2.0,
            tilt_limit: 1.0,
            episode_len: 300,
            obs_noise_std: 0.0,
            reset_noise_std: 0.01,
            vx_range: [-1.0, 1.0],
            vy_range: [-0.6, 0.6],
            wz_range: [-1.0, 1.0],
            w_lin: 0.7,
            w_ang: 0.3,
            sigma_lin: 0.25,
            sigma_ang: 0.25,
            c_rate: 0.05,
            c_qd: 0.001,
            c_tilt: 0.1,
            sigma_aux: 1.0,
        }
    }
}

impl<S: Real> EnvParams<S> {
    pub fn cast<T: Real>(&self) -> EnvParams<T> {
        let c = |x: S| T::lit(x.as_f64());
        let c2 = |x: [S; 2]| x.map(c);
        let c4 = |x: [S; 4]| x.map(c);
        EnvParams {
            dt: c(self.dt),
            kp: c(self.kp),
            kd: c(self.kd),
            joint_damping: c(self.joint_damping),
            mix_lin: self.mix_lin.map(c4),
            mix_yaw: c4(self.mix_yaw),
            lin_damping: c(self.lin_damping),
            yaw_damping: c(self.yaw_damping),
            tilt_coupling: c(self.tilt_coupling),
            tilt_relaxation: c(self.tilt_relaxation),
            tilt_limit: c(self.tilt_limit),
            episode_len: self.episode_len,
            obs_noise_std: c(self.obs_noise_std),
            reset_noise_std: c(self.reset_noise_std),
            vx_range: c2(self.vx_range),
            vy_range: c2(self.vy_range),
            wz_range: c2(self.wz_range),
            w_lin: c(self.w_lin),
            w_ang: c(self.w_ang),
            sigma_lin: c(self.sigma_lin),
            sigma_ang: c(self.sigma_ang),
            c_rate: c(self.c_rate),
            c_qd: c(self.c_qd),
            c_tilt: c(self.c_tilt),
            sigma_aux: c(self.sigma_aux),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("kp", self.kp),
            ("kd", self.kd),
            ("joint_damping", self.joint_damping),
            ("lin_damping", self.lin_damping),
            ("yaw_damping", self.yaw_damping),
            ("tilt_relaxation", self.tilt_relaxation),
            ("tilt_limit", self.tilt_limit),
            ("sigma_lin", self.sigma_lin),
            ("sigma_ang", self.sigma_ang),
            ("sigma_aux", self.sigma_aux),
        ];
        for (name, v) in positive {
            if !(v > S::zero() && v.is_finite()) {
                return Err(Error::Config(format!("env.{name} must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("tilt_coupling", self.tilt_coupling),
            ("obs_noise_std", self.obs_noise_std),
            ("reset_noise_std", self.reset_noise_std),
            ("w_lin", self.w_lin),
            ("w_ang", self.w_ang),
            ("c_rate", self.c_rate),
            ("c_qd", self.c_qd),
            ("c_tilt", self.c_tilt),
        ];
        for (name, v) in non_negative {
            if !(v >= S::zero() && v.is_finite()) {
                return Err(Error::Config(format!("env.{name} must be >= 0, got {v}")));
            }
        }
        if (self.w_lin + self.w_ang - S::one()).abs() > S::lit(1e-9) {
            return Err(Error::Config("env.w_lin + env.w_ang must equal 1".into()));
        }
        if self.episode_len == 0 {
            return Err(Error::Config("env.episode_len must be >= 1".into()));
        }
        for (name, r) in [("vx_range", self.vx_range), ("vy_range", self.vy_range), ("wz_range", self.wz_range)] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::Config(format!("env.{name} must be an ordered finite interval")));
            }
        }
        if self.mix_lin.iter().flatten().chain(&self.mix_yaw).any(|v| !v.is_finite()) {
            return Err(Error::Config("env mixing matrices must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command<S> {
    pub vx: S,
    pub vy: S,
    pub wz: S,
}

impl<S: Real> Command<S> {
    pub fn new(vx: S, vy: S, wz: S) -> Self {
        Self { vx, vy, wz }
    }

    pub fn zero() -> Self {
        Self::new(S::zero(), S::zero(), S::zero())
    }

    pub fn as_array(&self) -> [S; 3] {
        [self.vx, self.vy, self.wz]
    }

    pub fn from_obs(obs: &[S]) -> Self {
        let c = &obs[layout::CMD..layout::CMD + 3];
        Self::new(c[0], c[1], c[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState<S> {
    pub q: [S; 4],
    pub qd: [S; 4],
    pub g: [S; 2],
    pub v: [S; 2],
    pub w: S,
    pub prev_action: [S; 4],
    pub step_index: usize,
}

impl<S: Real> EnvState<S> {
    pub fn zero() -> Self {
        let z = S::zero();
        Self { q: [z; 4], qd: [z; 4], g: [z; 2], v: [z; 2], w: z, prev_action: [z; 4], step_index: 0 }
    }

    pub fn physical(&self) -> [S; PHYS_DIM] {
        let mut out = [S::zero(); PHYS_DIM];
        out[layout::Q..layout::Q + 4].copy_from_slice(&self.q);
        out[layout::QD..layout::QD + 4].copy_from_slice(&self.qd);
        out[layout::G..layout::G + 2].copy_from_slice(&self.g);
        out[layout::V..layout::V + 2].copy_from_slice(&self.v);
        out[layout::W] = self.w;
        out
    }

    pub fn tilt_exceeds(&self, limit: S) -> bool {
        self.g.iter().any(|x| x.abs() > limit)
    }

    pub fn is_terminal(&self, params: &EnvParams<S>) -> bool {
        self.step_index >= params.episode_len || self.tilt_exceeds(params.tilt_limit)
    }

    pub fn all_finite(&self) -> bool {
        self.physical().iter().chain(&self.prev_action).all(|v| v.is_finite())
    }
}

/// Policy input: `[q, q̇, g, v, ω, command, prev_action]`.
pub fn observe<S: Real>(state: &EnvState<S>, command: &Command<S>) -> [S; OBS_DIM] {
    let mut obs = [S::zero(); OBS_DIM];
    obs[..PHYS_DIM].copy_from_slice(&state.physical());
    obs[layout::CMD..layout::CMD + 3].copy_from_slice(&command.as_array());
    obs[layout::PREV_ACTION..].copy_from_slice(&state.prev_action);
    obs
}

/// Assemble an observation from a (possibly predicted) physical state.
pub fn assemble_obs<S: Real>(physical: &[S], command: &Command<S>, prev_action: &[S]) -> [S; OBS_DIM] {
    let mut obs = [S::zero(); OBS_DIM];
    obs[..PHYS_DIM].copy_from_slice(&physical[..PHYS_DIM]);
    obs[layout::CMD..layout::CMD + 3].copy_from_slice(&command.as_array());
    obs[layout::PREV_ACTION..].copy_from_slice(&prev_action[..ACTION_DIM]);
    obs
}

fn observe_noisy<S: Real, R: Rng + ?Sized>(
    state: &EnvState<S>,
    command: &Command<S>,
    noise_std: S,
    rng: &mut R,
) -> [S; OBS_DIM] {
    let mut obs = observe(state, command);
    if noise_std > S::zero() {
        for x in &mut obs[..PHYS_DIM] {
            let n: f64 = rng.sample(StandardNormal);
            *x += noise_std * S::lit(n);
        }
    }
    obs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoneReason {
    Timeout,
    Fall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<S> {
    pub next_state: EnvState<S>,
    pub obs: [S; OBS_DIM],
    pub reward: S,
    pub reward_task: S,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

/// Command-tracking reward in `(0, 1]` evaluated on the post-step state.
pub fn reward_task<S: Real>(state: &EnvState<S>, command: &Command<S>, params: &EnvParams<S>) -> S {
    let ex = command.vx - state.v[0];
    let ey = command.vy - state.v[1];
    let ew = command.wz - state.w;
    params.w_lin * (-(ex * ex + ey * ey) / params.sigma_lin).exp() + params.w_ang * (-(ew * ew) / params.sigma_ang).exp()
}

/// Non-positive penalty on action rate, joint speed and tilt.
pub fn reward_aux<S: Real>(next: &EnvState<S>, action: &[S; 4], prev_action: &[S; 4], params: &EnvParams<S>) -> S {
    let rate: S = action.iter().zip(prev_action).map(|(a, p)| (*a - *p) * (*a - *p)).sum();
    let qd: S = next.qd.iter().map(|x| *x * *x).sum();
    let tilt: S = next.g.iter().map(|x| *x * *x).sum();
    -(params.c_rate * rate + params.c_qd * qd + params.c_tilt * tilt)
}

/// `r_task · exp(σ_aux · r_aux)`; penalties must be non-positive.
pub fn reward_compose<S: Real>(r_task: S, r_aux: S, sigma_aux: S) -> Result<S> {
    if r_aux > S::zero() {
        return Err(Error::Invalid(format!("auxiliary reward must be <= 0, got {r_aux}")));
    }
    if !(sigma_aux > S::zero()) {
        return Err(Error::Invalid(format!("sigma_aux must be > 0, got {sigma_aux}")));
    }
    if r_task < S::zero() {
        return Err(Error::Invalid(format!("task reward must be >= 0, got {r_task}")));
    }
    Ok(r_task * (sigma_aux * r_aux).exp())
}

fn sample_range<S: Real, R: Rng + ?Sized>(range: [S; 2], rng: &mut R) -> S {
    // One draw per call regardless of width keeps the stream aligned.
    let u: f64 = rng.random();
    range[0] + (range[1] - range[0]) * S::lit(u)
}

pub fn sample_command<S: Real, R: Rng + ?Sized>(params: &EnvParams<S>, rng: &mut R) -> Command<S> {
    Command::new(
        sample_range(params.vx_range, rng),
        sample_range(params.vy_range, rng),
        sample_range(params.wz_range, rng),
    )
}

/// Fresh episode: near-zero state, uniformly sampled command, zero previous action.
pub fn env_reset<S: Real, R: Rng + ?Sized>(
    params: &EnvParams<S>,
    rng: &mut R,
) -> (EnvState<S>, Command<S>, [S; OBS_DIM]) {
    let mut state = EnvState::zero();
    let std = params.reset_noise_std;
    let mut perturb = |x: &mut S| {
        let n: f64 = rng.sample(StandardNormal);
        *x = std * S::lit(n);
    };
    state.q.iter_mut().for_each(&mut perturb);
    state.qd.iter_mut().for_each(&mut perturb);
    state.g.iter_mut().for_each(&mut perturb);
    state.v.iter_mut().for_each(&mut perturb);
    perturb(&mut state.w);
    let command = sample_command(params, rng);
    let obs = observe_noisy(&state, &command, params.obs_noise_std, rng);
    (state, command, obs)
}

/// Advance one control step. The returned observation belongs to `next_state`;
/// the caller resets terminal states.
pub fn env_step<S: Real, R: Rng + ?Sized>(
    params: &EnvParams<S>,
    state: &EnvState<S>,
    command: &Command<S>,
    action: &[S; 4],
    rng: &mut R,
) -> Result<StepResult<S>> {
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("action {action:?}")));
    }
    if state.is_terminal(params) {
        return Err(Error::Invalid("cannot step a terminal state; reset first".into()));
    }
    let dt = params.dt;
    let mut next = *state;
    for j in 0..NUM_JOINTS {
        let qdd = params.kp * (action[j] - state.q[j]) - (params.kd + params.joint_damping) * state.qd[j];
        next.qd[j] = state.qd[j] + dt * qdd;
        next.q[j] = state.q[j] + dt * next.qd[j];
    }
    for (axis, row) in params.mix_lin.iter().enumerate() {
        let drive: S = row.iter().zip(&next.qd).map(|(m, x)| *m * *x).sum();
        next.v[axis] = state.v[axis] + dt * (drive - params.lin_damping * state.v[axis]);
    }
    let yaw_drive: S = params.mix_yaw.iter().zip(&next.qd).map(|(m, x)| *m * *x).sum();
    next.w = state.w + dt * (yaw_drive - params.yaw_damping * state.w);
    for axis in 0..2 {
        next.g[axis] = state.g[axis] + dt * (params.tilt_coupling * next.v[axis] - params.tilt_relaxation * state.g[axis]);
    }
    next.prev_action = *action;
    next.step_index = state.step_index + 1;

    let r_task = reward_task(&next, command, params);
    let r_aux = reward_aux(&next, action, &state.prev_action, params);
    let reward = reward_compose(r_task, r_aux, params.sigma_aux)?;

    let done_reason = if next.tilt_exceeds(params.tilt_limit) {
        Some(DoneReason::Fall)
    } else if next.step_index >= params.episode_len {
        Some(DoneReason::Timeout)
    } else {
        None
    };
    if !next.all_finite() {
        return Err(Error::NonFinite("environment state diverged".into()));
    }
    let obs = observe_noisy(&next, command, params.obs_noise_std, rng);
    Ok(StepResult { next_state: next, obs, reward, reward_task: r_task, done: done_reason.is_some(), done_reason })
}

/// One environment's step inside a vectorized batch.
#[derive(Debug, Clone, PartialEq)]
pub struct VecStep<S> {
    /// Step outcome; `result.obs` observes the pre-reset next state.
    pub result: StepResult<S>,
    /// Observation of the freshly reset episode when `result.done`.
    pub reset_obs: Option<[S; OBS_DIM]>,
}

impl<S: Real> VecStep<S> {
    /// Observation the policy sees next.
    pub fn next_policy_obs(&self) -> &[S; OBS_DIM] {
        self.reset_obs.as_ref().unwrap_or(&self.result.obs)
    }
}

/// Elementwise [`env_step`] with auto-reset. Environment `k` draws only from
/// `rngs[k]`, so results do not depend on evaluation order.
pub fn vector_env_step<S: Real, R: Rng>(
    params: &EnvParams<S>,
    states: &mut [EnvState<S>],
    commands: &mut [Command<S>],
    rngs: &mut [R],
    actions: ArrayView2<S>,
) -> Result<Vec<VecStep<S>>> {
    let k = states.len();
    if k == 0 || commands.len() != k || rngs.len() != k || actions.dim() != (k, ACTION_DIM) {
        return Err(Error::Shape(format!(
            "vector step: {k} states, {} commands, {} rngs, actions {:?}",
            commands.len(),
            rngs.len(),
            actions.dim()
        )));
    }
    let mut out = Vec::with_capacity(k);
    for e in 0..k {
        let row = actions.row(e);
        let action = [row[0], row[1], row[2], row[3]];
        let result = env_step(params, &states[e], &commands[e], &action, &mut rngs[e])?;
        let reset_obs = if result.done {
            let (s, c, o) = env_reset(params, &mut rngs[e]);
            states[e] = s;
            commands[e] = c;
            Some(o)
        } else {
            states[e] = result.next_state;
            None
        };
        out.push(VecStep { result, reset_obs });
    }
    Ok(out)
}

/// `K` independent surrogate environments with per-environment RNG streams.
#[derive(Debug, Clone)]
pub struct VecEnv<S> {
    params: EnvParams<S>,
    states: Vec<EnvState<S>>,
    commands: Vec<Command<S>>,
    rngs: Vec<ChaCha8Rng>,
    obs: Array2<S>,
}

impl<S: Real> VecEnv<S> {
    pub fn new(params: EnvParams<S>, num_envs: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        if num_envs == 0 {
            return Err(Error::Config("need at least one environment".into()));
        }
        let mut rngs: Vec<ChaCha8Rng> = (0..num_envs)
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(k as u64);
                r
            })
            .collect();
        let mut states = Vec::with_capacity(num_envs);
        let mut commands = Vec::with_capacity(num_envs);
        let mut obs = Array2::zeros((num_envs, OBS_DIM));
        for (k, rng) in rngs.iter_mut().enumerate() {
            let (s, c, o) = env_reset(&params, rng);
            states.push(s);
            commands.push(c);
            obs.row_mut(k).assign(&ndarray::ArrayView1::from(&o[..]));
        }
        Ok(Self { params, states, commands, rngs, obs })
    }

    /// Start every environment at a random point of its first episode so that
    /// episode boundaries are spread across iterations.
    pub fn randomize_episode_phase(&mut self) {
        let len = self.params.episode_len;
        for (s, rng) in self.states.iter_mut().zip(&mut self.rngs) {
            s.step_index = rng.random_range(0..len);
        }
    }

    pub fn params(&self) -> &EnvParams<S> {
        &self.params
    }

    pub fn num_envs(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[EnvState<S>] {
        &self.states
    }

    pub fn commands(&self) -> &[Command<S>] {
        &self.commands
    }

    pub fn observations(&self) -> ArrayView2<'_, S> {
        self.obs.view()
    }

    pub fn step(&mut self, actions: ArrayView2<S>) -> Result<Vec<VecStep<S>>> {
        let steps = vector_env_step(&self.params, &mut self.states, &mut self.commands, &mut self.rngs, actions)?;
        for (k, s) in steps.iter().enumerate() {
            self.obs.row_mut(k).assign(&ndarray::ArrayView1::from(&s.next_policy_obs()[..]));
        }
        Ok(steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_state(r: &mut ChaCha8Rng) -> EnvState<f64> {
        let mut u = |s: f64| r.random_range(-s..s);
        EnvState {
            q: [u(1.0), u(1.0), u(1.0), u(1.0)],
            qd: [u(2.0), u(2.0), u(2.0), u(2.0)],
            g: [u(0.3), u(0.3)],
            v: [u(1.0), u(1.0)],
            w: u(1.0),
            prev_action: [u(1.0), u(1.0), u(1.0), u(1.0)],
            step_index: 10,
        }
    }

    /// Plain-loop semi-implicit Euler written against the equations directly.
    fn reference_step(p: &EnvParams<f64>, s: &EnvState<f64>, a: &[f64; 4]) -> EnvState<f64> {
        let mut qd = [0.0; 4];
        let mut q = [0.0; 4];
        for j in 0..4 {
            let acc = p.kp * (a[j] - s.q[j]) - p.kd * s.qd[j] - p.joint_damping * s.qd[j];
            qd[j] = s.qd[j] + p.dt * acc;
            q[j] = s.q[j] + p.dt * qd[j];
        }
        let mut v = [0.0; 2];
        for i in 0..2 {
            let mut drive = 0.0;
            for j in 0..4 {
                drive += p.mix_lin[i][j] * qd[j];
            }
            v[i] = s.v[i] + p.dt * (drive - p.lin_damping * s.v[i]);
        }
        let mut drive = 0.0;
        for j in 0..4 {
            drive += p.mix_yaw[j] * qd[j];
        }
        let w = s.w + p.dt * (drive - p.yaw_damping * s.w);
        let mut g = [0.0; 2];
        for i in 0..2 {
            g[i] = s.g[i] + p.dt * (p.tilt_coupling * v[i] - p.tilt_relaxation * s.g[i]);
        }
        EnvState { q, qd, g, v, w, prev_action: *a, step_index: s.step_index + 1 }
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || a == b
    }

    #[test]
    fn default_params_validate() {
        EnvParams::default().validate().unwrap();
        let mut p = EnvParams::default();
        p.dt = 0.0;
        assert!(p.validate().is_err());
        let mut p = EnvParams::default();
        p.w_lin = 0.9;
        assert!(p.validate().is_err());
    }

    #[test]
    fn reset_without_noise_is_exactly_zero() {
        let mut p = EnvParams::default();
        p.reset_noise_std = 0.0;
        let (s, _, obs) = env_reset(&p, &mut rng(3));
        assert!(s.physical().iter().all(|&x| x == 0.0));
        assert!(obs[..PHYS_DIM].iter().all(|&x| x == 0.0));
        assert_eq!(s.prev_action, [0.0; 4]);
    }

    #[test]
    fn reset_is_seeded() {
        let p = EnvParams::default();
        let a = env_reset(&p, &mut rng(5));
        let b = env_reset(&p, &mut rng(5));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(a.1, env_reset(&p, &mut rng(6)).1);
    }

    #[test]
    fn command_sampler_covers_range() {
        let p = EnvParams::default();
        let mut r = rng(11);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_command(&p, &mut r).vx).collect();
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!(min >= -1.0 && max <= 1.0);
        assert!(min < -0.99 && max > 0.99);
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let p = EnvParams::default();
        let s = EnvState::zero();
        let out = env_step(&p, &s, &Command::zero(), &[0.0; 4], &mut rng(0)).unwrap();
        assert!(out.next_state.physical().iter().all(|&x| x == 0.0));
        assert_eq!(out.reward_task, p.w_lin + p.w_ang);
        assert_eq!(out.reward, 1.0);
        assert!(!out.done);
    }

    #[test]
    fn step_matches_reference_integrator() {
        let p = EnvParams::default();
        let mut r = rng(21);
        for _ in 0..200 {
            let s = random_state(&mut r);
            let a = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let cmd = sample_command(&p, &mut r);
            let out = env_step(&p, &s, &cmd, &a, &mut rng(0)).unwrap();
            let expect = reference_step(&p, &s, &a);
            for (x, y) in out.next_state.physical().iter().zip(expect.physical().iter()) {
                assert!(close(*x, *y, 1e-12), "{x} vs {y}");
            }
            assert_eq!(out.next_state.prev_action, a);
            assert_eq!(out.next_state.step_index, 11);
        }
    }

    #[test]
    fn tilt_beyond_limit_falls() {
        let p = EnvParams::default();
        let mut s = EnvState::zero();
        s.g = [0.99 * p.tilt_limit, 0.0];
        s.v = [560.8, 0.0];
        let out = env_step(&p, &s, &Command::zero(), &[0.0; 4], &mut rng(0)).unwrap();
        // v' = 0.98 v, g' = 0.99 + 0.02 * (0.05 v' - 2 * 0.99) ~= 1.5 g_max
        assert!((out.next_state.g[0] - 1.5).abs() < 0.01, "{}", out.next_state.g[0]);
        assert!(out.done);
        assert_eq!(out.done_reason, Some(DoneReason::Fall));

        let mut fallen = EnvState::zero();
        fallen.g = [0.0, -1.5 * p.tilt_limit];
        assert!(fallen.is_terminal(&p));
        assert!(env_step(&p, &fallen, &Command::zero(), &[0.0; 4], &mut rng(0)).is_err());
        let mut timed_out = EnvState::zero();
        timed_out.step_index = p.episode_len;
        assert!(env_step(&p, &timed_out, &Command::zero(), &[0.0; 4], &mut rng(0)).is_err());
    }

    #[test]
    fn timeout_at_episode_length() {
        let p = EnvParams::default();
        let mut s = EnvState::zero();
        s.step_index = p.episode_len - 1;
        let out = env_step(&p, &s, &Command::zero(), &[0.0; 4], &mut rng(0)).unwrap();
        assert_eq!(out.done_reason, Some(DoneReason::Timeout));
    }

    #[test]
    fn non_finite_action_rejected() {
        let p = EnvParams::default();
        let err = env_step(&p, &EnvState::zero(), &Command::zero(), &[f64::NAN, 0.0, 0.0, 0.0], &mut rng(0)).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn task_reward_values() {
        let p = EnvParams::default();
        let mut s = EnvState::zero();
        s.v = [0.3, -0.2];
        s.w = 0.4;
        assert_eq!(reward_task(&s, &Command::new(0.3, -0.2, 0.4), &p), 1.0);

        let mut p2 = p.clone();
        p2.w_lin = 0.5;
        p2.w_ang = 0.5;
        let r = reward_task(&EnvState::zero(), &Command::new(1.0, 0.0, 0.0), &p2);
        assert!((r - (0.5 * (-4.0f64).exp() + 0.5)).abs() < 1e-12);
        assert!((r - 0.509157).abs() < 1e-6);
    }

    #[test]
    fn reward_compose_values() {
        assert_eq!(reward_compose(2.0f64, 0.0, 1.0).unwrap(), 2.0);
        assert!((reward_compose(1.0f64, -1.0, 0.5).unwrap() - 0.606531).abs() < 1e-6);
        assert!(reward_compose(1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn single_env_vector_step_equals_scalar_path() {
        let p = EnvParams::default();
        let mut r = rng(2);
        let (s0, c0, _) = env_reset(&p, &mut r);
        let mut states = vec![s0];
        let mut cmds = vec![c0];
        let mut rngs = vec![rng(9)];
        let mut scalar_rng = rng(9);
        let mut s = s0;
        let mut c = c0;
        for t in 0..700 {
            let a = [0.5 * ((t as f64) * 0.1).sin(), -0.3, 0.2, 0.9];
            let actions = Array2::from_shape_vec((1, 4), a.to_vec()).unwrap();
            let v = vector_env_step(&p, &mut states, &mut cmds, &mut rngs, actions.view()).unwrap();
            let expect = env_step(&p, &s, &c, &a, &mut scalar_rng).unwrap();
            assert_eq!(v[0].result, expect);
            if expect.done {
                let (s2, c2, o2) = env_reset(&p, &mut scalar_rng);
                assert_eq!(v[0].reset_obs, Some(o2));
                s = s2;
                c = c2;
            } else {
                assert!(v[0].reset_obs.is_none());
                s = expect.next_state;
            }
            assert_eq!(states[0], s);
        }
    }

    #[test]
    fn duplicated_envs_stay_identical() {
        let p = EnvParams::default();
        let (s, c, _) = env_reset(&p, &mut rng(1));
        let mut states = vec![s; 8];
        let mut cmds = vec![c; 8];
        let mut rngs = vec![rng(4); 8];
        let actions = Array2::from_elem((8, 4), 0.3);
        for _ in 0..400 {
            let out = vector_env_step(&p, &mut states, &mut cmds, &mut rngs, actions.view()).unwrap();
            assert!(out.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn vector_step_rejects_length_mismatch() {
        let p = EnvParams::default();
        let mut states = vec![EnvState::zero(); 2];
        let mut cmds = vec![Command::zero(); 2];
        let mut rngs = vec![rng(0); 2];
        let actions = Array2::zeros((3, 4));
        assert!(vector_env_step(&p, &mut states, &mut cmds, &mut rngs, actions.view()).is_err());
    }

    #[test]
    fn observation_layout() {
        let mut s = EnvState::<f64>::zero();
        s.q = [1.0, 2.0, 3.0, 4.0];
        s.w = 13.0;
        s.prev_action = [17.0, 18.0, 19.0, 20.0];
        let o = observe(&s, &Command::new(14.0, 15.0, 16.0));
        assert_eq!(o.len(), 20);
        assert_eq!(&o[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(o[layout::W], 13.0);
        assert_eq!(&o[13..16], &[14.0, 15.0, 16.0]);
        assert_eq!(&o[16..], &[17.0, 18.0, 19.0, 20.0]);
        assert_eq!(assemble_obs(&s.physical(), &Command::new(14.0, 15.0, 16.0), &s.prev_action), o);
    }

    #[test]
    fn observation_noise_perturbs_only_physical_part() {
        let mut p = EnvParams::default();
        p.obs_noise_std = 0.1;
        let out = env_step(&p, &EnvState::zero(), &Command::new(0.5, 0.0, 0.0), &[0.1; 4], &mut rng(3)).unwrap();
        let clean = observe(&out.next_state, &Command::new(0.5, 0.0, 0.0));
        assert_ne!(&out.obs[..PHYS_DIM], &clean[..PHYS_DIM]);
        assert_eq!(&out.obs[PHYS_DIM..], &clean[PHYS_DIM..]);
    }
}

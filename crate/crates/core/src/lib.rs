//! Dyna-style rollout augmentation for on-policy locomotion-command tracking.
//!
//! A clipped-surrogate policy is trained on a planar legged-robot surrogate
//! while a one-step dynamics model, learned alongside it, appends a scheduled
//! number of synthetic steps to the tail of every rollout. The rollout length
//! `N = N_r + N_s` stays fixed; only the simulated/synthetic split changes.
//!
//! All numerical code is generic over the scalar type (see [`Real`]); the
//! `*64` / `*32` aliases below pick a concrete precision. The experiment
//! harness and the on-disk formats use `f64` throughout.

pub mod checkpoint;
pub mod config;
pub mod dyna;
pub mod env;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Mlp64 = nn::Mlp<f64>;
pub type Mlp32 = nn::Mlp<f32>;
pub type Adam64 = nn::Adam<f64>;
pub type EnvParams64 = env::EnvParams<f64>;
pub type EnvState64 = env::EnvState<f64>;
pub type VecEnv64 = env::VecEnv<f64>;
pub type Actor64 = policy::Actor<f64>;
pub type Critic64 = policy::Critic<f64>;
pub type Actor32 = policy::Actor<f32>;
pub type RolloutBatch64 = ppo::RolloutBatch<f64>;
pub type PredictiveModel64 = dyna::PredictiveModel<f64>;
pub type PredictiveModel32 = dyna::PredictiveModel<f32>;
pub type TransitionSet64 = dyna::TransitionSet<f64>;

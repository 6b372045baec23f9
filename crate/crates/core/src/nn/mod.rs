//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! Batches are row-major `(batch, features)` matrices. Layer weights are
//! stored `(out_dim, in_dim)`. Gradients are summed over the batch; callers
//! that want a mean loss scale `grad_output` by `1 / batch`.

mod adam;
mod mlp;

pub use adam::{global_norm, Adam, AdamConfig};
pub use mlp::{Activation, Dense, ForwardCache, Mlp, MlpGrads, MlpSpec};

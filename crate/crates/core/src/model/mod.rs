//! Dense embeddings, small CTR models with hand-derived gradients, Adam, and
//! the mini-batch training loop shared by both pipeline stages.

mod adam;
mod checkpoint;
mod ctr;
mod embedding;
mod train;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use ctr::{fm_pairwise, CtrModel, ModelKind, ModelShape, QuantizedLookup, Workspace};
pub use embedding::{embed_lookup, EmbeddingTable, Matrix, NumericMap};
pub use train::{batch_gradient, train_epochs, EpochMetrics, TrainConfig, TrainOutcome};
pub(crate) use train::predict_parallel;

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy (natural log) of a clamped probability.
#[inline]
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

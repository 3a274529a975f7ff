//! Product quantization of a frozen embedding space.
//!
//! Codewords are stored flat as `[(group * m + i) * k + code] * sub_dim`, the
//! same layout the quantized CTR models use for their codeword parameters.

mod codebook;
mod ops;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Result};

pub use codebook::{code_bits, packed_len, Codebook, CodebookField};
pub use ops::{
    assign, contrastive_loss, contrastive_objective, cosine, emb_pool, popularity_weight,
    recon_loss, recon_objective, reconstruct, reg_loss, reg_objective, sample_negative,
    soft_assign, CodebookView,
};
pub use train::{
    hard_assign_all, initialize_codewords, train_codebooks, train_codebooks_with_init,
    EpochTrace, QuantizerBatchLoss,
};

/// How codewords move after each hard-assignment step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodewordUpdate {
    /// Adam step on the combined loss.
    #[default]
    Adam,
    /// Replace each used codeword by the weighted mean of its batch members.
    /// Only meaningful without the auxiliary losses.
    ExactCentroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub n_negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// One codebook per categorical field instead of one shared codebook.
    pub per_field: bool,
    pub update: CodewordUpdate,
    /// Cap on the weighted sample used for k-means++ seeding.
    pub init_sample: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            m: 4,
            k: 64,
            alpha: 1.0,
            beta: 0.01,
            rho: 0.25,
            epsilon: 1e-10,
            tau: 0.01,
            n_negatives: 8,
            epochs: 20,
            batch_size: 256,
            lr: 0.01,
            per_field: false,
            update: CodewordUpdate::Adam,
            init_sample: 4096,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self, dim: usize) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.m == 0 || dim % self.m != 0 {
            return invalid("d mod M != 0".into());
        }
        if self.k == 0 {
            return invalid("quantizer.k must be at least 1".into());
        }
        if self.k > u32::MAX as usize {
            return invalid("quantizer.k is too large".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return invalid("quantizer.alpha and quantizer.beta must be finite and non-negative".into());
        }
        if self.beta > 0.0 && !(self.rho > 0.0 && self.rho < 1.0) {
            return invalid(format!("quantizer.rho must lie in (0, 1), got {}", self.rho));
        }
        if self.beta > 0.0 && self.n_negatives == 0 {
            return invalid("quantizer.n_negatives must be at least 1".into());
        }
        if !(self.epsilon > 0.0) {
            return invalid("quantizer.epsilon must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return invalid("quantizer.tau must be positive".into());
        }
        if self.batch_size == 0 {
            return invalid("quantizer.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid("quantizer.lr must be positive".into());
        }
        if self.init_sample == 0 {
            return invalid("quantizer.init_sample must be at least 1".into());
        }
        if self.update == CodewordUpdate::ExactCentroid && (self.alpha > 0.0 || self.beta > 0.0) {
            return invalid("exact_centroid updates require alpha = beta = 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let c = QuantizerConfig::default();
        assert!(c.validate(16).is_ok());
        assert!(c.validate(18).is_err());
        let bad = QuantizerConfig { rho: 1.0, ..c.clone() };
        assert!(bad.validate(16).is_err());
        let ok = QuantizerConfig { rho: 1.0, beta: 0.0, ..c.clone() };
        assert!(ok.validate(16).is_ok());
        let bad = QuantizerConfig {
            update: CodewordUpdate::ExactCentroid,
            ..c.clone()
        };
        assert!(bad.validate(16).is_err());
        let bad = QuantizerConfig { k: 0, ..c };
        assert!(bad.validate(16).is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::quantizer::{code_bits, packed_len};

/// Byte counts of embedding storage at f32 precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryAccount {
    pub dense_embedding_bytes: u64,
    pub codebook_bytes: u64,
    pub code_index_bytes: u64,
    /// Non-embedding parameters (MLP, numeric maps, biases).
    pub other_param_bytes: u64,
    /// Dense embedding bytes over compressed embedding bytes; 1 for dense models.
    pub compression_ratio: f64,
}

/// Shape of a quantized embedding store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantShape {
    pub m: usize,
    pub k: usize,
    pub n_groups: usize,
}

/// Memory of `n_features` embeddings of width `dim`, dense or quantized.
///
/// Codes are counted bit-packed back to back, `max(1, ceil(log2 K))` bits each.
pub fn account_memory(n_features: usize, dim: usize, quant: Option<QuantShape>, other_params: usize) -> MemoryAccount {
    let dense = (n_features * dim * 4) as u64;
    let other_param_bytes = (other_params * 4) as u64;
    match quant {
        None => MemoryAccount {
            dense_embedding_bytes: dense,
            codebook_bytes: 0,
            code_index_bytes: 0,
            other_param_bytes,
            compression_ratio: 1.0,
        },
        Some(q) => {
            let codebook = (q.n_groups * q.k * dim * 4) as u64;
            let index = packed_len(n_features * q.m, code_bits(q.k)) as u64;
            let compressed = codebook + index;
            MemoryAccount {
                dense_embedding_bytes: dense,
                codebook_bytes: codebook,
                code_index_bytes: index,
                other_param_bytes,
                compression_ratio: if compressed == 0 { 1.0 } else { dense as f64 / compressed as f64 },
            }
        }
    }
}

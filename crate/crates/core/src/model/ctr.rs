use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::{init_uniform, EmbeddingTable, Matrix, NumericMap};
use super::{clamp_prob, sigmoid};
use crate::binio::snap_to_f32;
use crate::data::InteractionRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "lr")]
    Lr,
    #[serde(rename = "fm")]
    Fm,
    #[serde(rename = "deepfm")]
    DeepFm,
    #[serde(rename = "pnn")]
    Pnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Lr, ModelKind::Fm, ModelKind::DeepFm, ModelKind::Pnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Fm => "fm",
            ModelKind::DeepFm => "deepfm",
            ModelKind::Pnn => "pnn",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ModelKind::Lr => 0,
            ModelKind::Fm => 1,
            ModelKind::DeepFm => 2,
            ModelKind::Pnn => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    fn has_linear(self) -> bool {
        matches!(self, ModelKind::Lr | ModelKind::Fm | ModelKind::DeepFm)
    }

    fn has_pairwise(self) -> bool {
        matches!(self, ModelKind::Fm | ModelKind::DeepFm)
    }

    fn has_mlp(self) -> bool {
        matches!(self, ModelKind::DeepFm | ModelKind::Pnn)
    }
}

/// Architecture of a CTR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub dim: usize,
    /// Rows per categorical field, OOV included.
    pub vocab_sizes: Vec<usize>,
    pub n_numeric: usize,
    /// Hidden MLP widths (ReLU); ignored by LR and FM.
    pub hidden: Vec<usize>,
}

impl ModelShape {
    pub fn n_fields(&self) -> usize {
        self.vocab_sizes.len() + self.n_numeric
    }

    /// Width of the MLP input: field vectors, plus pairwise inner products for PNN.
    pub fn mlp_input_width(&self) -> usize {
        let n = self.n_fields();
        match self.kind {
            ModelKind::DeepFm => n * self.dim,
            ModelKind::Pnn => n * self.dim + n * (n.saturating_sub(1)) / 2,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        if self.vocab_sizes.iter().any(|&v| v == 0) {
            return Err(Error::InvalidInput("every categorical field needs at least one row".into()));
        }
        if self.n_fields() == 0 {
            return Err(Error::InvalidInput("model needs at least one field".into()));
        }
        if self.kind.has_mlp() && self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidInput("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen code rows addressing a trainable codebook (stage-2 embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLookup {
    pub m: usize,
    pub k: usize,
    pub n_groups: usize,
    /// Codebook group per categorical field.
    pub field_groups: Vec<usize>,
    /// `m` code indices per global feature, fields concatenated in order.
    pub codes: Vec<u32>,
}

impl QuantizedLookup {
    pub fn codeword_len(&self, dim: usize) -> usize {
        self.n_groups * self.k * dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum EmbeddingStorage {
    /// Parameter offset of each field's `v_A x d` table.
    Dense { field_offsets: Vec<usize> },
    Quantized {
        lookup: QuantizedLookup,
        /// Global feature offset of each field into `lookup.codes`.
        feature_offsets: Vec<usize>,
        codeword_offset: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseLayer {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub(crate) embedding: EmbeddingStorage,
    numeric_weight: usize,
    numeric_bias: usize,
    bias: Option<usize>,
    linear: Option<Vec<usize>>,
    numeric_linear: usize,
    mlp: Vec<DenseLayer>,
    pub(crate) total: usize,
}

impl Layout {
    fn build(shape: &ModelShape, quantized: Option<QuantizedLookup>) -> Result<Self> {
        let d = shape.dim;
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let at = cursor;
            cursor += n;
            at
        };
        let embedding = match quantized {
            None => EmbeddingStorage::Dense {
                field_offsets: shape.vocab_sizes.iter().map(|&v| take(v * d)).collect(),
            },
            Some(lookup) => {
                if lookup.m == 0 || d % lookup.m != 0 || lookup.k == 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "d = {d} is not divisible into M = {} sub-spaces",
                        lookup.m
                    )));
                }
                let n_features: usize = shape.vocab_sizes.iter().sum();
                if lookup.codes.len() != n_features * lookup.m {
                    return Err(Error::DimensionMismatch(format!(
                        "{} code entries for {n_features} features x M = {}",
                        lookup.codes.len(),
                        lookup.m
                    )));
                }
                if lookup.field_groups.len() != shape.vocab_sizes.len()
                    || lookup.field_groups.iter().any(|&g| g >= lookup.n_groups)
                {
                    return Err(Error::DimensionMismatch("codebook group table does not match fields".into()));
                }
                if let Some(&bad) = lookup.codes.iter().find(|&&c| c as usize >= lookup.k) {
                    return Err(Error::CodeOutOfRange {
                        sub: 0,
                        index: bad,
                        k: lookup.k,
                    });
                }
                let mut feature_offsets = Vec::with_capacity(shape.vocab_sizes.len());
                let mut acc = 0;
                for &v in &shape.vocab_sizes {
                    feature_offsets.push(acc);
                    acc += v;
                }
                let codeword_offset = take(lookup.codeword_len(d));
                EmbeddingStorage::Quantized {
                    lookup,
                    feature_offsets,
                    codeword_offset,
                }
            }
        };
        let numeric_weight = take(shape.n_numeric * d);
        let numeric_bias = take(shape.n_numeric * d);
        let (bias, linear, numeric_linear) = if shape.kind.has_linear() {
            let bias = take(1);
            let linear = shape.vocab_sizes.iter().map(|&v| take(v)).collect();
            (Some(bias), Some(linear), take(shape.n_numeric))
        } else {
            (None, None, 0)
        };
        let mut mlp = Vec::new();
        if shape.kind.has_mlp() {
            let mut fan_in = shape.mlp_input_width();
            for &fan_out in shape.hidden.iter().chain(std::iter::once(&1)) {
                let weight = take(fan_in * fan_out);
                let bias = take(fan_out);
                mlp.push(DenseLayer {
                    weight,
                    bias,
                    fan_in,
                    fan_out,
                });
                fan_in = fan_out;
            }
        }
        Ok(Self {
            embedding,
            numeric_weight,
            numeric_bias,
            bias,
            linear,
            numeric_linear,
            mlp,
            total: cursor,
        })
    }
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    fields: Vec<f64>,
    grad_fields: Vec<f64>,
    /// Layer inputs; `acts[0]` is the MLP input.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Workspace {
    /// Smallest |pre-activation| over the hidden ReLU units of the last
    /// forward pass; gradient checks use it to avoid kinks.
    pub fn min_abs_hidden_preactivation(&self) -> Option<f64> {
        let hidden = self.pre.len().checked_sub(1)?;
        self.pre[..hidden]
            .iter()
            .flatten()
            .map(|z| z.abs())
            .min_by(f64::total_cmp)
    }
}

/// Small CTR model (LR, FM, DeepFM-lite or PNN-lite) over a flat parameter
/// vector, with hand-derived gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CtrModel {
    shape: ModelShape,
    pub(crate) layout: Layout,
    params: Vec<f64>,
}

impl CtrModel {
    /// Randomly initialized model with dense embedding tables.
    pub fn new_dense(shape: ModelShape, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::build(&shape, None)?;
        Ok(Self::initialized(shape, layout, rng))
    }

    /// Model whose categorical embeddings are codebook lookups; `codewords`
    /// holds `n_groups * M * K * (d/M)` values in sub-space-major order.
    pub fn new_quantized(
        shape: ModelShape,
        lookup: QuantizedLookup,
        codewords: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        shape.validate()?;
        let expected = lookup.codeword_len(shape.dim);
        if codewords.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} codeword values, expected {expected}",
                codewords.len()
            )));
        }
        let layout = Layout::build(&shape, Some(lookup))?;
        let mut model = Self::initialized(shape, layout, rng);
        if let EmbeddingStorage::Quantized { codeword_offset, .. } = model.layout.embedding {
            model.params[codeword_offset..codeword_offset + expected].copy_from_slice(codewords);
        }
        Ok(model)
    }

    fn initialized(shape: ModelShape, layout: Layout, rng: &mut impl Rng) -> Self {
        let mut params = vec![0.0; layout.total];
        let d = shape.dim;
        match &layout.embedding {
            EmbeddingStorage::Dense { field_offsets } => {
                for (&off, &v) in field_offsets.iter().zip(&shape.vocab_sizes) {
                    init_uniform(&mut params[off..off + v * d], d, rng);
                }
            }
            EmbeddingStorage::Quantized { .. } => {}
        }
        let n = shape.n_numeric * d;
        init_uniform(&mut params[layout.numeric_weight..layout.numeric_weight + n], d, rng);
        init_uniform(&mut params[layout.numeric_bias..layout.numeric_bias + n], d, rng);
        for layer in &layout.mlp {
            // He-uniform for ReLU layers.
            let bound = (6.0 / layer.fan_in as f64).sqrt();
            for w in &mut params[layer.weight..layer.weight + layer.fan_in * layer.fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        snap_to_f32(&mut params);
        Self { shape, layout, params }
    }

    pub(crate) fn from_raw(shape: ModelShape, quantized: Option<QuantizedLookup>, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::build(&shape, quantized)?;
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters stored, shape implies {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { shape, layout, params })
    }

    pub(crate) fn param_count(shape: &ModelShape, quantized: Option<QuantizedLookup>) -> Result<usize> {
        shape.validate()?;
        Ok(Layout::build(shape, quantized)?.total)
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn kind(&self) -> ModelKind {
        self.shape.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn quantized_lookup(&self) -> Option<&QuantizedLookup> {
        match &self.layout.embedding {
            EmbeddingStorage::Quantized { lookup, .. } => Some(lookup),
            EmbeddingStorage::Dense { .. } => None,
        }
    }

    /// Number of parameters held by categorical embedding storage (dense
    /// tables or codewords).
    pub fn embedding_param_count(&self) -> usize {
        let d = self.shape.dim;
        match &self.layout.embedding {
            EmbeddingStorage::Dense { .. } => self.shape.vocab_sizes.iter().sum::<usize>() * d,
            EmbeddingStorage::Quantized { lookup, .. } => lookup.codeword_len(d),
        }
    }

    /// Current codeword values of a quantized model.
    pub fn codewords(&self) -> Option<&[f64]> {
        match &self.layout.embedding {
            EmbeddingStorage::Quantized {
                lookup,
                codeword_offset,
                ..
            } => Some(&self.params[*codeword_offset..*codeword_offset + lookup.codeword_len(self.shape.dim)]),
            EmbeddingStorage::Dense { .. } => None,
        }
    }

    /// Rounds every parameter to the f32 grid used on disk.
    pub fn snap_to_storage_precision(&mut self) {
        snap_to_f32(&mut self.params);
    }

    /// Copies dense categorical tables and numeric maps from `table`.
    pub fn load_embeddings(&mut self, table: &EmbeddingTable) -> Result<()> {
        let d = self.shape.dim;
        if table.dim != d || table.numeric.len() != self.shape.n_numeric {
            return Err(Error::DimensionMismatch("embedding table does not match model shape".into()));
        }
        if let EmbeddingStorage::Dense { field_offsets } = &self.layout.embedding {
            if table.vocab_sizes() != self.shape.vocab_sizes {
                return Err(Error::DimensionMismatch("embedding table vocabulary sizes differ".into()));
            }
            for (&off, m) in field_offsets.iter().zip(&table.categorical) {
                self.params[off..off + m.data.len()].copy_from_slice(&m.data);
            }
        }
        self.load_numeric_maps(&table.numeric)
    }

    pub fn load_numeric_maps(&mut self, maps: &[NumericMap]) -> Result<()> {
        let d = self.shape.dim;
        if maps.len() != self.shape.n_numeric || maps.iter().any(|m| m.weight.len() != d || m.bias.len() != d) {
            return Err(Error::DimensionMismatch("numeric maps do not match model shape".into()));
        }
        for (a, map) in maps.iter().enumerate() {
            let w = self.layout.numeric_weight + a * d;
            let b = self.layout.numeric_bias + a * d;
            self.params[w..w + d].copy_from_slice(&map.weight);
            self.params[b..b + d].copy_from_slice(&map.bias);
        }
        Ok(())
    }

    /// Categorical tables (dense models only) plus numeric maps.
    pub fn embedding_table(&self) -> Option<EmbeddingTable> {
        let EmbeddingStorage::Dense { field_offsets } = &self.layout.embedding else {
            return None;
        };
        let d = self.shape.dim;
        let categorical = field_offsets
            .iter()
            .zip(&self.shape.vocab_sizes)
            .map(|(&off, &v)| Matrix {
                rows: v,
                cols: d,
                data: self.params[off..off + v * d].to_vec(),
            })
            .collect();
        Some(EmbeddingTable {
            dim: d,
            categorical,
            numeric: self.numeric_maps(),
        })
    }

    pub fn numeric_maps(&self) -> Vec<NumericMap> {
        let d = self.shape.dim;
        (0..self.shape.n_numeric)
            .map(|a| NumericMap {
                weight: self.params[self.layout.numeric_weight + a * d..][..d].to_vec(),
                bias: self.params[self.layout.numeric_bias + a * d..][..d].to_vec(),
            })
            .collect()
    }

    fn check_record(&self, record: &InteractionRecord) -> Result<()> {
        if record.categorical.len() != self.shape.vocab_sizes.len() || record.numeric.len() != self.shape.n_numeric {
            return Err(Error::DimensionMismatch(format!(
                "record has {}+{} fields, model expects {}+{}",
                record.categorical.len(),
                record.numeric.len(),
                self.shape.vocab_sizes.len(),
                self.shape.n_numeric
            )));
        }
        for (field, (ids, &size)) in record.categorical.iter().zip(&self.shape.vocab_sizes).enumerate() {
            if ids.is_empty() {
                return Err(Error::InvalidInput(format!("field {field} has no feature ids")));
            }
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
                return Err(Error::IdOutOfRange { field, id, size });
            }
        }
        Ok(())
    }

    /// Field vectors `[e_1..e_N]` for a record (categorical then numeric).
    pub fn embed_lookup(&self, record: &InteractionRecord) -> Result<Vec<Vec<f64>>> {
        self.check_record(record)?;
        let mut buf = vec![0.0; self.shape.n_fields() * self.shape.dim];
        self.fill_fields(record, &mut buf);
        Ok(buf.chunks(self.shape.dim).map(<[f64]>::to_vec).collect())
    }

    fn fill_fields(&self, record: &InteractionRecord, out: &mut [f64]) {
        let d = self.shape.dim;
        out.iter_mut().for_each(|x| *x = 0.0);
        for (field, ids) in record.categorical.iter().enumerate() {
            let dst = &mut out[field * d..(field + 1) * d];
            let scale = 1.0 / ids.len() as f64;
            for &id in ids {
                let id = id as usize;
                match &self.layout.embedding {
                    EmbeddingStorage::Dense { field_offsets } => {
                        let row = &self.params[field_offsets[field] + id * d..][..d];
                        for (acc, x) in dst.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    EmbeddingStorage::Quantized {
                        lookup,
                        feature_offsets,
                        codeword_offset,
                    } => {
                        let sub = d / lookup.m;
                        let group = lookup.field_groups[field];
                        let row = &lookup.codes[(feature_offsets[field] + id) * lookup.m..][..lookup.m];
                        for (i, &code) in row.iter().enumerate() {
                            let cw = codeword_offset + ((group * lookup.m + i) * lookup.k + code as usize) * sub;
                            for (acc, x) in dst[i * sub..(i + 1) * sub].iter_mut().zip(&self.params[cw..cw + sub]) {
                                *acc += x;
                            }
                        }
                    }
                }
            }
            if ids.len() > 1 {
                dst.iter_mut().for_each(|x| *x *= scale);
            }
        }
        let base = record.categorical.len();
        for (a, &x) in record.numeric.iter().enumerate() {
            let dst = &mut out[(base + a) * d..(base + a + 1) * d];
            let w = &self.params[self.layout.numeric_weight + a * d..][..d];
            let b = &self.params[self.layout.numeric_bias + a * d..][..d];
            for ((o, w), b) in dst.iter_mut().zip(w).zip(b) {
                *o = w * x + b;
            }
        }
    }

    /// Predicted click probability, clamped to `[1e-7, 1 - 1e-7]`.
    pub fn forward(&self, record: &InteractionRecord) -> Result<f64> {
        let mut ws = Workspace::default();
        Ok(clamp_prob(sigmoid(self.logit_with(record, &mut ws)?)))
    }

    pub fn logit(&self, record: &InteractionRecord) -> Result<f64> {
        self.logit_with(record, &mut Workspace::default())
    }

    pub fn predict(&self, records: &[InteractionRecord]) -> Result<Vec<f64>> {
        let mut ws = Workspace::default();
        records
            .iter()
            .map(|r| Ok(clamp_prob(sigmoid(self.logit_with(r, &mut ws)?))))
            .collect()
    }

    pub fn logit_with(&self, record: &InteractionRecord, ws: &mut Workspace) -> Result<f64> {
        self.check_record(record)?;
        Ok(self.forward_unchecked(record, ws))
    }

    fn forward_unchecked(&self, record: &InteractionRecord, ws: &mut Workspace) -> f64 {
        let d = self.shape.dim;
        let n = self.shape.n_fields();
        ws.fields.resize(n * d, 0.0);
        self.fill_fields(record, &mut ws.fields);
        let mut logit = 0.0;
        if let (Some(bias), Some(linear)) = (self.layout.bias, &self.layout.linear) {
            logit += self.params[bias];
            for (ids, &off) in record.categorical.iter().zip(linear) {
                let sum: f64 = ids.iter().map(|&id| self.params[off + id as usize]).sum();
                logit += sum / ids.len() as f64;
            }
            for (a, &x) in record.numeric.iter().enumerate() {
                logit += self.params[self.layout.numeric_linear + a] * x;
            }
        }
        if self.shape.kind.has_pairwise() {
            logit += fm_pairwise(&ws.fields, n, d);
        }
        if self.shape.kind.has_mlp() {
            logit += self.mlp_forward(ws, n, d);
        }
        logit
    }

    fn mlp_forward(&self, ws: &mut Workspace, n: usize, d: usize) -> f64 {
        let layers = &self.layout.mlp;
        ws.acts.resize(layers.len(), Vec::new());
        ws.pre.resize(layers.len(), Vec::new());
        let input = &mut ws.acts[0];
        input.clear();
        input.extend_from_slice(&ws.fields);
        if self.shape.kind == ModelKind::Pnn {
            for i in 0..n {
                for j in i + 1..n {
                    input.push(dot(&ws.fields[i * d..(i + 1) * d], &ws.fields[j * d..(j + 1) * d]));
                }
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            let w = &self.params[layer.weight..layer.weight + layer.fan_in * layer.fan_out];
            let b = &self.params[layer.bias..layer.bias + layer.fan_out];
            let mut pre = std::mem::take(&mut ws.pre[l]);
            pre.clear();
            {
                let x = &ws.acts[l];
                pre.extend((0..layer.fan_out).map(|o| b[o] + dot(&w[o * layer.fan_in..(o + 1) * layer.fan_in], x)));
            }
            if l + 1 < layers.len() {
                let next = &mut ws.acts[l + 1];
                next.clear();
                next.extend(pre.iter().map(|&z| z.max(0.0)));
            }
            ws.pre[l] = pre;
        }
        ws.pre[layers.len() - 1][0]
    }

    /// Adds the gradient of the BCE loss for `record` into `grad` (same
    /// layout as `params`). Returns `(probability, loss)`.
    pub fn accumulate_gradient(
        &self,
        record: &InteractionRecord,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<(f64, f64)> {
        self.check_record(record)?;
        debug_assert_eq!(grad.len(), self.params.len());
        let logit = self.forward_unchecked(record, ws);
        let raw = sigmoid(logit);
        let p = clamp_prob(raw);
        let y = f64::from(record.label);
        let loss = super::bce_loss(p, y);
        self.backward(record, ws, raw - y, grad);
        Ok((p, loss))
    }

    /// Backpropagates `dlogit` (the loss derivative w.r.t. the logit) using
    /// the activations cached by the preceding forward pass.
    fn backward(&self, record: &InteractionRecord, ws: &mut Workspace, dlogit: f64, grad: &mut [f64]) {
        let d = self.shape.dim;
        let n = self.shape.n_fields();
        if let (Some(bias), Some(linear)) = (self.layout.bias, &self.layout.linear) {
            grad[bias] += dlogit;
            for (ids, &off) in record.categorical.iter().zip(linear) {
                let share = dlogit / ids.len() as f64;
                for &id in ids {
                    grad[off + id as usize] += share;
                }
            }
            for (a, &x) in record.numeric.iter().enumerate() {
                grad[self.layout.numeric_linear + a] += dlogit * x;
            }
        }
        if !self.shape.kind.has_pairwise() && !self.shape.kind.has_mlp() {
            return;
        }
        ws.grad_fields.clear();
        ws.grad_fields.resize(n * d, 0.0);
        if self.shape.kind.has_pairwise() {
            // d/de_ik of sum_{i<j} <e_i, e_j> is (sum_l e_lk) - e_ik.
            for k in 0..d {
                let total: f64 = (0..n).map(|i| ws.fields[i * d + k]).sum();
                for i in 0..n {
                    ws.grad_fields[i * d + k] += dlogit * (total - ws.fields[i * d + k]);
                }
            }
        }
        if self.shape.kind.has_mlp() {
            self.mlp_backward(ws, n, d, dlogit, grad);
        }
        self.scatter_field_grads(record, &ws.grad_fields, grad);
    }

    fn mlp_backward(&self, ws: &mut Workspace, n: usize, d: usize, dlogit: f64, grad: &mut [f64]) {
        let layers = &self.layout.mlp;
        ws.delta.clear();
        ws.delta.push(dlogit);
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &ws.acts[l];
            for (o, &delta) in ws.delta.iter().enumerate() {
                grad[layer.bias + o] += delta;
                if delta != 0.0 {
                    let g = &mut grad[layer.weight + o * layer.fan_in..][..layer.fan_in];
                    for (gw, x) in g.iter_mut().zip(input) {
                        *gw += delta * x;
                    }
                }
            }
            ws.delta_next.clear();
            ws.delta_next.resize(layer.fan_in, 0.0);
            let w = &self.params[layer.weight..layer.weight + layer.fan_in * layer.fan_out];
            for (o, &delta) in ws.delta.iter().enumerate() {
                if delta != 0.0 {
                    for (dn, wv) in ws.delta_next.iter_mut().zip(&w[o * layer.fan_in..(o + 1) * layer.fan_in]) {
                        *dn += delta * wv;
                    }
                }
            }
            if l > 0 {
                // ReLU subgradient at 0 is 0.
                for (dn, &z) in ws.delta_next.iter_mut().zip(&ws.pre[l - 1]) {
                    if z <= 0.0 {
                        *dn = 0.0;
                    }
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_next);
        }
        let dinput = &ws.delta;
        for (g, dx) in ws.grad_fields.iter_mut().zip(&dinput[..n * d]) {
            *g += dx;
        }
        if self.shape.kind == ModelKind::Pnn {
            let mut p = n * d;
            for i in 0..n {
                for j in i + 1..n {
                    let dp = dinput[p];
                    p += 1;
                    if dp == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        ws.grad_fields[i * d + k] += dp * ws.fields[j * d + k];
                        ws.grad_fields[j * d + k] += dp * ws.fields[i * d + k];
                    }
                }
            }
        }
    }

    fn scatter_field_grads(&self, record: &InteractionRecord, grad_fields: &[f64], grad: &mut [f64]) {
        let d = self.shape.dim;
        for (field, ids) in record.categorical.iter().enumerate() {
            let g = &grad_fields[field * d..(field + 1) * d];
            let scale = 1.0 / ids.len() as f64;
            for &id in ids {
                let id = id as usize;
                match &self.layout.embedding {
                    EmbeddingStorage::Dense { field_offsets } => {
                        let dst = &mut grad[field_offsets[field] + id * d..][..d];
                        for (acc, x) in dst.iter_mut().zip(g) {
                            *acc += x * scale;
                        }
                    }
                    EmbeddingStorage::Quantized {
                        lookup,
                        feature_offsets,
                        codeword_offset,
                    } => {
                        let sub = d / lookup.m;
                        let group = lookup.field_groups[field];
                        let row = &lookup.codes[(feature_offsets[field] + id) * lookup.m..][..lookup.m];
                        for (i, &code) in row.iter().enumerate() {
                            let cw = codeword_offset + ((group * lookup.m + i) * lookup.k + code as usize) * sub;
                            for (acc, x) in grad[cw..cw + sub].iter_mut().zip(&g[i * sub..(i + 1) * sub]) {
                                *acc += x * scale;
                            }
                        }
                    }
                }
            }
        }
        let base = record.categorical.len();
        for (a, &x) in record.numeric.iter().enumerate() {
            let g = &grad_fields[(base + a) * d..(base + a + 1) * d];
            for k in 0..d {
                grad[self.layout.numeric_weight + a * d + k] += g[k] * x;
                grad[self.layout.numeric_bias + a * d + k] += g[k];
            }
        }
    }

    /// Mean BCE over `records`.
    pub fn mean_loss(&self, records: &[InteractionRecord]) -> Result<f64> {
        let probs = self.predict(records)?;
        Ok(records
            .iter()
            .zip(probs)
            .map(|(r, p)| super::bce_loss(p, f64::from(r.label)))
            .sum::<f64>()
            / records.len().max(1) as f64)
    }

    #[cfg(test)]
    pub(crate) fn zero_mlp(&mut self) {
        for layer in self.layout.mlp.clone() {
            self.params[layer.weight..layer.weight + layer.fan_in * layer.fan_out].fill(0.0);
            self.params[layer.bias..layer.bias + layer.fan_out].fill(0.0);
        }
    }

    #[cfg(test)]
    pub(crate) fn linear_offsets(&self) -> Option<(usize, &[usize])> {
        match (self.layout.bias, &self.layout.linear) {
            (Some(b), Some(l)) => Some((b, l)),
            _ => None,
        }
    }

    /// Parameter index range of `(field, row)`'s dense embedding row.
    #[cfg(test)]
    pub(crate) fn dense_row_range(&self, field: usize, row: usize) -> Option<std::ops::Range<usize>> {
        match &self.layout.embedding {
            EmbeddingStorage::Dense { field_offsets } => {
                let start = field_offsets[field] + row * self.shape.dim;
                Some(start..start + self.shape.dim)
            }
            EmbeddingStorage::Quantized { .. } => None,
        }
    }

    #[cfg(test)]
    pub(crate) fn codeword_range(&self, group: usize, sub: usize, code: usize) -> Option<std::ops::Range<usize>> {
        match &self.layout.embedding {
            EmbeddingStorage::Quantized {
                lookup,
                codeword_offset,
                ..
            } => {
                let s = self.shape.dim / lookup.m;
                let start = codeword_offset + ((group * lookup.m + sub) * lookup.k + code) * s;
                Some(start..start + s)
            }
            EmbeddingStorage::Dense { .. } => None,
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_{i<j} <e_i, e_j>` via `0.5 * sum_k [(sum_i e_ik)^2 - sum_i e_ik^2]`.
pub fn fm_pairwise(fields: &[f64], n: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..d {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let x = fields[i * d + k];
            sum += x;
            sum_sq += x * x;
        }
        total += sum * sum - sum_sq;
    }
    0.5 * total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bce_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(kind: ModelKind) -> ModelShape {
        ModelShape {
            kind,
            dim: 4,
            vocab_sizes: vec![4, 3, 5],
            n_numeric: 1,
            hidden: vec![5, 3],
        }
    }

    fn random_record(rng: &mut ChaCha8Rng, sizes: &[usize]) -> InteractionRecord {
        let categorical = sizes
            .iter()
            .map(|&v| {
                let k = rng.random_range(1..=2);
                (0..k).map(|_| rng.random_range(0..v as u32)).collect()
            })
            .collect();
        InteractionRecord {
            label: rng.random_range(0..2),
            categorical,
            numeric: vec![rng.random_range(-1.0..1.0)],
        }
    }

    fn quantized_lookup(sizes: &[usize], m: usize, k: usize, rng: &mut ChaCha8Rng) -> QuantizedLookup {
        let n: usize = sizes.iter().sum();
        QuantizedLookup {
            m,
            k,
            n_groups: 1,
            field_groups: vec![0; sizes.len()],
            codes: (0..n * m).map(|_| rng.random_range(0..k as u32)).collect(),
        }
    }

    fn loss_at(model: &CtrModel, rec: &InteractionRecord) -> f64 {
        bce_loss(sigmoid(model.logit(rec).unwrap()), f64::from(rec.label))
    }

    /// Central differences over every parameter, against the analytic gradient.
    fn max_rel_error(model: &mut CtrModel, rec: &InteractionRecord) -> f64 {
        let h = 1e-5;
        let mut grad = vec![0.0; model.n_params()];
        model
            .accumulate_gradient(rec, &mut Workspace::default(), &mut grad)
            .unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..model.n_params() {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = loss_at(model, rec);
            model.params[i] = orig - h;
            let down = loss_at(model, rec);
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
        worst
    }

    fn randomize(model: &mut CtrModel, rng: &mut ChaCha8Rng) {
        for p in model.params_mut() {
            *p = rng.random_range(-0.5..0.5);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in ModelKind::ALL {
            let mut checked = 0;
            while checked < 20 {
                let s = shape(kind);
                let mut model = if checked % 2 == 0 {
                    CtrModel::new_dense(s.clone(), &mut rng).unwrap()
                } else {
                    let lookup = quantized_lookup(&s.vocab_sizes, 2, 3, &mut rng);
                    let cw = vec![0.0; lookup.codeword_len(s.dim)];
                    CtrModel::new_quantized(s.clone(), lookup, &cw, &mut rng).unwrap()
                };
                randomize(&mut model, &mut rng);
                let rec = random_record(&mut rng, &s.vocab_sizes);
                let mut ws = Workspace::default();
                model.logit_with(&rec, &mut ws).unwrap();
                if ws.min_abs_hidden_preactivation().is_some_and(|z| z < 1e-3) {
                    continue;
                }
                let err = max_rel_error(&mut model, &rec);
                assert!(err < 1e-4, "{kind:?} instance {checked}: relative error {err}");
                checked += 1;
            }
        }
    }

    #[test]
    fn fm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ModelShape {
            kind: ModelKind::Fm,
            dim: 2,
            vocab_sizes: vec![1, 1],
            n_numeric: 0,
            hidden: vec![],
        };
        let mut model = CtrModel::new_dense(s, &mut rng).unwrap();
        let rec = InteractionRecord {
            label: 1,
            categorical: vec![vec![0], vec![0]],
            numeric: vec![],
        };
        model.params_mut().fill(0.0);
        let r0 = model.dense_row_range(0, 0).unwrap();
        let r1 = model.dense_row_range(1, 0).unwrap();
        model.params_mut()[r0.clone()].copy_from_slice(&[1.0, 0.0]);
        model.params_mut()[r1.clone()].copy_from_slice(&[0.0, 1.0]);
        assert_eq!(model.forward(&rec).unwrap(), 0.5);
        model.params_mut()[r0].copy_from_slice(&[1.0, 1.0]);
        model.params_mut()[r1].copy_from_slice(&[1.0, 1.0]);
        assert!((model.forward(&rec).unwrap() - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn zero_pnn_predicts_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = CtrModel::new_dense(shape(ModelKind::Pnn), &mut rng).unwrap();
        model.zero_mlp();
        for _ in 0..10 {
            let rec = random_record(&mut rng, &[4, 3, 5]);
            assert_eq!(model.forward(&rec).unwrap(), 0.5);
        }
    }

    #[test]
    fn lr_closed_form_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ModelShape {
            kind: ModelKind::Lr,
            dim: 2,
            vocab_sizes: vec![3],
            n_numeric: 0,
            hidden: vec![],
        };
        let mut model = CtrModel::new_dense(s, &mut rng).unwrap();
        model.params_mut().fill(0.0);
        let rec = InteractionRecord {
            label: 1,
            categorical: vec![vec![1]],
            numeric: vec![],
        };
        let mut grad = vec![0.0; model.n_params()];
        let (p, _) = model
            .accumulate_gradient(&rec, &mut Workspace::default(), &mut grad)
            .unwrap();
        assert_eq!(p, 0.5);
        let (bias, linear) = model.linear_offsets().unwrap();
        assert_eq!(grad[linear[0] + 1], -0.5);
        // A balanced pair at p = 0.5 leaves the bias gradient at zero.
        let neg = InteractionRecord { label: 0, ..rec.clone() };
        model
            .accumulate_gradient(&neg, &mut Workspace::default(), &mut grad)
            .unwrap();
        assert_eq!(grad[bias], 0.0);
    }

    #[test]
    fn embedding_gradient_is_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [ModelKind::Fm, ModelKind::DeepFm, ModelKind::Pnn] {
            let mut model = CtrModel::new_dense(shape(kind), &mut rng).unwrap();
            randomize(&mut model, &mut rng);
            let rec = random_record(&mut rng, &[4, 3, 5]);
            let mut grad = vec![0.0; model.n_params()];
            model
                .accumulate_gradient(&rec, &mut Workspace::default(), &mut grad)
                .unwrap();
            for (field, &size) in [4usize, 3, 5].iter().enumerate() {
                for row in 0..size {
                    let touched = rec.categorical[field].contains(&(row as u32));
                    let range = model.dense_row_range(field, row).unwrap();
                    let nonzero = grad[range].iter().any(|&g| g != 0.0);
                    assert!(!nonzero || touched, "{kind:?} field {field} row {row}");
                    assert!(nonzero || !touched, "{kind:?} field {field} row {row} has no gradient");
                }
            }
        }
    }

    #[test]
    fn fm_identity_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let d = rng.random_range(1..10);
            let fields: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut naive = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    naive += dot(&fields[i * d..(i + 1) * d], &fields[j * d..(j + 1) * d]);
                }
            }
            assert!((fm_pairwise(&fields, n, d) - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn quantized_lookup_concatenates_codewords_and_sums_shared_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = ModelShape {
            kind: ModelKind::Fm,
            dim: 4,
            vocab_sizes: vec![2, 2],
            n_numeric: 0,
            hidden: vec![],
        };
        // Features (0,0) and (1,1) share codeword 1 of sub-space 0.
        let lookup = QuantizedLookup {
            m: 2,
            k: 2,
            n_groups: 1,
            field_groups: vec![0, 0],
            codes: vec![1, 0, 0, 0, 0, 1, 1, 1],
        };
        let codewords: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
        let mut model = CtrModel::new_quantized(s, lookup, &codewords, &mut rng).unwrap();
        let rec = InteractionRecord {
            label: 1,
            categorical: vec![vec![0], vec![1]],
            numeric: vec![],
        };
        let fields = model.embed_lookup(&rec).unwrap();
        assert_eq!(fields[0], vec![0.5, 0.75, 1.0, 1.25]);
        assert_eq!(fields[1], vec![0.5, 0.75, 1.5, 1.75]);
        let shared = model.codeword_range(0, 0, 1).unwrap();
        let mut grad = vec![0.0; model.n_params()];
        model
            .accumulate_gradient(&rec, &mut Workspace::default(), &mut grad)
            .unwrap();
        let h = 1e-5;
        for i in shared {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = loss_at(&model, &rec);
            model.params[i] = orig - h;
            let down = loss_at(&model, &rec);
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((grad[i] - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_is_pure_and_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = CtrModel::new_dense(shape(ModelKind::DeepFm), &mut rng).unwrap();
        let rec = random_record(&mut rng, &[4, 3, 5]);
        assert_eq!(
            model.forward(&rec).unwrap().to_bits(),
            model.forward(&rec).unwrap().to_bits()
        );
        let mut bad = rec.clone();
        bad.categorical[1] = vec![3];
        assert!(matches!(model.forward(&bad), Err(Error::IdOutOfRange { field: 1, id: 3, size: 3 })));
        bad.categorical.pop();
        assert!(matches!(model.forward(&bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn probability_stays_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = CtrModel::new_dense(shape(ModelKind::Fm), &mut rng).unwrap();
        for p in model.params_mut() {
            *p = 50.0;
        }
        let rec = random_record(&mut rng, &[4, 3, 5]);
        let p = model.forward(&rec).unwrap();
        assert!((1e-7..=1.0 - 1e-7).contains(&p));
    }

    #[test]
    fn pnn_mlp_input_width() {
        let s = shape(ModelKind::Pnn);
        assert_eq!(s.mlp_input_width(), 4 * 4 + 4 * 3 / 2);
    }
}

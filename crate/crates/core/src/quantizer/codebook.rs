use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::QuantizedLookup;

use super::ops::{entropy, reconstruct, CodebookView};

const MAGIC: &[u8] = b"MECCBK1";

/// A categorical field's slice of the global feature index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodebookField {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Codebook group the field draws its codewords from.
    pub group: usize,
}

/// Learned sub-codebooks plus the frozen assignment of every feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub m: usize,
    pub k: usize,
    pub dim: usize,
    pub n_groups: usize,
    pub fields: Vec<CodebookField>,
    /// `n_groups * m * k * (dim / m)` values.
    pub codewords: Vec<f64>,
    /// `m` codes per global feature.
    pub codes: Vec<u32>,
}

/// Bits per stored code index; a single-codeword codebook still spends one.
pub fn code_bits(k: usize) -> u32 {
    if k <= 2 {
        1
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

impl Codebook {
    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn n_features(&self) -> usize {
        self.codes.len() / self.m.max(1)
    }

    fn group_len(&self) -> usize {
        self.m * self.k * self.sub_dim()
    }

    pub fn view(&self, group: usize) -> CodebookView<'_> {
        let n = self.group_len();
        CodebookView {
            m: self.m,
            k: self.k,
            sub_dim: self.sub_dim(),
            codewords: &self.codewords[group * n..(group + 1) * n],
        }
    }

    pub fn code_row(&self, feature: usize) -> &[u32] {
        &self.codes[feature * self.m..(feature + 1) * self.m]
    }

    pub fn group_of(&self, feature: usize) -> Option<usize> {
        self.fields
            .iter()
            .find(|f| feature >= f.offset && feature < f.offset + f.len)
            .map(|f| f.group)
    }

    /// Quantized embedding of a global feature.
    pub fn reconstruct_feature(&self, feature: usize) -> Result<Vec<f64>> {
        let group = self.group_of(feature).ok_or_else(|| {
            Error::InvalidInput(format!("feature {feature} is outside the codebook's assignment table"))
        })?;
        reconstruct(self.code_row(feature), &self.view(group))
    }

    pub fn to_lookup(&self) -> QuantizedLookup {
        QuantizedLookup {
            m: self.m,
            k: self.k,
            n_groups: self.n_groups,
            field_groups: self.fields.iter().map(|f| f.group).collect(),
            codes: self.codes.clone(),
        }
    }

    /// Normalized histogram of weighted hard assignments for one sub-space of one group.
    ///
    /// `weights` holds one weight per global feature.
    pub fn code_distribution(&self, group: usize, sub: usize, weights: &[f64]) -> Vec<f64> {
        let mut mass = vec![0.0; self.k];
        let mut total = 0.0;
        for f in self.fields.iter().filter(|f| f.group == group) {
            for j in f.offset..f.offset + f.len {
                let w = weights[j];
                mass[self.codes[j * self.m + sub] as usize] += w;
                total += w;
            }
        }
        if total > 0.0 {
            for v in &mut mass {
                *v /= total;
            }
        }
        mass
    }

    /// Mean entropy (nats) of the popularity-weighted hard code distribution
    /// over every sub-space of every group.
    pub fn weighted_code_entropy(&self, weights: &[f64]) -> f64 {
        let mut sum = 0.0;
        for g in 0..self.n_groups {
            for i in 0..self.m {
                sum += entropy(&self.code_distribution(g, i, weights), 0.0);
            }
        }
        sum / (self.n_groups * self.m) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |msg: String| Err(Error::ShapeMismatch(msg));
        if self.m == 0 || self.k == 0 || self.dim % self.m != 0 {
            return shape(format!("invalid codebook shape M={}, K={}, d={}", self.m, self.k, self.dim));
        }
        if self.n_groups == 0 || self.codewords.len() != self.n_groups * self.group_len() {
            return shape(format!(
                "expected {} codeword values, found {}",
                self.n_groups * self.group_len(),
                self.codewords.len()
            ));
        }
        let mut next = 0;
        for f in &self.fields {
            if f.offset != next {
                return shape(format!("field `{}` does not start at feature {next}", f.name));
            }
            if f.group >= self.n_groups {
                return shape(format!("field `{}` refers to missing group {}", f.name, f.group));
            }
            next += f.len;
        }
        if self.codes.len() != next * self.m {
            return shape(format!(
                "assignment table covers {} features, field table {next}",
                self.codes.len() / self.m
            ));
        }
        for (idx, &c) in self.codes.iter().enumerate() {
            if c as usize >= self.k {
                return Err(Error::CodeOutOfRange {
                    sub: idx % self.m,
                    index: c,
                    k: self.k,
                });
            }
        }
        if self.codewords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("codebook holds non-finite codewords".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }

    pub fn write_to(&self, out: impl Write) -> Result<()> {
        self.validate()?;
        let mut w = Writer::new(out);
        w.magic(MAGIC)?;
        w.u32(self.m as u32)?;
        w.u32(self.k as u32)?;
        w.u32(self.dim as u32)?;
        w.u32(self.sub_dim() as u32)?;
        w.u32(self.n_groups as u32)?;
        w.u32(self.fields.len() as u32)?;
        for f in &self.fields {
            w.str(&f.name)?;
            w.u32(f.offset as u32)?;
            w.u32(f.len as u32)?;
            w.u32(f.group as u32)?;
        }
        w.u64(self.codewords.len() as u64)?;
        w.f32_slice(&self.codewords)?;
        let bits = code_bits(self.k);
        w.u64(self.n_features() as u64)?;
        w.u8(bits as u8)?;
        w.bytes(&pack_codes(&self.codes, bits))?;
        w.finish()?;
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut r = Reader::new(input, "codebook");
        r.expect_magic(MAGIC, "MECCBK1")?;
        let m = r.u32()? as usize;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let sub_dim = r.u32()? as usize;
        if m == 0 || k == 0 || sub_dim * m != dim {
            return Err(Error::ShapeMismatch(format!(
                "header M={m}, K={k}, d={dim}, sub-dim={sub_dim} is inconsistent"
            )));
        }
        let n_groups = r.u32()? as usize;
        let n_fields = r.u32()? as usize;
        let mut fields = Vec::with_capacity(n_fields.min(1 << 16));
        for _ in 0..n_fields {
            let name = r.str()?;
            let offset = r.u32()? as usize;
            let len = r.u32()? as usize;
            let group = r.u32()? as usize;
            fields.push(CodebookField {
                name,
                offset,
                len,
                group,
            });
        }
        let n_values = r.u64()? as usize;
        let expected = n_groups * m * k * sub_dim;
        if n_values != expected {
            return Err(Error::ShapeMismatch(format!(
                "codebook section holds {n_values} values, header implies {expected}"
            )));
        }
        let codewords = r.f32_vec(n_values)?;
        let n_features = r.u64()? as usize;
        let covered: usize = fields.iter().map(|f| f.len).sum();
        if n_features != covered {
            return Err(Error::ShapeMismatch(format!(
                "assignment table holds {n_features} rows, field table covers {covered}"
            )));
        }
        let bits = r.u8()? as u32;
        if bits != code_bits(k) {
            return Err(Error::ShapeMismatch(format!(
                "code width {bits} bits does not match K={k}"
            )));
        }
        let n_codes = n_features * m;
        let packed = r.bytes(packed_len(n_codes, bits))?;
        let codes = unpack_codes(&packed, n_codes, bits);
        r.expect_end()?;
        let cb = Codebook {
            m,
            k,
            dim,
            n_groups,
            fields,
            codewords,
            codes,
        };
        cb.validate().map_err(|e| match e {
            Error::CodeOutOfRange { .. } => Error::ShapeMismatch(e.to_string()),
            other => other,
        })?;
        Ok(cb)
    }
}

/// Bytes needed for `n` codes packed back to back at `bits` each.
pub fn packed_len(n: usize, bits: u32) -> usize {
    (n * bits as usize).div_ceil(8)
}

fn pack_codes(row: &[u32], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(row.len(), bits)];
    let mut pos = 0usize;
    for &c in row {
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

fn unpack_codes(packed: &[u8], m: usize, bits: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(m);
    let mut pos = 0usize;
    for _ in 0..m {
        let mut c = 0u32;
        for b in 0..bits {
            if (packed[pos / 8] >> (pos % 8)) & 1 == 1 {
                c |= 1 << b;
            }
            pos += 1;
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binio::snap_to_f32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_codebook(seed: u64, m: usize, k: usize, dim: usize, groups: usize) -> Codebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens = [5usize, 3, 7];
        let mut fields = Vec::new();
        let mut offset = 0;
        for (i, &len) in lens.iter().enumerate() {
            fields.push(CodebookField {
                name: format!("C{}", i + 1),
                offset,
                len,
                group: i % groups,
            });
            offset += len;
        }
        let mut codewords: Vec<f64> = (0..groups * m * k * (dim / m)).map(|_| rng.random_range(-1.0..1.0)).collect();
        snap_to_f32(&mut codewords);
        Codebook {
            m,
            k,
            dim,
            n_groups: groups,
            fields,
            codewords,
            codes: (0..offset * m).map(|_| rng.random_range(0..k as u32)).collect(),
        }
    }

    fn bytes(cb: &Codebook) -> Vec<u8> {
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bitwise() {
        for (m, k, groups) in [(4, 64, 1), (2, 1, 1), (1, 5, 3), (4, 3, 2), (8, 256, 1)] {
            let cb = random_codebook(7, m, k, 16, groups);
            let buf = bytes(&cb);
            let back = Codebook::read_from(buf.as_slice()).unwrap();
            assert_eq!(back, cb);
            assert_eq!(bytes(&back), buf);
        }
    }

    #[test]
    fn corrupted_files() {
        let cb = random_codebook(3, 4, 8, 16, 1);
        let mut buf = bytes(&cb);
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(Codebook::read_from(truncated), Err(Error::Truncated { .. })));
        // K lives right after the magic and M
        let k_at = MAGIC.len() + 4;
        buf[k_at] = 9;
        assert!(matches!(Codebook::read_from(buf.as_slice()), Err(Error::ShapeMismatch(_))));
        buf[0] = b'X';
        assert!(matches!(Codebook::read_from(buf.as_slice()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn out_of_range_code_in_file_is_shape_mismatch() {
        // K=3 stores 2 bits, so the value 3 is representable but invalid.
        let mut cb = random_codebook(5, 2, 3, 4, 1);
        cb.codes.iter_mut().for_each(|c| *c = 0);
        let mut buf = bytes(&cb);
        let first = buf.len() - packed_len(cb.codes.len(), 2);
        buf[first] = 0b0011;
        assert!(matches!(Codebook::read_from(buf.as_slice()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bit_widths() {
        assert_eq!(code_bits(1), 1);
        assert_eq!(code_bits(2), 1);
        assert_eq!(code_bits(3), 2);
        assert_eq!(code_bits(4), 2);
        assert_eq!(code_bits(64), 6);
        assert_eq!(code_bits(65), 7);
        let row = [5, 0, 63, 17];
        assert_eq!(unpack_codes(&pack_codes(&row, 6), 4, 6), row.to_vec());
        assert_eq!(packed_len(1000 * 2, 2), 500);
    }

    #[test]
    fn lookup_matches_reconstruct() {
        let cb = random_codebook(9, 2, 4, 4, 2);
        let lookup = cb.to_lookup();
        assert_eq!(lookup.field_groups, vec![0, 1, 0]);
        assert_eq!(lookup.codeword_len(cb.dim), cb.codewords.len());
        let q = cb.reconstruct_feature(6).unwrap();
        let v = cb.view(1);
        let row = cb.code_row(6);
        assert_eq!(&q[..2], v.codeword(0, row[0] as usize));
        assert!(cb.reconstruct_feature(99).is_err());
    }

    #[test]
    fn entropy_of_balanced_and_collapsed() {
        let mut cb = random_codebook(1, 1, 4, 2, 1);
        let n = cb.n_features();
        cb.codes = (0..n as u32).map(|j| j % 4).collect();
        let weights = vec![1.0; n];
        // 15 features over 4 codes: 4,4,4,3
        let p = [4.0 / 15.0, 4.0 / 15.0, 4.0 / 15.0, 3.0 / 15.0];
        let h: f64 = -p.iter().map(|v: &f64| v * v.ln()).sum::<f64>();
        assert!((cb.weighted_code_entropy(&weights) - h).abs() < 1e-12);
        cb.codes = vec![2; n];
        assert_eq!(cb.weighted_code_entropy(&weights), 0.0);
    }
}

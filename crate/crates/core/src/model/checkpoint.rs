use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ctr::{CtrModel, EmbeddingStorage, ModelKind, ModelShape, QuantizedLookup};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"MECMDL1";

impl CtrModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Layout: magic, variant tag, shape table (d, vocab sizes, numeric
    /// count, hidden widths), embedding storage (dense, or quantized with
    /// M, K, groups and the frozen code table), then every parameter as a
    /// little-endian f32 in layout order.
    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let shape = self.shape();
        let mut w = Writer::new(out);
        w.magic(MAGIC)?;
        w.u8(shape.kind.tag())?;
        w.u32(shape.dim as u32)?;
        w.u32(shape.vocab_sizes.len() as u32)?;
        for &v in &shape.vocab_sizes {
            w.u32(v as u32)?;
        }
        w.u32(shape.n_numeric as u32)?;
        w.u32(shape.hidden.len() as u32)?;
        for &h in &shape.hidden {
            w.u32(h as u32)?;
        }
        match &self.layout.embedding {
            EmbeddingStorage::Dense { .. } => w.u8(0)?,
            EmbeddingStorage::Quantized { lookup, .. } => {
                w.u8(1)?;
                w.u32(lookup.m as u32)?;
                w.u32(lookup.k as u32)?;
                w.u32(lookup.n_groups as u32)?;
                for &g in &lookup.field_groups {
                    w.u32(g as u32)?;
                }
                w.u64(lookup.codes.len() as u64)?;
                for &c in &lookup.codes {
                    w.u32(c)?;
                }
            }
        }
        w.u64(self.params().len() as u64)?;
        w.f32_slice(self.params())?;
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "model");
        r.expect_magic(MAGIC, "MECMDL1")?;
        let tag = r.u8()?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::VersionMismatch {
            what: "model variant",
            found: tag.to_string(),
        })?;
        let dim = r.u32()? as usize;
        let n_cat = r.u32()? as usize;
        let vocab_sizes = (0..n_cat).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n_numeric = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        let hidden = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let quantized = match r.u8()? {
            0 => None,
            1 => {
                let m = r.u32()? as usize;
                let k = r.u32()? as usize;
                let n_groups = r.u32()? as usize;
                let field_groups = (0..n_cat).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
                let n_codes = r.u64()? as usize;
                let expected = vocab_sizes.iter().sum::<usize>() * m;
                if n_codes != expected {
                    return Err(Error::ShapeMismatch(format!(
                        "{n_codes} code entries stored, shape implies {expected}"
                    )));
                }
                let codes = (0..n_codes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                Some(QuantizedLookup {
                    m,
                    k,
                    n_groups,
                    field_groups,
                    codes,
                })
            }
            other => {
                return Err(Error::VersionMismatch {
                    what: "embedding storage",
                    found: other.to_string(),
                })
            }
        };
        let n_params = r.u64()? as usize;
        let shape = ModelShape {
            kind,
            dim,
            vocab_sizes,
            n_numeric,
            hidden,
        };
        let expected = CtrModel::param_count(&shape, quantized.clone())?;
        if n_params != expected {
            return Err(Error::ShapeMismatch(format!(
                "{n_params} parameters stored, shape implies {expected}"
            )));
        }
        let params = r.f32_vec(n_params)?;
        r.expect_end()?;
        CtrModel::from_raw(shape, quantized, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ModelShape {
            kind: ModelKind::Pnn,
            dim: 4,
            vocab_sizes: vec![3, 2],
            n_numeric: 1,
            hidden: vec![4],
        };
        let lookup = QuantizedLookup {
            m: 2,
            k: 2,
            n_groups: 1,
            field_groups: vec![0, 0],
            codes: vec![0, 1, 1, 0, 1, 1, 0, 0, 1, 0],
        };
        let model = CtrModel::new_quantized(shape, lookup, &[0.5; 8], &mut rng).unwrap();
        let bytes = model.write_to(Vec::new()).unwrap();
        assert_eq!(CtrModel::read_from(&bytes[..]).unwrap(), model);

        let mut bad = bytes.clone();
        bad[2] = b'Z';
        assert!(matches!(CtrModel::read_from(&bad[..]), Err(Error::BadMagic { .. })));
        assert!(matches!(
            CtrModel::read_from(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad_tag = bytes.clone();
        bad_tag[7] = 9;
        assert!(matches!(CtrModel::read_from(&bad_tag[..]), Err(Error::VersionMismatch { .. })));
    }
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{split_tokens, RawRecord, Schema};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"MECVOC1";

/// Token → id map for one categorical field.
///
/// Retained tokens hold ids `0..retained`, in first-occurrence order; the
/// OOV id is always `retained` and is present even when unused.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVocabulary {
    name: String,
    ids: IndexMap<String, u32>,
    /// Training-split frequency per id, OOV last.
    counts: Vec<u64>,
}

impl FieldVocabulary {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of embedding rows, OOV included.
    pub fn size(&self) -> usize {
        self.counts.len()
    }

    pub fn oov_id(&self) -> u32 {
        self.ids.len() as u32
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or_else(|| self.oov_id())
    }

    /// Inverse lookup; `None` for the OOV id or ids out of range.
    pub fn token(&self, id: u32) -> Option<&str> {
        self.ids.get_index(id as usize).map(|(t, _)| t.as_str())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn retained(&self) -> usize {
        self.ids.len()
    }
}

/// Per-field vocabularies with training-split frequency counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVocabulary {
    fields: Vec<FieldVocabulary>,
    delimiter: String,
    min_count: u64,
}

impl FeatureVocabulary {
    pub fn fields(&self) -> &[FieldVocabulary] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&FieldVocabulary> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn delimiter(&self) -> &str {
        &self.delimiter
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.fields.iter().map(FieldVocabulary::size).collect()
    }

    pub fn total_features(&self) -> usize {
        self.fields.iter().map(FieldVocabulary::size).sum()
    }

    /// Frequency counts over the concatenated global feature index.
    pub fn global_counts(&self) -> Vec<u64> {
        self.fields
            .iter()
            .flat_map(|f| f.counts.iter().copied())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        self.write_to(file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Layout: magic, delimiter, min_count, field count, then per field its
    /// name and `(field, is_oov, token, id, count)` rows in id order.
    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let mut w = Writer::new(out);
        w.magic(MAGIC)?;
        w.str(&self.delimiter)?;
        w.u64(self.min_count)?;
        w.u32(self.fields.len() as u32)?;
        for (fi, field) in self.fields.iter().enumerate() {
            w.str(&field.name)?;
            w.u32(field.size() as u32)?;
            for (id, &count) in field.counts.iter().enumerate() {
                let token = field.token(id as u32);
                w.u32(fi as u32)?;
                w.u8(u8::from(token.is_none()))?;
                w.str(token.unwrap_or(""))?;
                w.u32(id as u32)?;
                w.u64(count)?;
            }
        }
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "vocabulary");
        r.expect_magic(MAGIC, "MECVOC1")?;
        let delimiter = r.str()?;
        let min_count = r.u64()?;
        let n_fields = r.u32()? as usize;
        let mut fields = Vec::with_capacity(n_fields);
        for fi in 0..n_fields {
            let name = r.str()?;
            let rows = r.u32()? as usize;
            if rows == 0 {
                return Err(Error::ShapeMismatch(format!("field `{name}` has no OOV row")));
            }
            let mut ids = IndexMap::with_capacity(rows - 1);
            let mut counts = Vec::with_capacity(rows);
            for expected_id in 0..rows {
                let field_idx = r.u32()? as usize;
                let is_oov = r.u8()? != 0;
                let token = r.str()?;
                let id = r.u32()? as usize;
                let count = r.u64()?;
                let oov_expected = expected_id + 1 == rows;
                if field_idx != fi || id != expected_id || is_oov != oov_expected {
                    return Err(Error::ShapeMismatch(format!(
                        "vocabulary row {expected_id} of field `{name}` is out of order"
                    )));
                }
                if !is_oov {
                    ids.insert(token, id as u32);
                }
                counts.push(count);
            }
            fields.push(FieldVocabulary { name, ids, counts });
        }
        r.expect_end()?;
        Ok(Self {
            fields,
            delimiter,
            min_count,
        })
    }
}

/// Builds per-field vocabularies from training records.
///
/// Tokens seen at least `min_count` times get ids in first-occurrence order;
/// rarer tokens fold into the OOV id, whose count is the sum of what folded.
pub fn build_vocabulary(
    records: &[RawRecord],
    schema: &Schema,
    min_count: u64,
) -> Result<FeatureVocabulary> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot build a vocabulary from zero records".into()));
    }
    if min_count < 1 {
        return Err(Error::InvalidInput("min_count must be at least 1".into()));
    }
    let names: Vec<&str> = schema.categorical_names().collect();
    let n_numeric = schema.n_numeric();
    let mut tallies: Vec<IndexMap<&str, u64>> = vec![IndexMap::new(); names.len()];
    for (index, record) in records.iter().enumerate() {
        if record.categorical.len() != names.len() || record.numeric.len() != n_numeric {
            return Err(Error::SchemaMismatch {
                index,
                expected: names.len() + n_numeric,
                found: record.categorical.len() + record.numeric.len(),
            });
        }
        for (tally, cell) in tallies.iter_mut().zip(&record.categorical) {
            for token in split_tokens(cell, &schema.multi_value_delimiter) {
                *tally.entry(token).or_insert(0) += 1;
            }
        }
    }
    let fields = names
        .iter()
        .zip(tallies)
        .map(|(name, tally)| {
            let mut ids = IndexMap::new();
            let mut counts = Vec::new();
            let mut folded = 0u64;
            for (token, count) in tally {
                if count >= min_count {
                    ids.insert(token.to_string(), counts.len() as u32);
                    counts.push(count);
                } else {
                    folded += count;
                }
            }
            counts.push(folded);
            FieldVocabulary {
                name: name.to_string(),
                ids,
                counts,
            }
        })
        .collect();
    Ok(FeatureVocabulary {
        fields,
        delimiter: schema.multi_value_delimiter.clone(),
        min_count,
    })
}

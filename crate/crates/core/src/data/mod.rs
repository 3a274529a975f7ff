//! Ingestion of labeled CTR data: schemas, vocabularies, splits and the
//! synthetic long-tail generator used for desk-scale experiments.

mod csv_source;
mod split;
mod synthetic;
mod vocab;

use serde::{Deserialize, Serialize};

pub use csv_source::{read_csv, read_csv_from};
pub use split::{temporal_split, DatasetSplit, SplitRatios};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use vocab::{build_vocabulary, FeatureVocabulary, FieldVocabulary};

use crate::error::{Error, Result};

pub const DEFAULT_MULTI_VALUE_DELIMITER: &str = "|";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

/// Column layout of a CSV source. Every column other than `label_column`
/// is a field, taken in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schema {
    pub label_column: usize,
    pub fields: Vec<FieldSpec>,
    pub has_header: bool,
    pub csv_delimiter: String,
    pub multi_value_delimiter: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            label_column: 0,
            fields: Vec::new(),
            has_header: false,
            csv_delimiter: ",".to_string(),
            multi_value_delimiter: DEFAULT_MULTI_VALUE_DELIMITER.to_string(),
        }
    }
}

impl Schema {
    pub fn categorical_names(&self) -> impl Iterator<Item = &str> {
        self.fields
            .iter()
            .filter(|f| f.kind == FieldKind::Categorical)
            .map(|f| f.name.as_str())
    }

    pub fn n_categorical(&self) -> usize {
        self.categorical_names().count()
    }

    /// Label in column 0 followed by the given categorical fields.
    pub fn categorical_only(names: &[&str]) -> Self {
        Self {
            fields: names
                .iter()
                .map(|n| FieldSpec {
                    name: n.to_string(),
                    kind: FieldKind::Categorical,
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn n_numeric(&self) -> usize {
        self.fields.len() - self.n_categorical()
    }
}

/// One parsed CSV row before vocabulary lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub label: u8,
    /// Raw token strings; a cell may hold several delimiter-joined values.
    pub categorical: Vec<String>,
    /// `None` marks a missing or unparsable value.
    pub numeric: Vec<Option<f64>>,
}

/// A labeled sample with categorical fields resolved to field-local ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub label: u8,
    /// One non-empty id list per categorical field.
    pub categorical: Vec<Vec<u32>>,
    pub numeric: Vec<f64>,
}

/// Numeric preprocessing: missing values become 0, values above 2 are
/// log-compressed, everything else passes through.
pub fn transform_numeric(x: Option<f64>) -> f64 {
    match x {
        Some(v) if v.is_finite() => {
            if v > 2.0 {
                v.ln()
            } else {
                v
            }
        }
        _ => 0.0,
    }
}

/// Resolves a raw record against `vocab`; unseen tokens map to the field's
/// OOV id and empty cells encode as `[OOV]`.
pub fn encode_record(raw: &RawRecord, vocab: &FeatureVocabulary) -> Result<InteractionRecord> {
    if raw.categorical.len() != vocab.fields().len() {
        return Err(Error::DimensionMismatch(format!(
            "record has {} categorical fields, vocabulary has {}",
            raw.categorical.len(),
            vocab.fields().len()
        )));
    }
    let delimiter = vocab.delimiter();
    let categorical = raw
        .categorical
        .iter()
        .zip(vocab.fields())
        .map(|(cell, field)| {
            let mut ids: Vec<u32> = split_tokens(cell, delimiter)
                .map(|token| field.id(token))
                .collect();
            if ids.is_empty() {
                ids.push(field.oov_id());
            }
            ids
        })
        .collect();
    Ok(InteractionRecord {
        label: raw.label,
        categorical,
        numeric: raw.numeric.iter().map(|&x| transform_numeric(x)).collect(),
    })
}

pub(crate) fn split_tokens<'a>(cell: &'a str, delimiter: &'a str) -> impl Iterator<Item = &'a str> {
    let parts: Box<dyn Iterator<Item = &'a str>> = if delimiter.is_empty() {
        Box::new(std::iter::once(cell))
    } else {
        Box::new(cell.split(delimiter))
    };
    parts.filter(|t| !t.is_empty())
}

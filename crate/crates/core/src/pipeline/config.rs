use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{Schema, SplitRatios, SyntheticConfig};
use crate::error::ConfigError;
use crate::model::{ModelKind, TrainConfig};
use crate::quantizer::QuantizerConfig;

/// Pipeline variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Popularity-weighted regularization plus contrastive learning.
    #[default]
    Mec,
    NoCons,
    NoReg,
    FreqPq,
    BasicPq,
    /// Stage-2 model on the dense stage-1 embeddings; no quantization.
    DenseBaseline,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::DenseBaseline,
        Variant::BasicPq,
        Variant::FreqPq,
        Variant::NoReg,
        Variant::NoCons,
        Variant::Mec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mec => "mec",
            Variant::NoCons => "no_cons",
            Variant::NoReg => "no_reg",
            Variant::FreqPq => "freq_pq",
            Variant::BasicPq => "basic_pq",
            Variant::DenseBaseline => "dense_baseline",
        }
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Mec => "MEC",
            Variant::NoCons => "w/o cons",
            Variant::NoReg => "w/o reg",
            Variant::FreqPq => "freq. PQ",
            Variant::BasicPq => "basic PQ",
            Variant::DenseBaseline => "w/o PQ",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn is_quantized(self) -> bool {
        self != Variant::DenseBaseline
    }

    /// Quantizer settings with this variant's loss terms switched off.
    pub fn quantizer_config(self, base: &QuantizerConfig) -> QuantizerConfig {
        let mut q = base.clone();
        match self {
            Variant::Mec | Variant::DenseBaseline => {}
            Variant::NoCons => q.beta = 0.0,
            Variant::NoReg => q.alpha = 0.0,
            Variant::FreqPq | Variant::BasicPq => {
                q.alpha = 0.0;
                q.beta = 0.0;
            }
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSourceConfig {
    pub path: String,
    pub schema: Schema,
    pub min_count: u64,
    pub ratios: SplitRatios,
}

impl Default for CsvSourceConfig {
    fn default() -> Self {
        Self {
            path: String::new(),
            schema: Schema::default(),
            min_count: 1,
            ratios: SplitRatios::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticConfig,
    pub csv: CsvSourceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            hidden: vec![64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub model: ModelKind,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub k: Vec<usize>,
    pub m: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alpha: vec![1.0, 0.1, 0.01, 0.001],
            beta: vec![0.1, 0.01, 0.001, 0.0001],
            k: vec![64],
            m: vec![4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub repetitions: usize,
    pub variants: Vec<Variant>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            repetitions: 10,
            variants: vec![
                Variant::DenseBaseline,
                Variant::BasicPq,
                Variant::NoReg,
                Variant::NoCons,
                Variant::Mec,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub quantizer: QuantizerConfig,
    pub sweep: SweepConfig,
    pub latency: LatencyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 12,
            batch_size: 256,
            lr: 2e-3,
            l2: 0.0,
            patience: 2,
        };
        Self {
            seed: 2024,
            variant: Variant::Mec,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stage1: StageConfig {
                model: ModelKind::DeepFm,
                train: train.clone(),
            },
            stage2: StageConfig {
                model: ModelKind::Pnn,
                train,
            },
            quantizer: QuantizerConfig::default(),
            sweep: SweepConfig::default(),
            latency: LatencyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.model.dim == 0 {
            return invalid("model.dim must be positive".into());
        }
        if self.model.hidden.contains(&0) {
            return invalid("model.hidden widths must be positive".into());
        }
        self.quantizer.validate(self.model.dim)?;
        if !matches!(self.stage1.model, ModelKind::Fm | ModelKind::DeepFm) {
            return invalid(format!(
                "stage1.model must be fm or deepfm, got {}",
                self.stage1.model.name()
            ));
        }
        if self.stage2.model == ModelKind::Lr {
            return invalid("stage2.model must use embeddings (fm, deepfm or pnn)".into());
        }
        for (key, train) in [("stage1.train", &self.stage1.train), ("stage2.train", &self.stage2.train)] {
            train
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("{key}: {e}")))?;
        }
        match self.data.source {
            DataSource::Synthetic => self
                .data
                .synthetic
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("data.synthetic: {e}")))?,
            DataSource::Csv => {
                if self.data.csv.path.is_empty() {
                    return invalid("data.csv.path is required when data.source = \"csv\"".into());
                }
                if self.data.csv.schema.n_categorical() == 0 {
                    return invalid("data.csv.schema needs at least one categorical field".into());
                }
                if self.data.csv.min_count == 0 {
                    return invalid("data.csv.min_count must be at least 1".into());
                }
                self.data
                    .csv
                    .ratios
                    .validate()
                    .map_err(|e| ConfigError::Invalid(format!("data.csv.ratios: {e}")))?;
            }
        }
        let s = &self.sweep;
        if s.alpha.is_empty() || s.beta.is_empty() || s.k.is_empty() || s.m.is_empty() {
            return invalid("sweep axes must each hold at least one value".into());
        }
        if self.latency.repetitions == 0 {
            return invalid("latency.repetitions must be at least 1".into());
        }
        Ok(())
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Coerce `given` to the type of `expected`, or report a mismatch at `key`.
fn coerce(key: &str, expected: &Value, given: Value) -> Result<Value, ConfigError> {
    let mismatch = |given: &Value| ConfigError::TypeMismatch {
        key: key.to_string(),
        expected: type_name(expected).to_string(),
        found: type_name(given).to_string(),
    };
    match (expected, given) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Table(schema), Value::Table(t)) => {
            let mut out = schema.clone();
            for (k, v) in t {
                let child = format!("{key}.{k}");
                let Some(slot) = schema.get(&k) else {
                    return Err(ConfigError::UnknownKey(child));
                };
                out.insert(k, coerce(&child, slot, v)?);
            }
            Ok(Value::Table(out))
        }
        (Value::Array(schema), Value::Array(items)) => match schema.first() {
            Some(proto) => items
                .into_iter()
                .enumerate()
                .map(|(i, v)| coerce(&format!("{key}[{i}]"), proto, v))
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array),
            None => Ok(Value::Array(items)),
        },
        (e, g) if std::mem::discriminant(e) == std::mem::discriminant(&g) => Ok(g),
        (_, g) => Err(mismatch(&g)),
    }
}

fn parse_override_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Resolve a run configuration from optional TOML text and `KEY=VALUE`
/// overrides with dotted keys. Overrides win; the result is validated.
pub fn merge_config(file: Option<&str>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let defaults = Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut merged = match file {
        Some(text) => {
            let table: Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            let mut out = defaults.as_table().expect("config is a table").clone();
            for (k, v) in table {
                let Some(slot) = out.get(&k) else {
                    return Err(ConfigError::UnknownKey(k));
                };
                let value = coerce(&k, slot, v)?;
                out.insert(k, value);
            }
            Value::Table(out)
        }
        None => defaults.clone(),
    };

    for raw in overrides {
        let (key, value) = raw
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .filter(|(k, _)| !k.is_empty())
            .ok_or_else(|| ConfigError::MalformedOverride(raw.clone()))?;
        let path: Vec<&str> = key.split('.').collect();
        let mut schema = &defaults;
        for part in &path {
            schema = schema
                .get(part)
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        let given = match schema {
            Value::String(_) => Value::String(value.trim_matches('"').to_string()),
            _ => parse_override_value(value),
        };
        let value = coerce(key, schema, given)?;
        let mut slot = &mut merged;
        for part in &path {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        }
        *slot = value;
    }

    let config: RunConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        assert_eq!(merge_config(Some(&text), &[]).unwrap(), c);
        assert_eq!(merge_config(None, &[]).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = merge_config(Some("seed = 7\n[quantizer]\nk = 32\nalpha = 1\n"), &[]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.quantizer.k, 32);
        assert_eq!(c.quantizer.alpha, 1.0);
        assert_eq!(c.quantizer.m, 4);
    }

    #[test]
    fn overrides_win() {
        let c = merge_config(
            Some("[quantizer]\nalpha = 0.5\n"),
            &["quantizer.alpha=0.001".into(), "variant=no_reg".into(), "stage2.model=\"fm\"".into()],
        )
        .unwrap();
        assert_eq!(c.quantizer.alpha, 0.001);
        assert_eq!(c.variant, Variant::NoReg);
        assert_eq!(c.stage2.model, ModelKind::Fm);
        assert!(c.to_toml().contains("alpha = 0.001"));
        let c = merge_config(None, &["sweep.k=[16, 32]".into()]).unwrap();
        assert_eq!(c.sweep.k, vec![16, 32]);
    }

    #[test]
    fn rejections() {
        assert_eq!(
            merge_config(None, &["quantizer.m=5".into()]),
            Err(ConfigError::Invalid("d mod M != 0".into()))
        );
        assert_eq!(
            merge_config(None, &["quantizer.gamma=1".into()]),
            Err(ConfigError::UnknownKey("quantizer.gamma".into()))
        );
        assert_eq!(
            merge_config(Some("[model]\nwidth = 3\n"), &[]),
            Err(ConfigError::UnknownKey("model.width".into()))
        );
        assert!(matches!(
            merge_config(None, &["quantizer.k=big".into()]),
            Err(ConfigError::TypeMismatch { .. })
        ));
        assert!(matches!(
            merge_config(None, &["quantizer.alpha".into()]),
            Err(ConfigError::MalformedOverride(_))
        ));
        assert!(matches!(merge_config(Some("seed = ["), &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(
            merge_config(None, &["variant=fancy".into()]),
            Err(ConfigError::Parse(_))
        ));
        assert!(merge_config(None, &["stage1.model=pnn".into()]).is_err());
    }

    #[test]
    fn variant_settings() {
        let q = QuantizerConfig::default();
        assert_eq!(Variant::NoCons.quantizer_config(&q).beta, 0.0);
        assert_eq!(Variant::NoCons.quantizer_config(&q).alpha, q.alpha);
        assert_eq!(Variant::NoReg.quantizer_config(&q).alpha, 0.0);
        let b = Variant::BasicPq.quantizer_config(&q);
        assert_eq!((b.alpha, b.beta), (0.0, 0.0));
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()), Some(v));
        }
    }
}

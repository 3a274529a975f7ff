//! On-disk layout of a pipeline output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, FeatureVocabulary, InteractionRecord};
use crate::error::{Error, Result};
use crate::model::CtrModel;
use crate::quantizer::Codebook;

use super::report::{QuantizerSummary, StageSummary};
use super::{Dataset, QuantizeOutput, Stage1Output};

pub const CONFIG_ECHO: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.bin";
pub const SPLITS_FILE: &str = "splits.json";
pub const STAGE1_MODEL: &str = "stage1.model";
pub const STAGE1_SUMMARY: &str = "stage1.json";
pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const QUANTIZER_SUMMARY: &str = "quantizer.json";
pub const STAGE2_MODEL: &str = "stage2.model";
pub const REPORT_FILE: &str = "report.json";

const SPLITS_SCHEMA: &str = "mec-splits/1";
const STAGE_SCHEMA: &str = "mec-stage/1";

/// Path of an input artifact, or [`Error::MissingArtifact`] when absent.
pub fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn check_schema(value: &serde_json::Value, expected: &str, what: &'static str) -> Result<()> {
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(s) if s == expected => Ok(()),
        other => Err(Error::VersionMismatch {
            what,
            found: other.unwrap_or("<none>").to_string(),
        }),
    }
}

#[derive(Serialize, Deserialize)]
struct SplitsFile {
    schema: String,
    n_numeric: usize,
    split: DatasetSplit<InteractionRecord>,
}

impl Dataset {
    /// Writes the vocabulary and the encoded splits into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let file = SplitsFile {
            schema: SPLITS_SCHEMA.into(),
            n_numeric: self.n_numeric,
            split: self.split.clone(),
        };
        fs::write(dir.join(SPLITS_FILE), serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = FeatureVocabulary::load(&require(dir, VOCAB_FILE)?)?;
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(require(dir, SPLITS_FILE)?)?)?;
        check_schema(&value, SPLITS_SCHEMA, "splits")?;
        let file: SplitsFile = serde_json::from_value(value)?;
        let sizes = vocab.sizes();
        for (index, rec) in file.split.train.iter().chain(&file.split.val).chain(&file.split.test).enumerate() {
            if rec.categorical.len() != sizes.len() || rec.numeric.len() != file.n_numeric {
                return Err(Error::SchemaMismatch {
                    index,
                    expected: sizes.len() + file.n_numeric,
                    found: rec.categorical.len() + rec.numeric.len(),
                });
            }
            for (field, ids) in rec.categorical.iter().enumerate() {
                if let Some(&id) = ids.iter().find(|&&id| id as usize >= sizes[field]) {
                    return Err(Error::IdOutOfRange {
                        field,
                        id,
                        size: sizes[field],
                    });
                }
            }
        }
        Ok(Self {
            split: file.split,
            vocab,
            n_numeric: file.n_numeric,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StageFile<T> {
    schema: String,
    summary: T,
    seconds: f64,
    epoch_seconds: Vec<f64>,
}

fn save_stage<T: Serialize>(path: PathBuf, summary: T, seconds: f64, epoch_seconds: Vec<f64>) -> Result<()> {
    let file = StageFile {
        schema: STAGE_SCHEMA.into(),
        summary,
        seconds,
        epoch_seconds,
    };
    fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

fn load_stage<T: for<'de> Deserialize<'de>>(path: PathBuf) -> Result<StageFile<T>> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(&value, STAGE_SCHEMA, "stage summary")?;
    Ok(serde_json::from_value(value)?)
}

impl Stage1Output {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join(STAGE1_MODEL))?;
        save_stage(dir.join(STAGE1_SUMMARY), &self.summary, self.seconds, self.epoch_seconds.clone())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = CtrModel::load(&require(dir, STAGE1_MODEL)?)?;
        let stage: StageFile<StageSummary> = load_stage(require(dir, STAGE1_SUMMARY)?)?;
        let table = model
            .embedding_table()
            .ok_or_else(|| Error::InvalidInput("stage-1 checkpoint must hold dense embeddings".into()))?;
        Ok(Self {
            model,
            table,
            summary: stage.summary,
            seconds: stage.seconds,
            epoch_seconds: stage.epoch_seconds,
        })
    }
}

impl QuantizeOutput {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.codebook.save(&dir.join(CODEBOOK_FILE))?;
        save_stage(dir.join(QUANTIZER_SUMMARY), &self.summary, self.seconds, Vec::new())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let codebook = Codebook::load(&require(dir, CODEBOOK_FILE)?)?;
        let stage: StageFile<QuantizerSummary> = load_stage(require(dir, QUANTIZER_SUMMARY)?)?;
        Ok(Self {
            codebook,
            summary: stage.summary,
            seconds: stage.seconds,
        })
    }
}

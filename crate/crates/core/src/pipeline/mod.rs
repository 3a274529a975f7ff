//! Two-stage orchestration: pre-train dense embeddings, quantize them, then
//! retrain a downstream model on the codebook.

pub mod artifacts;
mod config;
mod memory;
mod report;

use std::time::Instant;

pub use config::{
    merge_config, CsvSourceConfig, DataConfig, DataSource, LatencyConfig, ModelConfig, RunConfig, StageConfig,
    SweepConfig, Variant,
};
pub use memory::{account_memory, MemoryAccount, QuantShape};
pub use report::{DatasetSummary, FieldSize, QuantizerSummary, RunReport, StageSummary, Timing, REPORT_SCHEMA};

use crate::data::{
    build_vocabulary, encode_record, generate_synthetic, read_csv, temporal_split, DatasetSplit, FeatureVocabulary,
    InteractionRecord,
};
use crate::error::{Error, Result};
use crate::eval::metric_pair;
use crate::model::{predict_parallel, train_epochs, CtrModel, EmbeddingTable, ModelShape, NumericMap, TrainOutcome};
use crate::quantizer::{popularity_weight, train_codebooks, Codebook, EpochTrace};
use crate::seed::{derive_seed, rng_for};

/// Encoded splits plus the vocabulary built on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: DatasetSplit<InteractionRecord>,
    pub vocab: FeatureVocabulary,
    pub n_numeric: usize,
}

impl Dataset {
    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            provenance: self.split.provenance.clone(),
            n_train: self.split.train.len(),
            n_val: self.split.val.len(),
            n_test: self.split.test.len(),
            fields: self
                .vocab
                .fields()
                .iter()
                .map(|f| FieldSize {
                    name: f.name().to_string(),
                    size: f.size(),
                })
                .collect(),
            total_features: self.vocab.total_features(),
        }
    }

    fn field_sizes(&self) -> Vec<(String, usize)> {
        self.vocab
            .fields()
            .iter()
            .map(|f| (f.name().to_string(), f.size()))
            .collect()
    }
}

/// Builds the dataset named by the config: the seeded synthetic generator or a CSV file.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match config.data.source {
        DataSource::Synthetic => {
            let synth = &config.data.synthetic;
            let (split, vocab) = generate_synthetic(synth, derive_seed(config.seed, "data"))?;
            Ok(Dataset {
                split,
                vocab,
                n_numeric: synth.n_numeric,
            })
        }
        DataSource::Csv => {
            let csv = &config.data.csv;
            let raw = read_csv(std::path::Path::new(&csv.path), &csv.schema)?;
            let split = temporal_split(raw, csv.ratios, format!("csv({})", csv.path))?;
            let vocab = build_vocabulary(&split.train, &csv.schema, csv.min_count)?;
            let encode = |records: &[crate::data::RawRecord]| -> Result<Vec<InteractionRecord>> {
                records.iter().map(|r| encode_record(r, &vocab)).collect()
            };
            let encoded = DatasetSplit {
                train: encode(&split.train)?,
                val: encode(&split.val)?,
                test: encode(&split.test)?,
                ratios: split.ratios,
                provenance: split.provenance,
            };
            Ok(Dataset {
                split: encoded,
                vocab,
                n_numeric: csv.schema.n_numeric(),
            })
        }
    }
}

pub(crate) fn shape_for(config: &RunConfig, data: &Dataset, stage: &StageConfig) -> ModelShape {
    ModelShape {
        kind: stage.model,
        dim: config.model.dim,
        vocab_sizes: data.vocab.sizes(),
        n_numeric: data.n_numeric,
        hidden: config.model.hidden.clone(),
    }
}

fn summarize(outcome: &TrainOutcome, data: &Dataset) -> Result<StageSummary> {
    let eval = |records: &[InteractionRecord]| -> Result<_> {
        let scores = predict_parallel(&outcome.model, records)?;
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        metric_pair(&labels, &scores)
    };
    Ok(StageSummary {
        model: outcome.model.kind(),
        n_params: outcome.model.n_params(),
        best_epoch: outcome.best_epoch,
        history: outcome.history.clone(),
        val: eval(&data.split.val)?,
        test: eval(&data.split.test)?,
    })
}

/// Result of the pre-training stage.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub model: CtrModel,
    pub table: EmbeddingTable,
    pub summary: StageSummary,
    pub seconds: f64,
    pub epoch_seconds: Vec<f64>,
}

impl Stage1Output {
    /// Rebuilds the stage output from a saved stage-1 checkpoint.
    pub fn from_model(model: CtrModel, data: &Dataset) -> Result<Self> {
        let table = model
            .embedding_table()
            .ok_or_else(|| Error::InvalidInput("stage-1 checkpoint must hold dense embeddings".into()))?;
        let outcome = TrainOutcome {
            model,
            history: Vec::new(),
            best_epoch: 0,
            epoch_seconds: Vec::new(),
        };
        let summary = summarize(&outcome, data)?;
        Ok(Self {
            model: outcome.model,
            table,
            summary,
            seconds: 0.0,
            epoch_seconds: Vec::new(),
        })
    }
}

/// Train the auxiliary stage-1 model and freeze its embedding tables.
pub fn stage1_pretrain(config: &RunConfig, data: &Dataset) -> Result<Stage1Output> {
    let start = Instant::now();
    let shape = shape_for(config, data, &config.stage1);
    let model = CtrModel::new_dense(shape, &mut rng_for(config.seed, "stage1-init"))?;
    let outcome = train_epochs(
        model,
        &data.split.train,
        &data.split.val,
        &config.stage1.train,
        derive_seed(config.seed, "stage1-train"),
    )?;
    let table = outcome
        .model
        .embedding_table()
        .expect("stage-1 models are dense");
    let summary = summarize(&outcome, data)?;
    Ok(Stage1Output {
        table,
        summary,
        seconds: start.elapsed().as_secs_f64(),
        epoch_seconds: outcome.epoch_seconds,
        model: outcome.model,
    })
}

/// Per-feature weights a variant's quantizer uses.
pub fn variant_weights(vocab: &FeatureVocabulary, variant: Variant) -> Vec<f64> {
    let counts = vocab.global_counts();
    match variant {
        Variant::BasicPq => vec![1.0; counts.len()],
        Variant::FreqPq => counts.iter().map(|&n| n as f64).collect(),
        _ => counts.iter().map(|&n| popularity_weight(n)).collect(),
    }
}

/// Popularity weights used to compare code distributions across variants.
pub fn popularity_weights(vocab: &FeatureVocabulary) -> Vec<f64> {
    vocab.global_counts().iter().map(|&n| popularity_weight(n)).collect()
}

#[derive(Debug, Clone)]
pub struct QuantizeOutput {
    pub codebook: Codebook,
    pub summary: QuantizerSummary,
    pub seconds: f64,
}

/// Learn the codebook over frozen stage-1 tables with the variant's loss terms.
pub fn stage1_quantize(config: &RunConfig, data: &Dataset, table: &EmbeddingTable, variant: Variant) -> Result<QuantizeOutput> {
    if !variant.is_quantized() {
        return Err(Error::InvalidInput("the dense baseline has no quantization stage".into()));
    }
    if table.vocab_sizes() != data.vocab.sizes() {
        return Err(Error::DimensionMismatch("embedding tables do not match the vocabulary".into()));
    }
    let start = Instant::now();
    let qconfig = variant.quantizer_config(&config.quantizer);
    let weights = variant_weights(&data.vocab, variant);
    let (codebook, trace) = train_codebooks(
        &table.global_matrix(),
        &weights,
        &data.field_sizes(),
        &qconfig,
        derive_seed(config.seed, "quantizer"),
    )?;
    let seconds = start.elapsed().as_secs_f64();
    let summary = quantizer_summary(&codebook, trace, &data.vocab);
    Ok(QuantizeOutput {
        codebook,
        summary,
        seconds,
    })
}

pub fn quantizer_summary(codebook: &Codebook, trace: Vec<EpochTrace>, vocab: &FeatureVocabulary) -> QuantizerSummary {
    let mut used = vec![false; codebook.n_groups * codebook.m * codebook.k];
    for f in &codebook.fields {
        for j in f.offset..f.offset + f.len {
            for (i, &c) in codebook.code_row(j).iter().enumerate() {
                used[(f.group * codebook.m + i) * codebook.k + c as usize] = true;
            }
        }
    }
    QuantizerSummary {
        trace,
        weighted_code_entropy: codebook.weighted_code_entropy(&popularity_weights(vocab)),
        empty_codewords: used.iter().filter(|u| !**u).count(),
    }
}

/// Rejects a codebook whose field table does not cover the vocabulary.
pub fn check_codebook_vocabulary(codebook: &Codebook, vocab: &FeatureVocabulary) -> Result<()> {
    let fields = vocab.fields();
    for (i, f) in fields.iter().enumerate() {
        let Some(cf) = codebook.fields.get(i) else {
            return Err(Error::VocabularyMismatch {
                field: f.name().to_string(),
                detail: "field missing from the codebook".into(),
            });
        };
        if cf.name != f.name() {
            return Err(Error::VocabularyMismatch {
                field: f.name().to_string(),
                detail: format!("codebook has field `{}` in its place", cf.name),
            });
        }
        if cf.len != f.size() {
            return Err(Error::VocabularyMismatch {
                field: f.name().to_string(),
                detail: format!("vocabulary has {} ids, codebook covers {}", f.size(), cf.len),
            });
        }
    }
    if let Some(extra) = codebook.fields.get(fields.len()) {
        return Err(Error::VocabularyMismatch {
            field: extra.name.clone(),
            detail: "field absent from the vocabulary".into(),
        });
    }
    Ok(())
}

/// Where the downstream model takes its embeddings from.
#[derive(Debug, Clone, Copy)]
pub enum EmbeddingSource<'a> {
    Quantized(&'a Codebook),
    Dense(&'a EmbeddingTable),
}

/// Build the downstream model before any training step.
pub fn stage2_model(
    config: &RunConfig,
    data: &Dataset,
    source: EmbeddingSource,
    numeric: &[NumericMap],
) -> Result<CtrModel> {
    let shape = shape_for(config, data, &config.stage2);
    let mut rng = rng_for(config.seed, "stage2-init");
    let mut model = match source {
        EmbeddingSource::Quantized(cb) => {
            check_codebook_vocabulary(cb, &data.vocab)?;
            if cb.dim != config.model.dim {
                return Err(Error::DimensionMismatch(format!(
                    "codebook has d={}, config has d={}",
                    cb.dim, config.model.dim
                )));
            }
            CtrModel::new_quantized(shape, cb.to_lookup(), &cb.codewords, &mut rng)?
        }
        EmbeddingSource::Dense(table) => {
            let mut model = CtrModel::new_dense(shape, &mut rng)?;
            model.load_embeddings(table)?;
            model
        }
    };
    model.load_numeric_maps(numeric)?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub model: CtrModel,
    pub summary: StageSummary,
    pub seconds: f64,
    pub epoch_seconds: Vec<f64>,
}

/// Retrain the downstream model; code indices stay frozen, codewords train.
pub fn stage2_train(
    config: &RunConfig,
    data: &Dataset,
    source: EmbeddingSource,
    numeric: &[NumericMap],
) -> Result<Stage2Output> {
    let start = Instant::now();
    let model = stage2_model(config, data, source, numeric)?;
    let outcome = train_epochs(
        model,
        &data.split.train,
        &data.split.val,
        &config.stage2.train,
        derive_seed(config.seed, "stage2-train"),
    )?;
    let summary = summarize(&outcome, data)?;
    Ok(Stage2Output {
        summary,
        seconds: start.elapsed().as_secs_f64(),
        epoch_seconds: outcome.epoch_seconds,
        model: outcome.model,
    })
}

pub fn memory_for(model: &CtrModel, data: &Dataset) -> MemoryAccount {
    let other = model.n_params() - model.embedding_param_count();
    let quant = model.quantized_lookup().map(|l| QuantShape {
        m: l.m,
        k: l.k,
        n_groups: l.n_groups,
    });
    account_memory(data.vocab.total_features(), model.shape().dim, quant, other)
}

/// Everything one pipeline run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub codebook: Option<Codebook>,
    pub model: CtrModel,
}

/// Assemble the report from finished stages.
pub fn build_report(
    config: &RunConfig,
    data: &Dataset,
    stage1: &Stage1Output,
    quantized: Option<&QuantizeOutput>,
    stage2: &Stage2Output,
) -> RunReport {
    RunReport {
        schema: REPORT_SCHEMA.to_string(),
        variant: config.variant,
        seed: config.seed,
        config: config.clone(),
        dataset: data.summary(),
        stage1: stage1.summary.clone(),
        quantizer: quantized.map(|q| q.summary.clone()),
        stage2: stage2.summary.clone(),
        memory: memory_for(&stage2.model, data),
        timing: Some(Timing {
            stage1_seconds: stage1.seconds,
            quantizer_seconds: quantized.map_or(0.0, |q| q.seconds),
            stage2_seconds: stage2.seconds,
            stage1_epoch_seconds: stage1.epoch_seconds.clone(),
            stage2_epoch_seconds: stage2.epoch_seconds.clone(),
        }),
    }
}

/// Quantize (unless dense) and retrain on top of an existing stage-1 result.
pub fn run_from_stage1(config: &RunConfig, data: &Dataset, stage1: &Stage1Output) -> Result<RunArtifacts> {
    let numeric = stage1.model.numeric_maps();
    let quantized = if config.variant.is_quantized() {
        Some(stage1_quantize(config, data, &stage1.table, config.variant)?)
    } else {
        None
    };
    let source = match &quantized {
        Some(q) => EmbeddingSource::Quantized(&q.codebook),
        None => EmbeddingSource::Dense(&stage1.table),
    };
    let stage2 = stage2_train(config, data, source, &numeric)?;
    let report = build_report(config, data, stage1, quantized.as_ref(), &stage2);
    log::info!(
        "{}: test AUC {:.4}, logloss {:.4}, compression {:.2}x",
        config.variant.name(),
        report.stage2.test.auc,
        report.stage2.test.logloss,
        report.memory.compression_ratio
    );
    Ok(RunArtifacts {
        report,
        codebook: quantized.map(|q| q.codebook),
        model: stage2.model,
    })
}

/// Full pipeline for the configured variant.
pub fn run_variant(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let data = load_dataset(config)?;
    let stage1 = stage1_pretrain(config, &data)?;
    run_from_stage1(config, &data, &stage1)
}

/// All six variants on one dataset and one shared stage-1 model.
pub fn run_ablation(config: &RunConfig) -> Result<Vec<RunReport>> {
    config.validate()?;
    let data = load_dataset(config)?;
    let stage1 = stage1_pretrain(config, &data)?;
    Variant::ALL
        .iter()
        .map(|&variant| {
            let c = RunConfig {
                variant,
                ..config.clone()
            };
            run_from_stage1(&c, &data, &stage1).map(|a| a.report)
        })
        .collect()
}

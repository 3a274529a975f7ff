use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{train_epochs, CtrModel, EmbeddingTable};
use crate::pipeline::{load_dataset, shape_for, stage1_quantize, DataConfig, Dataset, RunConfig, Variant};
use crate::seed::{derive_seed, rng_for};

use super::export::fmt_sig;

/// Mean and standard deviation of per-repetition seconds for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub variant: Variant,
    pub stage1_mean: f64,
    pub stage1_std: f64,
    /// Zero for variants without a quantizer.
    pub quantizer_mean: f64,
    pub quantizer_std: f64,
    pub total_mean: f64,
    pub total_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub repetitions: usize,
    pub rows: Vec<LatencyRow>,
}

/// The phases the harness times. `prepare` runs once per variant, untimed.
pub trait LatencyWorkload {
    fn prepare(&mut self, index: usize, config: &RunConfig) -> Result<()>;
    fn stage1_epoch(&mut self, index: usize, config: &RunConfig) -> Result<()>;
    fn quantizer_epoch(&mut self, index: usize, config: &RunConfig) -> Result<()>;
}

/// One pre-training epoch followed by one quantizer epoch on the configured data.
#[derive(Default)]
pub struct PipelineWorkload {
    data: Vec<Option<Dataset>>,
    keys: Vec<(DataConfig, u64)>,
    tables: Vec<Option<EmbeddingTable>>,
}

impl PipelineWorkload {
    fn data(&self, index: usize) -> &Dataset {
        self.data[index].as_ref().expect("prepare runs before any timed phase")
    }
}

impl LatencyWorkload for PipelineWorkload {
    fn prepare(&mut self, index: usize, config: &RunConfig) -> Result<()> {
        config.validate()?;
        if self.data.len() <= index {
            self.data.resize_with(index + 1, || None);
            self.tables.resize_with(index + 1, || None);
        }
        let key = (config.data.clone(), config.seed);
        let reused = self.keys.iter().position(|k| *k == key).and_then(|i| self.data[i].clone());
        self.data[index] = Some(match reused {
            Some(d) => d,
            None => load_dataset(config)?,
        });
        self.keys.push(key);
        Ok(())
    }

    fn stage1_epoch(&mut self, index: usize, config: &RunConfig) -> Result<()> {
        let data = self.data(index);
        let shape = shape_for(config, data, &config.stage1);
        let model = CtrModel::new_dense(shape, &mut rng_for(config.seed, "stage1-init"))?;
        let mut train = config.stage1.train.clone();
        train.epochs = 1;
        let outcome = train_epochs(
            model,
            &data.split.train,
            &data.split.val,
            &train,
            derive_seed(config.seed, "stage1-train"),
        )?;
        self.tables[index] = outcome.model.embedding_table();
        Ok(())
    }

    fn quantizer_epoch(&mut self, index: usize, config: &RunConfig) -> Result<()> {
        let table = self.tables[index]
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("quantizer timed before stage 1".into()))?;
        let mut c = config.clone();
        c.quantizer.epochs = 1;
        stage1_quantize(&c, self.data(index), table, config.variant)?;
        Ok(())
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn mark(variant: Variant) -> impl Fn(Error) -> Error {
    move |e| Error::VariantFailed {
        variant: variant.name().to_string(),
        source: Box::new(e),
    }
}

/// Times every config's variant `repetitions` times with the real pipeline.
pub fn latency_harness(configs: &[RunConfig], repetitions: usize) -> Result<LatencyTable> {
    latency_harness_with(configs, repetitions, &mut PipelineWorkload::default())
}

/// Times `workload` serially, interleaving variants within each repetition.
///
/// Standard deviations are sample deviations and 0 for a single repetition.
pub fn latency_harness_with(
    configs: &[RunConfig],
    repetitions: usize,
    workload: &mut impl LatencyWorkload,
) -> Result<LatencyTable> {
    if repetitions == 0 {
        return Err(Error::InvalidInput("latency needs at least one repetition".into()));
    }
    for (i, c) in configs.iter().enumerate() {
        workload.prepare(i, c).map_err(mark(c.variant))?;
    }
    let mut stage1 = vec![Vec::with_capacity(repetitions); configs.len()];
    let mut quant = vec![Vec::with_capacity(repetitions); configs.len()];
    for _ in 0..repetitions {
        for (i, c) in configs.iter().enumerate() {
            let start = Instant::now();
            workload.stage1_epoch(i, c).map_err(mark(c.variant))?;
            stage1[i].push(start.elapsed().as_secs_f64());
            let q = if c.variant.is_quantized() {
                let start = Instant::now();
                workload.quantizer_epoch(i, c).map_err(mark(c.variant))?;
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            quant[i].push(q);
        }
    }
    let rows = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let totals: Vec<f64> = stage1[i].iter().zip(&quant[i]).map(|(a, b)| a + b).collect();
            let (stage1_mean, stage1_std) = mean_std(&stage1[i]);
            let (quantizer_mean, quantizer_std) = mean_std(&quant[i]);
            let (total_mean, total_std) = mean_std(&totals);
            LatencyRow {
                variant: c.variant,
                stage1_mean,
                stage1_std,
                quantizer_mean,
                quantizer_std,
                total_mean,
                total_std,
            }
        })
        .collect();
    Ok(LatencyTable { repetitions, rows })
}

pub const LATENCY_HEADER: &str =
    "variant,label,repetitions,stage1_mean_s,stage1_std_s,quantizer_mean_s,quantizer_std_s,total_mean_s,total_std_s";

impl LatencyTable {
    pub fn row(&self, variant: Variant) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{LATENCY_HEADER}\n");
        for r in &self.rows {
            let cells = [
                r.stage1_mean,
                r.stage1_std,
                r.quantizer_mean,
                r.quantizer_std,
                r.total_mean,
                r.total_std,
            ]
            .map(|v| fmt_sig((v * 1000.0).round() / 1000.0));
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.variant.name(),
                r.variant.label(),
                self.repetitions,
                cells.join(",")
            ));
        }
        out
    }
}

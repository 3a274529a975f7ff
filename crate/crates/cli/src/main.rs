mod inspect;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mec_core::eval::{ablation_csv, latency_harness, sweep};
use mec_core::pipeline::artifacts::{CONFIG_ECHO, REPORT_FILE, STAGE2_MODEL};
use mec_core::pipeline::{
    build_report, load_dataset, merge_config, stage1_pretrain, stage1_quantize, stage2_train, Dataset,
    EmbeddingSource, QuantizeOutput, RunConfig, RunReport, Stage1Output, Variant,
};
use mec_core::{ConfigError, Error};

/// Two-stage product-quantized embedding compression for CTR models.
#[derive(Parser)]
#[command(name = "mec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `quantizer.alpha=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Artifact directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Top-level seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for data-parallel sections.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and encoded splits.
    Prepare(Common),
    /// Train the stage-1 model on prepared data.
    Pretrain(Common),
    /// Learn the codebook from the stage-1 embeddings.
    Quantize(Common),
    /// Train the downstream model and write the run report.
    Train(Common),
    /// All stages in one go.
    Run(Common),
    /// Every variant on one shared stage-1 model.
    Ablate(Common),
    /// Grid over alpha, beta, K and M from the `[sweep]` table.
    Sweep(Common),
    /// Per-epoch training time of the `[latency]` variants.
    Latency(Common),
    /// Print a human-readable summary of an artifact file.
    Inspect {
        path: PathBuf,
        /// Codes listed per field for codebooks.
        #[arg(long, default_value_t = 10)]
        top_n: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let Some(path) = &common.config else {
        return Err(ConfigError::Invalid("a --config file is required".into()).into());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Parse(format!("cannot read {}: {e}", path.display())))?;
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(merge_config(Some(&text), &overrides)?)
}

/// Resolves the config, applies `--threads` and writes the config echo.
fn setup(common: &Common) -> Result<RunConfig> {
    let config = load_config(common)?;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    fs::write(common.out.join(CONFIG_ECHO), config.to_toml())?;
    Ok(config)
}

fn prepare(config: &RunConfig, out: &Path) -> Result<Dataset> {
    let data = load_dataset(config)?;
    data.save(out)?;
    let s = data.summary();
    println!(
        "prepared {} train / {} val / {} test samples, {} features over {} fields",
        s.n_train,
        s.n_val,
        s.n_test,
        s.total_features,
        s.fields.len()
    );
    Ok(data)
}

fn pretrain(config: &RunConfig, out: &Path, data: &Dataset) -> Result<Stage1Output> {
    let stage1 = stage1_pretrain(config, data)?;
    stage1.save(out)?;
    println!(
        "stage 1 ({}): test AUC {:.4}, logloss {:.4}",
        stage1.summary.model.name(),
        stage1.summary.test.auc,
        stage1.summary.test.logloss
    );
    Ok(stage1)
}

fn quantize(config: &RunConfig, out: &Path, data: &Dataset, stage1: &Stage1Output) -> Result<QuantizeOutput> {
    if !config.variant.is_quantized() {
        return Err(ConfigError::Invalid(format!("variant {} has no quantizer", config.variant.name())).into());
    }
    let q = stage1_quantize(config, data, &stage1.table, config.variant)?;
    q.save(out)?;
    println!(
        "codebook: M={} K={} d={}, weighted code entropy {:.4}, {} empty codewords",
        q.codebook.m, q.codebook.k, q.codebook.dim, q.summary.weighted_code_entropy, q.summary.empty_codewords
    );
    Ok(q)
}

fn train(
    config: &RunConfig,
    out: &Path,
    data: &Dataset,
    stage1: &Stage1Output,
    quantized: Option<&QuantizeOutput>,
) -> Result<RunReport> {
    let source = match quantized {
        Some(q) => EmbeddingSource::Quantized(&q.codebook),
        None => EmbeddingSource::Dense(&stage1.table),
    };
    let stage2 = stage2_train(config, data, source, &stage1.model.numeric_maps())?;
    stage2.model.save(&out.join(STAGE2_MODEL))?;
    let report = build_report(config, data, stage1, quantized, &stage2);
    report.save(out.join(REPORT_FILE))?;
    println!(
        "{}: test AUC {:.4}, logloss {:.4}, compression ratio {:.2}",
        config.variant.label(),
        report.stage2.test.auc,
        report.stage2.test.logloss,
        report.memory.compression_ratio
    );
    Ok(report)
}

fn print_table(csv: &str) {
    for line in csv.lines() {
        println!("{}", line.replace(',', "\t"));
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Inspect { path, top_n } => inspect::inspect(&path, top_n),
        Command::Prepare(c) => {
            let config = setup(&c)?;
            prepare(&config, &c.out).map(drop)
        }
        Command::Pretrain(c) => {
            let config = setup(&c)?;
            let data = Dataset::load(&c.out)?;
            pretrain(&config, &c.out, &data).map(drop)
        }
        Command::Quantize(c) => {
            let config = setup(&c)?;
            let data = Dataset::load(&c.out)?;
            let stage1 = Stage1Output::load(&c.out)?;
            quantize(&config, &c.out, &data, &stage1).map(drop)
        }
        Command::Train(c) => {
            let config = setup(&c)?;
            let data = Dataset::load(&c.out)?;
            let stage1 = Stage1Output::load(&c.out)?;
            let quantized = if config.variant.is_quantized() {
                Some(QuantizeOutput::load(&c.out)?)
            } else {
                None
            };
            train(&config, &c.out, &data, &stage1, quantized.as_ref()).map(drop)
        }
        Command::Run(c) => {
            let config = setup(&c)?;
            let data = prepare(&config, &c.out)?;
            let stage1 = pretrain(&config, &c.out, &data)?;
            let quantized = if config.variant.is_quantized() {
                Some(quantize(&config, &c.out, &data, &stage1)?)
            } else {
                None
            };
            train(&config, &c.out, &data, &stage1, quantized.as_ref()).map(drop)
        }
        Command::Ablate(c) => {
            let config = setup(&c)?;
            let reports = mec_core::pipeline::run_ablation(&config)?;
            let dir = c.out.join("ablation");
            fs::create_dir_all(&dir)?;
            for r in &reports {
                r.save(dir.join(format!("{}.json", r.variant.name())))?;
            }
            let csv = ablation_csv(&reports);
            fs::write(c.out.join("ablation.csv"), &csv)?;
            print_table(&csv);
            Ok(())
        }
        Command::Sweep(c) => {
            let config = setup(&c)?;
            let outcome = sweep(&config, &config.sweep)?;
            let dir = c.out.join("sweep");
            fs::create_dir_all(&dir)?;
            for (i, r) in outcome.reports.iter().enumerate() {
                r.save(dir.join(format!("point-{i:03}.json")))?;
            }
            let csv = outcome.to_csv();
            fs::write(c.out.join("sweep.csv"), &csv)?;
            print_table(&csv);
            Ok(())
        }
        Command::Latency(c) => {
            let config = setup(&c)?;
            if config.latency.variants.is_empty() {
                bail!(ConfigError::Invalid("latency.variants must not be empty".into()));
            }
            let configs: Vec<RunConfig> = config
                .latency
                .variants
                .iter()
                .map(|&variant| RunConfig {
                    variant,
                    ..config.clone()
                })
                .collect();
            let table = latency_harness(&configs, config.latency.repetitions)?;
            fs::write(c.out.join("latency.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            let csv = table.to_csv();
            fs::write(c.out.join("latency.csv"), &csv)?;
            print_table(&csv);
            if let (Some(dense), Some(mec)) = (table.row(Variant::DenseBaseline), table.row(Variant::Mec)) {
                if dense.total_mean > 0.0 {
                    println!("MEC / w/o PQ total time: {:.3}", mec.total_mean / dense.total_mean);
                }
            }
            Ok(())
        }
    }
}

/// Exit status per error class; see the README for the table.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::VariantFailed { source, .. } => core_code(source),
                e => core_code(e),
            };
        }
    }
    1
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::MissingArtifact(_) => 4,
        Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::VersionMismatch { .. }
        | Error::ShapeMismatch(_)
        | Error::CodeOutOfRange { .. }
        | Error::Json(_) => 5,
        Error::SchemaMismatch { .. }
        | Error::InvalidLabel { .. }
        | Error::IdOutOfRange { .. }
        | Error::Csv(_)
        | Error::VocabularyMismatch { .. }
        | Error::AucUndefined => 6,
        Error::NonFiniteLoss { .. } | Error::NonFiniteQuantizerLoss { .. } => 7,
        Error::VariantFailed { source, .. } => core_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

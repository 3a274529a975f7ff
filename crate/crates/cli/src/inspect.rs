use std::fs;
use std::path::Path;

use anyhow::Result;

use mec_core::data::FeatureVocabulary;
use mec_core::eval::code_distribution;
use mec_core::model::CtrModel;
use mec_core::pipeline::{RunReport, REPORT_SCHEMA};
use mec_core::quantizer::Codebook;
use mec_core::Error;

pub fn inspect(path: &Path, top_n: usize) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()).into());
    }
    let bytes = fs::read(path)?;
    match bytes.get(..7) {
        Some(b"MECVOC1") => vocab(&FeatureVocabulary::load(path)?),
        Some(b"MECCBK1") => codebook(&Codebook::load(path)?, top_n)?,
        Some(b"MECMDL1") => model(&CtrModel::load(path)?),
        _ => json(&bytes)?,
    }
    Ok(())
}

fn vocab(v: &FeatureVocabulary) {
    println!("vocabulary: {} fields, {} features, min_count {}", v.fields().len(), v.total_features(), v.min_count());
    for f in v.fields() {
        let counts = f.counts();
        let top = counts
            .iter()
            .enumerate()
            .filter(|&(id, _)| id as u32 != f.oov_id())
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)));
        print!("  {:<12} size {:>7}  retained {:>7}", f.name(), f.size(), f.retained());
        if let Some((id, n)) = top {
            print!("  most frequent `{}` ({n})", f.token(id as u32).unwrap_or("?"));
        }
        println!();
    }
}

fn codebook(cb: &Codebook, top_n: usize) -> Result<()> {
    println!(
        "codebook: M={} K={} d={} groups={} features={}",
        cb.m,
        cb.k,
        cb.dim,
        cb.n_groups,
        cb.n_features()
    );
    let uniform = vec![1.0; cb.n_features()];
    println!("  code entropy (unweighted, nats): {:.4} of max {:.4}", cb.weighted_code_entropy(&uniform), (cb.k as f64).ln());
    for f in &cb.fields {
        let grid = code_distribution(cb, &f.name, top_n, 0)?;
        let codes: Vec<String> = grid.entries.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        println!("  {:<12} {:>7} features, group {}, top codes (sub 0): {}", f.name, f.len, f.group, codes.join(" "));
    }
    Ok(())
}

fn model(m: &CtrModel) {
    let s = m.shape();
    println!("model: {} d={} hidden={:?}", s.kind.name(), s.dim, s.hidden);
    println!("  vocab sizes {:?}, {} numeric fields", s.vocab_sizes, s.n_numeric);
    println!("  {} parameters, {} in embeddings", m.n_params(), m.embedding_param_count());
    if let Some(q) = m.quantized_lookup() {
        println!("  quantized: M={} K={} groups={}", q.m, q.k, q.n_groups);
    }
}

fn json(bytes: &[u8]) -> Result<()> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|_| Error::BadMagic {
        expected: "a vocabulary, codebook, model or report file",
    })?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(REPORT_SCHEMA) => report(&RunReport::from_json(std::str::from_utf8(bytes)?)?),
        Some(other) if !other.starts_with("mec-report/") => println!("{other} artifact"),
        Some(other) => {
            return Err(Error::VersionMismatch {
                what: "report",
                found: other.to_string(),
            }
            .into())
        }
        None => {
            return Err(Error::BadMagic {
                expected: "a vocabulary, codebook, model or report file",
            }
            .into())
        }
    }
    Ok(())
}

fn report(r: &RunReport) {
    println!("report: variant {} ({}), seed {}", r.variant.name(), r.variant.label(), r.seed);
    println!(
        "  data: {} train / {} val / {} test, {} features",
        r.dataset.n_train, r.dataset.n_val, r.dataset.n_test, r.dataset.total_features
    );
    println!(
        "  stage 1 {}: test AUC {:.4}, logloss {:.4}",
        r.stage1.model.name(),
        r.stage1.test.auc,
        r.stage1.test.logloss
    );
    if let Some(q) = &r.quantizer {
        println!(
            "  quantizer: {} epochs, weighted code entropy {:.4}, {} empty codewords",
            q.trace.len(),
            q.weighted_code_entropy,
            q.empty_codewords
        );
    }
    println!(
        "  stage 2 {}: test AUC {:.4}, logloss {:.4}",
        r.stage2.model.name(),
        r.stage2.test.auc,
        r.stage2.test.logloss
    );
    let m = &r.memory;
    println!(
        "  memory: dense {} B, codebook {} B, codes {} B, ratio {:.2}",
        m.dense_embedding_bytes, m.codebook_bytes, m.code_index_bytes, m.compression_ratio
    );
}

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::snap_to_f32;
use crate::error::{Error, Result};
use crate::model::{adam_step, AdamConfig, Matrix, OptimizerState};
use crate::seed::rng_for;

use super::codebook::{Codebook, CodebookField};
use super::ops::{contrastive_objective, pairwise_sq_dists, recon_objective, reg_objective, sample_negative, sq_dist, CodebookView};
use super::{CodewordUpdate, QuantizerConfig};

/// Loss components of a batch, or their means over an epoch.
///
/// Components whose coefficient is zero are not evaluated and stay 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantizerBatchLoss {
    pub recon: f64,
    pub reg: f64,
    pub con: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub loss: QuantizerBatchLoss,
    /// Codewords no feature was assigned to during the epoch.
    pub empty_codewords: usize,
}

fn groups_rows(fields: &[CodebookField], n_groups: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); n_groups];
    for f in fields {
        rows[f.group].extend(f.offset..f.offset + f.len);
    }
    rows
}

/// Seeded k-means++ initialization of one group's sub-codebooks.
///
/// Seeding runs on all `rows` with weights when they fit in `sample_cap`,
/// otherwise on a with-replacement sample drawn proportionally to weight.
pub fn initialize_codewords(
    embeddings: &Matrix,
    rows: &[usize],
    weights: &[f64],
    m: usize,
    k: usize,
    sample_cap: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("cannot initialize a codebook from zero features".into()));
    }
    let sd = embeddings.cols / m;
    let (sample, sample_w): (Vec<usize>, Vec<f64>) = if rows.len() <= sample_cap {
        (rows.to_vec(), rows.iter().map(|&j| weights[j]).collect())
    } else {
        let cumulative: Vec<f64> = rows
            .iter()
            .scan(0.0, |acc, &j| {
                *acc += weights[j];
                Some(*acc)
            })
            .collect();
        let total = *cumulative.last().unwrap();
        let picks = (0..sample_cap)
            .map(|_| rows[pick(&cumulative, rng.random::<f64>() * total)])
            .collect();
        (picks, vec![1.0; sample_cap])
    };

    let mut codewords = vec![0.0; m * k * sd];
    let mut d2 = vec![0.0; sample.len()];
    let mut score = vec![0.0; sample.len()];
    for i in 0..m {
        let sub = |j: usize| &embeddings.row(j)[i * sd..(i + 1) * sd];
        let base = i * k * sd;
        let cum = cumulative_of(&sample_w);
        let first = pick(&cum, rng.random::<f64>() * cum.last().unwrap());
        codewords[base..base + sd].copy_from_slice(sub(sample[first]));
        for (t, &j) in sample.iter().enumerate() {
            d2[t] = sq_dist(sub(j), &codewords[base..base + sd]);
        }
        for c in 1..k {
            for t in 0..sample.len() {
                score[t] = sample_w[t] * d2[t];
            }
            let cum = cumulative_of(&score);
            let total = *cum.last().unwrap();
            let chosen = if total > 0.0 {
                pick(&cum, rng.random::<f64>() * total)
            } else {
                rng.random_range(0..sample.len())
            };
            let o = base + c * sd;
            codewords[o..o + sd].copy_from_slice(sub(sample[chosen]));
            for (t, &j) in sample.iter().enumerate() {
                d2[t] = d2[t].min(sq_dist(sub(j), &codewords[o..o + sd]));
            }
        }
    }
    Ok(codewords)
}

fn cumulative_of(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

fn pick(cumulative: &[f64], target: f64) -> usize {
    cumulative
        .partition_point(|&c| c <= target)
        .min(cumulative.len() - 1)
}

/// Hard-assign every feature to its nearest codeword in each sub-space.
pub fn hard_assign_all(embeddings: &Matrix, fields: &[CodebookField], codewords: &[f64], m: usize, k: usize) -> Vec<u32> {
    let sd = embeddings.cols / m;
    let group_len = m * k * sd;
    let mut group_of = Vec::with_capacity(embeddings.rows);
    for f in fields {
        group_of.extend(std::iter::repeat_n(f.group, f.len));
    }
    let mut codes = vec![0u32; group_of.len() * m];
    codes.par_chunks_mut(m).enumerate().for_each(|(j, out)| {
        let g = group_of[j];
        let row = embeddings.row(j);
        for (i, slot) in out.iter_mut().enumerate() {
            let cb = &codewords[g * group_len + i * k * sd..g * group_len + (i + 1) * k * sd];
            *slot = super::ops::assign(&row[i * sd..(i + 1) * sd], cb) as u32;
        }
    });
    codes
}

fn build_fields(field_sizes: &[(String, usize)], per_field: bool) -> (Vec<CodebookField>, usize) {
    let mut offset = 0;
    let fields: Vec<CodebookField> = field_sizes
        .iter()
        .enumerate()
        .map(|(i, (name, len))| {
            let f = CodebookField {
                name: name.clone(),
                offset,
                len: *len,
                group: if per_field { i } else { 0 },
            };
            offset += len;
            f
        })
        .collect();
    let n_groups = if per_field { field_sizes.len().max(1) } else { 1 };
    (fields, n_groups)
}

fn check_inputs(embeddings: &Matrix, weights: &[f64], fields: &[CodebookField], config: &QuantizerConfig) -> Result<()> {
    config.validate(embeddings.cols)?;
    let covered: usize = fields.iter().map(|f| f.len).sum();
    if covered != embeddings.rows || weights.len() != embeddings.rows {
        return Err(Error::DimensionMismatch(format!(
            "{} embedding rows, {} weights, fields cover {covered}",
            embeddings.rows,
            weights.len()
        )));
    }
    if embeddings.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("embeddings contain non-finite values".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput("popularity weights must be finite and non-negative".into()));
    }
    Ok(())
}

/// Learn a codebook over a frozen global embedding matrix.
///
/// `field_sizes` lists each categorical field and its row count, in the
/// order the rows are concatenated in `embeddings`.
pub fn train_codebooks(
    embeddings: &Matrix,
    weights: &[f64],
    field_sizes: &[(String, usize)],
    config: &QuantizerConfig,
    seed: u64,
) -> Result<(Codebook, Vec<EpochTrace>)> {
    let (fields, n_groups) = build_fields(field_sizes, config.per_field);
    check_inputs(embeddings, weights, &fields, config)?;
    let mut rng = rng_for(seed, "quantizer-init");
    let mut init = Vec::new();
    for rows in groups_rows(&fields, n_groups) {
        init.extend(initialize_codewords(
            embeddings,
            &rows,
            weights,
            config.m,
            config.k,
            config.init_sample,
            &mut rng,
        )?);
    }
    train_codebooks_with_init(embeddings, weights, fields, n_groups, init, config, seed)
}

/// Alternating hard assignment and codeword updates from given initial codewords.
pub fn train_codebooks_with_init(
    embeddings: &Matrix,
    weights: &[f64],
    fields: Vec<CodebookField>,
    n_groups: usize,
    mut codewords: Vec<f64>,
    config: &QuantizerConfig,
    seed: u64,
) -> Result<(Codebook, Vec<EpochTrace>)> {
    check_inputs(embeddings, weights, &fields, config)?;
    let (m, k) = (config.m, config.k);
    let sd = embeddings.cols / m;
    let group_len = m * k * sd;
    if codewords.len() != n_groups * group_len {
        return Err(Error::DimensionMismatch("initial codewords do not match the codebook shape".into()));
    }
    let rows = groups_rows(&fields, n_groups);
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut states: Vec<OptimizerState> = (0..n_groups).map(|_| OptimizerState::new(group_len, adam)).collect();
    let mut rng = rng_for(seed, "quantizer-train");
    let mut grad = vec![0.0; group_len];
    let mut scratch = vec![0.0; group_len];
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut sums = QuantizerBatchLoss::default();
        let mut n_batches = 0usize;
        let mut used = vec![false; n_groups * m * k];
        for (g, group_rows) in rows.iter().enumerate() {
            let mut order = group_rows.clone();
            order.shuffle(&mut rng);
            for (b, batch) in order.chunks(config.batch_size).enumerate() {
                let anchors: Vec<&[f64]> = batch.iter().map(|&j| embeddings.row(j)).collect();
                let w: Vec<f64> = batch.iter().map(|&j| weights[j]).collect();
                let cw = &mut codewords[g * group_len..(g + 1) * group_len];
                let view = CodebookView {
                    m,
                    k,
                    sub_dim: sd,
                    codewords: cw,
                };
                let dists = pairwise_sq_dists(&view, &anchors);
                let codes: Vec<u32> = dists.chunks_exact(k).map(argmin).collect();
                for (idx, &c) in codes.iter().enumerate() {
                    used[(g * m + idx % m) * k + c as usize] = true;
                }

                let mut loss = QuantizerBatchLoss::default();
                let batch_w: f64 = w.iter().sum();
                if batch_w <= 0.0 {
                    continue;
                }
                match config.update {
                    CodewordUpdate::ExactCentroid => {
                        loss.recon = recon_objective(&view, &anchors, &w, &codes, None)?;
                        loss.total = loss.recon;
                        check_finite(&loss, epoch, b)?;
                        centroid_update(cw, &anchors, &w, &codes, m, k, sd);
                    }
                    CodewordUpdate::Adam => {
                        grad.fill(0.0);
                        loss.recon = recon_objective(&view, &anchors, &w, &codes, Some(&mut grad))?;
                        if config.alpha > 0.0 {
                            scratch.fill(0.0);
                            loss.reg = reg_objective(
                                &view,
                                &anchors,
                                &w,
                                config.tau,
                                config.epsilon,
                                Some(&dists),
                                Some(&mut scratch),
                            )?;
                            axpy(&mut grad, config.alpha, &scratch);
                        }
                        if config.beta > 0.0 {
                            let n_neg = config.n_negatives;
                            let mut negatives = Vec::with_capacity(codes.len() * n_neg);
                            for row in codes.chunks_exact(m) {
                                for _ in 0..n_neg {
                                    negatives.extend(sample_negative(row, config.rho, k, &mut rng));
                                }
                            }
                            scratch.fill(0.0);
                            loss.con =
                                contrastive_objective(&view, &anchors, &codes, &negatives, n_neg, Some(&mut scratch))?;
                            axpy(&mut grad, config.beta, &scratch);
                        }
                        loss.total = loss.recon + config.alpha * loss.reg + config.beta * loss.con;
                        check_finite(&loss, epoch, b)?;
                        adam_step(cw, &grad, &mut states[g]);
                    }
                }
                sums.recon += loss.recon;
                sums.reg += loss.reg;
                sums.con += loss.con;
                sums.total += loss.total;
                n_batches += 1;
            }
        }
        let scale = 1.0 / n_batches.max(1) as f64;
        let loss = QuantizerBatchLoss {
            recon: sums.recon * scale,
            reg: sums.reg * scale,
            con: sums.con * scale,
            total: sums.total * scale,
        };
        let empty_codewords = used.iter().filter(|u| !**u).count();
        log::debug!(
            "quantizer epoch {epoch}: recon {:.6} reg {:.6} con {:.6} total {:.6}, {empty_codewords} empty codewords",
            loss.recon,
            loss.reg,
            loss.con,
            loss.total
        );
        trace.push(EpochTrace {
            epoch,
            loss,
            empty_codewords,
        });
    }

    snap_to_f32(&mut codewords);
    let codes = hard_assign_all(embeddings, &fields, &codewords, m, k);
    let codebook = Codebook {
        m,
        k,
        dim: embeddings.cols,
        n_groups,
        fields,
        codewords,
        codes,
    };
    codebook.validate()?;
    Ok((codebook, trace))
}

fn argmin(dists: &[f64]) -> u32 {
    let mut best = 0;
    for (c, &d) in dists.iter().enumerate() {
        if d < dists[best] {
            best = c;
        }
    }
    best as u32
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn check_finite(loss: &QuantizerBatchLoss, epoch: usize, batch: usize) -> Result<()> {
    if loss.total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteQuantizerLoss {
        epoch,
        batch,
        recon: loss.recon,
        reg: loss.reg,
        con: loss.con,
    })
}

fn centroid_update(cw: &mut [f64], anchors: &[&[f64]], w: &[f64], codes: &[u32], m: usize, k: usize, sd: usize) {
    let mut sums = vec![0.0; m * k * sd];
    let mut mass = vec![0.0; m * k];
    for (j, s) in anchors.iter().enumerate() {
        for i in 0..m {
            let c = codes[j * m + i] as usize;
            mass[i * k + c] += w[j];
            let o = (i * k + c) * sd;
            for t in 0..sd {
                sums[o + t] += w[j] * s[i * sd + t];
            }
        }
    }
    for (slot, &total) in mass.iter().enumerate() {
        if total > 0.0 {
            for t in 0..sd {
                cw[slot * sd + t] = sums[slot * sd + t] / total;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::popularity_weight;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(seed: u64, n: usize, dim: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..5).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut data = Vec::with_capacity(n * dim);
        for j in 0..n {
            let c = &centers[j % centers.len()];
            data.extend(c.iter().map(|v| v + rng.random_range(-0.4..0.4)));
        }
        Matrix::from_vec(n, dim, data).unwrap()
    }

    fn lloyd(points: &Matrix, mut centers: Vec<f64>, iters: usize) -> Vec<u32> {
        let (n, d) = (points.rows, points.cols);
        let k = centers.len() / d;
        let nearest = |centers: &[f64], p: &[f64]| -> usize {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist: f64 = (0..d).map(|t| (p[t] - centers[c * d + t]).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            best.1
        };
        for _ in 0..iters {
            let labels: Vec<usize> = (0..n).map(|j| nearest(&centers, points.row(j))).collect();
            for c in 0..k {
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                if members.is_empty() {
                    continue;
                }
                for t in 0..d {
                    centers[c * d + t] = members.iter().map(|&j| points.row(j)[t]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        (0..n).map(|j| nearest(&centers, points.row(j)) as u32).collect()
    }

    fn one_field(n: usize) -> Vec<(String, usize)> {
        vec![("C1".to_string(), n)]
    }

    #[test]
    fn exact_centroid_matches_lloyd() {
        for seed in 0..5 {
            let points = blobs(seed, 64, 3);
            let weights = vec![1.0; 64];
            let config = QuantizerConfig {
                m: 1,
                k: 4,
                alpha: 0.0,
                beta: 0.0,
                tau: 1e-4,
                epochs: 30,
                batch_size: 64,
                update: CodewordUpdate::ExactCentroid,
                ..QuantizerConfig::default()
            };
            let rows: Vec<usize> = (0..64).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = initialize_codewords(&points, &rows, &weights, 1, 4, 4096, &mut rng).unwrap();
            let (fields, groups) = build_fields(&one_field(64), false);
            let (cb, _) =
                train_codebooks_with_init(&points, &weights, fields, groups, init.clone(), &config, seed).unwrap();
            assert_eq!(cb.codes, lloyd(&points, init, 30));
        }
    }

    #[test]
    fn points_on_grid_reach_zero_loss() {
        let k = 4;
        let grid = [[0.0, 1.0], [1.0, -1.0], [2.0, 0.5], [-1.5, 0.25]];
        let mut data = Vec::new();
        for j in 0..40 {
            data.extend_from_slice(&grid[j % k]);
            data.extend_from_slice(&grid[(j / 3) % k]);
        }
        let points = Matrix::from_vec(40, 4, data).unwrap();
        let weights = vec![1.0; 40];
        let config = QuantizerConfig {
            m: 2,
            k,
            alpha: 0.0,
            beta: 0.0,
            epochs: 200,
            batch_size: 40,
            lr: 0.05,
            ..QuantizerConfig::default()
        };
        let (cb, trace) = train_codebooks(&points, &weights, &one_field(40), &config, 3).unwrap();
        assert!(trace.last().unwrap().loss.recon < 1e-8, "{:?}", trace.last());
        for j in 0..40 {
            let q = cb.reconstruct_feature(j).unwrap();
            let err: f64 = q.iter().zip(points.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(err < 1e-8);
        }
    }

    fn sample_problem(seed: u64) -> (Matrix, Vec<f64>, Vec<(String, usize)>) {
        let points = blobs(seed, 300, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let weights = (0..300)
            .map(|j| popularity_weight(if j % 5 == 0 { rng.random_range(1000..5000) } else { rng.random_range(0..20) }))
            .collect();
        (points, weights, vec![("A".into(), 200), ("B".into(), 100)])
    }

    #[test]
    fn deterministic_given_seed() {
        let (points, weights, fields) = sample_problem(1);
        let config = QuantizerConfig {
            m: 2,
            k: 8,
            epochs: 3,
            batch_size: 64,
            ..QuantizerConfig::default()
        };
        let run = |per_field| {
            let c = QuantizerConfig { per_field, ..config.clone() };
            let (cb, trace) = train_codebooks(&points, &weights, &fields, &c, 42).unwrap();
            let mut buf = Vec::new();
            cb.write_to(&mut buf).unwrap();
            (buf, trace)
        };
        assert_eq!(run(false), run(false));
        let (per_field, _) = run(true);
        let cb = Codebook::read_from(per_field.as_slice()).unwrap();
        assert_eq!(cb.n_groups, 2);
        assert_eq!(cb.fields[1].group, 1);
    }

    #[test]
    fn recon_trend_and_trace_fields() {
        let (points, weights, fields) = sample_problem(2);
        let config = QuantizerConfig {
            m: 2,
            k: 8,
            alpha: 0.0,
            beta: 0.0,
            epochs: 15,
            batch_size: 50,
            ..QuantizerConfig::default()
        };
        let (_, trace) = train_codebooks(&points, &weights, &fields, &config, 5).unwrap();
        assert_eq!(trace.len(), 15);
        assert!(trace.last().unwrap().loss.recon <= trace[0].loss.recon);
        assert!(trace.iter().all(|t| t.loss.reg == 0.0 && t.loss.con == 0.0));

        let full = QuantizerConfig {
            alpha: 0.5,
            beta: 0.1,
            ..config
        };
        let (_, trace) = train_codebooks(&points, &weights, &fields, &full, 5).unwrap();
        for t in &trace {
            let l = t.loss;
            assert!(l.recon >= 0.0 && l.reg > 0.0 && l.con > 0.0);
            assert!((l.total - (l.recon + 0.5 * l.reg + 0.1 * l.con)).abs() < 1e-9);
            assert!(l.reg <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn non_finite_embeddings_rejected() {
        let mut points = blobs(0, 10, 2);
        points.data[3] = f64::NAN;
        let r = train_codebooks(&points, &[1.0; 10], &one_field(10), &QuantizerConfig { m: 1, k: 2, ..Default::default() }, 0);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn diverging_loss_aborts_with_diagnostics() {
        let points = Matrix::from_vec(4, 2, vec![1e200, 1e200, -1e200, 1e200, 3.0, 1.0, 0.0, 0.0]).unwrap();
        let config = QuantizerConfig {
            m: 1,
            k: 2,
            alpha: 0.0,
            beta: 0.0,
            epochs: 2,
            ..QuantizerConfig::default()
        };
        let r = train_codebooks(&points, &[1.0; 4], &one_field(4), &config, 0);
        assert!(matches!(r, Err(Error::NonFiniteQuantizerLoss { epoch: 0, .. })), "{r:?}");
    }

    #[test]
    fn regularization_balances_codes() {
        // Heavy-headed weights concentrate plain PQ on the popular cluster.
        let (points, weights, fields) = sample_problem(3);
        let base = QuantizerConfig {
            m: 2,
            k: 8,
            alpha: 0.0,
            beta: 0.0,
            epochs: 20,
            batch_size: 64,
            ..QuantizerConfig::default()
        };
        let (plain, _) = train_codebooks(&points, &weights, &fields, &base, 9).unwrap();
        let (reg, _) = train_codebooks(&points, &weights, &fields, &QuantizerConfig { alpha: 1.0, ..base }, 9).unwrap();
        assert!(reg.weighted_code_entropy(&weights) >= plain.weighted_code_entropy(&weights));
    }
}

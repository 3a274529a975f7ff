use rand::Rng;

use crate::error::{Error, Result};

/// Read-only view of the `m` sub-codebooks of one codebook group.
#[derive(Debug, Clone, Copy)]
pub struct CodebookView<'a> {
    pub m: usize,
    pub k: usize,
    pub sub_dim: usize,
    /// `m * k * sub_dim` values, sub-space major.
    pub codewords: &'a [f64],
}

impl<'a> CodebookView<'a> {
    pub fn new(m: usize, k: usize, sub_dim: usize, codewords: &'a [f64]) -> Result<Self> {
        if codewords.len() != m * k * sub_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} codeword values for M={m}, K={k}, sub-dim={sub_dim}, found {}",
                m * k * sub_dim,
                codewords.len()
            )));
        }
        Ok(Self {
            m,
            k,
            sub_dim,
            codewords,
        })
    }

    pub fn dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn sub_codebook(&self, i: usize) -> &'a [f64] {
        let n = self.k * self.sub_dim;
        &self.codewords[i * n..(i + 1) * n]
    }

    pub(crate) fn offset(&self, i: usize, code: usize) -> usize {
        (i * self.k + code) * self.sub_dim
    }

    pub fn codeword(&self, i: usize, code: usize) -> &'a [f64] {
        let o = self.offset(i, code);
        &self.codewords[o..o + self.sub_dim]
    }

    fn check_codes(&self, codes: &[u32]) -> Result<()> {
        if codes.len() != self.m {
            return Err(Error::DimensionMismatch(format!(
                "code row has {} entries, expected M = {}",
                codes.len(),
                self.m
            )));
        }
        for (i, &c) in codes.iter().enumerate() {
            if c as usize >= self.k {
                return Err(Error::CodeOutOfRange {
                    sub: i,
                    index: c,
                    k: self.k,
                });
            }
        }
        Ok(())
    }
}

/// `floor(log2(max(n, 1))) + 1`.
pub fn popularity_weight(count: u64) -> f64 {
    (count.max(1).ilog2() + 1) as f64
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword by Euclidean distance, lowest index on ties.
///
/// `sub_codebook` holds `K` rows of `sub_vector.len()` values.
pub fn assign(sub_vector: &[f64], sub_codebook: &[f64]) -> usize {
    let d = sub_vector.len().max(1);
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, c) in sub_codebook.chunks_exact(d).enumerate() {
        let dist = sq_dist(sub_vector, c);
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

pub(crate) fn softmax_neg_in_place(values: &mut [f64], tau: f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (-(*v - min) / tau).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Softmax of `-dist^2 / tau` over the codewords of one sub-codebook.
pub fn soft_assign(sub_vector: &[f64], sub_codebook: &[f64], tau: f64) -> Vec<f64> {
    let d = sub_vector.len().max(1);
    let mut out: Vec<f64> = sub_codebook.chunks_exact(d).map(|c| sq_dist(sub_vector, c)).collect();
    softmax_neg_in_place(&mut out, tau);
    out
}

/// Concatenate the selected codeword of every sub-space.
pub fn reconstruct(codes: &[u32], view: &CodebookView) -> Result<Vec<f64>> {
    view.check_codes(codes)?;
    let mut out = Vec::with_capacity(view.dim());
    for (i, &c) in codes.iter().enumerate() {
        out.extend_from_slice(view.codeword(i, c as usize));
    }
    Ok(out)
}

/// Pooled embedding of a code row; concatenation, identical to [`reconstruct`].
pub fn emb_pool(codes: &[u32], view: &CodebookView) -> Result<Vec<f64>> {
    reconstruct(codes, view)
}

/// Popularity-normalized squared reconstruction error.
pub fn recon_loss(originals: &[&[f64]], reconstructed: &[&[f64]], weights: &[f64]) -> Result<f64> {
    if originals.is_empty() || originals.len() != reconstructed.len() || originals.len() != weights.len() {
        return Err(Error::InvalidInput("recon_loss needs a non-empty, aligned batch".into()));
    }
    let total: f64 = weights.iter().sum();
    Ok(originals
        .iter()
        .zip(reconstructed)
        .zip(weights)
        .map(|((s, q), r)| r / total * sq_dist(s, q))
        .sum())
}

/// `mean_i exp(-H_i)` of the weighted code distribution of each sub-space.
///
/// `probs` holds one `m * k` row per feature (sub-space major).
pub fn reg_loss(probs: &[&[f64]], weights: &[f64], m: usize, k: usize, epsilon: f64) -> Result<f64> {
    if probs.is_empty() || probs.len() != weights.len() {
        return Err(Error::InvalidInput("reg_loss needs a non-empty, aligned batch".into()));
    }
    if probs.iter().any(|p| p.len() != m * k) {
        return Err(Error::DimensionMismatch("soft assignment rows must hold M*K values".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut mass = vec![0.0; m * k];
    for (p, r) in probs.iter().zip(weights) {
        for (acc, v) in mass.iter_mut().zip(p.iter()) {
            *acc += r / total * v;
        }
    }
    Ok(mass
        .chunks_exact(k)
        .map(|p| (-entropy(p, epsilon)).exp())
        .sum::<f64>()
        / m as f64)
}

pub(crate) fn entropy(p: &[f64], epsilon: f64) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * (v + epsilon).ln()).sum::<f64>()
}

/// Replace each position independently with probability `rho` by a uniform code.
pub fn sample_negative(codes: &[u32], rho: f64, k: usize, rng: &mut impl Rng) -> Vec<u32> {
    codes
        .iter()
        .map(|&c| {
            if rho > 0.0 && rng.random_bool(rho.min(1.0)) {
                rng.random_range(0..k as u32)
            } else {
                c
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn info_nce(cos: &[f64]) -> f64 {
    let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + cos.iter().map(|c| (c - max).exp()).sum::<f64>().ln();
    lse - cos[0]
}

/// InfoNCE over cosine similarities, averaged over anchors.
pub fn contrastive_loss(anchors: &[&[f64]], positives: &[&[f64]], negatives: &[Vec<&[f64]>]) -> Result<f64> {
    if anchors.is_empty() || anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::InvalidInput("contrastive_loss needs a non-empty, aligned batch".into()));
    }
    let mut total = 0.0;
    for ((s, pos), negs) in anchors.iter().zip(positives).zip(negatives) {
        if negs.is_empty() {
            return Err(Error::InvalidInput("contrastive_loss needs at least one negative".into()));
        }
        let mut cos = Vec::with_capacity(negs.len() + 1);
        cos.push(cosine(s, pos));
        cos.extend(negs.iter().map(|z| cosine(s, z)));
        total += info_nce(&cos);
    }
    Ok(total / anchors.len() as f64)
}

fn check_batch(view: &CodebookView, anchors: &[&[f64]], weights: Option<&[f64]>, grad: &Option<&mut [f64]>) -> Result<()> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("empty quantizer batch".into()));
    }
    if anchors.iter().any(|a| a.len() != view.dim()) {
        return Err(Error::DimensionMismatch(format!("anchors must have length {}", view.dim())));
    }
    if weights.is_some_and(|w| w.len() != anchors.len()) {
        return Err(Error::DimensionMismatch("one weight per anchor required".into()));
    }
    if grad.as_ref().is_some_and(|g| g.len() != view.codewords.len()) {
        return Err(Error::DimensionMismatch("gradient buffer must match the codewords".into()));
    }
    Ok(())
}

/// Weighted reconstruction loss for fixed code rows (`codes` holds `m` per anchor).
/// Adds the codeword gradient into `grad` when given.
pub fn recon_objective(
    view: &CodebookView,
    anchors: &[&[f64]],
    weights: &[f64],
    codes: &[u32],
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_batch(view, anchors, Some(weights), &grad)?;
    let total_w: f64 = weights.iter().sum();
    let sd = view.sub_dim;
    let mut loss = 0.0;
    for (j, (s, r)) in anchors.iter().zip(weights).enumerate() {
        let row = &codes[j * view.m..(j + 1) * view.m];
        view.check_codes(row)?;
        let w = r / total_w;
        for (i, &c) in row.iter().enumerate() {
            let o = view.offset(i, c as usize);
            let cw = &view.codewords[o..o + sd];
            let si = &s[i * sd..(i + 1) * sd];
            loss += w * sq_dist(si, cw);
            if let Some(g) = grad.as_deref_mut() {
                for t in 0..sd {
                    g[o + t] += 2.0 * w * (cw[t] - si[t]);
                }
            }
        }
    }
    Ok(loss)
}

/// Entropy regularizer on soft assignments of the batch.
///
/// `sq_dists`, when provided, must hold the `m * k` squared distances of each
/// anchor to every codeword, so callers that already computed them for hard
/// assignment do not pay twice.
pub fn reg_objective(
    view: &CodebookView,
    anchors: &[&[f64]],
    weights: &[f64],
    tau: f64,
    epsilon: f64,
    sq_dists: Option<&[f64]>,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_batch(view, anchors, Some(weights), &grad)?;
    let (m, k, sd) = (view.m, view.k, view.sub_dim);
    let b = anchors.len();
    let mut soft = match sq_dists {
        Some(d) if d.len() == b * m * k => d.to_vec(),
        Some(_) => return Err(Error::DimensionMismatch("distance buffer must hold B*M*K values".into())),
        None => pairwise_sq_dists(view, anchors),
    };
    for row in soft.chunks_exact_mut(k) {
        softmax_neg_in_place(row, tau);
    }
    let total_w: f64 = weights.iter().sum();
    let mut mass = vec![0.0; m * k];
    for (j, r) in weights.iter().enumerate() {
        let w = r / total_w;
        for (acc, p) in mass.iter_mut().zip(&soft[j * m * k..(j + 1) * m * k]) {
            *acc += w * p;
        }
    }
    let per_sub: Vec<f64> = mass.chunks_exact(k).map(|p| (-entropy(p, epsilon)).exp()).collect();
    let loss = per_sub.iter().sum::<f64>() / m as f64;

    let Some(g) = grad.as_deref_mut() else {
        return Ok(loss);
    };
    // dL/dp_{ik}
    let mut dp = vec![0.0; m * k];
    for i in 0..m {
        for c in 0..k {
            let p = mass[i * k + c];
            dp[i * k + c] = per_sub[i] / m as f64 * ((p + epsilon).ln() + p / (p + epsilon));
        }
    }
    for (j, s) in anchors.iter().enumerate() {
        let w = weights[j] / total_w;
        for i in 0..m {
            let a = &soft[(j * m + i) * k..(j * m + i + 1) * k];
            let gk = &dp[i * k..(i + 1) * k];
            let mean: f64 = a.iter().zip(gk).map(|(x, y)| x * y).sum();
            let si = &s[i * sd..(i + 1) * sd];
            for c in 0..k {
                // dL/du_c where u_c = -dist_c / tau
                let du = w * a[c] * (gk[c] - mean);
                if du == 0.0 {
                    continue;
                }
                let scale = 2.0 * du / tau;
                let o = view.offset(i, c);
                for t in 0..sd {
                    g[o + t] += scale * (si[t] - view.codewords[o + t]);
                }
            }
        }
    }
    Ok(loss)
}

/// Squared distance of every anchor to every codeword, laid out `[anchor][sub][code]`.
pub(crate) fn pairwise_sq_dists(view: &CodebookView, anchors: &[&[f64]]) -> Vec<f64> {
    let (m, k, sd) = (view.m, view.k, view.sub_dim);
    let mut out = Vec::with_capacity(anchors.len() * m * k);
    for s in anchors {
        for i in 0..m {
            let si = &s[i * sd..(i + 1) * sd];
            out.extend(view.sub_codebook(i).chunks_exact(sd).map(|c| sq_dist(si, c)));
        }
    }
    out
}

/// Contrastive loss where positives and negatives are pooled from fixed code rows.
///
/// `positives` holds `m` codes per anchor, `negatives` holds
/// `n_negatives * m` codes per anchor.
pub fn contrastive_objective(
    view: &CodebookView,
    anchors: &[&[f64]],
    positives: &[u32],
    negatives: &[u32],
    n_negatives: usize,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_batch(view, anchors, None, &grad)?;
    let m = view.m;
    let b = anchors.len();
    if n_negatives == 0 || positives.len() != b * m || negatives.len() != b * n_negatives * m {
        return Err(Error::DimensionMismatch("contrastive code rows do not match the batch".into()));
    }
    let sd = view.sub_dim;
    let mut total = 0.0;
    let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(n_negatives + 1);
    let mut cos = Vec::with_capacity(n_negatives + 1);
    for (j, s) in anchors.iter().enumerate() {
        pooled.clear();
        cos.clear();
        let rows = std::iter::once(&positives[j * m..(j + 1) * m])
            .chain(negatives[j * n_negatives * m..(j + 1) * n_negatives * m].chunks_exact(m));
        for row in rows.clone() {
            let v = emb_pool(row, view)?;
            cos.push(cosine(s, &v));
            pooled.push(v);
        }
        total += info_nce(&cos);
        let Some(g) = grad.as_deref_mut() else { continue };
        let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cos.iter().map(|c| (c - max).exp()).sum();
        let ns = norm(s);
        for (n, (row, v)) in rows.zip(&pooled).enumerate() {
            let pi = (cos[n] - max).exp() / z;
            let dcos = (pi - if n == 0 { 1.0 } else { 0.0 }) / b as f64;
            let nv = norm(v);
            if ns == 0.0 || nv == 0.0 || dcos == 0.0 {
                continue;
            }
            for (i, &c) in row.iter().enumerate() {
                let o = view.offset(i, c as usize);
                for t in 0..sd {
                    let idx = i * sd + t;
                    g[o + t] += dcos * (s[idx] / (ns * nv) - cos[n] * v[idx] / (nv * nv));
                }
            }
        }
    }
    Ok(total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn popularity_examples() {
        assert_eq!(popularity_weight(0), 1.0);
        assert_eq!(popularity_weight(1), 1.0);
        assert_eq!(popularity_weight(1024), 11.0);
        assert_eq!(popularity_weight(1023), (1023f64.log2().floor()) + 1.0);
    }

    #[test]
    fn assign_examples() {
        let cb = [0.0, 0.0, 1.0, 1.0, 0.9, 0.1];
        assert_eq!(assign(&[1.0, 0.0], &cb), 2);
        assert_eq!(assign(&[0.0, 0.0], &cb), 0);
        let tie = [5.0, 5.0, 1.0, 0.0, 9.0, 9.0, -1.0, 0.0];
        assert_eq!(assign(&[0.0, 0.0], &tie), 1);
    }

    #[test]
    fn soft_assign_examples() {
        let p = soft_assign(&[0.0], &[1.0, -1.0], 1.0);
        assert_relative_eq!(p[0], 0.5);
        assert_relative_eq!(p[1], 0.5);
        let p = soft_assign(&[0.0], &[0.0, 1.0], 1.0);
        let e = (-1.0f64).exp();
        assert_relative_eq!(p[0], 1.0 / (1.0 + e), epsilon = 1e-12);
        assert_relative_eq!(p[1], e / (1.0 + e), epsilon = 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        let cb = [0.3, 0.2, 0.9, 0.5, 0.35, 0.21];
        let p = soft_assign(&[0.31, 0.2], &cb, 1e-4);
        let hard = assign(&[0.31, 0.2], &cb);
        assert!((p[hard] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn soft_assign_sharpens_with_lower_tau() {
        let cb = [0.0, 0.0, 1.0, 0.5, 0.4, 0.3, -0.2, 0.8];
        let s = [0.3, 0.2];
        let hard = assign(&s, &cb);
        let kl = |tau: f64| -soft_assign(&s, &cb, tau)[hard].ln();
        let mut prev = f64::INFINITY;
        for tau in [10.0, 1.0, 0.3, 0.1, 0.01, 0.001] {
            let v = kl(tau);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn reconstruct_examples() {
        let cw = [1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 4.0];
        let view = CodebookView::new(2, 2, 2, &cw).unwrap();
        assert_eq!(reconstruct(&[0, 1], &view).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(emb_pool(&[0, 1], &view).unwrap(), reconstruct(&[0, 1], &view).unwrap());
        assert!(matches!(
            reconstruct(&[0, 2], &view),
            Err(Error::CodeOutOfRange { sub: 1, index: 2, k: 2 })
        ));
        let single = CodebookView::new(1, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(reconstruct(&[1], &single).unwrap(), vec![4.0, 5.0, 6.0]);
        // a point on the codeword grid round-trips exactly
        let s = [0.0, 0.0, 3.0, 4.0];
        let codes: Vec<u32> = (0..2).map(|i| assign(&s[i * 2..i * 2 + 2], view.sub_codebook(i)) as u32).collect();
        assert_eq!(reconstruct(&codes, &view).unwrap(), s.to_vec());
    }

    #[test]
    fn recon_loss_examples() {
        let s: [&[f64]; 1] = [&[1.0, 0.0]];
        let q: [&[f64]; 1] = [&[0.0, 0.0]];
        assert_eq!(recon_loss(&s, &q, &[1.0]).unwrap(), 1.0);
        assert_eq!(recon_loss(&s, &s, &[1.0]).unwrap(), 0.0);
        let s: [&[f64]; 2] = [&[1.0], &[3f64.sqrt()]];
        let q: [&[f64]; 2] = [&[0.0], &[0.0]];
        assert_relative_eq!(recon_loss(&s, &q, &[1.0, 3.0]).unwrap(), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn reg_loss_examples() {
        let uniform2 = [0.5, 0.5];
        assert_relative_eq!(reg_loss(&[&uniform2], &[1.0], 1, 2, 1e-10).unwrap(), 0.5, epsilon = 1e-9);
        let uniform4 = [0.25; 4];
        assert_relative_eq!(reg_loss(&[&uniform4], &[3.0], 1, 4, 1e-10).unwrap(), 0.25, epsilon = 1e-9);
        let onehot = [1.0, 0.0, 0.0];
        assert_relative_eq!(reg_loss(&[&onehot], &[1.0], 1, 3, 1e-10).unwrap(), 1.0, epsilon = 1e-9);
        // weighted mixture of two one-hots is uniform
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_relative_eq!(reg_loss(&[&a, &b], &[2.0, 2.0], 1, 2, 1e-10).unwrap(), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn sample_negative_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = [3, 1, 4, 1];
        assert_eq!(sample_negative(&c, 0.0, 8, &mut rng), c.to_vec());
        assert_eq!(sample_negative(&[0, 0, 0], 1.0, 1, &mut rng), vec![0, 0, 0]);

        let (k, m, n) = (8usize, 4usize, 100_000usize);
        let c = [0u32, 5, 2, 7];
        let mut total = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = sample_negative(&c, 0.5, k, &mut rng);
            let h = z.iter().zip(&c).filter(|(a, b)| a != b).count() as f64;
            total += h;
            sq += h * h;
        }
        let mean = total / n as f64;
        let var = sq / n as f64 - mean * mean;
        let expected = 0.5 * m as f64 * (1.0 - 1.0 / k as f64);
        assert!((mean - expected).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn contrastive_examples() {
        let s: &[f64] = &[1.0, 0.0];
        let pos: &[f64] = &[2.0, 0.0];
        let orth: &[f64] = &[0.0, 1.0];
        let opp: &[f64] = &[-1.0, 0.0];
        let v = contrastive_loss(&[s], &[pos], &[vec![orth]]).unwrap();
        assert_relative_eq!(v, -(1f64.exp() / (1f64.exp() + 1.0)).ln(), epsilon = 1e-12);
        assert!((v - 0.3133).abs() < 1e-4);
        let v = contrastive_loss(&[s], &[orth], &[vec![orth]]).unwrap();
        assert_relative_eq!(v, 2f64.ln(), epsilon = 1e-12);
        let v = contrastive_loss(&[s], &[pos], &[vec![opp]]).unwrap();
        assert!((v - 0.1269).abs() < 1e-4);
        let zero: &[f64] = &[0.0, 0.0];
        assert_eq!(cosine(zero, s), 0.0);
    }

    fn random_instance(rng: &mut ChaCha8Rng, m: usize, k: usize, sd: usize, b: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let cw: Vec<f64> = (0..m * k * sd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let anchors: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..m * sd).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let weights: Vec<f64> = (0..b).map(|_| popularity_weight(rng.random_range(0..5000))).collect();
        (cw, anchors, weights)
    }

    fn check_fd(cw: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = cw.to_vec();
        for idx in 0..cw.len() {
            probe[idx] = cw[idx] + h;
            let up = f(&probe);
            probe[idx] = cw[idx] - h;
            let down = f(&probe);
            probe[idx] = cw[idx];
            let numeric = (up - down) / (2.0 * h);
            let denom = numeric.abs().max(analytic[idx].abs()).max(1e-6);
            worst = worst.max((numeric - analytic[idx]).abs() / denom);
        }
        worst
    }

    #[test]
    fn recon_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (m, k, sd, b) = (2, 3, 2, 5);
            let (cw, anchors, weights) = random_instance(&mut rng, m, k, sd, b);
            let refs: Vec<&[f64]> = anchors.iter().map(|a| a.as_slice()).collect();
            let codes: Vec<u32> = (0..b * m).map(|_| rng.random_range(0..k as u32)).collect();
            let view = CodebookView::new(m, k, sd, &cw).unwrap();
            let mut g = vec![0.0; cw.len()];
            recon_objective(&view, &refs, &weights, &codes, Some(&mut g)).unwrap();
            let err = check_fd(&cw, &g, |p| {
                let v = CodebookView::new(m, k, sd, p).unwrap();
                recon_objective(&v, &refs, &weights, &codes, None).unwrap()
            });
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn reg_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 0..20 {
            let (m, k, sd, b) = (2, 4, 3, 6);
            let (cw, anchors, weights) = random_instance(&mut rng, m, k, sd, b);
            let refs: Vec<&[f64]> = anchors.iter().map(|a| a.as_slice()).collect();
            let tau = if n % 2 == 0 { 1.0 } else { 0.3 };
            let view = CodebookView::new(m, k, sd, &cw).unwrap();
            let mut g = vec![0.0; cw.len()];
            let value = reg_objective(&view, &refs, &weights, tau, 1e-10, None, Some(&mut g)).unwrap();
            let soft: Vec<Vec<f64>> = refs
                .iter()
                .map(|s| (0..m).flat_map(|i| soft_assign(&s[i * sd..(i + 1) * sd], view.sub_codebook(i), tau)).collect())
                .collect();
            let soft_refs: Vec<&[f64]> = soft.iter().map(|p| p.as_slice()).collect();
            assert_relative_eq!(value, reg_loss(&soft_refs, &weights, m, k, 1e-10).unwrap(), epsilon = 1e-12);
            let err = check_fd(&cw, &g, |p| {
                let v = CodebookView::new(m, k, sd, p).unwrap();
                reg_objective(&v, &refs, &weights, tau, 1e-10, None, None).unwrap()
            });
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let (m, k, sd, b, n_neg) = (2, 4, 2, 4, 3);
            let (cw, anchors, _) = random_instance(&mut rng, m, k, sd, b);
            let refs: Vec<&[f64]> = anchors.iter().map(|a| a.as_slice()).collect();
            let pos: Vec<u32> = (0..b * m).map(|_| rng.random_range(0..k as u32)).collect();
            let neg: Vec<u32> = pos
                .chunks_exact(m)
                .flat_map(|row| (0..n_neg).flat_map(|_| sample_negative(row, 0.5, k, &mut rng)).collect::<Vec<_>>())
                .collect();
            let view = CodebookView::new(m, k, sd, &cw).unwrap();
            let mut g = vec![0.0; cw.len()];
            let value = contrastive_objective(&view, &refs, &pos, &neg, n_neg, Some(&mut g)).unwrap();

            let pooled_pos: Vec<Vec<f64>> = pos.chunks_exact(m).map(|r| emb_pool(r, &view).unwrap()).collect();
            let pooled_neg: Vec<Vec<Vec<f64>>> = neg
                .chunks_exact(n_neg * m)
                .map(|rows| rows.chunks_exact(m).map(|r| emb_pool(r, &view).unwrap()).collect())
                .collect();
            let pos_refs: Vec<&[f64]> = pooled_pos.iter().map(|v| v.as_slice()).collect();
            let neg_refs: Vec<Vec<&[f64]>> = pooled_neg.iter().map(|n| n.iter().map(|v| v.as_slice()).collect()).collect();
            assert_relative_eq!(value, contrastive_loss(&refs, &pos_refs, &neg_refs).unwrap(), epsilon = 1e-12);

            let err = check_fd(&cw, &g, |p| {
                let v = CodebookView::new(m, k, sd, p).unwrap();
                contrastive_objective(&v, &refs, &pos, &neg, n_neg, None).unwrap()
            });
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    proptest! {
        #[test]
        fn hard_assignment_is_nearest(
            cb in prop::collection::vec(-2.0f64..2.0, 2 * 6),
            s in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let a = assign(&s, &cb);
            let best = sq_dist(&s, &cb[a * 2..a * 2 + 2]);
            for c in cb.chunks_exact(2) {
                prop_assert!(best <= sq_dist(&s, c));
            }
        }

        #[test]
        fn soft_assign_sums_to_one(
            cb in prop::collection::vec(-3.0f64..3.0, 3 * 5),
            s in prop::collection::vec(-3.0f64..3.0, 3),
            tau in 1e-3f64..10.0,
        ) {
            let p = soft_assign(&s, &cb, tau);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn reg_loss_bounded(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..10),
            counts in prop::collection::vec(0u64..10_000, 10),
        ) {
            let k = 4;
            let eps = 1e-10;
            let probs: Vec<Vec<f64>> = rows.iter().map(|r| {
                let t: f64 = r.iter().sum::<f64>() + 1e-12;
                r.iter().map(|v| v / t).collect()
            }).collect();
            let refs: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
            let w: Vec<f64> = counts[..refs.len()].iter().map(|&n| popularity_weight(n)).collect();
            let v = reg_loss(&refs, &w, 1, k, eps).unwrap();
            let delta = 10.0 * eps * k as f64;
            prop_assert!(v >= 1.0 / k as f64 - delta - 1e-9 && v <= 1.0 + delta);
        }

        #[test]
        fn zero_rho_is_identity(codes in prop::collection::vec(0u32..16, 1..8), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(sample_negative(&codes, 0.0, 16, &mut rng), codes);
        }
    }
}

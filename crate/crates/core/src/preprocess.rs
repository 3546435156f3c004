//! Instance normalization, patch tokenization, and the two masks (padding
//! and training) applied before encoding.

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{Rng, Tensor};

/// A batch of right-padded univariate series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    batch: usize,
    len: usize,
    values: Vec<f64>,
    valid_len: Vec<usize>,
    labels: Option<Vec<usize>>,
}

impl SeriesBatch {
    /// Builds a batch from row-major values and a validity mask. The mask
    /// must be a prefix mask with at least two observed steps per row, and
    /// padded positions must hold zeros.
    pub fn new(batch: usize, len: usize, values: Vec<f64>, valid: &[bool], labels: Option<Vec<usize>>) -> Result<Self> {
        if batch == 0 || len == 0 || values.len() != batch * len || valid.len() != batch * len {
            return Err(shape_err!(
                "series batch {batch}x{len} with {} values and {} mask flags",
                values.len(),
                valid.len()
            ));
        }
        let mut valid_len = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = &valid[b * len..(b + 1) * len];
            let n = row.iter().take_while(|&&v| v).count();
            if row[n..].iter().any(|&v| v) {
                return Err(Error::Contract(format!("row {b}: validity mask is not a prefix mask")));
            }
            valid_len.push(n);
        }
        Self::from_lengths(batch, len, values, valid_len, labels)
    }

    /// Builds a batch from per-row observed lengths.
    pub fn from_lengths(
        batch: usize,
        len: usize,
        mut values: Vec<f64>,
        valid_len: Vec<usize>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if batch == 0 || values.len() != batch * len || valid_len.len() != batch {
            return Err(shape_err!("series batch {batch}x{len}: {} values, {} lengths", values.len(), valid_len.len()));
        }
        if let Some(l) = &labels {
            if l.len() != batch {
                return Err(shape_err!("{} labels for batch of {batch}", l.len()));
            }
        }
        for (b, &n) in valid_len.iter().enumerate() {
            if n < 2 || n > len {
                return Err(Error::Contract(format!("row {b}: {n} valid steps (need 2..={len})")));
            }
            let row = &mut values[b * len..(b + 1) * len];
            if row[..n].iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("row {b}: non-finite observed value")));
            }
            row[n..].fill(0.0);
        }
        Ok(Self { batch, len, values, valid_len, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Padded length of every row.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.values[b * self.len..(b + 1) * self.len]
    }

    /// Observed prefix of row `b`.
    pub fn valid_row(&self, b: usize) -> &[f64] {
        &self.row(b)[..self.valid_len[b]]
    }

    pub fn valid_len(&self, b: usize) -> usize {
        self.valid_len[b]
    }

    pub fn valid_lengths(&self) -> &[usize] {
        &self.valid_len
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.batch)
            .flat_map(|b| (0..self.len).map(move |t| t < self.valid_len[b]))
            .collect()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Channel count; only univariate series are supported.
    pub fn channels(&self) -> usize {
        1
    }

    /// Same layout with new values (padding is re-zeroed).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_lengths(self.batch, self.len, values, self.valid_len.clone(), self.labels.clone())
    }

    pub fn values_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.batch, self.len], self.values.clone()).expect("consistent batch shape")
    }
}

/// Per-series statistics stashed by [`revin_normalize`] plus the affine pair
/// that was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub gamma: f64,
    pub beta: f64,
}

/// Per-series mean and population std over the observed region, std floored
/// at `eps`. Returns the standardized (pre-affine) values with zeros in the
/// padding.
pub fn standardize(batch: &SeriesBatch, eps: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if !(eps > 0.0) {
        return Err(config_err!("instance-norm eps must be positive, got {eps}"));
    }
    let mut z = vec![0.0; batch.values.len()];
    let mut means = Vec::with_capacity(batch.batch);
    let mut stds = Vec::with_capacity(batch.batch);
    for b in 0..batch.batch {
        let x = batch.valid_row(b);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(eps);
        for (o, v) in z[b * batch.len..].iter_mut().zip(x) {
            *o = (v - mean) / std;
        }
        means.push(mean);
        stds.push(std);
    }
    Ok((z, means, stds))
}

/// Reversible instance normalization with a fixed affine pair.
pub fn revin_normalize(batch: &SeriesBatch, gamma: f64, beta: f64, eps: f64) -> Result<(SeriesBatch, RevinStats)> {
    let (mut z, mean, std) = standardize(batch, eps)?;
    for b in 0..batch.batch {
        for v in &mut z[b * batch.len..b * batch.len + batch.valid_len[b]] {
            *v = gamma * *v + beta;
        }
    }
    Ok((batch.with_values(z)?, RevinStats { mean, std, gamma, beta }))
}

/// Inverse of [`revin_normalize`] for a `[B, ..]` tensor.
pub fn revin_denormalize(z: &Tensor, stats: &RevinStats) -> Result<Tensor> {
    let b = stats.mean.len();
    if z.rank() == 0 || z.shape()[0] != b || stats.std.len() != b {
        return Err(shape_err!("denormalize: tensor {:?} against stats for {b} series", z.shape()));
    }
    if stats.gamma == 0.0 || !stats.gamma.is_finite() {
        return Err(Error::Contract("denormalize needs an invertible (nonzero) gamma".into()));
    }
    let per = z.numel() / b;
    let out: Vec<f64> = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = i / per;
            (v - stats.beta) / stats.gamma * stats.std[s] + stats.mean[s]
        })
        .collect();
    Tensor::from_vec(z.shape(), out)
}

/// Number of patches for a padded length.
pub fn num_patches(len: usize, patch_len: usize) -> Result<usize> {
    if patch_len == 0 || len < patch_len {
        return Err(config_err!("series length {len} shorter than patch length {patch_len}"));
    }
    Ok(len / patch_len)
}

/// `true` for every patch overlapping at least one observed step.
pub fn padding_mask(valid_len: &[usize], n_patches: usize, patch_len: usize) -> Vec<bool> {
    valid_len
        .iter()
        .flat_map(|&v| (0..n_patches).map(move |i| i * patch_len < v))
        .collect()
}

/// Cuts each row into `floor(L / P)` non-overlapping patches, dropping the
/// remainder. Returns `[B, N, P]` patches and the padding mask.
pub fn patchify(normalized: &SeriesBatch, patch_len: usize) -> Result<(Tensor, Vec<bool>)> {
    let n = num_patches(normalized.len, patch_len)?;
    let t = normalized.values_tensor();
    let patches = patch_tensor(&t, n, patch_len)?;
    Ok((patches, padding_mask(&normalized.valid_len, n, patch_len)))
}

fn patch_tensor(x: &Tensor, n: usize, patch_len: usize) -> Result<Tensor> {
    let b = x.shape()[0];
    x.narrow(1, 0, n * patch_len)?.reshape(&[b, n, patch_len])
}

/// Trainable affine pair of the instance normalization (one channel).
#[derive(Clone, Debug)]
pub struct RevinAffine {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl RevinAffine {
    pub fn new() -> Self {
        Self {
            gamma: Tensor::param(&[], vec![1.0]).unwrap(),
            beta: Tensor::param(&[], vec![0.0]).unwrap(),
        }
    }
}

impl Default for RevinAffine {
    fn default() -> Self {
        Self::new()
    }
}

/// Patch projection, learned positions, the CLS vector and the learned
/// mask token.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    /// `[P, D]`
    pub w: Tensor,
    /// `[N + 1, D]`
    pub pos: Tensor,
    /// `[D]`
    pub cls: Tensor,
    /// `[D]`
    pub mask_token: Tensor,
}

impl PatchEmbedding {
    pub fn init(patch_len: usize, n_patches: usize, d: usize, rng: &mut Rng) -> Self {
        let std_w = (2.0 / (patch_len + d) as f64).sqrt();
        Self {
            w: Tensor::param(&[patch_len, d], rng.normal_vec(patch_len * d, std_w)).unwrap(),
            pos: Tensor::param(&[n_patches + 1, d], rng.normal_vec((n_patches + 1) * d, 0.02)).unwrap(),
            cls: Tensor::param(&[d], rng.normal_vec(d, 0.02)).unwrap(),
            mask_token: Tensor::param(&[d], rng.normal_vec(d, 0.02)).unwrap(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w.shape()[1]
    }
}

/// `tokens[b][0] = cls + pos[0]`, `tokens[b][i+1] = patch_i · W + pos[i+1]`.
pub fn embed_and_position(raw_patches: &Tensor, w: &Tensor, pos: &Tensor, cls: &Tensor) -> Result<Tensor> {
    if raw_patches.rank() != 3 || w.rank() != 2 || raw_patches.shape()[2] != w.shape()[0] {
        return Err(shape_err!("patches {:?} against projection {:?}", raw_patches.shape(), w.shape()));
    }
    let (b, n) = (raw_patches.shape()[0], raw_patches.shape()[1]);
    let d = w.shape()[1];
    if pos.shape() != [n + 1, d] || cls.shape() != [d] {
        return Err(shape_err!(
            "positions {:?} / cls {:?} for {n} patches of width {d}",
            pos.shape(),
            cls.shape()
        ));
    }
    let emb = raw_patches.matmul(w)?;
    let cls_rows = Tensor::zeros(&[b, 1, d]).add(cls)?;
    Tensor::concat(&[cls_rows, emb], 1)?.add(pos)
}

/// Draws the reconstruction mask: per series exactly
/// `round(ratio · valid_patches)` valid patches, uniformly without
/// replacement. Padding patches are never selected.
pub fn sample_train_mask(padding_mask: &[bool], n_patches: usize, ratio: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(config_err!("mask ratio {ratio} outside [0, 1)"));
    }
    if n_patches == 0 || !padding_mask.len().is_multiple_of(n_patches) {
        return Err(shape_err!("padding mask of {} flags for {n_patches} patches", padding_mask.len()));
    }
    let mut mask = vec![false; padding_mask.len()];
    for (row, out) in padding_mask.chunks_exact(n_patches).zip(mask.chunks_exact_mut(n_patches)) {
        let mut valid: Vec<usize> = (0..n_patches).filter(|&i| row[i]).collect();
        let k = masked_count(valid.len(), ratio);
        // partial Fisher-Yates: the first k slots end up a uniform k-subset
        for i in 0..k {
            let j = i + rng.below(valid.len() - i);
            valid.swap(i, j);
            out[valid[i]] = true;
        }
    }
    Ok(mask)
}

/// `round(ratio · valid)`, halves rounded away from zero.
pub fn masked_count(valid: usize, ratio: f64) -> usize {
    ((ratio * valid as f64).round() as usize).min(valid)
}

/// Encoder input for one batch.
#[derive(Clone, Debug)]
pub struct PatchedBatch {
    /// `[B, N+1, D]`, position 0 is the CLS slot.
    pub tokens: Tensor,
    /// `[B·N]`, true when the patch holds at least one observed step.
    pub padding_mask: Vec<bool>,
    /// `[B·N]`, true when the patch is hidden for reconstruction.
    pub train_mask: Vec<bool>,
    pub revin: RevinStats,
    /// `[B, N, P]` standardized patch values (reconstruction targets).
    pub raw_patches: Tensor,
    pub n_patches: usize,
}

impl PatchedBatch {
    pub fn batch_size(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// Token-level validity `[B·(N+1)]`; the CLS slot is always valid.
    pub fn token_valid(&self) -> Vec<bool> {
        self.padding_mask
            .chunks_exact(self.n_patches)
            .flat_map(|row| std::iter::once(true).chain(row.iter().copied()))
            .collect()
    }
}

/// Full tokenization path: instance norm with the trainable affine pair,
/// patching, embedding, positions, and mask-token substitution for the
/// patches flagged in `train_mask`.
pub fn tokenize(
    batch: &SeriesBatch,
    revin: &RevinAffine,
    embed: &PatchEmbedding,
    patch_len: usize,
    eps: f64,
    train_mask: Option<Vec<bool>>,
) -> Result<PatchedBatch> {
    let n = num_patches(batch.len(), patch_len)?;
    let bsz = batch.batch_size();
    let (z0, mean, std) = standardize(batch, eps)?;
    let valid = Tensor::from_vec(
        &[bsz, batch.len()],
        batch.valid_mask().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?;
    let z0 = Tensor::from_vec(&[bsz, batch.len()], z0)?;
    let gamma = revin.gamma.clamp_abs_min(eps);
    let z = z0.mul(&gamma)?.add(&revin.beta)?.mul(&valid)?;
    let patches = patch_tensor(&z, n, patch_len)?;
    let targets = patch_tensor(&z0, n, patch_len)?;
    let mut tokens = embed_and_position(&patches, &embed.w, &embed.pos, &embed.cls)?;
    let pad = padding_mask(batch.valid_lengths(), n, patch_len);
    let train_mask = match train_mask {
        Some(m) => {
            if m.len() != pad.len() {
                return Err(shape_err!("train mask of {} flags for {} patches", m.len(), pad.len()));
            }
            if m.iter().zip(&pad).any(|(&t, &p)| t && !p) {
                return Err(Error::Contract("train mask selects a padding patch".into()));
            }
            let rows: Vec<bool> = m
                .chunks_exact(n)
                .flat_map(|r| std::iter::once(false).chain(r.iter().copied()))
                .collect();
            tokens = tokens.mask_fill_rows(&rows, &embed.mask_token)?;
            m
        }
        None => vec![false; pad.len()],
    };
    let stats = RevinStats {
        mean,
        std,
        gamma: revin.gamma.item(),
        beta: revin.beta.item(),
    };
    Ok(PatchedBatch {
        tokens,
        padding_mask: pad,
        train_mask,
        revin: stats,
        raw_patches: targets,
        n_patches: n,
    })
}

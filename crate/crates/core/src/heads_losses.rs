//! Output heads (patch reconstruction, contrastive projection, hybrid
//! classifier), their losses, augmentation, and classification metrics.

use crate::error::{config_err, shape_err, Error, Result};
use crate::hope::LayerNormParams;
use crate::numerics::{Rng, Tensor};
use crate::preprocess::{PatchedBatch, SeriesBatch};

/// Additive logit for excluded entries; `exp` of it underflows to zero.
const EXCLUDED_LOGIT: f64 = -1e9;

/// Maps each non-CLS token to a patch of `P` values.
#[derive(Clone, Debug)]
pub struct ReconHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ReconHead {
    pub fn init(d: usize, patch_len: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        Self {
            w: Tensor::param(&[d, patch_len], rng.normal_vec(d * patch_len, std)).unwrap(),
            b: Tensor::param(&[patch_len], vec![0.0; patch_len]).unwrap(),
        }
    }

    /// `[B, N+1, D] -> [B, N, P]`
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let n = h.shape()[1] - 1;
        h.narrow(1, 1, n)?.matmul(&self.w)?.add(&self.b)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// `D -> D -> D_proj` GELU network whose output rows are unit length.
#[derive(Clone, Debug)]
pub struct ProjHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ProjHead {
    pub const NORM_EPS: f64 = 1e-12;

    pub fn init(d: usize, d_proj: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        Self {
            w1: Tensor::param(&[d, d], rng.normal_vec(d * d, std)).unwrap(),
            b1: Tensor::param(&[d], vec![0.0; d]).unwrap(),
            w2: Tensor::param(&[d, d_proj], rng.normal_vec(d * d_proj, std)).unwrap(),
            b2: Tensor::param(&[d_proj], vec![0.0; d_proj]).unwrap(),
        }
    }

    pub fn forward(&self, h_cls: &Tensor) -> Result<Tensor> {
        let z = h_cls.matmul(&self.w1)?.add(&self.b1)?.gelu().matmul(&self.w2)?.add(&self.b2)?;
        Ok(z.l2_normalize_rows(Self::NORM_EPS))
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// Classifier over `[h_cls ‖ features]`: layer norm, dropout, linear.
#[derive(Clone, Debug)]
pub struct HybridHead {
    pub norm: LayerNormParams,
    pub w_out: Tensor,
    pub bias: Tensor,
    pub d: usize,
    pub k: usize,
    pub dropout: f64,
}

impl HybridHead {
    pub fn init(d: usize, k: usize, num_classes: usize, dropout: f64, rng: &mut Rng) -> Self {
        let width = d + k;
        let std = (1.0 / width as f64).sqrt();
        Self {
            norm: LayerNormParams::new(width),
            w_out: Tensor::param(&[width, num_classes], rng.normal_vec(width * num_classes, std)).unwrap(),
            bias: Tensor::param(&[num_classes], vec![0.0; num_classes]).unwrap(),
            d,
            k,
            dropout,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm.visit(&format!("{prefix}.norm"), out);
        out.push((format!("{prefix}.w_out"), self.w_out.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("head", &mut out);
        out
    }
}

/// Logits `[B, C]` from the CLS representation and (standardized) features.
/// With `k == 0` the features are ignored and may be `None`.
pub fn classify(h_cls: &Tensor, f_ts: Option<&Tensor>, head: &HybridHead, train: bool, rng: &mut Rng) -> Result<Tensor> {
    if h_cls.rank() != 2 || h_cls.shape()[1] != head.d {
        return Err(config_err!("classifier expects CLS width {}, got {:?}", head.d, h_cls.shape()));
    }
    let z = if head.k == 0 {
        h_cls.clone()
    } else {
        let f = f_ts.ok_or_else(|| config_err!("classifier expects {} features, none given", head.k))?;
        if f.shape() != [h_cls.shape()[0], head.k] {
            return Err(config_err!("classifier expects features [{}, {}], got {:?}", h_cls.shape()[0], head.k, f.shape()));
        }
        Tensor::concat(&[h_cls.clone(), f.clone()], 1)?
    };
    head.norm.forward(&z)?.dropout(head.dropout, rng, train)?.matmul(&head.w_out)?.add(&head.bias)
}

#[derive(Clone, Debug)]
pub struct MtsmLoss {
    pub loss: Tensor,
    /// Set when no patch was masked; the loss is then a constant zero.
    pub empty_mask: bool,
}

/// Mean squared reconstruction error over every element of every masked
/// patch. Unmasked and padding patches do not contribute.
pub fn mtsm_loss(h: &Tensor, recon: &ReconHead, targets: &Tensor, train_mask: &[bool]) -> Result<MtsmLoss> {
    let pred = recon.forward(h)?;
    if pred.shape() != targets.shape() {
        return Err(shape_err!("reconstruction {:?} against targets {:?}", pred.shape(), targets.shape()));
    }
    let p = targets.last_dim();
    if train_mask.len() * p != targets.numel() {
        return Err(shape_err!("{} mask flags for targets {:?}", train_mask.len(), targets.shape()));
    }
    let masked = train_mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        log::warn!("reconstruction loss over an empty mask is defined as 0");
        return Ok(MtsmLoss { loss: Tensor::scalar(0.0), empty_mask: true });
    }
    let weights: Vec<f64> = train_mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, p))
        .collect();
    let weights = Tensor::from_vec(targets.shape(), weights)?;
    let loss = pred
        .sub(targets)?
        .mul(&weights)?
        .square()
        .sum_all()
        .scale(1.0 / (masked * p) as f64);
    Ok(MtsmLoss { loss, empty_mask: false })
}

/// Reconstruction loss for a tokenized batch after encoding.
pub fn mtsm_loss_for(h: &Tensor, recon: &ReconHead, batch: &PatchedBatch) -> Result<MtsmLoss> {
    mtsm_loss(h, recon, &batch.raw_patches, &batch.train_mask)
}

/// Noise and scaling applied to make a contrastive view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Noise std as a fraction of each series' std.
    pub noise: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { noise: 0.02, scale_lo: 0.8, scale_hi: 1.2 }
    }
}

/// `x' = s·(x + ε)` with `ε ~ N(0, (noise·σ)²)` per step and
/// `s ~ U(scale_lo, scale_hi)` per series. Returns the view and the scales.
pub fn augment_with(batch: &SeriesBatch, cfg: &AugmentConfig, rng: &mut Rng) -> Result<(SeriesBatch, Vec<f64>)> {
    let mut values = batch.values().to_vec();
    let len = batch.len();
    let mut scales = Vec::with_capacity(batch.batch_size());
    for b in 0..batch.batch_size() {
        let obs = batch.valid_row(b);
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        let sigma = (obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / obs.len() as f64).sqrt();
        let s = if cfg.scale_hi > cfg.scale_lo { rng.uniform_range(cfg.scale_lo, cfg.scale_hi) } else { cfg.scale_lo };
        let noise_std = cfg.noise * sigma;
        for v in &mut values[b * len..b * len + obs.len()] {
            let eps = if noise_std > 0.0 { noise_std * rng.normal() } else { 0.0 };
            *v = s * (*v + eps);
        }
        scales.push(s);
    }
    Ok((batch.with_values(values)?, scales))
}

pub fn augment(batch: &SeriesBatch, rng: &mut Rng) -> Result<SeriesBatch> {
    Ok(augment_with(batch, &AugmentConfig::default(), rng)?.0)
}

/// Symmetric NT-Xent over `2B` unit rows where rows `i` and `i + B` are the
/// two views of instance `i`. Each anchor's denominator covers every other
/// row.
pub fn info_nce(z: &Tensor, tau: f64) -> Result<Tensor> {
    if z.rank() != 2 || !z.shape()[0].is_multiple_of(2) {
        return Err(shape_err!("contrastive loss expects [2B, D] embeddings, got {:?}", z.shape()));
    }
    let rows = z.shape()[0];
    let b = rows / 2;
    if b < 2 {
        return Err(Error::Contract(format!("contrastive loss needs at least 2 instances, got {b}")));
    }
    if tau <= 0.0 {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    let mut diag = vec![0.0; rows * rows];
    for i in 0..rows {
        diag[i * rows + i] = EXCLUDED_LOGIT;
    }
    let logits = z.matmul(&z.t()?)?.scale(1.0 / tau).add(&Tensor::from_vec(&[rows, rows], diag)?)?;
    let positives: Vec<usize> = (0..rows).map(|i| (i + b) % rows).collect();
    Ok(logits.log_softmax_row().pick(&positives)?.mean_all().neg())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || (lambda1 == 0.0 && lambda2 == 0.0) {
            return Err(config_err!("loss weights ({lambda1}, {lambda2}) must be non-negative and not both zero"));
        }
        Ok(Self { lambda1, lambda2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

/// `λ1·mtsm + λ2·nce`; a missing contrastive term counts as zero.
pub fn total_pretrain_loss(mtsm: &Tensor, nce: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let rec = mtsm.scale(w.lambda1);
    match nce {
        Some(n) => rec.add(&n.scale(w.lambda2)),
        None => Ok(rec),
    }
}

/// Mean cross-entropy against `(1 - s)·onehot + s/C`.
pub fn ce_label_smooth(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(shape_err!("{} labels for logits {:?}", labels.len(), logits.shape()));
    }
    let c = logits.shape()[1];
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} outside {c} classes")));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(config_err!("label smoothing {smoothing} outside [0, 1]"));
    }
    let lp = logits.log_softmax_row();
    let nll = lp.pick(labels)?.mean_all().scale(-(1.0 - smoothing));
    let uniform = lp.sum_all().scale(-smoothing / (c as f64 * labels.len() as f64));
    nll.add(&uniform)
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Unweighted mean of per-class F1 over classes present in the labels or
/// the predictions.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> f64 {
    let classes: std::collections::BTreeSet<usize> = preds.iter().chain(labels).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let tp = preds.iter().zip(labels).filter(|(p, y)| **p == c && **y == c).count() as f64;
            let fp = preds.iter().zip(labels).filter(|(p, y)| **p == c && **y != c).count() as f64;
            let fn_ = preds.iter().zip(labels).filter(|(p, y)| **p != c && **y == c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    total / classes.len() as f64
}

pub fn metrics_from_preds(preds: &[usize], labels: &[usize]) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(shape_err!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: macro_f1(preds, labels),
    })
}

pub fn metrics(logits: &Tensor, labels: &[usize]) -> Result<Metrics> {
    metrics_from_preds(&argmax_rows(logits), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, RngState};
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(move |v| v / n)
            })
            .collect();
        Tensor::from_vec(&[rows.len(), d], data).unwrap()
    }

    #[test]
    fn mtsm_examples() {
        let (b, n, p, d) = (1, 3, 8, 4);
        let mut rng = RngState::new(1).rng();
        let h = Tensor::from_vec(&[b, n + 1, d], rng.normal_vec(b * (n + 1) * d, 1.0)).unwrap();
        let recon = ReconHead::init(d, p, &mut rng);
        let pred = recon.forward(&h).unwrap();
        let mask = vec![false, true, false];
        assert_eq!(mtsm_loss(&h, &recon, &pred, &mask).unwrap().loss.item(), 0.0);
        let mut t = pred.to_vec();
        t[p] -= 1.0;
        let targets = Tensor::from_vec(&[b, n, p], t).unwrap();
        let l = mtsm_loss(&h, &recon, &targets, &mask).unwrap();
        assert!((l.loss.item() - 1.0 / 8.0).abs() < 1e-15);
        let empty = mtsm_loss(&h, &recon, &targets, &[false; 3]).unwrap();
        assert!(empty.empty_mask);
        assert_eq!(empty.loss.item(), 0.0);
    }

    #[test]
    fn mtsm_ignores_unmasked_positions() {
        let mut rng = RngState::new(2).rng();
        let (n, p, d) = (4, 3, 5);
        let h = Tensor::from_vec(&[2, n + 1, d], rng.normal_vec(2 * (n + 1) * d, 1.0)).unwrap();
        let recon = ReconHead::init(d, p, &mut rng);
        let targets = rng.normal_vec(2 * n * p, 1.0);
        let mask = vec![true, false, false, true, false, true, false, false];
        let base = mtsm_loss(&h, &recon, &Tensor::from_vec(&[2, n, p], targets.clone()).unwrap(), &mask).unwrap();
        let mut perturbed = targets.clone();
        for (i, m) in mask.iter().enumerate() {
            if !m {
                perturbed[i * p..(i + 1) * p].iter_mut().for_each(|v| *v += 100.0);
            }
        }
        let other = mtsm_loss(&h, &recon, &Tensor::from_vec(&[2, n, p], perturbed).unwrap(), &mask).unwrap();
        assert_eq!(base.loss.item(), other.loss.item());
    }

    #[test]
    fn augment_examples() {
        let mut rng = RngState::new(3).rng();
        let batch = SeriesBatch::from_lengths(2, 6, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0], vec![4, 6], None)
            .unwrap();
        let off = AugmentConfig { noise: 0.0, scale_lo: 1.0, scale_hi: 1.0 };
        assert_eq!(augment_with(&batch, &off, &mut rng).unwrap().0, batch);
        let (view, scales) = augment_with(&batch, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(view.valid_lengths(), batch.valid_lengths());
        assert_eq!(&view.row(0)[4..], &[0.0, 0.0]);
        for v in view.valid_row(1) {
            assert!((v - 5.0 * scales[1]).abs() < 1e-12);
        }
        assert!(scales.iter().all(|s| (0.8..1.2).contains(s)));
    }

    #[test]
    fn augment_noise_has_the_stated_law() {
        let (rows, len) = (500, 2000);
        let mut rng = RngState::new(4).rng();
        let sigmas: Vec<f64> = (0..rows).map(|i| 0.5 + (i % 7) as f64).collect();
        let values: Vec<f64> = sigmas.iter().flat_map(|&s| rng.normal_vec(len, s)).collect();
        let batch = SeriesBatch::from_lengths(rows, len, values, vec![len; rows], None).unwrap();
        let (view, scales) = augment_with(&batch, &AugmentConfig::default(), &mut rng).unwrap();
        // ε / σ_series should be standard normal scaled by 0.02
        let mut sum_sq = 0.0;
        for b in 0..rows {
            let x = batch.valid_row(b);
            let m = x.iter().sum::<f64>() / len as f64;
            let sigma = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / len as f64).sqrt();
            for (xp, xv) in view.valid_row(b).iter().zip(x) {
                let eps = (xp - scales[b] * xv) / scales[b];
                sum_sq += (eps / sigma).powi(2);
            }
        }
        let std = (sum_sq / (rows * len) as f64).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.01, "{std}");
    }

    #[test]
    fn info_nce_closed_forms() {
        let z = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let want = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        let got = info_nce(&z, 0.1).unwrap().item();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 9.1e-5).abs() < 1e-6);
        for b in [2, 3, 8] {
            let z = Tensor::full(&[2 * b, 4], 0.5);
            let got = info_nce(&z, 0.1).unwrap().item();
            assert!((got - ((2 * b - 1) as f64).ln()).abs() < 1e-9);
        }
        let mut rng = RngState::new(5).rng();
        let z = Tensor::from_vec(&[6, 3], rng.normal_vec(18, 1.0)).unwrap().l2_normalize_rows(1e-12);
        assert!((info_nce(&z, 1e9).unwrap().item() - 5f64.ln()).abs() < 1e-6);
        assert!(matches!(info_nce(&Tensor::full(&[2, 4], 0.5), 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_combines_terms() {
        let (m, n) = (Tensor::scalar(0.5), Tensor::scalar(2.0));
        assert_eq!(total_pretrain_loss(&m, Some(&n), &LossWeights::new(1.0, 0.0).unwrap()).unwrap().item(), 0.5);
        assert_eq!(total_pretrain_loss(&m, Some(&n), &LossWeights::new(0.0, 1.0).unwrap()).unwrap().item(), 2.0);
        assert_eq!(total_pretrain_loss(&m, Some(&n), &LossWeights::default()).unwrap().item(), 2.5);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn classify_examples() {
        let mut rng = RngState::new(6).rng();
        let head = HybridHead::init(4, 2, 3, 0.4, &mut rng);
        head.w_out.update_data(|w| w.fill(0.0));
        head.bias.update_data(|b| b.copy_from_slice(&[0.1, -0.2, 0.3]));
        let h = Tensor::from_vec(&[2, 4], rng.normal_vec(8, 1.0)).unwrap();
        let f = Tensor::from_vec(&[2, 2], rng.normal_vec(4, 1.0)).unwrap();
        let logits = classify(&h, Some(&f), &head, true, &mut rng).unwrap();
        assert_eq!(logits.to_vec(), vec![0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
        let head = HybridHead::init(4, 2, 3, 0.4, &mut rng);
        let a = classify(&h, Some(&f), &head, false, &mut RngState::new(1).rng()).unwrap();
        let b = classify(&h, Some(&f), &head, false, &mut RngState::new(2).rng()).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(matches!(classify(&h, None, &head, false, &mut rng), Err(Error::Config(_))));
        let bad = Tensor::zeros(&[2, 3]);
        assert!(matches!(classify(&h, Some(&bad), &head, false, &mut rng), Err(Error::Config(_))));
        let probe = HybridHead::init(4, 0, 3, 0.4, &mut rng);
        assert_eq!(classify(&h, None, &probe, false, &mut rng).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn cross_entropy_examples() {
        for c in [2usize, 5, 10] {
            for s in [0.0, 0.1, 1.0] {
                let logits = Tensor::full(&[3, c], 0.7);
                let got = ce_label_smooth(&logits, &[0, 1, c - 1], s).unwrap().item();
                assert!((got - (c as f64).ln()).abs() < 1e-12);
            }
        }
        let sharp = Tensor::from_vec(&[2, 2], vec![200.0, -200.0, -200.0, 200.0]).unwrap();
        assert!(ce_label_smooth(&sharp, &[0, 1], 0.0).unwrap().item() < 1e-12);
        let logits = Tensor::from_vec(&[2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let lp = logits.log_softmax_row().to_vec();
        let want = (-0.5 * (lp[0] + lp[1]) - 0.5 * (lp[2] + lp[3])) / 2.0;
        assert!((ce_label_smooth(&logits, &[0, 1], 1.0).unwrap().item() - want).abs() < 1e-14);
        assert!(ce_label_smooth(&logits, &[0, 2], 0.1).is_err());
    }

    #[test]
    fn metric_examples() {
        let logits = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 2.0, 1.0, 0.5, 0.1, 3.0, 0.0]).unwrap();
        let m = metrics(&logits, &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(metrics_from_preds(&[2, 0, 1], &[2, 0, 1]).unwrap(), Metrics { accuracy: 1.0, macro_f1: 1.0 });
        assert!(metrics_from_preds(&[], &[]).is_err());
    }

    #[test]
    fn head_and_loss_gradients() {
        let mut rng = RngState::new(7).rng();
        let (b, d, k, c) = (4, 5, 3, 3);
        let h = Tensor::param(&[b, d], rng.normal_vec(b * d, 1.0)).unwrap();
        let f = Tensor::from_vec(&[b, k], rng.normal_vec(b * k, 1.0)).unwrap();
        let head = HybridHead::init(d, k, c, 0.4, &mut rng);
        let proj = ProjHead::init(d, 4, &mut rng);
        let recon = ReconHead::init(d, 2, &mut rng);
        let tokens = Tensor::param(&[2, 4, d], rng.normal_vec(2 * 4 * d, 1.0)).unwrap();
        let targets = Tensor::from_vec(&[2, 3, 2], rng.normal_vec(12, 1.0)).unwrap();
        let mask = [true, false, true, false, true, true];
        let f_loss = || {
            let logits = classify(&h, Some(&f), &head, false, &mut RngState::new(0).rng())?;
            let ce = ce_label_smooth(&logits, &[0, 2, 1, 1], 0.1)?;
            let nce = info_nce(&proj.forward(&h)?, 0.5)?;
            let rec = mtsm_loss(&tokens, &recon, &targets, &mask)?.loss;
            ce.add(&nce)?.add(&rec)
        };
        let mut params = vec![("h".to_string(), h.clone()), ("tokens".to_string(), tokens.clone())];
        head.visit("head", &mut params);
        proj.visit("proj", &mut params);
        recon.visit("recon", &mut params);
        let rep = finite_diff_check(&f_loss, &params, 1e-5, 1e-4, None).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
    }

    fn permuted(z: &[f64], rows: usize, d: usize, perm: &[usize]) -> Vec<f64> {
        let b = rows / 2;
        let mut out = vec![0.0; z.len()];
        for (new, &old) in perm.iter().enumerate() {
            for view in 0..2 {
                out[(view * b + new) * d..(view * b + new + 1) * d].copy_from_slice(&z[(view * b + old) * d..(view * b + old + 1) * d]);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn info_nce_is_nonnegative_and_permutation_invariant(seed in 0u64..10_000, b in 2usize..6, tau in 0.05f64..2.0) {
            let mut rng = RngState::new(seed).rng();
            let d = 3;
            let raw = rng.normal_vec(2 * b * d, 1.0);
            let z = Tensor::from_vec(&[2 * b, d], raw).unwrap().l2_normalize_rows(1e-12);
            let base = info_nce(&z, tau).unwrap().item();
            prop_assert!(base >= 0.0);
            let mut perm: Vec<usize> = (0..b).collect();
            rng.shuffle(&mut perm);
            let zp = Tensor::from_vec(&[2 * b, d], permuted(&z.to_vec(), 2 * b, d, &perm)).unwrap();
            prop_assert!((info_nce(&zp, tau).unwrap().item() - base).abs() < 1e-12);
        }

        #[test]
        fn cross_entropy_is_shift_invariant(seed in 0u64..10_000, shift in prop::collection::vec(-50.0f64..50.0, 4)) {
            let mut rng = RngState::new(seed).rng();
            let logits = rng.normal_vec(12, 3.0);
            let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, v)| v + shift[i / 3]).collect();
            let labels = [0, 2, 1, 2];
            let a = ce_label_smooth(&Tensor::from_vec(&[4, 3], logits).unwrap(), &labels, 0.1).unwrap().item();
            let b = ce_label_smooth(&Tensor::from_vec(&[4, 3], shifted).unwrap(), &labels, 0.1).unwrap().item();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn macro_f1_is_relabeling_invariant(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40), seed in 0u64..1000) {
            let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let mut perm: Vec<usize> = (0..4).collect();
            RngState::new(seed).rng().shuffle(&mut perm);
            let p2: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let l2: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            prop_assert!((macro_f1(&preds, &labels) - macro_f1(&p2, &l2)).abs() < 1e-15);
        }
    }
}

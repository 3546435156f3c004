//! Optimizer, learning-rate schedule, and the training phases:
//! self-supervised pretraining, head-only probing, and full fine-tuning.

use std::fmt::Write as _;

use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::heads_losses::{
    argmax_rows, augment, ce_label_smooth, info_nce, metrics_from_preds, mtsm_loss_for, total_pretrain_loss, LossWeights,
    Metrics,
};
use crate::model::{Model, TrainConfig};
use crate::numerics::{no_grad, RngState, Tensor};
use crate::preprocess::sample_train_mask;
use crate::statfeatures::{extract_raw, FeatureScaler, K};

/// Stream tags used to derive independent generators from the run seed.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const LINEAR_PROBE: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const HEAD_INIT: u64 = 5;
    pub const ORDER: u64 = 6;
    pub const STEP: u64 = 7;
    pub const DATA: u64 = 8;
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters sharing a learning rate and weight decay.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<(String, Tensor)>,
    pub lr: f64,
    pub weight_decay: f64,
}

/// AdamW with bias correction and decoupled weight decay:
/// `p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub groups: Vec<ParamGroup>,
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    t: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip: f64,
    /// Leave parameters without a gradient untouched instead of failing.
    pub skip_missing: bool,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>, clip: f64) -> Self {
        let zeros = |g: &ParamGroup| g.params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect::<Vec<_>>();
        let m = groups.iter().map(zeros).collect();
        let v = groups.iter().map(zeros).collect();
        Self { groups, m, v, t: 0, clip, skip_missing: false }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn zero_grad(&self) {
        for g in &self.groups {
            for (_, p) in &g.params {
                p.zero_grad();
            }
        }
    }

    /// One update with the given per-group learning rates. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, lrs: &[f64]) -> Result<f64> {
        if lrs.len() != self.groups.len() {
            return Err(Error::Contract(format!("{} learning rates for {} groups", lrs.len(), self.groups.len())));
        }
        let grads = self
            .groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|(name, p)| match p.grad() {
                        None if !self.skip_missing => Err(Error::Contract(format!("parameter {name} has no gradient"))),
                        g => Ok(g),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = grads.iter().flatten().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient norm at step {}", self.t + 1)));
        }
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (gi, group) in self.groups.iter().enumerate() {
            let lr = lrs[gi];
            for (pi, (_, p)) in group.params.iter().enumerate() {
                let Some(g) = &grads[gi][pi] else { continue };
                let (m, v) = (&mut self.m[gi][pi], &mut self.v[gi][pi]);
                p.update_data(|w| {
                    for i in 0..w.len() {
                        let gi = g[i] * scale;
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let (mh, vh) = (m[i] / bc1, v[i] / bc2);
                        w[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS)) + lr * group.weight_decay * w[i];
                    }
                });
            }
        }
        Ok(norm)
    }
}

/// `eta_min + (lr_max − eta_min)·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, eta_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let step = step.min(total_steps);
    if step == total_steps {
        return eta_min;
    }
    let c = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    eta_min + 0.5 * (lr_max - eta_min) * (1.0 + c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    LinearProbe,
    Finetune,
    Test,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::LinearProbe => "lp",
            Phase::Finetune => "ft",
            Phase::Test => "test",
        }
    }
}

/// One row of the metrics log. Components that do not apply are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub mtsm: Option<f64>,
    pub nce: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
}

impl LogRow {
    fn new(phase: Phase, epoch: usize) -> Self {
        Self { phase, epoch, loss: None, mtsm: None, nce: None, accuracy: None, macro_f1: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "phase,epoch,loss,mtsm,nce,accuracy,macro_f1";

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.phase.as_str(),
                r.epoch,
                cell(r.loss),
                cell(r.mtsm),
                cell(r.nce),
                cell(r.accuracy),
                cell(r.macro_f1)
            );
        }
        out
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }
}

fn check_finite(loss: &Tensor, phase: Phase, epoch: usize, step: usize) -> Result<f64> {
    let v = loss.item();
    if !v.is_finite() {
        return Err(Error::Divergence(format!("{} loss is {v} at epoch {epoch}, step {step}", phase.as_str())));
    }
    Ok(v)
}

fn set_trainable(params: &[(String, Tensor)], on: bool) {
    for (_, p) in params {
        p.set_requires_grad(on);
    }
}

/// Self-supervised pretraining with masked-patch reconstruction on the first
/// augmented view and a contrastive loss between the two views' CLS
/// projections. Constant learning rate.
pub fn pretrain(model: &mut Model, corpus: &Dataset, cfg: &TrainConfig, seed: &RngState) -> Result<MetricsLog> {
    if corpus.size() == 0 {
        return Err(Error::Contract("pretraining corpus is empty".into()));
    }
    let weights = LossWeights::new(cfg.lambda1, cfg.lambda2)?;
    let stream = seed.split(tags::PRETRAIN);
    let mut params = model.backbone_params();
    if weights.lambda1 == 0.0 {
        params.retain(|(n, _)| n != "embed.mask_token");
    } else {
        params.extend(model.recon_params());
    }
    if weights.lambda2 > 0.0 {
        params.extend(model.proj_params());
    }
    set_trainable(&params, true);
    let mut opt = AdamW::new(
        vec![ParamGroup { name: "pretrain".into(), params, lr: cfg.pretrain_lr, weight_decay: cfg.pretrain_weight_decay }],
        cfg.grad_clip,
    );
    // a trailing single-instance batch has no contrastive term, so the
    // projection head receives no gradient on that step
    opt.skip_missing = true;
    let n_patches = model.config.input_len / model.config.patch_len;
    let mut log = MetricsLog::default();
    for epoch in 0..cfg.pretrain_epochs {
        let batches = make_batches(corpus.size(), cfg.pretrain_batch, &stream.split(tags::ORDER), epoch as u64, true);
        let (mut sum_rec, mut sum_nce, mut sum_tot, mut n_nce) = (0.0, 0.0, 0.0, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let mut rng = stream.split(tags::STEP).split(epoch as u64).split(bi as u64).rng();
            let batch = corpus.batch(idx)?;
            let view1 = augment(&batch, &mut rng)?;
            let view2 = augment(&batch, &mut rng)?;
            let pad = crate::preprocess::padding_mask(view1.valid_lengths(), n_patches, model.config.patch_len);
            let mask = if weights.lambda1 > 0.0 {
                Some(sample_train_mask(&pad, n_patches, cfg.mask_ratio, &mut rng)?)
            } else {
                None
            };
            let p1 = model.tokenize(&view1, mask)?;
            let out1 = model.encode(&p1, true, &mut rng)?;
            let rec = if weights.lambda1 > 0.0 { mtsm_loss_for(&out1.h, &model.recon, &p1)?.loss } else { Tensor::scalar(0.0) };
            let nce = if weights.lambda2 > 0.0 && idx.len() >= 2 {
                let out2 = model.encode(&model.tokenize(&view2, None)?, true, &mut rng)?;
                let z = Tensor::concat(&[model.proj.forward(&out1.h_cls)?, model.proj.forward(&out2.h_cls)?], 0)?;
                Some(info_nce(&z, cfg.tau)?)
            } else {
                None
            };
            let total = total_pretrain_loss(&rec, nce.as_ref(), &weights)?;
            let tv = check_finite(&total, Phase::Pretrain, epoch, bi)?;
            opt.zero_grad();
            total.backward()?;
            opt.step(&[cfg.pretrain_lr])?;
            sum_rec += rec.item();
            sum_tot += tv;
            if let Some(n) = &nce {
                sum_nce += n.item();
                n_nce += 1;
            }
        }
        let nb = batches.len() as f64;
        let mut row = LogRow::new(Phase::Pretrain, epoch + 1);
        row.loss = Some(sum_tot / nb);
        row.mtsm = (weights.lambda1 > 0.0).then_some(sum_rec / nb);
        row.nce = (n_nce > 0).then(|| sum_nce / n_nce as f64);
        log::info!("pretrain epoch {}: loss {:.5}", epoch + 1, sum_tot / nb);
        log.rows.push(row);
    }
    opt.zero_grad();
    Ok(log)
}

/// Raw statistical features of every instance.
pub fn dataset_features(ds: &Dataset) -> Result<Vec<[f64; K]>> {
    Ok(extract_raw(&ds.all()?))
}

fn gather<T: Clone>(rows: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

/// CLS representations of a whole dataset in evaluation mode, `[n, D]`.
pub fn encode_dataset(model: &Model, ds: &Dataset, batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = RngState::new(0).rng();
    let mut out = Vec::with_capacity(ds.size());
    no_grad(|| -> Result<()> {
        for idx in make_batches(ds.size(), batch, &RngState::new(0), 0, false) {
            let h = model.embed_cls(&ds.batch(&idx)?, false, &mut rng)?;
            out.extend(h.data().chunks_exact(model.config.d_model).map(<[f64]>::to_vec));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Head-only training on a frozen encoder. The encoder runs in evaluation
/// mode, so its CLS outputs are computed once and reused every epoch.
pub fn lp_phase(model: &mut Model, train: &Dataset, features: &[[f64; K]], cfg: &TrainConfig, seed: &RngState) -> Result<MetricsLog> {
    let stream = seed.split(tags::LINEAR_PROBE);
    let backbone = model.backbone_params();
    set_trainable(&backbone, false);
    let result = (|| {
        let cache = encode_dataset(model, train, cfg.lp_batch.max(32))?;
        let d = model.config.d_model;
        let params = model.head_params();
        let mut opt = AdamW::new(
            vec![ParamGroup { name: "head".into(), params, lr: cfg.lp_lr, weight_decay: cfg.lp_weight_decay }],
            cfg.grad_clip,
        );
        let mut log = MetricsLog::default();
        for epoch in 0..cfg.lp_epochs {
            let batches = make_batches(train.size(), cfg.lp_batch, &stream.split(tags::ORDER), epoch as u64, true);
            let (mut sum_loss, mut preds, mut labels) = (0.0, Vec::new(), Vec::new());
            for (bi, idx) in batches.iter().enumerate() {
                let mut rng = stream.split(tags::STEP).split(epoch as u64).split(bi as u64).rng();
                let h = Tensor::from_vec(&[idx.len(), d], gather(&cache, idx).concat())?;
                let y = gather(&train.labels, idx);
                let logits = model.logits_from(&h, &gather(features, idx), true, &mut rng)?;
                let loss = ce_label_smooth(&logits, &y, cfg.label_smoothing)?;
                sum_loss += check_finite(&loss, Phase::LinearProbe, epoch, bi)?;
                opt.zero_grad();
                loss.backward()?;
                opt.step(&[cfg.lp_lr])?;
                preds.extend(argmax_rows(&logits));
                labels.extend(y);
            }
            log.rows.push(train_row(Phase::LinearProbe, epoch, sum_loss / batches.len() as f64, &preds, &labels)?);
        }
        opt.zero_grad();
        Ok(log)
    })();
    set_trainable(&backbone, true);
    result
}

fn train_row(phase: Phase, epoch: usize, loss: f64, preds: &[usize], labels: &[usize]) -> Result<LogRow> {
    let m = metrics_from_preds(preds, labels)?;
    let mut row = LogRow::new(phase, epoch + 1);
    row.loss = Some(loss);
    row.accuracy = Some(m.accuracy);
    row.macro_f1 = Some(m.macro_f1);
    log::info!("{} epoch {}: loss {loss:.5}, train accuracy {:.4}", phase.as_str(), epoch + 1, m.accuracy);
    Ok(row)
}

/// All parameters trained with two learning-rate groups, each following a
/// per-step cosine decay to `ft_eta_min`.
pub fn ft_phase(model: &mut Model, train: &Dataset, features: &[[f64; K]], cfg: &TrainConfig, seed: &RngState) -> Result<MetricsLog> {
    let stream = seed.split(tags::FINETUNE);
    let backbone = model.unmasked_backbone_params();
    set_trainable(&backbone, true);
    let groups = vec![
        ParamGroup { name: "backbone".into(), params: backbone, lr: cfg.ft_lr_backbone, weight_decay: cfg.ft_weight_decay },
        ParamGroup { name: "head".into(), params: model.head_params(), lr: cfg.ft_lr_head, weight_decay: cfg.ft_weight_decay },
    ];
    let mut opt = AdamW::new(groups, cfg.grad_clip);
    let per_epoch = train.size().div_ceil(cfg.ft_batch);
    let total = cfg.ft_epochs * per_epoch;
    let mut step = 0;
    let mut log = MetricsLog::default();
    for epoch in 0..cfg.ft_epochs {
        let batches = make_batches(train.size(), cfg.ft_batch, &stream.split(tags::ORDER), epoch as u64, true);
        let (mut sum_loss, mut preds, mut labels) = (0.0, Vec::new(), Vec::new());
        for (bi, idx) in batches.iter().enumerate() {
            let mut rng = stream.split(tags::STEP).split(epoch as u64).split(bi as u64).rng();
            let batch = train.batch(idx)?;
            let y = gather(&train.labels, idx);
            let logits = model.logits(&batch, &gather(features, idx), true, &mut rng)?;
            let loss = ce_label_smooth(&logits, &y, cfg.label_smoothing)?;
            sum_loss += check_finite(&loss, Phase::Finetune, epoch, bi)?;
            opt.zero_grad();
            loss.backward()?;
            let lrs = [
                cosine_lr(step, total, cfg.ft_lr_backbone, cfg.ft_eta_min),
                cosine_lr(step, total, cfg.ft_lr_head, cfg.ft_eta_min),
            ];
            opt.step(&lrs)?;
            step += 1;
            preds.extend(argmax_rows(&logits));
            labels.extend(y);
        }
        log.rows.push(train_row(Phase::Finetune, epoch, sum_loss / batches.len() as f64, &preds, &labels)?);
    }
    opt.zero_grad();
    Ok(log)
}

/// Fits the feature scaler on the training split, installs a fresh
/// classifier, then runs probing followed by full fine-tuning.
pub fn finetune(model: &mut Model, train: &Dataset, cfg: &TrainConfig, seed: &RngState) -> Result<MetricsLog> {
    let raw = dataset_features(train)?;
    model.scaler = FeatureScaler::fit(&raw)?;
    model.reset_head(train.num_classes, &mut seed.split(tags::HEAD_INIT).rng());
    let mut log = lp_phase(model, train, &raw, cfg, seed)?;
    log.extend(ft_phase(model, train, &raw, cfg, seed)?);
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub per_class: Vec<ClassReport>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("accuracy = {}\nmacro_f1 = {}\nclass,precision,recall,f1,support\n", self.metrics.accuracy, self.metrics.macro_f1);
        for c in &self.per_class {
            let _ = writeln!(s, "{},{},{},{},{}", c.class, c.precision, c.recall, c.f1, c.support);
        }
        s
    }
}

/// Evaluation-mode predictions and metrics on a labelled dataset.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalReport> {
    let raw = dataset_features(ds)?;
    let mut rng = RngState::new(0).rng();
    let mut predictions = Vec::with_capacity(ds.size());
    no_grad(|| -> Result<()> {
        for idx in make_batches(ds.size(), 32, &RngState::new(0), 0, false) {
            let logits = model.logits(&ds.batch(&idx)?, &gather(&raw, &idx), false, &mut rng)?;
            predictions.extend(argmax_rows(&logits));
        }
        Ok(())
    })?;
    let metrics = metrics_from_preds(&predictions, &ds.labels)?;
    let per_class = (0..ds.num_classes)
        .map(|c| {
            let tp = predictions.iter().zip(&ds.labels).filter(|(p, y)| **p == c && **y == c).count() as f64;
            let pred_c = predictions.iter().filter(|p| **p == c).count() as f64;
            let support = ds.labels.iter().filter(|y| **y == c).count();
            let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if tp > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassReport { class: c, precision, recall, f1, support }
        })
        .collect();
    Ok(EvalReport { metrics, per_class, predictions })
}

/// Test-split metrics as a log row.
pub fn test_row(report: &EvalReport) -> LogRow {
    let mut row = LogRow::new(Phase::Test, 0);
    row.accuracy = Some(report.metrics.accuracy);
    row.macro_f1 = Some(report.metrics.macro_f1);
    row
}

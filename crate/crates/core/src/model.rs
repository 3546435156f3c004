//! Hyperparameters, the assembled model, and its checkpoint mapping.

use std::fmt::Write as _;

use crate::error::{config_err, Error, Result};
use crate::heads_losses::{classify, HybridHead, ProjHead, ReconHead};
use crate::hope::checkpoint::{Checkpoint, Record};
use crate::hope::{check_decays, default_decays, encode, EncoderOutput, HopeBlockParams};
use crate::numerics::{Rng, Tensor};
use crate::preprocess::{tokenize, PatchEmbedding, PatchedBatch, RevinAffine, SeriesBatch};
use crate::statfeatures::{FeatureScaler, K};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_len: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub depth: usize,
    pub cms_levels: usize,
    pub chunk_size: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub head_dropout: f64,
    pub proj_dim: usize,
    /// Statistical features fed to the classifier (0 or 8).
    pub n_features: usize,
    pub revin_eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_weight_decay: f64,
    pub pretrain_batch: usize,
    pub lp_epochs: usize,
    pub lp_lr: f64,
    pub lp_weight_decay: f64,
    pub lp_batch: usize,
    pub ft_epochs: usize,
    pub ft_lr_backbone: f64,
    pub ft_lr_head: f64,
    pub ft_eta_min: f64,
    pub ft_weight_decay: f64,
    pub ft_batch: usize,
    pub label_smoothing: f64,
    pub mask_ratio: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Full-size settings: 256 steps, patches of 8, width 128, five blocks.
    pub fn full() -> Self {
        Self {
            model: ModelConfig {
                input_len: 256,
                patch_len: 8,
                d_model: 128,
                depth: 5,
                cms_levels: 4,
                chunk_size: 8,
                ffn_mult: 4,
                dropout: 0.1,
                head_dropout: 0.4,
                proj_dim: 64,
                n_features: K,
                revin_eps: 1e-5,
            },
            train: TrainConfig {
                pretrain_epochs: 50,
                pretrain_lr: 1e-4,
                pretrain_weight_decay: 1e-4,
                pretrain_batch: 128,
                lp_epochs: 15,
                lp_lr: 1e-3,
                lp_weight_decay: 1e-3,
                lp_batch: 16,
                ft_epochs: 30,
                ft_lr_backbone: 1e-5,
                ft_lr_head: 1e-4,
                ft_eta_min: 1e-6,
                ft_weight_decay: 1e-4,
                ft_batch: 16,
                label_smoothing: 0.1,
                mask_ratio: 0.4,
                tau: 0.1,
                lambda1: 1.0,
                lambda2: 1.0,
                grad_clip: 1.0,
            },
        }
    }

    /// Single-core laptop settings: narrower and shallower encoder, smaller
    /// pretraining batches and a shorter pretraining schedule. Optimizer
    /// settings of the fine-tuning phases are unchanged.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.model.d_model = 64;
        c.model.depth = 3;
        c.model.proj_dim = 32;
        c.train.pretrain_epochs = 5;
        c.train.pretrain_batch = 32;
        c.train.pretrain_lr = 1e-3;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(config_err!("unknown preset {other:?} (expected full or desk)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let positive = [
            ("input_len", m.input_len),
            ("patch_len", m.patch_len),
            ("d_model", m.d_model),
            ("cms_levels", m.cms_levels),
            ("chunk_size", m.chunk_size),
            ("ffn_mult", m.ffn_mult),
            ("proj_dim", m.proj_dim),
            ("pretrain_batch", t.pretrain_batch),
            ("lp_batch", t.lp_batch),
            ("ft_batch", t.ft_batch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("{k} must be positive"));
        }
        if m.input_len < m.patch_len {
            return Err(config_err!("input_len {} shorter than patch_len {}", m.input_len, m.patch_len));
        }
        if m.n_features != 0 && m.n_features != K {
            return Err(config_err!("n_features must be 0 or {K}, got {}", m.n_features));
        }
        for (k, p) in [("dropout", m.dropout), ("head_dropout", m.head_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(config_err!("{k} must lie in [0, 1), got {p}"));
            }
        }
        if m.revin_eps <= 0.0 {
            return Err(config_err!("revin_eps must be positive"));
        }
        let rates = [
            ("pretrain_lr", t.pretrain_lr),
            ("lp_lr", t.lp_lr),
            ("ft_lr_backbone", t.ft_lr_backbone),
            ("ft_lr_head", t.ft_lr_head),
            ("ft_eta_min", t.ft_eta_min),
            ("tau", t.tau),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(config_err!("{k} must be positive, got {v}"));
        }
        if t.ft_eta_min > t.ft_lr_backbone.min(t.ft_lr_head) {
            return Err(config_err!("ft_eta_min {} exceeds a fine-tuning learning rate", t.ft_eta_min));
        }
        let decays = [
            ("pretrain_weight_decay", t.pretrain_weight_decay),
            ("lp_weight_decay", t.lp_weight_decay),
            ("ft_weight_decay", t.ft_weight_decay),
            ("grad_clip", t.grad_clip),
        ];
        if let Some((k, v)) = decays.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(config_err!("{k} must be non-negative, got {v}"));
        }
        if !(0.0..=1.0).contains(&t.label_smoothing) || !(0.0..=1.0).contains(&t.mask_ratio) {
            return Err(config_err!("label_smoothing and mask_ratio must lie in [0, 1]"));
        }
        crate::heads_losses::LossWeights::new(t.lambda1, t.lambda2)?;
        check_decays(&default_decays(m.cms_levels))
    }

    /// `key = value` lines for every field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("input_len", m.input_len.to_string());
        put("patch_len", m.patch_len.to_string());
        put("d_model", m.d_model.to_string());
        put("depth", m.depth.to_string());
        put("cms_levels", m.cms_levels.to_string());
        put("chunk_size", m.chunk_size.to_string());
        put("ffn_mult", m.ffn_mult.to_string());
        put("dropout", m.dropout.to_string());
        put("head_dropout", m.head_dropout.to_string());
        put("proj_dim", m.proj_dim.to_string());
        put("n_features", m.n_features.to_string());
        put("revin_eps", m.revin_eps.to_string());
        put("pretrain_epochs", t.pretrain_epochs.to_string());
        put("pretrain_lr", t.pretrain_lr.to_string());
        put("pretrain_weight_decay", t.pretrain_weight_decay.to_string());
        put("pretrain_batch", t.pretrain_batch.to_string());
        put("lp_epochs", t.lp_epochs.to_string());
        put("lp_lr", t.lp_lr.to_string());
        put("lp_weight_decay", t.lp_weight_decay.to_string());
        put("lp_batch", t.lp_batch.to_string());
        put("ft_epochs", t.ft_epochs.to_string());
        put("ft_lr_backbone", t.ft_lr_backbone.to_string());
        put("ft_lr_head", t.ft_lr_head.to_string());
        put("ft_eta_min", t.ft_eta_min.to_string());
        put("ft_weight_decay", t.ft_weight_decay.to_string());
        put("ft_batch", t.ft_batch.to_string());
        put("label_smoothing", t.label_smoothing.to_string());
        put("mask_ratio", t.mask_ratio.to_string());
        put("tau", t.tau.to_string());
        put("lambda1", t.lambda1.to_string());
        put("lambda2", t.lambda2.to_string());
        put("grad_clip", t.grad_clip.to_string());
        s
    }

    /// Sets one field by name. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(key: &str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| config_err!("{key}: {v:?} is not a non-negative integer"))
        }
        fn float(key: &str, v: &str) -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| config_err!("{key}: {v:?} is not a finite number"))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "input_len" => m.input_len = int(key, value)?,
            "patch_len" => m.patch_len = int(key, value)?,
            "d_model" => m.d_model = int(key, value)?,
            "depth" => m.depth = int(key, value)?,
            "cms_levels" => m.cms_levels = int(key, value)?,
            "chunk_size" => m.chunk_size = int(key, value)?,
            "ffn_mult" => m.ffn_mult = int(key, value)?,
            "dropout" => m.dropout = float(key, value)?,
            "head_dropout" => m.head_dropout = float(key, value)?,
            "proj_dim" => m.proj_dim = int(key, value)?,
            "n_features" => m.n_features = int(key, value)?,
            "revin_eps" => m.revin_eps = float(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = int(key, value)?,
            "pretrain_lr" => t.pretrain_lr = float(key, value)?,
            "pretrain_weight_decay" => t.pretrain_weight_decay = float(key, value)?,
            "pretrain_batch" => t.pretrain_batch = int(key, value)?,
            "lp_epochs" => t.lp_epochs = int(key, value)?,
            "lp_lr" => t.lp_lr = float(key, value)?,
            "lp_weight_decay" => t.lp_weight_decay = float(key, value)?,
            "lp_batch" => t.lp_batch = int(key, value)?,
            "ft_epochs" => t.ft_epochs = int(key, value)?,
            "ft_lr_backbone" => t.ft_lr_backbone = float(key, value)?,
            "ft_lr_head" => t.ft_lr_head = float(key, value)?,
            "ft_eta_min" => t.ft_eta_min = float(key, value)?,
            "ft_weight_decay" => t.ft_weight_decay = float(key, value)?,
            "ft_batch" => t.ft_batch = int(key, value)?,
            "label_smoothing" => t.label_smoothing = float(key, value)?,
            "mask_ratio" => t.mask_ratio = float(key, value)?,
            "tau" => t.tau = float(key, value)?,
            "lambda1" => t.lambda1 = float(key, value)?,
            "lambda2" => t.lambda2 = float(key, value)?,
            "grad_clip" => t.grad_clip = float(key, value)?,
            other => return Err(config_err!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over a base configuration. Blank lines and
    /// `#` comments are skipped; a `preset` key (first, if present) selects
    /// the base.
    pub fn parse(text: &str, base: RunConfig) -> Result<Self> {
        let mut cfg = base;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `key = value`", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(config_err!("line {}: duplicate key {k:?}", i + 1));
            }
            if k == "preset" {
                if seen.len() != 1 {
                    return Err(config_err!("line {}: preset must come before other keys", i + 1));
                }
                cfg = Self::preset(v)?;
                continue;
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => config_err!("line {}: {m}", i + 1),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Encoder with its heads. The classifier exists once the number of classes
/// is known.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub revin: RevinAffine,
    pub embed: PatchEmbedding,
    pub blocks: Vec<HopeBlockParams>,
    pub recon: ReconHead,
    pub proj: ProjHead,
    pub head: Option<HybridHead>,
    pub scaler: FeatureScaler,
}

impl Model {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let n = config.input_len / config.patch_len;
        let d = config.d_model;
        let decays = default_decays(config.cms_levels);
        let blocks = (0..config.depth)
            .map(|_| HopeBlockParams::init(d, config.ffn_mult, &decays, config.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            revin: RevinAffine::new(),
            embed: PatchEmbedding::init(config.patch_len, n, d, rng),
            blocks,
            recon: ReconHead::init(d, config.patch_len, rng),
            proj: ProjHead::init(d, config.proj_dim, rng),
            head: None,
            scaler: FeatureScaler::identity(),
        })
    }

    /// Replaces the classifier with a fresh one for `num_classes`.
    pub fn reset_head(&mut self, num_classes: usize, rng: &mut Rng) {
        let c = &self.config;
        self.head = Some(HybridHead::init(c.d_model, c.n_features, num_classes, c.head_dropout, rng));
    }

    pub fn head(&self) -> Result<&HybridHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no classifier; fine-tune it first".into()))
    }

    /// Instance norm affine, embeddings, and every encoder block.
    pub fn backbone_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("revin.gamma".to_string(), self.revin.gamma.clone()),
            ("revin.beta".to_string(), self.revin.beta.clone()),
            ("embed.w".to_string(), self.embed.w.clone()),
            ("embed.pos".to_string(), self.embed.pos.clone()),
            ("embed.cls".to_string(), self.embed.cls.clone()),
            ("embed.mask_token".to_string(), self.embed.mask_token.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), &mut out);
        }
        out
    }

    /// Backbone parameters that receive gradients when no patch is masked.
    pub fn unmasked_backbone_params(&self) -> Vec<(String, Tensor)> {
        self.backbone_params().into_iter().filter(|(n, _)| n != "embed.mask_token").collect()
    }

    pub fn recon_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.recon.visit("recon", &mut out);
        out
    }

    pub fn proj_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.proj.visit("proj", &mut out);
        out
    }

    pub fn head_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(h) = &self.head {
            h.visit("head", &mut out);
        }
        out
    }

    pub fn all_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.backbone_params();
        out.extend(self.recon_params());
        out.extend(self.proj_params());
        out.extend(self.head_params());
        out
    }

    /// Little-endian bytes of every backbone parameter, in a fixed order.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        params_bytes(&self.backbone_params())
    }

    pub fn head_bytes(&self) -> Vec<u8> {
        params_bytes(&self.head_params())
    }

    pub fn tokenize(&self, batch: &SeriesBatch, train_mask: Option<Vec<bool>>) -> Result<PatchedBatch> {
        let c = &self.config;
        if batch.len() != c.input_len {
            return Err(Error::Shape(format!("batch length {} does not match input_len {}", batch.len(), c.input_len)));
        }
        tokenize(batch, &self.revin, &self.embed, c.patch_len, c.revin_eps, train_mask)
    }

    pub fn encode(&self, patched: &PatchedBatch, train: bool, rng: &mut Rng) -> Result<EncoderOutput> {
        encode(patched, &self.blocks, self.config.chunk_size, self.config.depth, train, rng)
    }

    /// CLS representations `[B, D]` of a batch.
    pub fn embed_cls(&self, batch: &SeriesBatch, train: bool, rng: &mut Rng) -> Result<Tensor> {
        Ok(self.encode(&self.tokenize(batch, None)?, train, rng)?.h_cls)
    }

    /// Logits from CLS representations and raw (unscaled) features.
    pub fn logits_from(&self, h_cls: &Tensor, raw_features: &[[f64; K]], train: bool, rng: &mut Rng) -> Result<Tensor> {
        let head = self.head()?;
        let feats = if head.k == 0 {
            None
        } else {
            let rows = self.scaler.transform(raw_features);
            Some(Tensor::from_vec(&[rows.len(), K], rows.concat())?)
        };
        classify(h_cls, feats.as_ref(), head, train, rng)
    }

    pub fn logits(&self, batch: &SeriesBatch, raw_features: &[[f64; K]], train: bool, rng: &mut Rng) -> Result<Tensor> {
        let h = self.embed_cls(batch, train, rng)?;
        self.logits_from(&h, raw_features, train, rng)
    }

    pub fn to_checkpoint(&self, extra_meta: &str) -> Checkpoint {
        let mut meta = ModelConfigKv(&self.config).to_string();
        if let Some(h) = &self.head {
            let _ = writeln!(meta, "num_classes = {}", h.num_classes());
        }
        meta.push_str(extra_meta);
        let mut records: Vec<Record> = self.all_params().iter().map(|(n, t)| Record::from_tensor(n, t)).collect();
        records.push(Record { name: "scaler.mean".into(), shape: vec![K], data: self.scaler.mean.to_vec() });
        records.push(Record { name: "scaler.std".into(), shape: vec![K], data: self.scaler.std.to_vec() });
        Checkpoint { meta, records }
    }

    /// Rebuilds a model from a checkpoint. The architecture comes from the
    /// checkpoint metadata; a classifier is restored when present.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = parse_meta(&ck.meta);
        let mut cfg = RunConfig::full();
        for key in MODEL_KEYS {
            let v = meta
                .iter()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {key}")))?;
            cfg.set(key, &v.1).map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut model = Self::init(&cfg.model, &mut crate::numerics::RngState::new(0).rng())?;
        if let Some((_, c)) = meta.iter().find(|(k, _)| k == "num_classes") {
            let c: usize = c.parse().map_err(|_| Error::Format(format!("bad num_classes {c:?}")))?;
            model.reset_head(c, &mut crate::numerics::RngState::new(0).rng());
        }
        for (name, t) in model.all_params() {
            let r = ck.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if r.shape != t.shape() {
                return Err(Error::Format(format!("{name}: checkpoint shape {:?}, model {:?}", r.shape, t.shape())));
            }
            t.update_data(|d| d.copy_from_slice(&r.data));
        }
        if let (Some(m), Some(s)) = (ck.get("scaler.mean"), ck.get("scaler.std")) {
            if m.data.len() != K || s.data.len() != K {
                return Err(Error::Format("feature scaler records must hold 8 values".into()));
            }
            model.scaler = FeatureScaler {
                mean: m.data.clone().try_into().unwrap(),
                std: s.data.clone().try_into().unwrap(),
            };
        }
        Ok(model)
    }

    /// Copies the encoder (and pretraining heads) of `other` into `self`.
    pub fn load_backbone(&mut self, other: &Model) -> Result<()> {
        if self.config != other.config {
            return Err(config_err!("checkpoint architecture differs from the configured model"));
        }
        let mut src = other.backbone_params();
        src.extend(other.recon_params());
        src.extend(other.proj_params());
        let mut dst = self.backbone_params();
        dst.extend(self.recon_params());
        dst.extend(self.proj_params());
        for ((_, d), (_, s)) in dst.iter().zip(&src) {
            let v = s.to_vec();
            d.update_data(|x| x.copy_from_slice(&v));
        }
        Ok(())
    }
}

pub const MODEL_KEYS: [&str; 12] = [
    "input_len",
    "patch_len",
    "d_model",
    "depth",
    "cms_levels",
    "chunk_size",
    "ffn_mult",
    "dropout",
    "head_dropout",
    "proj_dim",
    "n_features",
    "revin_eps",
];

struct ModelConfigKv<'a>(&'a ModelConfig);

impl std::fmt::Display for ModelConfigKv<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let full = RunConfig { model: self.0.clone(), train: RunConfig::full().train }.to_kv();
        for line in full.lines().take(MODEL_KEYS.len()) {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// `key = value` pairs of checkpoint metadata, in order.
pub fn parse_meta(meta: &str) -> Vec<(String, String)> {
    meta.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn params_bytes(params: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in params {
        out.extend_from_slice(name.as_bytes());
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk();
        c.model.input_len = 32;
        c.model.d_model = 8;
        c.model.depth = 1;
        c.model.proj_dim = 4;
        c
    }

    #[test]
    fn presets_validate_and_round_trip_through_text() {
        for c in [RunConfig::full(), RunConfig::desk()] {
            c.validate().unwrap();
            assert_eq!(RunConfig::parse(&c.to_kv(), RunConfig::full()).unwrap(), c);
        }
        let p = RunConfig::full();
        assert_eq!((p.model.d_model, p.model.depth, p.model.patch_len, p.model.cms_levels), (128, 5, 8, 4));
        assert_eq!((p.train.ft_lr_backbone, p.train.ft_lr_head, p.train.ft_eta_min), (1e-5, 1e-4, 1e-6));
    }

    #[test]
    fn config_text_errors() {
        let base = RunConfig::desk;
        assert!(matches!(RunConfig::parse("bogus = 1", base()), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("d_model = -3", base()), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("d_model", base()), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("tau = 0", base()), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("depth = 1\ndepth = 2", base()), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("depth = 1\npreset = full", base()), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("ft_eta_min = 1", base()), Err(Error::Config(_))));
        let c = RunConfig::parse("preset = full # full size\n\ndepth = 3\n", base()).unwrap();
        assert_eq!((c.model.d_model, c.model.depth), (128, 3));
    }

    #[test]
    fn checkpoint_round_trip_restores_every_parameter() {
        let cfg = tiny();
        let mut rng = RngState::new(3).rng();
        let mut m = Model::init(&cfg.model, &mut rng).unwrap();
        m.reset_head(3, &mut rng);
        m.scaler.mean[2] = 0.25;
        let bytes = m.to_checkpoint("labels = 1:0,2:1,5:2\n").to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::read_from(&mut bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(params_bytes(&back.all_params()), params_bytes(&m.all_params()));
        assert_eq!(back.scaler, m.scaler);
        assert_eq!(back.to_checkpoint("labels = 1:0,2:1,5:2\n").to_bytes(), bytes);
    }

    #[test]
    fn backbone_groups_are_disjoint_from_heads() {
        let cfg = tiny();
        let mut rng = RngState::new(4).rng();
        let mut m = Model::init(&cfg.model, &mut rng).unwrap();
        m.reset_head(2, &mut rng);
        let all = m.all_params();
        let mut names: Vec<&String> = all.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
        assert_eq!(m.unmasked_backbone_params().len() + 1, m.backbone_params().len());
        let batch = SeriesBatch::from_lengths(2, 32, rng.normal_vec(64, 1.0), vec![32, 20], None).unwrap();
        let logits = m.logits(&batch, &[[0.0; K]; 2], false, &mut rng).unwrap();
        assert_eq!(logits.shape(), &[2, 2]);
    }
}

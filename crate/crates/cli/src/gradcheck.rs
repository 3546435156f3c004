//! Layer-by-layer comparison of reverse-mode gradients against central
//! differences at small shapes.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use memts::heads_losses::{ce_label_smooth, classify, info_nce, mtsm_loss};
use memts::hope::{hope_block, ScanLayout};
use memts::model::{Model, RunConfig};
use memts::numerics::{finite_diff_check, GradCheckEntry, Rng, RngState, Tensor};
use memts::preprocess::{padding_mask, sample_train_mask, SeriesBatch};
use memts::statfeatures::K;
use memts::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
pub const BATCH: usize = 2;
/// Patch tokens per series; with the summary slot the scans see 8 tokens.
pub const PATCHES: usize = 7;
pub const WIDTH: usize = 16;
/// Chunk size used here so the memory scans cross chunk boundaries.
pub const CHUNK: usize = 3;

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: String,
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tol: f64,
    pub layers: Vec<LayerCheck>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().flat_map(|l| &l.entries).all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.layers.iter().flat_map(|l| &l.entries).map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("layer,parameter,checked,max_rel_err,status\n");
        for l in &self.layers {
            for e in &l.entries {
                let status = if e.passed { "pass" } else { "FAIL" };
                let _ = writeln!(s, "{},{},{},{:e},{status}", l.layer, e.name, e.checked, e.max_rel_err);
            }
        }
        let _ = writeln!(
            s,
            "# tolerance {:e}, worst {:e}, {} in {:.1}s",
            self.tol,
            self.worst(),
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64()
        );
        s
    }
}

/// The configured architecture shrunk to the check shapes: width 16,
/// one block, 2 series of 7 patches.
pub fn check_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.model.input_len = PATCHES * c.model.patch_len;
    c.model.d_model = WIDTH;
    c.model.depth = 1;
    c.model.chunk_size = CHUNK;
    c.model.proj_dim = c.model.proj_dim.min(8);
    c
}

fn param(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::param(shape, rng.normal_vec(n, 1.0))
}

/// Weights with magnitude in [0.5, 1.5] and random sign, so every output
/// element matters to the probe.
fn probe(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let r = (0..n).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 } * rng.uniform_range(0.5, 1.5)).collect();
    Tensor::from_vec(shape, r)
}

fn weighted_sum(y: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok(y.mul(r)?.sum_all())
}

pub fn run_gradcheck(cfg: &RunConfig, tol: f64, max_per_param: Option<usize>, seed: u64) -> Result<GradcheckReport> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let start = Instant::now();
    let c = check_config(cfg);
    c.validate()?;
    let root = RngState::new(seed);
    let mut rng = root.split(1).rng();
    let mut model = Model::init(&c.model, &mut rng)?;
    model.reset_head(3, &mut rng);
    let m = &c.model;
    let n_tok = PATCHES + 1;
    let check = |layer: &str, f: &dyn Fn() -> Result<Tensor>, params: Vec<(String, Tensor)>| -> Result<LayerCheck> {
        let rep = finite_diff_check(f, &params, STEP, tol, max_per_param)?;
        Ok(LayerCheck { layer: layer.to_string(), entries: rep.entries })
    };
    let mut layers = Vec::new();

    // the second series is padded by one and a half patches
    let valid = vec![m.input_len, m.input_len - m.patch_len - m.patch_len / 2];
    let values: Vec<f64> = (0..BATCH * m.input_len).map(|i| (i as f64 * 0.37).sin() * 2.0 + rng.normal() * 0.3 + 1.0).collect();
    let batch = SeriesBatch::from_lengths(BATCH, m.input_len, values, valid.clone(), None)?;
    let pad = padding_mask(&valid, PATCHES, m.patch_len);
    let mask = sample_train_mask(&pad, PATCHES, c.train.mask_ratio, &mut rng)?;
    let patched = model.tokenize(&batch, Some(mask.clone()))?;
    let r = probe(patched.tokens.shape(), &mut rng)?;
    let f = || weighted_sum(&model.tokenize(&batch, Some(mask.clone()))?.tokens, &r);
    let mut p = model.backbone_params();
    p.retain(|(n, _)| n.starts_with("revin.") || n.starts_with("embed."));
    // the affine scale only enters through the tokens when it moves the series
    model.revin.gamma.update_data(|g| g[0] = 1.3);
    model.revin.beta.update_data(|b| b[0] = -0.2);
    layers.push(check("revin+embedding", &f, p)?);

    let layout = ScanLayout::new(BATCH, n_tok, m.chunk_size, true, Some(patched.token_valid()))?;
    for (i, block) in model.blocks.iter().enumerate() {
        let x = param(&[BATCH, n_tok, m.d_model], &mut rng)?;
        let r = probe(&[BATCH, n_tok, m.d_model], &mut rng)?;
        let f = || {
            let mut drop_rng = RngState::new(0).rng();
            weighted_sum(&hope_block(&x, block, &layout, None, false, &mut drop_rng)?.0, &r)
        };
        let mut p = block.parameters();
        for (n, _) in &mut p {
            *n = format!("block{i}.{}", n.trim_start_matches("block."));
        }
        p.push((format!("block{i}.input"), x.clone()));
        layers.push(check(&format!("block{i}"), &f, p)?);
    }

    let h = param(&[BATCH, n_tok, m.d_model], &mut rng)?;
    let targets = Tensor::from_vec(&[BATCH, PATCHES, m.patch_len], rng.normal_vec(BATCH * PATCHES * m.patch_len, 1.0))?;
    let f = || Ok(mtsm_loss(&h, &model.recon, &targets, &mask)?.loss);
    let mut p = model.recon_params();
    p.push(("recon.input".into(), h.clone()));
    layers.push(check("reconstruction head", &f, p)?);

    let (ha, hb) = (param(&[BATCH, m.d_model], &mut rng)?, param(&[BATCH, m.d_model], &mut rng)?);
    let tau = c.train.tau;
    let f = || info_nce(&Tensor::concat(&[model.proj.forward(&ha)?, model.proj.forward(&hb)?], 0)?, tau);
    let mut p = model.proj_params();
    p.push(("proj.input_a".into(), ha.clone()));
    p.push(("proj.input_b".into(), hb.clone()));
    layers.push(check("projection head + contrastive loss", &f, p)?);

    let head = model.head()?;
    let h_cls = param(&[BATCH + 2, m.d_model], &mut rng)?;
    let feats = Tensor::from_vec(&[BATCH + 2, K], rng.normal_vec((BATCH + 2) * K, 1.0))?;
    let labels = vec![0, 2, 1, 2];
    let smoothing = c.train.label_smoothing;
    let f = || {
        let mut drop_rng = RngState::new(0).rng();
        let logits = classify(&h_cls, (head.k > 0).then_some(&feats), head, false, &mut drop_rng)?;
        ce_label_smooth(&logits, &labels, smoothing)
    };
    let mut p = model.head_params();
    p.push(("head.input".into(), h_cls.clone()));
    layers.push(check("classifier + smoothed cross-entropy", &f, p)?);

    Ok(GradcheckReport { tol, layers, elapsed: start.elapsed() })
}

use super::cms::{cms_forward, CmsParams, CmsState};
use super::layout::ScanLayout;
use super::titans::{titans_forward, TitansParams, TitansState};
use crate::error::{config_err, Result};
use crate::numerics::{Rng, Tensor};
use crate::preprocess::PatchedBatch;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::param(&[d], vec![1.0; d]).unwrap(),
            beta: Tensor::param(&[d], vec![0.0; d]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Position-wise `D -> hidden -> D` GELU network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForward {
    pub fn init(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (d + hidden) as f64).sqrt();
        Self {
            w1: Tensor::param(&[d, hidden], rng.normal_vec(d * hidden, std)).unwrap(),
            b1: Tensor::param(&[hidden], vec![0.0; hidden]).unwrap(),
            w2: Tensor::param(&[hidden, d], rng.normal_vec(hidden * d, std)).unwrap(),
            b2: Tensor::param(&[d], vec![0.0; d]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w1)?.add(&self.b1)?.gelu().matmul(&self.w2)?.add(&self.b2)
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// One encoder block: memory sublayers followed by a feed-forward sublayer,
/// each pre-normalized and residual.
#[derive(Clone, Debug)]
pub struct HopeBlockParams {
    pub titans: TitansParams,
    pub cms: CmsParams,
    pub ffn: FeedForward,
    pub ln_titans: LayerNormParams,
    pub ln_cms: LayerNormParams,
    pub ln_ffn: LayerNormParams,
    pub dropout: f64,
}

impl HopeBlockParams {
    pub fn init(d: usize, ffn_mult: usize, decays: &[f64], dropout: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            titans: TitansParams::init(d, rng),
            cms: CmsParams::init(d, decays, rng)?,
            ffn: FeedForward::init(d, ffn_mult * d, rng),
            ln_titans: LayerNormParams::new(d),
            ln_cms: LayerNormParams::new(d),
            ln_ffn: LayerNormParams::new(d),
            dropout,
        })
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln_titans.visit(&format!("{prefix}.ln_titans"), out);
        self.titans.visit(&format!("{prefix}.titans"), out);
        self.ln_cms.visit(&format!("{prefix}.ln_cms"), out);
        self.cms.visit(&format!("{prefix}.cms"), out);
        self.ln_ffn.visit(&format!("{prefix}.ln_ffn"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("block", &mut out);
        out
    }
}

/// Memory contents of one block after a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    pub titans: TitansState,
    pub cms: CmsState,
}

/// `x1 = x + drop(titans(LN x))`, `x2 = x1 + drop(cms(LN x1))`,
/// `y = x2 + drop(ffn(LN x2))`.
pub fn hope_block(
    x: &Tensor,
    params: &HopeBlockParams,
    layout: &ScanLayout,
    init: Option<&BlockState>,
    train: bool,
    rng: &mut Rng,
) -> Result<(Tensor, BlockState)> {
    let p = params.dropout;
    let (t_out, titans) = titans_forward(&params.ln_titans.forward(x)?, &params.titans, layout, init.map(|s| &s.titans))?;
    let x1 = x.add(&t_out.dropout(p, rng, train)?)?;
    let (c_out, cms) = cms_forward(&params.ln_cms.forward(&x1)?, &params.cms, layout, init.map(|s| &s.cms))?;
    let x2 = x1.add(&c_out.dropout(p, rng, train)?)?;
    let f_out = params.ffn.forward(&params.ln_ffn.forward(&x2)?)?;
    let y = x2.add(&f_out.dropout(p, rng, train)?)?;
    Ok((y, BlockState { titans, cms }))
}

/// Contextualized tokens `[B, N+1, D]` and the CLS row `[B, D]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub h: Tensor,
    pub h_cls: Tensor,
    pub states: Vec<BlockState>,
}

/// Runs the block stack on a tokenized batch with fresh zero memory per
/// series. Padding patches are read-only in every memory.
pub fn encode(
    batch: &PatchedBatch,
    blocks: &[HopeBlockParams],
    chunk_size: usize,
    expected_depth: usize,
    train: bool,
    rng: &mut Rng,
) -> Result<EncoderOutput> {
    if blocks.len() != expected_depth {
        return Err(config_err!("encoder has {} blocks, config expects {expected_depth}", blocks.len()));
    }
    let (bsz, t_len) = (batch.tokens.shape()[0], batch.tokens.shape()[1]);
    let layout = ScanLayout::new(bsz, t_len, chunk_size, true, Some(batch.token_valid()))?;
    let mut h = batch.tokens.clone();
    let mut states = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (y, st) = hope_block(&h, block, &layout, None, train, rng)?;
        h = y;
        states.push(st);
    }
    let d = h.shape()[2];
    let h_cls = h.narrow(1, 0, 1)?.reshape(&[bsz, d])?;
    Ok(EncoderOutput { h, h_cls, states })
}

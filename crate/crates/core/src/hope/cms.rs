//! Long-term memory: one state vector per level, written once per chunk
//! with the chunk's mean token and decayed at a slower rate on every level.
//!
//! ```text
//! m_l <- γ_l m_l + (1 - γ_l) (u_c W_l)          after chunk c
//! y_t  = Σ_l sigmoid(g_l ⊙ x_t) ⊙ (m_l R_l)      m_l as it stood before t's chunk
//! ```

use super::layout::ScanLayout;
use crate::error::{config_err, shape_err, Result};
use crate::numerics::{count_flops, Rng, Tensor};

/// `γ_l = 1 - 2^-l` for `l = 1..=levels`.
pub fn default_decays(levels: usize) -> Vec<f64> {
    (1..=levels).map(|l| 1.0 - 0.5f64.powi(l as i32)).collect()
}

#[derive(Clone, Debug)]
pub struct CmsLevel {
    /// Read projection `[D, D]`.
    pub read: Tensor,
    /// Write projection `[D, D]`.
    pub write: Tensor,
    /// Output gate `[D]`.
    pub gate: Tensor,
    pub decay: f64,
}

#[derive(Clone, Debug)]
pub struct CmsParams {
    pub levels: Vec<CmsLevel>,
}

impl CmsParams {
    pub fn init(d: usize, decays: &[f64], rng: &mut Rng) -> Result<Self> {
        check_decays(decays)?;
        let std = (1.0 / d as f64).sqrt();
        let levels = decays
            .iter()
            .map(|&decay| CmsLevel {
                read: Tensor::param(&[d, d], rng.normal_vec(d * d, std)).unwrap(),
                write: Tensor::param(&[d, d], rng.normal_vec(d * d, std)).unwrap(),
                gate: Tensor::param(&[d], vec![0.0; d]).unwrap(),
                decay,
            })
            .collect();
        Ok(Self { levels })
    }

    pub fn decays(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.decay).collect()
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.levels.iter().enumerate() {
            out.push((format!("{prefix}.level{i}.read"), l.read.clone()));
            out.push((format!("{prefix}.level{i}.write"), l.write.clone()));
            out.push((format!("{prefix}.level{i}.gate"), l.gate.clone()));
        }
    }
}

/// Decays must lie in `[0, 1]` and strictly increase with the level.
pub fn check_decays(decays: &[f64]) -> Result<()> {
    if decays.is_empty() {
        return Err(config_err!("memory hierarchy needs at least one level"));
    }
    if decays.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(config_err!("level decays {decays:?} must lie in [0, 1]"));
    }
    if decays.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err!("level decays {decays:?} must strictly increase"));
    }
    Ok(())
}

/// Per-level state vectors `[B·D]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct CmsState {
    pub d: usize,
    pub levels: Vec<Vec<f64>>,
}

impl CmsState {
    pub fn zeros(batch: usize, d: usize, levels: usize) -> Self {
        Self {
            d,
            levels: vec![vec![0.0; batch * d]; levels],
        }
    }
}

/// Mean of the valid tokens of each chunk: `[B, T, D] -> [B, C, D]`, plus a
/// flag per `(b, c)` telling whether the chunk had any valid token.
pub fn chunk_mean(x: &Tensor, layout: &ScanLayout) -> Result<(Tensor, Vec<bool>)> {
    if x.rank() != 3 || x.shape()[0] != layout.batch || x.shape()[1] != layout.tokens {
        return Err(shape_err!("chunk mean: input {:?} against layout {}x{}", x.shape(), layout.batch, layout.tokens));
    }
    let (bsz, t_len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let nc = layout.n_chunks();
    let mut out = vec![0.0; bsz * nc * d];
    let mut counts = vec![0usize; bsz * nc];
    {
        let xd = x.data();
        for b in 0..bsz {
            for c in 0..nc {
                let dst = &mut out[(b * nc + c) * d..(b * nc + c + 1) * d];
                for t in layout.chunk_tokens(c).filter(|&t| layout.is_valid(b, t)) {
                    counts[b * nc + c] += 1;
                    for (o, v) in dst.iter_mut().zip(&xd[(b * t_len + t) * d..(b * t_len + t + 1) * d]) {
                        *o += v;
                    }
                }
                if counts[b * nc + c] > 0 {
                    let inv = 1.0 / counts[b * nc + c] as f64;
                    dst.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
    }
    count_flops((bsz * t_len * d) as u64);
    let flags: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    let layout_c = layout.clone();
    let y = Tensor::from_op(vec![bsz, nc, d], out, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; bsz * t_len * d];
        for b in 0..bsz {
            for c in 0..nc {
                let n = counts[b * nc + c];
                if n == 0 {
                    continue;
                }
                let inv = 1.0 / n as f64;
                let src = &g[(b * nc + c) * d..(b * nc + c + 1) * d];
                for t in layout_c.chunk_tokens(c).filter(|&t| layout_c.is_valid(b, t)) {
                    for (o, v) in gx[(b * t_len + t) * d..(b * t_len + t + 1) * d].iter_mut().zip(src) {
                        *o = v * inv;
                    }
                }
            }
        }
        vec![Some(gx)]
    });
    Ok((y, flags))
}

/// Exponential moving average over chunk writes: `[B, C, D] -> [B, C+1, D]`
/// where row `c` is the state before chunk `c` and row `C` the final state.
/// Chunks flagged invalid leave the state untouched.
pub fn ema_scan(p: &Tensor, decay: f64, chunk_valid: &[bool], init: Option<&[f64]>) -> Result<Tensor> {
    if p.rank() != 3 || chunk_valid.len() != p.shape()[0] * p.shape()[1] {
        return Err(shape_err!("ema scan: input {:?} with {} chunk flags", p.shape(), chunk_valid.len()));
    }
    let (bsz, nc, d) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    if init.is_some_and(|m| m.len() != bsz * d) {
        return Err(shape_err!("ema scan: initial state does not match [{bsz}, {d}]"));
    }
    let mut out = vec![0.0; bsz * (nc + 1) * d];
    {
        let pd = p.data();
        for b in 0..bsz {
            let base = b * (nc + 1) * d;
            if let Some(m) = init {
                out[base..base + d].copy_from_slice(&m[b * d..(b + 1) * d]);
            }
            for c in 0..nc {
                let (prev, next) = out[base + c * d..base + (c + 2) * d].split_at_mut(d);
                if chunk_valid[b * nc + c] {
                    let src = &pd[(b * nc + c) * d..(b * nc + c + 1) * d];
                    for ((n, pv), s) in next.iter_mut().zip(prev.iter()).zip(src) {
                        *n = decay * pv + (1.0 - decay) * s;
                    }
                } else {
                    next.copy_from_slice(prev);
                }
            }
        }
    }
    count_flops((3 * bsz * nc * d) as u64);
    let flags = chunk_valid.to_vec();
    Ok(Tensor::from_op(vec![bsz, nc + 1, d], out, vec![p.clone()], move |g, _| {
        let mut gp = vec![0.0; bsz * nc * d];
        let mut adj = vec![0.0; d];
        for b in 0..bsz {
            let base = b * (nc + 1) * d;
            adj.copy_from_slice(&g[base + nc * d..base + (nc + 1) * d]);
            for c in (0..nc).rev() {
                let direct = &g[base + c * d..base + (c + 1) * d];
                if flags[b * nc + c] {
                    let dst = &mut gp[(b * nc + c) * d..(b * nc + c + 1) * d];
                    for ((o, a), dv) in dst.iter_mut().zip(adj.iter_mut()).zip(direct) {
                        *o = (1.0 - decay) * *a;
                        *a = decay * *a + dv;
                    }
                } else {
                    adj.iter_mut().zip(direct).for_each(|(a, dv)| *a += dv);
                }
            }
        }
        vec![Some(gp)]
    }))
}

/// Full memory-hierarchy sublayer. Returns the gated read-outs and the
/// final per-level states.
pub fn cms_forward(x: &Tensor, params: &CmsParams, layout: &ScanLayout, init: Option<&CmsState>) -> Result<(Tensor, CmsState)> {
    let d = x.last_dim();
    if let Some(s) = init {
        if s.levels.len() != params.levels.len() || s.d != d {
            return Err(shape_err!("memory init has {} levels of width {}", s.levels.len(), s.d));
        }
    }
    let (means, chunk_valid) = chunk_mean(x, layout)?;
    let read_index = layout.read_index();
    let nc = layout.n_chunks();
    let mut y: Option<Tensor> = None;
    let mut finals = Vec::with_capacity(params.levels.len());
    for (l, level) in params.levels.iter().enumerate() {
        let written = means.matmul(&level.write)?;
        let states = ema_scan(&written, level.decay, &chunk_valid, init.map(|s| s.levels[l].as_slice()))?;
        finals.push(
            states
                .data()
                .chunks_exact((nc + 1) * d)
                .flat_map(|rows| rows[nc * d..].iter().copied())
                .collect(),
        );
        let read = states.matmul(&level.read)?.index_select1(&read_index)?;
        let gate = x.mul(&level.gate)?.sigmoid();
        let term = gate.mul(&read)?;
        y = Some(match y {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let y = y.ok_or_else(|| config_err!("memory hierarchy has no levels"))?;
    Ok((y, CmsState { d, levels: finals }))
}

//! Short-term associative memory: a momentum delta rule written at test
//! time and read through query projections.
//!
//! Per scanned valid token, in order:
//!
//! ```text
//! s = v - M k            (surprise, k unit norm)
//! S = η S + s kᵀ         (momentum)
//! M = (1 - α) M + θ S    (forget + write)
//! y = M q                (read after write)
//! ```

use super::layout::ScanLayout;
use crate::error::{shape_err, Result};
use crate::numerics::{count_flops, Rng, Tensor};

pub const KEY_NORM_EPS: f64 = 1e-12;

/// Memory matrices per batch element, each `[D, D]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TitansState {
    pub d: usize,
    pub m: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
}

impl TitansState {
    pub fn zeros(batch: usize, d: usize) -> Self {
        Self {
            d,
            m: vec![vec![0.0; d * d]; batch],
            s: vec![vec![0.0; d * d]; batch],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.s).all(|x| x.iter().all(|v| v.is_finite()))
    }
}

/// Fixed values replacing the learned rates (test and ablation hook).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RateOverrides {
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub theta: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TitansParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Forgetting rate before the sigmoid.
    pub alpha_raw: Tensor,
    /// Momentum before the sigmoid.
    pub eta_raw: Tensor,
    /// Write rate before the sigmoid.
    pub theta_raw: Tensor,
    pub overrides: RateOverrides,
}

impl TitansParams {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let w = |rng: &mut Rng| Tensor::param(&[d, d], rng.normal_vec(d * d, std)).unwrap();
        Self {
            w_q: w(rng),
            w_k: w(rng),
            w_v: w(rng),
            alpha_raw: Tensor::param(&[], vec![-4.0]).unwrap(),
            eta_raw: Tensor::param(&[], vec![0.0]).unwrap(),
            theta_raw: Tensor::param(&[], vec![-1.0]).unwrap(),
            overrides: RateOverrides::default(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Squashed `(α, η, θ)` as scalar tensors.
    pub fn rates(&self) -> (Tensor, Tensor, Tensor) {
        let pick = |raw: &Tensor, fixed: Option<f64>| match fixed {
            Some(v) => Tensor::scalar(v),
            None => raw.sigmoid(),
        };
        (
            pick(&self.alpha_raw, self.overrides.alpha),
            pick(&self.eta_raw, self.overrides.eta),
            pick(&self.theta_raw, self.overrides.theta),
        )
    }

    pub fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
        out.push((format!("{prefix}.alpha_raw"), self.alpha_raw.clone()));
        out.push((format!("{prefix}.eta_raw"), self.eta_raw.clone()));
        out.push((format!("{prefix}.theta_raw"), self.theta_raw.clone()));
    }
}

/// Projects `x` and runs the memory scan. Returns the read-outs and the
/// final memory.
pub fn titans_forward(
    x: &Tensor,
    params: &TitansParams,
    layout: &ScanLayout,
    init: Option<&TitansState>,
) -> Result<(Tensor, TitansState)> {
    let q = x.matmul(&params.w_q)?;
    let k = x.matmul(&params.w_k)?.l2_normalize_rows(KEY_NORM_EPS);
    let v = x.matmul(&params.w_v)?;
    let (alpha, eta, theta) = params.rates();
    titans_scan(&q, &k, &v, &alpha, &eta, &theta, layout, init)
}

struct Rates {
    keep: f64,
    eta: f64,
    theta: f64,
}

/// One scanned token. Updates `m`/`s` in place when `valid`; `surprise` is
/// scratch space of length `d`.
#[inline]
fn step(m: &mut [f64], s: &mut [f64], k: &[f64], v: &[f64], r: &Rates, d: usize, surprise: &mut [f64]) {
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        surprise[i] = v[i] - dot(row, k);
    }
    for i in 0..d {
        let si = surprise[i];
        let srow = &mut s[i * d..(i + 1) * d];
        let mrow = &mut m[i * d..(i + 1) * d];
        for j in 0..d {
            let sv = r.eta * srow[j] + si * k[j];
            srow[j] = sv;
            mrow[j] = r.keep * mrow[j] + r.theta * sv;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = M x`
#[inline]
fn matvec(m: &[f64], x: &[f64], out: &mut [f64], d: usize) {
    for i in 0..d {
        out[i] = dot(&m[i * d..(i + 1) * d], x);
    }
}

/// `out += Mᵀ x`
#[inline]
fn matvec_t_acc(m: &[f64], x: &[f64], out: &mut [f64], d: usize) {
    for i in 0..d {
        let xi = x[i];
        if xi != 0.0 {
            for (o, mv) in out.iter_mut().zip(&m[i * d..(i + 1) * d]) {
                *o += xi * mv;
            }
        }
    }
}

/// Memory scan over precomputed queries, unit keys, and values.
#[allow(clippy::too_many_arguments)]
pub fn titans_scan(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    eta: &Tensor,
    theta: &Tensor,
    layout: &ScanLayout,
    init: Option<&TitansState>,
) -> Result<(Tensor, TitansState)> {
    let shape = q.shape().to_vec();
    if shape.len() != 3 || k.shape() != shape || v.shape() != shape {
        return Err(shape_err!("titans scan: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()));
    }
    let (bsz, t_len, d) = (shape[0], shape[1], shape[2]);
    if layout.batch != bsz || layout.tokens != t_len {
        return Err(shape_err!("titans scan: layout {}x{} for input {:?}", layout.batch, layout.tokens, shape));
    }
    if let Some(s) = init {
        if s.d != d || s.m.len() != bsz || s.s.len() != bsz {
            return Err(shape_err!("titans scan: initial state for {}x{} against {:?}", s.m.len(), s.d, shape));
        }
    }
    let rates = Rates {
        keep: 1.0 - alpha.item(),
        eta: eta.item(),
        theta: theta.item(),
    };
    let init = init.cloned().unwrap_or_else(|| TitansState::zeros(bsz, d));
    let n_chunks = layout.n_chunks();
    let mut y = vec![0.0; bsz * t_len * d];
    let mut checkpoints: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(bsz);
    let mut final_state = TitansState::zeros(bsz, d);
    let mut writes = 0u64;
    {
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut surprise = vec![0.0; d];
        for b in 0..bsz {
            let mut m = init.m[b].clone();
            let mut s = init.s[b].clone();
            let mut cps = Vec::with_capacity(n_chunks);
            for c in 0..n_chunks {
                cps.push((m.clone(), s.clone()));
                for t in layout.chunk_tokens(c) {
                    let off = (b * t_len + t) * d;
                    if layout.is_valid(b, t) {
                        step(&mut m, &mut s, &kd[off..off + d], &vd[off..off + d], &rates, d, &mut surprise);
                        writes += 1;
                    }
                    matvec(&m, &qd[off..off + d], &mut y[off..off + d], d);
                }
            }
            if layout.summary_slot {
                let off = b * t_len * d;
                matvec(&m, &qd[off..off + d], &mut y[off..off + d], d);
            }
            final_state.m[b] = m;
            final_state.s[b] = s;
            checkpoints.push(cps);
        }
    }
    count_flops((bsz * t_len * 2 * d * d) as u64 + writes * (8 * d * d) as u64);

    let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
    let final_m: Vec<Vec<f64>> = final_state.m.clone();
    let layout_c = layout.clone();
    let out = Tensor::from_op(
        shape.clone(),
        y,
        vec![q.clone(), k.clone(), v.clone(), alpha.clone(), eta.clone(), theta.clone()],
        move |g, _needs| {
            let (qd, kd, vd) = (qc.data(), kc.data(), vc.data());
            let mut dq = vec![0.0; bsz * t_len * d];
            let mut dk = vec![0.0; bsz * t_len * d];
            let mut dv = vec![0.0; bsz * t_len * d];
            let (mut d_keep, mut d_eta, mut d_theta) = (0.0, 0.0, 0.0);
            let mut surprise = vec![0.0; d];
            let mut ds = vec![0.0; d];
            for b in 0..bsz {
                let mut adj_m = vec![0.0; d * d];
                let mut adj_s = vec![0.0; d * d];
                if layout_c.summary_slot {
                    let off = b * t_len * d;
                    add_outer(&mut adj_m, &g[off..off + d], &qd[off..off + d], d);
                    matvec_t_acc(&final_m[b], &g[off..off + d], &mut dq[off..off + d], d);
                }
                for c in (0..n_chunks).rev() {
                    // replay the chunk from its checkpoint
                    let toks: Vec<usize> = layout_c.chunk_tokens(c).collect();
                    let (m0, s0) = &checkpoints[b][c];
                    let mut ms = Vec::with_capacity(toks.len() + 1);
                    let mut ss = Vec::with_capacity(toks.len() + 1);
                    ms.push(m0.clone());
                    ss.push(s0.clone());
                    for &t in &toks {
                        let mut m = ms.last().unwrap().clone();
                        let mut s = ss.last().unwrap().clone();
                        if layout_c.is_valid(b, t) {
                            let off = (b * t_len + t) * d;
                            step(&mut m, &mut s, &kd[off..off + d], &vd[off..off + d], &rates, d, &mut surprise);
                        }
                        ms.push(m);
                        ss.push(s);
                    }
                    for (i, &t) in toks.iter().enumerate().rev() {
                        let off = (b * t_len + t) * d;
                        let (gy, qt, kt, vt) = (&g[off..off + d], &qd[off..off + d], &kd[off..off + d], &vd[off..off + d]);
                        let (m_prev, s_prev) = (&ms[i], &ss[i]);
                        let (m_cur, s_cur) = (&ms[i + 1], &ss[i + 1]);
                        add_outer(&mut adj_m, gy, qt, d);
                        matvec_t_acc(m_cur, gy, &mut dq[off..off + d], d);
                        if !layout_c.is_valid(b, t) {
                            continue;
                        }
                        // M = keep·M_prev + θ·S
                        d_theta += dot(&adj_m, s_cur);
                        d_keep += dot(&adj_m, m_prev);
                        for (a, m) in adj_s.iter_mut().zip(&adj_m) {
                            *a += rates.theta * m;
                        }
                        // S = η·S_prev + s kᵀ, s = v - M_prev k
                        d_eta += dot(&adj_s, s_prev);
                        matvec(m_prev, kt, &mut surprise, d);
                        for i in 0..d {
                            surprise[i] = vt[i] - surprise[i];
                        }
                        matvec(&adj_s, kt, &mut ds, d);
                        matvec_t_acc(&adj_s, &surprise, &mut dk[off..off + d], d);
                        dv[off..off + d].iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
                        // adjoint of M_prev: keep·adj_M - ds kᵀ; and dk -= M_prevᵀ ds
                        for i in 0..d {
                            let dsi = ds[i];
                            for (am, kj) in adj_m[i * d..(i + 1) * d].iter_mut().zip(kt) {
                                *am = rates.keep * *am - dsi * kj;
                            }
                        }
                        for x in ds.iter_mut() {
                            *x = -*x;
                        }
                        matvec_t_acc(m_prev, &ds, &mut dk[off..off + d], d);
                        for a in adj_s.iter_mut() {
                            *a *= rates.eta;
                        }
                    }
                }
            }
            vec![
                Some(dq),
                Some(dk),
                Some(dv),
                Some(vec![-d_keep]),
                Some(vec![d_eta]),
                Some(vec![d_theta]),
            ]
        },
    );
    Ok((out, final_state))
}

/// `a += x yᵀ`
#[inline]
fn add_outer(a: &mut [f64], x: &[f64], y: &[f64], d: usize) {
    for i in 0..d {
        let xi = x[i];
        if xi != 0.0 {
            for (av, yv) in a[i * d..(i + 1) * d].iter_mut().zip(y) {
                *av += xi * yv;
            }
        }
    }
}

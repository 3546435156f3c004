//! Differentiable tensor operations.
//!
//! Elementwise binary ops broadcast the operand with fewer axes over the
//! leading axes of the other one; the smaller shape must be a suffix of the
//! larger. In row-major storage that is plain modular indexing.

use super::rng::Rng;
use super::tensor::{count_flops, Tensor};
use crate::error::{shape_err, Result};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(shape_err!("cannot broadcast shapes {a:?} and {b:?}"));
    }
    Ok(long.to_vec())
}

/// Sums `g` (length n) into a buffer of length `m` where `m` divides `n`.
fn reduce_broadcast(g: &[f64], m: usize) -> Vec<f64> {
    if g.len() == m {
        return g.to_vec();
    }
    let mut out = vec![0.0; m];
    for chunk in g.chunks_exact(m) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Tensor> {
        let shape = broadcast_shape(self.shape(), other.shape())?;
        let (na, nb) = (self.numel(), other.numel());
        let n: usize = shape.iter().product();
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            (0..n).map(|i| f(a[i % na], b[i % nb])).collect()
        };
        count_flops(n as u64);
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            move |g, needs| {
                let (a, b) = (ta.data(), tb.data());
                let ga = needs[0].then(|| {
                    let full: Vec<f64> =
                        g.iter().enumerate().map(|(i, &gi)| da(a[i % na], b[i % nb], gi)).collect();
                    reduce_broadcast(&full, na)
                });
                let gb = needs[1].then(|| {
                    let full: Vec<f64> =
                        g.iter().enumerate().map(|(i, &gi)| db(a[i % na], b[i % nb], gi)).collect();
                    reduce_broadcast(&full, nb)
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a / b, |_, b, g| g / b, |a, b, g| -g * a / (b * b))
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input
    /// `x` and output `y`.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        count_flops(out.len() as u64);
        let input = self.clone();
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let x = input.data();
            vec![Some(g.iter().zip(x.iter()).zip(&y).map(|((gi, &xi), &yi)| gi * df(xi, yi)).collect())]
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    /// Keeps values with `|x| >= floor`; smaller magnitudes are pushed out to
    /// `±floor` (zero maps to `+floor`).
    pub fn clamp_abs_min(&self, floor: f64) -> Tensor {
        self.unary(
            move |x| {
                if x.abs() >= floor {
                    x
                } else if x < 0.0 {
                    -floor
                } else {
                    floor
                }
            },
            move |x, _| if x.abs() >= floor { 1.0 } else { 0.0 },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// `[.., m, k] x [k, n] -> [.., m, n]`; leading axes of `self` are
    /// flattened into rows.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || other.rank() != 2 || self.last_dim() != other.shape()[0] {
            return Err(shape_err!(
                "matmul shapes {:?} x {:?} do not agree",
                self.shape(),
                other.shape()
            ));
        }
        let k = self.last_dim();
        let n = other.shape()[1];
        let m = self.numel() / k;
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = gemm(m, k, n, &self.data(), Layout::Normal, &other.data(), Layout::Normal);
        count_flops(2 * (m * k * n) as u64);
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(shape, out, vec![self.clone(), other.clone()], move |g, needs| {
            let ga = needs[0].then(|| gemm(m, n, k, g, Layout::Normal, &tb.data(), Layout::Transposed));
            let gb = needs[1].then(|| gemm(k, m, n, &ta.data(), Layout::Transposed, g, Layout::Normal));
            vec![ga, gb]
        }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(shape_err!("transpose needs rank 2, got {:?}", self.shape()));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose(&self.data(), r, c);
        Ok(Tensor::from_op(vec![c, r], out, vec![self.clone()], move |g, _| {
            vec![Some(transpose(g, c, r))]
        }))
    }

    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        count_flops(n as u64);
        Tensor::from_op(Vec::new(), vec![s], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for a in 0..len {
                    let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        count_flops(self.numel() as u64);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err!("axis {axis} out of range for {:?}", self.shape()))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(shape_err!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {:?}",
                self.shape()
            ));
        }
        let (outer, full, inner) = axis_split(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", first.shape()));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!(
                    "concat along axis {axis}: shape {:?} does not match {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &l) in datas.iter().zip(&lens) {
                    out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let lens_b = lens.clone();
        Ok(Tensor::from_op(shape, out, parts.to_vec(), move |g, needs| {
            let mut grads: Vec<Vec<f64>> =
                lens_b.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens_b) {
                    gp.extend_from_slice(&g[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads.into_iter().zip(needs).map(|(gp, &n)| n.then_some(gp)).collect()
        }))
    }

    /// Rows of axis 1 picked by `index`: `[B, S, D] -> [B, index.len(), D]`.
    pub fn index_select1(&self, index: &[usize]) -> Result<Tensor> {
        if self.rank() != 3 || index.is_empty() || index.iter().any(|&i| i >= self.shape()[1]) {
            return Err(shape_err!(
                "index_select1 with {} indices on {:?}",
                index.len(),
                self.shape()
            ));
        }
        let (b, s, d) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let t = index.len();
        let mut out = Vec::with_capacity(b * t * d);
        {
            let x = self.data();
            for bi in 0..b {
                for &i in index {
                    out.extend_from_slice(&x[(bi * s + i) * d..(bi * s + i + 1) * d]);
                }
            }
        }
        let index = index.to_vec();
        Ok(Tensor::from_op(vec![b, t, d], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; b * s * d];
            for bi in 0..b {
                for (ti, &i) in index.iter().enumerate() {
                    let src = &g[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                    for (dst, v) in gx[(bi * s + i) * d..(bi * s + i + 1) * d].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `out[r] = self[r, index[r]]` for a `[R, C]` tensor.
    pub fn pick(&self, index: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || index.len() != self.shape()[0] || index.iter().any(|&i| i >= self.shape()[1]) {
            return Err(shape_err!("pick with {} indices on {:?}", index.len(), self.shape()));
        }
        let c = self.shape()[1];
        let out: Vec<f64> = {
            let x = self.data();
            index.iter().enumerate().map(|(r, &i)| x[r * c + i]).collect()
        };
        let index = index.to_vec();
        let n = self.numel();
        Ok(Tensor::from_op(vec![index.len()], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (r, &i) in index.iter().enumerate() {
                gx[r * c + i] += g[r];
            }
            vec![Some(gx)]
        }))
    }

    /// Replaces every last-axis row whose flag in `mask` is set with `fill`.
    pub fn mask_fill_rows(&self, mask: &[bool], fill: &Tensor) -> Result<Tensor> {
        let d = self.last_dim();
        let rows = self.numel() / d;
        if mask.len() != rows || fill.numel() != d {
            return Err(shape_err!(
                "mask_fill_rows: {} flags / fill {:?} against {:?}",
                mask.len(),
                fill.shape(),
                self.shape()
            ));
        }
        let mut out = self.to_vec();
        {
            let f = fill.data();
            for (r, &m) in mask.iter().enumerate() {
                if m {
                    out[r * d..(r + 1) * d].copy_from_slice(&f);
                }
            }
        }
        let mask = mask.to_vec();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone(), fill.clone()], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.to_vec();
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        gx[r * d..(r + 1) * d].fill(0.0);
                    }
                }
                gx
            });
            let gf = needs[1].then(|| {
                let mut gf = vec![0.0; d];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for (a, b) in gf.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                }
                gf
            });
            vec![gx, gf]
        }))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.last_dim();
        if gamma.numel() != d || beta.numel() != d || self.rank() == 0 {
            return Err(shape_err!(
                "layer_norm: gamma {:?} / beta {:?} against input {:?}",
                gamma.shape(),
                beta.shape(),
                self.shape()
            ));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let (x, gm, bt) = (self.data(), gamma.data(), beta.data());
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = gm[j] * h + bt[j];
                }
            }
        }
        count_flops(8 * (rows * d) as u64);
        let gamma_c = gamma.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, needs| {
                let gm = gamma_c.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            gx[r * d + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    gx
                });
                let gg = needs[1].then(|| {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    gg
                });
                let gb = needs[2].then(|| reduce_broadcast(g, d));
                vec![gx, gg, gb]
            },
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_row(&self) -> Tensor {
        let n = self.last_dim();
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        count_flops(4 * out.len() as u64);
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; y.len()];
            for ((gxr, gr), yr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    gxr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_row(&self) -> Tensor {
        let n = self.last_dim();
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        count_flops(4 * out.len() as u64);
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; y.len()];
            for ((gxr, gr), yr) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                let gsum: f64 = gr.iter().sum();
                for j in 0..n {
                    gxr[j] = gr[j] - yr[j].exp() * gsum;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Scales every last-axis row to unit ℓ2 norm: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Tensor {
        let d = self.last_dim();
        let mut out = self.to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        count_flops(3 * out.len() as u64);
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; y.len()];
            for (((gxr, gr), yr), n) in
                gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)).zip(&norms)
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gxr[j] = (gr[j] - yr[j] * dot) / n;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut Rng, train: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err!("dropout probability {p} outside [0, 1)"));
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel()).map(|_| if rng.uniform() >= p { keep } else { 0.0 }).collect();
        let out: Vec<f64> = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        count_flops(out.len() as u64);
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&mask).map(|(a, b)| a * b).collect())]
        }))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    Transposed,
}

/// `C[m×n] = op(A)[m×k] · op(B)[k×n]`, where a transposed operand is stored
/// in its untransposed row-major form.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // SAFETY: pointers and strides describe buffers of exactly m*k, k*n and
    // m*n elements, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

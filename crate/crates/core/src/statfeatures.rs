//! Hand-crafted statistical descriptors of a raw series, computed on its
//! observed prefix only.
//!
//! Every function is total on finite input: degenerate series (constant,
//! too short) map to 0 instead of NaN.

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;
use crate::preprocess::SeriesBatch;

pub const K: usize = 8;

pub const FEATURE_NAMES: [&str; K] = [
    "acf1",
    "acf10ss",
    "spectral_entropy",
    "trend_strength",
    "seasonal_strength",
    "stability",
    "lumpiness",
    "crossing_rate",
];

/// Season used when the autocorrelation shows no clear peak.
pub const FALLBACK_SEASON: usize = 8;
/// Minimum autocorrelation for a peak to count as a season.
pub const SEASON_PEAK_MIN: f64 = 0.1;
/// Peaks must also clear this many white-noise standard errors (`1/√n`),
/// so that noise alone rarely yields a season.
pub const SEASON_PEAK_SIGMAS: f64 = 4.0;
/// Shortest moving-average window for the trend estimate.
pub const MIN_TREND_WINDOW: usize = 12;
/// Trend window cap for series too short to carry a season.
pub const SHORT_TREND_WINDOW: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; K],
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.values[i])
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// True when the spread is negligible against the magnitude, so that any
/// remaining variation is rounding noise.
fn is_flat(x: &[f64]) -> bool {
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    x.is_empty() || hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0)
}

/// Sample autocorrelations for lags `0..=max_lag` (lag 0 is 1). A flat
/// series yields all zeros.
pub fn acf_all(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; max_lag + 1];
    if n < 2 || is_flat(x) {
        return out;
    }
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    for (k, o) in out.iter_mut().enumerate().take(max_lag.min(n - 1) + 1) {
        *o = c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / c0;
    }
    out
}

/// Sample autocorrelation at `lag`; 0 for flat series or `lag >= len`.
pub fn acf(x: &[f64], lag: usize) -> f64 {
    if lag >= x.len() {
        return 0.0;
    }
    acf_all(x, lag)[lag]
}

/// Sum of squared autocorrelations over lags 1..=10 (capped at `len - 1`).
pub fn acf10ss(x: &[f64]) -> f64 {
    let max_lag = 10.min(x.len().saturating_sub(1));
    acf_all(x, max_lag)[1..].iter().map(|r| r * r).sum()
}

/// Normalized Shannon entropy of the periodogram over positive frequencies
/// `1..=len/2`, via a direct DFT.
pub fn spectral_entropy(x: &[f64]) -> f64 {
    let n = x.len();
    let bins = n / 2;
    if bins < 2 || is_flat(x) {
        return 0.0;
    }
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let tau = std::f64::consts::TAU;
    let cos: Vec<f64> = (0..n).map(|j| (tau * j as f64 / n as f64).cos()).collect();
    let sin: Vec<f64> = (0..n).map(|j| (tau * j as f64 / n as f64).sin()).collect();
    let power: Vec<f64> = (1..=bins)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in c.iter().enumerate() {
                let j = (k * t) % n;
                re += v * cos[j];
                im -= v * sin[j];
            }
            re * re + im * im
        })
        .collect();
    let total: f64 = power.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = power
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum();
    (h / (bins as f64).ln()).clamp(0.0, 1.0)
}

/// Season length: the lag in `[2, len/2]` with the largest autocorrelation
/// among local peaks above `max(SEASON_PEAK_MIN, SEASON_PEAK_SIGMAS/√n)`,
/// else [`FALLBACK_SEASON`].
pub fn detect_season(x: &[f64]) -> usize {
    let hi = x.len() / 2;
    if hi < 2 {
        return FALLBACK_SEASON;
    }
    let r = acf_all(x, hi + 1);
    let floor = SEASON_PEAK_MIN.max(SEASON_PEAK_SIGMAS / (x.len() as f64).sqrt());
    let mut best: Option<(usize, f64)> = None;
    for k in 2..=hi {
        let peak = r[k] > r[k - 1] && (k + 1 >= r.len() || r[k] >= r[k + 1]);
        if peak && r[k] > floor && best.is_none_or(|(_, b)| r[k] > b) {
            best = Some((k, r[k]));
        }
    }
    best.map_or(FALLBACK_SEASON, |(k, _)| k)
}

/// Centered moving average with window `w`; even windows use the 2×w
/// form. Returns the first index covered and the averages.
fn centered_ma(x: &[f64], w: usize) -> (usize, Vec<f64>) {
    let n = x.len();
    let half = w / 2;
    if w < 2 || n < 2 * half + 1 {
        return (0, Vec::new());
    }
    let out = (half..n - half)
        .map(|t| {
            if w % 2 == 1 {
                x[t - half..=t + half].iter().sum::<f64>() / w as f64
            } else {
                let inner: f64 = x[t - half + 1..t + half].iter().sum();
                (inner + 0.5 * (x[t - half] + x[t + half])) / w as f64
            }
        })
        .collect();
    (half, out)
}

/// Variances below this fraction of the series variance are rounding noise.
const VAR_RESOLUTION: f64 = 1e-20;

fn strength(remainder_var: f64, total_var: f64, series_var: f64) -> f64 {
    if total_var <= VAR_RESOLUTION * series_var {
        0.0
    } else {
        (1.0 - remainder_var / total_var).clamp(0.0, 1.0)
    }
}

/// Classical additive decomposition `x = T + S + R` on the interior where
/// the moving average is defined. Returns `(trend_strength,
/// seasonal_strength)`.
///
/// The trend window is the smallest multiple of `m` that is at least
/// [`MIN_TREND_WINDOW`], so the average cancels the season while staying
/// wide enough to smooth noise. Series shorter than `2m + 1` get no
/// seasonal component and a window of `min(SHORT_TREND_WINDOW, len/2)`.
pub fn trend_seasonal_strength(x: &[f64], m: usize) -> (f64, f64) {
    let n = x.len();
    if n < 3 || is_flat(x) {
        return (0.0, 0.0);
    }
    let m = m.max(2);
    let seasonal = n > 2 * m;
    let mut w = if seasonal { m * MIN_TREND_WINDOW.div_ceil(m) } else { SHORT_TREND_WINDOW.min(n / 2) };
    if seasonal && n < 2 * (w / 2) + 1 + m {
        // keep at least one full season in the interior
        w = m;
    }
    let (start, trend) = centered_ma(x, w);
    if trend.is_empty() {
        return (0.0, 0.0);
    }
    let xs = &x[start..start + trend.len()];
    let detrended: Vec<f64> = xs.iter().zip(&trend).map(|(a, b)| a - b).collect();
    let season: Vec<f64> = if seasonal {
        let mut sums = vec![0.0; m];
        let mut counts = vec![0usize; m];
        for (i, v) in detrended.iter().enumerate() {
            sums[(start + i) % m] += v;
            counts[(start + i) % m] += 1;
        }
        let phase: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        let centre = mean(&phase);
        (0..detrended.len()).map(|i| phase[(start + i) % m] - centre).collect()
    } else {
        vec![0.0; detrended.len()]
    };
    let remainder: Vec<f64> = detrended.iter().zip(&season).map(|(d, s)| d - s).collect();
    let var_r = variance(&remainder);
    let trend_plus_r: Vec<f64> = trend.iter().zip(&remainder).map(|(t, r)| t + r).collect();
    let season_plus_r: Vec<f64> = season.iter().zip(&remainder).map(|(s, r)| s + r).collect();
    let var_x = variance(xs);
    let ts = strength(var_r, variance(&trend_plus_r), var_x);
    let ss = if seasonal { strength(var_r, variance(&season_plus_r), var_x) } else { 0.0 };
    (ts, ss)
}

/// Window length for stability and lumpiness.
pub fn tile_window(len: usize) -> usize {
    8.max(len / 10)
}

/// Variance of window means and variance of window variances over full
/// non-overlapping windows of the min-max scaled series.
pub fn stability_lumpiness(x: &[f64], w: usize) -> (f64, f64) {
    if w == 0 || x.len() < 2 * w || is_flat(x) {
        return (0.0, 0.0);
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scaled: Vec<f64> = x.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let (means, vars): (Vec<f64>, Vec<f64>) = scaled.chunks_exact(w).map(|c| (mean(c), variance(c))).unzip();
    (variance(&means), variance(&vars))
}

/// Fraction of adjacent pairs on opposite sides of the median.
pub fn crossing_rate(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let med = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let above: Vec<bool> = x.iter().map(|v| *v > med).collect();
    let crossings = above.windows(2).filter(|p| p[0] != p[1]).count();
    crossings as f64 / (n - 1) as f64
}

/// Scales by a power of two so the largest magnitude lies in `[0.5, 1)`.
/// Exact for normal floats, and every feature is scale invariant.
fn rescale(x: &[f64]) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return x.to_vec();
    }
    let exp = peak.log2().floor() as i32 + 1;
    let (a, b) = (exp / 2, exp - exp / 2);
    x.iter().map(|v| v * 2f64.powi(-a) * 2f64.powi(-b)).collect()
}

/// All eight features of one observed series.
pub fn features(x: &[f64]) -> FeatureVector {
    let x = &rescale(x)[..];
    let m = detect_season(x);
    let (trend, seasonal) = trend_seasonal_strength(x, m);
    let (stab, lump) = stability_lumpiness(x, tile_window(x.len()));
    let values = [
        acf(x, 1),
        acf10ss(x),
        spectral_entropy(x),
        trend,
        seasonal,
        stab,
        lump,
        crossing_rate(x),
    ];
    debug_assert!(values.iter().all(|v| v.is_finite()));
    FeatureVector { values }
}

/// Raw features for each series of the batch, row-major `B × K`.
pub fn extract_raw(batch: &SeriesBatch) -> Vec<[f64; K]> {
    (0..batch.batch_size()).map(|b| features(batch.valid_row(b)).values).collect()
}

/// Per-feature standardization fit on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler {
    pub mean: [f64; K],
    pub std: [f64; K],
}

impl FeatureScaler {
    pub fn identity() -> Self {
        Self { mean: [0.0; K], std: [1.0; K] }
    }

    /// Population mean and standard deviation per feature; a feature that is
    /// constant on the training split is only centred.
    pub fn fit(rows: &[[f64; K]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(shape_err!("cannot fit feature scaling on zero rows"));
        }
        let mut mean = [0.0; K];
        let mut std = [1.0; K];
        for j in 0..K {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            mean[j] = self::mean(&col);
            let s = variance(&col).sqrt();
            std[j] = if s > 1e-12 { s } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, rows: &[[f64; K]]) -> Vec<[f64; K]> {
        rows.iter()
            .map(|r| std::array::from_fn(|j| (r[j] - self.mean[j]) / self.std[j]))
            .collect()
    }
}

/// Standardized features as a constant `[B, K]` tensor.
pub fn extract(batch: &SeriesBatch, scaler: &FeatureScaler) -> Tensor {
    let rows = scaler.transform(&extract_raw(batch));
    Tensor::from_vec(&[rows.len(), K], rows.concat()).expect("feature rows have K columns")
}

/// Comma-separated feature table with a header row.
pub fn to_csv(rows: &[[f64; K]]) -> String {
    let mut out = format!("index,{}\n", FEATURE_NAMES.join(","));
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!("{i},{}\n", cells.join(",")));
    }
    out
}

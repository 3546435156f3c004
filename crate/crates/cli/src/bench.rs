//! Forward wall time of the encoder block stack versus sequence length,
//! with a quadratic self-attention stub as the contrast case.

use std::fmt::Write as _;
use std::time::Instant;

use memts::hope::{hope_block, HopeBlockParams, ScanLayout};
use memts::model::{Model, RunConfig};
use memts::numerics::{flop_count, no_grad, reset_flop_count, RngState, Tensor};
use memts::{Error, Result};

pub const DEFAULT_LENGTHS: [usize; 4] = [32, 64, 128, 256];
pub const DEFAULT_RUNS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// Patch tokens per series (the summary slot comes on top).
    pub length: usize,
    pub median_secs: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub runs: usize,
    pub encoder: Vec<BenchRow>,
    pub attention: Vec<BenchRow>,
}

/// `time(2t) / time(t)` when both lengths were measured.
pub fn doubling_ratio(rows: &[BenchRow], t: usize) -> Option<f64> {
    let at = |n: usize| rows.iter().find(|r| r.length == n).map(|r| r.median_secs);
    Some(at(2 * t)? / at(t)?)
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,length,median_ms,flops,ratio_vs_half\n");
        for (name, rows) in [("encoder", &self.encoder), ("attention_stub", &self.attention)] {
            for r in rows.iter() {
                let ratio = if r.length % 2 == 0 { doubling_ratio(rows, r.length / 2) } else { None };
                let _ = writeln!(
                    s,
                    "{name},{},{:.4},{},{}",
                    r.length,
                    r.median_secs * 1e3,
                    r.flops,
                    ratio.map_or(String::new(), |x| format!("{x:.3}"))
                );
            }
        }
        s
    }
}

/// `softmax(x xᵀ / √D) x` for `x: [T, D]`.
pub fn quadratic_attention_stub(x: &Tensor) -> Result<Tensor> {
    let d = x.shape()[1] as f64;
    x.matmul(&x.t()?)?.scale(1.0 / d.sqrt()).softmax_row().matmul(x)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_runs(runs: usize, f: &dyn Fn() -> Result<Tensor>) -> Result<(f64, u64)> {
    no_grad(|| {
        reset_flop_count();
        f()?;
        let flops = flop_count();
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            std::hint::black_box(f()?);
            times.push(t.elapsed().as_secs_f64());
        }
        Ok((median(times), flops))
    })
}

fn encoder_forward(x: &Tensor, blocks: &[HopeBlockParams], layout: &ScanLayout) -> Result<Tensor> {
    let mut rng = RngState::new(0).rng();
    let mut h = x.clone();
    for b in blocks {
        h = hope_block(&h, b, layout, None, false, &mut rng)?.0;
    }
    Ok(h)
}

/// Median forward time over `runs` repetitions (after one warm-up run) for
/// each token count, for the configured block stack on one series and for
/// the attention stub at the same width.
pub fn run_bench(cfg: &RunConfig, lengths: &[usize], runs: usize, seed: u64) -> Result<BenchReport> {
    if lengths.is_empty() || lengths.contains(&0) || runs == 0 {
        return Err(Error::Config(format!("bench needs positive lengths and runs, got {lengths:?} and {runs}")));
    }
    cfg.validate()?;
    let m = &cfg.model;
    let mut rng = RngState::new(seed).rng();
    let model = Model::init(m, &mut rng)?;
    let mut report = BenchReport { runs, encoder: Vec::new(), attention: Vec::new() };
    for &t in lengths {
        let x = Tensor::from_vec(&[1, t + 1, m.d_model], rng.normal_vec((t + 1) * m.d_model, 1.0))?;
        let layout = ScanLayout::new(1, t + 1, m.chunk_size, true, None)?;
        let (secs, flops) = time_runs(runs, &|| encoder_forward(&x, &model.blocks, &layout))?;
        report.encoder.push(BenchRow { length: t, median_secs: secs, flops });
        let xs = Tensor::from_vec(&[t, m.d_model], rng.normal_vec(t * m.d_model, 1.0))?;
        let (secs, flops) = time_runs(runs, &|| quadratic_attention_stub(&xs))?;
        report.attention.push(BenchRow { length: t, median_secs: secs, flops });
        log::info!("bench length {t}: encoder {:.3} ms", report.encoder.last().map_or(0.0, |r| r.median_secs * 1e3));
    }
    Ok(report)
}

//! Delimited-text ingestion, length alignment, dataset filtering, batching,
//! and synthetic labelled corpora.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Rng, RngState};
use crate::preprocess::SeriesBatch;

/// Model input length.
pub const INPUT_LEN: usize = 256;

/// Summary of a labelled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    /// Longest native series length.
    pub series_length: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub type_tag: Option<String>,
}

impl DatasetMeta {
    pub const CSV_HEADER: &'static str = "name,num_classes,series_length,train_size,test_size,type,bakeoff";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.name,
            self.num_classes,
            self.series_length,
            self.train_size,
            self.test_size,
            self.type_tag.as_deref().unwrap_or(""),
            bakeoff_filter(self)
        )
    }
}

/// Dataset selection rule: fewer than 8 classes and native length below 400.
pub fn bakeoff_filter(meta: &DatasetMeta) -> bool {
    meta.num_classes < 8 && meta.series_length < 400
}

/// One parsed file: native-length series and their raw labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSplit {
    pub series: Vec<Vec<f64>>,
    pub labels: Vec<i64>,
}

fn parse_label(cell: &str, line: usize) -> Result<i64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: label {cell:?} is not numeric")))?;
    if !v.is_finite() || v.fract() != 0.0 || v.abs() > 1e15 {
        return Err(Error::Format(format!("line {line}: label {cell:?} is not an integer")));
    }
    Ok(v as i64)
}

/// Replaces interior gaps by linear interpolation between the neighbouring
/// observations and leading gaps by the first observation. Trailing gaps
/// are dropped (they are padding).
fn fill_gaps(row: &[f64]) -> Vec<f64> {
    let end = row.iter().rposition(|v| !v.is_nan()).map_or(0, |i| i + 1);
    let mut x = row[..end].to_vec();
    let Some(first) = x.iter().position(|v| !v.is_nan()) else {
        return Vec::new();
    };
    let v0 = x[first];
    x[..first].fill(v0);
    let mut last = first;
    for i in first + 1..x.len() {
        if !x[i].is_nan() {
            let (a, b) = (x[last], x[i]);
            for j in last + 1..i {
                let w = (j - last) as f64 / (i - last) as f64;
                x[j] = a + w * (b - a);
            }
            last = i;
        }
    }
    x
}

/// Parses label-first rows separated by tabs, commas, or whitespace. `NaN`
/// cells mark missing steps.
pub fn parse_delimited(text: &str) -> Result<RawSplit> {
    let mut series = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else if line.contains(',') {
            line.split(',').collect()
        } else {
            line.split_whitespace().collect()
        };
        if cells.len() < 2 {
            return Err(Error::Format(format!("line {lineno}: expected a label and at least one value")));
        }
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Format(format!("line {lineno}: {} cells, expected {w}", cells.len())));
            }
            _ => {}
        }
        labels.push(parse_label(cells[0], lineno)?);
        let row = cells[1..]
            .iter()
            .map(|c| {
                let c = c.trim();
                if c.eq_ignore_ascii_case("nan") || c == "?" {
                    Ok(f64::NAN)
                } else {
                    c.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Format(format!("line {lineno}: value {c:?} is not a finite number")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let filled = fill_gaps(&row);
        if filled.len() < 2 {
            return Err(Error::Format(format!("line {lineno}: fewer than 2 observed values")));
        }
        series.push(filled);
    }
    if series.is_empty() {
        return Err(Error::Format("no rows".into()));
    }
    Ok(RawSplit { series, labels })
}

pub fn load_tsv(path: &Path) -> Result<RawSplit> {
    let text = std::fs::read_to_string(path)?;
    parse_delimited(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Sorted original labels; index = contiguous class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub original: Vec<i64>,
}

impl LabelMap {
    pub fn fit(labels: &[i64]) -> Self {
        let mut original = labels.to_vec();
        original.sort_unstable();
        original.dedup();
        Self { original }
    }

    pub fn num_classes(&self) -> usize {
        self.original.len()
    }

    pub fn encode(&self, labels: &[i64]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.original
                    .binary_search(l)
                    .map_err(|_| Error::Format(format!("label {l} does not occur in the training split")))
            })
            .collect()
    }

    /// `original:id` pairs, comma-separated.
    pub fn describe(&self) -> String {
        self.original.iter().enumerate().map(|(i, l)| format!("{l}:{i}")).collect::<Vec<_>>().join(",")
    }

    /// Inverse of [`LabelMap::describe`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut original = Vec::new();
        for (i, pair) in text.split(',').enumerate() {
            let bad = || Error::Format(format!("bad label mapping entry {pair:?}"));
            let (label, id) = pair.trim().split_once(':').ok_or_else(bad)?;
            let label: i64 = label.trim().parse().map_err(|_| bad())?;
            let id: usize = id.trim().parse().map_err(|_| bad())?;
            if id != i || original.last().is_some_and(|&prev| prev >= label) {
                return Err(bad());
            }
            original.push(label);
        }
        Ok(Self { original })
    }
}

/// Linear-interpolation resampling onto `len` evenly spaced points that
/// keeps both endpoints exact.
pub fn resample_linear(x: &[f64], len: usize) -> Vec<f64> {
    if x.len() == len {
        return x.to_vec();
    }
    let n = x.len();
    if len == 1 || n == 1 {
        return vec![x[0]; len];
    }
    (0..len)
        .map(|i| {
            if i == len - 1 {
                return x[n - 1];
            }
            let pos = i as f64 * (n - 1) as f64 / (len - 1) as f64;
            let lo = pos.floor() as usize;
            let w = pos - lo as f64;
            if w == 0.0 {
                x[lo]
            } else {
                x[lo] + w * (x[lo + 1] - x[lo])
            }
        })
        .collect()
}

/// Right-pads shorter series with zeros, resamples longer ones. Returns
/// the aligned values and the observed length.
pub fn align_length(x: &[f64], len: usize) -> (Vec<f64>, usize) {
    if x.len() <= len {
        let mut out = x.to_vec();
        out.resize(len, 0.0);
        (out, x.len())
    } else {
        (resample_linear(x, len), len)
    }
}

/// Aligned labelled series ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub len: usize,
    pub values: Vec<f64>,
    pub valid_len: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn from_series(series: &[Vec<f64>], labels: Vec<usize>, num_classes: usize, len: usize) -> Result<Self> {
        if series.len() != labels.len() || series.is_empty() {
            return Err(Error::Format(format!("{} series with {} labels", series.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {bad} outside {num_classes} classes")));
        }
        let mut values = Vec::with_capacity(series.len() * len);
        let mut valid_len = Vec::with_capacity(series.len());
        for s in series {
            if s.len() < 2 {
                return Err(Error::Format("series with fewer than 2 observations".into()));
            }
            let (v, n) = align_length(s, len);
            values.extend(v);
            valid_len.push(n);
        }
        Ok(Self { len, values, valid_len, labels, num_classes })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    /// Batch of the given instances, in order.
    pub fn batch(&self, idx: &[usize]) -> Result<SeriesBatch> {
        let values: Vec<f64> = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let valid: Vec<usize> = idx.iter().map(|&i| self.valid_len[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        SeriesBatch::from_lengths(idx.len(), self.len, values, valid, Some(labels))
    }

    pub fn all(&self) -> Result<SeriesBatch> {
        self.batch(&(0..self.size()).collect::<Vec<_>>())
    }

    /// Label of the most frequent class (ties to the lowest id).
    pub fn majority_class(&self) -> usize {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map_or(0, |(i, _)| i)
    }
}

/// Train/test pair with a shared label mapping.
#[derive(Clone, Debug)]
pub struct Split {
    pub meta: DatasetMeta,
    pub labels: LabelMap,
    pub train: Dataset,
    pub test: Dataset,
}

/// Builds a split from parsed files. Class ids come from the training
/// split; test labels must be a subset.
pub fn split_from_raw(name: &str, train: RawSplit, test: RawSplit, len: usize) -> Result<Split> {
    let labels = LabelMap::fit(&train.labels);
    if labels.num_classes() < 2 {
        return Err(Error::Format(format!("{name}: training split has fewer than 2 classes")));
    }
    let train_y = labels.encode(&train.labels)?;
    let test_y = labels.encode(&test.labels)?;
    let series_length = train.series.iter().chain(&test.series).map(Vec::len).max().unwrap_or(0);
    let meta = DatasetMeta {
        name: name.to_string(),
        num_classes: labels.num_classes(),
        series_length,
        train_size: train.series.len(),
        test_size: test.series.len(),
        type_tag: None,
    };
    Ok(Split {
        train: Dataset::from_series(&train.series, train_y, meta.num_classes, len)?,
        test: Dataset::from_series(&test.series, test_y, meta.num_classes, len)?,
        meta,
        labels,
    })
}

pub fn load_split(name: &str, train: &Path, test: &Path, len: usize) -> Result<Split> {
    split_from_raw(name, load_tsv(train)?, load_tsv(test)?, len)
}

/// Instance order for one epoch, split into batches (last one may be
/// short). The order depends only on `(seed, epoch)`.
pub fn make_batches(n: usize, batch_size: usize, seed: &RngState, epoch: u64, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        seed.split(epoch).rng().shuffle(&mut order);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Synthetic series families; each is its own class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// `a·sin(2πt/period + φ) + 0.05·noise`, period in [8, 48], a in [0.5, 2].
    Sine,
    /// `x_t = φ x_{t-1} + e_t`, φ in [0.6, 0.95], unit Gaussian innovations.
    Ar1,
    /// ±a square wave, period in [8, 48], with 0.05·noise.
    Square,
    /// Linear slope in ±[0.005, 0.02] per step plus a small sine and noise.
    TrendMix,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [SynthKind::Sine, SynthKind::Ar1, SynthKind::Square, SynthKind::TrendMix];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Self::Sine),
            "ar1" => Ok(Self::Ar1),
            "square" => Ok(Self::Square),
            "trend-mix" => Ok(Self::TrendMix),
            other => Err(Error::Config(format!("unknown synthetic kind {other:?}"))),
        }
    }

    pub fn generate(self, len: usize, rng: &mut Rng) -> Vec<f64> {
        use std::f64::consts::TAU;
        match self {
            Self::Sine => {
                let (period, phase, amp) = (rng.uniform_range(8.0, 48.0), rng.uniform_range(0.0, TAU), rng.uniform_range(0.5, 2.0));
                (0..len).map(|t| amp * (TAU * t as f64 / period + phase).sin() + 0.05 * rng.normal()).collect()
            }
            Self::Ar1 => {
                let phi = rng.uniform_range(0.6, 0.95);
                let mut x = rng.normal() / (1.0 - phi * phi).sqrt();
                (0..len)
                    .map(|_| {
                        x = phi * x + rng.normal();
                        x
                    })
                    .collect()
            }
            Self::Square => {
                let (period, phase, amp) = (rng.uniform_range(8.0, 48.0), rng.uniform_range(0.0, 1.0), rng.uniform_range(0.5, 2.0));
                (0..len)
                    .map(|t| {
                        let frac = (t as f64 / period + phase).fract();
                        (if frac < 0.5 { amp } else { -amp }) + 0.05 * rng.normal()
                    })
                    .collect()
            }
            Self::TrendMix => {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let slope = sign * rng.uniform_range(0.005, 0.02);
                let period = rng.uniform_range(8.0, 48.0);
                (0..len)
                    .map(|t| slope * t as f64 + 0.3 * (TAU * t as f64 / period).sin() + 0.1 * rng.normal())
                    .collect()
            }
        }
    }
}

/// `n` series cycling through `kinds`; the label is the kind's index.
pub fn synth_corpus(kinds: &[SynthKind], n: usize, len: usize, rng: &mut Rng) -> Result<Dataset> {
    if kinds.is_empty() || n == 0 {
        return Err(Error::Config("synthetic corpus needs at least one kind and one series".into()));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % kinds.len()).collect();
    let series: Vec<Vec<f64>> = labels.iter().map(|&l| kinds[l].generate(len, rng)).collect();
    Dataset::from_series(&series, labels, kinds.len().max(2), len)
}

/// Writes a dataset as label-first tab-separated rows (padding as NaN).
pub fn to_tsv(ds: &Dataset) -> String {
    let mut out = String::new();
    for i in 0..ds.size() {
        out.push_str(&ds.labels[i].to_string());
        for (t, v) in ds.row(i).iter().enumerate() {
            if t < ds.valid_len[i] {
                out.push_str(&format!("\t{v}"));
            } else {
                out.push_str("\tNaN");
            }
        }
        out.push('\n');
    }
    out
}

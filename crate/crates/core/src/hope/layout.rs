use crate::error::{shape_err, Result};

/// How a `[B, T, D]` token sequence is walked by the memory scans.
///
/// Tokens are visited in chunks of `chunk_size`. With `summary_slot` set,
/// token 0 is not scanned: it reads the memory as it stands after the whole
/// sequence (this is how the CLS slot sees the series), and never writes.
/// Invalid tokens are read-only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanLayout {
    pub batch: usize,
    pub tokens: usize,
    pub chunk_size: usize,
    pub summary_slot: bool,
    valid: Vec<bool>,
}

impl ScanLayout {
    pub fn new(batch: usize, tokens: usize, chunk_size: usize, summary_slot: bool, valid: Option<Vec<bool>>) -> Result<Self> {
        if chunk_size == 0 || tokens == 0 || (summary_slot && tokens < 2) {
            return Err(shape_err!(
                "scan layout: {tokens} tokens, chunk size {chunk_size}, summary slot {summary_slot}"
            ));
        }
        let valid = valid.unwrap_or_else(|| vec![true; batch * tokens]);
        if valid.len() != batch * tokens {
            return Err(shape_err!("{} validity flags for {batch}x{tokens} tokens", valid.len()));
        }
        Ok(Self { batch, tokens, chunk_size, summary_slot, valid })
    }

    /// First scanned token.
    pub fn scan_start(&self) -> usize {
        usize::from(self.summary_slot)
    }

    pub fn scanned(&self) -> usize {
        self.tokens - self.scan_start()
    }

    pub fn n_chunks(&self) -> usize {
        self.scanned().div_ceil(self.chunk_size)
    }

    /// Token index range of chunk `c`.
    pub fn chunk_tokens(&self, c: usize) -> std::ops::Range<usize> {
        let lo = self.scan_start() + c * self.chunk_size;
        lo..(lo + self.chunk_size).min(self.tokens)
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        self.valid[b * self.tokens + t]
    }

    /// Row of the chunk-state table each token reads: the state before its
    /// own chunk, or the final state (`n_chunks`) for the summary slot.
    pub fn read_index(&self) -> Vec<usize> {
        let start = self.scan_start();
        (0..self.tokens)
            .map(|t| if t < start { self.n_chunks() } else { (t - start) / self.chunk_size })
            .collect()
    }
}

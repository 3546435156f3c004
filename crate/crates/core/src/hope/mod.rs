//! The encoder: stacked blocks pairing a fast associative memory with a
//! multi-rate memory hierarchy and a feed-forward sublayer. Every memory is
//! updated chunk by chunk, so cost grows linearly with the token count.

mod block;
pub mod checkpoint;
mod cms;
mod layout;
mod titans;

pub use block::{encode, hope_block, BlockState, EncoderOutput, FeedForward, HopeBlockParams, LayerNormParams, LN_EPS};
pub use cms::{check_decays, chunk_mean, cms_forward, default_decays, ema_scan, CmsLevel, CmsParams, CmsState};
pub use layout::ScanLayout;
pub use titans::{titans_forward, titans_scan, RateOverrides, TitansParams, TitansState, KEY_NORM_EPS};

#[cfg(test)]
mod tests;

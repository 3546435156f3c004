//! Batch commands over the memts library: pretraining, fine-tuning,
//! evaluation, feature extraction, gradient checks and the length
//! benchmark. Every command writes a run manifest next to its artifacts.

pub mod bench;
pub mod commands;
pub mod gradcheck;
pub mod manifest;

pub use commands::*;
pub use manifest::RunManifest;

use memts::Error;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Format(_) | Error::Io(_) => EXIT_DATA,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::Shape(_) | Error::Contract(_) => EXIT_OTHER,
    }
}

/// The error on one line, for standard error.
pub fn diagnostic(e: &Error) -> String {
    let text = e.to_string();
    format!("error: {}", text.split_whitespace().collect::<Vec<_>>().join(" "))
}

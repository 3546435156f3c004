pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod preprocess;
pub mod hope;
pub mod statfeatures;
pub mod heads_losses;
pub mod data;
pub mod model;
pub mod trainer;

//! Energy-guided diffusion sampling with contrastive energy prediction.

pub mod bench2d;
pub mod energy;
pub mod error;
pub mod fdcheck;
pub mod guidance;
pub mod io;
pub mod netcore;
pub mod oracle;
pub mod prior;
pub mod qgpo;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};

//! Semi-supervised segmentation with indirect double-sided adversarial
//! domain adaptation.

pub mod batch;
pub mod benchmark;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod state;
pub mod metrics;
pub mod training;

pub use batch::{CenterId, DiscOutput, FeatureBatch, ImageBatch, MaskBatch, ProbabilityBatch};
pub use error::{Error, Result};
pub use networks::{d_forward, fg_forward, rm_forward, sm_forward, ArchConfig, Model, Net};
pub use state::{init_model, ModelState};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

//! Unified item tokenization: a shared autoencoder, a mixture of
//! domain-specific residual-quantisation experts plus a shared expert, and an
//! HSIC-based calibration loss that balances information across domains.

pub mod autoencoder;
pub mod config;
pub mod data;
pub mod error;
pub mod hsic;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numeric;
pub mod rq;
pub mod train;

pub use config::{BaselineKind, TrainConfig};
pub use data::{Dataset, ItemRecord, SyntheticConfig};
pub use error::{Error, Result};
pub use metrics::{evaluate, theorem_report, zero_shot_eval, EvalReport, TheoremReport};
pub use model::{ModelState, TokenTable};
pub use train::{total_loss, train, train_baseline_single_codebook, TrainReport};

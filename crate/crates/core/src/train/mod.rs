//! Losses, the Adam optimizer and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod fit;
pub mod losses;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use fit::{batch_loss, fit, sample_pixels, BatchStats, DivergenceGuard, EpochLog, CHECKPOINT_FILE, METRICS_FILE};
pub use losses::{bce_from_raw, flame_point, l1_pixel, LossComponents, LossWeights};

//! Image metrics, rendering of trained checkpoints and gradient checks.

pub mod gradcheck;
pub mod metrics;
pub mod predict;

pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport, Suite, SuiteSummary};
pub use metrics::{compute_metrics, mask_iou, EvalImage, ImageMetrics, Region};
pub use predict::{evaluate, render_params, EvalReport, FrameMetrics};

//! Ground-truth frames ray traced from the posed template mesh, and the
//! on-disk dataset layout shared with training and evaluation.

pub mod dataset;
pub mod frame;
pub mod raytrace;

pub use dataset::{
    generate_dataset, generate_splits, sample_schedule, Dataset, FrameEntry, FrameSpec, GenerateOptions, Manifest,
    ScheduleRanges, SplitSizes, TEMPLATE_FILE,
};
pub use frame::{render_gt_frame, trace_gt_frame, FrameRecord, GtTrace, Light};
pub use raytrace::{brute_force_intersect, ray_triangle_intersect, Bvh, TriangleHit};

//! Cameras, non-rigid ray marching, implicit surface gradients and image
//! output.

pub mod camera;
pub mod grad;
pub mod image;
pub mod march;
pub mod scene;

pub use camera::{Camera, Orbit, DEFAULT_FAR, DEFAULT_FOV_Y, DEFAULT_NEAR};
pub use grad::{condition_number, MaskPixel, SurfacePixel, MAX_CONDITION};
pub use image::{decode_png, render_image, OutputKind, RenderOutput};
pub use march::{
    complement_basis, deformed_normal, march_ray, shade_pixel, surface_constraints, MarchConfig, MaskPoint,
    MaskPointRule, SurfaceHit,
};
pub use scene::{AnalyticSphere, LatentChoice, NeuralScene, Query, Scene};

//! Discrete mesh-based morphable head model: the deformation prior, the
//! pseudo ground truth for the deformation field, and the geometry source for
//! synthetic data.

mod grid;
pub mod kinematics;
mod template;
pub mod toy;

pub use grid::VertexGrid;
pub use kinematics::{
    axis_angle_to_matrix, bone_transforms, canonical_relative_transforms, lbs_apply, pose_feature, Rigid,
};
pub use template::{
    canonical_pose, contract_row, expression_offset, pose_offset, AnimationParams, MorphableTemplate,
    VertexAttributes, CANONICAL_JAW_PITCH, JAW_JOINT, JOINT_NAMES, LATENT_DIM, NUM_EXPR, NUM_JOINTS,
};
pub use toy::{generate_toy_head, ToyHeadConfig};

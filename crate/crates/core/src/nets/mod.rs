//! Canonical implicit fields: occupancy (geometry), deformation
//! (blendshapes, correctives, skinning weights) and texture.

pub mod encoding;
pub mod fields;
pub mod mlp;

pub use encoding::{encoded_width, positional_encoding};
pub use fields::{
    softmax, softmax_backward, Block, DeformationOutput, FieldConfig, FieldGrads, FieldNetworks, GeometryTrace, BLOCKS,
};
pub use mlp::{logistic, Activation, Mlp, MlpTrace};

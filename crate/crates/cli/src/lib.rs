//! Command-line interface and HTTP render service for trained avatars.

pub mod avatar;
pub mod commands;
pub mod service;

pub use avatar::{Avatar, FieldError, RenderRequest, MAX_SIZE};
pub use commands::{run, Cli, Failure};

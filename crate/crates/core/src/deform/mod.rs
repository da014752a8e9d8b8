//! Forward skinning warp from canonical to deformed space, its exact
//! Jacobian and reverse pass, and the quasi-Newton correspondence search
//! that inverts it.

mod search;
mod warp;

pub use search::{select_candidate, BroydenOutcome, Candidate, CorrespondenceResult};
pub use warp::{warp_from_head, warp_head_backward, Aggregation, SearchConfig, Warp, WarpContext, WarpTrace};

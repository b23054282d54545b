//! Dense helpers, feedforward networks with reverse mode, and Adam.

mod adam;
pub mod linalg;
mod net;

pub use adam::{AdamConfig, AdamState};
pub use net::{Activation, FeedNet, Tape};

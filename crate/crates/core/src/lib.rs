//! Wireless perception and pricing toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`channel`] builds scenes and synthesizes multi-antenna CSI.
//! * [`spectral`] estimates path count, angle of arrival and time of flight.
//! * [`smsp`] localizes the user, scores links and builds feature matrices.
//! * [`skeleton`] encodes feature matrices and predicts pose keypoints.
//! * [`incentive`] holds the pricing game and its exhaustive oracle.
//! * [`dpolicy`] is the conditional diffusion pricing generator.

pub mod channel;
pub mod cmatrix;
pub mod dpolicy;
pub mod dump;
pub mod error;
pub mod incentive;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod skeleton;
pub mod smsp;
pub mod spectral;

pub use error::{Error, Result};

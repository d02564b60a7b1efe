//! Numerical laboratory for uniformly rectifiable sets and degenerate elliptic
//! operators with boundaries of high codimension.

pub mod carleson;
pub mod distances;
pub mod elliptic;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod identities;
pub mod kdtree;
pub mod neldermead;
pub mod quad;
pub mod transport;
pub mod treecode;
pub mod wasserstein;
pub mod whitney;

pub use error::{Error, Result};
pub use geometry::{Ball, DiscreteMeasure};

//! Face reconstruction from similarity scores alone.
//!
//! An attacker who can only ask "how similar is this image to identity X?"
//! searches a learned eigenface basis with best-of-batch random ascent.
//!
//! - [`image`]: rasters, mirror/symmetrize operators, PGM/PPM codec
//! - [`basis`]: linear autoencoder training, eigenface basis, PCA reference
//! - [`oracle`]: the scoring boundary, synthetic embedders, query budgets
//! - [`wire`]: HTTP/JSON scoring service and client
//! - [`recovery`]: the ascent and the multi-start policy
//! - [`bench`]: attacked-vs-critic evaluation, ablation grid, verification

pub mod basis;
pub mod bench;
pub mod image;
pub mod oracle;
pub mod recovery;
pub mod wire;

pub use basis::{EigenBasis, LossTerms, TrainConfig};
pub use image::{Geometry, Image};
pub use oracle::SimilarityOracle;
pub use recovery::{AcceptMode, RecoveryConfig, RecoveryResult};

//! Multi-view contrastive spatial embeddings.
//!
//! A coordinate encoder (real spherical harmonics feeding a sinusoidal
//! network) is trained to agree with a fused encoding of per-location views:
//! hex-grid amenity counts and precomputed satellite feature vectors. The
//! trained coordinate encoder then produces embeddings usable as regression
//! features, with permutation importance and partial dependence tooling for
//! interpretation.

pub mod autodiff;
pub mod contrastive;
pub mod dataio;
pub mod encoders;
pub mod eval;
pub mod geogrid;

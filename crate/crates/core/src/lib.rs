//! Multi-interest retrieval with quantized interest codes.
//!
//! Item embeddings are residual-quantized into a Cartesian interest
//! dictionary ([`idmm`]); a user-conditioned transformer predicts the next
//! interest code ([`mipdm`]); a fusion dual-tower scores interest, user and
//! item together ([`mirm`]). [`trainer`] runs the three-stage streaming
//! schedule, [`serving`] keeps the per-user interest cache and answers
//! retrieval requests, and [`evaluation`] holds the metrics and verifiers.

pub mod baseline;
pub mod checkpoint;
pub mod code;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod idmm;
pub mod mipdm;
pub mod mirm;
pub mod model;
pub mod nn;
pub mod rng;
pub mod serving;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
pub use model::GemiRec;

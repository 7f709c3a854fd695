// SPDX-License-Identifier: MIT OR Apache-2.0

//! Facet-level persona steering.
//!
//! The crate learns one control vector per Big Five facet inside the latent
//! space of a sparse autoencoder, decodes it back into the residual stream,
//! and injects it with a tunable strength:
//!
//! ```text
//! z   = ReLU(W_enc (h - b_dec) + b_enc)            sparse code
//! v0  = (mu_pos - mu_neg) * m                      masked centroid init
//! L   = L_ce + beta * L_dist + lambda * |v * m|^2  margin contrastive objective
//! h'  = h + alpha * W_dec v                        residual injection
//! ```
//!
//! Modules follow the data flow: [`corpus`] -> [`activations`] -> [`sae`] ->
//! [`featsel`] -> [`cvtrain`] -> [`steering`] / [`routing`] -> [`eval`].

// Range checks read `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod client;
pub mod corpus;
pub mod cvtrain;
pub mod error;
pub mod eval;
pub mod featsel;
pub mod linalg;
pub mod routing;
pub mod sae;
pub mod steering;
pub mod util;

pub use activations::{ActivationRecord, ActivationSet, PlantedGroundTruth, SynthConfig};
pub use corpus::{Dimension, FacetCorpus, FacetId, Polarity};
pub use cvtrain::{Centroids, ControlVector, LossBreakdown, LossConfig, OptConfig};
pub use error::{Error, Result};
pub use eval::{JudgedScore, MetricsReport, Question, QuestionSet};
pub use featsel::FeatureMask;
pub use routing::{FacetScores, RoutingPolicy};
pub use sae::{SaeConfig, SaeModel};
pub use steering::{InjectionEntry, InjectionPlan, ToyModel};

//! Entity resolution for noisy categorical databases.
//!
//! Each record is treated as a noisy copy of one of `K` latent individuals.
//! Every individual carries, per field, a Dirichlet-distributed categorical
//! noise distribution over that field's attribute values. The posterior over
//! record-to-individual assignments is approximated with mean-field
//! coordinate-ascent variational inference ([`engine`]).
//!
//! Supporting modules:
//!
//! - [`corpus`]: CSV loading and attribute dictionaries
//! - [`numerics`]: digamma, trigamma, log-sum-exp
//! - [`genmodel`]: seeded synthetic data with ground truth
//! - [`oracle`]: exact posterior by enumeration for tiny instances
//! - [`eval`]: MAP linkage and pairwise precision / recall / F1
//!
//! Runnable walkthroughs live under `examples/`.

pub mod cli;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod eval;
pub mod genmodel;
pub mod numerics;
pub mod oracle;

pub use corpus::{load_databases, Corpus, Schema, SchemaPolicy};
pub use engine::{fit, FitOptions, FitReport, HyperParams, VariationalState};
pub use error::{Error, Result};
pub use eval::{map_linkage, pairwise_metrics, Linkage, LinkageScore};
pub use genmodel::{sample_dataset, GenConfig, GroundTruth};
pub use oracle::{exact_cocluster, exact_log_evidence, ExactPosterior};

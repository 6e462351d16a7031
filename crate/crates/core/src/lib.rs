//! Multipole semantic attention.
//!
//! Queries and keys are clustered separately per head. Each query-cluster
//! centroid attends exactly to every key cluster, producing tilted key and
//! value centroids plus a log-normaliser per (query cluster, key cluster)
//! pair. Individual queries then refine those summaries with their residual
//! (query minus centroid), and a first-order dipole term built from the
//! per-cluster value/key covariance corrects the result.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors, stable softmax / logsumexp, seeded RNG.
//! * [`attention`]: the exact softmax attention oracle and the logsumexp
//!   merge of attention partials.
//! * [`clustering`]: capped K-means and the ragged cluster layout.
//! * [`multipole`]: the acausal approximation (initial stage, dipole
//!   aggregation, final stage).
//! * [`causal`]: the binary-tree block plan for causal attention.
//! * [`harness`]: workloads, the `MUSEQKV1` file format, experiment drivers
//!   and reports.

pub mod attention;
pub mod causal;
pub mod clustering;
pub mod error;
pub mod harness;
pub mod multipole;
pub mod numerics;

pub use attention::{attend, attend_causal, attend_sliding, merge_partials, AttentionResult, BiasVector};
pub use causal::{build_plan, muse_causal, muse_causal_with, BlockMode, CausalPlan, CausalStats};
pub use clustering::{cap_assign, decompose, inertia, init_centroids, kmeans, Clustering, ResidualDecomposition};
pub use error::{MuseError, Result};
pub use multipole::{
    aggregate_dipoles, cluster_heads, final_stage, muse_acausal, muse_acausal_frozen, rel_sq_error, stage1, Ablation, AggregatedDipoles,
    ClusterSummaries, HeadClusterings, MuseConfig,
};
pub use numerics::{DType, Rng, Scalar, Shape4, Tensor4};

//! Scoring and filtering independently trained ReLU policy networks by their
//! certified pairwise output disagreement over an input domain.

pub mod attacks;
pub mod bounds;
pub mod distance;
pub mod domain;
pub mod envs;
pub mod network;
pub mod selection;
pub mod trainer;
pub mod verifier;

pub use distance::{Category, DistanceSpec, Sign};
pub use domain::{InputBox, Interval};
pub use network::{Activation, Layer, Network, NetworkError};
pub use verifier::{decide, maximize, BabConfig, MaxBracket, Objective, Query, Verdict, VerifyError};
pub use selection::{
    disagreement_scores, filter_step, pdt, pdt_table, select, uncertainty_rank, Criterion, DecisionOracle,
    PdtTable, SelectionConfig, SelectionTrace, VerifierOracle,
};

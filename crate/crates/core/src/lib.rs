//! Compatible stationary representations.
//!
//! * [`simplex`]: the d-Simplex fixed classifier and its class-assignment
//!   bookkeeping.
//! * [`hyperball`]: nearest-neighbour angles, cap probabilities and
//!   Monte-Carlo expected distances between hyperballs.
//! * [`trainer`]: simplex cross-entropy and contrastive losses, a small dense
//!   network, task sequences with replay and model replacement.
//! * [`evaluator`]: 1:N retrieval, compatibility matrices, AC and AA_t.
//! * [`harness`]: end-to-end experiments, ablations and run manifests.

pub mod error;
pub mod evaluator;
pub mod features;
pub mod harness;
pub mod hyperball;
pub mod linalg;
pub mod simplex;
pub mod trainer;

pub use error::{Error, Result};
pub use evaluator::{
    build_report, def1_check, retrieval_accuracy, AcValue, CompatibilityMatrix,
    CompatibilityReport, Def1Stats, Metric, ReportOptions,
};
pub use features::FeatureSet;
pub use hyperball::{
    cap_probability, expected_nn_angle, mc_expected_distance, sample_in_ball, theorem_experiment,
    DistanceEstimate, HyperballSpec, TheoremMode, TheoremParams,
};
pub use simplex::{ClassAssignment, Phase, SimplexClassifier};

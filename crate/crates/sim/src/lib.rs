//! Monte Carlo size studies for cluster-robust t-tests, and a cluster
//! resampling protocol for real data.

// `!(x > 0.0)` is used on purpose so NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dgp;
pub mod error;
pub mod layout;
pub mod resample;
pub mod study;

pub use config::{Coefficients, ErrorDesign, SimulationConfig, StudyMethod, Treated};
pub use dgp::{draw_errors, generate_design, SimDesign};
pub use error::{Result, SimError};
pub use layout::{cluster_sizes, Balance};
pub use resample::{resample_clusters, ResampleScheme};
pub use study::{run_study, run_study_with_threads, SizeCell, SizeStudyResult};

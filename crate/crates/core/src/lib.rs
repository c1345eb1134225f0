//! Unbiased cluster-robust variance estimation for OLS.
//!
//! The math is generic over the scalar type (`f32` or `f64`); the `*64`
//! aliases at the crate root fix it to `f64`.
//!
//! ```
//! use crve::{fit_ols, uv1, ClusteredDataset, Clustering};
//! use nalgebra::{DMatrix, DVector};
//!
//! let data = ClusteredDataset::new(
//!     DVector::<f64>::from_column_slice(&[1.0, 1.0, -1.0, -1.0]),
//!     DMatrix::from_element(4, 1, 1.0),
//!     Clustering::from_sizes(&[2, 2]).unwrap(),
//! )
//! .unwrap();
//! let fit = fit_ols(&data).unwrap();
//! let v = uv1(&fit).unwrap();
//! assert!((v.v[(0, 0)] - 1.0).abs() < 1e-12);
//! ```

// `!(x > 0.0)` is used on purpose so NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dof;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod panel;
pub mod scalar;

pub use dof::{
    build_a_blocks, dof_rv0, dof_rv1, estimate_re_moments, ABlocks, BlockKind, DofCalculator, DofEstimate, DofTraces,
    IkDof, MomentDesign, ReMoments, Reference,
};
pub use error::{Error, Result};
pub use estimators::{
    engine, estimate, lz1_stata, lz2_hc2, plugin_cluster_re, plugin_re, plugin_unrestricted, uv1, uv2, uv3,
    Diagnostics, Method, PsdRepair, ReParams, VarianceEngine, VarianceEstimate,
};
pub use inference::{student_t_cdf, t_test, TestResult};
pub use model::{
    fit_ols, scalar_stats, ClusteredDataset, Clustering, OlsFit, RegressionDesign, Residuals, ScalarStats,
};
pub use panel::{fit_panel, panel_plugin, panel_unbiased, PanelDataset, PanelEstimate, PanelFit};
pub use scalar::Real;

pub type ClusteredDataset64 = ClusteredDataset<f64>;
pub type RegressionDesign64 = RegressionDesign<f64>;
pub type OlsFit64 = OlsFit<f64>;
pub type Residuals64 = Residuals<f64>;
pub type VarianceEstimate64 = VarianceEstimate<f64>;
pub type DofEstimate64 = DofEstimate<f64>;
pub type PanelDataset64 = PanelDataset<f64>;

use thiserror::Error;

/// Errors raised by the estimators, degrees-of-freedom and panel routines.
///
/// Most variants signal that an estimator does not exist for the given
/// regressors and clustering (a structural singularity), which callers in
/// Monte Carlo loops tally rather than propagate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need more observations than regressors (n = {n}, k = {k})")]
    TooFewObservations { n: usize, k: usize },
    #[error("cluster {0} has no observations")]
    EmptyCluster(usize),
    #[error("regressor matrix is rank deficient (smallest Gram eigenvalue ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("UV1 moment matrix Psi is singular")]
    SingularPsi,
    #[error("UV2 moment matrix Phi is singular")]
    SingularPhi,
    #[error("UV3 cluster matrix S_c is singular for cluster {0}")]
    SingularSc(usize),
    #[error("UV3 outer k^2 x k^2 system is singular")]
    SingularOuter,
    #[error("need at least 2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("I - P_cc is degenerate for cluster {cluster} (eigenvalue {eigenvalue:e})")]
    DegenerateLeverage { cluster: usize, eigenvalue: f64 },
    #[error("every cluster is a singleton; within-cluster variance is not identified")]
    AllSingletons,
    #[error("cluster {0} is a singleton; cluster-specific parameters are not identified")]
    SingletonCluster(usize),
    #[error("trace tr(AMAM) is not positive")]
    NonpositiveTrace,
    #[error("fourth-moment system is singular")]
    SingularMomentSystem,
    #[error("random-effects d.f. denominator is not positive")]
    NonpositiveDenominator,
    #[error("degrees of freedom must be positive, got {0}")]
    InvalidNu(f64),
    #[error("estimated variance of coefficient {index} is not positive ({value:e})")]
    NonpositiveVariance { index: usize, value: f64 },
    #[error("panel must have N >= {min} units, found {found}")]
    TooFewUnits { min: usize, found: usize },
    #[error("panel T^2 x T^2 system is singular")]
    SingularPanelSystem,
    #[error("unbalanced panel: unit {unit} has {found} waves, expected {expected}")]
    UnbalancedPanel { unit: usize, found: usize, expected: usize },
    #[error("dense reference path limited to n <= {cap}, got n = {n}")]
    TooLargeForOracle { n: usize, cap: usize },
    #[error("dense core matrix D'(M x M)D is singular")]
    SingularCore,
    #[error("Woodbury matrix A is singular")]
    SingularA,
    #[error("coefficient index {index} out of range (k = {k})")]
    CoefficientIndex { index: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

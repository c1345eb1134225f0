//! Two-sided t-tests with fractional degrees of freedom.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dof::{DofEstimate, Reference};
use crate::error::{Error, Result};
use crate::estimators::{Method, VarianceEstimate};
use crate::model::OlsFit;
use crate::scalar::{to_f64, Real};

/// CDF of Student's t with `nu > 0` degrees of freedom (not necessarily integer).
pub fn student_t_cdf(x: f64, nu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::InvalidNu(nu));
    }
    if nu.is_infinite() {
        let n = statrs::distribution::Normal::standard();
        return Ok(n.cdf(x));
    }
    let t = StudentsT::new(0.0, 1.0, nu).map_err(|_| Error::InvalidNu(nu))?;
    Ok(t.cdf(x))
}

/// Two-sided p-value `2 (1 - F(|t|))`.
pub fn two_sided_p(t: f64, nu: f64) -> Result<f64> {
    Ok((2.0 * student_t_cdf(-t.abs(), nu)?).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub ell: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub dof: f64,
    pub p_value: f64,
    /// `(level, p < level)` for each requested level.
    pub reject_at: Vec<(f64, bool)>,
    pub variance_method: Method,
    pub dof_reference: Reference,
}

impl TestResult {
    pub fn rejects(&self, level: f64) -> Option<bool> {
        self.reject_at.iter().find(|(l, _)| *l == level).map(|&(_, r)| r)
    }
}

/// Tests `beta_l = null` with `V[l,l]` and `d` d.f. Rejection is `p < level`.
pub fn t_test<T: Real>(
    fit: &OlsFit<T>,
    v: &VarianceEstimate<T>,
    d: &DofEstimate<T>,
    ell: usize,
    null_value: f64,
    levels: &[f64],
) -> Result<TestResult> {
    let k = fit.n_regressors();
    if ell >= k {
        return Err(Error::CoefficientIndex { index: ell, k });
    }
    t_test_raw(
        to_f64(fit.beta[ell]),
        to_f64(v.variance(ell)),
        to_f64(d.d),
        ell,
        null_value,
        levels,
        v.method,
        d.reference,
    )
}

/// [`t_test`] on plain numbers.
#[allow(clippy::too_many_arguments)]
pub fn t_test_raw(
    estimate: f64,
    variance: f64,
    dof: f64,
    ell: usize,
    null_value: f64,
    levels: &[f64],
    variance_method: Method,
    dof_reference: Reference,
) -> Result<TestResult> {
    if !(variance > 0.0) {
        return Err(Error::NonpositiveVariance {
            index: ell,
            value: variance,
        });
    }
    let std_error = variance.sqrt();
    let t_stat = (estimate - null_value) / std_error;
    let p_value = two_sided_p(t_stat, dof)?;
    Ok(TestResult {
        ell,
        estimate,
        std_error,
        t_stat,
        dof,
        p_value,
        reject_at: levels.iter().map(|&l| (l, p_value < l)).collect(),
        variance_method,
        dof_reference,
    })
}

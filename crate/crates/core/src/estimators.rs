//! Cluster-robust covariance estimators for the OLS coefficients.
//!
//! The three unbiased estimators (`UV1`, `UV2`, `UV3`) are evaluated through
//! cluster aggregates only; nothing of order `n^2` is ever formed. Each
//! estimator is split into a residual-independent engine (built once per
//! design) and a cheap per-residual evaluation, so Monte Carlo loops on a
//! fixed design only pay for the latter.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    asymmetry, checked_inverse, inverse_sqrt_spd, max_abs, min_eigenvalue, psd_truncate, unvec, vec_of,
};
use crate::model::{OlsFit, RegressionDesign, Residuals};
use crate::scalar::{count, lit, to_f64, Real};

/// Eigenvalue floor for `I_c - P_cc` in the HC2 correction.
pub const HC2_EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Unbiased under homogeneous random effects.
    Uv1,
    /// Unbiased under cluster-specific random effects.
    Uv2,
    /// Unbiased under unrestricted within-cluster covariance.
    Uv3,
    /// Liang-Zeger sandwich with the Stata small-sample factor.
    Lz1,
    /// Liang-Zeger sandwich with the HC2 leverage correction.
    Lz2,
    PluginRe,
    PluginClusterRe,
    PluginUnrestricted,
    /// Unbiased panel estimator under `I_N kron Lambda`.
    PanelUnbiased,
    /// Plug-in panel estimator.
    PanelPlugin,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Uv1,
        Method::Uv2,
        Method::Uv3,
        Method::Lz1,
        Method::Lz2,
        Method::PluginRe,
        Method::PluginClusterRe,
        Method::PluginUnrestricted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Uv1 => "UV1",
            Method::Uv2 => "UV2",
            Method::Uv3 => "UV3",
            Method::Lz1 => "LZ1",
            Method::Lz2 => "LZ2",
            Method::PluginRe => "PLUGIN_RE",
            Method::PluginClusterRe => "PLUGIN_CRE",
            Method::PluginUnrestricted => "PLUGIN_UNR",
            Method::PanelUnbiased => "PANEL_UV",
            Method::PanelPlugin => "PANEL_PLUGIN",
        }
    }

    /// Whether the estimator is one of the unbiased ones with A-blocks.
    pub fn is_unbiased(self) -> bool {
        matches!(self, Method::Uv1 | Method::Uv2 | Method::Uv3)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        let m = match norm.as_str() {
            "UV1" => Method::Uv1,
            "UV2" => Method::Uv2,
            "UV3" => Method::Uv3,
            "LZ1" | "STATA" => Method::Lz1,
            "LZ2" | "HC2" | "CR2" => Method::Lz2,
            "PLUGIN_RE" => Method::PluginRe,
            "PLUGIN_CRE" | "PLUGIN_CLUSTER_RE" => Method::PluginClusterRe,
            "PLUGIN_UNR" | "PLUGIN_UNRESTRICTED" | "LZ" => Method::PluginUnrestricted,
            "PANEL_UV" => Method::PanelUnbiased,
            "PANEL_PLUGIN" => Method::PanelPlugin,
            _ => return Err(format!("unknown variance method `{s}`")),
        };
        Ok(m)
    }
}

/// Optional positive-semidefinite repair of an estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsdRepair {
    #[default]
    Off,
    /// Clip negative eigenvalues at zero. This gives up unbiasedness.
    Truncate,
}

impl FromStr for PsdRepair {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" => Ok(PsdRepair::Off),
            "truncate" => Ok(PsdRepair::Truncate),
            _ => Err(format!("unknown PSD repair `{s}` (expected off or truncate)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics<T: Real> {
    /// `max |V - V'|`
    pub symmetry_residual: T,
    pub min_eigenvalue: T,
    pub negative_diagonal: bool,
    pub psd_repaired: bool,
}

/// A `k x k` covariance estimate with its method tag and diagnostics.
///
/// Diagnostics always describe the raw estimate, before any repair.
#[derive(Debug, Clone)]
pub struct VarianceEstimate<T: Real> {
    pub v: DMatrix<T>,
    pub method: Method,
    pub diagnostics: Diagnostics<T>,
}

impl<T: Real> VarianceEstimate<T> {
    pub fn new(v: DMatrix<T>, method: Method) -> Self {
        let diagnostics = Diagnostics {
            symmetry_residual: asymmetry(&v),
            min_eigenvalue: min_eigenvalue(&v),
            negative_diagonal: v.diagonal().iter().any(|&d| d < T::zero()),
            psd_repaired: false,
        };
        Self { v, method, diagnostics }
    }

    pub fn repaired(mut self, repair: PsdRepair) -> Self {
        if repair == PsdRepair::Truncate {
            self.v = psd_truncate(&self.v);
            self.diagnostics.psd_repaired = true;
        }
        self
    }

    /// `V[l, l]`
    pub fn variance(&self, ell: usize) -> T {
        self.v[(ell, ell)]
    }

    /// Relative asymmetry `max|V - V'| / max|V|`.
    pub fn relative_asymmetry(&self) -> T {
        let scale = max_abs(&self.v);
        if scale == T::zero() {
            T::zero()
        } else {
            self.diagnostics.symmetry_residual / scale
        }
    }
}

/// Method-of-moments random-effects parameters. May be negative.
#[derive(Debug, Clone, PartialEq)]
pub enum ReParams<T: Real> {
    Homogeneous { sigma2: T, tau2: T },
    ClusterSpecific { sigma2: Vec<T>, tau2: Vec<T> },
}

/// Residual-independent precomputation for one estimator on one design.
pub trait VarianceEngine<T: Real>: Send + Sync {
    fn method(&self) -> Method;
    fn design(&self) -> &Arc<RegressionDesign<T>>;
    /// Evaluates the estimator on residual aggregates from [`Self::design`].
    fn estimate(&self, residuals: &Residuals<T>) -> VarianceEstimate<T>;
}

/// Builds the engine for `method`, or the reason it does not exist.
pub fn engine<T: Real>(design: &Arc<RegressionDesign<T>>, method: Method) -> Result<Box<dyn VarianceEngine<T>>> {
    Ok(match method {
        Method::Uv1 => Box::new(Uv1Engine::new(design)?),
        Method::Uv2 => Box::new(Uv2Engine::new(design)?),
        Method::Uv3 => Box::new(Uv3Engine::new(design)?),
        Method::Lz1 => Box::new(SandwichEngine::stata(design)?),
        Method::Lz2 => Box::new(Hc2Engine::new(design)?),
        Method::PluginRe => Box::new(PluginReEngine::new(design)?),
        Method::PluginClusterRe => Box::new(PluginClusterReEngine::new(design)?),
        Method::PluginUnrestricted => Box::new(SandwichEngine::plain(design)),
        Method::PanelUnbiased | Method::PanelPlugin => {
            return Err(Error::Dimension(format!("{method} needs a panel fit")))
        }
    })
}

/// `(X'X)^{-1} meat (X'X)^{-1}`
fn sandwich<T: Real>(design: &RegressionDesign<T>, meat: &DMatrix<T>) -> DMatrix<T> {
    let h = design.gram_inv();
    h * meat * h
}

/// `meat = sum_c w1_c X_c'X_c + w2_c x~_c x~_c'`
fn re_meat<T: Real>(design: &RegressionDesign<T>, w1: &[T], w2: &[T]) -> DMatrix<T> {
    let k = design.n_regressors();
    let mut meat = DMatrix::zeros(k, k);
    for c in 0..design.n_clusters() {
        meat += design.cluster_gram(c) * w1[c];
        let xt = design.xtil_c(c);
        meat += &xt * xt.transpose() * w2[c];
    }
    meat
}

// ---------------------------------------------------------------------------
// UV1

/// Homogeneous random effects: `Sigma = s2 I + t2 BB'`.
#[derive(Debug, Clone)]
pub struct Uv1Engine<T: Real> {
    design: Arc<RegressionDesign<T>>,
    psi: DMatrix<T>,
    psi_inv: DMatrix<T>,
}

impl<T: Real> Uv1Engine<T> {
    pub fn new(design: &Arc<RegressionDesign<T>>) -> Result<Self> {
        let st = design.stats();
        let n: T = count(design.n_obs());
        let k: T = count(design.n_regressors());
        let two: T = lit(2.0);
        let psi = DMatrix::from_row_slice(
            2,
            2,
            &[
                n - k,
                n - st.s,
                n - st.s,
                design.sum_sq_sizes() - two * st.s_breve + st.s_dot,
            ],
        );
        let psi_inv = checked_inverse(&psi).ok_or(Error::SingularPsi)?;
        Ok(Self {
            design: Arc::clone(design),
            psi,
            psi_inv,
        })
    }

    pub fn psi(&self) -> &DMatrix<T> {
        &self.psi
    }

    pub fn psi_inv(&self) -> &DMatrix<T> {
        &self.psi_inv
    }

    /// Unbiased `(sigma^2, tau^2)`: `Psi^{-1} (e'e, e~'e~)`.
    pub fn weights(&self, r: &Residuals<T>) -> (T, T) {
        let p = &self.psi_inv;
        (
            p[(0, 0)] * r.rss + p[(0, 1)] * r.rss_cluster,
            p[(1, 0)] * r.rss + p[(1, 1)] * r.rss_cluster,
        )
    }
}

impl<T: Real> VarianceEngine<T> for Uv1Engine<T> {
    fn method(&self) -> Method {
        Method::Uv1
    }

    fn design(&self) -> &Arc<RegressionDesign<T>> {
        &self.design
    }

    fn estimate(&self, r: &Residuals<T>) -> VarianceEstimate<T> {
        let (w1, w2) = self.weights(r);
        let v = self.design.gram_inv() * w1 + self.design.between() * w2;
        VarianceEstimate::new(v, Method::Uv1)
    }
}

// ---------------------------------------------------------------------------
// UV2

/// Cluster-specific random effects: `Sigma_c = s2_c I + t2_c ii'`.
#[derive(Debug, Clone)]
pub struct Uv2Engine<T: Real> {
    design: Arc<RegressionDesign<T>>,
    phi: DMatrix<T>,
    phi_inv: DMatrix<T>,
}

impl<T: Real> Uv2Engine<T> {
    pub fn new(design: &Arc<RegressionDesign<T>>) -> Result<Self> {
        let phi = Self::phi_matrix(design);
        let phi_inv = checked_inverse(&phi).ok_or(Error::SingularPhi)?;
        Ok(Self {
            design: Arc::clone(design),
            phi,
            phi_inv,
        })
    }

    /// The `2C x 2C` matrix `D'(M x M)D` for the cluster-specific structure.
    pub fn phi_matrix(design: &RegressionDesign<T>) -> DMatrix<T> {
        let cc = design.n_clusters();
        let h = design.gram_inv();
        let st = design.stats();
        let two: T = lit(2.0);
        // K_c = H X_c'X_c and z_c = H x~_c
        let kc: Vec<DMatrix<T>> = (0..cc).map(|c| h * design.cluster_gram(c)).collect();
        let z: Vec<DVector<T>> = (0..cc).map(|c| h * design.xtil_c(c)).collect();
        let mut phi = DMatrix::zeros(2 * cc, 2 * cc);
        for c in 0..cc {
            for d in 0..cc {
                let a_cd = crate::linalg::trace_of_product(&kc[c], &kc[d]);
                let l_cd = (z[d].transpose() * design.cluster_gram(c) * &z[d])[(0, 0)];
                let q_cd = design.xtil_c(c).dot(&z[d]).powi(2);
                phi[(c, d)] = a_cd;
                phi[(c, cc + d)] = l_cd;
                phi[(cc + d, c)] = l_cd;
                phi[(cc + c, cc + d)] = q_cd;
            }
            let n_c: T = count(design.clustering().size(c));
            phi[(c, c)] += n_c - two * st.s_c[c];
            phi[(c, cc + c)] += n_c - two * st.s_tilde_c[c];
            phi[(cc + c, c)] += n_c - two * st.s_tilde_c[c];
            phi[(cc + c, cc + c)] += n_c * n_c - two * n_c * st.s_tilde_c[c];
        }
        phi
    }

    pub fn phi(&self) -> &DMatrix<T> {
        &self.phi
    }

    pub fn phi_inv(&self) -> &DMatrix<T> {
        &self.phi_inv
    }

    /// Unbiased `(sigma_c^2, tau_c^2)` stacked as a `2C` vector.
    pub fn weights(&self, r: &Residuals<T>) -> DVector<T> {
        let cc = self.design.n_clusters();
        let mut rhs = DVector::zeros(2 * cc);
        for c in 0..cc {
            rhs[c] = r.cluster_rss[c];
            rhs[cc + c] = r.cluster_sum[c] * r.cluster_sum[c];
        }
        &self.phi_inv * rhs
    }
}

impl<T: Real> VarianceEngine<T> for Uv2Engine<T> {
    fn method(&self) -> Method {
        Method::Uv2
    }

    fn design(&self) -> &Arc<RegressionDesign<T>> {
        &self.design
    }

    fn estimate(&self, r: &Residuals<T>) -> VarianceEstimate<T> {
        let cc = self.design.n_clusters();
        let w = self.weights(r);
        let meat = re_meat(&self.design, &w.as_slice()[..cc], &w.as_slice()[cc..]);
        VarianceEstimate::new(sandwich(&self.design, &meat), Method::Uv2)
    }
}

// ---------------------------------------------------------------------------
// UV3

/// Unrestricted within-cluster covariance `Sigma = diag(Lambda_c)`.
#[derive(Debug, Clone)]
pub struct Uv3Engine<T: Real> {
    design: Arc<RegressionDesign<T>>,
    s_inv: Vec<DMatrix<T>>,
    outer_inv: DMatrix<T>,
}

impl<T: Real> Uv3Engine<T> {
    pub fn new(design: &Arc<RegressionDesign<T>>) -> Result<Self> {
        let k = design.n_regressors();
        let h = design.gram_inv();
        let eye_k = DMatrix::<T>::identity(k, k);
        let mut outer = design.gram().kronecker(design.gram());
        let mut s_inv = Vec::with_capacity(design.n_clusters());
        for c in 0..design.n_clusters() {
            let gc = design.cluster_gram(c);
            let kc = gc * h;
            let s = DMatrix::identity(k * k, k * k) - eye_k.kronecker(&kc) - kc.kronecker(&eye_k);
            let inv = checked_inverse(&s).ok_or(Error::SingularSc(c))?;
            outer += &inv * gc.kronecker(gc);
            s_inv.push(inv);
        }
        let outer_inv = checked_inverse(&outer).ok_or(Error::SingularOuter)?;
        Ok(Self {
            design: Arc::clone(design),
            s_inv,
            outer_inv,
        })
    }

    /// `S_c^{-1}`
    pub fn s_inv(&self, c: usize) -> &DMatrix<T> {
        &self.s_inv[c]
    }

    /// `(X'X kron X'X + sum_c S_c^{-1}(X_c'X_c kron X_c'X_c))^{-1}`
    pub fn outer_inv(&self) -> &DMatrix<T> {
        &self.outer_inv
    }
}

impl<T: Real> VarianceEngine<T> for Uv3Engine<T> {
    fn method(&self) -> Method {
        Method::Uv3
    }

    fn design(&self) -> &Arc<RegressionDesign<T>> {
        &self.design
    }

    fn estimate(&self, r: &Residuals<T>) -> VarianceEstimate<T> {
        let k = self.design.n_regressors();
        let mut rhs = DVector::zeros(k * k);
        for (c, s_inv) in self.s_inv.iter().enumerate() {
            let u = r.scores.column(c).into_owned();
            rhs += s_inv * u.kronecker(&u);
        }
        let v = unvec(&(&self.outer_inv * rhs), k);
        VarianceEstimate::new(v, Method::Uv3)
    }
}

// ---------------------------------------------------------------------------
// Liang-Zeger sandwiches

/// Plain cluster sandwich `H (sum_c X_c'e_c e_c'X_c) H`, optionally scaled.
#[derive(Debug, Clone)]
pub struct SandwichEngine<T: Real> {
    design: Arc<RegressionDesign<T>>,
    factor: T,
    method: Method,
}

impl<T: Real> SandwichEngine<T> {
    pub fn plain(design: &Arc<RegressionDesign<T>>) -> Self {
        Self {
            design: Arc::clone(design),
            factor: T::one(),
            method: Method::PluginUnrestricted,
        }
    }

    /// `C/(C-1) * (n-1)/(n-k)` times the plain sandwich.
    pub fn stata(design: &Arc<RegressionDesign<T>>) -> Result<Self> {
        let cc = design.n_clusters();
        if cc < 2 {
            return Err(Error::TooFewClusters(cc));
        }
        Ok(Self {
            design: Arc::clone(design),
            factor: stata_factor(cc, design.n_obs(), design.n_regressors()),
            method: Method::Lz1,
        })
    }

    pub fn factor(&self) -> T {
        self.factor
    }
}

/// `C/(C-1) * (n-1)/(n-k)`
pub fn stata_factor<T: Real>(clusters: usize, n: usize, k: usize) -> T {
    let one = T::one();
    let c: T = count(clusters);
    let n_t: T = count(n);
    c / (c - one) * ((n_t - one) / (n_t - count::<T>(k)))
}

impl<T: Real> VarianceEngine<T> for SandwichEngine<T> {
    fn method(&self) -> Method {
        self.method
    }

    fn design(&self) -> &Arc<RegressionDesign<T>> {
        &self.design
    }

    fn estimate(&self, r: &Residuals<T>) -> VarianceEstimate<T> {
        let meat = &r.scores * r.scores.transpose();
        let mut v = sandwich(&self.design, &meat);
        if self.factor != T::one() {
            v *= self.factor;
        }
        VarianceEstimate::new(v, self.method)
    }
}

/// HC2-corrected sandwich with `(I_c - P_cc)^{-1/2}` applied per cluster.
#[derive(Debug, Clone)]
pub struct Hc2Engine<T: Real> {
    design: Arc<RegressionDesign<T>>,
    /// `X_c'(I_c - P_cc)^{-1/2}` (`k x n_c`) per cluster
    transforms: Vec<DMatrix<T>>,
}

impl<T: Real> Hc2Engine<T> {
    pub fn new(design: &Arc<RegressionDesign<T>>) -> Result<Self> {
        let h = design.gram_inv();
        let mut transforms = Vec::with_capacity(design.n_clusters());
        for c in 0..design.n_clusters() {
            let xc = design.cluster_x(c);
            let m = xc.nrows();
            let resid_maker = DMatrix::identity(m, m) - xc * h * xc.transpose();
            let root = inverse_sqrt_spd(&resid_maker, lit(HC2_EIGEN_FLOOR)).map_err(|e| Error::DegenerateLeverage {
                cluster: c,
                eigenvalue: to_f64(e),
            })?;
            transforms.push(xc.transpose() * root);
        }
        Ok(Self {
            design: Arc::clone(design),
            transforms,
        })
    }

    /// `X_c'(I_c - P_cc)^{-1/2}`
    pub fn transform(&self, c: usize) -> &DMatrix<T> {
        &self.transforms[c]
    }
}

impl<T: Real> VarianceEngine<T> for Hc2Engine<T> {
    fn method(&self) -> Method {
        Method::Lz2
    }

    fn design(&self) -> &Arc<RegressionDesign<T>> {
        &self.design
    }

    fn estimate(&self, r: &Residuals<T>) -> VarianceEstimate<T> {
        let k = self.design.n_regressors();
        let mut meat = DMatrix::zeros(k, k);
        for (c, t) in self.transforms.iter().enumerate() {
            let u = t * r.cluster(&self.design, c);
            meat += &u * u.transpose();
        }
        VarianceEstimate::new(sandwich(&self.design, &meat), Method::Lz2)
    }
}

// ---------------------------------------------------------------------------
// Plug-in random-effects estimators

/// Regressor-neglecting homogeneous random-effects estimator.
#[derive(Debug, Clone)]
pub struct PluginReEngine<T: Real> {
    design: Arc<RegressionDesign<T>>,
}

impl<T: Real> PluginReEngine<T> {
    pub fn new(design: &Arc<RegressionDesign<T>>) -> Result<Self> {
        if design.clustering().sum_sq_sizes() == design.n_obs() {
            return Err(Error::AllSingletons);
        }
        Ok(Self {
            design: Arc::clone(design),
        })
    }

    /// `t2 = (e~'e~ - e'e)/(sum n_c^2 - n)`, `s2 = e'e/n - t2`.
    pub fn params(&self, r: &Residuals<T>) -> (T, T) {
        let n: T = count(self.design.n_obs());
        let tau2 = (r.rss_cluster - r.rss) / (self.design.sum_sq_sizes() - n);
        (r.rss / n - tau2, tau2)
    }
}

impl<T: Real> VarianceEngine<T> for PluginReEngine<T> {
    fn method(&self) -> Method {
        Method::PluginRe
    }

    fn design(&self) -> &Arc<RegressionDesign<T>> {
        &self.design
    }

    fn estimate(&self, r: &Residuals<T>) -> VarianceEstimate<T> {
        let (s2, t2) = self.params(r);
        let v = self.design.gram_inv() * s2 + self.design.between() * t2;
        VarianceEstimate::new(v, Method::PluginRe)
    }
}

/// Regressor-neglecting cluster-specific random-effects estimator.
#[derive(Debug, Clone)]
pub struct PluginClusterReEngine<T: Real> {
    design: Arc<RegressionDesign<T>>,
}

impl<T: Real> PluginClusterReEngine<T> {
    pub fn new(design: &Arc<RegressionDesign<T>>) -> Result<Self> {
        if let Some(c) = (0..design.n_clusters()).find(|&c| design.clustering().size(c) < 2) {
            return Err(Error::SingletonCluster(c));
        }
        Ok(Self {
            design: Arc::clone(design),
        })
    }

    /// Per-cluster `(sigma_c^2, tau_c^2)` from the `2 x 2` blocks `[[n_c, n_c], [n_c, n_c^2]]`.
    pub fn params(&self, r: &Residuals<T>) -> (Vec<T>, Vec<T>) {
        (0..self.design.n_clusters())
            .map(|c| {
                let m: T = count(self.design.clustering().size(c));
                let e2 = r.cluster_sum[c] * r.cluster_sum[c];
                let tau2 = (e2 - r.cluster_rss[c]) / (m * m - m);
                (r.cluster_rss[c] / m - tau2, tau2)
            })
            .unzip()
    }
}

impl<T: Real> VarianceEngine<T> for PluginClusterReEngine<T> {
    fn method(&self) -> Method {
        Method::PluginClusterRe
    }

    fn design(&self) -> &Arc<RegressionDesign<T>> {
        &self.design
    }

    fn estimate(&self, r: &Residuals<T>) -> VarianceEstimate<T> {
        let (s2, t2) = self.params(r);
        let meat = re_meat(&self.design, &s2, &t2);
        VarianceEstimate::new(sandwich(&self.design, &meat), Method::PluginClusterRe)
    }
}

// ---------------------------------------------------------------------------
// One-shot entry points

pub fn uv1<T: Real>(fit: &OlsFit<T>) -> Result<VarianceEstimate<T>> {
    Ok(Uv1Engine::new(&fit.design)?.estimate(&fit.residuals))
}

pub fn uv2<T: Real>(fit: &OlsFit<T>) -> Result<VarianceEstimate<T>> {
    Ok(Uv2Engine::new(&fit.design)?.estimate(&fit.residuals))
}

pub fn uv3<T: Real>(fit: &OlsFit<T>) -> Result<VarianceEstimate<T>> {
    Ok(Uv3Engine::new(&fit.design)?.estimate(&fit.residuals))
}

pub fn lz1_stata<T: Real>(fit: &OlsFit<T>) -> Result<VarianceEstimate<T>> {
    Ok(SandwichEngine::stata(&fit.design)?.estimate(&fit.residuals))
}

pub fn lz2_hc2<T: Real>(fit: &OlsFit<T>) -> Result<VarianceEstimate<T>> {
    Ok(Hc2Engine::new(&fit.design)?.estimate(&fit.residuals))
}

pub fn plugin_unrestricted<T: Real>(fit: &OlsFit<T>) -> VarianceEstimate<T> {
    SandwichEngine::plain(&fit.design).estimate(&fit.residuals)
}

pub fn plugin_re<T: Real>(fit: &OlsFit<T>) -> Result<(ReParams<T>, VarianceEstimate<T>)> {
    let engine = PluginReEngine::new(&fit.design)?;
    let (sigma2, tau2) = engine.params(&fit.residuals);
    Ok((ReParams::Homogeneous { sigma2, tau2 }, engine.estimate(&fit.residuals)))
}

pub fn plugin_cluster_re<T: Real>(fit: &OlsFit<T>) -> Result<(ReParams<T>, VarianceEstimate<T>)> {
    let engine = PluginClusterReEngine::new(&fit.design)?;
    let (sigma2, tau2) = engine.params(&fit.residuals);
    Ok((
        ReParams::ClusterSpecific { sigma2, tau2 },
        engine.estimate(&fit.residuals),
    ))
}

/// Dispatches on `method`.
pub fn estimate<T: Real>(fit: &OlsFit<T>, method: Method) -> Result<VarianceEstimate<T>> {
    Ok(engine(&fit.design, method)?.estimate(&fit.residuals))
}

/// `vec V`, the stacked form the linear-map identities are stated in.
pub fn stacked<T: Real>(v: &VarianceEstimate<T>) -> DVector<T> {
    vec_of(&v.v)
}

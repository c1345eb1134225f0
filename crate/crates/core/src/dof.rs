//! Degrees of freedom for t-tests based on the unbiased estimators.
//!
//! Each `V[l,l]` is a quadratic form `e'Ae` in the residuals with a
//! block-diagonal `A`. Matching the first two moments of that form to a scaled
//! chi-square gives the d.f. The reference law is either i.i.d. errors (`RV0`)
//! or homogeneous random effects (`RV1`); in the latter the fourth-moment
//! parameters are replaced by unbiased estimates.
//!
//! Every trace is expanded into `k`-, `C`- and `n_c`-sized pieces.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Hc2Engine, Method, Uv1Engine, Uv2Engine, Uv3Engine};
use crate::linalg::{checked_inverse, diag_of_product, symmetric_part, trace_of_product, unvec};
use crate::model::{OlsFit, RegressionDesign, Residuals};
use crate::scalar::{count, lit, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reference {
    /// i.i.d. normal errors
    Rv0,
    /// homogeneous random-effects normal errors
    Rv1,
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reference::Rv0 => "RV0",
            Reference::Rv1 => "RV1",
        })
    }
}

impl FromStr for Reference {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rv0" => Ok(Reference::Rv0),
            "rv1" => Ok(Reference::Rv1),
            _ => Err(format!("unknown d.f. reference `{s}` (expected rv0 or rv1)")),
        }
    }
}

/// Structured storage of the block-diagonal `A` with `V[l,l] = e'Ae`.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockKind<T: Real> {
    /// `A_c = r1 I + r2 ii'` for every cluster.
    Equicorrelated { r1: T, r2: T },
    /// `A_c = r1[c] I + r2[c] ii'`
    ClusterRe { r1: DVector<T>, r2: DVector<T> },
    /// `A_c = X_c Q_c X_c'`
    Unrestricted { q: Vec<DMatrix<T>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ABlocks<T: Real> {
    pub method: Method,
    pub ell: usize,
    pub kind: BlockKind<T>,
}

fn check_ell<T: Real>(design: &RegressionDesign<T>, ell: usize) -> Result<()> {
    let k = design.n_regressors();
    if ell >= k {
        Err(Error::CoefficientIndex { index: ell, k })
    } else {
        Ok(())
    }
}

impl<T: Real> ABlocks<T> {
    pub fn from_uv1(engine: &Uv1Engine<T>, ell: usize) -> Result<Self> {
        use crate::estimators::VarianceEngine;
        let d = engine.design();
        check_ell(d, ell)?;
        let (h, b) = (d.gram_inv()[(ell, ell)], d.between()[(ell, ell)]);
        let p = engine.psi_inv();
        let r1 = h * p[(0, 0)] + b * p[(1, 0)];
        let r2 = h * p[(0, 1)] + b * p[(1, 1)];
        Ok(Self {
            method: Method::Uv1,
            ell,
            kind: BlockKind::Equicorrelated { r1, r2 },
        })
    }

    pub fn from_uv2(engine: &Uv2Engine<T>, ell: usize) -> Result<Self> {
        use crate::estimators::VarianceEngine;
        let d = engine.design();
        check_ell(d, ell)?;
        let cc = d.n_clusters();
        let h = d.gram_inv();
        let mut ab = DVector::zeros(2 * cc);
        for c in 0..cc {
            let hg = h * d.cluster_gram(c) * h;
            ab[c] = hg[(ell, ell)];
            let z = h * d.xtil_c(c);
            ab[cc + c] = z[ell] * z[ell];
        }
        let r = engine.phi_inv().tr_mul(&ab);
        let r1 = r.rows(0, cc).into_owned();
        let r2 = r.rows(cc, cc).into_owned();
        Ok(Self {
            method: Method::Uv2,
            ell,
            kind: BlockKind::ClusterRe { r1, r2 },
        })
    }

    pub fn from_uv3(engine: &Uv3Engine<T>, ell: usize) -> Result<Self> {
        use crate::estimators::VarianceEngine;
        let d = engine.design();
        check_ell(d, ell)?;
        let k = d.n_regressors();
        // g = O^{-T} (e_l kron e_l)
        let g: DVector<T> = engine.outer_inv().row(ell + k * ell).transpose();
        let q = (0..d.n_clusters())
            .map(|c| symmetric_part(&unvec(&engine.s_inv(c).tr_mul(&g), k)))
            .collect();
        Ok(Self {
            method: Method::Uv3,
            ell,
            kind: BlockKind::Unrestricted { q },
        })
    }

    /// `e'Ae` from residual aggregates.
    pub fn quadratic_form(&self, r: &Residuals<T>) -> T {
        match &self.kind {
            BlockKind::Equicorrelated { r1, r2 } => *r1 * r.rss + *r2 * r.rss_cluster,
            BlockKind::ClusterRe { r1, r2 } => (0..r1.len()).fold(T::zero(), |acc, c| {
                acc + r1[c] * r.cluster_rss[c] + r2[c] * r.cluster_sum[c] * r.cluster_sum[c]
            }),
            BlockKind::Unrestricted { q } => q.iter().enumerate().fold(T::zero(), |acc, (c, qc)| {
                let u = r.scores.column(c);
                acc + (u.transpose() * qc * u)[(0, 0)]
            }),
        }
    }

    /// Dense `A_c`.
    pub fn dense_block(&self, design: &RegressionDesign<T>, c: usize) -> DMatrix<T> {
        let m = design.clustering().size(c);
        let re = |r1: T, r2: T| DMatrix::from_element(m, m, r2) + DMatrix::identity(m, m) * r1;
        match &self.kind {
            BlockKind::Equicorrelated { r1, r2 } => re(*r1, *r2),
            BlockKind::ClusterRe { r1, r2 } => re(r1[c], r2[c]),
            BlockKind::Unrestricted { q } => {
                let xc = design.cluster_x(c);
                xc * &q[c] * xc.transpose()
            }
        }
    }

    /// Dense `n x n` matrix `A`. Reference paths only.
    pub fn dense(&self, design: &RegressionDesign<T>) -> DMatrix<T> {
        let n = design.n_obs();
        let mut a = DMatrix::zeros(n, n);
        for c in 0..design.n_clusters() {
            let block = self.dense_block(design, c);
            let idx = design.clustering().members(c);
            for (p, &i) in idx.iter().enumerate() {
                for (q, &j) in idx.iter().enumerate() {
                    a[(i, j)] = block[(p, q)];
                }
            }
        }
        a
    }

    fn cluster_pieces(&self, design: &RegressionDesign<T>, c: usize) -> ClusterPieces<T> {
        let g = design.cluster_gram(c);
        let xt = design.xtil_c(c);
        let m: T = count(design.clustering().size(c));
        let re = |r1: T, r2: T| {
            // A_c^2 = r1^2 I + s ii'
            let s = lit::<T>(2.0) * r1 * r2 + r2 * r2 * m;
            let outer = &xt * xt.transpose();
            ClusterPieces {
                tr_a2: r1 * r1 * m + s * m,
                xax: g * r1 + &outer * r2,
                xa2x: g * (r1 * r1) + &outer * s,
                lambda: r1 * m + r2 * m * m,
                xai: &xt * (r1 + r2 * m),
                ia2i: r1 * r1 * m + s * m * m,
                xa2i: &xt * (r1 * r1 + s * m),
            }
        };
        match &self.kind {
            BlockKind::Equicorrelated { r1, r2 } => re(*r1, *r2),
            BlockKind::ClusterRe { r1, r2 } => re(r1[c], r2[c]),
            BlockKind::Unrestricted { q } => {
                let qc = &q[c];
                let qg = qc * g;
                let qx = qc * &xt;
                let gqx = g * &qx;
                ClusterPieces {
                    tr_a2: trace_of_product(&qg, &qg),
                    xax: g * &qg,
                    xa2x: g * &qg * &qg,
                    lambda: xt.dot(&qx),
                    xai: gqx.clone(),
                    ia2i: qx.dot(&gqx),
                    xa2i: g * (qc * &gqx),
                }
            }
        }
    }
}

/// Builds the A-blocks of `method` for coefficient `ell`.
pub fn build_a_blocks<T: Real>(fit: &OlsFit<T>, method: Method, ell: usize) -> Result<ABlocks<T>> {
    match method {
        Method::Uv1 => ABlocks::from_uv1(&Uv1Engine::new(&fit.design)?, ell),
        Method::Uv2 => ABlocks::from_uv2(&Uv2Engine::new(&fit.design)?, ell),
        Method::Uv3 => ABlocks::from_uv3(&Uv3Engine::new(&fit.design)?, ell),
        other => Err(Error::Dimension(format!("{other} has no A-block representation"))),
    }
}

/// Per-cluster products of `A_c` with `X_c` and `i_c`.
struct ClusterPieces<T: Real> {
    tr_a2: T,
    xax: DMatrix<T>,
    xa2x: DMatrix<T>,
    lambda: T,
    xai: DVector<T>,
    ia2i: T,
    xa2i: DVector<T>,
}

/// Residual-independent traces for one `(method, l)` pair.
///
/// With `Sigma = s2 I + t2 BB'` the two moments of `e'Ae` are
/// `E = s2 h + t2 c` and `Var/2 = s4 T0 + 2 s2t2 T1 + t4 T2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DofTraces<T: Real> {
    pub method: Method,
    pub ell: usize,
    /// `[(X'X)^{-1}]_{ll}`
    pub h: T,
    /// `[(X'X)^{-1} X~'X~ (X'X)^{-1}]_{ll}`
    pub c: T,
    /// `tr(AMAM)`
    pub t0: T,
    /// `tr(B'MAMAMB)`
    pub t1: T,
    /// `tr((B'MAMB)^2)`
    pub t2: T,
    /// `i_c'A_c i_c`
    pub lambda: DVector<T>,
    /// `(X'X)^{-1} X_c'A_c i_c`, one column per cluster
    pub mu: DMatrix<T>,
}

impl<T: Real> DofTraces<T> {
    pub fn new(design: &RegressionDesign<T>, blocks: &ABlocks<T>) -> Self {
        let k = design.n_regressors();
        let cc = design.n_clusters();
        let h = design.gram_inv();
        let xt = design.xtil();
        let two: T = lit(2.0);

        let mut n1 = DMatrix::zeros(k, k);
        let mut n2 = DMatrix::zeros(k, k);
        let mut xai = DMatrix::zeros(k, cc);
        let mut lambda = DVector::zeros(cc);
        let mut sum_tr_a2 = T::zero();
        let mut sum_ia2i = T::zero();
        let mut cross = T::zero();
        for c in 0..cc {
            let p = blocks.cluster_pieces(design, c);
            n1 += &p.xax;
            n2 += &p.xa2x;
            xai.set_column(c, &p.xai);
            lambda[c] = p.lambda;
            sum_tr_a2 += p.tr_a2;
            sum_ia2i += p.ia2i;
            cross += (h * design.xtil_c(c)).dot(&p.xa2i);
        }

        let hn = h * &n1;
        let t0 = sum_tr_a2 - two * trace_of_product(h, &n2) + trace_of_product(&hn, &hn);

        // Y = AMB: tr(Y'MY) = tr(Y'Y) - tr((X'Y)' H (X'Y))
        let hxt = h * xt.transpose();
        let tr_yy = sum_ia2i - two * cross + trace_of_product(&(xt * h * &n2), &hxt);
        let xy = &xai - &n1 * &hxt;
        let t1 = tr_yy - trace_of_product(&xy.transpose(), &(h * &xy));

        // B'MAMB = diag(lambda) - X~U - U'X~' + X~WX~'
        let mu = h * &xai;
        let w = &hn * h;
        let xu = xt * &mu;
        let mut s = xt * &w * xt.transpose() - &xu - xu.transpose();
        for c in 0..cc {
            s[(c, c)] += lambda[c];
        }
        let t2 = s.iter().fold(T::zero(), |a, &v| a + v * v);

        Self {
            method: blocks.method,
            ell: blocks.ell,
            h: h[(blocks.ell, blocks.ell)],
            c: design.between()[(blocks.ell, blocks.ell)],
            t0,
            t1,
            t2,
            lambda,
            mu,
        }
    }

    /// Second-moment denominator at given `(s4, s2t2, t4)`.
    pub fn denominator(&self, m: &ReMoments<T>) -> T {
        let two: T = lit(2.0);
        m.sigma4 * self.t0 + two * m.sigma2tau2 * self.t1 + m.tau4 * self.t2
    }

    /// Squared first moment at given `(s4, s2t2, t4)`.
    pub fn numerator(&self, m: &ReMoments<T>) -> T {
        let two: T = lit(2.0);
        m.sigma4 * self.h * self.h + two * m.sigma2tau2 * self.h * self.c + m.tau4 * self.c * self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DofEstimate<T: Real> {
    pub d: T,
    pub reference: Reference,
    /// The raw value fell outside `[1, n-k]`.
    pub clamped: bool,
    /// RV1 was requested but its denominator was not positive.
    pub fallback: bool,
    pub moments_used: Option<ReMoments<T>>,
}

fn clamp_dof<T: Real>(raw: T, upper: T) -> (T, bool) {
    if !(raw >= T::one()) {
        (T::one(), true)
    } else if raw > upper {
        (upper, true)
    } else {
        (raw, false)
    }
}

fn dof_upper<T: Real>(design: &RegressionDesign<T>) -> T {
    count(design.n_obs() - design.n_regressors())
}

/// `d = h^2 / tr(AMAM)`
pub fn dof_rv0_from<T: Real>(design: &RegressionDesign<T>, traces: &DofTraces<T>) -> Result<DofEstimate<T>> {
    if !(traces.t0 > T::zero()) {
        return Err(Error::NonpositiveTrace);
    }
    let (d, clamped) = clamp_dof(traces.h * traces.h / traces.t0, dof_upper(design));
    Ok(DofEstimate {
        d,
        reference: Reference::Rv0,
        clamped,
        fallback: false,
        moments_used: None,
    })
}

/// RV1 d.f. at the given fourth-moment parameters.
pub fn dof_rv1_from<T: Real>(
    design: &RegressionDesign<T>,
    traces: &DofTraces<T>,
    moments: &ReMoments<T>,
) -> Result<DofEstimate<T>> {
    let den = traces.denominator(moments);
    if !(den > T::zero()) {
        return Err(Error::NonpositiveDenominator);
    }
    let (d, clamped) = clamp_dof(traces.numerator(moments) / den, dof_upper(design));
    Ok(DofEstimate {
        d,
        reference: Reference::Rv1,
        clamped,
        fallback: false,
        moments_used: Some(*moments),
    })
}

/// RV1 d.f., falling back to RV0 (flagged) if the denominator is not positive.
pub fn dof_rv1_or_rv0<T: Real>(
    design: &RegressionDesign<T>,
    traces: &DofTraces<T>,
    moments: &ReMoments<T>,
) -> Result<DofEstimate<T>> {
    match dof_rv1_from(design, traces, moments) {
        Err(Error::NonpositiveDenominator) => {
            let mut d = dof_rv0_from(design, traces)?;
            d.fallback = true;
            d.moments_used = Some(*moments);
            Ok(d)
        }
        other => other,
    }
}

pub fn dof_rv0<T: Real>(blocks: &ABlocks<T>, fit: &OlsFit<T>) -> Result<DofEstimate<T>> {
    dof_rv0_from(&fit.design, &DofTraces::new(&fit.design, blocks))
}

pub fn dof_rv1<T: Real>(blocks: &ABlocks<T>, fit: &OlsFit<T>, moments: &ReMoments<T>) -> Result<DofEstimate<T>> {
    dof_rv1_from(&fit.design, &DofTraces::new(&fit.design, blocks), moments)
}

// ---------------------------------------------------------------------------
// Fourth moments under homogeneous random effects

/// Estimates of `(sigma^4, sigma^2 tau^2, tau^4)`. May be negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReMoments<T: Real> {
    pub sigma4: T,
    pub sigma2tau2: T,
    pub tau4: T,
}

/// The moment system for `(s4, s2t2, t4)`, residual-independent.
///
/// `m_ab` is the diagonal of a product with `a` factors `M` and `b`
/// factors `BB'`.
#[derive(Debug, Clone)]
pub struct MomentDesign<T: Real> {
    design: Arc<RegressionDesign<T>>,
    /// `diag M`
    pub m10: DVector<T>,
    /// `diag MBB'M`
    pub m21: DVector<T>,
    /// `diag BB'M`
    pub m11: DVector<T>,
    /// `diag BB'MBB'M`
    pub m22: DVector<T>,
    /// `diag BB'MBB'`
    pub m12: DVector<T>,
    /// `diag BB'MBB'MBB'`
    pub m23: DVector<T>,
    pub x: T,
    pub y: T,
    pub z: T,
    pub system: DMatrix<T>,
    system_inv: DMatrix<T>,
}

impl<T: Real> MomentDesign<T> {
    pub fn new(design: &Arc<RegressionDesign<T>>) -> Result<Self> {
        let x = design.x();
        let h = design.gram_inv();
        let cl = design.clustering();
        let n = design.n_obs();
        let xt = design.xtil();
        let two: T = lit(2.0);

        // rows of X~ expanded to observations
        let mut xe = DMatrix::zeros(n, x.ncols());
        for (i, &c) in cl.cluster_of().iter().enumerate() {
            xe.set_row(i, &xt.row(c));
        }
        let z = x * h;
        let xb = x * design.between();
        let zx = diag_of_product(&z, &xe); // x~_c'H x_i
        let xbx = diag_of_product(x, &xb); // x_i'H X~'X~ H x_i
        let xtbx = diag_of_product(&xe, &xb); // x~_c'H X~'X~ H x_i
        let pxx = diag_of_product(&z, x);

        // K = B'MB = diag(n_c) - X~HX~'
        let mut kmat = -(xt * h * xt.transpose());
        for c in 0..cl.len() {
            kmat[(c, c)] += count::<T>(cl.size(c));
        }
        let k2: DVector<T> = DVector::from_fn(cl.len(), |c, _| kmat.column(c).norm_squared());

        let mut m10 = DVector::zeros(n);
        let mut m21 = DVector::zeros(n);
        let mut m11 = DVector::zeros(n);
        let mut m22 = DVector::zeros(n);
        let mut m12 = DVector::zeros(n);
        let mut m23 = DVector::zeros(n);
        let one = T::one();
        for (i, &c) in cl.cluster_of().iter().enumerate() {
            let nc: T = count(cl.size(c));
            m10[i] = one - pxx[i];
            m21[i] = one - two * zx[i] + xbx[i];
            m11[i] = one - zx[i];
            m22[i] = kmat[(c, c)] - nc * zx[i] + xtbx[i];
            m12[i] = kmat[(c, c)];
            m23[i] = k2[c];
        }

        let dot = |a: &DVector<T>, b: &DVector<T>| a.dot(b);
        let three: T = lit(3.0);
        let four: T = lit(4.0);
        let six: T = lit(6.0);
        let xs = dot(&m10, &m12) + two * dot(&m11, &m11);
        let ys = dot(&m10, &m23) + dot(&m21, &m12) + four * dot(&m22, &m11);
        let zs = dot(&m21, &m23) + two * dot(&m22, &m22);
        let system = DMatrix::from_row_slice(
            3,
            3,
            &[
                three * dot(&m10, &m10),
                six * dot(&m10, &m21),
                three * dot(&m21, &m21),
                xs,
                ys,
                zs,
                three * dot(&m12, &m12),
                six * dot(&m12, &m23),
                three * dot(&m23, &m23),
            ],
        );
        let system_inv = checked_inverse(&system).ok_or(Error::SingularMomentSystem)?;
        Ok(Self {
            design: Arc::clone(design),
            m10,
            m21,
            m11,
            m22,
            m12,
            m23,
            x: xs,
            y: ys,
            z: zs,
            system,
            system_inv,
        })
    }

    /// `(sum e_i^4, sum e_i^2 e~_i^2, sum e~_i^4)` with `e~ = BB'e`.
    pub fn rhs(&self, r: &Residuals<T>) -> DVector<T> {
        let cl = self.design.clustering();
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for (i, &c) in cl.cluster_of().iter().enumerate() {
            let e2 = r.resid[i] * r.resid[i];
            s1 += e2 * e2;
            s2 += e2 * r.cluster_sum[c] * r.cluster_sum[c];
        }
        let s3 = (0..cl.len()).fold(T::zero(), |a, c| {
            let t2 = r.cluster_sum[c] * r.cluster_sum[c];
            a + count::<T>(cl.size(c)) * t2 * t2
        });
        DVector::from_column_slice(&[s1, s2, s3])
    }

    pub fn estimate(&self, r: &Residuals<T>) -> ReMoments<T> {
        let sol = &self.system_inv * self.rhs(r);
        ReMoments {
            sigma4: sol[0],
            sigma2tau2: sol[1],
            tau4: sol[2],
        }
    }
}

pub fn estimate_re_moments<T: Real>(fit: &OlsFit<T>) -> Result<ReMoments<T>> {
    Ok(MomentDesign::new(&fit.design)?.estimate(&fit.residuals))
}

// ---------------------------------------------------------------------------
// Cached per-(method, l) calculator

/// Residual-independent d.f. machinery for one `(method, l)` pair.
#[derive(Debug, Clone)]
pub struct DofCalculator<T: Real> {
    design: Arc<RegressionDesign<T>>,
    pub blocks: ABlocks<T>,
    pub traces: DofTraces<T>,
}

impl<T: Real> DofCalculator<T> {
    pub fn new(design: &Arc<RegressionDesign<T>>, blocks: ABlocks<T>) -> Self {
        let traces = DofTraces::new(design, &blocks);
        Self {
            design: Arc::clone(design),
            blocks,
            traces,
        }
    }

    pub fn rv0(&self) -> Result<DofEstimate<T>> {
        dof_rv0_from(&self.design, &self.traces)
    }

    pub fn rv1(&self, moments: &ReMoments<T>) -> Result<DofEstimate<T>> {
        dof_rv1_or_rv0(&self.design, &self.traces, moments)
    }
}

// ---------------------------------------------------------------------------
// Imbens-Kolesar d.f. for the HC2 estimator

/// Imbens-Kolesar d.f. for the HC2 sandwich on coefficient `l`.
///
/// With `G = M W`, `w_c = G_c (I - P_cc)^{-1/2} X_c H e_l`, the d.f. is
/// `tr(G'OG)^2 / tr((G'OG)^2)` where `O` is the random-effects covariance
/// at the plug-in `(sigma^2, tau^2)`, each clipped at zero.
#[derive(Debug, Clone)]
pub struct IkDof<T: Real> {
    design: Arc<RegressionDesign<T>>,
    /// `W'MW` (`C x C`)
    wmw: DMatrix<T>,
    /// `B'MW` (`C x C`)
    bmw: DMatrix<T>,
}

impl<T: Real> IkDof<T> {
    pub fn new(engine: &Hc2Engine<T>, ell: usize) -> Result<Self> {
        use crate::estimators::VarianceEngine;
        let design = engine.design();
        check_ell(design, ell)?;
        let k = design.n_regressors();
        let cc = design.n_clusters();
        let h = design.gram_inv();
        let he: DVector<T> = h.column(ell).into_owned();
        let mut xw = DMatrix::zeros(k, cc);
        let mut wtw = DMatrix::zeros(cc, cc);
        let mut btw = DMatrix::zeros(cc, cc);
        for c in 0..cc {
            let t = engine.transform(c).tr_mul(&he);
            wtw[(c, c)] = t.norm_squared();
            btw[(c, c)] = t.sum();
            xw.set_column(c, &(design.cluster_x(c).transpose() * &t));
        }
        let hxw = h * &xw;
        let wmw = wtw - xw.transpose() * &hxw;
        let bmw = btw - design.xtil() * &hxw;
        Ok(Self {
            design: Arc::clone(design),
            wmw,
            bmw,
        })
    }

    /// d.f. at covariance `sigma2 I + tau2 BB'`.
    pub fn at(&self, sigma2: T, tau2: T) -> Result<DofEstimate<T>> {
        let g = &self.wmw * sigma2 + self.bmw.tr_mul(&self.bmw) * tau2;
        let tr = g.trace();
        let tr2 = trace_of_product(&g, &g);
        if !(tr2 > T::zero()) {
            return Err(Error::NonpositiveTrace);
        }
        let (d, clamped) = clamp_dof(tr * tr / tr2, dof_upper(&self.design));
        Ok(DofEstimate {
            d,
            reference: Reference::Rv1,
            clamped,
            fallback: false,
            moments_used: None,
        })
    }

    /// d.f. at the clipped plug-in random-effects parameters of `r`.
    pub fn estimate(&self, r: &Residuals<T>) -> Result<DofEstimate<T>> {
        let n: T = count(self.design.n_obs());
        let denom = self.design.sum_sq_sizes() - n;
        let tau2 = if denom > T::zero() {
            (r.rss_cluster - r.rss) / denom
        } else {
            T::zero()
        };
        let sigma2 = r.rss / n - tau2;
        let zero = T::zero();
        let (s, t) = (
            if sigma2 > zero { sigma2 } else { zero },
            if tau2 > zero { tau2 } else { zero },
        );
        if s == zero && t == zero {
            self.at(T::one(), zero)
        } else {
            self.at(s, t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{estimate, VarianceEngine};
    use crate::model::{fit_ols, ClusteredDataset, Clustering};

    fn intercept_fit(y: &[f64], sizes: &[usize]) -> OlsFit<f64> {
        let n = y.len();
        let data = ClusteredDataset::new(
            DVector::from_column_slice(y),
            DMatrix::from_element(n, 1, 1.0),
            Clustering::from_sizes(sizes).unwrap(),
        )
        .unwrap();
        fit_ols(&data).unwrap()
    }

    fn mixed_fit(seed: u64) -> OlsFit<f64> {
        let sizes = [3, 5, 2, 4, 6];
        let n: usize = sizes.iter().sum();
        let f = |i: usize, j: usize| (((i * 31 + j * 17 + seed as usize * 7) % 23) as f64 / 7.0).sin();
        let x = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { f(i, j) });
        let y = DVector::from_fn(n, |i, _| f(i, 5) + 0.3 * f(i, 7));
        let data = ClusteredDataset::new(y, x, Clustering::from_sizes(&sizes).unwrap()).unwrap();
        fit_ols(&data).unwrap()
    }

    #[test]
    fn uv1_blocks_hand_example() {
        let fit = intercept_fit(&[1.0, 1.0, -1.0, -1.0], &[2, 2]);
        let b = build_a_blocks(&fit, Method::Uv1, 0).unwrap();
        let BlockKind::Equicorrelated { r1, r2 } = b.kind else {
            unreachable!()
        };
        assert!(r1.abs() < 1e-15);
        assert!((r2 - 0.125).abs() < 1e-15);
        assert!((b.quadratic_form(&fit.residuals) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quadratic_form_reproduces_variance() {
        let fit = mixed_fit(1);
        for m in [Method::Uv1, Method::Uv2, Method::Uv3] {
            let v = estimate(&fit, m).unwrap();
            for ell in 0..3 {
                let b = build_a_blocks(&fit, m, ell).unwrap();
                let q = b.quadratic_form(&fit.residuals);
                let dense = b.dense(&fit.design);
                let qd = (fit.resid().transpose() * &dense * fit.resid())[(0, 0)];
                let want = v.variance(ell);
                assert!((q - want).abs() <= 1e-10 * want.abs().max(1e-300), "{m} {ell}");
                assert!((qd - want).abs() <= 1e-10 * want.abs(), "{m} {ell} dense");
            }
        }
    }

    #[test]
    fn blocks_do_not_depend_on_y() {
        let a = mixed_fit(1);
        let b = a.design.fit(&DVector::from_fn(a.n_obs(), |i, _| (i as f64).cos()));
        for m in [Method::Uv1, Method::Uv2, Method::Uv3] {
            assert_eq!(build_a_blocks(&a, m, 1).unwrap(), build_a_blocks(&b, m, 1).unwrap());
        }
    }

    #[test]
    fn traces_match_dense() {
        let fit = mixed_fit(3);
        let d = &fit.design;
        let mm = d.annihilator();
        let n = d.n_obs();
        let bb = DMatrix::from_fn(n, n, |i, j| {
            if d.clustering().cluster_of()[i] == d.clustering().cluster_of()[j] {
                1.0
            } else {
                0.0
            }
        });
        for m in [Method::Uv1, Method::Uv2, Method::Uv3] {
            let b = build_a_blocks(&fit, m, 2).unwrap();
            let t = DofTraces::new(d, &b);
            let a = b.dense(d);
            let am = &a * &mm;
            let t0 = (&am * &am).trace();
            let t1 = (&am * &am * &bb * &mm).trace();
            let bmamb = &mm * &a * &mm * &bb;
            let t2 = (&bmamb * &bmamb).trace();
            for (got, want) in [(t.t0, t0), (t.t1, t1), (t.t2, t2)] {
                assert!((got - want).abs() <= 1e-9 * want.abs(), "{m}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rv1_with_zero_tau_equals_rv0() {
        let fit = mixed_fit(2);
        let b = build_a_blocks(&fit, Method::Uv2, 1).unwrap();
        let rv0 = dof_rv0(&b, &fit).unwrap();
        let mom = ReMoments {
            sigma4: 2.7,
            sigma2tau2: 0.0,
            tau4: 0.0,
        };
        let rv1 = dof_rv1(&b, &fit, &mom).unwrap();
        assert!((rv0.d - rv1.d).abs() <= 1e-12 * rv0.d);
        assert_eq!(rv1.reference, Reference::Rv1);
    }

    #[test]
    fn nonpositive_denominator_falls_back() {
        let fit = mixed_fit(2);
        let b = build_a_blocks(&fit, Method::Uv1, 1).unwrap();
        let calc = DofCalculator::new(&fit.design, b);
        let mom = ReMoments {
            sigma4: -1.0,
            sigma2tau2: 0.0,
            tau4: 0.0,
        };
        let d = calc.rv1(&mom).unwrap();
        assert!(d.fallback && d.reference == Reference::Rv0);
    }

    #[test]
    fn zero_blocks_give_nonpositive_trace() {
        let fit = mixed_fit(2);
        let b = ABlocks {
            method: Method::Uv1,
            ell: 0,
            kind: BlockKind::Equicorrelated { r1: 0.0, r2: 0.0 },
        };
        assert_eq!(dof_rv0(&b, &fit).unwrap_err(), Error::NonpositiveTrace);
    }

    #[test]
    fn zero_residuals_zero_moments() {
        let fit = mixed_fit(4);
        let design = &fit.design;
        let zero = design.fit(&(design.x() * DVector::from_column_slice(&[1.0, -2.0, 0.5])));
        let m = estimate_re_moments(&zero).unwrap();
        assert!(m.sigma4.abs() < 1e-20 && m.sigma2tau2.abs() < 1e-20 && m.tau4.abs() < 1e-20);
    }

    #[test]
    fn moment_system_singular_for_singletons() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sqrt() });
        let data = ClusteredDataset::new(
            DVector::from_fn(6, |i, _| i as f64),
            x,
            Clustering::new((0..6).collect()).unwrap(),
        )
        .unwrap();
        let fit = fit_ols(&data).unwrap();
        assert_eq!(estimate_re_moments(&fit).unwrap_err(), Error::SingularMomentSystem);
    }

    #[test]
    fn moment_diagonals_match_dense() {
        let fit = mixed_fit(5);
        let d = &fit.design;
        let md = MomentDesign::new(d).unwrap();
        let mm = d.annihilator();
        let n = d.n_obs();
        let bb = DMatrix::from_fn(n, n, |i, j| {
            if d.clustering().cluster_of()[i] == d.clustering().cluster_of()[j] {
                1.0
            } else {
                0.0
            }
        });
        let pairs = [
            (&md.m10, mm.clone()),
            (&md.m21, &mm * &bb * &mm),
            (&md.m11, &bb * &mm),
            (&md.m22, &bb * &mm * &bb * &mm),
            (&md.m12, &bb * &mm * &bb),
            (&md.m23, &bb * &mm * &bb * &mm * &bb),
        ];
        for (got, dense) in pairs {
            assert!((got - dense.diagonal()).amax() < 1e-12);
        }
        assert!(md.m10.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ik_dof_matches_dense() {
        let sizes = [3, 4, 3, 5];
        let n: usize = sizes.iter().sum();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { ((i * 5 % 7) as f64).cos() });
        let data = ClusteredDataset::new(
            DVector::from_fn(n, |i, _| ((i * i) as f64).sin()),
            x,
            Clustering::from_sizes(&sizes).unwrap(),
        )
        .unwrap();
        let fit = fit_ols(&data).unwrap();
        let d = &fit.design;
        let hc2 = Hc2Engine::new(d).unwrap();
        let ik = IkDof::new(&hc2, 1).unwrap();
        let (s2, t2) = (0.8, 0.3);
        let got = ik.at(s2, t2).unwrap().d;

        let mm = d.annihilator();
        let cl = d.clustering();
        let mut w = DMatrix::zeros(n, cl.len());
        let he = d.gram_inv().column(1).into_owned();
        for c in 0..cl.len() {
            let t = hc2.transform(c).tr_mul(&he);
            for (p, &i) in cl.members(c).iter().enumerate() {
                w[(i, c)] = t[p];
            }
        }
        let g = &mm * &w;
        let omega = DMatrix::from_fn(n, n, |i, j| {
            let same = cl.cluster_of()[i] == cl.cluster_of()[j];
            (if i == j { s2 } else { 0.0 }) + if same { t2 } else { 0.0 }
        });
        let gog = g.transpose() * omega * &g;
        let want = gog.trace().powi(2) / (&gog * &gog).trace();
        assert!((got - want).abs() < 1e-10 * want);
        assert!(hc2.design().n_clusters() == 4);
    }
}

//! Dense brute-force reference implementations.
//!
//! Everything here materializes `n^2`-sized objects (`D`, `M kron M`) and is
//! restricted to small `n`. It exists to check the production formulas.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::linalg::{checked_inverse, max_abs, symmetric_part, unvec, vec_of};
use crate::model::{Clustering, OlsFit, RegressionDesign};
use crate::scalar::Real;

/// Default cap on `n` for dense paths.
pub const DEFAULT_CAP: usize = 64;

/// Covariance structure spanned by the columns of `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    /// `(vec I, vec BB')`
    Equicorrelated,
    /// `(vec G_c G_c')_c` then `(vec G_c i i' G_c')_c`
    ClusterSpecific,
    /// `G_c kron G_c` for every cluster
    Unrestricted,
    /// `sum_i e_i kron I_T kron e_i kron I_T`, unit-major rows
    Panel { n_units: usize, n_waves: usize },
}

/// Explicit `D` (`n^2 x r`) with `vec Sigma = D pi`.
#[derive(Debug, Clone)]
pub struct DenseDesign<T: Real> {
    pub d: DMatrix<T>,
    pub structure: Structure,
}

impl<T: Real> DenseDesign<T> {
    pub fn n_params(&self) -> usize {
        self.d.ncols()
    }

    /// `vec Sigma = D pi` reshaped to `n x n`.
    pub fn sigma(&self, pi: &DVector<T>) -> DMatrix<T> {
        let n = (self.d.nrows() as f64).sqrt().round() as usize;
        unvec(&(&self.d * pi), n)
    }
}

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        Err(Error::TooLargeForOracle { n, cap })
    } else {
        Ok(())
    }
}

pub fn build_design<T: Real>(structure: Structure, clustering: &Clustering, cap: usize) -> Result<DenseDesign<T>> {
    let n = clustering.n_obs();
    check_cap(n, cap)?;
    let one = T::one();
    let at = |i: usize, j: usize| i + n * j;
    let d = match structure {
        Structure::Equicorrelated => {
            let mut d = DMatrix::zeros(n * n, 2);
            for i in 0..n {
                d[(at(i, i), 0)] = one;
            }
            for c in 0..clustering.len() {
                for &i in clustering.members(c) {
                    for &j in clustering.members(c) {
                        d[(at(i, j), 1)] = one;
                    }
                }
            }
            d
        }
        Structure::ClusterSpecific => {
            let cc = clustering.len();
            let mut d = DMatrix::zeros(n * n, 2 * cc);
            for c in 0..cc {
                for &i in clustering.members(c) {
                    d[(at(i, i), c)] = one;
                    for &j in clustering.members(c) {
                        d[(at(i, j), cc + c)] = one;
                    }
                }
            }
            d
        }
        Structure::Unrestricted => {
            let r: usize = (0..clustering.len()).map(|c| clustering.size(c).pow(2)).sum();
            let mut d = DMatrix::zeros(n * n, r);
            let mut col = 0;
            for c in 0..clustering.len() {
                let idx = clustering.members(c);
                // column (a, b) of vec Lambda_c in column-major order
                for &j in idx {
                    for &i in idx {
                        d[(at(i, j), col)] = one;
                        col += 1;
                    }
                }
            }
            d
        }
        Structure::Panel { n_units, n_waves } => {
            if n_units * n_waves != n {
                return Err(Error::Dimension(format!(
                    "panel {n_units} x {n_waves} does not cover {n} rows"
                )));
            }
            let t = n_waves;
            let mut d = DMatrix::zeros(n * n, t * t);
            for s in 0..t {
                for r in 0..t {
                    for u in 0..n_units {
                        d[(at(u * t + r, u * t + s), r + t * s)] = one;
                    }
                }
            }
            d
        }
    };
    Ok(DenseDesign { d, structure })
}

/// `M kron M`
pub fn m_kron_m<T: Real>(design: &RegressionDesign<T>, cap: usize) -> Result<DMatrix<T>> {
    check_cap(design.n_obs(), cap)?;
    let m = design.annihilator();
    Ok(m.kronecker(&m))
}

/// `R' = ((X'X)^{-1}X' kron (X'X)^{-1}X') D`, `k^2 x r`.
fn r_transpose<T: Real>(design: &RegressionDesign<T>, dd: &DenseDesign<T>) -> DMatrix<T> {
    let hx = design.gram_inv() * design.x().transpose();
    hx.kronecker(&hx) * &dd.d
}

/// The estimator as an explicit linear map `L` with `vec V = L (e kron e)`.
///
/// `L = R' [D'(M kron M) D]^{-1} D'`
pub fn hrk_map<T: Real>(design: &RegressionDesign<T>, dd: &DenseDesign<T>, cap: usize) -> Result<DMatrix<T>> {
    let mm = m_kron_m(design, cap)?;
    let core = dd.d.tr_mul(&(&mm * &dd.d));
    let core_inv = checked_inverse(&core).ok_or(Error::SingularCore)?;
    Ok(r_transpose(design, dd) * core_inv * dd.d.transpose())
}

fn e_kron_e<T: Real>(resid: &DVector<T>) -> DVector<T> {
    resid.kronecker(resid)
}

/// `R'[D'(M kron M)D]^{-1} D'(e kron e)` reshaped to `k x k`.
pub fn dense_hrk<T: Real>(
    design: &RegressionDesign<T>,
    dd: &DenseDesign<T>,
    resid: &DVector<T>,
    cap: usize,
) -> Result<DMatrix<T>> {
    let l = hrk_map(design, dd, cap)?;
    Ok(unvec(&(l * e_kron_e(resid)), design.n_regressors()))
}

/// Biased projection `R'(D'D)^{-1} D'(e kron e)` reshaped to `k x k`.
pub fn dense_projection<T: Real>(
    design: &RegressionDesign<T>,
    dd: &DenseDesign<T>,
    resid: &DVector<T>,
    cap: usize,
) -> Result<DMatrix<T>> {
    check_cap(design.n_obs(), cap)?;
    let dtd_inv = checked_inverse(&dd.d.tr_mul(&dd.d)).ok_or(Error::SingularCore)?;
    let pi = dtd_inv * dd.d.tr_mul(&e_kron_e(resid));
    Ok(unvec(&(r_transpose(design, dd) * pi), design.n_regressors()))
}

/// Pieces of the Woodbury route.
#[derive(Debug, Clone)]
pub struct WoodburyPieces<T: Real> {
    /// `D'D - D'(I kron P)D - D'(P kron I)D`
    pub a: DMatrix<T>,
    /// `F = D'(X kron X)`
    pub f: DMatrix<T>,
    /// `F'A^{-1}`
    pub ft_a_inv: DMatrix<T>,
}

pub fn woodbury_pieces<T: Real>(
    design: &RegressionDesign<T>,
    dd: &DenseDesign<T>,
    cap: usize,
) -> Result<WoodburyPieces<T>> {
    let n = design.n_obs();
    check_cap(n, cap)?;
    let x = design.x();
    let p = x * design.gram_inv() * x.transpose();
    let eye = DMatrix::<T>::identity(n, n);
    let d = &dd.d;
    let a = d.tr_mul(d) - d.tr_mul(&(eye.kronecker(&p) * d)) - d.tr_mul(&(p.kronecker(&eye) * d));
    let a_inv = checked_inverse(&a).ok_or(Error::SingularA)?;
    let f = d.tr_mul(&x.kronecker(x));
    let ft_a_inv = f.transpose() * a_inv;
    Ok(WoodburyPieces { a, f, ft_a_inv })
}

/// `(W + F'A^{-1}F)^{-1} F'A^{-1} D'(e kron e)` with `W = X'X kron X'X`.
pub fn dense_hrk_woodbury<T: Real>(
    design: &RegressionDesign<T>,
    dd: &DenseDesign<T>,
    resid: &DVector<T>,
    cap: usize,
) -> Result<DMatrix<T>> {
    let wp = woodbury_pieces(design, dd, cap)?;
    let w = design.gram().kronecker(design.gram());
    let outer = w + &wp.ft_a_inv * &wp.f;
    let outer_inv = checked_inverse(&outer).ok_or(Error::SingularA)?;
    let v = outer_inv * (&wp.ft_a_inv * dd.d.tr_mul(&e_kron_e(resid)));
    Ok(unvec(&v, design.n_regressors()))
}

/// Mean of an estimator versus the truth at a given `Sigma`.
#[derive(Debug, Clone)]
pub struct ExpectationCheck<T: Real> {
    /// Estimator applied to `E(e kron e) = (M kron M) vec Sigma`.
    pub expected: DMatrix<T>,
    /// `(X'X)^{-1} X' Sigma X (X'X)^{-1}`
    pub truth: DMatrix<T>,
    /// `max |expected - truth| / max |truth|` (absolute if the truth is zero)
    pub max_rel_error: T,
}

/// Applies a quadratic estimator to the exact mean of `e kron e`.
///
/// The estimator is given as a function of a residual vector; it must be a
/// quadratic form in that vector. `E(e kron e) = vec(M Sigma M)` is expanded
/// in eigenvectors of `M Sigma M`, so that `sum_j lambda_j f(z_j)` is the
/// estimator's linear map applied to the mean.
pub fn expectation_check<T: Real, F>(
    design: &RegressionDesign<T>,
    sigma: &DMatrix<T>,
    estimator: F,
    cap: usize,
) -> Result<ExpectationCheck<T>>
where
    F: Fn(&DVector<T>) -> Result<DMatrix<T>>,
{
    let n = design.n_obs();
    let k = design.n_regressors();
    let mm = m_kron_m(design, cap)?;
    let mean = symmetric_part(&unvec(&(mm * vec_of(sigma)), n));
    let eig = mean.symmetric_eigen();
    let mut expected = DMatrix::zeros(k, k);
    for j in 0..n {
        let lam = eig.eigenvalues[j];
        if lam != T::zero() {
            let z = eig.eigenvectors.column(j).into_owned();
            expected += estimator(&z)? * lam;
        }
    }
    let h = design.gram_inv();
    let x = design.x();
    let truth = h * x.transpose() * sigma * x * h;
    let scale = max_abs(&truth);
    let err = max_abs(&(&expected - &truth));
    let max_rel_error = if scale > T::zero() { err / scale } else { err };
    Ok(ExpectationCheck {
        expected,
        truth,
        max_rel_error,
    })
}

/// Dense `BB'` (`n x n`).
pub fn dense_bb<T: Real>(clustering: &Clustering, cap: usize) -> Result<DMatrix<T>> {
    let n = clustering.n_obs();
    check_cap(n, cap)?;
    let of = clustering.cluster_of();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if of[i] == of[j] {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Dense `tr(AMAM)`.
pub fn dense_tr_amam<T: Real>(design: &RegressionDesign<T>, a: &DMatrix<T>) -> T {
    let am = a * design.annihilator();
    (&am * &am).trace()
}

/// Dense `tr(AM Sigma M AM Sigma M)`.
pub fn dense_tr_amsm_sq<T: Real>(design: &RegressionDesign<T>, a: &DMatrix<T>, sigma: &DMatrix<T>) -> T {
    let m = design.annihilator();
    let x = a * &m * sigma * &m;
    (&x * &x).trace()
}

/// `vec A` for coefficient `l` read off an explicit map `L` (row `l + k l`),
/// reshaped and symmetrized.
pub fn dense_a_from_map<T: Real>(map: &DMatrix<T>, k: usize, ell: usize) -> DMatrix<T> {
    let row: DVector<T> = map.row(ell + k * ell).transpose();
    let n = (row.len() as f64).sqrt().round() as usize;
    symmetric_part(&unvec(&row, n))
}

/// Fixed seeds for randomized reference instances.
pub const SEEDS: [u64; 50] = [
    11, 23, 37, 41, 59, 67, 73, 89, 97, 101, 113, 127, 131, 149, 151, 163, 173, 181, 191, 199, 211, 223, 233, 241, 257,
    263, 271, 283, 293, 307, 317, 331, 347, 353, 367, 379, 389, 397, 401, 419, 431, 443, 457, 461, 479, 487, 499, 503,
    521, 541,
];

/// A small random clustered regression.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub seed: u64,
    pub fit: OlsFit<f64>,
}

impl RandomInstance {
    pub fn design(&self) -> &Arc<RegressionDesign<f64>> {
        &self.fit.design
    }
}

/// `n <= 36`, `C` in `3..=6`, `k` in `1..=3` with an intercept, every cluster
/// of size at least two.
///
/// Draws that make any estimator nonexistent (for instance an unrestricted
/// system that is exactly singular) are discarded and redrawn from the same
/// stream, so every instance supports all methods.
pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let fit = draw_instance(&mut rng);
        if Method::ALL
            .iter()
            .all(|&m| crate::estimators::engine(&fit.design, m).is_ok())
        {
            return RandomInstance { seed, fit };
        }
    }
}

fn draw_instance(rng: &mut ChaCha8Rng) -> OlsFit<f64> {
    let cc = rng.random_range(3..=6usize);
    let k = rng.random_range(1..=3usize);
    let sizes: Vec<usize> = (0..cc).map(|_| rng.random_range(2..=6usize)).collect();
    let clustering = Clustering::from_sizes(&sizes).expect("positive sizes");
    let n = clustering.n_obs();
    let shift: Vec<Vec<f64>> = (0..cc)
        .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut x = DMatrix::from_element(n, k, 1.0);
    for i in 0..n {
        let c = clustering.cluster_of()[i];
        for j in 1..k {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] = 0.7 * shift[c][j] + e;
        }
    }
    let effect: Vec<f64> = (0..cc).map(|_| rng.sample(StandardNormal)).collect();
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = rng.sample(StandardNormal);
        0.5 * effect[clustering.cluster_of()[i]] + e
    });
    let design = Arc::new(RegressionDesign::new(x, clustering).expect("full rank"));
    design.fit(&y)
}

/// A random covariance matrix in the family of `structure`.
pub fn random_sigma(structure: Structure, clustering: &Clustering, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_167a);
    let n = clustering.n_obs();
    let mut sigma = DMatrix::zeros(n, n);
    let put_block = |sigma: &mut DMatrix<f64>, idx: &[usize], block: &DMatrix<f64>| {
        for (p, &i) in idx.iter().enumerate() {
            for (q, &j) in idx.iter().enumerate() {
                sigma[(i, j)] = block[(p, q)];
            }
        }
    };
    match structure {
        Structure::Equicorrelated => {
            let s2 = rng.random_range(0.5..2.0);
            let t2 = rng.random_range(0.0..1.0);
            for c in 0..clustering.len() {
                let m = clustering.size(c);
                let b = DMatrix::from_element(m, m, t2) + DMatrix::identity(m, m) * s2;
                put_block(&mut sigma, clustering.members(c), &b);
            }
        }
        Structure::ClusterSpecific => {
            for c in 0..clustering.len() {
                let s2 = rng.random_range(0.5..2.0);
                let t2 = rng.random_range(0.0..1.0);
                let m = clustering.size(c);
                let b = DMatrix::from_element(m, m, t2) + DMatrix::identity(m, m) * s2;
                put_block(&mut sigma, clustering.members(c), &b);
            }
        }
        Structure::Unrestricted => {
            for c in 0..clustering.len() {
                let m = clustering.size(c);
                let l = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
                put_block(&mut sigma, clustering.members(c), &(&l * l.transpose()));
            }
        }
        Structure::Panel { n_units, n_waves } => {
            let t = n_waves;
            let l = DMatrix::from_fn(t, t, |_, _| rng.sample::<f64, _>(StandardNormal));
            let lam = &l * l.transpose();
            for u in 0..n_units {
                let idx: Vec<usize> = (u * t..(u + 1) * t).collect();
                put_block(&mut sigma, &idx, &lam);
            }
        }
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equicorrelated_columns() {
        let cl = Clustering::from_sizes(&[2, 2]).unwrap();
        let dd = build_design::<f64>(Structure::Equicorrelated, &cl, DEFAULT_CAP).unwrap();
        assert_eq!(unvec(&dd.d.column(0).into_owned(), 4), DMatrix::identity(4, 4));
        let want = DMatrix::from_fn(4, 4, |i, j| if i / 2 == j / 2 { 1.0 } else { 0.0 });
        assert_eq!(unvec(&dd.d.column(1).into_owned(), 4), want);
    }

    #[test]
    fn unrestricted_param_count() {
        let cl = Clustering::from_sizes(&[2, 1]).unwrap();
        let dd = build_design::<f64>(Structure::Unrestricted, &cl, DEFAULT_CAP).unwrap();
        assert_eq!(dd.n_params(), 5);
        for j in 0..5 {
            let m = unvec(&dd.d.column(j).into_owned(), 3);
            assert_eq!(m.sum(), 1.0);
        }
    }

    #[test]
    fn cluster_specific_gram() {
        let sizes = [2, 3, 4];
        let cl = Clustering::from_sizes(&sizes).unwrap();
        let dd = build_design::<f64>(Structure::ClusterSpecific, &cl, DEFAULT_CAP).unwrap();
        let dtd = dd.d.tr_mul(&dd.d);
        for (c, &m) in sizes.iter().enumerate() {
            let m = m as f64;
            assert_eq!(dtd[(c, c)], m);
            assert_eq!(dtd[(c, 3 + c)], m);
            assert_eq!(dtd[(3 + c, c)], m);
            assert_eq!(dtd[(3 + c, 3 + c)], m * m);
        }
        assert_eq!(dtd.iter().filter(|&&v| v != 0.0).count(), 12);
    }

    #[test]
    fn columns_are_symmetric() {
        let cl = Clustering::from_sizes(&[3, 2]).unwrap();
        for s in [
            Structure::Equicorrelated,
            Structure::ClusterSpecific,
            Structure::Unrestricted,
            Structure::Panel { n_units: 1, n_waves: 5 },
        ] {
            let dd = build_design::<f64>(s, &cl, DEFAULT_CAP).unwrap();
            let sym =
                dd.d.column_iter()
                    .map(|c| unvec(&c.into_owned(), 5))
                    .fold(DMatrix::zeros(5, 5), |acc: DMatrix<f64>, m| acc + m);
            assert_eq!(sym, sym.transpose(), "{s:?}");
        }
    }

    #[test]
    fn cap_enforced() {
        let cl = Clustering::from_sizes(&[40, 40]).unwrap();
        assert_eq!(
            build_design::<f64>(Structure::Equicorrelated, &cl, DEFAULT_CAP).unwrap_err(),
            Error::TooLargeForOracle { n: 80, cap: 64 }
        );
    }
}

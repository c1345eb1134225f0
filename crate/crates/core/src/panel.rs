//! Homogeneous panel model `Sigma = I_N kron Lambda` with `T` waves per unit.
//!
//! The unbiased estimator only inverts a `T^2 x T^2` system.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{Method, VarianceEstimate};
use crate::linalg::{checked_inverse, symmetric_part, unvec};
use crate::model::{Clustering, OlsFit, RegressionDesign};
use crate::scalar::{count, Real};

/// Rectangular panel stored unit-major: rows `i*T .. (i+1)*T` belong to unit `i`.
#[derive(Debug, Clone)]
pub struct PanelDataset<T: Real> {
    pub n_units: usize,
    pub n_waves: usize,
    pub y: DVector<T>,
    pub x: DMatrix<T>,
}

impl<T: Real> PanelDataset<T> {
    pub fn new(n_units: usize, n_waves: usize, y: DVector<T>, x: DMatrix<T>) -> Result<Self> {
        let n = n_units * n_waves;
        if n_waves == 0 || n_units == 0 || y.len() != n || x.nrows() != n {
            return Err(Error::Dimension(format!(
                "panel {n_units} x {n_waves} needs {n} rows, got y {} and X {}",
                y.len(),
                x.nrows()
            )));
        }
        Ok(Self { n_units, n_waves, y, x })
    }

    /// Builds a panel from long-format rows keyed by `(unit, wave)`.
    ///
    /// Units and waves are ordered by key; every unit must have every wave once.
    pub fn from_long<U: Ord + Clone + std::fmt::Debug, W: Ord + Clone>(
        units: &[U],
        waves: &[W],
        y: &[T],
        x: &DMatrix<T>,
    ) -> Result<Self> {
        let n = units.len();
        if waves.len() != n || y.len() != n || x.nrows() != n {
            return Err(Error::Dimension("unit, wave, y and X lengths differ".into()));
        }
        let wave_index: BTreeMap<W, usize> = {
            let mut all: Vec<W> = waves.to_vec();
            all.sort();
            all.dedup();
            all.into_iter().enumerate().map(|(i, w)| (w, i)).collect()
        };
        let t = wave_index.len();
        let mut by_unit: BTreeMap<U, Vec<Option<usize>>> = BTreeMap::new();
        for row in 0..n {
            let slots = by_unit.entry(units[row].clone()).or_insert_with(|| vec![None; t]);
            let w = wave_index[&waves[row]];
            if slots[w].replace(row).is_some() {
                return Err(Error::Dimension(format!("unit {:?} has a repeated wave", units[row])));
            }
        }
        let order: Vec<usize> = by_unit
            .iter()
            .enumerate()
            .map(|(i, (_, slots))| {
                let found = slots.iter().filter(|s| s.is_some()).count();
                if found == t {
                    Ok(slots.iter().map(|s| s.unwrap()).collect::<Vec<_>>())
                } else {
                    Err(Error::UnbalancedPanel {
                        unit: i,
                        found,
                        expected: t,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let yv = DVector::from_iterator(n, order.iter().map(|&r| y[r]));
        let xm = DMatrix::from_fn(n, x.ncols(), |i, j| x[(order[i], j)]);
        Self::new(by_unit.len(), t, yv, xm)
    }

    pub fn clustering(&self) -> Clustering {
        Clustering::from_sizes(&vec![self.n_waves; self.n_units]).expect("nonempty units")
    }
}

/// OLS on a panel, keeping the panel shape.
#[derive(Debug, Clone)]
pub struct PanelFit<T: Real> {
    pub n_units: usize,
    pub n_waves: usize,
    pub fit: OlsFit<T>,
}

pub fn fit_panel<T: Real>(data: &PanelDataset<T>) -> Result<PanelFit<T>> {
    let design = Arc::new(RegressionDesign::new(data.x.clone(), data.clustering())?);
    Ok(PanelFit {
        n_units: data.n_units,
        n_waves: data.n_waves,
        fit: design.fit(&data.y),
    })
}

/// Result of a panel estimator: the `T x T` `Lambda` and the coefficient covariance.
#[derive(Debug, Clone)]
pub struct PanelEstimate<T: Real> {
    pub lambda: DMatrix<T>,
    pub variance: VarianceEstimate<T>,
}

/// Residual-independent parts of the unbiased panel estimator.
#[derive(Debug, Clone)]
pub struct PanelEngine<T: Real> {
    design: Arc<RegressionDesign<T>>,
    n_waves: usize,
    /// `(A + F W^{-1} F')^{-1}`, `T^2 x T^2`
    system_inv: DMatrix<T>,
}

impl<T: Real> PanelEngine<T> {
    pub fn new(pf: &PanelFit<T>) -> Result<Self> {
        if pf.n_units < 2 {
            return Err(Error::TooFewUnits {
                min: 2,
                found: pf.n_units,
            });
        }
        let design = &pf.fit.design;
        let t = pf.n_waves;
        let h = design.gram_inv();
        let eye = DMatrix::<T>::identity(t, t);
        let xs: Vec<&DMatrix<T>> = (0..pf.n_units).map(|i| design.cluster_x(i)).collect();
        let mut sum_p = DMatrix::zeros(t, t);
        for xi in &xs {
            sum_p += *xi * h * xi.transpose();
        }
        let a =
            DMatrix::identity(t * t, t * t) * count::<T>(pf.n_units) - eye.kronecker(&sum_p) - sum_p.kronecker(&eye);
        // F W^{-1} F' = sum_ij P_ij kron P_ij with P_ij = X_i H X_j'
        let mut fwf = DMatrix::zeros(t * t, t * t);
        let hx: Vec<DMatrix<T>> = xs.iter().map(|xi| h * xi.transpose()).collect();
        for xi in &xs {
            for hxj in &hx {
                let pij = *xi * hxj;
                fwf += pij.kronecker(&pij);
            }
        }
        let system_inv = checked_inverse(&(a + fwf)).ok_or(Error::SingularPanelSystem)?;
        Ok(Self {
            design: Arc::clone(design),
            n_waves: t,
            system_inv,
        })
    }

    pub fn system_order(&self) -> usize {
        self.system_inv.nrows()
    }

    pub fn estimate(&self, resid: &DVector<T>) -> PanelEstimate<T> {
        let t = self.n_waves;
        let mut q = DVector::zeros(t * t);
        for i in 0..self.design.n_clusters() {
            let e = resid.rows(i * t, t).into_owned();
            q += e.kronecker(&e);
        }
        let lambda = symmetric_part(&unvec(&(&self.system_inv * q), t));
        let variance = panel_sandwich(&self.design, &lambda, Method::PanelUnbiased);
        PanelEstimate { lambda, variance }
    }
}

/// `(X'X)^{-1} (sum_i X_i' Lambda X_i) (X'X)^{-1}`
fn panel_sandwich<T: Real>(design: &RegressionDesign<T>, lambda: &DMatrix<T>, method: Method) -> VarianceEstimate<T> {
    let k = design.n_regressors();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..design.n_clusters() {
        let xi = design.cluster_x(i);
        meat += xi.transpose() * lambda * xi;
    }
    let h = design.gram_inv();
    VarianceEstimate::new(h * meat * h, method)
}

/// Unbiased `Lambda` and coefficient covariance under `Sigma = I_N kron Lambda`.
pub fn panel_unbiased<T: Real>(pf: &PanelFit<T>) -> Result<PanelEstimate<T>> {
    Ok(PanelEngine::new(pf)?.estimate(pf.fit.resid()))
}

/// Plug-in `Lambda = sum_i e_i e_i' / N`.
pub fn panel_plugin<T: Real>(pf: &PanelFit<T>) -> PanelEstimate<T> {
    let t = pf.n_waves;
    let resid = pf.fit.resid();
    let mut lambda = DMatrix::zeros(t, t);
    for i in 0..pf.n_units {
        let e = resid.rows(i * t, t);
        lambda += e * e.transpose();
    }
    lambda /= count::<T>(pf.n_units);
    let variance = panel_sandwich(&pf.fit.design, &lambda, Method::PanelPlugin);
    PanelEstimate { lambda, variance }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(n_units: usize, t: usize, k: usize) -> PanelDataset<f64> {
        let n = n_units * t;
        let x = DMatrix::from_fn(n, k, |i, j| {
            if j == 0 {
                1.0
            } else {
                ((i * (j + 3) * 13 % 17) as f64 / 5.0).sin()
            }
        });
        let y = DVector::from_fn(n, |i, _| ((i * 7 % 11) as f64).cos());
        PanelDataset::new(n_units, t, y, x).unwrap()
    }

    #[test]
    fn t1_reduces_to_homogeneous_variance() {
        let pf = fit_panel(&panel(9, 1, 2)).unwrap();
        let est = panel_unbiased(&pf).unwrap();
        let want = pf.fit.residuals.rss / (9.0 - 2.0);
        assert!((est.lambda[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn zero_residuals() {
        let data = panel(5, 3, 2);
        let y = &data.x * DVector::from_column_slice(&[0.4, -1.0]);
        let pf = fit_panel(&PanelDataset::new(5, 3, y, data.x.clone()).unwrap()).unwrap();
        let u = panel_unbiased(&pf).unwrap();
        let p = panel_plugin(&pf);
        assert!(u.lambda.amax() < 1e-12 && u.variance.v.amax() < 1e-12);
        assert!(p.lambda.amax() < 1e-24 && p.variance.v.amax() < 1e-24);
    }

    #[test]
    fn lambda_symmetric_and_system_is_t_squared() {
        let pf = fit_panel(&panel(6, 4, 3)).unwrap();
        let engine = PanelEngine::new(&pf).unwrap();
        assert_eq!(engine.system_order(), 16);
        let est = engine.estimate(pf.fit.resid());
        assert_eq!(est.lambda, est.lambda.transpose());
    }

    #[test]
    fn plugin_single_unit_is_rank_one() {
        let pf = fit_panel(&panel(1, 4, 1)).unwrap();
        let p = panel_plugin(&pf);
        let e = pf.fit.resid();
        assert!((&p.lambda - e * e.transpose()).amax() < 1e-15);
        assert_eq!(
            panel_unbiased(&pf).unwrap_err(),
            Error::TooFewUnits { min: 2, found: 1 }
        );
    }

    #[test]
    fn plugin_matches_direct_sum() {
        let pf = fit_panel(&panel(5, 3, 2)).unwrap();
        let p = panel_plugin(&pf);
        let d = &pf.fit.design;
        let e = pf.fit.resid();
        let mut lam = DMatrix::zeros(3, 3);
        for j in 0..5 {
            let ej = e.rows(j * 3, 3);
            lam += ej * ej.transpose() / 5.0;
        }
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..5 {
            let xi = d.x().rows(i * 3, 3);
            meat += xi.transpose() * &lam * xi;
        }
        let want = d.gram_inv() * meat * d.gram_inv();
        assert!((p.variance.v - want).amax() < 1e-14);
    }

    #[test]
    fn from_long_sorts_and_validates() {
        let units = ["b", "a", "b", "a"];
        let waves = [2, 2, 1, 1];
        let y = [4.0, 2.0, 3.0, 1.0];
        let x = DMatrix::from_column_slice(4, 1, &[40.0, 20.0, 30.0, 10.0]);
        let p = PanelDataset::from_long(&units, &waves, &y, &x).unwrap();
        assert_eq!(p.y.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.x.column(0).as_slice(), &[10.0, 20.0, 30.0, 40.0]);

        let e = PanelDataset::from_long(&units[..3], &waves[..3], &y[..3], &x.rows(0, 3).into_owned());
        assert!(matches!(e, Err(Error::UnbalancedPanel { .. })));
    }
}

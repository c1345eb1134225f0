//! Data model, OLS fit and the cluster aggregates every estimator consumes.
//!
//! The cluster indicator matrix `B` and the selection matrices `G_c` are never
//! materialized. Products with them are grouped sums over [`Clustering`].

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{count, lit, to_f64, Real};

/// Relative threshold on the Gram matrix spectrum for the rank check.
pub const RANK_RTOL: f64 = 1e-10;

/// Partition of `0..n` into `C` nonempty clusters indexed `0..C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    cluster_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Clustering {
    /// Builds a clustering from contiguous indices `0..C`.
    pub fn new(cluster_of: Vec<usize>) -> Result<Self> {
        let c = cluster_of.iter().map(|&g| g + 1).max().unwrap_or(0);
        let mut members = vec![Vec::new(); c];
        for (i, &g) in cluster_of.iter().enumerate() {
            members[g].push(i);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::EmptyCluster(empty));
        }
        Ok(Self { cluster_of, members })
    }

    /// Maps arbitrary labels to `0..C` in order of first appearance.
    pub fn from_labels<L: Eq + Hash + Clone>(labels: &[L]) -> Self {
        let mut index: HashMap<L, usize> = HashMap::new();
        let cluster_of = labels
            .iter()
            .map(|l| {
                let next = index.len();
                *index.entry(l.clone()).or_insert(next)
            })
            .collect();
        Self::new(cluster_of).expect("first-appearance labels are contiguous")
    }

    /// Consecutive blocks of the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let cluster_of = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &m)| std::iter::repeat_n(c, m))
            .collect::<Vec<_>>();
        let clustering = Self::new(cluster_of)?;
        if clustering.len() != sizes.len() {
            return Err(Error::EmptyCluster(clustering.len()));
        }
        Ok(clustering)
    }

    pub fn n_obs(&self) -> usize {
        self.cluster_of.len()
    }

    /// Number of clusters `C`.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    /// Observation indices of cluster `c`.
    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn size(&self, c: usize) -> usize {
        self.members[c].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// `sum_c n_c^2`.
    pub fn sum_sq_sizes(&self) -> usize {
        self.members.iter().map(|m| m.len() * m.len()).sum()
    }

    /// `B'v`: per-cluster sums of an observation vector.
    pub fn cluster_sums<T: Real>(&self, v: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(
            self.len(),
            self.members.iter().map(|m| m.iter().fold(T::zero(), |s, &i| s + v[i])),
        )
    }

    /// `BB'v`: each observation receives the sum over its own cluster.
    pub fn expand_cluster_sums<T: Real>(&self, v: &DVector<T>) -> DVector<T> {
        let sums = self.cluster_sums(v);
        DVector::from_iterator(self.n_obs(), self.cluster_of.iter().map(|&c| sums[c]))
    }

    /// Rows of `x` belonging to cluster `c`.
    pub fn rows<T: Real>(&self, x: &DMatrix<T>, c: usize) -> DMatrix<T> {
        x.select_rows(self.members[c].iter())
    }

    /// Entries of `v` belonging to cluster `c`.
    pub fn entries<T: Real>(&self, v: &DVector<T>, c: usize) -> DVector<T> {
        DVector::from_iterator(self.size(c), self.members[c].iter().map(|&i| v[i]))
    }
}

/// Outcome, regressors and cluster partition.
#[derive(Debug, Clone)]
pub struct ClusteredDataset<T: Real> {
    pub y: DVector<T>,
    pub x: DMatrix<T>,
    pub clustering: Clustering,
}

impl<T: Real> ClusteredDataset<T> {
    pub fn new(y: DVector<T>, x: DMatrix<T>, clustering: Clustering) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || clustering.n_obs() != n {
            return Err(Error::Dimension(format!(
                "y has {n} rows, X has {}, clustering covers {}",
                x.nrows(),
                clustering.n_obs()
            )));
        }
        if n <= x.ncols() {
            return Err(Error::TooFewObservations { n, k: x.ncols() });
        }
        Ok(Self { y, x, clustering })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_regressors(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.clustering.len()
    }
}

/// Residual-independent scalars built from `(X'X)^{-1}` and `X~ = B'X`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarStats<T: Real> {
    /// `tr (X'X)^{-1} X~'X~`
    pub s: T,
    /// `tr [(X'X)^{-1} X~'X~]^2`
    pub s_dot: T,
    /// `tr (X'X)^{-1} X~' diag(n_c) X~`
    pub s_breve: T,
    /// `s_c = tr (X'X)^{-1} X_c'X_c`
    pub s_c: Vec<T>,
    /// `s~_c = x~_c' (X'X)^{-1} x~_c`
    pub s_tilde_c: Vec<T>,
}

/// Everything that depends on the regressors and clustering but not on `y`.
///
/// Built once per design and shared (behind an `Arc`) by every fit on it.
#[derive(Debug, Clone)]
pub struct RegressionDesign<T: Real> {
    x: DMatrix<T>,
    clustering: Clustering,
    gram: DMatrix<T>,
    gram_inv: DMatrix<T>,
    xtil: DMatrix<T>,
    cluster_x: Vec<DMatrix<T>>,
    cluster_gram: Vec<DMatrix<T>>,
    /// `(X'X)^{-1} X~'X~ (X'X)^{-1}`
    between: DMatrix<T>,
    stats: ScalarStats<T>,
}

impl<T: Real> RegressionDesign<T> {
    pub fn new(x: DMatrix<T>, clustering: Clustering) -> Result<Self> {
        let (n, k) = x.shape();
        if clustering.n_obs() != n {
            return Err(Error::Dimension(format!(
                "X has {n} rows, clustering covers {}",
                clustering.n_obs()
            )));
        }
        if n <= k {
            return Err(Error::TooFewObservations { n, k });
        }
        let gram = x.tr_mul(&x);
        let max_diag = gram.diagonal().max();
        let min_eig = crate::linalg::min_eigenvalue(&gram);
        let ratio = if max_diag > T::zero() {
            min_eig / max_diag
        } else {
            T::zero()
        };
        if !(ratio > lit(RANK_RTOL)) {
            return Err(Error::RankDeficient { ratio: to_f64(ratio) });
        }
        let gram_inv = gram
            .clone()
            .cholesky()
            .ok_or(Error::RankDeficient { ratio: to_f64(ratio) })?
            .inverse();
        let gram_inv = crate::linalg::symmetric_part(&gram_inv);

        let cluster_x: Vec<DMatrix<T>> = (0..clustering.len()).map(|c| clustering.rows(&x, c)).collect();
        let cluster_gram: Vec<DMatrix<T>> = cluster_x.iter().map(|xc| xc.tr_mul(xc)).collect();
        let mut xtil = DMatrix::zeros(clustering.len(), k);
        for (c, xc) in cluster_x.iter().enumerate() {
            for j in 0..k {
                xtil[(c, j)] = xc.column(j).sum();
            }
        }

        let xtx_til = xtil.tr_mul(&xtil);
        let h_btb = &gram_inv * &xtx_til;
        let between = &h_btb * &gram_inv;
        let s_c: Vec<T> = cluster_gram
            .iter()
            .map(|g| crate::linalg::trace_of_product(&gram_inv, g))
            .collect();
        let s_tilde_c: Vec<T> = (0..clustering.len())
            .map(|c| {
                let xc = xtil.row(c).transpose();
                (xc.transpose() * &gram_inv * &xc)[(0, 0)]
            })
            .collect();
        let s = s_tilde_c.iter().fold(T::zero(), |a, &b| a + b);
        let s_dot = crate::linalg::trace_of_product(&h_btb, &h_btb);
        let s_breve = s_tilde_c
            .iter()
            .enumerate()
            .fold(T::zero(), |a, (c, &st)| a + count::<T>(clustering.size(c)) * st);

        Ok(Self {
            x,
            clustering,
            gram,
            gram_inv,
            xtil,
            cluster_x,
            cluster_gram,
            between,
            stats: ScalarStats {
                s,
                s_dot,
                s_breve,
                s_c,
                s_tilde_c,
            },
        })
    }

    /// Fits OLS for outcome `y` on this design.
    pub fn fit(self: &Arc<Self>, y: &DVector<T>) -> OlsFit<T> {
        assert_eq!(y.len(), self.n_obs(), "outcome length");
        let beta = &self.gram_inv * self.x.tr_mul(y);
        let resid = y - &self.x * &beta;
        OlsFit {
            design: Arc::clone(self),
            beta,
            residuals: Residuals::new(self, resid),
        }
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn clustering(&self) -> &Clustering {
        &self.clustering
    }

    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_regressors(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.clustering.len()
    }

    /// `X'X`
    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    /// `(X'X)^{-1}`
    pub fn gram_inv(&self) -> &DMatrix<T> {
        &self.gram_inv
    }

    /// `X~ = B'X` (`C x k`), rows are the cluster sums `x~_c'`.
    pub fn xtil(&self) -> &DMatrix<T> {
        &self.xtil
    }

    /// `x~_c` as a column.
    pub fn xtil_c(&self, c: usize) -> DVector<T> {
        self.xtil.row(c).transpose()
    }

    /// `X_c`
    pub fn cluster_x(&self, c: usize) -> &DMatrix<T> {
        &self.cluster_x[c]
    }

    /// `X_c'X_c`
    pub fn cluster_gram(&self, c: usize) -> &DMatrix<T> {
        &self.cluster_gram[c]
    }

    /// `(X'X)^{-1} X~'X~ (X'X)^{-1}`
    pub fn between(&self) -> &DMatrix<T> {
        &self.between
    }

    pub fn stats(&self) -> &ScalarStats<T> {
        &self.stats
    }

    pub fn sum_sq_sizes(&self) -> T {
        count(self.clustering.sum_sq_sizes())
    }

    /// `M = I - X (X'X)^{-1} X'`, dense. Reference paths only.
    pub fn annihilator(&self) -> DMatrix<T> {
        let n = self.n_obs();
        DMatrix::identity(n, n) - &self.x * &self.gram_inv * self.x.transpose()
    }
}

/// Residual aggregates: the only data-dependent inputs the estimators need.
#[derive(Debug, Clone)]
pub struct Residuals<T: Real> {
    /// `e = M y`
    pub resid: DVector<T>,
    /// `e~ = B'e`
    pub cluster_sum: DVector<T>,
    /// `e_c'e_c` per cluster
    pub cluster_rss: DVector<T>,
    /// `X_c'e_c` as columns of a `k x C` matrix
    pub scores: DMatrix<T>,
    /// `e'e`
    pub rss: T,
    /// `e~'e~`
    pub rss_cluster: T,
}

impl<T: Real> Residuals<T> {
    /// Aggregates an arbitrary vector on the design, used both for fitted
    /// residuals and for the linear-functional checks.
    pub fn new(design: &RegressionDesign<T>, resid: DVector<T>) -> Self {
        let cl = design.clustering();
        let cluster_sum = cl.cluster_sums(&resid);
        let mut cluster_rss = DVector::zeros(cl.len());
        let mut scores = DMatrix::zeros(design.n_regressors(), cl.len());
        for c in 0..cl.len() {
            let ec = cl.entries(&resid, c);
            cluster_rss[c] = ec.norm_squared();
            scores.set_column(c, &design.cluster_x(c).tr_mul(&ec));
        }
        let rss = resid.norm_squared();
        let rss_cluster = cluster_sum.norm_squared();
        Self {
            resid,
            cluster_sum,
            cluster_rss,
            scores,
            rss,
            rss_cluster,
        }
    }

    /// Per-cluster residual block `e_c`.
    pub fn cluster(&self, design: &RegressionDesign<T>, c: usize) -> DVector<T> {
        design.clustering().entries(&self.resid, c)
    }
}

/// OLS coefficients plus residual aggregates on a shared design.
#[derive(Debug, Clone)]
pub struct OlsFit<T: Real> {
    pub design: Arc<RegressionDesign<T>>,
    pub beta: DVector<T>,
    pub residuals: Residuals<T>,
}

impl<T: Real> OlsFit<T> {
    pub fn resid(&self) -> &DVector<T> {
        &self.residuals.resid
    }

    pub fn n_obs(&self) -> usize {
        self.design.n_obs()
    }

    pub fn n_regressors(&self) -> usize {
        self.design.n_regressors()
    }

    pub fn n_clusters(&self) -> usize {
        self.design.n_clusters()
    }
}

/// Fits OLS with cluster aggregates.
pub fn fit_ols<T: Real>(data: &ClusteredDataset<T>) -> Result<OlsFit<T>> {
    let design = Arc::new(RegressionDesign::new(data.x.clone(), data.clustering.clone())?);
    Ok(design.fit(&data.y))
}

/// Residual-independent scalars `s`, `s_dot`, `s_breve`, `s_c`, `s~_c`.
pub fn scalar_stats<T: Real>(fit: &OlsFit<T>) -> ScalarStats<T> {
    fit.design.stats().clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_dataset(y: &[f64], sizes: &[usize]) -> ClusteredDataset<f64> {
        let n = y.len();
        ClusteredDataset::new(
            DVector::from_column_slice(y),
            DMatrix::from_element(n, 1, 1.0),
            Clustering::from_sizes(sizes).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn labels_map_by_first_appearance() {
        let cl = Clustering::from_labels(&["ca", "ny", "ca", "tx", "ny"]);
        assert_eq!(cl.cluster_of(), &[0, 1, 0, 2, 1]);
        assert_eq!(cl.sizes(), vec![2, 2, 1]);
    }

    #[test]
    fn empty_cluster_rejected() {
        assert_eq!(Clustering::new(vec![0, 2, 2]), Err(Error::EmptyCluster(1)));
    }

    #[test]
    fn perfect_fit_has_zero_residuals() {
        let x = DMatrix::<f64>::from_row_slice(5, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 5.0]);
        let y = &x * DVector::from_column_slice(&[1.0, 2.0]);
        let data = ClusteredDataset::new(y, x, Clustering::new(vec![0, 0, 1, 1, 1]).unwrap()).unwrap();
        let fit = fit_ols(&data).unwrap();
        assert!((fit.beta[0] - 1.0).abs() < 1e-12 && (fit.beta[1] - 2.0).abs() < 1e-12);
        assert!(fit.resid().amax() < 1e-12);
    }

    #[test]
    fn intercept_only_is_sample_mean() {
        let y = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
        let fit = fit_ols(&intercept_dataset(&y, &[2, 4])).unwrap();
        let mean = y.iter().sum::<f64>() / 6.0;
        assert!((fit.beta[0] - mean).abs() < 1e-14);
        for (e, yi) in fit.resid().iter().zip(y) {
            assert!((e - (yi - mean)).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_deficiency_detected() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let data = ClusteredDataset::new(
            DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]),
            x,
            Clustering::from_sizes(&[2, 2]).unwrap(),
        )
        .unwrap();
        assert!(matches!(fit_ols(&data), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn too_few_observations() {
        let r = ClusteredDataset::new(
            DVector::from_column_slice(&[1.0, 2.0]),
            DMatrix::from_element(2, 2, 1.0),
            Clustering::from_sizes(&[1, 1]).unwrap(),
        );
        assert!(matches!(r, Err(Error::TooFewObservations { n: 2, k: 2 })));
    }

    #[test]
    fn scalar_stats_hand_example() {
        let fit = fit_ols(&intercept_dataset(&[1.0, -1.0, 0.0, 0.0], &[2, 2])).unwrap();
        let st = scalar_stats(&fit);
        assert!((st.s - 2.0).abs() < 1e-14);
        assert!((st.s_dot - 4.0).abs() < 1e-14);
        assert!((st.s_breve - 4.0).abs() < 1e-14);
    }

    #[test]
    fn singleton_clusters_give_s_equal_k() {
        let y = [0.3, 1.2, -0.5, 2.0];
        let x = DMatrix::<f64>::from_column_slice(4, 1, &[1.0, 2.0, -1.0, 0.5]);
        let data = ClusteredDataset::new(
            DVector::from_column_slice(&y),
            x,
            Clustering::new(vec![0, 1, 2, 3]).unwrap(),
        )
        .unwrap();
        let st = scalar_stats(&fit_ols(&data).unwrap());
        assert!((st.s - 1.0).abs() < 1e-14);
    }
}

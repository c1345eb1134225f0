//! Regressors and errors for the size study.
//!
//! Random streams come from one ChaCha generator per `(seed, stream)`:
//! replication `r` uses stream `r`, the fixed continuous regressor uses
//! [`X_STREAM`]. Results therefore do not depend on scheduling.

use crve::Clustering;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ErrorDesign, SimulationConfig};
use crate::error::Result;
use crate::layout::cluster_sizes;

/// Stream reserved for the study-wide continuous regressor.
pub const X_STREAM: u64 = u64::MAX;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Regressors `[i, d, x]` with `d` one on the first `treated` clusters.
#[derive(Debug, Clone)]
pub struct SimDesign {
    pub clustering: Clustering,
    pub x: DMatrix<f64>,
    pub treated: usize,
}

impl SimDesign {
    pub fn continuous(&self) -> DVector<f64> {
        self.x.column(2).into_owned()
    }

    /// The dummy is constant within every cluster and one exactly on the treated ones.
    pub fn dummy_is_cluster_constant(&self) -> bool {
        (0..self.clustering.len()).all(|c| {
            let want = if c < self.treated { 1.0 } else { 0.0 };
            self.clustering.members(c).iter().all(|&i| self.x[(i, 1)] == want)
        })
    }
}

pub fn draw_continuous<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn assemble_design(sizes: &[usize], treated: usize, continuous: &DVector<f64>) -> Result<SimDesign> {
    let clustering = Clustering::from_sizes(sizes)?;
    let n = clustering.n_obs();
    let of = clustering.cluster_of();
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => {
            if of[i] < treated {
                1.0
            } else {
                0.0
            }
        }
        _ => continuous[i],
    });
    Ok(SimDesign { clustering, x, treated })
}

/// Draws the continuous regressor from `rng` and assembles the design.
pub fn generate_design<R: Rng>(config: &SimulationConfig, treated: usize, rng: &mut R) -> Result<SimDesign> {
    let sizes = cluster_sizes(config.clusters, config.observations, config.balance)?;
    let x = draw_continuous(config.observations, rng);
    assemble_design(&sizes, treated, &x)
}

/// `(sigma_c^2, tau_c^2)` of the random-effects part for cluster `c` (0-based).
pub fn re_params(design: &ErrorDesign, c: usize, clusters: usize) -> (f64, f64) {
    match *design {
        ErrorDesign::Sv1 { sigma2, tau2 } | ErrorDesign::Sv3 { sigma2, tau2 } => (sigma2, tau2),
        ErrorDesign::Sv2 { rho, delta } => {
            let idx = (c + 1) as f64;
            let cf = clusters as f64;
            let s2 = (2.0 * delta * (cf - idx) / (cf - 1.0)).exp();
            (s2, rho * s2)
        }
    }
}

/// Draws errors independently across clusters.
pub fn draw_errors<R: Rng>(
    design: &ErrorDesign,
    clustering: &Clustering,
    continuous: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mut e = DVector::zeros(clustering.n_obs());
    let cc = clustering.len();
    for c in 0..cc {
        let (s2, t2) = re_params(design, c, cc);
        let common: f64 = rng.sample::<f64, _>(StandardNormal) * t2.sqrt();
        for &i in clustering.members(c) {
            let var = match design {
                ErrorDesign::Sv3 { .. } => s2 + continuous[i] * continuous[i] / 2.0,
                _ => s2,
            };
            e[i] = common + rng.sample::<f64, _>(StandardNormal) * var.sqrt();
        }
    }
    e
}

/// The within-cluster covariance `Sigma_c`.
pub fn cluster_covariance(
    design: &ErrorDesign,
    clustering: &Clustering,
    continuous: &DVector<f64>,
    c: usize,
) -> DMatrix<f64> {
    let (s2, t2) = re_params(design, c, clustering.len());
    let idx = clustering.members(c);
    let m = idx.len();
    let mut sigma = DMatrix::from_element(m, m, t2) + DMatrix::identity(m, m) * s2;
    if let ErrorDesign::Sv3 { .. } = design {
        for (p, &i) in idx.iter().enumerate() {
            sigma[(p, p)] += continuous[i] * continuous[i] / 2.0;
        }
    }
    sigma
}

/// `(X'X)^{-1} X' Sigma X (X'X)^{-1}` for the simulated covariance.
pub fn true_variance(design: &ErrorDesign, sim: &SimDesign, gram_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let k = sim.x.ncols();
    let cont = sim.continuous();
    let mut meat = DMatrix::zeros(k, k);
    for c in 0..sim.clustering.len() {
        let xc = sim.clustering.rows(&sim.x, c);
        meat += xc.transpose() * cluster_covariance(design, &sim.clustering, &cont, c) * &xc;
    }
    gram_inv * meat * gram_inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sv2_variance_range() {
        let d = ErrorDesign::Sv2 {
            rho: 0.1,
            delta: std::f64::consts::LN_2 / 2.0,
        };
        let (first, t_first) = re_params(&d, 0, 14);
        let (last, _) = re_params(&d, 13, 14);
        assert!((first - 2.0).abs() < 1e-12);
        assert!((last - 1.0).abs() < 1e-12);
        assert!((t_first - 0.2).abs() < 1e-12);
    }

    #[test]
    fn design_dummy_and_determinism() {
        let cfg = SimulationConfig {
            observations: 280,
            ..SimulationConfig::baseline()
        };
        let a = generate_design(&cfg, 3, &mut rng_for(9, X_STREAM)).unwrap();
        let b = generate_design(&cfg, 3, &mut rng_for(9, X_STREAM)).unwrap();
        assert_eq!(a.x, b.x);
        assert!(a.dummy_is_cluster_constant());
        assert_eq!(a.x.column(1).sum(), 60.0);
    }

    #[test]
    fn continuous_moments() {
        let x = draw_continuous(2800, &mut rng_for(1, X_STREAM));
        let mean = x.mean();
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2799.0;
        let n = 2800f64;
        assert!(mean.abs() < 4.0 / n.sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn cluster_covariance_matches_draws() {
        let cl = Clustering::from_sizes(&[3]).unwrap();
        let design = ErrorDesign::Sv1 { sigma2: 1.0, tau2: 0.1 };
        let x = DVector::zeros(3);
        let target = cluster_covariance(&design, &cl, &x, 0);
        let reps = 100_000;
        let mut rng = rng_for(5, 0);
        let draws: Vec<DVector<f64>> = (0..reps).map(|_| draw_errors(&design, &cl, &x, &mut rng)).collect();
        for a in 0..3 {
            for b in 0..3 {
                let prods: Vec<f64> = draws.iter().map(|e| e[a] * e[b]).collect();
                let m = prods.iter().sum::<f64>() / reps as f64;
                let sd = (prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
                let se = sd / (reps as f64).sqrt();
                assert!(
                    (m - target[(a, b)]).abs() < 3.0 * se,
                    "({a},{b}) {m} vs {}",
                    target[(a, b)]
                );
            }
        }
    }

    #[test]
    fn zero_tau_uncorrelated() {
        let cl = Clustering::from_sizes(&[2]).unwrap();
        let design = ErrorDesign::Sv1 { sigma2: 1.0, tau2: 0.0 };
        let x = DVector::zeros(2);
        let mut rng = rng_for(6, 0);
        let reps = 50_000;
        let s: f64 = (0..reps)
            .map(|_| {
                let e = draw_errors(&design, &cl, &x, &mut rng);
                e[0] * e[1]
            })
            .sum::<f64>()
            / reps as f64;
        assert!(s.abs() < 4.0 / (reps as f64).sqrt());
    }
}

//! Cluster size layouts.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Balance {
    /// Every cluster has `n / C` observations.
    Balanced,
    /// `n_c = int(n exp(gamma c/C) / sum_d exp(gamma d/C))` for `c < C`, the last
    /// cluster takes the remainder.
    Unbalanced { gamma: f64 },
}

pub fn cluster_sizes(clusters: usize, n: usize, balance: Balance) -> Result<Vec<usize>> {
    if clusters == 0 || n < clusters {
        return Err(crate::error::config_err(
            "observations",
            format!("need at least one observation per cluster ({n} < {clusters})"),
        ));
    }
    match balance {
        Balance::Balanced => {
            if !n.is_multiple_of(clusters) {
                return Err(SimError::NotDivisible { n, clusters });
            }
            Ok(vec![n / clusters; clusters])
        }
        Balance::Unbalanced { gamma } => {
            let cf = clusters as f64;
            let weights: Vec<f64> = (1..=clusters).map(|c| (gamma * c as f64 / cf).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut sizes: Vec<i64> = weights[..clusters - 1]
                .iter()
                .map(|w| (n as f64 * w / total).trunc() as i64)
                .collect();
            let used: i64 = sizes.iter().sum();
            sizes.push(n as i64 - used);
            if let Some((c, &s)) = sizes.iter().enumerate().find(|(_, &s)| s <= 0) {
                return Err(SimError::NonpositiveSize { cluster: c, size: s });
            }
            Ok(sizes.into_iter().map(|s| s as usize).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced() {
        assert_eq!(cluster_sizes(14, 2800, Balance::Balanced).unwrap(), vec![200; 14]);
        assert_eq!(cluster_sizes(2, 4, Balance::Balanced).unwrap(), vec![2, 2]);
        assert!(matches!(
            cluster_sizes(3, 10, Balance::Balanced),
            Err(SimError::NotDivisible { n: 10, clusters: 3 })
        ));
    }

    #[test]
    fn unbalanced_range() {
        let s = cluster_sizes(14, 2800, Balance::Unbalanced { gamma: 2.0 }).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 2800);
        assert_eq!(*s.iter().min().unwrap(), 67);
        assert_eq!(*s.iter().max().unwrap(), 438);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn extreme_gamma_rejected() {
        assert!(matches!(
            cluster_sizes(10, 20, Balance::Unbalanced { gamma: 40.0 }),
            Err(SimError::NonpositiveSize { .. })
        ));
    }
}

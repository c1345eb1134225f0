//! Cluster resampling with a placebo policy, for size checks on real data.

use std::sync::Arc;
use std::time::Instant;

use crve::{ClusteredDataset, Clustering, RegressionDesign};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::config::StudyMethod;
use crate::dgp::rng_for;
use crate::error::{config_err, Result, SimError};
use crate::study::{finish_cells, mark_missing, replicate, Context, SizeCell, Target};

/// Which clusters enter a resample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ResampleScheme {
    /// `count` clusters drawn uniformly with replacement.
    RandomWithReplacement(usize),
    /// The `top` largest and `bottom` smallest clusters, ties broken by index.
    BySize { top: usize, bottom: usize },
}

impl ResampleScheme {
    fn pick(&self, clustering: &Clustering, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let available = clustering.len();
        match *self {
            Self::RandomWithReplacement(0) => Err(SimError::Resample("cannot draw zero clusters".into())),
            Self::RandomWithReplacement(count) => Ok((0..count).map(|_| rng.random_range(0..available)).collect()),
            Self::BySize { top, bottom } => {
                if top + bottom > available {
                    return Err(SimError::Resample(format!(
                        "{top} largest plus {bottom} smallest exceeds the {available} available clusters"
                    )));
                }
                if top + bottom == 0 {
                    return Err(SimError::Resample("cannot select zero clusters".into()));
                }
                let mut order: Vec<usize> = (0..available).collect();
                order.sort_by_key(|&c| (std::cmp::Reverse(clustering.size(c)), c));
                let mut picked = order[..top].to_vec();
                picked.extend_from_slice(&order[available - bottom..]);
                Ok(picked)
            }
        }
    }
}

/// A resample plus the clusters that received the placebo policy.
#[derive(Debug, Clone)]
pub struct Resample {
    /// The policy indicator is the last column of `data.x`.
    pub data: ClusteredDataset<f64>,
    /// Source cluster of each new cluster.
    pub source: Vec<usize>,
    pub treated: Vec<usize>,
}

/// Draws clusters by `scheme`, keeps `within_fraction` of each cluster's rows
/// (drawn with replacement when below one) and appends a cluster-constant
/// policy column switched on for `treated_count` of the sampled clusters.
/// Repeated source clusters become distinct clusters.
pub fn resample_clusters(
    data: &ClusteredDataset<f64>,
    scheme: ResampleScheme,
    within_fraction: f64,
    treated_count: usize,
    rng: &mut impl Rng,
) -> Result<Resample> {
    if !(within_fraction > 0.0 && within_fraction <= 1.0) {
        return Err(config_err(
            "within_fraction",
            format!("must lie in (0, 1], got {within_fraction}"),
        ));
    }
    let picked = scheme.pick(&data.clustering, rng)?;
    if treated_count > picked.len() {
        return Err(config_err(
            "treated",
            format!("{treated_count} treated but only {} clusters sampled", picked.len()),
        ));
    }

    let mut rows = Vec::new();
    let mut sizes = Vec::with_capacity(picked.len());
    for (new_c, &c) in picked.iter().enumerate() {
        let members = data.clustering.members(c);
        if within_fraction == 1.0 {
            rows.extend_from_slice(members);
            sizes.push(members.len());
        } else {
            let m = (within_fraction * members.len() as f64).round() as usize;
            if m == 0 {
                return Err(SimError::EmptySubsample { cluster: new_c });
            }
            rows.extend((0..m).map(|_| members[rng.random_range(0..members.len())]));
            sizes.push(m);
        }
    }

    let mut treated: Vec<usize> = sample(rng, picked.len(), treated_count).into_vec();
    treated.sort_unstable();
    let mut on = vec![false; picked.len()];
    for &c in &treated {
        on[c] = true;
    }
    let clustering = Clustering::from_sizes(&sizes)?;
    let k = data.x.ncols();
    let x = DMatrix::from_fn(rows.len(), k + 1, |i, j| {
        if j < k {
            data.x[(rows[i], j)]
        } else if on[clustering.cluster_of()[i]] {
            1.0
        } else {
            0.0
        }
    });
    let y = DVector::from_fn(rows.len(), |i, _| data.y[rows[i]]);
    Ok(Resample {
        data: ClusteredDataset::new(y, x, clustering)?,
        source: picked,
        treated,
    })
}

/// Settings for a repeated placebo-policy study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResampleOptions {
    pub scheme: ResampleScheme,
    pub within_fraction: f64,
    pub treated: Vec<usize>,
    pub replications: usize,
    pub levels: Vec<f64>,
    pub seed: u64,
    pub methods: Vec<StudyMethod>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResampleStudyResult {
    pub options: ResampleOptions,
    pub cells: Vec<SizeCell>,
    pub elapsed_secs: f64,
}

impl ResampleStudyResult {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        crate::study::write_cells_csv(&self.cells, out)
    }

    pub fn write_json<W: std::io::Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Repeats resample, fit and test of a zero policy effect. A resample whose
/// regressors are collinear counts as nonexistence for every method.
pub fn run_resample_study(data: &ClusteredDataset<f64>, options: &ResampleOptions) -> Result<ResampleStudyResult> {
    if options.methods.is_empty() {
        return Err(config_err("methods", "no methods selected"));
    }
    if options.levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
        return Err(config_err("levels", "each level must lie in (0, 1)"));
    }
    let start = Instant::now();
    let targets = [Target {
        index: data.x.ncols(),
        name: "policy",
        null: 0.0,
    }];
    let slots = options.methods.len();
    let mut cells = Vec::new();
    for &treated in &options.treated {
        let totals = replicate(options.replications, slots, options.levels.len(), |rep, tallies| {
            let mut rng = rng_for(options.seed, rep as u64);
            let r = resample_clusters(data, options.scheme, options.within_fraction, treated, &mut rng)?;
            match RegressionDesign::new(r.data.x, r.data.clustering) {
                Ok(design) => {
                    let ctx = Context::new(Arc::new(design), &options.methods, &targets, None);
                    ctx.evaluate(&r.data.y, &targets, &options.levels, tallies);
                }
                Err(e) => mark_missing(tallies, &e.to_string()),
            }
            Ok(())
        })?;
        cells.extend(finish_cells(
            &options.methods,
            &targets,
            &options.levels,
            &totals,
            options.replications,
            treated,
        ));
    }
    Ok(ResampleStudyResult {
        options: options.clone(),
        cells,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(sizes: &[usize]) -> ClusteredDataset<f64> {
        let clustering = Clustering::from_sizes(sizes).unwrap();
        let n = clustering.n_obs();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).sin() });
        let y = DVector::from_fn(n, |i, _| i as f64);
        ClusteredDataset::new(y, x, clustering).unwrap()
    }

    #[test]
    fn by_size_picks_extremes() {
        let sizes: Vec<usize> = (0..51).map(|c| 5 + (c * 7) % 51).collect();
        let data = dataset(&sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = resample_clusters(&data, ResampleScheme::BySize { top: 3, bottom: 11 }, 1.0, 4, &mut rng).unwrap();
        assert_eq!(r.data.n_clusters(), 14);
        let mut sorted = sizes.clone();
        sorted.sort_unstable();
        let mut got = r.data.clustering.sizes();
        got.sort_unstable();
        let mut want: Vec<usize> = sorted[..11].to_vec();
        want.extend_from_slice(&sorted[48..]);
        assert_eq!(got, want);
        assert_eq!(r.treated.len(), 4);
    }

    #[test]
    fn whole_clusters_reproduce_input() {
        let data = dataset(&[3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = resample_clusters(&data, ResampleScheme::BySize { top: 3, bottom: 0 }, 1.0, 2, &mut rng).unwrap();
        let mut ys: Vec<f64> = r.data.y.iter().copied().collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, data.y.iter().copied().collect::<Vec<_>>());
        let policy = r.data.x.column(2);
        for c in 0..3 {
            let vals: Vec<f64> = r.data.clustering.members(c).iter().map(|&i| policy[i]).collect();
            assert!(vals.iter().all(|&v| v == vals[0]));
            assert_eq!(vals[0] == 1.0, r.treated.contains(&c));
        }
    }

    #[test]
    fn duplicates_are_distinct_clusters() {
        let data = dataset(&[3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = resample_clusters(&data, ResampleScheme::RandomWithReplacement(6), 1.0, 1, &mut rng).unwrap();
        assert_eq!(r.data.n_clusters(), 6);
        assert!(r.source.iter().filter(|&&s| s == r.source[0]).count() >= 1);
        let distinct: std::collections::BTreeSet<_> = r.source.iter().collect();
        assert!(distinct.len() < 6);
    }

    #[test]
    fn fraction_subsamples_and_rejects_empty() {
        let data = dataset(&[10, 20]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = resample_clusters(&data, ResampleScheme::BySize { top: 2, bottom: 0 }, 0.2, 1, &mut rng).unwrap();
        assert_eq!(r.data.clustering.sizes(), vec![4, 2]);
        let tiny = dataset(&[2, 20]);
        let err = resample_clusters(&tiny, ResampleScheme::BySize { top: 0, bottom: 1 }, 0.2, 0, &mut rng).unwrap_err();
        assert!(matches!(err, SimError::EmptySubsample { .. }));
        assert!(resample_clusters(&data, ResampleScheme::RandomWithReplacement(2), 0.0, 0, &mut rng).is_err());
    }
}

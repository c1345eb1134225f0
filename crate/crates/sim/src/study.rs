//! The size-study replication loop.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use crve::dof::{ABlocks, DofCalculator, DofEstimate, IkDof, MomentDesign};
use crve::estimators::{Hc2Engine, SandwichEngine, Uv1Engine, Uv2Engine, Uv3Engine};
use crve::inference::two_sided_p;
use crve::{engine, Method, Reference, RegressionDesign, VarianceEngine};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{SimulationConfig, StudyMethod};
use crate::dgp::{assemble_design, draw_continuous, draw_errors, rng_for, true_variance, SimDesign, X_STREAM};
use crate::error::Result;
use crate::layout::cluster_sizes;

/// Replications per work unit. Fixed so the reduction order never depends on
/// the number of workers.
const CHUNK: usize = 256;

/// A coefficient whose null is tested.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Target {
    pub(crate) index: usize,
    pub(crate) name: &'static str,
    pub(crate) null: f64,
}

fn targets(config: &SimulationConfig) -> Vec<Target> {
    let mut t = vec![Target {
        index: 1,
        name: "beta",
        null: config.coefficients.beta,
    }];
    if config.test_continuous {
        t.push(Target {
            index: 2,
            name: "gamma",
            null: config.coefficients.gamma,
        });
    }
    t
}

enum DofSource {
    Fixed(f64),
    Rv0(Vec<crve::Result<DofEstimate<f64>>>),
    Rv1(Vec<DofCalculator<f64>>),
    Ik(Vec<IkDof<f64>>),
}

enum Prepared {
    Missing(String),
    Ready {
        engine: Box<dyn VarianceEngine<f64>>,
        dof: DofSource,
    },
    Oracle {
        v: DMatrix<f64>,
    },
}

fn prepare_method(
    design: &Arc<RegressionDesign<f64>>,
    method: StudyMethod,
    targets: &[Target],
    oracle: Option<&DMatrix<f64>>,
) -> Prepared {
    let attempt = || -> crve::Result<Prepared> {
        Ok(match method {
            StudyMethod::Stata => Prepared::Ready {
                engine: Box::new(SandwichEngine::stata(design)?),
                dof: DofSource::Fixed((design.n_clusters() - 1) as f64),
            },
            StudyMethod::Lzik => {
                let hc2 = Hc2Engine::new(design)?;
                let ik = targets
                    .iter()
                    .map(|t| IkDof::new(&hc2, t.index))
                    .collect::<crve::Result<_>>()?;
                Prepared::Ready {
                    engine: Box::new(hc2),
                    dof: DofSource::Ik(ik),
                }
            }
            StudyMethod::Unbiased(m, r) => {
                let blocks = |ell| match m {
                    Method::Uv1 => ABlocks::from_uv1(&Uv1Engine::new(design)?, ell),
                    Method::Uv2 => ABlocks::from_uv2(&Uv2Engine::new(design)?, ell),
                    _ => ABlocks::from_uv3(&Uv3Engine::new(design)?, ell),
                };
                let eng = engine(design, m)?;
                let calcs = targets
                    .iter()
                    .map(|t| Ok(DofCalculator::new(design, blocks(t.index)?)))
                    .collect::<crve::Result<Vec<_>>>()?;
                let dof = match r {
                    Reference::Rv0 => DofSource::Rv0(calcs.iter().map(|c| c.rv0()).collect()),
                    Reference::Rv1 => DofSource::Rv1(calcs),
                };
                Prepared::Ready { engine: eng, dof }
            }
            StudyMethod::Oracle => match oracle {
                Some(v) => Prepared::Oracle { v: v.clone() },
                None => Prepared::Missing("the true error covariance is unknown".into()),
            },
        })
    };
    attempt().unwrap_or_else(|e| Prepared::Missing(e.to_string()))
}

/// Everything residual-independent for one regressor matrix.
pub(crate) struct Context {
    design: Arc<RegressionDesign<f64>>,
    methods: Vec<Prepared>,
    moments: Option<crve::Result<MomentDesign<f64>>>,
}

impl Context {
    pub(crate) fn new(
        design: Arc<RegressionDesign<f64>>,
        methods: &[StudyMethod],
        targets: &[Target],
        oracle: Option<&DMatrix<f64>>,
    ) -> Self {
        let prepared = methods
            .iter()
            .map(|&m| prepare_method(&design, m, targets, oracle))
            .collect();
        let needs_moments = methods
            .iter()
            .any(|m| matches!(m, StudyMethod::Unbiased(_, Reference::Rv1)));
        let moments = needs_moments.then(|| MomentDesign::new(&design));
        Self {
            design,
            methods: prepared,
            moments,
        }
    }

    /// Fits `y` and adds every method's test outcome to `tallies`
    /// (laid out method-major, one slot per target).
    pub(crate) fn evaluate(&self, y: &DVector<f64>, targets: &[Target], levels: &[f64], tallies: &mut [Tally]) {
        let nt = targets.len();
        let fit = self.design.fit(y);
        let moments = match &self.moments {
            Some(Ok(md)) => Some(md.estimate(&fit.residuals)),
            _ => None,
        };
        for (mi, prepared) in self.methods.iter().enumerate() {
            let cells = &mut tallies[mi * nt..(mi + 1) * nt];
            match prepared {
                Prepared::Missing(reason) => mark_missing(cells, reason),
                Prepared::Oracle { v } => {
                    for (cell, t) in cells.iter_mut().zip(targets) {
                        let d = fixed_dof(f64::INFINITY);
                        record(cell, fit.beta[t.index], v[(t.index, t.index)], Ok(d), t.null, levels);
                    }
                }
                Prepared::Ready { engine, dof } => {
                    let v = engine.estimate(&fit.residuals);
                    for (j, (cell, t)) in cells.iter_mut().zip(targets).enumerate() {
                        let d = match dof {
                            DofSource::Fixed(d) => Ok(fixed_dof(*d)),
                            DofSource::Rv0(ds) => ds[j].clone(),
                            DofSource::Rv1(calcs) => match &moments {
                                Some(m) => calcs[j].rv1(m),
                                None => calcs[j].rv0().map(|mut d| {
                                    d.fallback = true;
                                    d
                                }),
                            },
                            DofSource::Ik(ik) => ik[j].estimate(&fit.residuals),
                        };
                        record(cell, fit.beta[t.index], v.variance(t.index), d, t.null, levels);
                    }
                }
            }
        }
    }

    /// Stamps reasons for methods that never exist on this design.
    pub(crate) fn stamp_missing(&self, nt: usize, tallies: &mut [Tally]) {
        for (mi, prepared) in self.methods.iter().enumerate() {
            if let Prepared::Missing(reason) = prepared {
                for cell in &mut tallies[mi * nt..(mi + 1) * nt] {
                    cell.missing_reason = Some(reason.clone());
                }
            }
        }
    }
}

fn fixed_dof(d: f64) -> DofEstimate<f64> {
    DofEstimate {
        d,
        reference: Reference::Rv0,
        clamped: false,
        fallback: false,
        moments_used: None,
    }
}

pub(crate) fn mark_missing(cells: &mut [Tally], reason: &str) {
    for cell in cells {
        if cell.missing_reason.is_none() {
            cell.missing_reason = Some(reason.to_string());
        }
    }
}

fn build_context(config: &SimulationConfig, sim: &SimDesign, targets: &[Target]) -> Result<(Context, DVector<f64>)> {
    debug_assert!(sim.dummy_is_cluster_constant());
    let design = Arc::new(RegressionDesign::new(sim.x.clone(), sim.clustering.clone())?);
    let oracle = config
        .methods
        .contains(&StudyMethod::Oracle)
        .then(|| true_variance(&config.design, sim, design.gram_inv()));
    Ok((
        Context::new(design, &config.methods, targets, oracle.as_ref()),
        sim.continuous(),
    ))
}

/// Running totals for one `(method, coefficient)` cell.
#[derive(Debug, Clone, Default)]
pub(crate) struct Tally {
    n_exists: u64,
    n_negative_variance: u64,
    n_dof_failed: u64,
    n_fallback: u64,
    n_clamped: u64,
    n_dof: u64,
    sum_dof: f64,
    rejections: Vec<u64>,
    missing_reason: Option<String>,
}

impl Tally {
    fn new(levels: usize) -> Self {
        Self {
            rejections: vec![0; levels],
            ..Self::default()
        }
    }

    fn merge(&mut self, other: &Tally) {
        self.n_exists += other.n_exists;
        self.n_negative_variance += other.n_negative_variance;
        self.n_dof_failed += other.n_dof_failed;
        self.n_fallback += other.n_fallback;
        self.n_clamped += other.n_clamped;
        self.n_dof += other.n_dof;
        self.sum_dof += other.sum_dof;
        for (a, b) in self.rejections.iter_mut().zip(&other.rejections) {
            *a += b;
        }
        if self.missing_reason.is_none() {
            self.missing_reason.clone_from(&other.missing_reason);
        }
    }
}

fn record(
    tally: &mut Tally,
    estimate: f64,
    variance: f64,
    dof: crve::Result<DofEstimate<f64>>,
    null: f64,
    levels: &[f64],
) {
    tally.n_exists += 1;
    let d = match dof {
        Ok(d) => d,
        Err(_) => {
            tally.n_dof_failed += 1;
            return;
        }
    };
    if d.d.is_finite() {
        tally.n_dof += 1;
        tally.sum_dof += d.d;
    }
    tally.n_fallback += u64::from(d.fallback);
    tally.n_clamped += u64::from(d.clamped);
    if !(variance > 0.0) {
        tally.n_negative_variance += 1;
        return;
    }
    let t = (estimate - null) / variance.sqrt();
    let Ok(p) = two_sided_p(t, d.d) else {
        tally.n_dof_failed += 1;
        return;
    };
    for (r, &l) in tally.rejections.iter_mut().zip(levels) {
        *r += u64::from(p < l);
    }
}

fn run_replication(
    ctx: &Context,
    continuous: &DVector<f64>,
    config: &SimulationConfig,
    targets: &[Target],
    rng: &mut impl rand::Rng,
    tallies: &mut [Tally],
) {
    let x = ctx.design.x();
    let c = &config.coefficients;
    let errors = draw_errors(&config.design, ctx.design.clustering(), continuous, rng);
    let y = DVector::from_fn(x.nrows(), |i, _| {
        c.alpha + c.beta * x[(i, 1)] + c.gamma * x[(i, 2)] + errors[i]
    });
    ctx.evaluate(&y, targets, &config.levels, tallies);
}

/// Runs `reps` replications in fixed chunks and merges the chunk totals in
/// chunk order, so the floating-point sums do not depend on scheduling.
pub(crate) fn replicate<F>(reps: usize, slots: usize, n_levels: usize, body: F) -> Result<Vec<Tally>>
where
    F: Fn(usize, &mut [Tally]) -> Result<()> + Sync,
{
    let partial: Vec<Result<Vec<Tally>>> = (0..reps.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut tallies = vec![Tally::new(n_levels); slots];
            for rep in chunk * CHUNK..((chunk + 1) * CHUNK).min(reps) {
                body(rep, &mut tallies)?;
            }
            Ok(tallies)
        })
        .collect();
    let mut total = vec![Tally::new(n_levels); slots];
    for p in partial {
        for (a, b) in total.iter_mut().zip(p?.iter()) {
            a.merge(b);
        }
    }
    Ok(total)
}

/// Turns merged tallies into report cells.
pub(crate) fn finish_cells(
    methods: &[StudyMethod],
    targets: &[Target],
    levels: &[f64],
    totals: &[Tally],
    reps: usize,
    treated: usize,
) -> Vec<SizeCell> {
    let nt = targets.len();
    let mut cells = Vec::new();
    for (mi, method) in methods.iter().enumerate() {
        for (j, t) in targets.iter().enumerate() {
            let tally = &totals[mi * nt + j];
            let rates = levels
                .iter()
                .zip(&tally.rejections)
                .map(|(&level, &rej)| LevelRate {
                    level,
                    rejections: rej,
                    size: (tally.n_exists > 0).then(|| rej as f64 / tally.n_exists as f64),
                    size_zero_fill: if reps > 0 { rej as f64 / reps as f64 } else { 0.0 },
                })
                .collect();
            cells.push(SizeCell {
                method: method.to_string(),
                treated,
                coefficient: t.name.to_string(),
                replications: reps,
                n_exists: tally.n_exists,
                n_negative_variance: tally.n_negative_variance,
                n_dof_failed: tally.n_dof_failed,
                n_fallback: tally.n_fallback,
                n_clamped: tally.n_clamped,
                mean_dof: (tally.n_dof > 0).then(|| tally.sum_dof / tally.n_dof as f64),
                missing_reason: tally.missing_reason.clone(),
                levels: rates,
            });
        }
    }
    cells
}

/// Rejection frequency at one nominal level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRate {
    pub level: f64,
    pub rejections: u64,
    /// Over replications where the estimator existed; `None` if it never did.
    pub size: Option<f64>,
    /// Over all replications, nonexistence counted as non-rejection.
    pub size_zero_fill: f64,
}

/// Aggregates for one `(method, treated count, coefficient)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeCell {
    pub method: String,
    pub treated: usize,
    pub coefficient: String,
    pub replications: usize,
    pub n_exists: u64,
    pub n_negative_variance: u64,
    pub n_dof_failed: u64,
    pub n_fallback: u64,
    pub n_clamped: u64,
    pub mean_dof: Option<f64>,
    pub missing_reason: Option<String>,
    pub levels: Vec<LevelRate>,
}

impl SizeCell {
    pub fn size_at(&self, level: f64) -> Option<f64> {
        self.levels.iter().find(|l| l.level == level).and_then(|l| l.size)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeStudyResult {
    pub config: SimulationConfig,
    pub cluster_sizes: Vec<usize>,
    pub cells: Vec<SizeCell>,
    pub elapsed_secs: f64,
}

pub const CSV_HEADER: [&str; 14] = [
    "method",
    "C1",
    "level",
    "size",
    "mean_dof",
    "n_exists",
    "coefficient",
    "size_zero_fill",
    "rejections",
    "n_negative_variance",
    "n_dof_failed",
    "n_fallback",
    "n_clamped",
    "replications",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SizeStudyResult {
    pub fn cell(&self, method: StudyMethod, treated: usize, coefficient: &str) -> Option<&SizeCell> {
        let name = method.to_string();
        self.cells
            .iter()
            .find(|c| c.method == name && c.treated == treated && c.coefficient == coefficient)
    }

    /// Long-format CSV, one row per method, treated count, coefficient and level.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_cells_csv(&self.cells, out)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub fn write_cells_csv<W: Write>(cells: &[SizeCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for c in cells {
        for l in &c.levels {
            w.write_record([
                c.method.clone(),
                c.treated.to_string(),
                l.level.to_string(),
                opt(l.size),
                opt(c.mean_dof),
                c.n_exists.to_string(),
                c.coefficient.clone(),
                l.size_zero_fill.to_string(),
                l.rejections.to_string(),
                c.n_negative_variance.to_string(),
                c.n_dof_failed.to_string(),
                c.n_fallback.to_string(),
                c.n_clamped.to_string(),
                c.replications.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs the study on the global rayon pool.
pub fn run_study(config: &SimulationConfig) -> Result<SizeStudyResult> {
    run_study_inner(config)
}

/// A dedicated pool of `threads` workers (`0` means rayon's default).
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::error::config_err("threads", e.to_string()))
}

/// Runs the study on a dedicated pool of `threads` workers.
pub fn run_study_with_threads(config: &SimulationConfig, threads: usize) -> Result<SizeStudyResult> {
    thread_pool(threads)?.install(|| run_study_inner(config))
}

fn run_study_inner(config: &SimulationConfig) -> Result<SizeStudyResult> {
    config.validate()?;
    let start = Instant::now();
    let sizes = cluster_sizes(config.clusters, config.observations, config.balance)?;
    let targets = targets(config);
    let nt = targets.len();
    let slots = config.methods.len() * nt;
    let nl = config.levels.len();
    let reps = config.replications;
    let fixed_x = draw_continuous(config.observations, &mut rng_for(config.seed, X_STREAM));

    let mut cells = Vec::new();
    for treated in config.treated.counts(config.clusters) {
        let shared = if config.redraw_x {
            None
        } else {
            Some(build_context(
                config,
                &assemble_design(&sizes, treated, &fixed_x)?,
                &targets,
            )?)
        };
        let mut totals = replicate(reps, slots, nl, |rep, tallies| {
            let mut rng = rng_for(config.seed, rep as u64);
            match &shared {
                Some((ctx, cont)) => run_replication(ctx, cont, config, &targets, &mut rng, tallies),
                None => {
                    let x = draw_continuous(config.observations, &mut rng);
                    let (ctx, cont) = build_context(config, &assemble_design(&sizes, treated, &x)?, &targets)?;
                    run_replication(&ctx, &cont, config, &targets, &mut rng, tallies);
                }
            }
            Ok(())
        })?;
        if let Some((ctx, _)) = &shared {
            ctx.stamp_missing(nt, &mut totals);
        }
        cells.extend(finish_cells(
            &config.methods,
            &targets,
            &config.levels,
            &totals,
            reps,
            treated,
        ));
    }
    Ok(SizeStudyResult {
        config: config.clone(),
        cluster_sizes: sizes,
        cells,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ErrorDesign, Treated};

    fn small() -> SimulationConfig {
        SimulationConfig {
            clusters: 6,
            observations: 60,
            design: ErrorDesign::Sv1 { sigma2: 1.0, tau2: 0.1 },
            treated: Treated::Counts(vec![1, 3]),
            replications: 300,
            seed: 3,
            ..SimulationConfig::baseline()
        }
    }

    #[test]
    fn zero_replications() {
        let cfg = SimulationConfig {
            replications: 0,
            ..small()
        };
        let r = run_study(&cfg).unwrap();
        assert!(r.cells.iter().all(|c| c.n_exists == 0 && c.mean_dof.is_none()));
        assert!(r
            .cells
            .iter()
            .flat_map(|c| &c.levels)
            .all(|l| l.size.is_none() && l.size_zero_fill == 0.0));
    }

    #[test]
    fn nonexistence_for_one_treated() {
        let r = run_study(&small()).unwrap();
        for m in [
            StudyMethod::Lzik,
            StudyMethod::Unbiased(Method::Uv2, Reference::Rv0),
            StudyMethod::Unbiased(Method::Uv3, Reference::Rv1),
        ] {
            let c = r.cell(m, 1, "beta").unwrap();
            assert_eq!(c.n_exists, 0, "{m}");
            assert!(c.missing_reason.is_some());
            assert_eq!(c.levels[0].size, None);
            assert_eq!(c.levels[0].size_zero_fill, 0.0);
        }
        for m in StudyMethod::STANDARD {
            assert_eq!(r.cell(m, 3, "beta").unwrap().n_exists, 300, "{m}");
        }
    }

    #[test]
    fn redraw_x_runs() {
        let cfg = SimulationConfig {
            redraw_x: true,
            replications: 20,
            methods: vec![StudyMethod::Stata, StudyMethod::Unbiased(Method::Uv1, Reference::Rv1)],
            ..small()
        };
        let r = run_study(&cfg).unwrap();
        assert!(r.cells.iter().all(|c| c.n_exists == 20));
    }

    #[test]
    fn csv_has_one_row_per_cell_and_level() {
        let cfg = SimulationConfig {
            levels: vec![0.05, 0.1],
            replications: 10,
            ..small()
        };
        let r = run_study(&cfg).unwrap();
        let csv = r.to_csv_string();
        assert_eq!(csv.lines().count(), 1 + 8 * 2 * 2 * 2);
        assert!(csv.starts_with("method,C1,level,size,mean_dof,n_exists"));
    }
}

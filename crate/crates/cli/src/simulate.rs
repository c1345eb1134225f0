//! `simulate`, `generate` and `resample`.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use crve_sim::config::Treated;
use crve_sim::dgp::{assemble_design, draw_continuous, draw_errors, rng_for, X_STREAM};
use crve_sim::resample::{run_resample_study, ResampleOptions, ResampleScheme};
use crve_sim::{cluster_sizes, run_study_with_threads, SimulationConfig, StudyMethod};
use nalgebra::DVector;

use crate::data::{self, Columns};
use crate::manifest::{emit, RunManifest};
use crate::report::{check_levels, non_empty};
use crate::Status;

fn parse_study_methods(items: &[String]) -> Result<Vec<StudyMethod>> {
    let names = non_empty(items);
    if names.is_empty() {
        bail!("no methods selected");
    }
    names
        .iter()
        .map(|s| s.parse::<StudyMethod>().map_err(|e| anyhow!("--methods: {e}")))
        .collect()
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// TOML study configuration.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Override the configured methods, e.g. `STATA,LZIK,UV1(RV1),ORACLE`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Long-format size table (default: stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn run_simulate(a: SimulateArgs) -> Result<Status> {
    let mut cfg = SimulationConfig::from_path(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = &a.methods {
        cfg.methods = parse_study_methods(m)?;
    }
    if let Some(l) = a.levels {
        cfg.levels = l;
    }
    if let Some(r) = a.replications {
        cfg.replications = r;
    }
    cfg.validate()?;
    let mut manifest = RunManifest::start("simulate");
    manifest.config = Some(a.config.clone());
    manifest.seed = Some(cfg.seed);
    let result = run_study_with_threads(&cfg, a.threads)?;
    result.write_csv(data::sink(a.output.as_deref())?)?;
    emit(manifest, a.output.as_deref(), a.json.as_deref(), &result)?;
    Ok(Status::Success)
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// TOML study configuration supplying layout, errors and coefficients.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Number of treated clusters (default: half).
    #[arg(long)]
    pub treated: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Data CSV with columns y, cluster, d, x (default: stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// The regressors come from the study's fixed design and the errors from
/// replication 0, so the file is the first draw a study would make.
pub fn run_generate(a: GenerateArgs) -> Result<Status> {
    let mut cfg = SimulationConfig::from_path(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let treated = a.treated.unwrap_or(cfg.clusters / 2);
    if treated > cfg.clusters {
        bail!("--treated {treated} exceeds the {} clusters", cfg.clusters);
    }
    let mut manifest = RunManifest::start("generate");
    manifest.config = Some(a.config.clone());
    manifest.seed = Some(cfg.seed);
    let sizes = cluster_sizes(cfg.clusters, cfg.observations, cfg.balance)?;
    let x = draw_continuous(cfg.observations, &mut rng_for(cfg.seed, X_STREAM));
    let sim = assemble_design(&sizes, treated, &x)?;
    let e = draw_errors(
        &cfg.design,
        &sim.clustering,
        &sim.continuous(),
        &mut rng_for(cfg.seed, 0),
    );
    let c = &cfg.coefficients;
    let y = DVector::from_fn(cfg.observations, |i, _| {
        c.alpha + c.beta * sim.x[(i, 1)] + c.gamma * sim.x[(i, 2)] + e[i]
    });
    let regressors = sim.x.columns(1, 2).into_owned();
    data::write_dataset(
        data::sink(a.output.as_deref())?,
        &y,
        &sim.clustering,
        &["d", "x"],
        &regressors,
    )?;
    emit(manifest, a.output.as_deref(), None, &())?;
    Ok(Status::Success)
}

/// `random:COUNT` or `by-size:TOP,BOTTOM`.
#[derive(Debug, Clone, Copy)]
pub struct SchemeArg(pub ResampleScheme);

impl FromStr for SchemeArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("unknown scheme `{s}` (expected random:COUNT or by-size:TOP,BOTTOM)");
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(Self(ResampleScheme::RandomWithReplacement(
                rest.trim().parse().map_err(|_| bad())?,
            ))),
            "by-size" | "bysize" => {
                let (t, b) = rest.split_once(',').ok_or_else(bad)?;
                Ok(Self(ResampleScheme::BySize {
                    top: t.trim().parse().map_err(|_| bad())?,
                    bottom: b.trim().parse().map_err(|_| bad())?,
                }))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Args, Debug)]
pub struct ResampleArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// `random:COUNT` or `by-size:TOP,BOTTOM`.
    #[arg(long)]
    pub scheme: SchemeArg,
    /// Share of each sampled cluster's rows, drawn with replacement when below 1.
    #[arg(long, default_value_t = 1.0)]
    pub within_fraction: f64,
    /// Treated-cluster counts: a comma list or `sweep` for 1 to C-1.
    #[arg(long, default_value = "sweep")]
    pub treated: String,
    #[arg(long, default_value_t = 1000)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "STATA,LZIK,UV1(RV0),UV1(RV1),UV2(RV0),UV2(RV1),UV3(RV0),UV3(RV1)"
    )]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    pub levels: Vec<f64>,
    #[arg(long)]
    pub intercept: bool,
    #[arg(long, value_delimiter = ',')]
    pub regressors: Option<Vec<String>>,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value = "cluster")]
    pub cluster: String,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn sampled_clusters(scheme: ResampleScheme) -> usize {
    match scheme {
        ResampleScheme::RandomWithReplacement(n) => n,
        ResampleScheme::BySize { top, bottom } => top + bottom,
    }
}

fn parse_treated(text: &str, clusters: usize) -> Result<Vec<usize>> {
    let t = text.trim();
    let counts = if t.eq_ignore_ascii_case("sweep") {
        Treated::Sweep.counts(clusters)
    } else {
        t.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| anyhow!("--treated: `{s}` is not a count"))
            })
            .collect::<Result<_>>()?
    };
    if counts.is_empty() {
        bail!("--treated selects no counts");
    }
    Ok(counts)
}

pub fn run_resample(a: ResampleArgs) -> Result<Status> {
    let methods = parse_study_methods(&a.methods)?;
    check_levels(&a.levels)?;
    let mut manifest = RunManifest::start("resample");
    manifest.inputs.push(a.input.clone());
    manifest.seed = Some(a.seed);
    let cols = Columns {
        response: a.response,
        group: a.cluster,
        regressors: a.regressors,
        intercept: a.intercept,
    };
    let loaded = data::read_clustered(&a.input, &cols)?;
    let options = ResampleOptions {
        scheme: a.scheme.0,
        within_fraction: a.within_fraction,
        treated: parse_treated(&a.treated, sampled_clusters(a.scheme.0))?,
        replications: a.replications,
        levels: a.levels,
        seed: a.seed,
        methods,
    };
    let pool = crve_sim::study::thread_pool(a.threads)?;
    let result = pool.install(|| run_resample_study(&loaded.data, &options))?;
    result.write_csv(data::sink(a.output.as_deref())?)?;
    emit(manifest, a.output.as_deref(), a.json.as_deref(), &result)?;
    Ok(Status::Success)
}

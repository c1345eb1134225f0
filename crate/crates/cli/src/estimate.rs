use std::path::PathBuf;

use anyhow::{anyhow, bail, Result};
use clap::Args;
use crve::estimators::Hc2Engine;
use crve::{
    build_a_blocks, estimate, estimate_re_moments, fit_ols, DofCalculator, IkDof, Method, OlsFit, PsdRepair, Reference,
};
use serde::Serialize;

use crate::data::{self, Columns};
use crate::manifest::{emit, RunManifest};
use crate::report::{check_levels, non_empty, write_rows, DofInfo, Row};
use crate::Status;

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// CSV with a header; needs the response and cluster columns.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Variance methods: UV1, UV2, UV3, LZ1 (STATA), LZ2 (HC2), PLUGIN_RE, PLUGIN_CRE, PLUGIN_UNR.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "UV1,UV2,UV3,LZ1,LZ2,PLUGIN_RE,PLUGIN_CRE,PLUGIN_UNR"
    )]
    pub methods: Vec<String>,
    /// Reference variance for the d.f. of UV1, UV2 and UV3.
    #[arg(long, default_value = "rv1")]
    pub dof: Reference,
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    pub levels: Vec<f64>,
    #[arg(long, default_value = "off")]
    pub psd_repair: PsdRepair,
    /// Prepend a column of ones.
    #[arg(long)]
    pub intercept: bool,
    /// Regressor columns (default: all but response and cluster).
    #[arg(long, value_delimiter = ',')]
    pub regressors: Option<Vec<String>>,
    /// Coefficients to test (default: all).
    #[arg(long, value_delimiter = ',')]
    pub coefficients: Option<Vec<String>>,
    /// Value of the coefficient under the null.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub null: f64,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value = "cluster")]
    pub cluster: String,
    /// Results CSV (default: stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Results JSON with the run manifest embedded.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    n_obs: usize,
    n_clusters: usize,
    regressors: &'a [String],
    beta: Vec<f64>,
    levels: &'a [f64],
    rows: &'a [Row],
}

pub fn parse_methods(items: &[String]) -> Result<Vec<Method>> {
    let names = non_empty(items);
    if names.is_empty() {
        bail!("no methods selected");
    }
    names
        .iter()
        .map(|s| s.parse::<Method>().map_err(|e| anyhow!("--methods: {e}")))
        .collect()
}

pub fn coefficient_indices(names: &[String], wanted: Option<&Vec<String>>) -> Result<Vec<usize>> {
    match wanted {
        None => Ok((0..names.len()).collect()),
        Some(list) => non_empty(list)
            .iter()
            .map(|w| {
                names
                    .iter()
                    .position(|n| n == w)
                    .ok_or_else(|| anyhow!("unknown coefficient `{w}`"))
            })
            .collect(),
    }
}

fn dof_for(
    fit: &OlsFit<f64>,
    method: Method,
    ell: usize,
    reference: Reference,
    moments: &Option<crve::Result<crve::ReMoments<f64>>>,
) -> crve::Result<DofInfo> {
    let clusters = fit.n_clusters();
    match method {
        Method::Uv1 | Method::Uv2 | Method::Uv3 => {
            let calc = DofCalculator::new(&fit.design, build_a_blocks(fit, method, ell)?);
            let d = match (reference, moments) {
                (Reference::Rv1, Some(Ok(m))) => calc.rv1(m)?,
                (Reference::Rv1, _) => {
                    let mut d = calc.rv0()?;
                    d.fallback = true;
                    d
                }
                (Reference::Rv0, _) => calc.rv0()?,
            };
            Ok(DofInfo {
                value: d.d,
                kind: d.reference.to_string(),
                clamped: d.clamped,
                fallback: d.fallback,
            })
        }
        Method::Lz2 => {
            let d = IkDof::new(&Hc2Engine::new(&fit.design)?, ell)?.estimate(&fit.residuals)?;
            Ok(DofInfo {
                value: d.d,
                kind: "IK".into(),
                clamped: d.clamped,
                fallback: d.fallback,
            })
        }
        _ if clusters < 2 => Err(crve::Error::TooFewClusters(clusters)),
        _ => Ok(DofInfo::fixed((clusters - 1) as f64, "C-1")),
    }
}

pub fn run(a: EstimateArgs) -> Result<Status> {
    let methods = parse_methods(&a.methods)?;
    check_levels(&a.levels)?;
    let mut manifest = RunManifest::start("estimate");
    manifest.inputs.push(a.input.clone());
    let cols = Columns {
        response: a.response,
        group: a.cluster,
        regressors: a.regressors,
        intercept: a.intercept,
    };
    let loaded = data::read_clustered(&a.input, &cols)?;
    let targets = coefficient_indices(&loaded.names, a.coefficients.as_ref())?;
    let fit = fit_ols(&loaded.data)?;
    let moments =
        (a.dof == Reference::Rv1 && methods.iter().any(|m| m.is_unbiased())).then(|| estimate_re_moments(&fit));

    let mut rows = Vec::new();
    let mut succeeded = 0;
    for &m in &methods {
        match estimate(&fit, m) {
            Err(e) => {
                for &ell in &targets {
                    rows.push(Row::failed(&loaded.names[ell], m.name(), a.levels.len(), e.to_string()));
                }
            }
            Ok(v) => {
                succeeded += 1;
                let v = v.repaired(a.psd_repair);
                for &ell in &targets {
                    let dof = dof_for(&fit, m, ell, a.dof, &moments).map_err(|e| e.to_string());
                    rows.push(Row::tested(
                        &loaded.names[ell],
                        m.name(),
                        fit.beta[ell],
                        v.variance(ell),
                        dof,
                        a.null,
                        &a.levels,
                        v.diagnostics.psd_repaired,
                    ));
                }
            }
        }
    }

    write_rows(data::sink(a.output.as_deref())?, &a.levels, &rows)?;
    let report = EstimateReport {
        n_obs: fit.n_obs(),
        n_clusters: fit.n_clusters(),
        regressors: &loaded.names,
        beta: fit.beta.iter().copied().collect(),
        levels: &a.levels,
        rows: &rows,
    };
    emit(manifest, a.output.as_deref(), a.json.as_deref(), &report)?;
    Ok(if succeeded > 0 {
        Status::Success
    } else {
        Status::AllMethodsFailed
    })
}

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use crve::{fit_panel, panel_plugin, panel_unbiased, PsdRepair};
use serde::Serialize;

use crate::data::{self, Columns};
use crate::estimate::coefficient_indices;
use crate::manifest::{emit, RunManifest};
use crate::report::{check_levels, non_empty, write_rows, DofInfo, Row};
use crate::Status;

#[derive(Args, Debug)]
pub struct PanelArgs {
    /// Long-format CSV with unit, wave, response and regressor columns.
    #[arg(long, short)]
    pub input: PathBuf,
    /// `unbiased`, `plugin` or both.
    #[arg(long, value_delimiter = ',', default_value = "unbiased,plugin")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    pub levels: Vec<f64>,
    #[arg(long, default_value = "off")]
    pub psd_repair: PsdRepair,
    #[arg(long)]
    pub intercept: bool,
    #[arg(long, value_delimiter = ',')]
    pub regressors: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub coefficients: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub null: f64,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value = "unit")]
    pub unit: String,
    #[arg(long, default_value = "wave")]
    pub wave: String,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Serialize)]
struct PanelReport<'a> {
    n_units: usize,
    n_waves: usize,
    regressors: &'a [String],
    beta: Vec<f64>,
    /// Estimated within-unit covariance per method, row-major.
    lambda: Vec<(String, Vec<Vec<f64>>)>,
    rows: &'a [Row],
}

/// Tests use t(N - 1), N the number of units.
pub fn run(a: PanelArgs) -> Result<Status> {
    let methods = non_empty(&a.methods)
        .iter()
        .map(|s| s.to_ascii_lowercase())
        .collect::<Vec<_>>();
    if methods.is_empty() {
        bail!("no methods selected");
    }
    if let Some(m) = methods.iter().find(|m| *m != "unbiased" && *m != "plugin") {
        bail!("unknown panel method `{m}` (expected unbiased or plugin)");
    }
    check_levels(&a.levels)?;
    let mut manifest = RunManifest::start("panel");
    manifest.inputs.push(a.input.clone());
    let cols = Columns {
        response: a.response,
        group: a.unit,
        regressors: a.regressors,
        intercept: a.intercept,
    };
    let (panel, names) = data::read_panel(&a.input, &cols, &a.wave)?;
    let targets = coefficient_indices(&names, a.coefficients.as_ref())?;
    let pf = fit_panel(&panel)?;
    let dof = || {
        if pf.n_units < 2 {
            Err("need at least 2 units".to_string())
        } else {
            Ok(DofInfo::fixed((pf.n_units - 1) as f64, "N-1"))
        }
    };

    let mut rows = Vec::new();
    let mut lambda = Vec::new();
    let mut succeeded = 0;
    for m in &methods {
        let est = if m == "unbiased" {
            panel_unbiased(&pf)
        } else {
            Ok(panel_plugin(&pf))
        };
        let tag = if m == "unbiased" {
            crve::Method::PanelUnbiased
        } else {
            crve::Method::PanelPlugin
        };
        match est {
            Err(e) => {
                for &ell in &targets {
                    rows.push(Row::failed(&names[ell], tag.name(), a.levels.len(), e.to_string()));
                }
            }
            Ok(est) => {
                succeeded += 1;
                let v = est.variance.repaired(a.psd_repair);
                for &ell in &targets {
                    rows.push(Row::tested(
                        &names[ell],
                        tag.name(),
                        pf.fit.beta[ell],
                        v.variance(ell),
                        dof(),
                        a.null,
                        &a.levels,
                        v.diagnostics.psd_repaired,
                    ));
                }
                let l = &est.lambda;
                lambda.push((
                    tag.name().to_string(),
                    (0..l.nrows()).map(|i| l.row(i).iter().copied().collect()).collect(),
                ));
            }
        }
    }

    write_rows(data::sink(a.output.as_deref())?, &a.levels, &rows)?;
    let report = PanelReport {
        n_units: pf.n_units,
        n_waves: pf.n_waves,
        regressors: &names,
        beta: pf.fit.beta.iter().copied().collect(),
        lambda,
        rows: &rows,
    };
    emit(manifest, a.output.as_deref(), a.json.as_deref(), &report)?;
    Ok(if succeeded > 0 {
        Status::Success
    } else {
        Status::AllMethodsFailed
    })
}

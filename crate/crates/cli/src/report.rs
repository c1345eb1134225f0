//! Per-coefficient test tables shared by `estimate` and `panel`.

use std::io::Write;

use anyhow::Result;
use crve::inference::two_sided_p;
use serde::Serialize;

/// A d.f. value and how it was obtained.
#[derive(Debug, Clone)]
pub struct DofInfo {
    pub value: f64,
    pub kind: String,
    pub clamped: bool,
    pub fallback: bool,
}

impl DofInfo {
    pub fn fixed(value: f64, kind: &str) -> Self {
        Self {
            value,
            kind: kind.to_string(),
            clamped: false,
            fallback: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Row {
    pub coefficient: String,
    pub method: String,
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub variance: Option<f64>,
    pub dof: Option<f64>,
    pub dof_kind: Option<String>,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    /// Aligned with the requested levels.
    pub reject: Vec<Option<bool>>,
    pub negative_variance: bool,
    pub dof_clamped: bool,
    pub dof_fallback: bool,
    pub psd_repaired: bool,
    pub error: Option<String>,
}

impl Row {
    pub fn failed(coefficient: &str, method: &str, levels: usize, error: String) -> Self {
        Self {
            coefficient: coefficient.to_string(),
            method: method.to_string(),
            reject: vec![None; levels],
            error: Some(error),
            ..Self::default()
        }
    }

    /// Fills the test columns. A nonpositive variance leaves them empty and
    /// sets the flag.
    #[allow(clippy::too_many_arguments)]
    pub fn tested(
        coefficient: &str,
        method: &str,
        estimate: f64,
        variance: f64,
        dof: std::result::Result<DofInfo, String>,
        null: f64,
        levels: &[f64],
        psd_repaired: bool,
    ) -> Self {
        let mut row = Self {
            estimate: Some(estimate),
            variance: Some(variance),
            psd_repaired,
            ..Self::failed(coefficient, method, levels.len(), String::new())
        };
        row.error = None;
        let d = match dof {
            Ok(d) => d,
            Err(e) => {
                row.error = Some(format!("d.f.: {e}"));
                return row;
            }
        };
        row.dof = Some(d.value);
        row.dof_kind = Some(d.kind);
        row.dof_clamped = d.clamped;
        row.dof_fallback = d.fallback;
        if !(variance > 0.0) {
            row.negative_variance = true;
            return row;
        }
        let se = variance.sqrt();
        let t = (estimate - null) / se;
        row.std_error = Some(se);
        row.t_stat = Some(t);
        match two_sided_p(t, d.value) {
            Ok(p) => {
                row.p_value = Some(p);
                row.reject = levels.iter().map(|&l| Some(p < l)).collect();
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    }
}

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_rows<W: Write>(out: W, levels: &[f64], rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "coefficient",
        "method",
        "estimate",
        "std_error",
        "variance",
        "dof",
        "dof_kind",
        "t",
        "p",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(levels.iter().map(|l| format!("reject_{l}")));
    header.extend(
        [
            "negative_variance",
            "dof_clamped",
            "dof_fallback",
            "psd_repaired",
            "error",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.coefficient.clone(),
            r.method.clone(),
            cell(&r.estimate),
            cell(&r.std_error),
            cell(&r.variance),
            cell(&r.dof),
            cell(&r.dof_kind),
            cell(&r.t_stat),
            cell(&r.p_value),
        ];
        rec.extend(r.reject.iter().map(cell));
        rec.extend([r.negative_variance, r.dof_clamped, r.dof_fallback, r.psd_repaired].map(|b| b.to_string()));
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        anyhow::bail!("no levels given");
    }
    if let Some(l) = levels.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
        anyhow::bail!("level {l} is outside (0, 1)");
    }
    Ok(())
}

/// Splits comma lists that clap has already split, dropping blanks.
pub fn non_empty(items: &[String]) -> Vec<&str> {
    items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect()
}

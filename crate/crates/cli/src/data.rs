//! CSV ingestion and output.

use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use crve::{ClusteredDataset, Clustering, PanelDataset};
use nalgebra::{DMatrix, DVector};

pub const INTERCEPT: &str = "(intercept)";

/// Which columns to read.
#[derive(Debug, Clone)]
pub struct Columns {
    pub response: String,
    pub group: String,
    /// `None` takes every other column, in file order.
    pub regressors: Option<Vec<String>>,
    pub intercept: bool,
}

struct Raw {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_raw(path: &Path) -> Result<Raw> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(Raw { header, rows })
}

fn position(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| anyhow!("missing column `{name}`"))
}

/// Decimal point, no thousands separators, scientific notation allowed.
pub fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| anyhow!("row {row}, column `{column}`: `{cell}` is not a number"))?;
    if !v.is_finite() {
        bail!("row {row}, column `{column}`: `{cell}` is not finite");
    }
    Ok(v)
}

/// Regressor matrix, names and the label column for `raw`.
fn assemble(raw: &Raw, cols: &Columns, reserved: &[&str]) -> Result<(DVector<f64>, DMatrix<f64>, Vec<String>)> {
    let y_at = position(&raw.header, &cols.response)?;
    let chosen: Vec<String> = match &cols.regressors {
        Some(list) => list.clone(),
        None => raw
            .header
            .iter()
            .filter(|h| *h != &cols.response && !reserved.contains(&h.as_str()))
            .cloned()
            .collect(),
    };
    let at = chosen
        .iter()
        .map(|n| position(&raw.header, n))
        .collect::<Result<Vec<_>>>()?;
    let mut names = Vec::new();
    if cols.intercept {
        names.push(INTERCEPT.to_string());
    }
    names.extend(chosen.iter().cloned());
    if names.is_empty() {
        bail!("no regressors: add columns or pass --intercept");
    }
    let n = raw.rows.len();
    let k = names.len();
    let offset = usize::from(cols.intercept);
    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    for (i, rec) in raw.rows.iter().enumerate() {
        let line = i + 2;
        y[i] = parse_number(&rec[y_at], line, &cols.response)?;
        if cols.intercept {
            x[(i, 0)] = 1.0;
        }
        for (j, &p) in at.iter().enumerate() {
            x[(i, j + offset)] = parse_number(&rec[p], line, &chosen[j])?;
        }
    }
    Ok((y, x, names))
}

pub struct Loaded {
    pub data: ClusteredDataset<f64>,
    pub names: Vec<String>,
}

pub fn read_clustered(path: &Path, cols: &Columns) -> Result<Loaded> {
    let raw = read_raw(path)?;
    let g = position(&raw.header, &cols.group)?;
    let labels: Vec<String> = raw.rows.iter().map(|r| r[g].to_string()).collect();
    let (y, x, names) = assemble(&raw, cols, &[cols.group.as_str()])?;
    let data = ClusteredDataset::new(y, x, Clustering::from_labels(&labels))?;
    Ok(Loaded { data, names })
}

pub fn read_panel(path: &Path, cols: &Columns, wave: &str) -> Result<(PanelDataset<f64>, Vec<String>)> {
    let raw = read_raw(path)?;
    let u = position(&raw.header, &cols.group)?;
    let w = position(&raw.header, wave)?;
    let units: Vec<String> = raw.rows.iter().map(|r| r[u].to_string()).collect();
    let waves = raw
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r[w].parse::<i64>()
                .map_err(|_| anyhow!("row {}, column `{wave}`: `{}` is not an integer", i + 2, &r[w]))
        })
        .collect::<Result<Vec<_>>>()?;
    let (y, x, names) = assemble(&raw, cols, &[cols.group.as_str(), wave])?;
    let y: Vec<f64> = y.iter().copied().collect();
    Ok((PanelDataset::from_long(&units, &waves, &y, &x)?, names))
}

/// Writes `y`, `cluster` and named regressor columns, clusters labelled from 1.
pub fn write_dataset<W: Write>(
    out: W,
    y: &DVector<f64>,
    clustering: &Clustering,
    names: &[&str],
    x: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["y", "cluster"];
    header.extend_from_slice(names);
    w.write_record(&header)?;
    for i in 0..y.len() {
        let mut rec = vec![y[i].to_string(), (clustering.cluster_of()[i] + 1).to_string()];
        rec.extend((0..x.ncols()).map(|j| x[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Opens `path` for writing, or stdout.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

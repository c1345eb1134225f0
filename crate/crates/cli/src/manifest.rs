use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

/// Provenance written next to every output file.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub arguments: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix_secs: f64,
    pub elapsed_secs: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            arguments: std::env::args().skip(1).collect(),
            inputs: Vec::new(),
            config: None,
            outputs: Vec::new(),
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            elapsed_secs: 0.0,
            clock: Some(Instant::now()),
        }
    }

    pub fn finish(&mut self) {
        if let Some(c) = self.clock {
            self.elapsed_secs = c.elapsed().as_secs_f64();
        }
    }

    /// `results.csv` gets `results.csv.manifest.json`.
    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn write_sidecar(&self, output: &Path) -> Result<()> {
        let path = Self::sidecar_path(output);
        let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

/// Writes `{"manifest": .., "results": ..}`.
pub fn write_json_with_manifest<T: Serialize>(path: &Path, manifest: &RunManifest, results: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Envelope<'a, T> {
        manifest: &'a RunManifest,
        results: &'a T,
    }
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(file, &Envelope { manifest, results })?;
    Ok(())
}

/// Records all outputs, then writes the JSON envelope and the sidecar for the
/// tabular output.
pub fn emit<T: Serialize>(
    mut manifest: RunManifest,
    csv_output: Option<&Path>,
    json_output: Option<&Path>,
    results: &T,
) -> Result<()> {
    manifest.outputs.extend(csv_output.map(Path::to_path_buf));
    manifest.outputs.extend(json_output.map(Path::to_path_buf));
    manifest.finish();
    if let Some(p) = json_output {
        write_json_with_manifest(p, &manifest, results)?;
    }
    if let Some(p) = csv_output {
        manifest.write_sidecar(p)?;
    }
    Ok(())
}

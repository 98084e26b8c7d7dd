//! Metric rows, CSV and plot-data emission, and the run manifest.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::sha256_hex;
use crate::error::Result;

/// One evaluated cell, keyed by `(scenario, attack, defense, seed)` plus
/// the sweep coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub attack: String,
    pub defense: String,
    pub seed: u64,
    pub epsilon: f32,
    pub n_steps: usize,
    pub class: usize,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub k: usize,
    /// Every adversarial image stayed inside the budget and the data range.
    pub budget_pass: bool,
    pub max_deviation: f32,
}

/// Wall-clock seconds per stage of one cell. Kept apart from the metric
/// rows because it is not reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub attack: String,
    pub defense: String,
    pub seed: u64,
    pub epsilon: f32,
    pub n_steps: usize,
    pub attack_secs: f64,
    pub attack_secs_per_example: f64,
    pub defense_secs: f64,
    pub generate_secs: f64,
    pub metric_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub attack: String,
    pub defense: String,
    pub seed: u64,
    pub epsilon: f32,
    pub n_steps: usize,
    pub error: String,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub const METRIC_COLUMNS: [&str; 15] = [
    "scenario", "attack", "defense", "seed", "epsilon", "n_steps", "class", "fid", "precision", "recall", "n_real",
    "n_gen", "k", "budget_pass", "max_deviation",
];

pub const TIMING_COLUMNS: [&str; 10] = [
    "attack", "defense", "seed", "epsilon", "n_steps", "attack_secs", "attack_secs_per_example", "defense_secs",
    "generate_secs", "metric_secs",
];

/// A point of a plot series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub scenario: String,
    pub attack: String,
    pub defense: String,
    pub epsilon: f32,
    pub n_steps: usize,
    pub seed: u64,
    pub value: f64,
}

pub const PLOT_COLUMNS: [&str; 7] = ["scenario", "attack", "defense", "epsilon", "n_steps", "seed", "value"];

/// Restricts which rows reach the plot files; `None` keeps everything.
#[derive(Clone, Debug, Default)]
pub struct PlotFilter {
    pub scenario: Option<String>,
    pub attacks: Option<Vec<String>>,
    pub defenses: Option<Vec<String>>,
}

impl PlotFilter {
    fn keeps(&self, r: &MetricRow) -> bool {
        self.scenario.as_ref().is_none_or(|s| *s == r.scenario)
            && self.attacks.as_ref().is_none_or(|a| a.contains(&r.attack))
            && self.defenses.as_ref().is_none_or(|d| d.contains(&r.defense))
    }
}

pub const FID_VS_N: &str = "fid_vs_n.csv";
pub const PRECISION_VS_N: &str = "precision_vs_n.csv";
pub const FID_VS_EPS: &str = "fid_vs_eps.csv";
pub const PLOT_SCHEMA: &str = "plot_schema.json";

fn series(rows: &[&MetricRow], value: impl Fn(&MetricRow) -> f64, by_eps: bool) -> Vec<PlotPoint> {
    let mut pts: Vec<PlotPoint> = rows
        .iter()
        .map(|r| PlotPoint {
            scenario: r.scenario.clone(),
            attack: r.attack.clone(),
            defense: r.defense.clone(),
            epsilon: r.epsilon,
            n_steps: r.n_steps,
            seed: r.seed,
            value: value(r),
        })
        .collect();
    pts.sort_by(|a, b| {
        let primary = if by_eps {
            a.epsilon.total_cmp(&b.epsilon).then(a.n_steps.cmp(&b.n_steps))
        } else {
            a.n_steps.cmp(&b.n_steps).then(a.epsilon.total_cmp(&b.epsilon))
        };
        primary
            .then_with(|| a.scenario.cmp(&b.scenario))
            .then_with(|| a.attack.cmp(&b.attack))
            .then_with(|| a.defense.cmp(&b.defense))
            .then(a.seed.cmp(&b.seed))
    });
    pts
}

/// Writes the three figure series and their schema sidecar into `dir`.
pub fn emit_plot_data(rows: &[MetricRow], filter: &PlotFilter, dir: &Path) -> Result<Vec<PathBuf>> {
    let kept: Vec<&MetricRow> = rows.iter().filter(|r| filter.keeps(r)).collect();
    let files = [
        (FID_VS_N, series(&kept, |r| r.fid, false)),
        (PRECISION_VS_N, series(&kept, |r| r.precision, false)),
        (FID_VS_EPS, series(&kept, |r| r.fid, true)),
    ];
    let mut out = Vec::new();
    for (name, pts) in files {
        let path = dir.join(name);
        write_csv(&path, &pts, &PLOT_COLUMNS)?;
        out.push(path);
    }
    let schema = json!({
        "columns": {
            "scenario": "scenario registry name",
            "attack": "attack registry name",
            "defense": "defense registry name",
            "epsilon": "L-infinity budget in data units (0 for the unattacked baseline)",
            "n_steps": "attack iterations (0 for the unattacked baseline)",
            "seed": "experiment seed",
            "value": "metric named by the file"
        },
        "files": {
            FID_VS_N: "Frechet distance against the clean class, sorted by n_steps",
            PRECISION_VS_N: "k-NN precision against the clean class, sorted by n_steps",
            FID_VS_EPS: "Frechet distance against the clean class, sorted by epsilon"
        }
    });
    let path = dir.join(PLOT_SCHEMA);
    write_atomic(&path, &serde_json::to_vec_pretty(&schema)?)?;
    out.push(path);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    /// False for files holding wall-clock measurements.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub checkpoints: BTreeMap<String, String>,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: Vec<Artifact>,
    pub rows: Vec<MetricRow>,
    pub failures: Vec<CellFailure>,
    /// Hash over everything above except timings and non-deterministic
    /// artifacts.
    pub content_hash: String,
}

impl RunManifest {
    pub fn compute_content_hash(&self) -> Result<String> {
        let stable: Vec<&Artifact> = self.artifacts.iter().filter(|a| a.deterministic).collect();
        let v = json!({
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "checkpoints": self.checkpoints,
            "artifacts": stable,
            "rows": self.rows,
            "failures": self.failures,
        });
        Ok(sha256_hex(&serde_json::to_vec(&v)?))
    }

    /// Hashes that must agree between two runs of the same configuration.
    pub fn reproducible_hashes(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("config".to_string(), self.config_hash.clone());
        m.insert("content".to_string(), self.content_hash.clone());
        for (k, v) in &self.checkpoints {
            m.insert(format!("checkpoint:{k}"), v.clone());
        }
        for a in self.artifacts.iter().filter(|a| a.deterministic) {
            m.insert(format!("artifact:{}", a.path), a.sha256.clone());
        }
        m
    }
}

pub fn artifact(run_dir: &Path, path: &Path, deterministic: bool) -> Result<Artifact> {
    let rel = path.strip_prefix(run_dir).unwrap_or(path);
    Ok(Artifact {
        path: rel.to_string_lossy().replace('\\', "/"),
        sha256: sha256_hex(&std::fs::read(path)?),
        deterministic,
    })
}

/// Median of the values; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(attack: &str, n: usize, eps: f32, seed: u64, fid: f64) -> MetricRow {
        MetricRow {
            scenario: "text2img_inversion".into(),
            attack: attack.into(),
            defense: "identity".into(),
            seed,
            epsilon: eps,
            n_steps: n,
            class: 0,
            fid,
            precision: 0.5,
            recall: 0.25,
            n_real: 200,
            n_gen: 500,
            k: 3,
            budget_pass: true,
            max_deviation: eps,
        }
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn metric_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("advdm", 40, 8.0 / 255.0, 0, 0.123456789), row("none", 0, 0.0, 1, 1e-7)];
        let p = dir.path().join("m.csv");
        write_csv(&p, &rows, &METRIC_COLUMNS).unwrap();
        assert_eq!(read_csv::<MetricRow>(&p).unwrap(), rows);
    }

    #[test]
    fn manifest_hash_ignores_timings() {
        let mut m = RunManifest {
            config_hash: "c".into(),
            code_version: "v".into(),
            checkpoints: BTreeMap::new(),
            timings: BTreeMap::new(),
            artifacts: vec![],
            rows: vec![row("advdm", 40, 0.1, 0, 1.0)],
            failures: vec![],
            content_hash: String::new(),
        };
        let h = m.compute_content_hash().unwrap();
        m.timings.insert("attack".into(), 3.0);
        assert_eq!(m.compute_content_hash().unwrap(), h);
        m.rows[0].fid = 2.0;
        assert_ne!(m.compute_content_hash().unwrap(), h);
    }
}

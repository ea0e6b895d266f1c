//! Latent-collapse measurements and the metrics sink.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::repr::Representation;
use crate::scalar::Scalar;

/// Numerical rank: singular values above `rel_tol · max(B, W) · σ_max`.
pub fn latent_rank<T: Scalar>(z: &Tensor<T>, rel_tol: f64) -> Result<usize> {
    if !z.is_finite() {
        return Err(Error::NonFinite("latent batch".into()));
    }
    let (b, w) = (z.rows(), z.cols());
    let m = DMatrix::from_row_iterator(b, w, z.data().iter().map(|v| v.to_f64_lossy()));
    let sv = m.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tol = rel_tol * b.max(w) as f64 * smax;
    Ok(sv.iter().filter(|&&s| s > tol && s > 0.0).count())
}

/// Rank tolerance for the active float width.
pub fn default_rel_tol<T: Scalar>() -> f64 {
    T::epsilon().to_f64_lossy()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub rank: usize,
    pub rank_max: usize,
    /// Every probe observation maps to the same latent.
    pub constant: bool,
}

/// Encodes a probe batch with the online encoder and measures collapse.
pub fn collapse_probe<T: Scalar>(repr: &Representation<T>, probe: &Tensor<T>) -> Result<CollapseReport> {
    if probe.rows() < 2 {
        return Err(Error::Config("collapse probe needs at least two observations".into()));
    }
    let z = repr.encode(probe)?;
    let rank = latent_rank(&z, default_rel_tol::<T>())?;
    let first = z.row(0);
    let constant = (1..z.rows()).all(|r| z.row(r) == first);
    Ok(CollapseReport {
        rank,
        rank_max: z.rows().min(z.cols()),
        constant,
    })
}

/// One line of `metrics.csv` / `metrics.jsonl`. Empty fields mean "not
/// available yet" (no update or episode so far, or no quantizer).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_step: u64,
    pub episode: u64,
    pub episodic_return: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub rep_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub latent_rank: Option<u64>,
    pub latent_rank_max: Option<u64>,
    pub codebook_active_frac: Option<f64>,
    pub expl_noise_std: f64,
    pub wall_time_s: f64,
}

pub const METRICS_COLUMNS: [&str; 12] = [
    "env_step",
    "episode",
    "episodic_return",
    "eval_return_mean",
    "rep_loss",
    "critic_loss",
    "actor_loss",
    "latent_rank",
    "latent_rank_max",
    "codebook_active_frac",
    "expl_noise_std",
    "wall_time_s",
];

/// Appends rows to `metrics.csv` and `metrics.jsonl` under one directory.
pub struct MetricsSink {
    dir: PathBuf,
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    rows: usize,
}

impl MetricsSink {
    /// Starts fresh files, or continues existing ones when `append` is set.
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join("metrics.csv");
        let has_rows = append && std::fs::metadata(&csv_path).map(|m| m.len() > 0).unwrap_or(false);
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
        };
        let csv = csv::WriterBuilder::new()
            .has_headers(!has_rows)
            .from_writer(open(&csv_path)?);
        let jsonl = BufWriter::new(open(&dir.join("metrics.jsonl"))?);
        Ok(Self {
            dir: dir.to_path_buf(),
            csv,
            jsonl,
            rows: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.csv.serialize(row)?;
        self.csv.flush()?;
        serde_json::to_writer(&mut self.jsonl, row)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        self.rows += 1;
        Ok(())
    }
}

/// Parses a metrics CSV back into rows.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Config(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

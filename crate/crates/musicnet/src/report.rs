//! Run artifacts: the JSON report, the per-epoch loss table, and the
//! correlation-matrix CSV dumps for external heatmap rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::ClassificationMetrics;
use crate::spectral::CorrelationMatrix;

/// One logged epoch: components already carry their 1/L and 1/(L−1)
/// normalizers, so `total = recon + λ1·adjust + λ2·contrast + λ3·task`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub recon: f64,
    pub adjust: f64,
    pub contrast: f64,
    pub task: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InterpolationReport {
    pub mse: f64,
    pub baseline_mse: f64,
    pub evaluated_instances: usize,
    pub skipped_instances: usize,
    pub hidden_cells: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ForecastReport {
    pub mse: f64,
    pub baseline_mse: f64,
    pub evaluated_instances: usize,
    pub skipped_instances: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub num_scales: usize,
    pub max_refs: usize,
    pub epochs_run: usize,
    pub losses: Vec<LossRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interpolation: Option<InterpolationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forecast: Option<ForecastReport>,
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::data(format!("cannot encode report: {e}")))?;
    std::fs::write(&path, text)?;
    Ok(())
}

pub fn write_losses_csv(dir: &Path, rows: &[LossRow]) -> Result<()> {
    let path = dir.join("losses.csv");
    let mut writer = csv::Writer::from_path(&path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    writer
        .write_record(["epoch", "recon", "adjust", "contrast", "task", "total", "lr"])
        .map_err(|e| Error::data(format!("csv write failed: {e}")))?;
    for row in rows {
        writer
            .write_record([
                row.epoch.to_string(),
                row.recon.to_string(),
                row.adjust.to_string(),
                row.contrast.to_string(),
                row.task.to_string(),
                row.total.to_string(),
                row.lr.to_string(),
            ])
            .map_err(|e| Error::data(format!("csv write failed: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

/// Write a D×D matrix as CSV with a `c0..c{D-1}` header row. Values print
/// in shortest round-trip form, so re-parsing reproduces them exactly.
pub fn write_matrix_csv(path: &Path, num_channels: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), num_channels * num_channels, "matrix shape mismatch");
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    let header: Vec<String> = (0..num_channels).map(|j| format!("c{j}")).collect();
    writer.write_record(&header).map_err(|e| Error::data(format!("csv write failed: {e}")))?;
    for i in 0..num_channels {
        let row: Vec<String> =
            (0..num_channels).map(|j| values[i * num_channels + j].to_string()).collect();
        writer.write_record(&row).map_err(|e| Error::data(format!("csv write failed: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<(usize, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let d = reader.headers().map_err(|e| Error::data(format!("csv read failed: {e}")))?.len();
    let mut values = Vec::with_capacity(d * d);
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("csv read failed: {e}")))?;
        if record.len() != d {
            return Err(Error::data(format!(
                "matrix row has {} columns, expected {d}",
                record.len()
            )));
        }
        for field in record.iter() {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|_| Error::data(format!("bad matrix entry {field:?}")))?,
            );
        }
    }
    if values.len() != d * d {
        return Err(Error::data(format!(
            "matrix file has {} values, expected {}",
            values.len(),
            d * d
        )));
    }
    Ok((d, values))
}

/// Emit weight + distance CSVs for one correlation matrix under the given
/// file stem; returns the written file names.
pub fn dump_correlation(dir: &Path, stem: &str, matrix: &CorrelationMatrix) -> Result<Vec<String>> {
    let weights_name = format!("{stem}.csv");
    let dist_name = format!("{stem}_dist.csv");
    write_matrix_csv(&dir.join(&weights_name), matrix.num_channels, &matrix.weights)?;
    write_matrix_csv(&dir.join(&dist_name), matrix.num_channels, &matrix.raw_distances)?;
    Ok(vec![weights_name, dist_name])
}

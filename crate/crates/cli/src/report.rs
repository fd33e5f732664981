//! Report rows written as CSV (machine-readable) and markdown (for reading).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Pruning summary: accuracy, remaining parameters, compression rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub network: String,
    /// Test accuracy in percent.
    pub accuracy: f64,
    pub params: usize,
    pub compression_rate: String,
}

/// Quantisation summary: accuracy, payload size and batch-1 latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub network: String,
    pub accuracy: f64,
    /// Signed change against the input model, in points.
    pub accuracy_delta: f64,
    pub size_mb: f64,
    pub size_bytes: u64,
    pub latency_ms: f64,
}

/// Overfitting study: test accuracy and parameter count per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub network: String,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub params: usize,
}

/// Warm batch-1 latency statistics of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub model: String,
    pub accuracy: f64,
    pub params: usize,
    pub size_bytes: u64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub samples: usize,
    /// Reference median over this model's median.
    pub speedup: Option<f64>,
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, CliError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("report parse: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    write_text(path, &to_csv(rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    from_csv(&text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn markdown(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        s.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    s
}

pub fn table1_markdown(rows: &[Table1Row]) -> String {
    markdown(
        &["Network", "Accuracy (%)", "Total Parameters", "Compression Rate"],
        rows.iter()
            .map(|r| {
                vec![
                    r.network.clone(),
                    format!("{:.2}", r.accuracy),
                    r.params.to_string(),
                    r.compression_rate.clone(),
                ]
            })
            .collect(),
    )
}

pub fn table2_markdown(rows: &[Table2Row]) -> String {
    markdown(
        &[
            "Network",
            "Accuracy (%)",
            "Δ Accuracy",
            "Size (MB)",
            "Inference Time (ms)",
        ],
        rows.iter()
            .map(|r| {
                vec![
                    r.network.clone(),
                    format!("{:.2}", r.accuracy),
                    format!("{:+.2}", r.accuracy_delta),
                    format!("{:.4}", r.size_mb),
                    format!("{:.3}", r.latency_ms),
                ]
            })
            .collect(),
    )
}

pub fn table3_markdown(rows: &[Table3Row]) -> String {
    markdown(
        &["Network", "Test Accuracy (%)", "Train Accuracy (%)", "Parameters"],
        rows.iter()
            .map(|r| {
                vec![
                    r.network.clone(),
                    format!("{:.2}", r.test_accuracy),
                    format!("{:.2}", r.train_accuracy),
                    r.params.to_string(),
                ]
            })
            .collect(),
    )
}

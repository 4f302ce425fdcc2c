//! Per-step training metrics: CSV logging and EMA smoothing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::trainer::TrainError;

pub const METRICS_HEADER: &str = "step,mean_reward,mean_completion_len,mean_kl_estimate,grad_norm,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_completion_len: f64,
    pub mean_kl_estimate: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.mean_completion_len,
            self.mean_kl_estimate,
            self.grad_norm,
            self.lr
        )
    }
}

/// Line-buffered CSV writer, flushed after every row.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: String,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter, TrainError> {
        let display = path.display().to_string();
        let io = |e| TrainError::Io { path: display.clone(), source: e };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io)?;
            }
        }
        let file = File::create(path).map_err(io)?;
        let mut w = MetricsWriter { out: BufWriter::new(file), path: display };
        w.write_line(METRICS_HEADER)?;
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<(), TrainError> {
        let io = |e| TrainError::Io { path: self.path.clone(), source: e };
        self.out.write_all(line.as_bytes()).map_err(io)?;
        self.out.write_all(b"\n").map_err(io)?;
        self.out.flush().map_err(io)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), TrainError> {
        self.write_line(&row.to_csv())
    }
}

/// Parse a metrics CSV back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| TrainError::Io { path: display.clone(), source: e })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(TrainError::Config(format!("{display}: unexpected csv header")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(TrainError::Config(format!("{display}:{}: malformed row", i + 1)));
        }
        let parse = |s: &str| -> Result<f64, TrainError> {
            s.parse().map_err(|_| TrainError::Config(format!("{display}:{}: bad number", i + 1)))
        };
        rows.push(MetricsRow {
            step: fields[0]
                .parse()
                .map_err(|_| TrainError::Config(format!("{display}:{}: bad step", i + 1)))?,
            mean_reward: parse(fields[1])?,
            mean_completion_len: parse(fields[2])?,
            mean_kl_estimate: parse(fields[3])?,
            grad_norm: parse(fields[4])?,
            lr: parse(fields[5])?,
        });
    }
    Ok(rows)
}

/// Exponential moving average: s₀ = x₀, s_t = decay·s_{t−1} + (1−decay)·x_t.
pub fn ema(series: &[f64], decay: f64) -> Result<Vec<f64>, TrainError> {
    if series.is_empty() {
        return Err(TrainError::Config("ema of an empty series".into()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(TrainError::Config("ema decay must lie in [0, 1]".into()));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut s = series[0];
    out.push(s);
    for &x in &series[1..] {
        s = decay * s + (1.0 - decay) * x;
        out.push(s);
    }
    Ok(out)
}

//! Hardware-based training-energy estimates and (metric, energy) Pareto selection.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Memory power draw per GB (3 W per 8 GB).
pub const MEMORY_W_PER_GB: f64 = 3.0 / 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareSpec {
    pub n_gpus: f64,
    pub gpu_power_w: f64,
    pub gpu_usage: f64,
    pub n_cpu_cores: f64,
    pub core_power_w: f64,
    pub cpu_usage: f64,
    pub memory_gb: f64,
    pub pue: f64,
}

impl Default for HardwareSpec {
    /// A single 250 W GPU with 4 reserved 10 W cores, 32 GB of memory and PUE 1.5.
    fn default() -> Self {
        Self {
            n_gpus: 1.0,
            gpu_power_w: 250.0,
            gpu_usage: 1.0,
            n_cpu_cores: 4.0,
            core_power_w: 10.0,
            cpu_usage: 1.0,
            memory_gb: 32.0,
            pue: 1.5,
        }
    }
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_gpus", self.n_gpus),
            ("gpu_power_w", self.gpu_power_w),
            ("gpu_usage", self.gpu_usage),
            ("n_cpu_cores", self.n_cpu_cores),
            ("core_power_w", self.core_power_w),
            ("cpu_usage", self.cpu_usage),
            ("memory_gb", self.memory_gb),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("hardware field {name} must be finite and >= 0, got {v}")));
        }
        if !(self.pue.is_finite() && self.pue >= 1.0) {
            return Err(Error::Config(format!("pue must be >= 1, got {}", self.pue)));
        }
        Ok(())
    }

    /// Device power draw in watts before the PUE factor.
    pub fn power_w(&self) -> f64 {
        self.n_gpus * self.gpu_power_w * self.gpu_usage
            + self.n_cpu_cores * self.core_power_w * self.cpu_usage
            + self.memory_gb * MEMORY_W_PER_GB
    }
}

/// `h · (gpus·W·u + cores·W·u + GB·0.375) · pue / 1000`.
pub fn estimate_energy(wall_time_h: f64, hw: &HardwareSpec) -> Result<f64> {
    if !(wall_time_h.is_finite() && wall_time_h >= 0.0) {
        return Err(Error::Config(format!("wall time must be >= 0, got {wall_time_h}")));
    }
    hw.validate()?;
    Ok(wall_time_h * hw.power_w() * hw.pue / 1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub model: String,
    pub source: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_metric_db: Option<f64>,
    pub wall_time_h: f64,
    pub hardware: HardwareSpec,
    pub energy_kwh: f64,
    /// Externally measured energy, when available.
    #[serde(default)]
    pub measured_kwh: Option<f64>,
}

impl RunReport {
    /// Fills `energy_kwh` from the wall time and hardware.
    pub fn with_estimate(mut self) -> Result<Self> {
        self.energy_kwh = estimate_energy(self.wall_time_h, &self.hardware)?;
        Ok(self)
    }

    pub fn is_consistent(&self) -> bool {
        estimate_energy(self.wall_time_h, &self.hardware)
            .map(|e| (e - self.energy_kwh).abs() <= 1e-9 * e.abs().max(1.0))
            .unwrap_or(false)
    }

    /// Appends one JSON line to `path`.
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        let mut line = serde_json::to_string(self)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<Self>> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub metric_db: f64,
    pub energy_kwh: f64,
}

/// `a` dominates `b` when it is at least as good on both axes and strictly better on one.
pub fn dominates(a: ParetoPoint, b: ParetoPoint) -> bool {
    a.metric_db >= b.metric_db
        && a.energy_kwh <= b.energy_kwh
        && (a.metric_db > b.metric_db || a.energy_kwh < b.energy_kwh)
}

/// Indices of the non-dominated points, ordered by energy (ties by original index).
pub fn pareto_indices(points: &[ParetoPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .energy_kwh
            .total_cmp(&points[j].energy_kwh)
            .then(points[j].metric_db.total_cmp(&points[i].metric_db))
            .then(i.cmp(&j))
    });
    // sweep by increasing energy; a point survives if it beats every cheaper metric seen so far
    let mut front = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut k = 0;
    while k < order.len() {
        let e = points[order[k]].energy_kwh;
        let mut group_end = k;
        while group_end < order.len() && points[order[group_end]].energy_kwh == e {
            group_end += 1;
        }
        let top = points[order[k]].metric_db;
        if top > best {
            for &i in &order[k..group_end] {
                if points[i].metric_db == top {
                    front.push(i);
                }
            }
            best = top;
        }
        k = group_end;
    }
    front
}

pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    pareto_indices(points).into_iter().map(|i| points[i]).collect()
}

/// Table of runs with a Pareto marker, one row per run.
pub fn render_table(reports: &[RunReport]) -> String {
    let points: Vec<ParetoPoint> = reports
        .iter()
        .map(|r| ParetoPoint {
            metric_db: r.best_metric_db.unwrap_or(f64::NEG_INFINITY),
            energy_kwh: r.energy_kwh,
        })
        .collect();
    let front = pareto_indices(&points);
    let mut out = format!(
        "{:<24} {:<8} {:>6} {:>10} {:>9} {:>12} {:>7}\n",
        "model", "source", "epochs", "best (dB)", "hours", "energy (kWh)", "pareto"
    );
    for (i, r) in reports.iter().enumerate() {
        let metric = r.best_metric_db.map_or_else(|| "n/a".into(), |m| format!("{m:.3}"));
        out.push_str(&format!(
            "{:<24} {:<8} {:>6} {:>10} {:>9.3} {:>12.4} {:>7}\n",
            r.model,
            r.source,
            r.epochs,
            metric,
            r.wall_time_h,
            r.energy_kwh,
            if front.contains(&i) { "*" } else { "" }
        ));
    }
    out
}

//! Velocity, bias and gravity error metrics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// `sqrt(mean ‖e‖²)` over vector errors.
pub fn rmse(errors: &[Vector3<f64>]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    let sum: f64 = errors.iter().map(|e| e.norm_squared()).sum();
    Ok((sum / errors.len() as f64).sqrt())
}

/// Angle between two gravity vectors, in `[0, π]`.
pub fn gravity_angle(estimate: &Vector3<f64>, reference: &Vector3<f64>) -> Result<f64> {
    let (a, b) = (estimate.norm(), reference.norm());
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidInput("gravity vector has zero length".into()));
    }
    Ok((estimate.dot(reference) / (a * b)).clamp(-1.0, 1.0).acos())
}

/// Errors of one evaluated subsequence. Bias and gravity entries are
/// `None` when the run has no reference for them (or no IMU).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsequenceMetrics {
    pub index: usize,
    pub start_frame: usize,
    /// cm/s
    pub rmse_v: f64,
    /// rad/s
    pub rmse_w: f64,
    /// rad/s
    pub rmse_bg: Option<f64>,
    /// cm/s²
    pub rmse_ba: Option<f64>,
    /// rad
    pub theta_g: Option<f64>,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rmse_v: Stat,
    pub rmse_w: Stat,
    pub rmse_bg: Option<Stat>,
    pub rmse_ba: Option<Stat>,
    pub theta_g: Option<Stat>,
    pub subsequences: Vec<SubsequenceMetrics>,
    /// Subsequences excluded as degenerate.
    pub degenerate: usize,
}

/// Per-metric mean ± standard deviation over subsequences.
pub fn aggregate(subs: &[SubsequenceMetrics], degenerate: usize) -> Result<MetricsReport> {
    if subs.is_empty() {
        return Err(Error::Empty("subsequence reports"));
    }
    let collect = |f: &dyn Fn(&SubsequenceMetrics) -> Option<f64>| -> Vec<f64> { subs.iter().filter_map(f).collect() };
    Ok(MetricsReport {
        rmse_v: Stat::from_values(&collect(&|s| Some(s.rmse_v))).expect("nonempty"),
        rmse_w: Stat::from_values(&collect(&|s| Some(s.rmse_w))).expect("nonempty"),
        rmse_bg: Stat::from_values(&collect(&|s| s.rmse_bg)),
        rmse_ba: Stat::from_values(&collect(&|s| s.rmse_ba)),
        theta_g: Stat::from_values(&collect(&|s| s.theta_g)),
        subsequences: subs.to_vec(),
        degenerate,
    })
}

impl MetricsReport {
    /// One `key = value` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |key: &str, stat: Option<&Stat>| {
            match stat {
                Some(st) => {
                    let _ = writeln!(s, "{key}_mean = {:.6}", st.mean);
                    let _ = writeln!(s, "{key}_std = {:.6}", st.std);
                }
                None => {
                    let _ = writeln!(s, "{key}_mean = -");
                    let _ = writeln!(s, "{key}_std = -");
                }
            }
        };
        line("rmse_v", Some(&self.rmse_v));
        line("rmse_w", Some(&self.rmse_w));
        line("rmse_bg", self.rmse_bg.as_ref());
        line("rmse_ba", self.rmse_ba.as_ref());
        line("theta_g", self.theta_g.as_ref());
        let _ = writeln!(s, "subsequences = {}", self.subsequences.len());
        let _ = writeln!(s, "degenerate = {}", self.degenerate);
        s
    }

    /// Per-subsequence table; missing values are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let mut s = String::from("index,start_frame,rmse_v,rmse_w,rmse_bg,rmse_ba,theta_g\n");
        for m in &self.subsequences {
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.9},{},{},{}",
                m.index,
                m.start_frame,
                m.rmse_v,
                m.rmse_w,
                opt(m.rmse_bg),
                opt(m.rmse_ba),
                opt(m.theta_g)
            );
        }
        s
    }
}

/// Reads the table written by [`MetricsReport::to_csv`].
pub fn parse_subsequence_csv(text: &str, path: &Path) -> Result<Vec<SubsequenceMetrics>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || n == 0 && line.starts_with("index") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::parse(path, n + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::parse(path, n + 1, format!("`{s}`: {e}")));
        let opt = |s: &str| if s.trim().is_empty() { Ok(None) } else { num(s).map(Some) };
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::parse(path, n + 1, format!("`{s}`: {e}")));
        out.push(SubsequenceMetrics {
            index: int(f[0])?,
            start_frame: int(f[1])?,
            rmse_v: num(f[2])?,
            rmse_w: num(f[3])?,
            rmse_bg: opt(f[4])?,
            rmse_ba: opt(f[5])?,
            theta_g: opt(f[6])?,
        });
    }
    Ok(out)
}

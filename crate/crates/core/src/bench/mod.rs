//! Cost accounting and evaluation: pass counters, epoch timing, accuracy
//! under attack, and run reports.

mod counters;

pub use counters::*;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attacks::{multi_restart_attack, AdversaryBudget, Classifier};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Samples per evaluation chunk. Chunks run in parallel and each draws its
/// attack seeds from its own stream.
pub const EVAL_CHUNK: usize = 128;

/// Accuracy of a classifier on clean and (optionally) attacked inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub natural_acc: f64,
    pub adv_acc: Option<f64>,
}

/// Clean accuracy, plus robust accuracy under `budget` when given. A sample
/// counts as robust when none of the attack's restarts flips its prediction.
pub fn evaluate<C: Classifier + ?Sized, R: Rng + ?Sized>(
    model: &C,
    data: &Dataset,
    budget: Option<&AdversaryBudget>,
    rng: &mut R,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InsufficientData("cannot evaluate on an empty dataset".into()));
    }
    if let Some(b) = budget {
        b.validate()?;
    }
    let n = data.len();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let seeds: Vec<u64> = starts.iter().map(|_| rng.random()).collect();
    let jobs: Vec<(usize, u64)> = starts.into_iter().zip(seeds).collect();
    let tallies = par::map(&jobs, |&(start, seed)| -> Result<(usize, usize)> {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = data.inputs.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let (_, preds) = model.assess(&x, &y, Phase::Eval)?;
        let natural = preds.iter().zip(&y).filter(|(p, t)| p == t).count();
        let robust = match budget {
            Some(b) => {
                let out = multi_restart_attack(model, &x, &y, b, &mut ChaCha8Rng::seed_from_u64(seed))?;
                out.success.iter().filter(|s| !**s).count()
            }
            None => 0,
        };
        Ok((natural, robust))
    });
    let (mut natural, mut robust) = (0, 0);
    for t in tallies {
        let (a, b) = t?;
        natural += a;
        robust += b;
    }
    Ok(Evaluation { natural_acc: natural as f64 / n as f64, adv_acc: budget.map(|_| robust as f64 / n as f64) })
}

/// Mean and half-width of the two-sided 95% Student-t interval.
pub fn confidence_interval_95(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("a confidence interval needs at least 2 samples, got {n}")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Config(e.to_string()))?.inverse_cdf(0.975);
    Ok((mean, t * (var / n as f64).sqrt()))
}

/// Smallest observable non-zero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Timings, pass counts and accuracies of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub method: String,
    pub seed: u64,
    pub epochs: usize,
    pub epoch_times_s: Vec<f64>,
    pub epoch_time_mean_s: f64,
    /// Zero when fewer than two epochs ran.
    pub epoch_time_ci95_s: f64,
    pub total_time_s: f64,
    /// Adds the teacher's own training time when one was used.
    pub total_time_with_teacher_s: f64,
    pub timer_resolution_s: f64,
    /// Student passes plus the teacher passes the run caused.
    pub counters: LedgerSnapshot,
    /// Parameter updates applied.
    pub updates: u64,
    /// Number of sweeps over the training set.
    pub dataset_passes: f64,
    pub natural_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    /// The configuration the run was launched with.
    pub config: serde_json::Value,
}

impl RunReport {
    /// Fills the derived timing fields from `epoch_times_s`.
    pub fn new(method: &str, seed: u64, epoch_times_s: Vec<f64>, teacher_time_s: f64) -> Self {
        let total: f64 = epoch_times_s.iter().sum();
        let (mean, ci) = match confidence_interval_95(&epoch_times_s) {
            Ok(v) => v,
            Err(_) => (epoch_times_s.first().copied().unwrap_or(0.0), 0.0),
        };
        Self {
            format_version: REPORT_FORMAT_VERSION,
            method: method.to_string(),
            seed,
            epochs: epoch_times_s.len(),
            epoch_time_mean_s: mean,
            epoch_time_ci95_s: ci,
            total_time_s: total,
            total_time_with_teacher_s: total + teacher_time_s,
            timer_resolution_s: timer_resolution().as_secs_f64(),
            epoch_times_s,
            counters: LedgerSnapshot::default(),
            updates: 0,
            dataset_passes: 0.0,
            natural_acc: None,
            adv_acc: None,
            config: serde_json::Value::Null,
        }
    }

    pub fn with_evaluation(mut self, e: Evaluation) -> Self {
        self.natural_acc = Some(e.natural_acc);
        self.adv_acc = e.adv_acc;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(s).map_err(|e| Error::Config(format!("run report: {e}")))?;
        if r.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "run report version {} is not supported (expected {REPORT_FORMAT_VERSION})",
                r.format_version
            )));
        }
        Ok(r)
    }
}

pub const CSV_COLUMNS: [&str; 13] = [
    "method",
    "epochs",
    "epoch_time_mean_s",
    "epoch_time_ci95_s",
    "total_time_s",
    "total_time_with_teacher_s",
    "natural_acc",
    "adv_acc",
    "fwd_train",
    "bwd_train",
    "fwd_attack",
    "bwd_attack",
    "seed",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header plus one row per report.
pub fn reports_to_csv(reports: &[RunReport]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let c = &r.counters;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.epochs,
            r.epoch_time_mean_s,
            r.epoch_time_ci95_s,
            r.total_time_s,
            r.total_time_with_teacher_s,
            opt(r.natural_acc),
            opt(r.adv_acc),
            c.train.forwards,
            c.train.backwards,
            c.attack.forwards,
            c.attack.backwards,
            r.seed
        );
    }
    out
}

/// Parses one comma-separated row back into `(column, value)` pairs.
pub fn parse_csv_row(line: &str) -> Result<Vec<(&'static str, String)>> {
    let cells: Vec<&str> = line.trim_end().split(',').collect();
    if cells.len() != CSV_COLUMNS.len() {
        return Err(Error::Config(format!("expected {} columns, found {}", CSV_COLUMNS.len(), cells.len())));
    }
    Ok(CSV_COLUMNS.iter().copied().zip(cells.into_iter().map(String::from)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    /// Versioned JSON carrying the full config echo.
    Structured,
}

pub fn emit_report(report: &RunReport, path: impl AsRef<std::path::Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Csv => reports_to_csv(std::slice::from_ref(report)),
        ReportFormat::Structured => report.to_json()?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a structured report written by [`emit_report`].
pub fn read_report(path: impl AsRef<std::path::Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunReport::from_json(&text)
}

/// Mean absolute difference of two equally shaped tensors; handy for
/// comparing robustified inputs.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.zip_map(b, |x, y| (x - y).abs())?;
    Ok(d.data().iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_of_constant_samples_is_zero() {
        let (m, h) = confidence_interval_95(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((m, h), (2.0, 0.0));
    }

    #[test]
    fn ci_matches_t_table() {
        // n = 5, sd = 1: t(0.975, 4) = 2.776445 -> half-width 2.776445 / sqrt(5).
        let s = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let sd = (2.5f64 / 4.0).sqrt();
        let (m, h) = confidence_interval_95(&s.map(|v| v / sd)).unwrap();
        assert!(m.abs() < 1e-15);
        assert!((h - 2.776445 / 5f64.sqrt()).abs() < 1e-5, "{h}");
    }

    #[test]
    fn ci_needs_two_samples() {
        assert!(matches!(confidence_interval_95(&[1.0]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn empty_run_report_has_one_row() {
        let r = RunReport::new("erm", 3, vec![], 0.0);
        let csv = reports_to_csv(&[r]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        let row = parse_csv_row(lines[1]).unwrap();
        assert_eq!(row[1], ("epochs", "0".to_string()));
        assert_eq!(row[6].1, "");
    }

    #[test]
    fn single_epoch_has_zero_ci() {
        let r = RunReport::new("erm", 0, vec![0.5], 1.0);
        assert_eq!((r.epoch_time_mean_s, r.epoch_time_ci95_s, r.total_time_with_teacher_s), (0.5, 0.0, 1.5));
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let mut r = RunReport::new("rrm", 7, vec![0.1, 0.2, 0.30000000000000004], 2.0);
        r.natural_acc = Some(0.123456789);
        let back = RunReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let bumped = r.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(RunReport::from_json(&bumped).is_err());
    }

    #[test]
    fn emitted_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = RunReport::new("sat", 1, vec![1.5, 1.25], 0.0);
        let p = dir.path().join("r.json");
        emit_report(&r, &p, ReportFormat::Structured).unwrap();
        assert_eq!(read_report(&p).unwrap(), r);
        let c = dir.path().join("r.csv");
        emit_report(&r, &c, ReportFormat::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&c).unwrap(), reports_to_csv(&[r]));
        let err =
            emit_report(&RunReport::new("x", 0, vec![], 0.0), dir.path().join("no/such/dir.csv"), ReportFormat::Csv);
        assert!(err.unwrap_err().to_string().contains("no/such/dir.csv"));
    }

    #[test]
    fn timer_resolution_is_positive() {
        assert!(timer_resolution() > Duration::ZERO);
    }
}

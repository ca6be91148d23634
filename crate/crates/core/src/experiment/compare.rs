use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::METRICS_FILE;
use super::{ExperimentError, Result};

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: u64,
    pub train_loss: f64,
    pub acc_moving: f64,
    pub acc_batch: f64,
}

/// Parses a metrics file; returns the config hash from its header and the rows.
pub fn read_metrics(path: &Path) -> Result<(Option<String>, Vec<MetricsRow>)> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |message: String| ExperimentError::Metrics {
        path: path.to_path_buf(),
        message,
    };
    let mut hash = None;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(h) = comment.trim().strip_prefix("config_hash=") {
                hash = Some(h.to_string());
            }
            continue;
        }
        if !header_seen {
            if line != "step,epoch,train_loss,acc_moving,acc_batch" {
                return Err(bad(format!("line {}: unexpected header `{line}`", i + 1)));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("line {}: expected 5 fields", i + 1)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {}: bad number `{s}`", i + 1)));
        let row = MetricsRow {
            step: f[0].parse().map_err(|_| bad(format!("line {}: bad step", i + 1)))?,
            epoch: f[1].parse().map_err(|_| bad(format!("line {}: bad epoch", i + 1)))?,
            train_loss: num(f[2])?,
            acc_moving: num(f[3])?,
            acc_batch: num(f[4])?,
        };
        if rows.last().is_some_and(|r| r.step >= row.step) {
            return Err(bad(format!("line {}: steps must increase", i + 1)));
        }
        rows.push(row);
    }
    if !header_seen {
        return Err(bad("missing header".into()));
    }
    Ok((hash, rows))
}

/// First step whose moving-statistics accuracy reaches `threshold`.
pub fn steps_to_threshold(rows: &[MetricsRow], threshold: f64) -> Option<usize> {
    rows.iter().find(|r| r.acc_moving >= threshold).map(|r| r.step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub name: String,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunSeries>,
    /// Steps present in every run.
    pub steps: Vec<usize>,
    pub thresholds: Vec<f64>,
}

impl Comparison {
    pub fn from_series(runs: Vec<RunSeries>, thresholds: Vec<f64>) -> Self {
        let mut common: Option<BTreeSet<usize>> = None;
        for r in &runs {
            let s: BTreeSet<usize> = r.rows.iter().map(|row| row.step).collect();
            common = Some(match common {
                None => s,
                Some(c) => c.intersection(&s).copied().collect(),
            });
        }
        Self {
            runs,
            steps: common.unwrap_or_default().into_iter().collect(),
            thresholds,
        }
    }

    fn at(&self, run: usize, step: usize) -> &MetricsRow {
        self.runs[run].rows.iter().find(|r| r.step == step).expect("step is common")
    }

    /// Final accuracies of run `i` minus those of the first run, `(moving, batch)`.
    pub fn final_delta(&self, i: usize) -> (f64, f64) {
        let last = |k: usize| self.runs[k].rows.last().map_or((f64::NAN, f64::NAN), |r| (r.acc_moving, r.acc_batch));
        let (a, b) = (last(i), last(0));
        (a.0 - b.0, a.1 - b.1)
    }

    /// Step-aligned series, one column group per run.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# aligned on the {} steps common to all {} runs\nstep",
            self.steps.len(),
            self.runs.len()
        );
        for r in 0..self.runs.len() {
            let _ = write!(out, ",loss_{r},acc_moving_{r},acc_batch_{r}");
        }
        out.push('\n');
        for &s in &self.steps {
            let _ = write!(out, "{s}");
            for r in 0..self.runs.len() {
                let row = self.at(r, s);
                let _ = write!(out, ",{:?},{:?},{:?}", row.train_loss, row.acc_moving, row.acc_batch);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "runs:");
        for (i, r) in self.runs.iter().enumerate() {
            let _ = writeln!(out, "  [{i}] {}", r.name);
        }
        let _ = writeln!(out, "\nfinal accuracy (delta vs [0]):");
        let _ = writeln!(out, "  {:>4} {:>10} {:>10} {:>10} {:>10}", "run", "moving", "d_moving", "batch", "d_batch");
        for (i, r) in self.runs.iter().enumerate() {
            let (m, b) = r.rows.last().map_or((f64::NAN, f64::NAN), |x| (x.acc_moving, x.acc_batch));
            let (dm, db) = self.final_delta(i);
            let _ = writeln!(out, "  {i:>4} {m:>10.4} {dm:>+10.4} {b:>10.4} {db:>+10.4}");
        }
        let _ = writeln!(out, "\nsteps to moving-stats accuracy:");
        let _ = write!(out, "  {:>9}", "threshold");
        for i in 0..self.runs.len() {
            let _ = write!(out, " {:>8}", format!("[{i}]"));
        }
        out.push('\n');
        for &t in &self.thresholds {
            let _ = write!(out, "  {t:>9.3}");
            for r in &self.runs {
                let cell = steps_to_threshold(&r.rows, t).map_or("-".to_string(), |s| s.to_string());
                let _ = write!(out, " {cell:>8}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\n{} common steps", self.steps.len());
        out
    }
}

/// Reads `metrics.csv` from every directory and aligns the runs.
pub fn compare_runs(dirs: &[PathBuf], thresholds: &[f64]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(ExperimentError::Config("compare needs at least two run directories".into()));
    }
    let runs = dirs
        .iter()
        .map(|d| {
            let (_, rows) = read_metrics(&d.join(METRICS_FILE))?;
            Ok(RunSeries {
                name: d.display().to_string(),
                rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison::from_series(runs, thresholds.to_vec()))
}

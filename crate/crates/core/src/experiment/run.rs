use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::compare::MetricsRow;
use super::{write_file, ExperimentConfig, ExperimentError, Result};
use crate::data::{iterate, Dataset};
use crate::net::{checkpoint, sgd_step, softmax_cross_entropy, Gradients, NetError, Network, NormSettings, SgdState};
use crate::norm::{NormEpsilon, NormError};
use crate::tensor::Tensor;

/// Wall-clock accounting of the optimizer steps between two evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub step: usize,
    pub ms_per_step: f64,
    pub examples_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub config_hash: String,
    pub steps: usize,
    pub epochs: u64,
    /// Forward/backward passes, one per statistics micro-batch.
    pub passes: usize,
    pub examples: usize,
    pub train_seconds: f64,
    pub examples_per_sec: f64,
    pub final_loss: f64,
    pub acc_moving: f64,
    pub acc_batch: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub net: Network,
    pub rows: Vec<MetricsRow>,
    pub timing: Vec<TimingRow>,
    pub summary: RunSummary,
}

/// Per-step callbacks for tests and drivers.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called after every optimizer step with `(step, passes this step, net)`.
    pub on_step: Option<Box<dyn FnMut(usize, usize, &Network) + 'a>>,
}

/// Accuracy with moving statistics and with batch statistics computed over
/// consecutive chunks of `stats_batch` test samples (the last chunk may be
/// shorter).
pub fn evaluate(net: &Network, test: &Dataset, stats_batch: usize) -> Result<(f64, f64)> {
    let correct = |batch_stats: bool, chunk: usize| -> Result<usize> {
        let mut hits = 0;
        let idx: Vec<usize> = (0..test.len()).collect();
        for part in idx.chunks(chunk) {
            let (x, labels) = test.batch(part);
            let logits = net.predict(&x, batch_stats)?;
            hits += count_correct(&logits, &labels);
        }
        Ok(hits)
    };
    let n = test.len() as f64;
    let moving = correct(false, 500)? as f64 / n;
    let batch = correct(true, stats_batch.max(1))? as f64 / n;
    Ok((moving, batch))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.len() / labels.len();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            best == label
        })
        .count()
}

fn numeric(step: usize, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Numeric {
        step,
        message: message.into(),
    }
}

/// Maps non-finite conditions raised while training to numeric failures.
fn training_error(step: usize, e: NetError) -> ExperimentError {
    match &e {
        NetError::NonFiniteGradient(_) | NetError::Norm { source: NormError::NonFinite { .. }, .. } => {
            numeric(step, e.to_string())
        }
        _ => ExperimentError::Net(e),
    }
}

fn accumulate(sum: &mut Option<Gradients>, g: Gradients) -> Result<()> {
    match sum {
        None => *sum = Some(g),
        Some(s) => {
            for (name, t) in g.params {
                let acc = s.params.get_mut(&name).ok_or(ExperimentError::Net(NetError::MissingCache))?;
                for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
            }
        }
    }
    Ok(())
}

pub fn build_network(cfg: &ExperimentConfig) -> Result<Network> {
    let settings = NormSettings {
        eps: NormEpsilon::new(cfg.eps).map_err(|e| ExperimentError::Config(e.to_string()))?,
        mode: cfg.cov_mode,
        alpha: cfg.alpha,
        brn_clip: cfg.brn_clip_at(0),
    };
    Ok(Network::desk(cfg.input_dims(), &cfg.arch(), cfg.norm, settings, cfg.seed))
}

/// Builds and trains a network in memory, without writing files.
pub fn train(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    hooks: TrainHooks<'_>,
) -> Result<RunOutcome> {
    let mut net = build_network(cfg)?;
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let summary = train_into(cfg, &mut net, train, test, hooks, &mut rows, &mut timing)?;
    Ok(RunOutcome {
        net,
        rows,
        timing,
        summary,
    })
}

fn train_into(
    cfg: &ExperimentConfig,
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    mut hooks: TrainHooks<'_>,
    rows: &mut Vec<MetricsRow>,
    timing: &mut Vec<TimingRow>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    if plan.steps_per_epoch(train.len()) == 0 {
        return Err(ExperimentError::Config(format!(
            "statistics_batch {} exceeds the training set ({} samples)",
            cfg.statistics_batch,
            train.len()
        )));
    }
    let mut state = SgdState::new(cfg.lr, cfg.momentum);
    let (mut step, mut epoch, mut passes, mut examples) = (0usize, 0u64, 0usize, 0usize);
    let mut train_seconds = 0.0;
    let (mut window_loss, mut window_steps, mut window_seconds, mut window_examples) = (0.0, 0usize, 0.0, 0usize);
    let mut last_loss;
    'epochs: loop {
        for gb in iterate(&plan, train, epoch)? {
            let started = Instant::now();
            state.lr = cfg.lr_at(step);
            net.set_brn_clip(cfg.brn_clip_at(step));
            let mut sum: Option<Gradients> = None;
            let mut loss = 0.0;
            let k = gb.micro_batches.len();
            for mb in &gb.micro_batches {
                let (x, labels) = train.batch(mb);
                let (logits, caches) = net.forward_train(&x).map_err(|e| training_error(step, e))?;
                let (l, grad) = softmax_cross_entropy(&logits, &labels)?;
                if !l.is_finite() {
                    return Err(numeric(step, "non-finite loss"));
                }
                loss += l;
                accumulate(&mut sum, net.backward(&caches, &grad).map_err(|e| training_error(step, e))?)?;
                passes += 1;
                examples += mb.len();
                window_examples += mb.len();
            }
            let mut grads = sum.expect("at least one micro-batch");
            if k > 1 {
                let inv = 1.0 / k as f64;
                for t in grads.params.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
            sgd_step(net, &grads, &mut state).map_err(|e| training_error(step, e))?;
            let elapsed = started.elapsed().as_secs_f64();
            train_seconds += elapsed;
            window_seconds += elapsed;
            last_loss = loss / k as f64;
            window_loss += last_loss;
            window_steps += 1;
            step += 1;
            if let Some(f) = hooks.on_step.as_mut() {
                f(step, k, net);
            }
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let (acc_moving, acc_batch) = evaluate(net, test, cfg.statistics_batch)?;
                rows.push(MetricsRow {
                    step,
                    epoch,
                    train_loss: window_loss / window_steps as f64,
                    acc_moving,
                    acc_batch,
                });
                timing.push(TimingRow {
                    step,
                    ms_per_step: 1e3 * window_seconds / window_steps as f64,
                    examples_per_sec: window_examples as f64 / window_seconds.max(1e-12),
                });
                (window_loss, window_steps, window_seconds, window_examples) = (0.0, 0, 0.0, 0);
            }
            if step == cfg.steps {
                break 'epochs;
            }
        }
        epoch += 1;
    }
    let last = rows.last().expect("final step is always evaluated");
    Ok(RunSummary {
        config_hash: cfg.hash(),
        steps: step,
        epochs: epoch + 1,
        passes,
        examples,
        train_seconds,
        examples_per_sec: examples as f64 / train_seconds.max(1e-12),
        final_loss: last_loss,
        acc_moving: last.acc_moving,
        acc_batch: last.acc_batch,
    })
}

pub fn metrics_csv(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> String {
    let mut out = format!("# config_hash={}\n", cfg.hash());
    if let Some(p) = &cfg.reference_setting {
        let _ = writeln!(out, "# setting={p} (desk scale; published absolute numbers are not targets)");
    }
    out.push_str("step,epoch,train_loss,acc_moving,acc_batch\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:?},{:?},{:?}", r.step, r.epoch, r.train_loss, r.acc_moving, r.acc_batch);
    }
    out
}

fn timing_csv(cfg: &ExperimentConfig, rows: &[TimingRow]) -> String {
    let mut out = format!("# config_hash={}\nstep,ms_per_step,examples_per_sec\n", cfg.hash());
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{:.2}", r.step, r.ms_per_step, r.examples_per_sec);
    }
    out
}

fn report(cfg: &ExperimentConfig, s: &RunSummary) -> String {
    format!(
        "config_hash = {}\nnorm = {}\nsetting = ({},{})\nsteps = {}\nepochs = {}\npasses = {}\nexamples = {}\n\
         final_loss = {:?}\nacc_moving = {:?}\nacc_batch = {:?}\ntrain_seconds = {:.3}\nexamples_per_sec = {:.2}\n",
        s.config_hash,
        cfg.norm.as_str(),
        cfg.gradient_batch,
        cfg.statistics_batch,
        s.steps,
        s.epochs,
        s.passes,
        s.examples,
        s.final_loss,
        s.acc_moving,
        s.acc_batch,
        s.train_seconds,
        s.examples_per_sec,
    )
}

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const FAILED_CHECKPOINT_FILE: &str = "checkpoint_failed.txt";
pub const REPORT_FILE: &str = "report.txt";

fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    checkpoint::save_file(net, path).map_err(|e| match e {
        NetError::Io(source) => ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => ExperimentError::Net(other),
    })
}

/// Trains per `cfg` and writes `config.txt`, `metrics.csv`, `timing.csv`,
/// `checkpoint.txt` and `report.txt` into `out`. A numeric failure writes
/// the metrics so far and `checkpoint_failed.txt` before returning.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.load_data()?;
    std::fs::create_dir_all(out).map_err(|source| ExperimentError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let file = |name: &str| -> PathBuf { out.join(name) };
    write_file(&file(CONFIG_FILE), &cfg.to_kv())?;
    let mut net = build_network(cfg)?;
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let result = train_into(cfg, &mut net, &train_set, &test_set, TrainHooks::default(), &mut rows, &mut timing);
    write_file(&file(METRICS_FILE), &metrics_csv(cfg, &rows))?;
    write_file(&file(TIMING_FILE), &timing_csv(cfg, &timing))?;
    match result {
        Ok(summary) => {
            save_checkpoint(&net, &file(CHECKPOINT_FILE))?;
            write_file(&file(REPORT_FILE), &report(cfg, &summary))?;
            Ok(summary)
        }
        Err(e) => {
            if matches!(e, ExperimentError::Numeric { .. }) {
                save_checkpoint(&net, &file(FAILED_CHECKPOINT_FILE))?;
            }
            Err(e)
        }
    }
}

/// Loads the config and final checkpoint of a finished run.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, Network)> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let path = dir.join(CHECKPOINT_FILE);
    let net = checkpoint::load_file(&path).map_err(|e| match e {
        NetError::Io(source) => ExperimentError::Io { path, source },
        other => ExperimentError::Net(other),
    })?;
    Ok((cfg, net))
}

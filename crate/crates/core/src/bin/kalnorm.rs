use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kalnorm::experiment::{self, preset, ExperimentConfig, ExperimentError};
use kalnorm::norm::NormKind;
use kalnorm::verify::{self, LayerCheckConfig};

#[derive(Parser)]
#[command(name = "kalnorm", version, about = "Batch Kalman Normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write a run directory.
    Train {
        /// Flat `key = value` or JSON config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Batch setting applied on top of the config file.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory [default: runs/<norm>-<g>x<s>-seed<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align the metrics of finished runs and report deltas.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Comma-separated accuracy thresholds for steps-to-threshold.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.8, 0.9])]
        thresholds: Vec<f64>,
        /// Also write comparison.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic layer gradients against central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = LayerArg::Bkn)]
        layer: LayerArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of instances, seeds `seed..seed+count`.
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// Random BKN shapes instead of the fixed small layer.
        #[arg(long)]
        random_shape: bool,
        /// Write the per-parameter CSV report of the last instance here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch-vs-moving variance gap of a trained run.
    Vargap {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        /// Statistics batch size [default: the run's statistics_batch].
        #[arg(long)]
        stats_batch: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Bn,
    Brn,
    Bkn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            preset,
            seed,
            out,
        } => train(config.as_deref(), preset.as_deref(), seed, out),
        Command::Compare { dirs, thresholds, out } => compare(&dirs, &thresholds, out.as_deref()),
        Command::Gradcheck {
            layer,
            seed,
            count,
            random_shape,
            out,
        } => gradcheck(layer, seed, count, random_shape, out.as_deref()),
        Command::Vargap {
            run,
            split,
            stats_batch,
        } => vargap(&run, split, stats_batch),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn train(config: Option<&Path>, preset_name: Option<&str>, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(name) = preset_name {
        let p = preset(name)?;
        cfg.gradient_batch = p.gradient_batch;
        cfg.statistics_batch = p.statistics_batch;
        cfg.preset = p.preset;
        cfg.reference_setting = p.reference_setting;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = out.unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-{}x{}-seed{}",
            cfg.norm.as_str(),
            cfg.gradient_batch,
            cfg.statistics_batch,
            cfg.seed
        ))
    });
    let s = experiment::run_experiment(&cfg, &out)?;
    println!(
        "{}: {} steps, loss {:.4}, acc moving {:.4}, acc batch {:.4}, {:.1} examples/sec",
        out.display(),
        s.steps,
        s.final_loss,
        s.acc_moving,
        s.acc_batch,
        s.examples_per_sec
    );
    Ok(ExitCode::SUCCESS)
}

fn compare(dirs: &[PathBuf], thresholds: &[f64], out: Option<&Path>) -> Result<ExitCode> {
    let cmp = experiment::compare_runs(dirs, thresholds)?;
    print!("{}", cmp.to_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write(&dir.join("comparison.csv"), &cmp.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(layer: LayerArg, seed: u64, count: u64, random_shape: bool, out: Option<&Path>) -> Result<ExitCode> {
    let kind = match layer {
        LayerArg::Bn => NormKind::Bn,
        LayerArg::Brn => NormKind::Brn,
        LayerArg::Bkn => NormKind::Bkn,
    };
    if random_shape && kind != NormKind::Bkn {
        return Err(ExperimentError::Config("--random-shape applies to bkn only".into()));
    }
    let mut failed = 0;
    let mut last = None;
    for s in seed..seed + count {
        let cfg = if random_shape {
            LayerCheckConfig::random_bkn(s)
        } else {
            LayerCheckConfig::small(kind)
        };
        let report = verify::check_layer_gradients(&cfg, s)?;
        let status = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "{} seed {s} m={} C={} {}x{}: max_rel {:.3e} {status}",
            kind.as_str(),
            cfg.batch,
            cfg.channels,
            cfg.height,
            cfg.width,
            report.max_rel()
        );
        if !report.passed() {
            failed += 1;
            print!("{}", report.summary());
        }
        last = Some(report);
    }
    if let (Some(path), Some(report)) = (out, last) {
        write(path, &report.to_csv())?;
    }
    println!("{} of {count} instances passed", count - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn vargap(run: &Path, split: Split, stats_batch: Option<usize>) -> Result<ExitCode> {
    let (cfg, net) = experiment::load_run(run)?;
    let (train_set, test_set) = cfg.load_data()?;
    let ds = match split {
        Split::Train => &train_set,
        Split::Test => &test_set,
    };
    let report = verify::variance_gap(&net, ds, stats_batch.unwrap_or(cfg.statistics_batch))?;
    write(&run.join("vargap.csv"), &report.to_csv())?;
    write(&run.join("vargap_summary.csv"), &report.summary_csv())?;
    println!(
        "{}: statistics batch {}, mean gap {:.6e}, max gap {:.6e}",
        cfg.norm.as_str(),
        report.statistics_batch,
        report.mean(),
        report.max()
    );
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

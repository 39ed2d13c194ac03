use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use betagate::cells::Variant;
use betagate::check;
use betagate::diagnostics::{self as diag, DiagError};
use betagate::run::{self, EvalMode, EvalSplit, RunConfig, RunError, Seeds, Task};
use betagate::stochastic::{NoiseSource, RngStream};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Beta-gated LSTM training, evaluation and gate diagnostics.
///
/// Settings come from `--config` (a JSON run config) when given, otherwise
/// from built-in defaults; individual flags then override either. The
/// output directory follows `--out`, then `BETAGATE_OUT`, then the file.
///
/// Exit status: 0 success, 1 usage or configuration error, 2 data or I/O
/// error, 3 numeric failure (or a failed `check`).
#[derive(Parser, Debug)]
#[command(name = "betagate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes run.json, metrics.jsonl and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train once per λ instead, into lambda-<λ> subdirectories. With no
        /// values the grid 0.001 0.01 0.1 1 is used.
        #[arg(long, num_args = 0.., value_name = "LAMBDA")]
        lambda_sweep: Option<Vec<f64>>,
    },
    /// Evaluate a checkpoint and print the metric as JSON.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to best.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to test when the task has one, else valid.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Write diagnostic CSV and JSON files to the output directory.
    Diagnose {
        #[arg(value_enum)]
        which: Which,
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to best.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Histogram bins.
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Monte-Carlo draws per correlation estimate or per δ.
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        /// δ values for the proposition check.
        #[arg(long, num_args = 1.., default_values_t = [0.001, 0.005, 8.0 / 1167.0])]
        deltas: Vec<f64>,
        /// Shape configurations in the correlation sweep.
        #[arg(long, default_value_t = 200)]
        configs: usize,
        /// Test sequences reported by the synthetic demo.
        #[arg(long, default_value_t = 4)]
        sequences: usize,
    },
    /// Run the property suite and print a JSON report.
    Check {
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Which {
    Histogram,
    Correlation,
    Gradflow,
    Proposition,
    Synthetic,
    Sweep,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// KL weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Gumbel-gate temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Base seed; init, shuffle and sampler seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "BETAGATE_OUT")]
    out: Option<PathBuf>,
    /// mean or sample.
    #[arg(long)]
    eval_mode: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, RunError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.variant {
            cfg.variant = v.parse::<Variant>().map_err(|e| RunError::Config(e.to_string()))?;
        }
        if let Some(t) = &self.task {
            cfg.task = t.parse::<Task>()?;
        }
        if let Some(m) = &self.eval_mode {
            cfg.eval_mode = m.parse::<EvalMode>()?;
        }
        if let Some(h) = self.hidden {
            cfg.hidden = h;
        }
        if let Some(l) = self.layers {
            cfg.layers = l;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.adam.lr = lr;
        }
        if let Some(l) = self.lambda {
            cfg.prior.lambda = l;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::from_base(s);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, DiagError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DiagError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

fn print_json<T: serde::Serialize>(v: &T) {
    // a closed pipe (`| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn train(run: &RunArgs, sweep: Option<Vec<f64>>) -> Result<(), DiagError> {
    let cfg = run.resolve()?;
    match sweep {
        None => print_json(&run::train(&cfg)?),
        Some(l) => {
            let grid = if l.is_empty() { run::LAMBDA_GRID.to_vec() } else { l };
            let out: Vec<_> = run::lambda_sweep(&cfg, &grid)?
                .into_iter()
                .map(|(lambda, s)| serde_json::json!({ "lambda": lambda, "summary": s }))
                .collect();
            print_json(&out);
        }
    }
    Ok(())
}

fn eval(run: &RunArgs, ckpt: Option<PathBuf>, split: Option<SplitArg>) -> Result<(), DiagError> {
    let cfg = run.resolve()?;
    let ckpt = ckpt.unwrap_or_else(|| cfg.out_dir.join("best.ckpt"));
    let split = split.map(|s| match s {
        SplitArg::Train => EvalSplit::Train,
        SplitArg::Valid => EvalSplit::Valid,
        SplitArg::Test => EvalSplit::Test,
    });
    print_json(&run::evaluate(&cfg, &ckpt, split)?);
    Ok(())
}

fn noise(cfg: &RunConfig, k: usize) -> NoiseSource {
    match cfg.eval_mode {
        EvalMode::Mean => NoiseSource::Mean,
        EvalMode::Sample => NoiseSource::Sample(RngStream::new(cfg.seeds.sampler, 0xd1a6).split(k as u64)),
    }
}

struct DiagnoseArgs {
    which: Which,
    checkpoint: Option<PathBuf>,
    bins: usize,
    draws: usize,
    deltas: Vec<f64>,
    configs: usize,
    sequences: usize,
}

fn diagnose(run: &RunArgs, a: DiagnoseArgs) -> Result<(), DiagError> {
    // Proposition and sweep take no model, so a bare invocation works.
    if matches!(a.which, Which::Proposition | Which::Sweep) {
        let out = match &run.out {
            Some(o) => o.clone(),
            None => run.resolve()?.out_dir,
        };
        let seed = run.seed.unwrap_or(1);
        if a.which == Which::Proposition {
            let reps = diag::verify_proposition(&a.deltas, a.draws, &RngStream::new(seed, 0x9e0))?;
            let mut csv = format!("{}\n", diag::PropositionReport::csv_header());
            for r in &reps {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            write(&out, "proposition.csv", &csv)?;
            write(&out, "proposition.json", &serde_json::to_string_pretty(&reps).expect("json"))?;
            print_json(&reps);
        } else {
            let sweep = diag::correlation_sweep(a.configs, a.draws, seed)?;
            write(&out, "sweep.json", &serde_json::to_string_pretty(&sweep).expect("json"))?;
            print_json(&sweep);
        }
        return Ok(());
    }
    let cfg = run.resolve()?;
    let out = cfg.out_dir.clone();
    if a.which == Which::Synthetic {
        let rep = diag::synthetic_correlation_demo(&cfg, a.sequences, a.draws)?;
        write(&out, "regime.csv", &rep.to_csv())?;
        let summary = serde_json::json!({ "train_accuracy": rep.train_accuracy, "regimes": rep.summary });
        write(&out, "regime_summary.json", &serde_json::to_string_pretty(&summary).expect("json"))?;
        print_json(&summary);
        return Ok(());
    }
    if a.which == Which::Correlation && !cfg.variant.is_beta() {
        return Err(DiagError::Usage(format!("correlation needs a Beta-gated variant, not {}", cfg.variant)));
    }
    let data = run::load_task_data(&cfg)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("best.ckpt"));
    let (model, params) = run::load_model(&cfg, &data, &ckpt)?;
    let split = &data.valid;
    match a.which {
        Which::Histogram => {
            let gates = diag::collect_gates(&model, &params, split, cfg.batch_size, |k| noise(&cfg, k))?;
            for (name, values) in [("i", &gates.i), ("f", &gates.f), ("o", &gates.o)] {
                let h = diag::gate_histogram(values, a.bins)?;
                let p = write(&out, &format!("hist_{name}.csv"), &h.to_csv())?;
                eprintln!("{}: {} values", p.display(), h.total());
            }
        }
        Which::Correlation => {
            let rows = diag::sequence_correlation(&model, &params, &split.batch(&[0]), 0, a.draws, cfg.seeds.sampler)?;
            let p = write(&out, "correlation.csv", &diag::step_correlations_csv(&rows))?;
            eprintln!("{}: {} steps", p.display(), rows.len());
        }
        Which::Gradflow => {
            let idx: Vec<usize> = (0..cfg.batch_size.min(split.len())).collect();
            let g = diag::gradient_norm_trace(&model, &params, &split.batch(&idx), &mut noise(&cfg, 0))?;
            let p = write(&out, "gradflow.csv", &g.to_csv())?;
            eprintln!("{}: {} steps, largest forget gate {}", p.display(), g.norms.len(), g.max_forget);
        }
        Which::Proposition | Which::Synthetic | Which::Sweep => unreachable!("handled above"),
    }
    Ok(())
}

fn run_check(report: Option<PathBuf>) -> Result<bool, DiagError> {
    let r = check::run_checks();
    let text = serde_json::to_string_pretty(&r).expect("json");
    if let Some(p) = report {
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        write(dir, &p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "check.json".into()), &text)?;
    }
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    let failed = r.failures().count();
    eprintln!("{} properties, {} failed", r.properties.len(), failed);
    Ok(r.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { run, lambda_sweep } => train(&run, lambda_sweep).map(|_| true),
        Command::Eval { run, checkpoint, split } => eval(&run, checkpoint, split).map(|_| true),
        Command::Diagnose { which, run, checkpoint, bins, draws, deltas, configs, sequences } => {
            diagnose(&run, DiagnoseArgs { which, checkpoint, bins, draws, deltas, configs, sequences }).map(|_| true)
        }
        Command::Check { report } => run_check(report),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

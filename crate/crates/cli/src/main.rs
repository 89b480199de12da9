use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ageformer_core::correction::write_trace_csv;
use ageformer_core::gradsuite::{gradient_suite, GRAD_TOLERANCE};
use ageformer_core::pipeline::bench::write_benchmark_csv;
use ageformer_core::pipeline::{
    benchmark_mixing, generate_synthetic_dataset, load_checkpoint, save_checkpoint, train_pipeline,
    Dataset, Evaluation, RunConfig,
};
use ageformer_core::{Error, ErrorCategory, Result};
use clap::{Parser, Subcommand};
use log::info;

const CHECKPOINT_FILE: &str = "model.cilp";
const METRICS_FILE: &str = "metrics.csv";
const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(
    name = "ageformer",
    version,
    about = "Fourier-mixing age estimation on synthetic data"
)]
struct Cli {
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic face-age dataset.
    GenData {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Image side in pixels (a power of two).
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model and corrector; writes model.cilp, metrics.csv and report.json.
    Train {
        /// JSON run configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cs_threshold: Option<f64>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report base predictions only.
        #[arg(long)]
        no_correction: bool,
        /// Per-sample predictions as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the correction loop with explicit settings.
    Correct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Correction traces as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Time the Fourier mixer against softmax attention.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096,16384")]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 3,
        ErrorCategory::Data => 4,
        ErrorCategory::Numeric => 5,
        ErrorCategory::Io => 6,
        ErrorCategory::Internal => 70,
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn print_eval(split: &str, ev: &Evaluation, threshold: f64, corrected: bool) {
    println!("split: {split} ({} samples)", ev.labels.len());
    println!("base MAE: {:.3}", ev.base_mae);
    if corrected {
        let changed = ev.outcomes.iter().filter(|o| o.iterations > 0).count();
        println!(
            "corrected MAE: {:.3} ({changed} samples entered the loop)",
            ev.mae
        );
    }
    println!("CS({threshold}): {:.1}%", ev.cs);
}

fn write_predictions(path: &Path, ev: &Evaluation) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    w.write_record(["sample_id", "label", "base", "prediction"])
        .map_err(err)?;
    for (i, ((y, b), p)) in ev
        .labels
        .iter()
        .zip(&ev.base)
        .zip(&ev.predictions)
        .enumerate()
    {
        w.write_record([
            i.to_string(),
            y.to_string(),
            format!("{b:.4}"),
            format!("{p:.4}"),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn gen_data(seed: u64, n: usize, size: usize, out: &Path) -> Result<()> {
    let m = generate_synthetic_dataset(seed, n, size, out)?;
    println!(
        "wrote {} samples of {}x{}x{} to {} (train {}, val {}, test {})",
        m.samples,
        m.image_shape[0],
        m.image_shape[1],
        m.image_shape[2],
        out.display(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len()
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, epochs: Option<usize>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    info!("training on {} samples for {} epochs", ds.len(), cfg.epochs);
    let (tm, report) = train_pipeline(&cfg, &ds)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &tm)?;

    let path = out.join(METRICS_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    for row in &report.loss_curve {
        w.serialize(row)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    for s in &report.loss_curve {
        println!(
            "epoch {:>3}  loss {:>9.4}  val MAE {:.3}",
            s.epoch, s.loss, s.val_mae
        );
    }
    println!("validation base MAE: {:.3}", report.base_mae);
    if let Some(c) = report.corrected_mae {
        println!("validation corrected MAE: {c:.3}");
    }
    println!("mean-age baseline MAE: {:.3}", report.mean_baseline_mae);
    println!("CS({}): {:.1}%", report.cs_threshold, report.cs);
    println!("saved {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    threshold: Option<f64>,
    split: &str,
    no_correction: bool,
    csv_out: Option<&Path>,
) -> Result<()> {
    let mut tm = load_checkpoint(checkpoint)?;
    if let Some(l) = threshold {
        tm.config.cs_threshold = l;
    }
    tm.config.validate()?;
    let ds = Dataset::load(data)?;
    let correct = !no_correction && tm.corrector.is_some() && tm.config.error_correction;
    let ev = tm.evaluate(&ds, &ds.split(split)?, correct)?;
    print_eval(split, &ev, tm.config.cs_threshold, correct);
    if let Some(p) = csv_out {
        write_predictions(p, &ev)?;
    }
    Ok(())
}

fn correct(
    checkpoint: &Path,
    data: &Path,
    epsilon: Option<f64>,
    max_iters: Option<usize>,
    split: &str,
    trace: Option<&Path>,
) -> Result<()> {
    let mut tm = load_checkpoint(checkpoint)?;
    if let Some(e) = epsilon {
        tm.config.correction.epsilon = e;
    }
    if let Some(t) = max_iters {
        tm.config.correction.max_iters = t;
    }
    tm.config.validate()?;
    let ds = Dataset::load(data)?;
    let ev = tm.evaluate(&ds, &ds.split(split)?, true)?;
    print_eval(split, &ev, tm.config.cs_threshold, true);
    let iters: usize = ev.outcomes.iter().map(|o| o.iterations).sum();
    println!(
        "loop iterations: {iters} total, at most {}",
        ev.outcomes.iter().map(|o| o.iterations).max().unwrap_or(0)
    );
    if let Some(p) = trace {
        write_trace_csv(create(p)?, &ev.outcomes)?;
    }
    Ok(())
}

fn bench(tokens: &[usize], reps: usize, channels: usize, csv_out: Option<&Path>) -> Result<()> {
    let bad = |path: &str, message: String| {
        Err(Error::Config {
            path: path.into(),
            message,
        })
    };
    if tokens.len() < 3 {
        return bad(
            "--tokens",
            format!("need at least three token counts, got {}", tokens.len()),
        );
    }
    if let Some(t) = tokens.iter().find(|t| !t.is_power_of_two()) {
        return bad("--tokens", format!("{t} is not a power of two"));
    }
    if reps < 5 {
        return bad(
            "--reps",
            format!("need at least five repetitions, got {reps}"),
        );
    }
    if channels == 0 {
        return bad("--channels", "must be at least 1".into());
    }
    let r = benchmark_mixing(tokens, channels, reps)?;
    println!(
        "{:>8}  {:>12}  {:>12}",
        "tokens", "fourier s", "attention s"
    );
    for p in &r.points {
        println!(
            "{:>8}  {:>12.6}  {:>12.6}",
            p.tokens, p.fourier_secs, p.attention_secs
        );
    }
    println!(
        "fourier slope {:.3} (residual {:.3})",
        r.fourier.slope, r.fourier.residual
    );
    println!(
        "attention slope {:.3} (residual {:.3})",
        r.attention.slope, r.attention.residual
    );
    if let Some(p) = csv_out {
        write_benchmark_csv(create(p)?, &r)?;
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let results = gradient_suite(seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<40} {:.3e}  {status}", r.name, r.max_rel_error);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    println!(
        "{} of {} cases within {GRAD_TOLERANCE:e}",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, n, size, out } => gen_data(seed, n, size, &out),
        Command::Train {
            config,
            data,
            out,
            epochs,
        } => train(config.as_deref(), &data, &out, epochs),
        Command::Eval {
            checkpoint,
            data,
            cs_threshold,
            split,
            no_correction,
            csv,
        } => eval(
            &checkpoint,
            &data,
            cs_threshold,
            &split,
            no_correction,
            csv.as_deref(),
        ),
        Command::Correct {
            checkpoint,
            data,
            epsilon,
            max_iters,
            split,
            trace,
        } => correct(
            &checkpoint,
            &data,
            epsilon,
            max_iters,
            &split,
            trace.as_deref(),
        ),
        Command::Bench {
            tokens,
            reps,
            channels,
            csv,
        } => bench(&tokens, reps, channels, csv.as_deref()),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `attnflow`: validate, synthesize, run, verify and export scenarios.
//!
//! Exit codes: 0 success, 1 invalid input, 2 synthesis failure, 3 a final
//! `W₂` error above `eps`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnflow_core::dynamics::StepRule;
use attnflow_core::error::{Error, ErrorKind};
use attnflow_core::io::{self, ExportFormat, RunOptions};
use attnflow_core::pipeline::{run_pipeline, MatchMode, ScenarioSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attnflow", version, about = "Steer measures on the sphere with self-attention dynamics")]
struct Cli {
    /// Worker threads; defaults to ATTNFLOW_THREADS, then the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file.
    Validate {
        scenario: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Synthesize the schedule and write it without trajectories.
    Synthesize {
        scenario: PathBuf,
        #[command(flatten)]
        over: Overrides,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
    /// Synthesize, integrate and write `record.json`.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        over: Overrides,
        #[command(flatten)]
        num: Numerics,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
    /// Recompute the final errors of a run record.
    Verify {
        record: PathBuf,
        #[command(flatten)]
        num: Numerics,
    },
    /// Write trajectory and segment files from a run record.
    Export {
        record: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: ExportFormat,
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
}

/// Values that replace the ones in the scenario file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    mode: Option<MatchMode>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Numerics {
    /// Fixed integration step; adaptive when omitted.
    #[arg(long)]
    step: Option<f64>,
    /// Record every n-th integrator state.
    #[arg(long)]
    stride: Option<usize>,
}

impl Numerics {
    fn rule(&self) -> StepRule {
        self.step.map(StepRule::fixed).unwrap_or_default()
    }
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn fail(code: u8) -> impl FnOnce(Error) -> Failure {
    move |e| Failure { code, err: e.into() }
}

fn code_of(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation | ErrorKind::Io => 1,
        ErrorKind::Synthesis => 2,
        ErrorKind::Verification => 3,
    }
}

fn load(path: &Path, over: &Overrides) -> Result<ScenarioSpec, Failure> {
    let mut spec = io::load_scenario(path).map_err(fail(1))?;
    if let Some(m) = over.mode {
        spec.mode = m;
    }
    if let Some(e) = over.eps {
        spec.eps = e;
    }
    if let Some(h) = over.horizon {
        spec.horizon = h;
    }
    if let Some(s) = over.seed {
        spec.seed = s;
    }
    spec.validate().map_err(fail(1))?;
    Ok(spec)
}

fn report_errors(errors: &[f64], eps: f64) -> Result<(), Failure> {
    for (i, e) in errors.iter().enumerate() {
        println!("measure {i}: W2 = {e:e}");
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    if worst > eps {
        return Err(Failure {
            code: 3,
            err: anyhow::anyhow!("largest error {worst:e} exceeds eps = {eps:e}"),
        });
    }
    println!("all errors within eps = {eps:e}");
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Validate { scenario, over } => {
            let s = load(&scenario, &over)?;
            let atoms: usize = s.inputs.iter().map(|m| m.len()).sum();
            println!(
                "ok: d = {}, {} measures, {atoms} input atoms, mode {}, eps {:e}, horizon {}",
                s.dimension,
                s.inputs.len(),
                s.mode,
                s.eps,
                s.horizon
            );
            Ok(())
        }
        Command::Synthesize { scenario, over, out } => {
            let s = load(&scenario, &over)?;
            let report = run_pipeline(&s).map_err(|e| fail(code_of(&e).max(2))(e))?;
            std::fs::create_dir_all(&out).map_err(|e| fail(1)(e.into()))?;
            io::save_schedule(&report.schedule, &out.join("schedule.json")).map_err(fail(1))?;
            io::save_report(&report, &out.join("report.json")).map_err(fail(1))?;
            println!(
                "{} segments, {} switches, parameter norm {:e}",
                report.schedule.segments.len(),
                report.switch_count,
                report.param_norm
            );
            Ok(())
        }
        Command::Run { scenario, over, num, out } => {
            let s = load(&scenario, &over)?;
            let opts = RunOptions {
                stride: num.stride,
                step: num.rule(),
            };
            let record = io::execute(&s, &opts).map_err(|e| fail(code_of(&e).max(2))(e))?;
            std::fs::create_dir_all(&out).map_err(|e| fail(1)(e.into()))?;
            let path = out.join("record.json");
            io::save_record(&record, &path).map_err(fail(1))?;
            println!("wrote {}", path.display());
            report_errors(&record.report.errors, s.eps)
        }
        Command::Verify { record, num } => {
            let rec = io::load_record(&record).map_err(fail(1))?;
            let v = io::verify(&rec, num.rule()).map_err(|e| fail(code_of(&e))(e))?;
            println!("drift from the record: {:e}", v.drift);
            report_errors(&v.errors, v.eps)
        }
        Command::Export { record, format, out } => {
            let rec = io::load_record(&record).map_err(fail(1))?;
            let (t, s) = io::export_trajectories(&rec, &out, format).map_err(fail(1))?;
            println!("wrote {} and {}", t.display(), s.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("ATTNFLOW_THREADS") {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) => Some(n),
                Err(_) => {
                    eprintln!("error: ATTNFLOW_THREADS={v:?} is not a thread count");
                    return ExitCode::from(1);
                }
            },
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

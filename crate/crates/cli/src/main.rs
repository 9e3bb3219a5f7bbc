//! `macaron-lab`: order studies, layer/solver equivalence checks, gradient
//! checks and toy training runs.
//!
//! Every run prints its resolved configuration as one JSON line before
//! anything else and writes the same line to `<out>.config.json`.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage, 3 insufficient data,
//! 4 divergence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use macaron_core::correspondence::{
    equivalence_check, EquivalenceReport, InstanceShape, EQUIVALENCE_TOLERANCE,
};
use macaron_core::error::Error;
use macaron_core::layers::{layer_gradcheck, LayerConfig, LayerKind, GRADCHECK_TOLERANCE};
use macaron_core::ode::{
    fit_order, gamma_grid, measure_local_errors, write_csv, Scheme, SchemeConfig, ShippedSystem,
    SubstepMode,
};
use macaron_core::tensor::GradFault;
use macaron_core::train::{
    compare, report, summarize, train, write_comparison_csv, write_eval_jsonl, Arch, ModelConfig,
    TaskKind, TaskSpec, TrainConfig,
};

const OUT_DIR_ENV: &str = "MACARON_LAB_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "macaron-lab",
    version,
    about = "Splitting-scheme order studies, layer equivalence checks and toy training",
    after_help = "Exit codes: 0 success, 1 check failure, 2 usage, 3 insufficient data, 4 divergence.\n\
                  Output files default to the directory named by MACARON_LAB_OUT (or the current directory)."
)]
struct Cli {
    /// Directory for output files that are not given an explicit --out.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the local-error order of one scheme on one test system; writes CSV.
    OrderStudy(OrderStudyArgs),
    /// Compare one splitting step of the wrapped fields with the layer forward pass.
    ClaimCheck(ClaimCheckArgs),
    /// Check every layer gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one model on the copy or reverse task; writes JSON lines.
    Train(TrainArgs),
    /// Train both architectures over several seeds; writes CSV.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct OrderStudyArgs {
    /// scalar | commuting | noncommuting | nonlinear
    #[arg(long, default_value = "noncommuting")]
    system: ShippedSystem,
    /// euler | lt | sm
    #[arg(long, default_value = "lt")]
    scheme: Scheme,
    /// euler | exact
    #[arg(long, default_value = "exact")]
    substep: SubstepMode,
    #[arg(long, default_value_t = 1e-3)]
    gamma_min: f64,
    #[arg(long, default_value_t = 1e-1)]
    gamma_max: f64,
    #[arg(long, default_value_t = 8)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClaimCheckArgs {
    /// transformer | macaron | both
    #[arg(long, default_value = "both")]
    arch: ArchChoice,
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Number of seeds, starting at 0.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Added to one FFN bias on the layer path only; the check should then fail.
    #[arg(long)]
    perturb: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// transformer | transformer-decoder | macaron | macaron-decoder
    #[arg(long, default_value = "macaron")]
    arch: LayerKind,
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flip the sign of one adjoint; the check should then fail.
    #[arg(long)]
    break_grad: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// copy | reverse
    #[arg(long, default_value = "copy")]
    task: TaskKind,
    /// transformer | macaron
    #[arg(long, default_value = "macaron")]
    arch: Arch,
    /// Step budget; 3000 for copy and 10000 for reverse when omitted.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the generated dataset.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Multiplies the scheduled learning rate.
    #[arg(long, default_value_t = 1.0)]
    lr_scale: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Number of seeds per architecture and task, starting at 0 (at least 3).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Comma-separated tasks: copy, reverse.
    #[arg(long, value_delimiter = ',', default_value = "copy")]
    tasks: Vec<TaskKind>,
    /// Step budget per run; the largest task default when omitted.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
enum ArchChoice {
    One(LayerKind),
    Both,
}

impl std::str::FromStr for ArchChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "both" => Ok(ArchChoice::Both),
            "transformer" => Ok(ArchChoice::One(LayerKind::Transformer)),
            "macaron" => Ok(ArchChoice::One(LayerKind::Macaron)),
            _ => Err(format!(
                "unknown architecture '{s}' (expected transformer, macaron or both)"
            )),
        }
    }
}

impl ArchChoice {
    fn kinds(self) -> Vec<LayerKind> {
        match self {
            ArchChoice::One(k) => vec![k],
            ArchChoice::Both => vec![LayerKind::Transformer, LayerKind::Macaron],
        }
    }

    fn label(self) -> &'static str {
        match self {
            ArchChoice::One(k) => k.label(),
            ArchChoice::Both => "both",
        }
    }
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Ok,
    CheckFailed(String),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } => 2,
        Error::InsufficientData { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn resolve_out(dir: &Path, out: &Option<PathBuf>, default_name: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| dir.join(default_name))
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Prints the resolved configuration and writes it next to `out`.
fn echo_config(mut config: Value, out: &Path) -> Result<(), Error> {
    config["out"] = json!(out.display().to_string());
    let line = serde_json::to_string(&config)?;
    println!("{line}");
    let mut f = create(&sidecar(out))?;
    writeln!(f, "{line}")?;
    f.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<(), Error> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn order_study(dir: &Path, a: &OrderStudyArgs) -> Result<Outcome, Error> {
    let out = resolve_out(
        dir,
        &a.out,
        &format!(
            "order_{}_{}_{}.csv",
            a.system.label(),
            a.scheme.label(),
            a.substep.label()
        ),
    );
    echo_config(
        json!({
            "command": "order-study",
            "system": a.system.label(),
            "scheme": a.scheme.label(),
            "substep": a.substep.label(),
            "gamma_min": a.gamma_min,
            "gamma_max": a.gamma_max,
            "points": a.points,
        }),
        &out,
    )?;
    let grid = gamma_grid(a.gamma_min, a.gamma_max, a.points)?;
    let config = SchemeConfig::new(a.scheme, a.substep, a.gamma_max);
    let system = a.system.build();
    let samples = measure_local_errors(system.as_ref(), &a.system.initial_state(), &config, &grid)?;
    let mut f = create(&out)?;
    write_csv(&mut f, &samples, &config, a.system.label())?;
    f.flush()?;
    match fit_order(&samples) {
        Ok(fit) => {
            println!(
                "{}",
                json!({ "slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2, "used": fit.used, "samples": samples.len() })
            );
            Ok(Outcome::Ok)
        }
        Err(e) => {
            // Errors at rounding level still get a result line.
            let max_error = samples.iter().map(|s| s.abs_error).fold(0.0, f64::max);
            let floor = samples
                .iter()
                .map(|s| s.rounding_floor())
                .fold(0.0, f64::max);
            let used = samples.iter().filter(|s| s.usable()).count();
            println!(
                "{}",
                json!({ "slope": null, "used": used, "samples": samples.len(), "max_abs_error": max_error, "rounding_floor": floor })
            );
            Err(e)
        }
    }
}

fn claim_check(dir: &Path, a: &ClaimCheckArgs) -> Result<Outcome, Error> {
    let out = resolve_out(dir, &a.out, "claim_check.json");
    echo_config(
        json!({
            "command": "claim-check",
            "arch": a.arch.label(),
            "d_model": a.d_model,
            "n": a.n,
            "heads": a.heads,
            "seeds": a.seeds,
            "perturb": a.perturb,
        }),
        &out,
    )?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    LayerConfig::new(a.d_model, a.heads).validate()?;
    let shape = InstanceShape {
        d_model: a.d_model,
        n: a.n,
        heads: a.heads,
    };
    let mut results: Vec<EquivalenceReport> = Vec::new();
    for kind in a.arch.kinds() {
        for seed in 0..a.seeds {
            results.push(equivalence_check(kind, shape, seed, a.perturb)?);
        }
    }
    let failures: Vec<&EquivalenceReport> = results.iter().filter(|r| !r.passed()).collect();
    let worst = results.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let passed = failures.is_empty();
    write_json(
        &out,
        &json!({ "tolerance": EQUIVALENCE_TOLERANCE, "passed": passed, "results": results }),
    )?;
    println!(
        "{}",
        json!({
            "passed": passed,
            "checked": results.len(),
            "failed": failures.len(),
            "max_abs_diff": worst,
        })
    );
    match failures.first() {
        None => Ok(Outcome::Ok),
        Some(r) => Ok(Outcome::CheckFailed(format!(
            "{} seed {} disagrees: max_abs_diff {:e} > {:e}",
            r.architecture, r.seed, r.max_abs_diff, EQUIVALENCE_TOLERANCE
        ))),
    }
}

fn gradcheck(dir: &Path, a: &GradcheckArgs) -> Result<Outcome, Error> {
    let out = resolve_out(dir, &a.out, &format!("gradcheck_{}.json", a.arch.label()));
    echo_config(
        json!({
            "command": "gradcheck",
            "arch": a.arch.label(),
            "d_model": a.d_model,
            "n": a.n,
            "heads": a.heads,
            "seed": a.seed,
            "break_grad": a.break_grad,
        }),
        &out,
    )?;
    let fault = a.break_grad.then_some(GradFault::FlipFirstMatMulRhs);
    let r = layer_gradcheck(
        a.arch,
        &LayerConfig::new(a.d_model, a.heads),
        a.n,
        a.seed,
        fault,
    )?;
    write_json(&out, &serde_json::to_value(&r)?)?;
    println!(
        "{}",
        json!({
            "passed": r.passed,
            "tolerance": GRADCHECK_TOLERANCE,
            "worst_tensor": r.worst_tensor,
            "worst_rel_error": r.worst_rel_error,
            "skipped_fraction": r.skipped_fraction,
        })
    );
    if r.passed {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::CheckFailed(format!(
            "worst parameter {} has relative error {:e}",
            r.worst_tensor, r.worst_rel_error
        )))
    }
}

fn default_steps(task: TaskKind) -> usize {
    match task {
        TaskKind::Copy => 3000,
        TaskKind::Reverse => 10_000,
    }
}

fn train_cmd(dir: &Path, a: &TrainArgs) -> Result<Outcome, Error> {
    let out = resolve_out(
        dir,
        &a.out,
        &format!("train_{}_{}_seed{}.jsonl", a.task, a.arch, a.seed),
    );
    let task = TaskSpec {
        seed: a.data_seed,
        ..TaskSpec::default_for(a.task)
    };
    let model = ModelConfig::small(a.arch, a.task == TaskKind::Reverse);
    let cfg = TrainConfig {
        max_steps: a.steps.unwrap_or_else(|| default_steps(a.task)),
        lr_scale: a.lr_scale,
        seed: a.seed,
        ..TrainConfig::default()
    };
    echo_config(
        json!({ "command": "train", "task": task, "model": model, "train": cfg }),
        &out,
    )?;
    let record = train(&model, &task, &cfg)?;
    let mut f = create(&out)?;
    write_eval_jsonl(&mut f, &record)?;
    println!(
        "{}",
        json!({
            "arch": record.arch,
            "task": record.task,
            "seed": record.seed,
            "steps": record.steps,
            "steps_to_threshold": record.steps_to_threshold,
            "final_eval": record.final_eval,
            "param_count": record.param_count,
        })
    );
    if record.threshold_met() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::CheckFailed(format!(
            "threshold not reached within {} steps (token acc {:.4}, sequence acc {:.4})",
            record.steps, record.final_eval.token_acc, record.final_eval.seq_acc
        )))
    }
}

fn compare_cmd(dir: &Path, a: &CompareArgs) -> Result<Outcome, Error> {
    let out = resolve_out(dir, &a.out, "comparison.csv");
    let tasks: Vec<TaskSpec> = a
        .tasks
        .iter()
        .map(|&k| TaskSpec {
            seed: a.data_seed,
            ..TaskSpec::default_for(k)
        })
        .collect();
    let steps = a.steps.unwrap_or_else(|| {
        a.tasks
            .iter()
            .map(|&k| default_steps(k))
            .max()
            .unwrap_or(3000)
    });
    let model = ModelConfig::small(Arch::Macaron, false);
    let cfg = TrainConfig {
        max_steps: steps,
        ..TrainConfig::default()
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    echo_config(
        json!({
            "command": "compare",
            "archs": Arch::ALL,
            "tasks": tasks,
            "seeds": seeds,
            "model": model,
            "train": cfg,
        }),
        &out,
    )?;
    let rows = compare(&Arch::ALL, &tasks, &seeds, &model, &cfg)?;
    let mut f = create(&out)?;
    write_comparison_csv(&mut f, &rows)?;
    print!("{}", report(&summarize(&rows, seeds.len())));
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let dir = cli.out_dir.as_path();
    let result = match &cli.command {
        Command::OrderStudy(a) => order_study(dir, a),
        Command::ClaimCheck(a) => claim_check(dir, a),
        Command::Gradcheck(a) => gradcheck(dir, a),
        Command::Train(a) => train_cmd(dir, a),
        Command::Compare(a) => compare_cmd(dir, a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

//! Command-line front end: data generation, training, ablation, bound
//! verification, and report emission.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric abort,
//! 4 bound/ordering violation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use red_core::boundlab;
use red_core::config::{emit_run_config, emit_synth_spec, fnv1a64, parse_run_config, parse_synth_spec};
use red_core::nets::save_checkpoint;
use red_core::report::write_report;
use red_core::synthgen::{self, fmt_float9, SynthSpec};
use red_core::trainer::{self, ablation_csv, metrics_to_csv, RunConfig, TrainerError};

#[derive(Parser)]
#[command(name = "red-lab", version, about = "Environmental-disagreement reduction lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-domain synthetic dataset.
    GenData {
        /// Data spec file (key=value); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset directory.
    Train {
        /// Run config file (key=value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validate the configuration and print the resolved defaults only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run the five-variant ablation over several replicate seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data spec file for the benchmark datasets.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of replicate seeds.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fail (exit 4) unless the expected ordering holds.
        #[arg(long)]
        assert_ordering: bool,
    },
    /// Verify the error-bound chain on random finite instances.
    VerifyBound {
        #[arg(long)]
        instances: usize,
        #[arg(long, default_value_t = 6)]
        max_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render plots and a summary from a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Numeric { message: String },
    Violation(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Violation(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Violation(m) | CliError::Other(m) => m,
            CliError::Numeric { message } => message,
        }
    }
}

impl From<red_core::config::ConfigError> for CliError {
    fn from(e: red_core::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<synthgen::SynthError> for CliError {
    fn from(e: synthgen::SynthError) -> Self {
        match e {
            synthgen::SynthError::InvalidField { .. } => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::NumericAbort { .. } => CliError::Numeric { message: e.to_string() },
            TrainerError::Argument(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<boundlab::BoundError> for CliError {
    fn from(e: boundlab::BoundError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<red_core::report::ReportError> for CliError {
    fn from(e: red_core::report::ReportError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}

fn read_optional(path: &Option<PathBuf>) -> Result<Option<String>, CliError> {
    match path {
        Some(p) => std::fs::read_to_string(p)
            .map(Some)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display()))),
        None => Ok(None),
    }
}

/// Every command echoes its fully resolved configuration before doing work.
fn echo_config(out: &Path, body: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), body)?;
    Ok(())
}

fn load_spec(path: &Option<PathBuf>) -> Result<SynthSpec, CliError> {
    match read_optional(path)? {
        Some(text) => Ok(parse_synth_spec(&text)?),
        None => Ok(SynthSpec::default_benchmark()),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match read_optional(path)? {
        Some(text) => Ok(parse_run_config(&text)?),
        None => Ok(RunConfig::default_benchmark()),
    }
}

fn ablation_threads() -> usize {
    std::env::var("RED_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4))
}

fn cmd_gen_data(spec_path: Option<PathBuf>, out: PathBuf) -> Result<(), CliError> {
    let spec = load_spec(&spec_path)?;
    let mut resolved = String::from("command=gen-data\n");
    resolved.push_str(&emit_synth_spec(&spec));
    echo_config(&out, &resolved)?;

    let (source, target, _) = synthgen::generate(&spec)?;
    synthgen::save_dataset(&source, &out, "source")?;
    synthgen::save_dataset(&target, &out, "target")?;
    println!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config_path: Option<PathBuf>, data: PathBuf, out: PathBuf, dry_run: bool) -> Result<(), CliError> {
    let cfg = load_config(&config_path)?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let resolved = format!("command=train\ndata={}\n{}", data.display(), emit_run_config(&cfg));
    echo_config(&out, &resolved)?;
    if dry_run {
        print!("{resolved}");
        return Ok(());
    }

    let mut source = synthgen::load_dataset(&data, "source")?;
    source.labels = Some(synthgen::load_labels(&data, "source")?);
    let target = synthgen::load_dataset(&data, "target")?;
    // Hidden target labels feed evaluation only; training never sees them.
    let eval_labels = match synthgen::load_labels(&data, "target") {
        Ok(l) => Some(l),
        Err(synthgen::SynthError::MissingSidecar(_)) => None,
        Err(e) => return Err(e.into()),
    };

    let result = trainer::train(&source, &target, eval_labels.as_deref(), &cfg);
    let output = match result {
        Ok(o) => o,
        Err(TrainerError::NumericAbort { epoch, iter, reason, dump }) => {
            let dump_path = out.join("abort_dump.txt");
            std::fs::write(&dump_path, &dump)?;
            return Err(CliError::Numeric {
                message: format!(
                    "numeric abort at epoch {epoch} iter {iter}: {reason}; state dumped to {}",
                    dump_path.display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };

    std::fs::write(out.join("metrics.csv"), metrics_to_csv(&output.metrics))?;
    save_checkpoint(&output.model, fnv1a64(&resolved), &out.join("model.ckpt"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    let final_tgt = output.metrics.iter().rev().find_map(|r| r.tgt_acc);
    match final_tgt {
        Some(acc) => println!("done; final target accuracy {acc:.4}"),
        None => println!("done; no target labels available for evaluation"),
    }
    Ok(())
}

fn cmd_ablate(
    config_path: Option<PathBuf>,
    spec_path: Option<PathBuf>,
    seeds: usize,
    out: PathBuf,
    assert_ordering: bool,
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    let cfg = load_config(&config_path)?;
    let spec = load_spec(&spec_path)?;
    let mut resolved = format!("command=ablate\nseeds={seeds}\nassert_ordering={assert_ordering}\n");
    resolved.push_str(&emit_run_config(&cfg));
    resolved.push_str(&emit_synth_spec(&spec));
    echo_config(&out, &resolved)?;

    let replicates: Vec<u64> = (0..seeds as u64).collect();
    let rows = trainer::ablate(&spec, &cfg, &replicates, ablation_threads())?;
    std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    for r in &rows {
        println!("{:<16} mean {:.4} std {:.4}", r.variant, r.mean_acc, r.std_acc);
    }

    if assert_ordering {
        let mean = |name: &str| rows.iter().find(|r| r.variant == name).map(|r| r.mean_acc).unwrap_or(0.0);
        let full = mean("full");
        let wo_ltr = mean("wo_ltr");
        let wo_both = mean("wo_ldt_ltr");
        let source_adv = mean("source_adv");
        let mut violations = Vec::new();
        if full < wo_ltr {
            violations.push(format!("full {full:.4} < wo_ltr {wo_ltr:.4}"));
        }
        if full < wo_both + 0.05 {
            violations.push(format!("full {full:.4} < wo_ldt_ltr {wo_both:.4} + 0.05"));
        }
        if full < source_adv + 0.05 {
            violations.push(format!("full {full:.4} < source_adv {source_adv:.4} + 0.05"));
        }
        if !violations.is_empty() {
            return Err(CliError::Violation(format!(
                "ablation ordering violated: {}",
                violations.join("; ")
            )));
        }
    }
    Ok(())
}

fn cmd_verify_bound(instances: usize, max_n: usize, seed: u64, out: PathBuf) -> Result<(), CliError> {
    let resolved = format!("command=verify-bound\ninstances={instances}\nmax_n={max_n}\nseed={seed}\n");
    echo_config(&out, &resolved)?;

    let (reports, summary) = boundlab::run_campaign(instances, max_n, seed)?;
    let mut csv = String::from(
        "id,n,lambda,eps_t_f,eps_s_f_fs,d_htilde,disagreement_term,lhs,rhs,slack,slack_half_divergence,identity_residual,triangle_ok,lemma_ok,contract_ok,holds\n",
    );
    let mut counterexamples = String::new();
    for (i, (inst, r)) in reports.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            inst.n,
            fmt_float9(inst.lambda),
            fmt_float9(r.eps_t_f),
            fmt_float9(r.eps_s_f_fs),
            fmt_float9(r.d_htilde),
            fmt_float9(r.disagreement_term),
            fmt_float9(r.lhs),
            fmt_float9(r.rhs),
            fmt_float9(r.slack),
            fmt_float9(r.slack_half_divergence),
            fmt_float9(r.identity_residual),
            r.triangle_ok,
            r.lemma_ok,
            r.contract_ok,
            r.holds,
        );
        if !r.holds {
            let _ = writeln!(counterexamples, "instance {i}: {inst:?}\nreport: {r:?}\n");
        }
    }
    std::fs::write(out.join("bound_reports.csv"), csv)?;
    println!(
        "instances={} holds={} min_slack={}",
        summary.instances,
        summary.holds,
        fmt_float9(summary.min_slack)
    );
    if summary.holds < summary.instances {
        let path = out.join("counterexamples.txt");
        std::fs::write(&path, counterexamples)?;
        return Err(CliError::Violation(format!(
            "{} of {} instances violated the bound; reproducible fixtures in {}",
            summary.instances - summary.holds,
            summary.instances,
            path.display()
        )));
    }
    Ok(())
}

fn cmd_report(run: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let resolved = format!("command=report\nrun={}\n", run.display());
    echo_config(&out, &resolved)?;
    let written = write_report(&run, &out)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out } => cmd_gen_data(spec, out),
        Command::Train { config, data, out, dry_run } => cmd_train(config, data, out, dry_run),
        Command::Ablate { config, spec, seeds, out, assert_ordering } => {
            cmd_ablate(config, spec, seeds, out, assert_ordering)
        }
        Command::VerifyBound { instances, max_n, seed, out } => {
            cmd_verify_bound(instances, max_n, seed, out)
        }
        Command::Report { run, out } => cmd_report(run, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

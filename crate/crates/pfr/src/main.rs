use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pfr::config::RunConfig;
use pfr::dataset::{render_dataset, Domain, Split, MANIFEST};
use pfr::eval::{evaluate, iou_csv, EvalRequest};
use pfr::pfr_core::gradcheck::{self, GradCheckConfig};
use pfr::pfr_core::synth::{DomainStyle, SceneSpec};
use pfr::{report, run, threads_from_env};

#[derive(Parser)]
#[command(name = "pfr", version, about = "Adversarial domain adaptation for segmentation on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a source/target dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_val: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reuse source content seeds for the target domain
        #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
        paired: bool,
    },
    /// Train a run
    Train {
        #[arg(long)]
        data: PathBuf,
        /// INI configuration; every key is optional
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Zero both adaptation weights
        #[arg(long)]
        source_only: bool,
    },
    /// Per-class IoU of a checkpoint on one split, as CSV on stdout
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value = "target")]
        domain: Domain,
        /// Write predicted class maps as PGM files here
        #[arg(long)]
        dump_preds: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit
    Gradcheck {
        /// `all` or one registered name
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare runs: per-class IoU and mIoU, best run marked
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// CSV destination; the aligned table goes to stdout
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "target")]
        domain: Domain,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn execute(command: Command) -> Result<ExitCode, Failure> {
    let threads = threads_from_env().map_err(Failure::Usage)?;
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr().lock();
    match command {
        Command::GenData {
            out,
            n_train,
            n_val,
            size,
            classes,
            seed,
            paired,
        } => {
            let spec = SceneSpec {
                image_size: size,
                num_classes: classes,
                ..SceneSpec::default()
            };
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            render_dataset(
                &spec,
                &DomainStyle::source_default(classes),
                &DomainStyle::target_default(classes),
                n_train,
                n_val,
                &out,
                paired,
                seed,
                threads,
            )
            .map_err(runtime)?;
            writeln!(stdout, "{}", out.join(MANIFEST).display()).map_err(runtime)?;
        }
        Command::Train {
            data,
            config,
            out,
            source_only,
        } => {
            let text = match &config {
                Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
                None => String::new(),
            };
            let (mut cfg, defaulted) = RunConfig::parse(&text).map_err(|e| {
                let file = config.as_ref().map_or("config".into(), |p| p.display().to_string());
                Failure::Runtime(format!("{file}: {e}"))
            })?;
            for key in &defaulted {
                let _ = writeln!(stderr, "config: {key} not set, using default");
            }
            if source_only {
                cfg = cfg.source_only();
            }
            let summary = run::train_loop(&cfg, &data, &out, &mut stderr).map_err(runtime)?;
            for (domain, miou) in &summary.final_miou {
                let v = miou.map_or("absent".into(), |m| format!("{m:.6}"));
                writeln!(stdout, "{domain}_val_miou,{v}").map_err(runtime)?;
            }
        }
        Command::Eval {
            ckpt,
            data,
            split,
            domain,
            dump_preds,
        } => {
            let cm = evaluate(&EvalRequest {
                checkpoint: &ckpt,
                data: &data,
                domain,
                split,
                dump_preds: dump_preds.as_deref(),
            })
            .map_err(runtime)?;
            write!(stdout, "{}", iou_csv(&cm)).map_err(runtime)?;
        }
        Command::Gradcheck {
            ops,
            eps,
            tol,
            shapes,
            seed,
        } => {
            let cfg = GradCheckConfig {
                eps,
                tol,
                shapes_per_op: shapes,
                seed,
                ..GradCheckConfig::default()
            };
            let registry = gradcheck::registry();
            let selected: Vec<(usize, &gradcheck::GradOp)> = if ops == "all" {
                registry.iter().enumerate().collect()
            } else {
                let found = registry.iter().enumerate().find(|(_, op)| op.name == ops);
                vec![found.ok_or_else(|| {
                    Failure::Usage(format!("unknown op {ops:?}; known: {}", gradcheck::names().join(", ")))
                })?]
            };
            writeln!(stdout, "op,shapes,coords,skipped,max_rel_err,result").map_err(runtime)?;
            let mut failed = 0;
            for (i, op) in selected {
                let r = gradcheck::check_op(op, &cfg, i as u64).map_err(runtime)?;
                failed += usize::from(!r.passed);
                writeln!(
                    stdout,
                    "{},{},{},{},{:.3e},{}",
                    r.name,
                    r.shapes,
                    r.coords,
                    r.skipped,
                    r.max_rel_err,
                    if r.passed { "pass" } else { "FAIL" }
                )
                .map_err(runtime)?;
            }
            if failed > 0 {
                let _ = writeln!(stderr, "{failed} gradient check(s) failed at tol {tol:e}");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { runs, out, domain } => {
            let r = report::build(&runs, domain).map_err(runtime)?;
            std::fs::write(&out, r.to_csv()).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            write!(stdout, "{}", r.to_text()).map_err(runtime)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

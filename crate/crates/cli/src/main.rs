use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use quantlab::alloc::{assign_precision, SplitRatios};
use quantlab::model::Mode;
use quantlab::pipeline::{parse_tiers, read_ranking, CellKind, Pipeline, PipelineConfig, MODES};
use quantlab::{Error, Result};

const DEFAULT_CONFIG: &str = "quantlab.toml";

#[derive(Parser)]
#[command(
    name = "quantlab",
    version,
    about = "Mixed-precision PTQ lab for paired AR / diffusion toy models"
)]
struct Cli {
    /// Pipeline config (TOML or JSON). Defaults to ./quantlab.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Workspace directory, overriding the config file.
    #[arg(long, global = true, env = "QUANTLAB_WORKSPACE")]
    workspace: Option<PathBuf>,

    /// Accept artifacts produced under a different config.
    #[arg(long, global = true)]
    force: bool,

    /// No progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ar,
    Diffusion,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Ar => vec![Mode::Ar],
            ModeArg::Diffusion => vec![Mode::Diffusion],
            ModeArg::Both => MODES.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Rtn,
    Gptq,
    Hawq,
}

#[derive(Subcommand)]
enum Command {
    /// Train the paired checkpoints.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
    },
    /// Write a quantized checkpoint with its plan.
    Quantize {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Width for rtn and gptq.
        #[arg(long)]
        bits: Option<u8>,
        /// Configured plan name for hawq, e.g. 16/8.
        #[arg(long)]
        plan: Option<String>,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
    },
    /// Hessian sensitivities per module.
    Sensitivity {
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
    },
    /// Turn sensitivities into mixed-precision plans. With --ranking the
    /// command works standalone on a ranked module list.
    Assign {
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        /// File with one module path per line, most sensitive first.
        #[arg(long, requires_all = ["ratios", "out"])]
        ranking: Option<PathBuf>,
        /// Split as p16,p8,p4.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// 16/8/4 or 8/4.
        #[arg(long, default_value = "16/8/4")]
        tiers: String,
        #[arg(long, default_value_t = 128)]
        group_size: usize,
        #[arg(long)]
        include_embeddings: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every grid cell (cached by config hash).
    Eval,
    /// Time one unit of work per grid cell.
    Bench,
    /// Tables, frontier and charts from the grid results.
    Report,
    /// Every stage end to end.
    Reproduce {
        /// Print the grid without running anything.
        #[arg(long)]
        dry_run: bool,
        /// Also run the latency benchmark.
        #[arg(long)]
        bench: bool,
    },
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, PathBuf)> {
    let path = match &cli.config {
        Some(p) => Some(p.clone()),
        None => Some(PathBuf::from(DEFAULT_CONFIG)).filter(|p| p.exists()),
    };
    let (mut cfg, base) = match path {
        Some(p) => {
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (PipelineConfig::load(&p)?, base)
        }
        None => (PipelineConfig::default(), PathBuf::from(".")),
    };
    if let Some(ws) = &cli.workspace {
        cfg.workspace = ws.clone();
    }
    Ok((cfg, base))
}

fn pipeline(cli: &Cli) -> Result<Pipeline> {
    let (cfg, base) = load_config(cli)?;
    let mut p = Pipeline::new(cfg, base)?;
    p.force = cli.force;
    if !cli.quiet {
        p = p.with_progress(|m| eprintln!("{m}"));
    }
    Ok(p)
}

fn show(path: &Path) {
    println!("{}", path.display());
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Assign {
            ranking: Some(ranking),
            ratios,
            tiers,
            group_size,
            include_embeddings,
            out,
            ..
        } => {
            let r = ratios.as_deref().expect("clap requires ratios");
            let &[_, _, _] = r else {
                return Err(Error::Parameter(format!(
                    "--ratios takes three values, got {}",
                    r.len()
                )));
            };
            let ratios = SplitRatios::new(r[0], r[1], r[2])?;
            let modules = read_ranking(ranking)?;
            let plan = assign_precision(&modules, ratios, parse_tiers(tiers)?, *group_size, *include_embeddings)?;
            let out = out.as_ref().expect("clap requires out");
            plan.save(out)?;
            show(out);
        }
        Command::Train { mode } => {
            let p = pipeline(cli)?;
            for m in mode.modes() {
                p.train(m)?;
                show(&p.ws.checkpoint(m));
            }
        }
        Command::Quantize {
            method,
            bits,
            plan,
            mode,
        } => {
            let p = pipeline(cli)?;
            let need_bits = || bits.ok_or_else(|| Error::Parameter("--bits is required for rtn and gptq".into()));
            let kind = match method {
                MethodArg::Rtn => CellKind::Rtn(need_bits()?),
                MethodArg::Gptq => CellKind::Gptq(need_bits()?),
                MethodArg::Hawq => {
                    let name = plan
                        .as_deref()
                        .ok_or_else(|| Error::Parameter("--plan is required for hawq".into()))?;
                    let spec = p
                        .cfg
                        .allocation
                        .plans
                        .iter()
                        .find(|s| s.name == name)
                        .ok_or_else(|| Error::Parameter(format!("no configured plan named {name}")))?;
                    CellKind::Hawq(spec.clone())
                }
            };
            for m in mode.modes() {
                show(&p.quantize(m, kind.clone())?);
            }
        }
        Command::Sensitivity { mode } => {
            let p = pipeline(cli)?;
            for m in mode.modes() {
                p.sensitivity(m)?;
                show(&p.ws.sensitivity(m));
            }
        }
        Command::Assign { mode, .. } => {
            let p = pipeline(cli)?;
            for m in mode.modes() {
                p.assign(m)?;
                for spec in &p.cfg.allocation.plans {
                    show(&p.ws.plan(m, spec));
                }
            }
        }
        Command::Eval => {
            let p = pipeline(cli)?;
            p.eval()?;
            show(&p.ws.results_csv());
        }
        Command::Bench => {
            let p = pipeline(cli)?;
            p.bench()?;
            show(&p.ws.latency_csv());
        }
        Command::Report => {
            let p = pipeline(cli)?;
            for f in p.report()?.1 {
                show(&f);
            }
        }
        Command::Reproduce { dry_run: true, .. } => {
            let p = pipeline(cli)?;
            println!("model\tmode\tmethod\tbits_or_plan\tconfig_hash");
            for line in p.dry_run() {
                println!("{line}");
            }
        }
        Command::Reproduce { bench, .. } => {
            let p = pipeline(cli)?;
            for f in p.reproduce(*bench)?.1 {
                show(&f);
            }
        }
    }
    Ok(())
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = serde_json::json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
        }
    });
    let mut inner = e;
    while let Error::Context { source, .. } = inner {
        inner = source;
    }
    match inner {
        Error::MissingArtifact { path, producer } => {
            v["error"]["path"] = path.display().to_string().into();
            v["error"]["run"] = format!("quantlab {producer}").into();
        }
        Error::StaleArtifact { path, .. } | Error::Io { path, .. } => {
            v["error"]["path"] = path.display().to_string().into();
        }
        _ => {}
    }
    v
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use chisep_core::config::PipelineConfig;
use chisep_core::pipeline::{run_all, run_stage, Provenance, StageRequest};
use chisep_core::simulator::PhantomSpec;

#[derive(Parser)]
#[command(name = "chisep", version, about = "Susceptibility source separation pipeline")]
struct Cli {
    /// TOML configuration with per-stage sections; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Multiplies loaded phase images (+1 or -1).
    #[arg(long, global = true, allow_hyphen_values = true)]
    phase_sign: Option<f64>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory (defaults to paths.output_dir of the config).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct VsharpFlags {
    #[arg(long)]
    r_max: Option<f64>,
    #[arg(long)]
    r_min: Option<f64>,
    #[arg(long)]
    tsvd_threshold: Option<f64>,
}

#[derive(Args, Default)]
struct SolverFlags {
    #[arg(long)]
    dr_para: Option<f64>,
    #[arg(long)]
    dr_dia: Option<f64>,
    #[arg(long)]
    lambda_r2p: Option<f64>,
    #[arg(long)]
    lambda_grad: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    step_safety: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom and simulate multi-echo GRE data plus ground truth.
    Simulate {
        /// Phantom spec JSON; the bundled phantom when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        b0: Option<f64>,
        /// Echo times in seconds, comma separated.
        #[arg(long, value_delimiter = ',')]
        te: Option<Vec<f64>>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Laplacian-unwrap every echo and combine into a field map (Hz).
    UnwrapCombine {
        /// GRE manifest (gre.json) or its directory.
        #[arg(long)]
        gre: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Remove the background field with V-SHARP.
    Vsharp {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        vsharp: VsharpFlags,
        #[command(flatten)]
        out: OutArg,
    },
    /// Fit R2* and derive R2'.
    R2star {
        #[arg(long)]
        gre: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        r2_baseline: Option<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Separate paramagnetic and diamagnetic susceptibility.
    Chisep {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        r2prime: PathBuf,
        /// Repeatable; the masks are intersected.
        #[arg(long, required = true)]
        mask: Vec<PathBuf>,
        /// GRE manifest providing B0 strength and direction.
        #[arg(long)]
        gre: Option<PathBuf>,
        #[arg(long)]
        b0: Option<f64>,
        #[arg(long, value_delimiter = ',', num_args = 3)]
        b0_dir: Option<Vec<f64>>,
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        out: OutArg,
    },
    /// Build the hybrid T1/QSM contrast for one subject.
    Hybrid {
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        qsm: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Average co-registered subject maps into mean, SD and rSD atlases.
    Atlas {
        /// CSV with id, age, sex, site and one column per map.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        mask: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Population ROI table from per-subject ROI medians.
    Roi {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Label volume; repeat together with --names for several atlases.
        #[arg(long, required = true)]
        labels: Vec<PathBuf>,
        /// Label-name CSV (label,name) matching each --labels.
        #[arg(long, required = true)]
        names: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Linear regression of chi_para on iron content.
    Regress {
        /// Two-column CSV (iron, chi_para); the reference nuclei when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// simulate, unwrap-combine, vsharp, r2star and chisep in one go.
    RunAll {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        vsharp: VsharpFlags,
        #[command(flatten)]
        solver: SolverFlags,
        #[command(flatten)]
        out: OutArg,
    },
    /// Re-run a stage from its provenance record.
    Replay { provenance: PathBuf },
    /// Print the effective configuration as TOML.
    ShowConfig,
    /// Print the bundled phantom spec as JSON.
    PhantomSpec,
}

fn apply_vsharp(cfg: &mut PipelineConfig, f: &VsharpFlags) {
    if let Some(v) = f.r_max {
        cfg.vsharp.r_max_mm = v;
    }
    if f.r_min.is_some() {
        cfg.vsharp.r_min_mm = f.r_min;
    }
    if let Some(v) = f.tsvd_threshold {
        cfg.vsharp.tsvd_threshold = v;
    }
}

fn apply_solver(cfg: &mut PipelineConfig, f: &SolverFlags) {
    let c = &mut cfg.chisep;
    if let Some(v) = f.dr_para {
        c.dr_para = v;
    }
    if let Some(v) = f.dr_dia {
        c.dr_dia = v;
    }
    if let Some(v) = f.lambda_r2p {
        c.lambda_r2p = v;
    }
    if let Some(v) = f.lambda_grad {
        c.lambda_grad = v;
    }
    if let Some(v) = f.max_iter {
        c.max_iter = v;
    }
    if let Some(v) = f.tol {
        c.tol = v;
    }
    if let Some(v) = f.step_safety {
        c.step_safety = v;
    }
}

fn out_dir(cfg: &PipelineConfig, out: &OutArg) -> Result<PathBuf> {
    match out.out.clone().or_else(|| cfg.paths.output_dir.clone()) {
        Some(p) => Ok(p),
        None => bail!("no output directory: pass --out or set paths.output_dir"),
    }
}

fn manifest(cfg: &PipelineConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag.or_else(|| cfg.paths.manifest.clone()) {
        Some(p) => Ok(p),
        None => bail!("no subject manifest: pass --manifest or set paths.manifest"),
    }
}

fn report(prov: &Provenance) {
    info!(
        "{}: {} output file(s) in {:.2} s",
        prov.stage,
        prov.outputs.len(),
        prov.wall_time_s
    );
    for o in &prov.outputs {
        println!("{}", o.path.display());
    }
    if prov.details.get("converged") == Some(&serde_json::Value::Bool(false)) {
        warn!("{}: solver stopped at max_iter before reaching tol", prov.stage);
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.phase_sign {
        cfg.phase.phase_sign = s;
    }

    let request = match cli.command {
        Command::Simulate { spec, seed, b0, te, out } => {
            if let Some(b0) = b0 {
                cfg.simulate.b0_tesla = b0;
            }
            if let Some(te) = te {
                cfg.simulate.te_s = te;
            }
            StageRequest::Simulate {
                spec,
                seed,
                out_dir: out_dir(&cfg, &out)?,
            }
        }
        Command::UnwrapCombine { gre, mask, out } => StageRequest::UnwrapCombine {
            gre,
            mask,
            out_dir: out_dir(&cfg, &out)?,
        },
        Command::Vsharp { field, mask, vsharp, out } => {
            apply_vsharp(&mut cfg, &vsharp);
            StageRequest::Vsharp {
                field,
                mask,
                out_dir: out_dir(&cfg, &out)?,
            }
        }
        Command::R2star { gre, mask, r2_baseline, out } => {
            if let Some(b) = r2_baseline {
                cfg.relaxometry.r2_baseline = b;
            }
            StageRequest::R2star {
                gre,
                mask,
                out_dir: out_dir(&cfg, &out)?,
            }
        }
        Command::Chisep {
            field,
            r2prime,
            mask,
            gre,
            b0,
            b0_dir,
            solver,
            out,
        } => {
            apply_solver(&mut cfg, &solver);
            if gre.is_none() && b0.is_none() {
                bail!("chisep needs --gre or --b0");
            }
            StageRequest::Chisep {
                field,
                r2prime,
                masks: mask,
                gre,
                b0_tesla: b0,
                b0_dir: b0_dir.map(|d| [d[0], d[1], d[2]]),
                out_dir: out_dir(&cfg, &out)?,
            }
        }
        Command::Hybrid { t1, qsm, mask, out } => StageRequest::Hybrid {
            t1,
            qsm,
            mask,
            out_dir: out_dir(&cfg, &out)?,
        },
        Command::Atlas { manifest: m, mask, out } => StageRequest::Atlas {
            manifest: manifest(&cfg, m)?,
            mask,
            out_dir: out_dir(&cfg, &out)?,
        },
        Command::Roi {
            manifest: m,
            labels,
            names,
            out,
        } => {
            if labels.len() != names.len() {
                bail!("{} --labels but {} --names", labels.len(), names.len());
            }
            StageRequest::Roi {
                manifest: manifest(&cfg, m)?,
                labels: labels.into_iter().zip(names).collect(),
                out_dir: out_dir(&cfg, &out)?,
            }
        }
        Command::Regress { input, out } => StageRequest::Regress {
            input,
            out_dir: out_dir(&cfg, &out)?,
        },
        Command::RunAll {
            spec,
            seed,
            vsharp,
            solver,
            out,
        } => {
            apply_vsharp(&mut cfg, &vsharp);
            apply_solver(&mut cfg, &solver);
            let dir = out_dir(&cfg, &out)?;
            for prov in run_all(spec.as_deref(), seed, &cfg, &dir)? {
                report(&prov);
            }
            return Ok(());
        }
        Command::Replay { provenance } => {
            let prov = Provenance::load(&provenance)
                .with_context(|| format!("reading {}", provenance.display()))?;
            let again = prov.replay()?;
            let same = again.outputs == prov.outputs;
            report(&again);
            if !same {
                bail!("replayed outputs differ from the recorded digests");
            }
            return Ok(());
        }
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml_string()?);
            return Ok(());
        }
        Command::PhantomSpec => {
            println!("{}", serde_json::to_string_pretty(&PhantomSpec::bundled())?);
            return Ok(());
        }
    };
    let prov = run_stage(&request, &cfg)?;
    report(&prov);
    Ok(())
}

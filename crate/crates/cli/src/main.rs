//! `nir` — command-line frontend: registration runs, warping, evaluation,
//! synthetic data, and field inspection. JSON in, JSON/CSV out.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nir_core::deform::{jacobian_stats, load_field, save_field, DeformationField};
use nir_core::metrics::{evaluate, evaluate_masks_only, MaskPair, MetricConfig, MetricReport};
use nir_core::registrar::{
    load_checkpoint, register, save_checkpoint, Checkpoint, RegistrationConfig, TrainedModel,
};
use nir_core::synth::{make_pair, SynthSpec};
use nir_core::volume::{load_volume, save_volume, warp_volume, Volume};
use nir_core::{Error, Result};

const VERSION_LINE: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (formats: nvol v1, field v1, checkpoint v1)"
);

#[derive(Parser)]
#[command(name = "nir", version = VERSION_LINE, about = "Pairwise neural implicit image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a deformation registering a moving volume to a target.
    Register(RegisterArgs),
    /// Apply a deformation to a volume (trilinear; nearest for labels).
    Warp(WarpArgs),
    /// Score target/warped volumes, masks, and a deformation field.
    Evaluate(EvaluateArgs),
    /// Generate a deterministic synthetic registration pair.
    Synth(SynthArgs),
    /// Print Jacobian and displacement statistics of a dense field.
    InspectField(InspectFieldArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Label volume on the target grid, for metrics.
    #[arg(long)]
    target_mask: Option<PathBuf>,
    /// Label volume on the moving grid; warped with the result.
    #[arg(long)]
    moving_mask: Option<PathBuf>,
}

#[derive(Args)]
struct WarpArgs {
    /// Dense field export (.nvol container, kind "field").
    #[arg(long, conflicts_with = "checkpoint")]
    field: Option<PathBuf>,
    /// Checkpoint (.nirc); the field is rendered from the model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional label volume warped with nearest-neighbor sampling.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    warped: Option<PathBuf>,
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    target_mask: Option<PathBuf>,
    #[arg(long)]
    warped_mask: Option<PathBuf>,
    /// Surface-DSC tolerance in millimeters.
    #[arg(long, default_value_t = 1.0)]
    tau_mm: f64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Grid dims as D,H,W.
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Peak ground-truth displacement in voxels.
    #[arg(long, default_value_t = 4.0)]
    delta_max: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectFieldArgs {
    #[arg(long)]
    field: PathBuf,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad dims '{s}': {e}"))?;
    match parts.as_slice() {
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err(format!("dims must have three components, got '{s}'")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Shape(_) => "shape",
        Error::Io(_) => "io",
        Error::Format(_) => "format",
        Error::Numerical(_) => "numerical",
    }
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe (e.g. `nir ... | head`) closes
    // stdout instead of panicking on the failed write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '"'], " ");
            eprintln!("nir: error kind={} msg=\"{}\"", error_kind(&e), msg.trim());
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Register(args) => cmd_register(args),
        Command::Warp(args) => cmd_warp(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Synth(args) => cmd_synth(args),
        Command::InspectField(args) => cmd_inspect_field(args),
    }
}

fn read_config(path: &Path) -> Result<RegistrationConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RegistrationConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_trace_csv(path: &Path, trace: &[nir_core::registrar::TracePoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,sim,reg,total,seconds")?;
    for p in trace {
        writeln!(
            f,
            "{},{},{},{},{}",
            p.iteration, p.sim, p.reg, p.total, p.seconds
        )?;
    }
    f.flush()?;
    Ok(())
}

fn write_report(report: &MetricReport, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    match out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_register(args: RegisterArgs) -> Result<()> {
    if args.target_mask.is_some() != args.moving_mask.is_some() {
        return Err(Error::config(
            "masks require both --target-mask and --moving-mask",
        ));
    }
    let cfg = read_config(&args.config)?;
    let target = load_volume(&args.target)?;
    let moving = load_volume(&args.moving)?;
    std::fs::create_dir_all(&args.out)?;

    let result = register(&target, &moving, &cfg)?;

    let ckpt = Checkpoint {
        method: cfg.method,
        seed: cfg.seed,
        iteration: cfg.iterations
            + if cfg.method.is_hybrid() {
                cfg.phase1_iterations
            } else {
                0
            },
        domain: target.domain(),
        ode: cfg.ode,
        model: result.model.clone(),
    };
    save_checkpoint(&ckpt, args.out.join("checkpoint.nirc"))?;
    if let TrainedModel::Hybrid(nf1, _, ode) = &result.model {
        // The frozen first stage separately, for resuming phase 2.
        save_checkpoint(
            &Checkpoint {
                method: cfg.method,
                seed: cfg.seed,
                iteration: cfg.phase1_iterations,
                domain: target.domain(),
                ode: *ode,
                model: TrainedModel::Single(nf1.clone(), *ode),
            },
            args.out.join("checkpoint_phase1.nirc"),
        )?;
    }
    save_field(&result.field, args.out.join("field.nvol"))?;
    write_trace_csv(&args.out.join("trace.csv"), &result.trace)?;
    let warped = warp_volume(&moving, &result.field)?;
    save_volume(&warped, args.out.join("warped.nvol"))?;

    if let (Some(tm), Some(mm)) = (&args.target_mask, &args.moving_mask) {
        let target_mask = load_volume(tm)?;
        let moving_mask = load_volume(mm)?;
        let warped_mask = warp_volume(&moving_mask, &result.field)?;
        let pair = MaskPair::new(&target_mask, &warped_mask)?;
        let report = evaluate(
            &target,
            &warped,
            &result.field,
            Some(&pair),
            &MetricConfig::default(),
        )?;
        write_report(&report, Some(&args.out.join("metrics.json")))?;
    }
    Ok(())
}

fn load_deformation(field: Option<&Path>, checkpoint: Option<&Path>) -> Result<DeformationField> {
    match (field, checkpoint) {
        (Some(path), None) => load_field(path),
        (None, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.model.render(ckpt.domain)
        }
        _ => Err(Error::config(
            "exactly one of --field or --checkpoint is required",
        )),
    }
}

fn cmd_warp(args: WarpArgs) -> Result<()> {
    let field = load_deformation(args.field.as_deref(), args.checkpoint.as_deref())?;
    let moving = load_volume(&args.moving)?;
    let warped = warp_volume(&moving, &field)?;
    save_volume(&warped, &args.out)?;
    if let Some(labels_path) = &args.labels {
        let out = args
            .labels_out
            .clone()
            .ok_or_else(|| Error::config("--labels requires --labels-out"))?;
        let labels = load_volume(labels_path)?;
        let warped_labels = warp_volume(&labels, &field)?;
        save_volume(&warped_labels, out)?;
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = MetricConfig {
        tau_mm: args.tau_mm,
    };
    let volumes: Option<(Volume, Volume)> = match (&args.target, &args.warped) {
        (Some(t), Some(w)) => Some((load_volume(t)?, load_volume(w)?)),
        (None, None) => None,
        _ => {
            return Err(Error::config(
                "--target and --warped must be given together",
            ))
        }
    };
    let masks: Option<(Volume, Volume)> = match (&args.target_mask, &args.warped_mask) {
        (Some(t), Some(w)) => Some((load_volume(t)?, load_volume(w)?)),
        (None, None) => None,
        _ => {
            return Err(Error::config(
                "--target-mask and --warped-mask must be given together",
            ))
        }
    };
    let field = args.field.as_deref().map(load_field).transpose()?;

    let report = match (&volumes, &field) {
        (Some((target, warped)), Some(field)) => {
            let pair = masks
                .as_ref()
                .map(|(t, w)| MaskPair::new(t, w))
                .transpose()?;
            evaluate(target, warped, field, pair.as_ref(), &cfg)?
        }
        _ => {
            // Piecewise assembly: whatever inputs were given.
            let mut report = match &masks {
                Some((t, w)) => evaluate_masks_only(&MaskPair::new(t, w)?, &cfg)?,
                None => MetricReport {
                    dsc_v: None,
                    dsc_s: None,
                    ssim: None,
                    j_nonpos: None,
                    mean_dsc_v: None,
                    mean_dsc_s: None,
                    runtime_seconds: 0.0,
                },
            };
            if let Some((target, warped)) = &volumes {
                report.ssim = Some(nir_core::metrics::ssim(target, warped)?);
            }
            if let Some(field) = &field {
                report.j_nonpos = Some(jacobian_stats(field, [1, 1, 1])?.nonpos_fraction);
            }
            if volumes.is_none() && masks.is_none() && field.is_none() {
                return Err(Error::config("evaluate needs at least one input pair"));
            }
            report
        }
    };
    write_report(&report, args.out.as_deref())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(args.dims, args.seed);
    spec.delta_max = args.delta_max;
    let (target, moving, gt) = make_pair(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    save_volume(&target, args.out.join("target.nvol"))?;
    save_volume(&moving, args.out.join("moving.nvol"))?;
    save_field(&gt.field, args.out.join("gt_field.nvol"))?;
    Ok(())
}

fn cmd_inspect_field(args: InspectFieldArgs) -> Result<()> {
    let field = load_field(&args.field)?;
    let stats = jacobian_stats(&field, [1, 1, 1])?;
    let grid = field.domain.grid_points::<f64>();
    let mut mags: Vec<f64> = field
        .positions
        .iter()
        .zip(&grid)
        .map(|(q, p)| {
            ((q[0] as f64 - p[0]).powi(2)
                + (q[1] as f64 - p[1]).powi(2)
                + (q[2] as f64 - p[2]).powi(2))
            .sqrt()
        })
        .collect();
    mags.sort_by(|a, b| a.total_cmp(b));
    let pct = |q: f64| mags[((mags.len() - 1) as f64 * q).round() as usize];
    let out = serde_json::json!({
        "dims": field.domain.dims,
        "nonpos_fraction": stats.nonpos_fraction,
        "min_det": stats.min_det,
        "site_count": stats.site_count,
        "displacement_voxels": {
            "p50": pct(0.5),
            "p90": pct(0.9),
            "p99": pct(0.99),
            "max": mags.last().copied().unwrap_or(0.0),
        },
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("serializes"));
    Ok(())
}

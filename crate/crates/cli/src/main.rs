//! `cvreg`: register, warp, evaluate and inspect 3D volumes.
//!
//! Exit codes: 0 success, 2 invalid flags, 3 file errors, 4 engine errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cvreg_core::features::EmbeddingSource;
use cvreg_core::io::{load_any, save_any};
use cvreg_core::landscape::{feature_rotation_landscape, rotation_landscape, LandscapeConfig};
use cvreg_core::metrics::{dice, foreground_labels, sd_log_j};
use cvreg_core::synth::make_pair;
use cvreg_core::{
    register, DisplacementField, FeatureProviderConfig, InstanceOptConfig, PyramidConfig, RegistrationReport,
    SolverConfig, SsdConfig, Volume, VolumeKind,
};

#[derive(Parser)]
#[command(name = "cvreg", version, about = "Coarse-to-fine discrete convex registration of 3D volumes")]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed one.
    Register(RegisterArgs),
    /// Apply a stored displacement field.
    Warp(WarpArgs),
    /// Dice overlap and SDlogJ as JSON.
    Eval(EvalArgs),
    /// Self-similarity under two-axis rotations, as CSV.
    Landscape(LandscapeArgs),
    /// Write a seeded phantom, its labels and a smooth ground-truth field.
    Synth(SynthArgs),
    /// Extract and store a feature volume.
    Features(FeaturesArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProviderArg {
    Intensity,
    SsdDescriptor,
    Embedded,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out_field: PathBuf,
    /// Moving volume resampled by the result.
    #[arg(long)]
    out_warped: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Search radius per level, coarsest first [default: 2,3,3 for three
    /// levels, otherwise 3 per level].
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "ssd-descriptor")]
    provider: ProviderArg,
    /// Local embeddings of the fixed and the moving image.
    #[arg(long, num_args = 2, value_names = ["FIXED", "MOVING"])]
    embedding_local: Option<Vec<PathBuf>>,
    /// Optional global embeddings, fused with the local ones.
    #[arg(long, num_args = 2, value_names = ["FIXED", "MOVING"])]
    embedding_global: Option<Vec<PathBuf>>,
    #[arg(long, value_enum, default_value = "on")]
    instance_opt: Switch,
    #[arg(long, default_value_t = InstanceOptConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = InstanceOptConfig::default().iterations)]
    iters: usize,
    #[arg(long, default_value_t = InstanceOptConfig::default().lambda_diff)]
    lambda: f64,
    /// Coupling weights, strictly increasing [default: 0.003,0.01,0.03,0.1,0.3,1].
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// JSON run report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat the input as a label map (nearest-neighbor lookup).
    #[arg(long)]
    label: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference (fixed) labels.
    #[arg(long)]
    labels_a: PathBuf,
    /// Moving labels, warped by --field when given.
    #[arg(long)]
    labels_b: PathBuf,
    #[arg(long)]
    field: Option<PathBuf>,
    /// Labels to score [default: every non-zero label in either map].
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<u32>>,
    /// Also write the JSON to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct LandscapeArgs {
    /// Scalar image, or a feature-map volume with `--provider embedded`.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum, default_value = "ssd-descriptor")]
    provider: ProviderArg,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1])]
    axes: Vec<usize>,
    /// Largest angle in degrees, or a symmetric pair `-A,A`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [60.0])]
    range: Vec<f64>,
    #[arg(long, default_value_t = 5.0)]
    step: f64,
    /// Score only voxels whose intensity exceeds this value.
    #[arg(long, allow_hyphen_values = true)]
    mask_above: Option<f64>,
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Grid size, one value or three comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [96])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest displacement norm in voxels.
    #[arg(long, default_value_t = 8.0)]
    magnitude: f64,
    /// Smoothness of the field in voxels.
    #[arg(long, default_value_t = 8.0)]
    sigma: f64,
    /// Outputs are `<prefix>image.cvr`, `labels`, `field`, `warped_image`
    /// and `warped_labels`.
    #[arg(long)]
    out_prefix: String,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "ssd-descriptor")]
    provider: ProviderArg,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Engine(cvreg_core::Error),
}

impl From<cvreg_core::Error> for Failure {
    fn from(e: cvreg_core::Error) -> Self {
        Failure::Engine(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(r: cvreg_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::Usage(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|source| {
        Failure::Engine(cvreg_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

fn provider_config(p: ProviderArg, args: Option<&RegisterArgs>) -> CliResult<FeatureProviderConfig> {
    let local = args.and_then(|a| a.embedding_local.as_ref());
    let global = args.and_then(|a| a.embedding_global.as_ref());
    match p {
        ProviderArg::Intensity | ProviderArg::SsdDescriptor if local.is_some() || global.is_some() => Err(
            Failure::Usage("--embedding-local/--embedding-global require --provider embedded".into()),
        ),
        ProviderArg::Intensity => Ok(FeatureProviderConfig::Intensity),
        ProviderArg::SsdDescriptor => Ok(FeatureProviderConfig::SsdDescriptor(SsdConfig::default())),
        ProviderArg::Embedded => {
            let local = local.ok_or_else(|| Failure::Usage("--provider embedded needs --embedding-local".into()))?;
            let source = |i: usize| EmbeddingSource {
                local: local[i].clone(),
                global: global.map(|g| g[i].clone()),
            };
            Ok(FeatureProviderConfig::Embedded {
                fixed: source(0),
                moving: source(1),
            })
        }
    }
}

#[derive(Serialize)]
struct RegisterOutput<'a> {
    command: &'static str,
    fixed: &'a Path,
    moving: &'a Path,
    #[serde(flatten)]
    report: &'a RegistrationReport,
}

fn run_register(a: &RegisterArgs) -> CliResult<()> {
    let radii = a.radii.clone().unwrap_or_else(|| {
        if a.levels == 3 {
            PyramidConfig::default().radii
        } else {
            vec![3; a.levels]
        }
    });
    let cfg = PyramidConfig {
        levels: a.levels,
        radii,
        solver: SolverConfig {
            schedule: a.schedule.clone().unwrap_or_else(|| SolverConfig::default().schedule),
            kernel: a.kernel,
            ..SolverConfig::default()
        },
        provider: provider_config(a.provider, Some(a))?,
        run_instance_opt: a.instance_opt == Switch::On,
        instance_opt: InstanceOptConfig {
            learning_rate: a.lr,
            iterations: a.iters,
            lambda_diff: a.lambda,
            ..InstanceOptConfig::default()
        },
    };
    usage(cfg.validate())?;
    if !cfg.run_instance_opt {
        usage(cfg.instance_opt.validate())?;
    }
    let fixed = load_any(&a.fixed)?;
    let moving = load_any(&a.moving)?;
    let result = register(&fixed, &moving, &cfg)?;
    save_any(&a.out_field, result.field.volume())?;
    if let Some(path) = &a.out_warped {
        save_any(path, &result.field.warp(&moving)?)?;
    }
    let report = &result.report;
    if let Some(path) = &a.report {
        let out = RegisterOutput {
            command: "register",
            fixed: &a.fixed,
            moving: &a.moving,
            report,
        };
        write_text(path, &to_json(&out))?;
    }
    println!(
        "registered {} levels (capture radius {} voxels), max |u| = {:.3} voxels, {:.0} ms",
        report.levels.len(),
        report.effective_capture_radius,
        report.max_abs_displacement,
        report.timings.total_ms
    );
    Ok(())
}

fn run_warp(a: &WarpArgs) -> CliResult<()> {
    let mut vol = load_any(&a.input)?;
    if a.label && vol.kind() != VolumeKind::LabelMap {
        vol = vol.with_kind(VolumeKind::LabelMap)?;
    }
    let field = DisplacementField::from_volume(load_any(&a.field)?)?;
    save_any(&a.out, &field.warp(&vol)?)?;
    println!("warped {} -> {}", a.input.display(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    labels: Vec<u32>,
    dice: BTreeMap<u32, f64>,
    mean_dice: f64,
    sdlogj: Option<f64>,
}

fn load_labels(path: &Path) -> CliResult<Volume> {
    let v = load_any(path)?;
    Ok(if v.kind() == VolumeKind::LabelMap {
        v
    } else {
        v.with_kind(VolumeKind::LabelMap)?
    })
}

fn run_eval(a: &EvalArgs) -> CliResult<()> {
    let la = load_labels(&a.labels_a)?;
    let mut lb = load_labels(&a.labels_b)?;
    let mut sdlogj = None;
    if let Some(path) = &a.field {
        let field = DisplacementField::from_volume(load_any(path)?)?;
        lb = field.warp(&lb)?;
        sdlogj = Some(sd_log_j(&field)?);
    }
    let labels = match &a.labels {
        Some(l) => l.clone(),
        None => {
            let mut l = foreground_labels(&la);
            l.extend(foreground_labels(&lb));
            l.sort_unstable();
            l.dedup();
            l
        }
    };
    let mut scores = BTreeMap::new();
    for &l in &labels {
        scores.insert(l, dice(&la, &lb, l)?);
    }
    let mean_dice = if labels.is_empty() {
        1.0
    } else {
        scores.values().sum::<f64>() / labels.len() as f64
    };
    let report = EvalReport {
        labels,
        dice: scores,
        mean_dice,
        sdlogj,
    };
    let json = to_json(&report);
    if let Some(path) = &a.report {
        write_text(path, &json)?;
    }
    print!("{json}");
    Ok(())
}

fn run_landscape(a: &LandscapeArgs) -> CliResult<()> {
    if a.axes.len() != 2 {
        return Err(Failure::Usage(format!("--axes takes two axes, got {}", a.axes.len())));
    }
    let max_deg = match a.range[..] {
        [m] => m.abs(),
        [lo, hi] if lo == -hi => hi.abs(),
        _ => return Err(Failure::Usage(format!("--range must be A or -A,A, got {:?}", a.range))),
    };
    let cfg = LandscapeConfig {
        axes: (a.axes[0], a.axes[1]),
        max_deg,
        step_deg: a.step,
    };
    usage(cfg.validate())?;
    let vol = load_any(&a.image)?;
    let mask: Option<Vec<bool>> = a.mask_above.map(|t| vol.data()[..vol.num_voxels()].iter().map(|&v| v > t).collect());
    let landscape = match a.provider {
        ProviderArg::Embedded => {
            if mask.is_some() {
                return Err(Failure::Usage("--mask-above needs an image, not embeddings".into()));
            }
            let f = cvreg_core::FeatureVolume::raw(vol)?.normalized();
            feature_rotation_landscape(&f, &cfg, None)?
        }
        p => rotation_landscape(&vol, &provider_config(p, None)?, &cfg, mask.as_deref())?,
    };
    write_text(&a.out_csv, &landscape.to_csv())?;
    let (alpha, beta) = landscape.argmax();
    println!(
        "{} cells, peak at ({alpha}, {beta}) degrees -> {}",
        landscape.scores.len(),
        a.out_csv.display()
    );
    Ok(())
}

fn run_synth(a: &SynthArgs) -> CliResult<()> {
    let dims = match a.dims[..] {
        [n] => [n; 3],
        [x, y, z] => [x, y, z],
        _ => return Err(Failure::Usage(format!("--dims takes 1 or 3 values, got {}", a.dims.len()))),
    };
    let pair = make_pair(dims, a.seed, a.magnitude, a.sigma)?;
    let outputs = [
        ("image", pair.image),
        ("labels", pair.labels),
        ("field", pair.field.into_volume()),
        ("warped_image", pair.warped_image),
        ("warped_labels", pair.warped_labels),
    ];
    for (name, vol) in &outputs {
        save_any(format!("{}{name}.cvr", a.out_prefix), vol)?;
    }
    println!("wrote {} volumes with prefix {}", outputs.len(), a.out_prefix);
    Ok(())
}

fn run_features(a: &FeaturesArgs) -> CliResult<()> {
    if let ProviderArg::Embedded = a.provider {
        return Err(Failure::Usage("embedded features are read from files, not extracted".into()));
    }
    let vol = load_any(&a.input)?;
    let f = provider_config(a.provider, None)?.extract(&vol)?;
    save_any(&a.out, f.volume())?;
    println!("{} channels -> {}", f.channels(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error[usage]: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global pool is configured once");
    }
    let result = match &cli.command {
        Command::Register(a) => run_register(a),
        Command::Warp(a) => run_warp(a),
        Command::Eval(a) => run_eval(a),
        Command::Landscape(a) => run_landscape(a),
        Command::Synth(a) => run_synth(a),
        Command::Features(a) => run_features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Engine(e)) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(if e.is_io() { 3 } else { 4 })
        }
    }
}

//! The `densify` command line.
//!
//! Exit status: 0 on success, 1 for usage errors, 2 for data errors and 3
//! for numerical failures (divergence or a failed gradient check).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cloud::{extract_patches, farthest_point_sampling, normalize_unit_sphere, Patch, PointCloud, DEFAULT_PATCH_SIZE};
use crate::config::{parse_weights, Mode, RunConfig};
use crate::error::{invalid_arg, Error, Result};
use crate::gradcheck::{joint_suite, neu_suite, renderer_suite, SuiteOptions};
use crate::io::{read_neup, read_off, read_xyz, write_neup, write_pgm, write_png, write_trace_csv, write_xyz, PgmFormat};
use crate::metrics::{evaluate, MetricReport};
use crate::neu::{upsampler_forward, NeuParams};
use crate::optim::{train_neu, upsample_direct, OptimTrace};
use crate::render::{make_view_ring_with_extent, render_views, CameraRig, RenderParams};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DENSIFY_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "densify", version, about = "Self-supervised point cloud upsampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Upsample a point cloud by optimizing coordinates or an upsampler network
    Upsample(UpsampleArgs),
    /// Render soft silhouettes of a cloud from a ring of cameras
    Render(RenderArgs),
    /// Compare a predicted cloud with a reference
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Train the upsampler on a directory of XYZ patches
    Train(TrainArgs),
}

fn weights_arg(s: &str) -> std::result::Result<String, String> {
    parse_weights(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

#[derive(Args, Debug, Default)]
struct Tuning {
    /// key=value file; flags given on the command line take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rate: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long = "img-size")]
    img_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Loss weights sc,ic,hd,un
    #[arg(long, value_parser = weights_arg)]
    weights: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long = "feature-width")]
    feature_width: Option<usize>,
}

impl Tuning {
    fn overrides(&self, mode: Option<Mode>) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("mode", mode.map(|m| m.to_string()));
        push("rate", self.rate.map(|v| v.to_string()));
        push("iters", self.iters.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("views", self.views.map(|v| v.to_string()));
        push("img_size", self.img_size.map(|v| v.to_string()));
        push("gamma", self.gamma.map(|v| v.to_string()));
        push("weights", self.weights.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("jitter", self.jitter.map(|v| v.to_string()));
        push("feature_width", self.feature_width.map(|v| v.to_string()));
        out
    }

    fn resolve(&self, mode: Option<Mode>) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        RunConfig::resolve(text.as_deref(), &self.overrides(mode))
    }
}

#[derive(Args, Debug)]
struct UpsampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[command(flatten)]
    tuning: Tuning,
    /// Write the per-iteration loss trace as CSV
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Pretrained upsampler weights (neu mode); trains on the input otherwise
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = crate::render::DEFAULT_VIEWS)]
    views: usize,
    #[arg(long, default_value_t = crate::render::DEFAULT_IMAGE_SIZE)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = crate::render::DEFAULT_GAMMA)]
    gamma: f64,
    /// Write PNG instead of PGM
    #[arg(long)]
    png: bool,
    /// Write ASCII (P2) instead of binary (P5) PGM
    #[arg(long)]
    ascii: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "ref-mesh")]
    ref_mesh: Option<PathBuf>,
    /// Print a CSV header and row instead of key=value lines
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per suite
    #[arg(long, default_value_t = 3)]
    instances: usize,
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long = "patch-dir")]
    patch_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tuning: Tuning,
    #[arg(long)]
    trace: Option<PathBuf>,
}

/// Sets the worker thread count from [`THREADS_ENV`] if it is set and the
/// global pool has not been started yet.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// status, printing to stdout and stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_command_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run_command`] with explicit output streams.
pub fn run_command_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Upsample(a) => upsample(&a, out),
        Command::Render(a) => render(&a, out),
        Command::Evaluate(a) => evaluate_cmd(&a, out),
        Command::Gradcheck(a) => return gradcheck(&a, out, err),
        Command::Train(a) => train(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn rig_for(c: &RunConfig) -> Result<CameraRig> {
    make_view_ring_with_extent(c.views, c.radius, c.elevation, (c.img_size, c.img_size), c.half_extent)
}

/// Normalized patches covering `cloud`: the whole cloud when it fits in one
/// patch, otherwise enough overlapping patches to cover it about three times.
fn covering_patches(cloud: &PointCloud) -> Result<Vec<Patch>> {
    if cloud.len() <= DEFAULT_PATCH_SIZE {
        return Ok(vec![Patch::whole(cloud)?]);
    }
    let count = (3 * cloud.len()).div_ceil(DEFAULT_PATCH_SIZE);
    extract_patches(cloud, count, DEFAULT_PATCH_SIZE)
}

/// Maps per-patch outputs back to input coordinates and thins their union to
/// `target` points by farthest point sampling.
fn merge_patches(patches: &[Patch], outputs: Vec<PointCloud>, target: usize) -> Result<PointCloud> {
    let mut all = Vec::new();
    for (patch, out) in patches.iter().zip(outputs) {
        all.extend(patch.normalization.invert(&out)?.into_points());
    }
    let union = PointCloud::new(all)?;
    if patches.len() == 1 {
        return Ok(union);
    }
    Ok(union.select(&farthest_point_sampling(&union, target, 0)?))
}

fn upsample(a: &UpsampleArgs, out: &mut dyn Write) -> Result<()> {
    let c = a.tuning.resolve(a.mode)?;
    let optim = c.optim_config();
    let rig = rig_for(&c)?;
    let input = read_xyz(&a.input)?;
    if c.rate == 0 || c.rate > input.len() {
        return Err(invalid_arg!("rate {} out of range 1..={}", c.rate, input.len()));
    }
    let patches = covering_patches(&input)?;
    let mut trace = OptimTrace::default();
    let outputs = match c.mode {
        Mode::Direct => patches
            .iter()
            .map(|p| {
                let (dense, t) = upsample_direct(&p.cloud, c.rate, &rig, &optim)?;
                trace.reports.extend(t.reports);
                trace.millis.extend(t.millis);
                Ok(dense)
            })
            .collect::<Result<Vec<_>>>()?,
        Mode::Neu => {
            let params: NeuParams = match &a.params {
                Some(p) => read_neup(p)?,
                None => {
                    let (params, t) = train_neu(&patches, c.rate, &rig, &optim)?;
                    trace = t;
                    params
                }
            };
            patches
                .iter()
                .map(|p| upsampler_forward(&p.cloud, c.rate, &params))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let dense = merge_patches(&patches, outputs, c.rate * input.len())?;
    write_xyz(&dense, &a.out)?;
    if let Some(t) = &a.trace {
        write_trace_csv(&trace, t)?;
    }
    let _ = writeln!(out, "wrote {} points to {}", dense.len(), a.out.display());
    Ok(())
}

fn render(a: &RenderArgs, out: &mut dyn Write) -> Result<()> {
    let cloud = read_xyz(&a.input)?;
    let (normalized, _) = normalize_unit_sphere(&cloud)?;
    let c = RunConfig::default();
    let rig = make_view_ring_with_extent(a.views, c.radius, c.elevation, (a.size, a.size), c.half_extent)?;
    let params = RenderParams {
        gamma: a.gamma,
        ..RenderParams::default()
    };
    let images = render_views(&normalized, &rig, &params)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for img in &images {
        let ext = if a.png { "png" } else { "pgm" };
        let path = a.out.join(format!("view_{:02}.{ext}", img.view_index));
        if a.png {
            write_png(img, &path)?;
        } else {
            let format = if a.ascii { PgmFormat::Ascii } else { PgmFormat::Binary };
            write_pgm(img, &path, format)?;
        }
    }
    let _ = writeln!(out, "wrote {} views to {}", images.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let pred = read_xyz(&a.pred)?;
    let reference = read_xyz(&a.reference)?;
    let mesh = a.ref_mesh.as_ref().map(read_off).transpose()?;
    let report = evaluate(&pred, &reference, mesh.as_ref())?;
    let _ = if a.csv {
        writeln!(out, "{}\n{}", MetricReport::csv_header(), report.csv_row())
    } else {
        writeln!(out, "{report}")
    };
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let opts = SuiteOptions {
        seed: a.seed,
        instances: a.instances.max(1),
        corrupt: a.corrupt,
    };
    let renderer = SuiteOptions {
        instances: opts.instances * 5,
        ..opts
    };
    let mut failed = false;
    for outcome in [renderer_suite(&renderer), joint_suite(&opts), neu_suite(&opts)] {
        match outcome {
            Ok(o) => {
                failed |= !o.passed();
                let _ = writeln!(out, "{o}");
            }
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                return exit_code(&e);
            }
        }
    }
    if failed {
        EXIT_NUMERIC
    } else {
        EXIT_OK
    }
}

fn read_patch_dir(dir: &Path) -> Result<Vec<Patch>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .xyz files in {}", dir.display())));
    }
    files.iter().map(|f| Patch::whole(&read_xyz(f)?)).collect()
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let c = a.tuning.resolve(None)?;
    let rig = rig_for(&c)?;
    let patches = read_patch_dir(&a.patch_dir)?;
    let (params, trace) = train_neu(&patches, c.rate, &rig, &c.optim_config())?;
    write_neup(&params, &a.out)?;
    if let Some(t) = &a.trace {
        write_trace_csv(&trace, t)?;
    }
    if let Some(last) = trace.epoch_means.last() {
        let _ = writeln!(out, "final epoch mean joint={last}");
    }
    let _ = writeln!(out, "wrote {} parameters to {}", params.parameter_count(), a.out.display());
    Ok(())
}

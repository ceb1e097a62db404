//! Command-line pipeline driver: synth, reconstruct, mesh, eval, info.
//!
//! Every command reads and writes the text and binary formats described in
//! the crate documentation. Diagnostics go to stderr; file outputs are the
//! data products, except for `info`, whose printed summary is its product.
//!
//! Exit codes: 0 on success, 2 when the inputs are at fault (missing files,
//! malformed formats, invalid parameters), 1 for internal errors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};

use map_adapt::core_map::{AdaptiveVoxelMap, LevelHistogram, VoxelSizes};
use map_adapt::core_map::serialize::{load_map, save_map, MAP_MAGIC};
use map_adapt::dataset_io::{
    load_config, load_manifest, load_policy, load_stats_log, save_stats_log, CameraInfo,
    RunConfig,
};
use map_adapt::fixed::{FixedIntegrator, FixedTsdfMap, FIXED_MAGIC};
use map_adapt::integrator::{
    AdmissionMode, FrameIntegrator, FrameStats, IntegratorOptions,
};
use map_adapt::mesher::{extract_fixed_mesh, extract_mesh, read_ply, write_ply, Mesh, PlyFormat};
use map_adapt::metrics::{
    evaluate, evaluate_fixed, report_table, report_text, EvalOptions, EvalTimings,
};
use map_adapt::scene_synth::{
    gt_voxel_labels, load_gt_samples, load_scene, synthesize_dataset, RenderOptions,
    SynthOptions,
};
use map_adapt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mapadapt",
    about = "Quality-adaptive semantic TSDF reconstruction",
    version,
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic RGB-D + semantics sequence from a scene file.
    Synth(SynthArgs),
    /// Fuse a rendered sequence into a TSDF map.
    Reconstruct(ReconstructArgs),
    /// Extract a triangle mesh from a map file.
    Mesh(MeshArgs),
    /// Score a reconstruction against ground-truth surface samples.
    Eval(EvalArgs),
    /// Print a summary of a map file.
    Info(InfoArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description file.
    #[arg(long)]
    scene: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of frames on the orbit trajectory.
    #[arg(long, default_value_t = 24)]
    frames: usize,
    /// Seed for depth noise and label confusion.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplicative depth noise sigma (off when absent).
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Probability of a wrong top label per pixel, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    confusion: f64,
    /// Ground-truth surface samples per square meter.
    #[arg(long, default_value_t = 4000.0)]
    gt_density: f64,
    /// Image width in pixels.
    #[arg(long, default_value_t = 320)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 240)]
    height: usize,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 60.0)]
    fov: f64,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Sequence manifest file.
    #[arg(long)]
    manifest: PathBuf,
    /// Output map file.
    #[arg(long)]
    out: PathBuf,
    /// Quality policy file (required unless --fixed-size is given).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Run configuration file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bypass the adaptive map: fuse one fixed grid at this voxel size.
    #[arg(long, value_name = "METERS")]
    fixed_size: Option<f64>,
    /// Override the policy's mode: S (semantic only) or SG (semantic + geometric).
    #[arg(long, value_parser = ["S", "SG"])]
    mode: Option<String>,
    /// Do not split the 26-neighborhood of split cells (ghost-mesh study).
    #[arg(long, action = ArgAction::SetTrue)]
    no_neighbor_split: bool,
    /// Use a single coarse admission grid instead of one grid per level.
    #[arg(long, action = ArgAction::SetTrue)]
    single_grid: bool,
    /// Write a per-frame statistics log to this path.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct MeshArgs {
    /// Input map file (adaptive or fixed).
    #[arg(long)]
    map: PathBuf,
    /// Output PLY file.
    #[arg(long)]
    out: PathBuf,
    /// Write ASCII PLY.
    #[arg(long, action = ArgAction::SetTrue, conflicts_with = "binary")]
    ascii: bool,
    /// Write binary little-endian PLY (the default).
    #[arg(long, action = ArgAction::SetTrue)]
    binary: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Input map file (adaptive or fixed).
    #[arg(long)]
    map: PathBuf,
    /// Reconstructed mesh (PLY).
    #[arg(long)]
    mesh: PathBuf,
    /// Ground-truth surface samples.
    #[arg(long)]
    gt: PathBuf,
    /// Quality policy file (defines the per-level buckets).
    #[arg(long)]
    policy: PathBuf,
    /// Output report file (key = value lines).
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-level table as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Per-frame statistics log from reconstruct, for the timing fields.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Mesh sampling density in points per square meter.
    #[arg(long, default_value_t = 20_000.0)]
    density: f64,
    /// Seed for the mesh sampler.
    #[arg(long, default_value_t = 7)]
    sample_seed: u64,
    /// Completion threshold in meters.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
}

#[derive(Args)]
struct InfoArgs {
    /// Input map file (adaptive or fixed).
    #[arg(long)]
    map: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|()| run(cli)) {
        eprintln!("error: {e}");
        return ExitCode::from(if e.is_user_error() { 2 } else { 1 });
    }
    ExitCode::SUCCESS
}

/// Caps rayon's worker count when MAPADAPT_THREADS is set.
fn configure_threads() -> Result<()> {
    let Some(raw) = std::env::var_os("MAPADAPT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .to_str()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::validation(format!(
                "MAPADAPT_THREADS must be a positive integer, got {raw:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Mesh(args) => cmd_mesh(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Info(args) => cmd_info(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let scene = load_scene(&args.scene)?;
    let camera = CameraInfo::pinhole(args.width, args.height, args.fov)?;
    let options = SynthOptions {
        n_frames: args.frames,
        render: RenderOptions {
            noise_sigma: args.noise_sigma,
            confusion: args.confusion,
            seed: args.seed,
        },
        gt_density: args.gt_density,
        label_names: None,
    };
    let manifest = synthesize_dataset(&scene, &camera, &options, &args.out)?;
    eprintln!(
        "synth: {} frames at {}x{} into {}",
        manifest.frames.len(),
        camera.width,
        camera.height,
        args.out.display()
    );
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let config = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let poses = manifest.load_poses()?;
    let n_frames = manifest.frames.len();

    let stats = if let Some(size) = args.fixed_size {
        reconstruct_fixed(&manifest, &poses, &config, size, &args.out)?
    } else {
        reconstruct_adaptive(&manifest, &poses, &config, &args)?
    };

    if let Some(path) = &args.stats {
        save_stats_log(path, &stats)?;
    }
    let total_ms: f64 = stats.iter().map(|s| s.integrate_ms).sum();
    eprintln!(
        "reconstruct: {} frames in {:.1} ms into {}",
        n_frames,
        total_ms,
        args.out.display()
    );
    Ok(())
}

fn reconstruct_adaptive(
    manifest: &map_adapt::dataset_io::SequenceManifest,
    poses: &[(u64, nalgebra::Isometry3<f64>)],
    config: &RunConfig,
    args: &ReconstructArgs,
) -> Result<Vec<FrameStats>> {
    let policy_path = args.policy.as_ref().ok_or_else(|| {
        Error::validation("--policy is required unless --fixed-size is given")
    })?;
    let mut policy = load_policy(policy_path)?;
    match args.mode.as_deref() {
        Some("S") => policy.use_geometry = false,
        Some("SG") => policy.use_geometry = true,
        _ => {}
    }
    let options = IntegratorOptions {
        neighbor_split: !args.no_neighbor_split,
        admission: if args.single_grid {
            AdmissionMode::SingleCoarse
        } else {
            AdmissionMode::PerLevel
        },
        complexity: config.complexity.clone(),
    };
    let integrator =
        FrameIntegrator::with_options(policy, config.integrator.clone(), options)?;
    let mut map = AdaptiveVoxelMap::new(config.sizes, manifest.n_labels)?;
    let mut stats = Vec::with_capacity(manifest.frames.len());
    for index in 0..manifest.frames.len() {
        let frame = manifest.load_frame(index, poses)?;
        stats.push(integrator.integrate_frame(&mut map, &frame)?);
    }
    save_map(&map, integrator.policy().hash64(), &args.out)?;
    Ok(stats)
}

fn reconstruct_fixed(
    manifest: &map_adapt::dataset_io::SequenceManifest,
    poses: &[(u64, nalgebra::Isometry3<f64>)],
    config: &RunConfig,
    size: f64,
    out: &Path,
) -> Result<Vec<FrameStats>> {
    let integrator = FixedIntegrator::with_config(config.integrator.clone())?;
    let mut map = FixedTsdfMap::new(size)?;
    let mut stats = Vec::with_capacity(manifest.frames.len());
    for index in 0..manifest.frames.len() {
        let frame = manifest.load_frame(index, poses)?;
        let s = integrator.integrate_frame(&mut map, &frame)?;
        // The fixed pipeline has no per-level admission or splits; those
        // columns stay zero in the shared log format.
        stats.push(FrameStats {
            frame_id: s.frame_id,
            points: s.points,
            rays: s.rays,
            admitted: [0, 0, 0],
            voxels_updated: s.voxels_updated,
            cells_split: 0,
            neighbor_splits: 0,
            cells_merged: 0,
            integrate_ms: s.integrate_ms,
        });
    }
    map.save(out)?;
    Ok(stats)
}

/// A map file is either adaptive or fixed; the leading magic says which.
enum LoadedMap {
    Adaptive(Box<AdaptiveVoxelMap>),
    Fixed(FixedTsdfMap),
}

fn load_any_map(path: &Path) -> Result<LoadedMap> {
    let mut magic = [0u8; 8];
    {
        use std::io::Read;
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        file.read_exact(&mut magic)
            .map_err(|e| Error::io(path, e))?;
    }
    if magic == *MAP_MAGIC {
        let (map, _) = load_map(path)?;
        Ok(LoadedMap::Adaptive(Box::new(map)))
    } else if magic == *FIXED_MAGIC {
        Ok(LoadedMap::Fixed(FixedTsdfMap::load(path)?))
    } else {
        Err(Error::format(path, "not a map file (unknown magic)"))
    }
}

fn cmd_mesh(args: MeshArgs) -> Result<()> {
    let format = if args.ascii {
        PlyFormat::Ascii
    } else {
        PlyFormat::BinaryLittleEndian
    };
    let started = Instant::now();
    let mesh = match load_any_map(&args.map)? {
        LoadedMap::Adaptive(map) => extract_mesh(&map),
        LoadedMap::Fixed(map) => extract_fixed_mesh(&map),
    };
    let elapsed = started.elapsed().as_secs_f64() * 1e3;
    write_ply(&mesh, &args.out, format)?;
    eprintln!(
        "mesh: {} vertices, {} triangles in {:.1} ms into {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        elapsed,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mesh: Mesh = read_ply(&args.mesh)?;
    let gt_samples = load_gt_samples(&args.gt)?;
    let policy = load_policy(&args.policy)?;
    let options = EvalOptions {
        sample_density: args.density,
        sample_seed: args.sample_seed,
        completion_threshold: args.threshold,
    };
    let timings = match &args.stats {
        Some(path) => {
            let log = load_stats_log(path)?;
            Some(EvalTimings {
                integrate_ms: log.iter().map(|s| s.integrate_ms).collect(),
                mesh_ms: f64::NAN,
            })
        }
        None => None,
    };
    let report = match load_any_map(&args.map)? {
        LoadedMap::Adaptive(map) => {
            let gt_labels: HashMap<[i64; 3], u16> =
                gt_voxel_labels(&gt_samples, map.sizes().coarse);
            evaluate(
                &map,
                &mesh,
                &gt_samples,
                &gt_labels,
                &policy,
                &options,
                timings.as_ref(),
            )?
        }
        LoadedMap::Fixed(map) => evaluate_fixed(
            &map,
            &mesh,
            &gt_samples,
            &policy,
            &options,
            timings.as_ref(),
        )?,
    };
    std::fs::write(&args.out, report_text(&report)).map_err(|e| Error::io(&args.out, e))?;
    if let Some(path) = &args.csv {
        std::fs::write(path, report_table(&report)).map_err(|e| Error::io(path, e))?;
    }
    eprintln!("eval: report into {}", args.out.display());
    Ok(())
}

fn cmd_info(args: InfoArgs) -> Result<()> {
    match load_any_map(&args.map)? {
        LoadedMap::Adaptive(map) => print_adaptive_info(&map),
        LoadedMap::Fixed(map) => print_fixed_info(&map),
    }
    Ok(())
}

fn print_adaptive_info(map: &AdaptiveVoxelMap) {
    let sizes = map.sizes();
    let h = map.level_histogram();
    let occupied = h.coarse_cells + h.middle_cells + h.fine_cells;
    println!("kind            adaptive");
    println!("blocks          {}", map.n_blocks());
    println!("block side      {}", map.block_side());
    println!(
        "voxel sizes     coarse {} m, middle {} m, fine {} m",
        sizes.coarse, sizes.middle, sizes.fine
    );
    println!("occupied cells  {occupied}");
    println!(
        "cells by level  coarse {}, middle {}, fine {}",
        h.coarse_cells, h.middle_cells, h.fine_cells
    );
    let (pc, pm, pf) = volume_percentages(&h, sizes);
    println!("volume by level coarse {pc:.2}%, middle {pm:.2}%, fine {pf:.2}%");
    println!(
        "split causes    semantic {}, geometric {}, neighbor {}",
        h.semantic_splits, h.geometric_splits, h.neighbor_splits
    );
    println!("memory bytes    {}", map.memory_bytes());
}

/// Occupied volume share per level: voxel counts scaled by voxel volume.
///
/// A cell refined to a finer level holds (coarse/size)^3 voxels of that
/// size, so each level's volume is its cell count times the coarse cell
/// volume and the shares express how much observed space sits at each
/// resolution.
fn volume_percentages(h: &LevelHistogram, sizes: &VoxelSizes) -> (f64, f64, f64) {
    let level_volume = |cells: usize, voxel: f64| {
        let per_cell = (sizes.coarse / voxel).round().powi(3);
        cells as f64 * per_cell * voxel.powi(3)
    };
    let vc = level_volume(h.coarse_cells, sizes.coarse);
    let vm = level_volume(h.middle_cells, sizes.middle);
    let vf = level_volume(h.fine_cells, sizes.fine);
    let total = vc + vm + vf;
    if total == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    (vc / total * 100.0, vm / total * 100.0, vf / total * 100.0)
}

fn print_fixed_info(map: &FixedTsdfMap) {
    println!("kind            fixed");
    println!("voxel size      {} m", map.voxel_size());
    println!("occupied voxels {}", map.len());
    println!("memory bytes    {}", map.memory_bytes());
}

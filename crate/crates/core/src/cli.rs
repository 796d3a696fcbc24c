//! Command-line driver: dataset synthesis and validation, meta-training,
//! per-frame fine-tuning, rendering, mesh extraction, evaluation, and
//! weight interpolation. Every command is deterministic for a fixed seed;
//! `--deterministic` additionally forces serial reductions so artifacts are
//! byte-identical across machines.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapt::{build_proxy_set, finetune, lerp_weights, FinetuneLogRow};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{load_config, RunConfig};
use crate::dataset::{validate_dataset, CaptureDataset};
use crate::difftape::ParamLayout;
use crate::evalgeo::{chamfer_p2s, extract_mesh, image_metrics, iou_voxel, normal_consistency};
use crate::field::{init_weights, FieldProgram};
use crate::mesh::Aabb;
use crate::meta::{meta_train, TaskSource};
use crate::renderer::{render_image, RenderConfig};
use crate::synth::{make_dataset, AnalyticBody};
use crate::template::{pose_template, SkeletalMotion, TemplateMesh};
use crate::{resolve_threads, Error, Result};

/// Default camera count for occlusion-handling proxy renders.
const PROXY_CAMERAS: usize = 32;
const PROXY_VFOV_DEG: f64 = 70.0;
/// Voxel grid resolution for the IoU metric in `eval`.
const IOU_RESOLUTION: usize = 64;

#[derive(Parser, Debug)]
#[command(
    name = "metacap",
    version,
    about = "Meta-learned implicit human capture",
    propagate_version = true
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct GlobalOpts {
    /// Override the seed in every config section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: METACAP_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Serial reductions and a single worker: byte-identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic capture dataset.
    Synth {
        /// Output dataset directory (must not exist).
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check every dataset invariant and report violations.
    Validate { dataset: PathBuf },
    /// Meta-train field weights over all frames of a dataset.
    MetaTrain {
        dataset: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-outer-step CSV log (default: checkpoint path with .csv).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Comma-separated camera indices to train on.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long)]
        outer_steps: Option<usize>,
    },
    /// Conventional pretraining: meta-training with one inner step.
    Pretrain {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long)]
        outer_steps: Option<usize>,
    },
    /// Fine-tune a checkpoint on one frame of a dataset.
    Finetune {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Frame index to fit.
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Comma-separated camera indices to supervise with.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
        /// Add virtual rays for regions no input view sees.
        #[arg(long)]
        occlusion_handling: bool,
        /// Initialization: "checkpoint" (default) or "random".
        #[arg(long, default_value = "checkpoint")]
        init: InitKind,
    },
    /// Render dataset views (or novel motion) from a checkpoint.
    Render {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        frame: usize,
        /// Render a single camera index instead of all.
        #[arg(long)]
        camera: Option<usize>,
        /// Motion file overriding the dataset's poses.
        #[arg(long)]
        motion: Option<PathBuf>,
        /// Output directory for PNG images and masks.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Extract the zero surface as an OBJ mesh.
    Extract {
        checkpoint: PathBuf,
        /// Marching-cubes grid resolution.
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        /// Dataset supplying the template (required with --frame).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Pose the surface into this frame instead of canonical space.
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render and compare against ground truth; one CSV row per camera.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        /// Marching-cubes resolution for the predicted mesh.
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        /// Surface sample count for Chamfer and normal metrics.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Metrics CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Interpolate two checkpoints in weight space.
    Lerp {
        a: PathBuf,
        b: PathBuf,
        /// Interpolation parameter in [0, 1]; 0 gives A, 1 gives B.
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, clap::ValueEnum)]
enum InitKind {
    Checkpoint,
    Random,
}

/// Entry point for the binary: parses `std::env::args`, runs, maps errors
/// to the exit-code contract (0 ok, 2 usage, 3 data, 4 numerical).
pub fn main() -> i32 {
    match run_from(std::env::args_os()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses and runs a full command line (first element is the program name).
/// Help and version requests print and return Ok.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::usage(e.to_string())),
    };
    let threads = if cli.global.deterministic {
        1
    } else {
        resolve_threads(cli.global.threads)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::usage(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.cmd, &cli.global, threads))
}

fn dispatch(cmd: Cmd, global: &GlobalOpts, threads: usize) -> Result<()> {
    match cmd {
        Cmd::Synth { out, config } => cmd_synth(&out, config.as_deref(), global),
        Cmd::Validate { dataset } => cmd_validate(&dataset),
        Cmd::MetaTrain {
            dataset,
            out,
            config,
            log,
            views,
            outer_steps,
        } => cmd_meta_train(
            &dataset,
            &out,
            config.as_deref(),
            log.as_deref(),
            views.as_deref(),
            outer_steps,
            global,
            threads,
            false,
        ),
        Cmd::Pretrain {
            dataset,
            out,
            config,
            log,
            views,
            outer_steps,
        } => cmd_meta_train(
            &dataset,
            &out,
            config.as_deref(),
            log.as_deref(),
            views.as_deref(),
            outer_steps,
            global,
            threads,
            true,
        ),
        Cmd::Finetune {
            checkpoint,
            dataset,
            frame,
            out,
            config,
            log,
            views,
            steps,
            occlusion_handling,
            init,
        } => cmd_finetune(
            &checkpoint,
            &dataset,
            frame,
            &out,
            config.as_deref(),
            log.as_deref(),
            views.as_deref(),
            steps,
            occlusion_handling,
            init,
            global,
            threads,
        ),
        Cmd::Render {
            checkpoint,
            dataset,
            frame,
            camera,
            motion,
            out,
            config,
        } => cmd_render(
            &checkpoint,
            &dataset,
            frame,
            camera,
            motion.as_deref(),
            &out,
            config.as_deref(),
            global,
        ),
        Cmd::Extract {
            checkpoint,
            resolution,
            dataset,
            frame,
            out,
        } => cmd_extract(&checkpoint, resolution, dataset.as_deref(), frame, &out),
        Cmd::Eval {
            checkpoint,
            dataset,
            frame,
            views,
            resolution,
            samples,
            out,
            config,
        } => cmd_eval(
            &checkpoint,
            &dataset,
            frame,
            views.as_deref(),
            resolution,
            samples,
            out.as_deref(),
            config.as_deref(),
            global,
        ),
        Cmd::Lerp { a, b, t, out } => cmd_lerp(&a, &b, t, &out),
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::default()),
    }
}

/// Canonical-space field domain: the template's bounds with margin for the
/// distance threshold band and canonicalization error.
pub fn canonical_domain(template: &TemplateMesh) -> Aabb {
    let bb = template.mesh.aabb();
    let d = crate::linalg::dist(bb.lo, bb.hi);
    bb.dilate(0.1 * d)
}

fn cmd_synth(out: &Path, config: Option<&Path>, global: &GlobalOpts) -> Result<()> {
    let cfg = read_config(config)?;
    let mut spec = cfg.scene();
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }
    make_dataset(&AnalyticBody::desk_body(), &spec, out)?;
    println!(
        "wrote dataset {} ({} cameras, {} frames, {}x{})",
        out.display(),
        spec.cameras,
        spec.frames,
        spec.width,
        spec.height
    );
    Ok(())
}

fn cmd_validate(dataset: &Path) -> Result<()> {
    let violations = validate_dataset(dataset)?;
    if violations.is_empty() {
        println!("dataset {} is clean", dataset.display());
        Ok(())
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        Err(Error::data(format!(
            "dataset {} has {} violation(s)",
            dataset.display(),
            violations.len()
        )))
    }
}

fn open_log(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("log {}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(file))
}

#[allow(clippy::too_many_arguments)]
fn cmd_meta_train(
    dataset: &Path,
    out: &Path,
    config: Option<&Path>,
    log: Option<&Path>,
    views: Option<&[usize]>,
    outer_steps: Option<usize>,
    global: &GlobalOpts,
    threads: usize,
    pretrain: bool,
) -> Result<()> {
    let run = read_config(config)?;
    let ds = CaptureDataset::open(dataset)?;
    let mut cfg = run.meta();
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(n) = outer_steps {
        cfg.outer_steps = n;
    }
    if pretrain {
        cfg.inner_steps = 1;
    }
    let field_cfg = run.field().resolve(canonical_domain(&ds.template))?;
    let prog = FieldProgram::new(field_cfg.clone())?;
    let init = init_weights(&field_cfg, cfg.seed);

    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("csv"));
    let mut logf = open_log(&log_path)?;
    if pretrain {
        writeln!(logf, "# pretrain: inner_steps = 1 (M = 1)")?;
    }
    writeln!(logf, "{}", crate::meta::MetaLogRow::csv_header())?;
    let phi = meta_train(&ds, &prog, init, &cfg, views, threads, |row| {
        let _ = writeln!(logf, "{}", row.csv_row());
    })?;
    logf.flush()?;
    save_checkpoint(out, &field_cfg, cfg.mode, &phi)?;
    println!(
        "wrote checkpoint {} ({} parameters), log {}",
        out.display(),
        phi.len(),
        log_path.display()
    );
    Ok(())
}

/// Names the first structural difference between two layouts.
fn layout_mismatch(expected: &ParamLayout, got: &ParamLayout) -> String {
    let a = expected.segments();
    let b = got.segments();
    for (x, y) in a.iter().zip(b) {
        if x.name != y.name || x.len != y.len {
            return format!(
                "segment {:?} ({} values) vs {:?} ({} values)",
                x.name, x.len, y.name, y.len
            );
        }
    }
    format!("{} vs {} segments", a.len(), b.len())
}

fn load_checked(path: &Path) -> Result<(Checkpoint, FieldProgram)> {
    let ckpt = load_checkpoint(path)?;
    let prog = FieldProgram::new(ckpt.field.clone())?;
    if !prog.layout.same_shape(&ckpt.params.layout) {
        return Err(Error::data(format!(
            "checkpoint {}: weights do not match its field config: {}",
            path.display(),
            layout_mismatch(&prog.layout, &ckpt.params.layout)
        )));
    }
    Ok((ckpt, prog))
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    checkpoint: &Path,
    dataset: &Path,
    frame: usize,
    out: &Path,
    config: Option<&Path>,
    log: Option<&Path>,
    views: Option<&[usize]>,
    steps: Option<usize>,
    occlusion: bool,
    init: InitKind,
    global: &GlobalOpts,
    threads: usize,
) -> Result<()> {
    let run = read_config(config)?;
    let (ckpt, prog) = load_checked(checkpoint)?;
    let ds = CaptureDataset::open(dataset)?;
    if frame >= ds.n_frames() {
        return Err(Error::usage(format!(
            "frame {frame} out of range (dataset has {})",
            ds.n_frames()
        )));
    }
    let mut cfg = run.finetune();
    cfg.mode = ckpt.mode;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(n) = steps {
        cfg.steps = n;
    }
    if occlusion {
        cfg.occlusion = true;
    }
    let start = match init {
        InitKind::Checkpoint => ckpt.params.clone(),
        InitKind::Random => init_weights(&ckpt.field, cfg.seed),
    };

    let mut source = TaskSource::build(&ds, views, false)?;
    source.frames = vec![source.frames.swap_remove(frame)];

    let proxy = if cfg.occlusion {
        let cam = &ds.cameras[0];
        let render = RenderConfig {
            mode: ckpt.mode,
            background: cfg.background,
            seed: cfg.seed,
            ..run.render()
        };
        Some(build_proxy_set(
            &prog,
            &ckpt.params,
            &ds.template,
            PROXY_CAMERAS,
            cam.width,
            cam.height,
            PROXY_VFOV_DEG,
            &render,
        )?)
    } else {
        None
    };

    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("csv"));
    let mut logf = open_log(&log_path)?;
    writeln!(logf, "{}", FinetuneLogRow::csv_header())?;
    let phi = finetune(&source, &prog, start, &cfg, proxy.as_ref(), threads, |row| {
        let _ = writeln!(logf, "{}", row.csv_row());
    })?;
    logf.flush()?;
    save_checkpoint(out, &ckpt.field, ckpt.mode, &phi)?;
    println!(
        "wrote checkpoint {} (frame {frame}, {} steps), log {}",
        out.display(),
        cfg.steps,
        log_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    checkpoint: &Path,
    dataset: &Path,
    frame: usize,
    camera: Option<usize>,
    motion: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    global: &GlobalOpts,
) -> Result<()> {
    let run = read_config(config)?;
    let (ckpt, prog) = load_checked(checkpoint)?;
    let ds = CaptureDataset::open(dataset)?;
    let pose = match motion {
        Some(path) => {
            let m: SkeletalMotion = crate::dataset::read_json(path)?;
            let pose = m.frames.get(frame).cloned().ok_or_else(|| {
                Error::usage(format!(
                    "frame {frame} out of range in motion file {} ({} frames)",
                    path.display(),
                    m.frames.len()
                ))
            })?;
            pose.validate(&ds.template.skeleton)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            pose
        }
        None => ds.pose(frame)?.clone(),
    };
    let posed = pose_template(&ds.template, &pose)?;
    let mut render = run.render();
    render.mode = ckpt.mode;
    if let Some(seed) = global.seed {
        render.seed = seed;
    }
    let cams: Vec<usize> = match camera {
        Some(c) => {
            if c >= ds.n_cameras() {
                return Err(Error::usage(format!(
                    "camera {c} out of range (dataset has {})",
                    ds.n_cameras()
                )));
            }
            vec![c]
        }
        None => (0..ds.n_cameras()).collect(),
    };
    std::fs::create_dir_all(out)?;
    for c in cams {
        let (img, mask) = render_image(&prog, &ckpt.params, &ds.cameras[c], &posed, &render)?;
        let id = &ds.camera_ids[c];
        img.save_png(&out.join(format!("f{frame:04}_{id}.png")))?;
        mask.save_png(&out.join(format!("f{frame:04}_{id}_mask.png")))?;
        println!("rendered f{frame:04}_{id}.png");
    }
    Ok(())
}

fn cmd_extract(
    checkpoint: &Path,
    resolution: usize,
    dataset: Option<&Path>,
    frame: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (ckpt, prog) = load_checked(checkpoint)?;
    let loaded;
    let posed;
    let warp = match (dataset, frame) {
        (Some(root), Some(f)) => {
            loaded = CaptureDataset::open(root)?;
            posed = pose_template(&loaded.template, loaded.pose(f)?)?;
            Some((&loaded.template, &posed, ckpt.mode))
        }
        (_, None) => None,
        (None, Some(_)) => {
            return Err(Error::usage("--frame needs --dataset for the template"));
        }
    };
    let mesh = extract_mesh(&prog, &ckpt.params, resolution, warp)?;
    if mesh.vertices.is_empty() {
        eprintln!("warning: surface is empty at resolution {resolution}");
    }
    mesh.write_obj(out)?;
    println!(
        "wrote {} ({} vertices, {} faces)",
        out.display(),
        mesh.vertices.len(),
        mesh.faces.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    frame: usize,
    views: Option<&[usize]>,
    resolution: usize,
    samples: usize,
    out: Option<&Path>,
    config: Option<&Path>,
    global: &GlobalOpts,
) -> Result<()> {
    let run = read_config(config)?;
    let (ckpt, prog) = load_checked(checkpoint)?;
    let ds = CaptureDataset::open(dataset)?;
    if frame >= ds.n_frames() {
        return Err(Error::usage(format!(
            "frame {frame} out of range (dataset has {})",
            ds.n_frames()
        )));
    }
    if !ds.has_gt_mesh(frame) {
        return Err(Error::data(format!(
            "missing ground truth: {}",
            ds.gt_mesh_path(frame).display()
        )));
    }
    let cams: Vec<usize> = match views {
        Some(v) => {
            for &c in v {
                if c >= ds.n_cameras() {
                    return Err(Error::usage(format!(
                        "camera {c} out of range (dataset has {})",
                        ds.n_cameras()
                    )));
                }
            }
            v.to_vec()
        }
        None => (0..ds.n_cameras()).collect(),
    };

    let mut render = run.render();
    render.mode = ckpt.mode;
    let seed = global.seed.unwrap_or(render.seed);
    render.seed = seed;

    let posed = pose_template(&ds.template, ds.pose(frame)?)?;
    let pred_mesh = extract_mesh(
        &prog,
        &ckpt.params,
        resolution,
        Some((&ds.template, &posed, ckpt.mode)),
    )?;
    let gt_mesh = ds.load_gt_mesh(frame)?;

    // Geometry metrics are per frame; fall back to NaN (with a warning)
    // when a metric's preconditions fail, e.g. an empty or open surface.
    let (chamfer, p2s) = match chamfer_p2s(&pred_mesh, &gt_mesh, samples, seed) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("warning: chamfer unavailable: {e}");
            (f64::NAN, f64::NAN)
        }
    };
    let iou = match iou_voxel(&pred_mesh, &gt_mesh, IOU_RESOLUTION, None) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("warning: iou unavailable: {e}");
            f64::NAN
        }
    };
    let (nc_cos, nc_l2) = match normal_consistency(&pred_mesh, &gt_mesh, samples, seed) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("warning: normal consistency unavailable: {e}");
            (f64::NAN, f64::NAN)
        }
    };

    let mut lines = Vec::new();
    lines.push(format!(
        "frame,camera,{}",
        crate::evalgeo::MetricReport::csv_header()
    ));
    for c in cams {
        let (pred, pred_mask) =
            render_image(&prog, &ckpt.params, &ds.cameras[c], &posed, &render)?;
        // Compare at PNG precision: the ground truth went through an 8-bit
        // file, so the prediction is held to the same quantization.
        let (pred, pred_mask) = (pred.quantized(), pred_mask.quantized());
        let gt = ds.load_image(frame, c)?;
        let gt_mask = ds.load_mask(frame, c)?;
        let (psnr, ssim) = image_metrics(&pred, &gt, Some((&pred_mask, &gt_mask)))?;
        let report = crate::evalgeo::MetricReport {
            psnr,
            ssim,
            chamfer,
            p2s,
            iou,
            nc_cos,
            nc_l2,
        };
        lines.push(format!("{frame},{},{}", ds.camera_ids[c], report.csv_row()));
    }
    let text = lines.join("\n") + "\n";
    match out {
        Some(path) => {
            std::fs::write(path, &text)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_lerp(a: &Path, b: &Path, t: f64, out: &Path) -> Result<()> {
    let (ckpt_a, _) = load_checked(a)?;
    let (ckpt_b, _) = load_checked(b)?;
    if ckpt_a.field != ckpt_b.field {
        return Err(Error::data(
            "checkpoints have different field configurations",
        ));
    }
    if ckpt_a.mode != ckpt_b.mode {
        return Err(Error::data(
            "checkpoints use different canonicalization modes",
        ));
    }
    let mixed = lerp_weights(&ckpt_a.params, &ckpt_b.params, t)?;
    save_checkpoint(out, &ckpt_a.field, ckpt_a.mode, &mixed)?;
    println!("wrote {} (t = {t})", out.display());
    Ok(())
}

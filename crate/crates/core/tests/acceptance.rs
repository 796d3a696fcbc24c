//! End-to-end acceptance checks. Each test covers one criterion and prints
//! a single `A<n> PASS|FAIL: ...` line with the measured numbers (visible
//! with `--nocapture`). The meta-trained prior and the novel-pose
//! fine-tuning results are computed once and shared across criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use metacap::adapt::{build_proxy_set, finetune, FinetuneConfig};
use metacap::checkpoint::{decode_checkpoint, encode_checkpoint};
use metacap::cli::{canonical_domain, run_from};
use metacap::dataset::CaptureDataset;
use metacap::difftape::{finite_diff_check, ParamVector, TapeBuffers};
use metacap::evalgeo::{chamfer_p2s, extract_mesh, image_metrics, iou_voxel, normal_consistency};
use metacap::field::{init_weights, sdf_to_alpha, FieldConfig, FieldProgram};
use metacap::linalg::{add, dist, dot, norm, normalize, scale, sub, V3};
use metacap::mesh::{Bvh, TriMesh};
use metacap::meta::{build_ray_items, meta_train, outer_step, MetaConfig, TaskSource};
use metacap::renderer::{
    build_loss_graph, render_image, render_ray, Image, LossNorm, LossWeights, Ray, RenderConfig,
    Sample, SampleSet, HUBER_DELTA,
};
use metacap::rng::stream;
use metacap::synth::{body_template, make_dataset, AnalyticBody, SceneSpec};
use metacap::template::{
    pose_template, warp_from_canonical, warp_to_canonical, CanoMode, Pose,
};

fn report(id: &str, pass: bool, detail: &str) {
    println!("{id} {}: {detail}", if pass { "PASS" } else { "FAIL" });
}

/// Views used to fine-tune on the unseen pose and the held-out views the
/// result is scored on.
const TUNE_VIEWS: [usize; 4] = [0, 2, 4, 6];
const EVAL_VIEWS: [usize; 4] = [1, 3, 5, 7];
const SEEDS: [u64; 3] = [0, 1, 2];

fn meta_cfg(mode: CanoMode) -> MetaConfig {
    MetaConfig {
        rays_per_step: 512,
        mode,
        ..MetaConfig::default()
    }
}

fn tune_cfg(mode: CanoMode, seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        steps: 600,
        rays_per_step: 512,
        samples_per_ray: 32,
        mode,
        seed,
        ..FinetuneConfig::default()
    }
}

/// The default capture (8 cameras, 12 poses, 64x64), a one-frame capture of
/// an unseen pose, and the meta-trained prior over the training poses.
struct Shared {
    _dir: tempfile::TempDir,
    train: CaptureDataset,
    novel: CaptureDataset,
    field: FieldConfig,
    prog: FieldProgram,
    phi: ParamVector,
    meta_secs: f64,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let body = AnalyticBody::desk_body();
        let train_root = dir.path().join("train");
        let novel_root = dir.path().join("novel");
        make_dataset(&body, &SceneSpec::default(), &train_root).unwrap();
        make_dataset(
            &body,
            &SceneSpec {
                frames: 1,
                seed: 11,
                ..SceneSpec::default()
            },
            &novel_root,
        )
        .unwrap();
        let train = CaptureDataset::open(&train_root).unwrap();
        let novel = CaptureDataset::open(&novel_root).unwrap();
        let field = FieldConfig::desk_default(canonical_domain(&train.template));
        let prog = FieldProgram::new(field.clone()).unwrap();
        let t0 = Instant::now();
        let phi = meta_train(
            &train,
            &prog,
            init_weights(&field, 0),
            &meta_cfg(CanoMode::Template),
            None,
            1,
            |_| {},
        )
        .unwrap();
        Shared {
            _dir: dir,
            train,
            novel,
            field,
            prog,
            phi,
            meta_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

/// Per-seed novel-pose fine-tuning from the meta prior and from random
/// init, scored by mean PSNR on the held-out views.
struct Adapted {
    psnr_meta: Vec<f64>,
    psnr_rand: Vec<f64>,
    ft_meta: Vec<ParamVector>,
    secs: f64,
}

fn adapted() -> &'static Adapted {
    static CELL: OnceLock<Adapted> = OnceLock::new();
    CELL.get_or_init(|| {
        let sh = shared();
        let t0 = Instant::now();
        let source = TaskSource::build(&sh.novel, Some(&TUNE_VIEWS), false).unwrap();
        let mut out = Adapted {
            psnr_meta: Vec::new(),
            psnr_rand: Vec::new(),
            ft_meta: Vec::new(),
            secs: 0.0,
        };
        for &seed in &SEEDS {
            let cfg = tune_cfg(CanoMode::Template, seed);
            let ft_m = finetune(&source, &sh.prog, sh.phi.clone(), &cfg, None, 1, |_| {}).unwrap();
            let ft_r = finetune(
                &source,
                &sh.prog,
                init_weights(&sh.field, 1000 + seed),
                &cfg,
                None,
                1,
                |_| {},
            )
            .unwrap();
            out.psnr_meta
                .push(mean_psnr(&sh.prog, &ft_m, &sh.novel, &EVAL_VIEWS));
            out.psnr_rand
                .push(mean_psnr(&sh.prog, &ft_r, &sh.novel, &EVAL_VIEWS));
            out.ft_meta.push(ft_m);
        }
        out.secs = t0.elapsed().as_secs_f64();
        out
    })
}

fn mean_psnr(prog: &FieldProgram, params: &ParamVector, ds: &CaptureDataset, views: &[usize]) -> f64 {
    let posed = pose_template(&ds.template, ds.pose(0).unwrap()).unwrap();
    let cfg = RenderConfig::default();
    let mut acc = 0.0;
    for &v in views {
        let (img, _) = render_image(prog, params, &ds.cameras[v], &posed, &cfg).unwrap();
        let gt = ds.load_image(0, v).unwrap();
        acc += image_metrics(&img, &gt, None).unwrap().0;
    }
    acc / views.len() as f64
}

fn warped_mesh(
    prog: &FieldProgram,
    params: &ParamVector,
    ds: &CaptureDataset,
    frame: usize,
    mode: CanoMode,
    resolution: usize,
) -> Option<TriMesh> {
    let posed = pose_template(&ds.template, ds.pose(frame).unwrap()).unwrap();
    let mesh = extract_mesh(prog, params, resolution, Some((&ds.template, &posed, mode))).ok()?;
    if mesh.faces.is_empty() {
        None
    } else {
        Some(mesh)
    }
}

fn chamfer_cm(pred: Option<&TriMesh>, gt: &TriMesh) -> f64 {
    match pred {
        Some(m) => chamfer_p2s(m, gt, 30_000, 0).map(|(c, _)| c).unwrap_or(f64::INFINITY),
        None => f64::INFINITY,
    }
}

fn join3(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.2}"))
        .collect::<Vec<_>>()
        .join("/")
}

#[test]
fn a1_loss_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let template = body_template(&AnalyticBody::desk_body()).unwrap();
    let posed = pose_template(&template, &template.canonical_pose).unwrap();
    let mut cfg = FieldConfig::desk_default(canonical_domain(&template));
    cfg.grid.levels = 4;
    cfg.grid.table_size = 1 << 12;
    let prog = FieldProgram::new(cfg.clone()).unwrap();
    let params = init_weights(&cfg, 3);

    let rays = vec![
        Ray {
            origin: [0.0, 1.0, 2.5],
            dir: normalize(sub([0.0, 1.0, 0.0], [0.0, 1.0, 2.5])),
            pixel: (0, 0),
            gt_color: [0.7, 0.4, 0.2],
            gt_mask: 1.0,
        },
        Ray {
            origin: [0.4, 1.2, 2.5],
            dir: normalize(sub([0.15, 0.6, 0.05], [0.4, 1.2, 2.5])),
            pixel: (1, 0),
            gt_color: [0.2, 0.5, 0.8],
            gt_mask: 1.0,
        },
    ];
    let items = build_ray_items(&rays, &posed, CanoMode::Template, 8, 0.35, 0).unwrap();
    let valid: usize = items
        .iter()
        .map(|it| match it {
            metacap::renderer::LossItem::Ray(r) => r.samples.valid_count(),
            _ => 0,
        })
        .sum();
    let weights = LossWeights::default();
    let norm_c = LossNorm::for_items(&items);
    let mut rng = stream(42, "a1-idx");
    let indices: Vec<usize> = (0..200).map(|_| rng.gen_range(0..params.len())).collect();
    let rep = finite_diff_check(&params, &indices, 1e-4, |t| {
        build_loss_graph(&prog, t, &items, &weights, HUBER_DELTA, [0.0; 3], &norm_c).0
    })
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let ok = rep.max_rel_err <= 1e-3 && valid >= 4 && secs < 60.0;
    let detail = format!(
        "max relative gradient error {:.3e} over 200 params (worst index {}, {} valid samples, {:.1}s)",
        rep.max_rel_err, rep.worst_index, valid, secs
    );
    report("A1", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn a2_compositing_matches_explicit_transmittance() {
    let t0 = Instant::now();
    let template = body_template(&AnalyticBody::desk_body()).unwrap();
    let mut cfg = FieldConfig::desk_default(canonical_domain(&template));
    cfg.grid.levels = 4;
    cfg.grid.table_size = 1 << 12;
    let prog = FieldProgram::new(cfg.clone()).unwrap();
    let params = init_weights(&cfg, 9);
    let dom = cfg.grid.domain;
    let k = prog.sharpness_value(&params);
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());

    let mut rng = stream(7, "a2-sets");
    let mut buf_render = TapeBuffers::new();
    let mut buf_eval = TapeBuffers::new();
    let mut max_comp = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(0..10);
        let mut samples = Vec::with_capacity(n);
        let mut t_depth = 0.1;
        for _ in 0..n {
            t_depth += rng.gen_range(0.01..0.4);
            let p = [
                dom.lo[0] + (dom.hi[0] - dom.lo[0]) * rng.gen::<f64>(),
                dom.lo[1] + (dom.hi[1] - dom.lo[1]) * rng.gen::<f64>(),
                dom.lo[2] + (dom.hi[2] - dom.lo[2]) * rng.gen::<f64>(),
            ];
            let d = normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0f64) + 1e-3,
            ]);
            samples.push(Sample {
                t: t_depth,
                world: p,
                canonical: p,
                canonical_dir: d,
                template_dist: 0.0,
                valid: rng.gen_bool(0.85),
            });
        }
        let set = SampleSet { samples };
        let (rc, rm) = render_ray(&prog, &mut buf_render, &params, &set).unwrap();

        // Explicit transmittance products and weighted sums over the same
        // per-sample field values.
        let picked: Vec<&Sample> = set.samples.iter().filter(|s| s.valid).collect();
        let mut svals = Vec::new();
        let mut cols = Vec::new();
        for s in &picked {
            let mut t = buf_eval.tape(&params);
            let g = prog.geometry(&mut t, s.canonical);
            let c = prog.color(&mut t, &g, s.canonical_dir);
            svals.push(t.scalar_value(g.sdf));
            let cv = t.value(c);
            cols.push([cv[0], cv[1], cv[2]]);
        }
        let (mut bc, mut bm) = ([0.0f64; 3], 0.0f64);
        if picked.len() >= 2 {
            let alpha = |i: usize| -> f64 {
                ((sig(k * svals[i]) - sig(k * svals[i + 1])) / sig(k * svals[i])).max(0.0)
            };
            for i in 0..picked.len() - 1 {
                let mut t_i = 1.0;
                for j in 0..i {
                    t_i *= 1.0 - alpha(j);
                }
                let w = t_i * alpha(i);
                for a in 0..3 {
                    bc[a] += w * cols[i][a];
                }
                bm += w;
            }
        }
        for a in 0..3 {
            max_comp = max_comp.max((rc[a] - bc[a]).abs());
        }
        max_comp = max_comp.max((rm - bm).abs());
    }

    // The transfer function itself against direct logistic-CDF arithmetic.
    let mut max_alpha = 0.0f64;
    let mut rng = stream(8, "a2-alpha");
    for _ in 0..1000 {
        let s1 = rng.gen_range(-2.0..2.0);
        let s2 = rng.gen_range(-2.0..2.0);
        let kk = rng.gen_range(5.0..60.0);
        let direct = ((sig(kk * s1) - sig(kk * s2)) / sig(kk * s1)).max(0.0);
        max_alpha = max_alpha.max((sdf_to_alpha(s1, s2, kk) - direct).abs());
    }
    let secs = t0.elapsed().as_secs_f64();

    let ok = max_comp <= 1e-12 && max_alpha <= 1e-12;
    let detail = format!(
        "max compositing deviation {max_comp:.3e}, max opacity deviation {max_alpha:.3e} over 1000 sets ({secs:.1}s)"
    );
    report("A2", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn a3_meta_initialization_beats_random() {
    let sh = shared();
    let ad = adapted();
    let secs = sh.meta_secs + ad.secs;
    let margins: Vec<f64> = ad
        .psnr_meta
        .iter()
        .zip(&ad.psnr_rand)
        .map(|(m, r)| m - r)
        .collect();
    let ok_margin = margins.iter().all(|m| *m >= 1.0);
    let ok_time = secs < 45.0 * 60.0;
    let detail = format!(
        "held-out psnr from prior {} dB vs random {} dB, margins {} dB across seeds ({:.0}s)",
        join3(&ad.psnr_meta),
        join3(&ad.psnr_rand),
        join3(&margins),
        secs
    );
    report("A3", ok_margin && ok_time, &detail);
    assert!(ok_margin && ok_time, "{detail}");
}

#[test]
fn a4_template_canonicalization_beats_root_only() {
    let sh = shared();
    let ad = adapted();
    let t0 = Instant::now();
    let phi_root = meta_train(
        &sh.train,
        &sh.prog,
        init_weights(&sh.field, 0),
        &meta_cfg(CanoMode::RootOnly),
        None,
        1,
        |_| {},
    )
    .unwrap();
    let source = TaskSource::build(&sh.novel, Some(&TUNE_VIEWS), false).unwrap();
    let gt = sh.novel.load_gt_mesh(0).unwrap();
    let mut cham_tpl = Vec::new();
    let mut cham_root = Vec::new();
    for (i, &seed) in SEEDS.iter().enumerate() {
        let ft_root = finetune(
            &source,
            &sh.prog,
            phi_root.clone(),
            &tune_cfg(CanoMode::RootOnly, seed),
            None,
            1,
            |_| {},
        )
        .unwrap();
        let m_root = warped_mesh(&sh.prog, &ft_root, &sh.novel, 0, CanoMode::RootOnly, 96);
        let m_tpl = warped_mesh(&sh.prog, &ad.ft_meta[i], &sh.novel, 0, CanoMode::Template, 96);
        cham_root.push(chamfer_cm(m_root.as_ref(), &gt));
        cham_tpl.push(chamfer_cm(m_tpl.as_ref(), &gt));
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = cham_tpl
        .iter()
        .zip(&cham_root)
        .all(|(t, r)| t.is_finite() && r > t);
    let detail = format!(
        "novel-pose chamfer: template {} cm vs root-only {} cm across seeds ({:.0}s)",
        join3(&cham_tpl),
        join3(&cham_root),
        secs
    );
    report("A4", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn a5_dense_fit_recovers_accurate_geometry() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("dense");
    make_dataset(
        &AnalyticBody::desk_body(),
        &SceneSpec {
            cameras: 16,
            frames: 1,
            seed: 3,
            ..SceneSpec::default()
        },
        &root,
    )
    .unwrap();
    let ds = CaptureDataset::open(&root).unwrap();
    let field = FieldConfig::desk_default(canonical_domain(&ds.template));
    let prog = FieldProgram::new(field.clone()).unwrap();
    let cfg = FinetuneConfig {
        steps: 2000,
        rays_per_step: 1024,
        samples_per_ray: 32,
        lr: 1e-3,
        mode: CanoMode::Template,
        seed: 0,
        ..FinetuneConfig::default()
    };
    let source = TaskSource::build(&ds, None, false).unwrap();
    let fit = finetune(&source, &prog, init_weights(&field, 7), &cfg, None, 1, |_| {}).unwrap();

    let posed = pose_template(&ds.template, ds.pose(0).unwrap()).unwrap();
    let gt = ds.load_gt_mesh(0).unwrap();
    let pred = extract_mesh(&prog, &fit, 128, Some((&ds.template, &posed, CanoMode::Template)))
        .unwrap();
    let (cham, _) = chamfer_p2s(&pred, &gt, 50_000, 0).unwrap();
    let iou = iou_voxel(&pred, &gt, 64, None).unwrap_or(0.0);

    // Eikonal residual of the canonical field near the surface.
    let mut rng = stream(4, "a5-eik");
    let pts = gt.sample_surface(2000, &mut rng);
    let mut buf = TapeBuffers::new();
    let mut acc = 0.0;
    for (p, _) in &pts {
        let (q, _) = warp_to_canonical(&posed, *p).unwrap();
        let mut t = buf.tape(&fit);
        let g = prog.geometry(&mut t, q);
        let nv = t.value(g.normal);
        acc += (norm([nv[0], nv[1], nv[2]]) - 1.0).abs();
    }
    let eik = acc / pts.len() as f64;
    let secs = t0.elapsed().as_secs_f64();

    let ok = cham <= 1.0 && iou >= 0.9 && eik <= 0.05;
    let detail = format!(
        "16-view fit: chamfer {cham:.3} cm (<= 1.0), iou {iou:.3} (>= 0.9), eikonal residual {eik:.3} (<= 0.05) ({secs:.0}s)"
    );
    report("A5", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn a6_occlusion_handling_protects_hidden_surfaces() {
    let sh = shared();
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("mono");
    make_dataset(
        &AnalyticBody::desk_body(),
        &SceneSpec {
            cameras: 1,
            frames: 1,
            seed: 5,
            ..SceneSpec::default()
        },
        &root,
    )
    .unwrap();
    let ds = CaptureDataset::open(&root).unwrap();
    let source = TaskSource::build(&ds, None, false).unwrap();
    let proxy = build_proxy_set(
        &sh.prog,
        &sh.phi,
        &ds.template,
        32,
        64,
        64,
        70.0,
        &RenderConfig::default(),
    )
    .unwrap();
    let gt = ds.load_gt_mesh(0).unwrap();
    let cam_pos = ds.cameras[0].position();
    let center = gt.aabb().center();

    let mut p2s_on = Vec::new();
    let mut p2s_off = Vec::new();
    for &seed in &SEEDS {
        let mut cfg = tune_cfg(CanoMode::Template, seed);
        cfg.occlusion = true;
        let ft_on = finetune(&source, &sh.prog, sh.phi.clone(), &cfg, Some(&proxy), 1, |_| {})
            .unwrap();
        cfg.occlusion = false;
        let ft_off = finetune(&source, &sh.prog, sh.phi.clone(), &cfg, None, 1, |_| {}).unwrap();
        let m_on = warped_mesh(&sh.prog, &ft_on, &ds, 0, CanoMode::Template, 96);
        let m_off = warped_mesh(&sh.prog, &ft_off, &ds, 0, CanoMode::Template, 96);
        p2s_on.push(back_p2s(&gt, m_on.as_ref(), cam_pos, center));
        p2s_off.push(back_p2s(&gt, m_off.as_ref(), cam_pos, center));
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = p2s_on
        .iter()
        .zip(&p2s_off)
        .all(|(on, off)| on.is_finite() && on < off);
    let detail = format!(
        "monocular back-hemisphere p2s: occlusion on {} cm vs off {} cm across seeds ({:.0}s)",
        join3(&p2s_on),
        join3(&p2s_off),
        secs
    );
    report("A6", ok, &detail);
    assert!(ok, "{detail}");
}

/// Mean distance (cm) from ground-truth surface points facing away from the
/// camera to the predicted surface.
fn back_p2s(gt: &TriMesh, pred: Option<&TriMesh>, cam: V3, center: V3) -> f64 {
    let Some(pred) = pred else {
        return f64::INFINITY;
    };
    let to_cam = normalize(sub(cam, center));
    let mut rng = stream(8, "a6-back");
    let pts = gt.sample_surface(20_000, &mut rng);
    let bvh = Bvh::build(pred);
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, _) in pts {
        if dot(sub(p, center), to_cam) < 0.0 {
            acc += bvh.closest_point(pred, p).dist;
            n += 1;
        }
    }
    100.0 * acc / n.max(1) as f64
}

const TINY_CONFIG: &str = r#"
[scene]
cameras = 2
width = 32
height = 32
frames = 2
gt_mesh_resolution = 16

[field]
levels = 3
table_size = 1024
finest_resolution = 64
geo_width = 16
color_width = 16
latent = 7

[meta]
outer_steps = 2
inner_steps = 2
rays_per_step = 32
samples_per_ray = 8
warmup_steps = 2

[finetune]
steps = 2
rays_per_step = 32
samples_per_ray = 8

[render]
samples_per_ray = 12
"#;

fn run(args: &[&str]) {
    let mut full = vec!["metacap"];
    full.extend_from_slice(args);
    if let Err(e) = run_from(full) {
        panic!("command {args:?} failed: {e}");
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every command end to end in one directory and returns all produced
/// bytes keyed by relative path.
fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    fs::create_dir_all(root).unwrap();
    let cfg_path = root.join("run.toml");
    fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let cfg = cfg_path.to_str().unwrap().to_string();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    let ds = p("ds");

    run(&["synth", &ds, "--config", &cfg]);
    run(&["validate", &ds]);
    let meta = p("meta.mcap");
    run(&[
        "meta-train", &ds, "--out", &meta, "--config", &cfg, "--seed", "9", "--deterministic",
    ]);
    let pre = p("pre.mcap");
    run(&[
        "pretrain", &ds, "--out", &pre, "--config", &cfg, "--seed", "9", "--deterministic",
    ]);
    let ft = p("ft.mcap");
    run(&[
        "finetune", &meta, &ds, "--frame", "0", "--out", &ft, "--config", &cfg, "--seed", "4",
        "--deterministic",
    ]);
    let renders = p("renders");
    run(&[
        "render", &ft, &ds, "--frame", "0", "--out", &renders, "--config", &cfg,
        "--deterministic",
    ]);
    let obj = p("surface.obj");
    run(&[
        "extract", &ft, "--resolution", "20", "--dataset", &ds, "--frame", "0", "--out", &obj,
    ]);
    let csv = p("metrics.csv");
    run(&[
        "eval", &ft, &ds, "--frame", "0", "--resolution", "24", "--samples", "2000", "--out",
        &csv, "--config", &cfg, "--deterministic",
    ]);
    let mid = p("mid.mcap");
    run(&["lerp", &meta, &ft, "--t", "0.25", "--out", &mid]);
    tree_bytes(root)
}

#[test]
fn a7_algebraic_invariants_and_determinism() {
    let t0 = Instant::now();
    let mut fails: Vec<String> = Vec::new();

    // Warp round trips through the posed template.
    let template = body_template(&AnalyticBody::desk_body()).unwrap();
    let mut rng = stream(12, "a7");
    let mut pose = Pose::rest(template.skeleton.len());
    for th in pose.theta.iter_mut() {
        *th = [
            rng.gen_range(-0.35..0.35),
            rng.gen_range(-0.35..0.35),
            rng.gen_range(-0.35..0.35),
        ];
    }
    pose.root_rot = [0.15, -0.1, 0.2];
    pose.root_pos = [0.03, -0.01, 0.06];
    let posed = pose_template(&template, &pose).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let f = rng.gen_range(0..template.mesh.faces.len());
        let [a, b, c] = template.mesh.face_vertices(f);
        let (mut b1, mut b2) = (rng.gen::<f64>(), rng.gen::<f64>());
        if b1 + b2 > 1.0 {
            b1 = 1.0 - b1;
            b2 = 1.0 - b2;
        }
        let q = add(add(scale(a, 1.0 - b1 - b2), scale(b, b1)), scale(c, b2));
        let v0 = template.mesh.faces[f][0] as usize;
        let p = posed.transforms[v0].transform_point(q);
        let (q_back, _) = warp_to_canonical(&posed, p).unwrap();
        worst = worst.max(dist(q_back, q));
        let p_fwd = warp_from_canonical(&template, &posed, q, CanoMode::Template);
        worst = worst.max(dist(p_fwd, p));
    }
    if worst > 1e-9 {
        fails.push(format!("warp round trip drift {worst:.3e}"));
    }

    // Skinning at the rest pose reproduces the canonical vertices exactly.
    let rest = pose_template(&template, &Pose::rest(template.skeleton.len())).unwrap();
    let rest_exact = rest
        .mesh
        .vertices
        .iter()
        .zip(&template.mesh.vertices)
        .all(|(a, b)| a == b);
    if !rest_exact {
        fails.push("rest-pose skinning moved vertices".into());
    }

    // Outer update endpoints are bit-exact.
    let mut small = FieldConfig::desk_default(canonical_domain(&template));
    small.grid.levels = 2;
    small.grid.table_size = 256;
    small.geo_width = 8;
    small.color_width = 8;
    small.latent = 3;
    let phi0 = init_weights(&small, 1);
    let adapted_w = init_weights(&small, 2);
    let mut phi = phi0.clone();
    outer_step(&mut phi, &adapted_w, 0.0);
    let exact0 = phi
        .values
        .iter()
        .zip(&phi0.values)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    outer_step(&mut phi, &adapted_w, 1.0);
    let exact1 = phi
        .values
        .iter()
        .zip(&adapted_w.values)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !exact0 || !exact1 {
        fails.push("outer update endpoints are not exact".into());
    }

    // Checkpoint round trip is bit-exact.
    let bytes = encode_checkpoint(&small, CanoMode::Template, &phi0).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    let ck_exact = back.field == small
        && back.mode == CanoMode::Template
        && back
            .params
            .values
            .iter()
            .zip(&phi0.values)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if !ck_exact {
        fails.push("checkpoint round trip changed bits".into());
    }

    // Every seeded command is deterministic: two full pipelines in separate
    // directories produce byte-identical files.
    let dir = tempfile::tempdir().unwrap();
    let t1 = pipeline(&dir.path().join("one"));
    let t2 = pipeline(&dir.path().join("two"));
    if t1.len() != t2.len() {
        fails.push(format!("pipeline file counts differ: {} vs {}", t1.len(), t2.len()));
    } else {
        for ((na, ba), (nb, bb)) in t1.iter().zip(&t2) {
            if na != nb || ba != bb {
                fails.push(format!("pipeline output differs at {na}"));
                break;
            }
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    let ok = fails.is_empty() && secs < 300.0;
    let detail = if fails.is_empty() {
        format!(
            "warp round trip <= 1e-9 (worst {worst:.2e}), rest-pose skinning exact, outer-update endpoints exact, checkpoint bits exact, {} files reproduced byte-identically ({secs:.0}s)",
            t1.len()
        )
    } else {
        format!("{} ({secs:.0}s)", fails.join("; "))
    };
    report("A7", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn a8_metric_self_checks() {
    let t0 = Instant::now();
    let mut fails: Vec<String> = Vec::new();

    // A constant 0.1 offset is exactly 20 dB.
    let base = Image {
        width: 16,
        height: 16,
        pixels: vec![[0.3, 0.5, 0.7]; 256],
    };
    let off = Image {
        width: 16,
        height: 16,
        pixels: base.pixels.iter().map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]).collect(),
    };
    let (psnr_off, _) = image_metrics(&off, &base, None).unwrap();
    if (psnr_off - 20.0).abs() > 1e-9 {
        fails.push(format!("offset psnr {psnr_off} != 20"));
    }
    let (psnr_same, ssim_same) = image_metrics(&base, &base, None).unwrap();
    if psnr_same != 99.0 || ssim_same != 1.0 {
        fails.push(format!("identical images gave psnr {psnr_same}, ssim {ssim_same}"));
    }

    // Identical meshes: zero distances, full overlap, aligned normals.
    let sphere = TriMesh::uv_sphere([0.2, 1.0, -0.1], 0.3, 24, 32);
    let (cham_same, p2s_same) = chamfer_p2s(&sphere, &sphere, 20_000, 9).unwrap();
    if cham_same.abs() > 1e-9 || p2s_same.abs() > 1e-9 {
        fails.push(format!("self chamfer {cham_same:.3e}, p2s {p2s_same:.3e}"));
    }
    let iou_same = iou_voxel(&sphere, &sphere, 64, None).unwrap();
    if iou_same != 1.0 {
        fails.push(format!("self iou {iou_same}"));
    }
    let (nc_cos, nc_l2) = normal_consistency(&sphere, &sphere, 20_000, 9).unwrap();
    if nc_cos < 1.0 - 1e-9 || nc_l2 > 1e-9 {
        fails.push(format!("self normals cos {nc_cos}, l2 {nc_l2}"));
    }

    // Concentric spheres 1 cm apart.
    let inner = TriMesh::uv_sphere([0.0; 3], 0.10, 48, 64);
    let outer = TriMesh::uv_sphere([0.0; 3], 0.11, 48, 64);
    let (cham_cc, _) = chamfer_p2s(&inner, &outer, 50_000, 4).unwrap();
    if !(0.95..=1.05).contains(&cham_cc) {
        fails.push(format!("concentric chamfer {cham_cc:.4} cm outside 1.0 +/- 5%"));
    }

    let secs = t0.elapsed().as_secs_f64();
    let ok = fails.is_empty();
    let detail = if ok {
        format!(
            "offset psnr 20 dB exact, self metrics at their caps, concentric chamfer {cham_cc:.4} cm ({secs:.1}s)"
        )
    } else {
        format!("{} ({secs:.1}s)", fails.join("; "))
    };
    report("A8", ok, &detail);
    assert!(ok, "{detail}");
}

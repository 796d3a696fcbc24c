//! Sparse-view fine-tuning from meta-learned weights, occlusion handling
//! with canonical proxy renders and virtual rays, and weight-space
//! interpolation between fine-tuned results.
//!
//! Fine-tuning reuses the meta module's step function verbatim: with no
//! proxy and occlusion off it is exactly the inner objective run longer.

use rand::Rng;

use crate::difftape::ParamVector;
use crate::field::FieldProgram;
use crate::meta::{build_ray_items, loss_step, TaskSource};
use crate::renderer::{
    draw_training_rays, render_image, Camera, Image, LossItem, LossWeights, Mask, Ray,
    RenderConfig,
};
use crate::rng::stream_indexed;
use crate::template::{
    pose_template, vertex_visibility, CanoMode, PosedTemplate, TemplateMesh,
};
use crate::train::{Adam, AdamConfig, GradRunner};
use crate::{Error, Result};

/// Fine-tuning schedule and sampling knobs.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Adam steps; 0 returns the initial weights untouched.
    pub steps: usize,
    pub rays_per_step: usize,
    pub samples_per_ray: usize,
    pub lr: f64,
    /// Template distance threshold for valid samples.
    pub eta: f64,
    pub mode: CanoMode,
    /// Draw virtual rays from proxy renders for occluded regions.
    pub occlusion: bool,
    /// Fraction of each batch given to virtual rays when occlusion handling
    /// is active and occluded pixels exist.
    pub virtual_fraction: f64,
    /// Mask bounding-box dilation in pixels for foreground draws.
    pub bbox_dilate: u32,
    /// Fraction of real rays drawn uniformly over the whole image.
    pub background_fraction: f64,
    pub weights: LossWeights,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> FinetuneConfig {
        FinetuneConfig {
            steps: 3000,
            rays_per_step: 8192,
            samples_per_ray: 32,
            lr: 1e-4,
            eta: 0.05,
            mode: CanoMode::Template,
            occlusion: false,
            virtual_fraction: 0.25,
            bbox_dilate: 4,
            background_fraction: 0.1,
            weights: LossWeights::default(),
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_step < 1 {
            return Err(Error::data("finetune: rays_per_step must be at least 1"));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::data("finetune: samples_per_ray must be at least 2"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::data("finetune: lr must be positive"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::data("finetune: eta must be positive"));
        }
        if !(0.0..=1.0).contains(&self.virtual_fraction) {
            return Err(Error::data("finetune: virtual_fraction must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::data(
                "finetune: background_fraction must be in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Virtual cameras around the canonical body with proxy renders of a
/// canonical-space field, plus the canonical posed template the virtual
/// rays are sampled against.
pub struct ProxySet {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    /// The template posed at its canonical pose (identity posing).
    pub posed: PosedTemplate,
}

/// Deterministic Fibonacci-lattice directions; no point hits the poles, so
/// a y-up look-at never degenerates.
fn fibonacci_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), y, r * phi.sin()]
        })
        .collect()
}

/// Proxy camera positions: `n` points on a Fibonacci sphere of twice the
/// canonical template's bounding-sphere radius, all looking at its centroid.
pub fn proxy_cameras(
    posed: &PosedTemplate,
    n: usize,
    width: u32,
    height: u32,
    vfov_deg: f64,
) -> Vec<Camera> {
    let verts = &posed.mesh.vertices;
    let mut centroid = [0.0; 3];
    for v in verts {
        for a in 0..3 {
            centroid[a] += v[a];
        }
    }
    for c in centroid.iter_mut() {
        *c /= verts.len().max(1) as f64;
    }
    let bound = verts
        .iter()
        .map(|v| crate::linalg::dist(*v, centroid))
        .fold(0.0, f64::max);
    let radius = 2.0 * bound.max(1e-6);
    fibonacci_directions(n)
        .into_iter()
        .map(|d| {
            let pos = [
                centroid[0] + radius * d[0],
                centroid[1] + radius * d[1],
                centroid[2] + radius * d[2],
            ];
            Camera::look_at(pos, centroid, [0.0, 1.0, 0.0], width, height, vfov_deg)
        })
        .collect()
}

/// Renders proxy images and masks of the canonical field from `n` virtual
/// cameras around the canonical template.
pub fn build_proxy_set(
    prog: &FieldProgram,
    params: &ParamVector,
    template: &TemplateMesh,
    n: usize,
    width: u32,
    height: u32,
    vfov_deg: f64,
    render: &RenderConfig,
) -> Result<ProxySet> {
    if n < 1 {
        return Err(Error::usage("proxy set: need at least one camera"));
    }
    let posed = pose_template(template, &template.canonical_pose)?;
    let cameras = proxy_cameras(&posed, n, width, height, vfov_deg);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for cam in &cameras {
        let (img, mask) = render_image(prog, params, cam, &posed, render)?;
        images.push(img);
        masks.push(mask);
    }
    Ok(ProxySet {
        cameras,
        images,
        masks,
        posed,
    })
}

/// Proxy pixels available for virtual-ray draws: foreground pixels whose
/// nearest projected template vertex is invisible in every real view.
pub struct VirtualRaySource {
    /// (proxy view, x, y) triples.
    pub pixels: Vec<(usize, u32, u32)>,
}

/// Nearest projected vertex per pixel via a bucket grid over the image:
/// each vertex is binned by its projected pixel; per-pixel lookup scans
/// expanding rings of bins and keeps the exact nearest.
fn nearest_vertex_map(
    cam: &Camera,
    verts: &[crate::linalg::V3],
) -> Vec<Option<u32>> {
    let w = cam.width as usize;
    let h = cam.height as usize;
    let mut bins: Vec<Vec<(u32, f64, f64)>> = vec![Vec::new(); w * h];
    let mut any = false;
    for (i, v) in verts.iter().enumerate() {
        let Some((u, vv, depth)) = cam.project(*v) else {
            continue;
        };
        if depth <= 0.0 {
            continue;
        }
        let x = u.floor();
        let y = vv.floor();
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        bins[y as usize * w + x as usize].push((i as u32, u, vv));
        any = true;
    }
    if !any {
        return vec![None; w * h];
    }
    let mut out = vec![None; w * h];
    for py in 0..h {
        for px in 0..w {
            let cx = px as f64 + 0.5;
            let cy = py as f64 + 0.5;
            let mut best: Option<(f64, u32)> = None;
            let mut ring = 0usize;
            loop {
                // Scan the square ring at Chebyshev distance `ring`.
                let x0 = px as i64 - ring as i64;
                let x1 = px as i64 + ring as i64;
                let y0 = py as i64 - ring as i64;
                let y1 = py as i64 + ring as i64;
                let visit = |bx: i64, by: i64, best: &mut Option<(f64, u32)>| {
                    if bx < 0 || by < 0 || bx >= w as i64 || by >= h as i64 {
                        return;
                    }
                    for &(i, u, vv) in &bins[by as usize * w + bx as usize] {
                        let d2 = (u - cx) * (u - cx) + (vv - cy) * (vv - cy);
                        if best.map_or(true, |(bd, _)| d2 < bd) {
                            *best = Some((d2, i));
                        }
                    }
                };
                if ring == 0 {
                    visit(px as i64, py as i64, &mut best);
                } else {
                    for bx in x0..=x1 {
                        visit(bx, y0, &mut best);
                        visit(bx, y1, &mut best);
                    }
                    for by in y0 + 1..y1 {
                        visit(x0, by, &mut best);
                        visit(x1, by, &mut best);
                    }
                }
                if let Some((bd, _)) = best {
                    // A hit at ring r guarantees the true nearest lies within
                    // Chebyshev ring r + ceil(sqrt(bd)); one extra safe ring
                    // suffices once bd <= (ring)^2.
                    if bd.sqrt() <= ring as f64 {
                        break;
                    }
                }
                ring += 1;
                if ring > w + h {
                    break;
                }
            }
            out[py * w + px] = best.map(|(_, i)| i);
        }
    }
    out
}

impl VirtualRaySource {
    /// Collects occluded-region proxy pixels: inside the proxy mask, nearest
    /// projected template vertex invisible in all real views. An all-visible
    /// template yields an empty source.
    pub fn build(proxy: &ProxySet, visible: &[bool]) -> VirtualRaySource {
        let mut pixels = Vec::new();
        if visible.iter().all(|&v| v) {
            return VirtualRaySource { pixels };
        }
        for (k, cam) in proxy.cameras.iter().enumerate() {
            let nearest = nearest_vertex_map(cam, &proxy.posed.mesh.vertices);
            let mask = &proxy.masks[k];
            for py in 0..cam.height {
                for px in 0..cam.width {
                    if mask.get(px, py) <= 0.5 {
                        continue;
                    }
                    if let Some(v) = nearest[(py * cam.width + px) as usize] {
                        if !visible[v as usize] {
                            pixels.push((k, px, py));
                        }
                    }
                }
            }
        }
        VirtualRaySource { pixels }
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Draws `count` virtual rays (with replacement) from the occluded proxy
/// pixels, ground truth taken from the proxy render. Empty source draws
/// nothing.
pub fn occluded_ray_sampling(
    source: &VirtualRaySource,
    proxy: &ProxySet,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<Ray> {
    if source.pixels.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let (k, px, py) = source.pixels[rng.gen_range(0..source.pixels.len())];
            let mut ray = proxy.cameras[k].pixel_ray(px, py);
            ray.gt_color = proxy.images[k].get(px, py);
            ray.gt_mask = proxy.masks[k].get(px, py);
            ray
        })
        .collect()
}

/// One row of the fine-tuning log.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneLogRow {
    pub step: usize,
    pub total: f64,
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub sparse: f64,
    pub real_rays: usize,
    pub virtual_rays: usize,
}

impl FinetuneLogRow {
    pub fn csv_header() -> &'static str {
        "step,total,color,eikonal,mask,sparse,real_rays,virtual_rays"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{}",
            self.step,
            self.total,
            self.color,
            self.eikonal,
            self.mask,
            self.sparse,
            self.real_rays,
            self.virtual_rays
        )
    }
}

/// Per-step real-ray draw, shared by fine-tuning and its tests: rays are
/// split as evenly as possible across all (frame, view) pairs, each group
/// mixing dilated-box and whole-image draws, and each group records the
/// jitter seed for its sample sets.
pub fn draw_finetune_batch(
    source: &TaskSource,
    cfg: &FinetuneConfig,
    n_real: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, u64, Vec<Ray>)> {
    let pairs: Vec<usize> = source
        .frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| std::iter::repeat(f).take(fr.views.len()))
        .collect();
    let mut batches = Vec::new();
    let base = n_real / pairs.len();
    let rem = n_real % pairs.len();
    let mut cursor = std::collections::HashMap::new();
    for (p, &frame) in pairs.iter().enumerate() {
        let count = base + usize::from(p < rem);
        let slot = cursor.entry(frame).or_insert(0usize);
        let view = *slot;
        *slot += 1;
        if count == 0 {
            continue;
        }
        let pv = &source.frames[frame].views[view];
        let n_bg = ((count as f64) * cfg.background_fraction).round() as usize;
        let n_fg = count - n_bg;
        let mut rays = draw_training_rays(&pv.camera, &pv.image, &pv.mask, n_fg, cfg.bbox_dilate, rng);
        for _ in 0..n_bg {
            let px = rng.gen_range(0..pv.camera.width);
            let py = rng.gen_range(0..pv.camera.height);
            let mut ray = pv.camera.pixel_ray(px, py);
            ray.gt_color = pv.image.get(px, py);
            ray.gt_mask = pv.mask.get(px, py);
            rays.push(ray);
        }
        batches.push((frame, rng.gen::<u64>(), rays));
    }
    batches
}

/// Fine-tunes weights on the observations in `source` (full-resolution
/// images; build the source with `preprocess = false`). With `proxy` given
/// and occlusion handling on, each batch reserves a fraction for virtual
/// rays drawn from proxy pixels whose nearest template vertex no real view
/// sees; virtual rays supervise the field in canonical space. Real and
/// virtual counts always sum to `rays_per_step`.
pub fn finetune(
    source: &TaskSource,
    prog: &FieldProgram,
    init: ParamVector,
    cfg: &FinetuneConfig,
    proxy: Option<&ProxySet>,
    chunks: usize,
    mut on_step: impl FnMut(&FinetuneLogRow),
) -> Result<ParamVector> {
    cfg.validate()?;
    if source.frames.is_empty() || source.frames.iter().any(|f| f.views.is_empty()) {
        return Err(Error::data("finetune: no observations"));
    }
    let mut phi = init;
    if cfg.steps == 0 {
        return Ok(phi);
    }

    let virtual_source = match (cfg.occlusion, proxy) {
        (true, Some(p)) => {
            let nv = p.posed.mesh.vertices.len();
            let mut visible = vec![false; nv];
            for frame in &source.frames {
                let cams: Vec<Camera> =
                    frame.views.iter().map(|v| v.camera.clone()).collect();
                let vis = vertex_visibility(&frame.posed, &cams);
                for (acc, v) in visible.iter_mut().zip(&vis) {
                    *acc |= v;
                }
            }
            Some(VirtualRaySource::build(p, &visible))
        }
        _ => None,
    };

    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        phi.len(),
    );
    let mut runner = GradRunner::new(chunks);
    let mut grad = vec![0.0; phi.len()];

    for step in 0..cfg.steps {
        let mut rng = stream_indexed(cfg.seed, "finetune-step", step as u64);
        let n_virtual = match (&virtual_source, proxy) {
            (Some(vs), Some(_)) if !vs.is_empty() => {
                ((cfg.rays_per_step as f64) * cfg.virtual_fraction).round() as usize
            }
            _ => 0,
        };
        let n_real = cfg.rays_per_step - n_virtual;

        let mut items: Vec<LossItem> = Vec::with_capacity(cfg.rays_per_step);
        let mut real_count = 0;
        for (frame, seed, rays) in draw_finetune_batch(source, cfg, n_real, &mut rng) {
            real_count += rays.len();
            items.extend(build_ray_items(
                &rays,
                &source.frames[frame].posed,
                cfg.mode,
                cfg.samples_per_ray,
                cfg.eta,
                seed,
            )?);
        }
        let mut virtual_count = 0;
        if n_virtual > 0 {
            let p = proxy.expect("virtual rays require a proxy");
            let vs = virtual_source.as_ref().expect("checked above");
            let rays = occluded_ray_sampling(vs, p, n_virtual, &mut rng);
            virtual_count = rays.len();
            let seed = rng.gen::<u64>();
            items.extend(build_ray_items(
                &rays,
                &p.posed,
                cfg.mode,
                cfg.samples_per_ray,
                cfg.eta,
                seed,
            )?);
        }

        let (total, sums) = loss_step(
            prog,
            &mut phi,
            &items,
            &cfg.weights,
            cfg.background,
            &mut adam,
            &mut runner,
            &mut grad,
        )
        .map_err(|e| Error::numerical(format!("finetune step {step}: {e}")))?;
        on_step(&FinetuneLogRow {
            step,
            total,
            color: sums.color,
            eikonal: sums.eikonal,
            mask: sums.mask,
            sparse: sums.sparse,
            real_rays: real_count,
            virtual_rays: virtual_count,
        });
    }
    Ok(phi)
}

/// Linear interpolation in weight space with exact endpoints. Layouts must
/// match segment for segment.
pub fn lerp_weights(a: &ParamVector, b: &ParamVector, t: f64) -> Result<ParamVector> {
    if !a.layout.same_shape(&b.layout) {
        return Err(Error::usage("lerp: parameter layouts differ"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::usage(format!("lerp: t = {t} outside [0, 1]")));
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * (1.0 - t) + y * t)
        .collect();
    Ok(ParamVector {
        values,
        layout: a.layout.clone(),
    })
}

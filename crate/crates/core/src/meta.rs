//! Reptile meta-training: sample per-(frame, view) ray tasks, adapt a copy
//! of the weights through M sequential inner Adam steps, then move the meta
//! weights a fraction of the way toward the adapted ones.
//!
//! The inner objective is the renderer's supervised ray loss; one shared
//! step function ([`loss_step`]) is used here and by fine-tuning so the two
//! paths cannot drift apart.

use std::sync::{Arc, Mutex};

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::CaptureDataset;
use crate::difftape::ParamVector;
use crate::field::FieldProgram;
use crate::renderer::{
    build_loss_graph, draw_training_rays, meta_preprocess, sample_ray, Camera, Image, LossItem,
    LossNorm, LossSums, LossWeights, Mask, Ray, SupervisedRay, HUBER_DELTA,
};
use crate::rng::{stream, stream_indexed};
use crate::template::{pose_template, CanoMode, PosedTemplate};
use crate::train::{Adam, AdamConfig, GradRunner};
use crate::{Error, Result};

/// Meta-training schedule and task-sampling knobs.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Outer Reptile steps N.
    pub outer_steps: usize,
    /// Inner Adam steps M per outer step.
    pub inner_steps: usize,
    /// Outer interpolation rate l_out.
    pub outer_rate: f64,
    /// Inner Adam learning rate l_in (before warmup scaling).
    pub inner_rate: f64,
    /// Rays drawn per inner step.
    pub rays_per_step: usize,
    /// Stratified depth samples per ray.
    pub samples_per_ray: usize,
    /// Outer steps over which the inner rate ramps from 1% to 100%.
    pub warmup_steps: usize,
    /// Template distance threshold for valid samples.
    pub eta: f64,
    /// Multiplier applied to eta from `eta_decay_step` onward.
    pub eta_decay: f64,
    pub eta_decay_step: usize,
    /// Fraction of each ray batch drawn uniformly over the whole image
    /// instead of the dilated mask box.
    pub background_fraction: f64,
    /// Mask bounding-box dilation in pixels for foreground draws.
    pub bbox_dilate: u32,
    /// Canonicalization used for ray warping.
    pub mode: CanoMode,
    pub weights: LossWeights,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> MetaConfig {
        MetaConfig {
            outer_steps: 300,
            inner_steps: 24,
            outer_rate: 1.0,
            inner_rate: 1e-4,
            rays_per_step: 4096,
            samples_per_ray: 32,
            warmup_steps: 50,
            eta: 0.05,
            eta_decay: 0.5,
            eta_decay_step: 300,
            background_fraction: 0.1,
            bbox_dilate: 4,
            mode: CanoMode::Template,
            weights: LossWeights::default(),
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps < 1 {
            return Err(Error::data("meta: inner_steps must be at least 1"));
        }
        if !(self.outer_rate > 0.0) || !(self.inner_rate > 0.0) {
            return Err(Error::data("meta: rates must be positive"));
        }
        if self.rays_per_step < 1 {
            return Err(Error::data("meta: rays_per_step must be at least 1"));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::data("meta: samples_per_ray must be at least 2"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::data("meta: eta must be positive"));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return Err(Error::data("meta: eta_decay must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::data(
                "meta: background_fraction must be in [0, 1)",
            ));
        }
        Ok(())
    }

    /// Template threshold at outer step `i`: decays once at the decay step.
    pub fn eta_at(&self, i: usize) -> f64 {
        if i >= self.eta_decay_step {
            self.eta * self.eta_decay
        } else {
            self.eta
        }
    }

    /// Effective inner rate at outer step `i`: linear from 1% of `inner_rate`
    /// at step 0 to 100% at `warmup_steps`, constant afterwards.
    pub fn inner_rate_at(&self, i: usize) -> f64 {
        if self.warmup_steps == 0 || i >= self.warmup_steps {
            self.inner_rate
        } else {
            self.inner_rate * (0.01 + 0.99 * i as f64 / self.warmup_steps as f64)
        }
    }
}

/// One supervised view of one frame, ready for ray drawing.
pub struct PrepView {
    /// Index into the dataset's camera list.
    pub view: usize,
    pub camera: Camera,
    pub image: Image,
    pub mask: Mask,
}

/// One frame: its posed template and the supervised views.
pub struct FrameViews {
    pub posed: Arc<PosedTemplate>,
    pub views: Vec<PrepView>,
}

/// All frames of a dataset with images loaded (and optionally preprocessed)
/// up front, so task sampling is pure RNG work.
pub struct TaskSource {
    pub frames: Vec<FrameViews>,
}

impl TaskSource {
    /// Loads every (frame, view) image pair. `views` restricts to a subset of
    /// camera indices (sparse or monocular supervision); `preprocess` applies
    /// the half-resolution blur pipeline used for meta-training.
    pub fn build(
        dataset: &CaptureDataset,
        views: Option<&[usize]>,
        preprocess: bool,
    ) -> Result<TaskSource> {
        let selected: Vec<usize> = match views {
            Some(v) => {
                if v.is_empty() {
                    return Err(Error::usage("task source: empty view selection"));
                }
                let mut seen = std::collections::HashSet::new();
                for &ix in v {
                    if ix >= dataset.cameras.len() {
                        return Err(Error::usage(format!(
                            "task source: view index {ix} out of range ({} cameras)",
                            dataset.cameras.len()
                        )));
                    }
                    if !seen.insert(ix) {
                        return Err(Error::usage(format!(
                            "task source: duplicate view index {ix}"
                        )));
                    }
                }
                v.to_vec()
            }
            None => (0..dataset.cameras.len()).collect(),
        };
        let mut frames = Vec::with_capacity(dataset.n_frames());
        for f in 0..dataset.n_frames() {
            let posed = Arc::new(pose_template(&dataset.template, dataset.pose(f)?)?);
            let mut views = Vec::with_capacity(selected.len());
            for &v in &selected {
                let image = dataset.load_image(f, v)?;
                let mask = dataset.load_mask(f, v)?;
                let camera = dataset.cameras[v].clone();
                let (image, mask, camera) = if preprocess {
                    meta_preprocess(&image, &mask, &camera)
                } else {
                    (image, mask, camera)
                };
                views.push(PrepView {
                    view: v,
                    camera,
                    image,
                    mask,
                });
            }
            frames.push(FrameViews { posed, views });
        }
        Ok(TaskSource { frames })
    }
}

/// One inner-loop task: a supervised ray batch from a single (frame, view).
pub struct Task {
    pub frame: usize,
    /// Camera index in the dataset.
    pub view: usize,
    /// Stream seed for this task's per-ray depth jitter.
    pub seed: u64,
    pub rays: Vec<Ray>,
    pub posed: Arc<PosedTemplate>,
}

/// Supervised rays drawn uniformly over the whole image.
fn draw_background_rays(
    camera: &Camera,
    image: &Image,
    mask: &Mask,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<Ray> {
    (0..count)
        .map(|_| {
            let px = rng.gen_range(0..camera.width);
            let py = rng.gen_range(0..camera.height);
            let mut ray = camera.pixel_ray(px, py);
            ray.gt_color = image.get(px, py);
            ray.gt_mask = mask.get(px, py);
            ray
        })
        .collect()
}

/// Draws `m` independent uniform (frame, view) tasks. Each ray batch mixes
/// draws from the dilated mask box with a configured fraction of
/// whole-image background draws.
pub fn sample_tasks(
    source: &TaskSource,
    m: usize,
    rays_per_task: usize,
    dilate: u32,
    background_fraction: f64,
    rng: &mut impl Rng,
) -> Vec<Task> {
    let mut tasks = Vec::with_capacity(m);
    for _ in 0..m {
        let f = rng.gen_range(0..source.frames.len());
        let frame = &source.frames[f];
        let v = rng.gen_range(0..frame.views.len());
        let pv = &frame.views[v];
        let n_bg = ((rays_per_task as f64) * background_fraction).round() as usize;
        let n_fg = rays_per_task - n_bg;
        let mut rays = draw_training_rays(&pv.camera, &pv.image, &pv.mask, n_fg, dilate, rng);
        rays.extend(draw_background_rays(&pv.camera, &pv.image, &pv.mask, n_bg, rng));
        tasks.push(Task {
            frame: f,
            view: pv.view,
            seed: rng.gen(),
            rays,
            posed: frame.posed.clone(),
        });
    }
    tasks
}

/// Builds loss items for a ray batch: stratified depth samples against the
/// posed template, jitter from a per-ray stream so the result is independent
/// of thread scheduling.
pub fn build_ray_items(
    rays: &[Ray],
    posed: &PosedTemplate,
    mode: CanoMode,
    samples_per_ray: usize,
    eta: f64,
    seed: u64,
) -> Result<Vec<LossItem>> {
    rays.par_iter()
        .enumerate()
        .map(|(i, ray)| {
            let mut rng = stream_indexed(seed, "ray-jitter", i as u64);
            let set = sample_ray(ray, posed, mode, samples_per_ray, eta, &mut rng)?;
            Ok(LossItem::Ray(SupervisedRay {
                samples: set,
                gt_color: ray.gt_color,
                gt_mask: ray.gt_mask,
            }))
        })
        .collect()
}

/// One supervised gradient step: accumulate the render-loss gradient over
/// `items` and apply one Adam update. Returns the weighted total and the
/// per-term means. Per-chunk term sums are reduced in offset order, so the
/// reported numbers are bit-stable under any thread scheduling.
pub fn loss_step(
    prog: &FieldProgram,
    params: &mut ParamVector,
    items: &[LossItem],
    weights: &LossWeights,
    background: [f64; 3],
    adam: &mut Adam,
    runner: &mut GradRunner,
    grad: &mut Vec<f64>,
) -> Result<(f64, LossSums)> {
    if grad.len() != params.len() {
        grad.resize(params.len(), 0.0);
    }
    let norm = LossNorm::for_items(items);
    let acc: Mutex<Vec<(usize, LossSums)>> = Mutex::new(Vec::new());
    let base = items.as_ptr() as usize;
    let total = runner.run(
        params,
        items,
        |t, chunk| {
            let (total, sums) =
                build_loss_graph(prog, t, chunk, weights, HUBER_DELTA, background, &norm);
            let off =
                (chunk.as_ptr() as usize - base) / std::mem::size_of::<LossItem>();
            acc.lock().unwrap().push((off, sums));
            total
        },
        grad,
    )?;
    if !total.is_finite() {
        return Err(Error::numerical(format!("non-finite loss {total}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite gradient"));
    }
    let mut chunks = acc.into_inner().unwrap();
    chunks.sort_by_key(|c| c.0);
    let mut sums = LossSums::default();
    for (_, s) in &chunks {
        sums.accumulate(s);
    }
    adam.step(&mut params.values, grad);
    Ok((total, sums.means(&norm)))
}

/// Everything an inner loop needs besides the tasks themselves.
pub struct InnerSetup<'a> {
    pub prog: &'a FieldProgram,
    pub weights: &'a LossWeights,
    pub background: [f64; 3],
    pub mode: CanoMode,
    pub samples_per_ray: usize,
    pub eta: f64,
}

/// Runs M sequential Adam steps from `phi_start`, one task per step, and
/// returns the adapted weights with the mean loss (weighted total and
/// per-term means averaged over the steps). The optimizer is reset here:
/// every inner loop starts from fresh moments.
pub fn inner_loop(
    setup: &InnerSetup,
    phi_start: &ParamVector,
    tasks: &[Task],
    l_in: f64,
    adam: &mut Adam,
    runner: &mut GradRunner,
    grad: &mut Vec<f64>,
) -> Result<(ParamVector, f64, LossSums)> {
    let mut phi = phi_start.clone();
    adam.reset();
    adam.cfg.lr = l_in;
    let mut total_acc = 0.0;
    let mut sums_acc = LossSums::default();
    for (j, task) in tasks.iter().enumerate() {
        let items = build_ray_items(
            &task.rays,
            &task.posed,
            setup.mode,
            setup.samples_per_ray,
            setup.eta,
            task.seed,
        )?;
        let (total, sums) = loss_step(
            setup.prog,
            &mut phi,
            &items,
            setup.weights,
            setup.background,
            adam,
            runner,
            grad,
        )
        .map_err(|e| {
            Error::numerical(format!(
                "inner step {j} (frame {}, view {}): {e}",
                task.frame, task.view
            ))
        })?;
        total_acc += total;
        sums_acc.accumulate(&sums);
    }
    let m = tasks.len().max(1) as f64;
    let mean_sums = LossSums {
        color: sums_acc.color / m,
        eikonal: sums_acc.eikonal / m,
        mask: sums_acc.mask / m,
        sparse: sums_acc.sparse / m,
    };
    Ok((phi, total_acc / m, mean_sums))
}

/// First-order outer update: phi moves a fraction `l_out` toward the adapted
/// weights. Written in interpolation form so the endpoints are exact:
/// `l_out = 0` leaves phi bit-identical and `l_out = 1` copies the adapted
/// weights bit-identically.
pub fn outer_step(phi: &mut ParamVector, adapted: &ParamVector, l_out: f64) {
    assert_eq!(phi.len(), adapted.len());
    for (p, a) in phi.values.iter_mut().zip(&adapted.values) {
        *p = *p * (1.0 - l_out) + *a * l_out;
    }
}

/// One row of the meta-training log.
#[derive(Clone, Copy, Debug)]
pub struct MetaLogRow {
    pub step: usize,
    /// Mean weighted total over the inner steps.
    pub total: f64,
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub sparse: f64,
    pub eta: f64,
    pub inner_rate: f64,
}

impl MetaLogRow {
    pub fn csv_header() -> &'static str {
        "step,total,color,eikonal,mask,sparse,eta,inner_rate"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.step,
            self.total,
            self.color,
            self.eikonal,
            self.mask,
            self.sparse,
            self.eta,
            self.inner_rate
        )
    }
}

/// The full Reptile loop over a dataset: N outer steps of task sampling,
/// inner adaptation, and interpolation toward the adapted weights.
/// `views` restricts supervision to a camera subset. `chunks` sets the
/// data-parallel gradient chunk count (results are bit-identical for a fixed
/// value). `on_step` receives one log row per outer step.
pub fn meta_train(
    dataset: &CaptureDataset,
    prog: &FieldProgram,
    init: ParamVector,
    cfg: &MetaConfig,
    views: Option<&[usize]>,
    chunks: usize,
    mut on_step: impl FnMut(&MetaLogRow),
) -> Result<ParamVector> {
    cfg.validate()?;
    let source = TaskSource::build(dataset, views, true)?;
    let mut phi = init;
    let mut rng = stream(cfg.seed, "meta-outer");
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.inner_rate,
            ..AdamConfig::default()
        },
        phi.len(),
    );
    let mut runner = GradRunner::new(chunks);
    let mut grad = vec![0.0; phi.len()];
    for i in 0..cfg.outer_steps {
        let eta = cfg.eta_at(i);
        let l_in = cfg.inner_rate_at(i);
        let tasks = sample_tasks(
            &source,
            cfg.inner_steps,
            cfg.rays_per_step,
            cfg.bbox_dilate,
            cfg.background_fraction,
            &mut rng,
        );
        let setup = InnerSetup {
            prog,
            weights: &cfg.weights,
            background: cfg.background,
            mode: cfg.mode,
            samples_per_ray: cfg.samples_per_ray,
            eta,
        };
        let (adapted, total, sums) =
            inner_loop(&setup, &phi, &tasks, l_in, &mut adam, &mut runner, &mut grad)
                .map_err(|e| Error::numerical(format!("outer step {i}: {e}")))?;
        outer_step(&mut phi, &adapted, cfg.outer_rate);
        on_step(&MetaLogRow {
            step: i,
            total,
            color: sums.color,
            eikonal: sums.eikonal,
            mask: sums.mask,
            sparse: sums.sparse,
            eta,
            inner_rate: l_in,
        });
    }
    Ok(phi)
}

//! Mesh extraction from a fitted field and the evaluation metric suite:
//! Chamfer and point-to-surface distance, voxel IoU, normal consistency,
//! PSNR, and SSIM.
//!
//! Conventions are pinned here once and used everywhere: distances are
//! reported in centimeters as unsquared L2 means over seeded area-uniform
//! surface samples; image metrics use MAX = 1, an optional crop to the union
//! mask box dilated by 10 px, and an 11x11 Gaussian SSIM window.

use std::cell::RefCell;
use std::fmt;

use rayon::prelude::*;

use crate::difftape::{ParamVector, TapeBuffers};
use crate::field::FieldProgram;
use crate::linalg::{dot, norm, sub, V3};
use crate::mesh::{isosurface, Bvh, TriMesh};
use crate::renderer::{Image, Mask};
use crate::rng::stream;
use crate::template::{warp_from_canonical, CanoMode, PosedTemplate, TemplateMesh};
use crate::{Error, Result};

/// Default number of area-uniform surface samples per mesh side.
pub const DEFAULT_SAMPLES: usize = 100_000;
/// PSNR reported for identical images, and the cap for near-identical ones.
pub const PSNR_CAP: f64 = 99.0;
/// Mask crop margin in pixels for image metrics.
pub const CROP_MARGIN: u32 = 10;

thread_local! {
    static EXTRACT_BUFS: RefCell<TapeBuffers> = RefCell::new(TapeBuffers::new());
}

/// Extracts the zero level set of the field's SDF over its canonical domain.
/// With a template and posed template given, each vertex is forward-warped to
/// world space by the blended transform of its nearest canonical triangle.
/// An empty level set yields an empty mesh, not an error.
pub fn extract_mesh(
    prog: &FieldProgram,
    params: &ParamVector,
    resolution: usize,
    warp: Option<(&TemplateMesh, &PosedTemplate, CanoMode)>,
) -> Result<TriMesh> {
    if resolution < 16 {
        return Err(Error::usage(format!(
            "extraction resolution {resolution} is below the minimum of 16"
        )));
    }
    let domain = prog.cfg.grid.domain;
    let sample =
        |p: V3| EXTRACT_BUFS.with(|b| prog.sdf_at(&mut b.borrow_mut(), params, p));
    let mut mesh = isosurface(sample, &domain, resolution);
    if let Some((template, posed, mode)) = warp {
        for v in mesh.vertices.iter_mut() {
            *v = warp_from_canonical(template, posed, *v, mode);
        }
    }
    Ok(mesh)
}

fn mean_surface_distance(from: &TriMesh, to: &TriMesh, to_bvh: &Bvh, samples: usize, seed: u64) -> f64 {
    // One shared stream label keeps the metric exactly symmetric: swapping
    // the arguments reuses the same sample set per mesh.
    let mut rng = stream(seed, "chamfer");
    let points = from.sample_surface(samples, &mut rng);
    let total: f64 = points
        .par_iter()
        .map(|(p, _)| to_bvh.closest_point(to, *p).dist)
        .sum();
    total / points.len() as f64
}

/// Chamfer distance (symmetric mean of the two directional point-to-surface
/// means) and the pred-to-gt directional mean, both in centimeters.
pub fn chamfer_p2s(
    pred: &TriMesh,
    gt: &TriMesh,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if pred.faces.is_empty() || gt.faces.is_empty() {
        return Err(Error::data("chamfer: empty mesh"));
    }
    if samples == 0 {
        return Err(Error::usage("chamfer: need at least one sample"));
    }
    let pred_bvh = Bvh::build(pred);
    let gt_bvh = Bvh::build(gt);
    let pg = mean_surface_distance(pred, gt, &gt_bvh, samples, seed);
    let gp = mean_surface_distance(gt, pred, &pred_bvh, samples, seed);
    Ok((100.0 * 0.5 * (pg + gp), 100.0 * pg))
}

/// True when every undirected edge is shared by exactly two faces.
/// Vertices at exactly coincident positions are welded first, so meshes that
/// are geometrically closed but carry duplicated seam or pole vertices pass.
pub fn is_watertight(mesh: &TriMesh) -> bool {
    if mesh.faces.is_empty() {
        return false;
    }
    let mut ids: std::collections::HashMap<[u64; 3], u32> = std::collections::HashMap::new();
    let mut weld = Vec::with_capacity(mesh.vertices.len());
    for v in &mesh.vertices {
        if v.iter().any(|c| !c.is_finite()) {
            return false;
        }
        // Adding 0.0 folds -0.0 into +0.0 so the bit key is canonical.
        let key = [
            (v[0] + 0.0).to_bits(),
            (v[1] + 0.0).to_bits(),
            (v[2] + 0.0).to_bits(),
        ];
        let next = ids.len() as u32;
        weld.push(*ids.entry(key).or_insert(next));
    }
    let mut counts: std::collections::HashMap<(u32, u32), i32> = std::collections::HashMap::new();
    for f in &mesh.faces {
        for e in 0..3 {
            let (u, v) = (weld[f[e] as usize], weld[f[(e + 1) % 3] as usize]);
            if u == v {
                return false;
            }
            *counts.entry((u.min(v), u.max(v))).or_insert(0) += 1;
        }
    }
    counts.values().all(|&c| c == 2)
}

fn parity_inside(mesh: &TriMesh, bvh: &Bvh, p: V3) -> bool {
    // Majority vote over three axis rays guards against edge-grazing casts.
    let dirs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let odd = dirs
        .iter()
        .filter(|d| bvh.count_crossings(mesh, p, **d) % 2 == 1)
        .count();
    odd >= 2
}

/// Voxel IoU of two watertight meshes over the union of their bounds, by
/// inside-testing cell centers. A non-watertight prediction falls back to the
/// provided inside test when there is one, otherwise errors.
pub fn iou_voxel(
    pred: &TriMesh,
    gt: &TriMesh,
    resolution: usize,
    pred_inside: Option<&(dyn Fn(V3) -> bool + Sync)>,
) -> Result<f64> {
    if pred.faces.is_empty() || gt.faces.is_empty() {
        return Err(Error::data("iou: empty mesh"));
    }
    if resolution < 2 {
        return Err(Error::usage("iou: resolution must be at least 2"));
    }
    if !is_watertight(gt) {
        return Err(Error::data("iou: ground-truth mesh is not watertight"));
    }
    let pred_tight = is_watertight(pred);
    if !pred_tight && pred_inside.is_none() {
        return Err(Error::data(
            "iou: predicted mesh is not watertight and no field fallback was given",
        ));
    }
    let domain = pred.aabb().union(&gt.aabb()).dilate(1e-6);
    let pred_bvh = Bvh::build(pred);
    let gt_bvh = Bvh::build(gt);
    let n = resolution;
    let step = [
        (domain.hi[0] - domain.lo[0]) / n as f64,
        (domain.hi[1] - domain.lo[1]) / n as f64,
        (domain.hi[2] - domain.lo[2]) / n as f64,
    ];
    let (inter, union) = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for j in 0..n {
                for i in 0..n {
                    let p = [
                        domain.lo[0] + step[0] * (i as f64 + 0.5),
                        domain.lo[1] + step[1] * (j as f64 + 0.5),
                        domain.lo[2] + step[2] * (k as f64 + 0.5),
                    ];
                    let in_pred = if pred_tight {
                        parity_inside(pred, &pred_bvh, p)
                    } else {
                        pred_inside.unwrap()(p)
                    };
                    let in_gt = parity_inside(gt, &gt_bvh, p);
                    if in_pred && in_gt {
                        inter += 1;
                    }
                    if in_pred || in_gt {
                        union += 1;
                    }
                }
            }
            (inter, union)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if union == 0 {
        return Err(Error::data("iou: both meshes voxelize to empty"));
    }
    Ok(inter as f64 / union as f64)
}

/// Mean (1 - cos) and mean L2 discrepancy between prediction sample normals
/// and the normal at the nearest ground-truth surface point.
pub fn normal_consistency(
    pred: &TriMesh,
    gt: &TriMesh,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if pred.faces.is_empty() || gt.faces.is_empty() {
        return Err(Error::data("normal consistency: empty mesh"));
    }
    let gt_bvh = Bvh::build(gt);
    let mut rng = stream(seed, "normals");
    let points = pred.sample_surface(samples, &mut rng);
    let sums = points
        .par_iter()
        .filter_map(|(p, n_pred)| {
            let hit = gt_bvh.closest_point(gt, *p);
            let n_gt = gt.face_normal(hit.face);
            // Degenerate faces yield non-finite normals; skip them.
            if n_pred.iter().chain(n_gt.iter()).any(|v| !v.is_finite()) {
                return None;
            }
            let cos = dot(*n_pred, n_gt);
            Some((1.0 - cos, norm(sub(*n_pred, n_gt)), 1usize))
        })
        .reduce(
            || (0.0, 0.0, 0),
            |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2),
        );
    if sums.2 == 0 {
        return Err(Error::data("normal consistency: no valid sample pairs"));
    }
    Ok((sums.0 / sums.2 as f64, sums.1 / sums.2 as f64))
}

fn union_crop(masks: Option<(&Mask, &Mask)>, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let full = (0, 0, width - 1, height - 1);
    let Some((ma, mb)) = masks else { return full };
    let union = match (ma.bbox(0.05), mb.bbox(0.05)) {
        (Some(a), Some(b)) => (
            a.0.min(b.0),
            a.1.min(b.1),
            a.2.max(b.2),
            a.3.max(b.3),
        ),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return full,
    };
    (
        union.0.saturating_sub(CROP_MARGIN),
        union.1.saturating_sub(CROP_MARGIN),
        (union.2 + CROP_MARGIN).min(width - 1),
        (union.3 + CROP_MARGIN).min(height - 1),
    )
}

/// PSNR (MAX = 1, capped at 99 dB) and mean SSIM (11x11 Gaussian window,
/// sigma 1.5, K1 = 0.01, K2 = 0.03) between two images, optionally cropped
/// to the union of the two masks' bounding boxes dilated by 10 px.
pub fn image_metrics(
    pred: &Image,
    gt: &Image,
    masks: Option<(&Mask, &Mask)>,
) -> Result<(f64, f64)> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::data(format!(
            "image metrics: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if let Some((ma, mb)) = masks {
        if ma.width != pred.width
            || ma.height != pred.height
            || mb.width != pred.width
            || mb.height != pred.height
        {
            return Err(Error::data("image metrics: mask dimensions differ"));
        }
    }
    let (x0, y0, x1, y1) = union_crop(masks, pred.width, pred.height);
    let (cw, ch) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);

    let mut se = 0.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let a = pred.get(x, y);
            let b = gt.get(x, y);
            for c in 0..3 {
                let d = a[c] - b[c];
                se += d * d;
            }
        }
    }
    let mse = se / (3 * cw * ch) as f64;
    let psnr = if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    };

    let ssim = ssim_mean(pred, gt, (x0, y0, x1, y1))?;
    Ok((psnr, ssim))
}

fn gaussian_window() -> [f64; 11] {
    let sigma = 1.5;
    let mut w = [0.0; 11];
    let mut total = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        total += *v;
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Mean SSIM over all 11x11 windows fully inside the crop, averaged across
/// channels. Crops smaller than the window fall back to one window covering
/// what exists.
fn ssim_mean(pred: &Image, gt: &Image, crop: (u32, u32, u32, u32)) -> Result<f64> {
    let (x0, y0, x1, y1) = crop;
    let (cw, ch) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    if cw < 11 || ch < 11 {
        return Err(Error::data(format!(
            "ssim: crop {cw}x{ch} is smaller than the 11x11 window"
        )));
    }
    let w = gaussian_window();
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let rows: Vec<(f64, usize)> = (0..=(ch - 11))
        .into_par_iter()
        .map(|wy| {
            let mut sum = 0.0;
            let mut count = 0;
            for wx in 0..=(cw - 11) {
                for c in 0..3 {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    let mut aa = 0.0;
                    let mut bb = 0.0;
                    let mut ab = 0.0;
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let wt = w[dy] * w[dx];
                            let x = x0 + (wx + dx) as u32;
                            let y = y0 + (wy + dy) as u32;
                            let a = pred.get(x, y)[c];
                            let b = gt.get(x, y)[c];
                            mu_a += wt * a;
                            mu_b += wt * b;
                            aa += wt * a * a;
                            bb += wt * b * b;
                            ab += wt * a * b;
                        }
                    }
                    let va = aa - mu_a * mu_a;
                    let vb = bb - mu_b * mu_b;
                    let cov = ab - mu_a * mu_b;
                    let s = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                        / ((mu_a * mu_a + mu_b * mu_b + C1) * (va + vb + C2));
                    sum += s;
                    count += 1;
                }
            }
            (sum, count)
        })
        .collect();
    let (total, count) = rows
        .iter()
        .fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(total / count as f64)
}

/// One row of evaluation results.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub chamfer: f64,
    pub p2s: f64,
    pub iou: f64,
    pub nc_cos: f64,
    pub nc_l2: f64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "psnr_db,ssim,chamfer_cm,p2s_cm,iou,nc_cos,nc_l2"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.psnr, self.ssim, self.chamfer, self.p2s, self.iou, self.nc_cos, self.nc_l2
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "psnr    {:8.3} dB", self.psnr)?;
        writeln!(f, "ssim    {:8.4}", self.ssim)?;
        writeln!(f, "chamfer {:8.4} cm", self.chamfer)?;
        writeln!(f, "p2s     {:8.4} cm", self.p2s)?;
        writeln!(f, "iou     {:8.4}", self.iou)?;
        writeln!(f, "nc_cos  {:8.4}", self.nc_cos)?;
        write!(f, "nc_l2   {:8.4}", self.nc_l2)
    }
}

//! Differentiable volume rendering: pinhole cameras, occupancy-guided ray
//! sampling in canonical space, SDF-based alpha compositing, the training
//! loss graph, and image buffers with PNG round trips.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::difftape::{ParamVector, Tape, TapeBuffers, Val};
use crate::field::{FieldProgram, GeoSample};
use crate::linalg::{add, cross, dot, normalize, scale, sub, V3};
use crate::mesh::Aabb;
use crate::template::{warp_point, CanoMode, PosedTemplate};
use crate::{Error, Result};

/// Pinhole camera in the computer-vision convention: `q = R p + t` maps
/// world points into the camera frame (z forward, y down in the image),
/// `u = fx qx/qz + cx`. Pixel `(i, j)` covers the continuous square
/// `[i, i+1) x [j, j+1)` with its center at `(i+0.5, j+0.5)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub translation: V3,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera placed at `pos` looking toward `target`, square pixels, with
    /// the given vertical field of view in degrees.
    pub fn look_at(pos: V3, target: V3, up: V3, width: u32, height: u32, vfov_deg: f64) -> Camera {
        let z = normalize(sub(target, pos));
        let d0 = scale(up, -1.0);
        let y = normalize(sub(d0, scale(z, dot(d0, z))));
        let x = cross(y, z);
        let fy = (height as f64 / 2.0) / (vfov_deg.to_radians() / 2.0).tan();
        let r = [x, y, z];
        let c = scale(pos, -1.0);
        let translation = [dot(r[0], c), dot(r[1], c), dot(r[2], c)];
        Camera {
            fx: fy,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: r,
            translation,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.translation.iter())
            .chain(self.rotation.iter().flatten())
            .all(|x| x.is_finite());
        if !vals {
            return Err(Error::data("camera contains non-finite values"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::data("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::data("camera image size must be positive"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let g = dot(r[i], r[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (g - want).abs() > 1e-9 {
                    return Err(Error::data(format!(
                        "camera rotation is not orthonormal (row {i} . row {j} = {g})"
                    )));
                }
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::data("camera rotation must have determinant +1"));
        }
        Ok(())
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn position(&self) -> V3 {
        let r = &self.rotation;
        let t = self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// Project a world point; `None` when it sits at or behind the lens.
    /// Returns continuous pixel coordinates and the camera-space depth.
    pub fn project(&self, p: V3) -> Option<(f64, f64, f64)> {
        let r = &self.rotation;
        let q = add(
            [dot(r[0], p), dot(r[1], p), dot(r[2], p)],
            self.translation,
        );
        if q[2] <= 1e-12 {
            return None;
        }
        Some((
            self.fx * q[0] / q[2] + self.cx,
            self.fy * q[1] / q[2] + self.cy,
            q[2],
        ))
    }

    /// World-space ray through the continuous image point `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let r = &self.rotation;
        let world = [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ];
        Ray {
            origin: self.position(),
            dir: normalize(world),
            pixel: (u.floor().max(0.0) as u32, v.floor().max(0.0) as u32),
            gt_color: [0.0; 3],
            gt_mask: 0.0,
        }
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray {
        let mut ray = self.ray_through(px as f64 + 0.5, py as f64 + 0.5);
        ray.pixel = (px, py);
        ray
    }

    /// Camera for the same view at half resolution (both axes).
    pub fn half_resolution(&self) -> Camera {
        Camera {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: self.cx / 2.0,
            cy: self.cy / 2.0,
            rotation: self.rotation,
            translation: self.translation,
            width: self.width / 2,
            height: self.height / 2,
        }
    }
}

/// Generate one ray per pixel, row-major.
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity((camera.width * camera.height) as usize);
    for py in 0..camera.height {
        for px in 0..camera.width {
            rays.push(camera.pixel_ray(px, py));
        }
    }
    rays
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: V3,
    pub dir: V3,
    pub pixel: (u32, u32),
    pub gt_color: [f64; 3],
    pub gt_mask: f64,
}

/// One depth sample on a ray, already canonicalized.
#[derive(Clone, Copy, Debug)]
pub struct Sample {
    pub t: f64,
    pub world: V3,
    pub canonical: V3,
    /// View direction moved into canonical space and renormalized.
    pub canonical_dir: V3,
    /// Distance from the world point to the posed template surface.
    pub template_dist: f64,
    /// Within `eta` of the template; only valid samples are rendered.
    pub valid: bool,
}

/// Depth-ordered samples of one ray.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn valid_count(&self) -> usize {
        self.samples.iter().filter(|s| s.valid).count()
    }
}

/// Stratified sampling of a ray against the posed template: the dilated
/// template box bounds the depth range, one jittered sample per bin, and
/// samples farther than `eta` from the surface are marked invalid.
pub fn sample_ray(
    ray: &Ray,
    posed: &PosedTemplate,
    mode: CanoMode,
    n: usize,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    let bbox = posed.aabb.dilate(eta);
    let Some((t0, t1)) = bbox.ray_range(ray.origin, ray.dir) else {
        return Ok(SampleSet::default());
    };
    if !(t1 > t0) {
        return Ok(SampleSet::default());
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.gen();
        let t = t0 + (t1 - t0) * ((i as f64 + u) / n as f64);
        let world = add(ray.origin, scale(ray.dir, t));
        let warped = warp_point(posed, world, mode)?;
        let valid = warped.dist <= eta;
        let canonical_dir = normalize(warped.inverse.transform_dir(ray.dir));
        samples.push(Sample {
            t,
            world,
            canonical: warped.canonical,
            canonical_dir,
            template_dist: warped.dist,
            valid,
        });
    }
    Ok(SampleSet { samples })
}

/// Uniform points in a box, for field regularization away from rays.
pub fn uniform_box_points(domain: &Aabb, n: usize, rng: &mut impl Rng) -> Vec<V3> {
    (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = domain.lo[a] + (domain.hi[a] - domain.lo[a]) * rng.gen::<f64>();
            }
            p
        })
        .collect()
}

/// Reference alpha compositing used by tests and by the tape path: weights
/// `w_i = T_i a_i` with `T_i` the product of `(1 - a_j)` for `j < i`.
pub fn composite_reference(alphas: &[f64], colors: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut mask = 0.0;
    for (a, c) in alphas.iter().zip(colors) {
        let w = trans * a;
        for k in 0..3 {
            color[k] += w * c[k];
        }
        mask += w;
        trans *= 1.0 - a;
    }
    (color, mask)
}

/// Tape-side render of one ray: alphas from consecutive valid samples,
/// plus the per-sample geometry kept for regularization terms.
pub struct RayGraph {
    /// Length-3 composited color (before background blending).
    pub color: Val,
    /// Length-1 accumulated opacity.
    pub mask: Val,
    /// Geometry of every valid sample, in depth order.
    pub geo: Vec<GeoSample>,
}

/// Build the compositing graph for one sampled ray. `sharpness` is the
/// tape value of the effective sharpness `k`. The alpha of the pair
/// `(s_i, s_{i+1})` is `max((phi(k s_i) - phi(k s_{i+1})) / phi(k s_i), 0)`
/// computed in log space so deep-inside samples stay finite.
pub fn build_ray_graph(
    prog: &FieldProgram,
    t: &mut Tape,
    sharpness: Val,
    set: &SampleSet,
) -> RayGraph {
    let valid: Vec<&Sample> = set.samples.iter().filter(|s| s.valid).collect();
    let mut geo = Vec::with_capacity(valid.len());
    let mut colors = Vec::with_capacity(valid.len());
    for s in &valid {
        let g = prog.geometry(t, s.canonical);
        let c = prog.color(t, &g, s.canonical_dir);
        geo.push(g);
        colors.push(c);
    }
    if valid.len() < 2 {
        let color = t.constant(&[0.0, 0.0, 0.0]);
        let mask = t.scalar(0.0);
        return RayGraph { color, mask, geo };
    }
    // alpha_i = max(1 - sigma(k s_{i+1}) / sigma(k s_i), 0) and the ratio is
    // exp(softplus(-k s_i) - softplus(-k s_{i+1})), clamped at 0 before the
    // exponential since alpha is zero on that branch anyway.
    let mut alphas = Vec::with_capacity(valid.len() - 1);
    for i in 0..valid.len() - 1 {
        let a = t.mul(sharpness, geo[i].sdf);
        let b = t.mul(sharpness, geo[i + 1].sdf);
        let na = t.neg(a);
        let nb = t.neg(b);
        let spa = t.softplus(na);
        let spb = t.softplus(nb);
        let diff = t.sub(spa, spb);
        let diffc = t.clamp_max(diff, 0.0);
        let ratio = t.exp(diffc);
        let om = t.one_minus(ratio);
        alphas.push(t.clamp_min(om, 0.0));
    }
    let mut trans = t.scalar(1.0);
    let mut color = t.constant(&[0.0, 0.0, 0.0]);
    let mut mask = t.scalar(0.0);
    for (i, &alpha) in alphas.iter().enumerate() {
        let w = t.mul(trans, alpha);
        let wc = t.scale_by(colors[i], w);
        color = t.add(color, wc);
        mask = t.add(mask, w);
        let keep = t.one_minus(alpha);
        trans = t.mul(trans, keep);
    }
    RayGraph { color, mask, geo }
}

/// Render one sampled ray off-tape: returns the composited color (without
/// background) and the accumulated opacity.
pub fn render_ray(
    prog: &FieldProgram,
    buf: &mut TapeBuffers,
    params: &ParamVector,
    set: &SampleSet,
) -> Result<([f64; 3], f64)> {
    let mut t = buf.tape(params);
    let sharp = prog.sharpness(&mut t);
    let rg = build_ray_graph(prog, &mut t, sharp, set);
    let c = t.value(rg.color);
    let color = [c[0], c[1], c[2]];
    let mask = t.scalar_value(rg.mask);
    if !color.iter().all(|x| x.is_finite()) || !mask.is_finite() {
        return Err(Error::numerical("non-finite ray render"));
    }
    Ok((color, mask))
}

/// Loss term weights; the defaults follow the training objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub sparse: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            color: 10.0,
            eikonal: 0.1,
            mask: 0.1,
            sparse: 0.01,
        }
    }
}

/// Default Huber threshold for the color term.
pub const HUBER_DELTA: f64 = 0.1;
/// Clamp for the mask BCE probabilities.
pub const BCE_EPS: f64 = 1e-7;

/// One supervised ray: its samples plus ground-truth color and mask.
#[derive(Clone, Debug)]
pub struct SupervisedRay {
    pub samples: SampleSet,
    pub gt_color: [f64; 3],
    pub gt_mask: f64,
}

/// One unit of the loss batch; batches chunk over these.
#[derive(Clone, Debug)]
pub enum LossItem {
    Ray(SupervisedRay),
    /// A free canonical-space point for the eikonal and sparseness terms.
    Uniform(V3),
}

/// Global normalization constants, fixed before the batch is chunked so
/// any chunking yields the same total.
#[derive(Clone, Copy, Debug)]
pub struct LossNorm {
    pub rays: usize,
    /// Valid render samples plus uniform points.
    pub field_samples: usize,
}

impl LossNorm {
    pub fn for_items(items: &[LossItem]) -> LossNorm {
        let mut rays = 0;
        let mut field_samples = 0;
        for it in items {
            match it {
                LossItem::Ray(r) => {
                    rays += 1;
                    field_samples += r.samples.valid_count();
                }
                LossItem::Uniform(_) => field_samples += 1,
            }
        }
        LossNorm {
            rays,
            field_samples,
        }
    }
}

/// Unweighted per-term sums (color and mask over rays, eikonal and
/// sparseness over field samples). Normalize with a `LossNorm` to report
/// means.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossSums {
    pub color: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub sparse: f64,
}

impl LossSums {
    pub fn accumulate(&mut self, other: &LossSums) {
        self.color += other.color;
        self.eikonal += other.eikonal;
        self.mask += other.mask;
        self.sparse += other.sparse;
    }

    /// Per-term means given the batch counts.
    pub fn means(&self, norm: &LossNorm) -> LossSums {
        let r = if norm.rays > 0 { norm.rays as f64 } else { 1.0 };
        let f = if norm.field_samples > 0 {
            norm.field_samples as f64
        } else {
            1.0
        };
        LossSums {
            color: self.color / r,
            eikonal: self.eikonal / f,
            mask: self.mask / r,
            sparse: self.sparse / f,
        }
    }

    pub fn total(&self, weights: &LossWeights) -> f64 {
        weights.color * self.color
            + weights.eikonal * self.eikonal
            + weights.mask * self.mask
            + weights.sparse * self.sparse
    }
}

fn geo_reg_terms(t: &mut Tape, g: &GeoSample) -> (Val, Val) {
    let nn = t.dot(g.normal, g.normal);
    let safe = t.add_const(nn, 1e-16);
    let len = t.sqrt(safe);
    let dev = t.add_const(len, -1.0);
    let eik = t.mul(dev, dev);
    let mag = t.abs(g.sdf);
    let nmag = t.neg(mag);
    let sparse = t.exp(nmag);
    (eik, sparse)
}

/// Build the scaled loss graph for a slice of batch items. The returned
/// value is the weighted contribution of this slice to the batch total;
/// summing slices of any partition of the batch recovers the same total
/// because the normalization constants come from `norm`, not the slice.
/// Also returns this slice's unweighted term sums for logging.
pub fn build_loss_graph(
    prog: &FieldProgram,
    t: &mut Tape,
    items: &[LossItem],
    weights: &LossWeights,
    huber_delta: f64,
    background: [f64; 3],
    norm: &LossNorm,
) -> (Val, LossSums) {
    let sharp = prog.sharpness(t);
    let mut color_sum = t.scalar(0.0);
    let mut mask_sum = t.scalar(0.0);
    let mut eik_sum = t.scalar(0.0);
    let mut sparse_sum = t.scalar(0.0);
    for item in items {
        match item {
            LossItem::Ray(ray) => {
                let rg = build_ray_graph(prog, t, sharp, &ray.samples);
                let bg = t.constant(&background);
                let om = t.one_minus(rg.mask);
                let bg_part = t.scale_by(bg, om);
                let pred = t.add(rg.color, bg_part);
                let gt = t.constant(&ray.gt_color);
                let diff = t.sub(pred, gt);
                let h = t.huber(diff, huber_delta);
                let hsum = t.sum(h);
                let ray_color = t.scale(hsum, 1.0 / 3.0);
                color_sum = t.add(color_sum, ray_color);

                let hi = t.clamp_max(rg.mask, 1.0 - BCE_EPS);
                let m = t.clamp_min(hi, BCE_EPS);
                let ln_m = t.ln(m);
                let om2 = t.one_minus(m);
                let ln_om = t.ln(om2);
                let pos = t.scale(ln_m, ray.gt_mask);
                let neg = t.scale(ln_om, 1.0 - ray.gt_mask);
                let ll = t.add(pos, neg);
                let bce = t.neg(ll);
                mask_sum = t.add(mask_sum, bce);

                for g in &rg.geo {
                    let (eik, sparse) = geo_reg_terms(t, g);
                    eik_sum = t.add(eik_sum, eik);
                    sparse_sum = t.add(sparse_sum, sparse);
                }
            }
            LossItem::Uniform(p) => {
                let g = prog.geometry(t, *p);
                let (eik, sparse) = geo_reg_terms(t, &g);
                eik_sum = t.add(eik_sum, eik);
                sparse_sum = t.add(sparse_sum, sparse);
            }
        }
    }
    let sums = LossSums {
        color: t.scalar_value(color_sum),
        eikonal: t.scalar_value(eik_sum),
        mask: t.scalar_value(mask_sum),
        sparse: t.scalar_value(sparse_sum),
    };
    let r = if norm.rays > 0 { norm.rays as f64 } else { 1.0 };
    let f = if norm.field_samples > 0 {
        norm.field_samples as f64
    } else {
        1.0
    };
    let c = t.scale(color_sum, weights.color / r);
    let m = t.scale(mask_sum, weights.mask / r);
    let e = t.scale(eik_sum, weights.eikonal / f);
    let s = t.scale(sparse_sum, weights.sparse / f);
    let cm = t.add(c, m);
    let es = t.add(e, s);
    let total = t.add(cm, es);
    (total, sums)
}

/// Forward-only loss evaluation: weighted total plus per-term means.
pub fn compute_loss(
    prog: &FieldProgram,
    buf: &mut TapeBuffers,
    params: &ParamVector,
    items: &[LossItem],
    weights: &LossWeights,
    huber_delta: f64,
    background: [f64; 3],
) -> Result<(f64, LossSums)> {
    let norm = LossNorm::for_items(items);
    let mut t = buf.tape(params);
    let (total, sums) = build_loss_graph(prog, &mut t, items, weights, huber_delta, background, &norm);
    let value = t.scalar_value(total);
    if !value.is_finite() {
        return Err(Error::numerical("non-finite loss"));
    }
    Ok((value, sums.means(&norm)))
}

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Image {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, c: [f64; 3]) {
        self.pixels[(y * self.width + x) as usize] = c;
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width, self.height);
        for (i, px) in self.pixels.iter().enumerate() {
            let x = i as u32 % self.width;
            let y = i as u32 / self.width;
            buf.put_pixel(x, y, image::Rgb(px.map(to_u8)));
        }
        buf.save(path)
            .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
    }

    pub fn load_png(path: &std::path::Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("reading {}: {e}", path.display())))?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| [from_u8(p.0[0]), from_u8(p.0[1]), from_u8(p.0[2])])
            .collect();
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    /// The image as a PNG round trip would return it: 8-bit per channel.
    /// `save_png` then `load_png` of the result is the identity.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|p| p.map(|v| from_u8(to_u8(v))))
                .collect(),
        }
    }
}

/// Row-major grayscale buffer with values in `[0, 1]`; 1 is foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Mask {
        Mask {
            width,
            height,
            values: vec![0.0; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.values[(y * self.width + x) as usize] = v;
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.width, self.height);
        for (i, v) in self.values.iter().enumerate() {
            let x = i as u32 % self.width;
            let y = i as u32 / self.width;
            buf.put_pixel(x, y, image::Luma([to_u8(*v)]));
        }
        buf.save(path)
            .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
    }

    pub fn load_png(path: &std::path::Path) -> Result<Mask> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("reading {}: {e}", path.display())))?
            .to_luma8();
        let (width, height) = img.dimensions();
        let values = img.pixels().map(|p| from_u8(p.0[0])).collect();
        Ok(Mask {
            width,
            height,
            values,
        })
    }

    /// The mask as a PNG round trip would return it: 8-bit grayscale.
    pub fn quantized(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| from_u8(to_u8(v))).collect(),
        }
    }

    /// Tight bounding box of values above `thresh`, or `None` when empty.
    pub fn bbox(&self, thresh: f64) -> Option<(u32, u32, u32, u32)> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) > thresh {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 == u32::MAX {
            None
        } else {
            Some((x0, y0, x1, y1))
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Rendering parameters for full images.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub eta: f64,
    pub mode: CanoMode,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> RenderConfig {
        RenderConfig {
            samples_per_ray: 64,
            eta: 0.05,
            mode: CanoMode::Template,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

/// Render a full view. Deterministic for a fixed seed: every pixel draws
/// its jitter from its own seeded stream, so thread scheduling cannot
/// change the output. Pixels whose ray misses the template box get the
/// background color and zero mask.
pub fn render_image(
    prog: &FieldProgram,
    params: &ParamVector,
    camera: &Camera,
    posed: &PosedTemplate,
    cfg: &RenderConfig,
) -> Result<(Image, Mask)> {
    camera.validate()?;
    let width = camera.width;
    let rows: Result<Vec<(Vec<[f64; 3]>, Vec<f64>)>> = (0..camera.height)
        .into_par_iter()
        .map(|py| {
            let mut buf = TapeBuffers::new();
            let mut colors = Vec::with_capacity(width as usize);
            let mut masks = Vec::with_capacity(width as usize);
            for px in 0..width {
                let ray = camera.pixel_ray(px, py);
                let idx = (py as u64) * width as u64 + px as u64;
                let mut rng = crate::rng::stream_indexed(cfg.seed, "render-pixel", idx);
                let set = sample_ray(&ray, posed, cfg.mode, cfg.samples_per_ray, cfg.eta, &mut rng)?;
                let (c, m) = if set.valid_count() < 2 {
                    (cfg.background, 0.0)
                } else {
                    let (raw, m) = render_ray(prog, &mut buf, params, &set)?;
                    (
                        [
                            raw[0] + (1.0 - m) * cfg.background[0],
                            raw[1] + (1.0 - m) * cfg.background[1],
                            raw[2] + (1.0 - m) * cfg.background[2],
                        ],
                        m,
                    )
                };
                colors.push(c);
                masks.push(m);
            }
            Ok((colors, masks))
        })
        .collect();
    let rows = rows?;
    let mut img = Image::new(camera.width, camera.height);
    let mut mask = Mask::new(camera.width, camera.height);
    for (py, (colors, masks)) in rows.into_iter().enumerate() {
        for (px, (c, m)) in colors.into_iter().zip(masks).enumerate() {
            img.set(px as u32, py as u32, c);
            mask.set(px as u32, py as u32, m);
        }
    }
    Ok((img, mask))
}

/// Draw supervised pixel positions for a training batch: uniform over the
/// mask bounding box dilated by `dilate` pixels (the whole image when the
/// mask is empty), so batches mix foreground and nearby background.
pub fn sample_pixels(mask: &Mask, count: usize, dilate: u32, rng: &mut impl Rng) -> Vec<(u32, u32)> {
    let (x0, y0, x1, y1) = match mask.bbox(0.05) {
        Some((x0, y0, x1, y1)) => (
            x0.saturating_sub(dilate),
            y0.saturating_sub(dilate),
            (x1 + dilate).min(mask.width - 1),
            (y1 + dilate).min(mask.height - 1),
        ),
        None => (0, 0, mask.width - 1, mask.height - 1),
    };
    (0..count)
        .map(|_| {
            (
                rng.gen_range(x0..=x1),
                rng.gen_range(y0..=y1),
            )
        })
        .collect()
}

/// Supervised rays for a training batch, ground truth attached.
pub fn draw_training_rays(
    camera: &Camera,
    image: &Image,
    mask: &Mask,
    count: usize,
    dilate: u32,
    rng: &mut impl Rng,
) -> Vec<Ray> {
    sample_pixels(mask, count, dilate, rng)
        .into_iter()
        .map(|(px, py)| {
            let mut ray = camera.pixel_ray(px, py);
            ray.gt_color = image.get(px, py);
            ray.gt_mask = mask.get(px, py);
            ray
        })
        .collect()
}

/// Box-filter downsampling to exactly half resolution (dimensions must be
/// even).
pub fn downsample_half(img: &Image) -> Image {
    let w = img.width / 2;
    let h = img.height / 2;
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let p = img.get(2 * x + dx, 2 * y + dy);
                for k in 0..3 {
                    acc[k] += p[k];
                }
            }
            out.set(x, y, acc.map(|v| v / 4.0));
        }
    }
    out
}

fn gaussian_kernel_5(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    k.map(|v| v / sum)
}

/// Separable 5x5 Gaussian blur with edge replication.
pub fn gaussian_blur_5(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel_5(sigma);
    let w = img.width as i64;
    let h = img.height as i64;
    let mut tmp = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (i, kv) in k.iter().enumerate() {
                let sx = (x + i as i64 - 2).clamp(0, w - 1);
                let p = img.get(sx as u32, y as u32);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            tmp.set(x as u32, y as u32, acc);
        }
    }
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (i, kv) in k.iter().enumerate() {
                let sy = (y + i as i64 - 2).clamp(0, h - 1);
                let p = tmp.get(x as u32, sy as u32);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.set(x as u32, y as u32, acc);
        }
    }
    out
}

fn mask_as_image(mask: &Mask) -> Image {
    Image {
        width: mask.width,
        height: mask.height,
        pixels: mask.values.iter().map(|&v| [v; 3]).collect(),
    }
}

fn image_as_mask(img: &Image) -> Mask {
    Mask {
        width: img.width,
        height: img.height,
        values: img.pixels.iter().map(|p| p[0]).collect(),
    }
}

/// Meta-training preprocessing: halve the resolution, blur with a 5x5
/// Gaussian (sigma 1), and scale the camera intrinsics to match. Masks go
/// through the same pipeline and may become soft.
pub fn meta_preprocess(image: &Image, mask: &Mask, camera: &Camera) -> (Image, Mask, Camera) {
    let img = gaussian_blur_5(&downsample_half(image), 1.0);
    let m = gaussian_blur_5(&downsample_half(&mask_as_image(mask)), 1.0);
    (img, image_as_mask(&m), camera.half_resolution())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difftape::TapeBuffers;
    use crate::field::{FieldConfig, FieldProgram};
    use crate::linalg::dist;
    use crate::mesh::TriMesh;
    use crate::template::{pose_template, Joint, Pose, Skeleton, TemplateMesh};
    use crate::train::{Adam, AdamConfig, GradRunner};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn sphere_template(radius: f64) -> (TemplateMesh, PosedTemplate) {
        let mesh = TriMesh::uv_sphere([0.0, 0.0, 0.0], radius, 10, 16);
        let n = mesh.vertices.len();
        let skeleton = Skeleton {
            joints: vec![Joint {
                name: "root".into(),
                parent: None,
                position: [0.0, 0.0, 0.0],
            }],
        };
        let tpl =
            TemplateMesh::new(mesh, skeleton, vec![vec![(0, 1.0)]; n], Pose::rest(1)).unwrap();
        let posed = pose_template(&tpl, &Pose::rest(1)).unwrap();
        (tpl, posed)
    }

    fn small_field(domain: Aabb) -> (FieldConfig, FieldProgram, ParamVector) {
        let mut cfg = FieldConfig::desk_default(domain);
        cfg.grid.levels = 4;
        cfg.grid.table_size = 1 << 12;
        cfg.grid.finest_resolution = 64;
        cfg.geo_width = 24;
        cfg.color_width = 24;
        cfg.latent = 7;
        let prog = FieldProgram::new(cfg.clone()).unwrap();
        let params = crate::field::init_weights(&cfg, 11);
        (cfg, prog, params)
    }

    #[test]
    fn center_ray_of_a_one_pixel_camera_points_at_the_target() {
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 1, 1, 45.0);
        cam.validate().unwrap();
        let ray = cam.pixel_ray(0, 0);
        assert_relative_eq!(ray.origin[2], 3.0, epsilon = 1e-12);
        assert_relative_eq!(ray.dir[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.dir[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(ray.dir[2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn rays_reproject_to_their_pixel() {
        let cam = Camera::look_at(
            [1.2, 0.8, 2.5],
            [0.0, 0.9, 0.0],
            [0.0, 1.0, 0.0],
            64,
            48,
            50.0,
        );
        cam.validate().unwrap();
        let mut rng = crate::rng::stream(5, "reproject");
        for _ in 0..50 {
            let px = rng.gen_range(0..64u32);
            let py = rng.gen_range(0..48u32);
            let ray = cam.pixel_ray(px, py);
            let p = add(ray.origin, scale(ray.dir, 1.0 + rng.gen::<f64>() * 3.0));
            let (u, v, depth) = cam.project(p).unwrap();
            assert!(depth > 0.0);
            assert_relative_eq!(u, px as f64 + 0.5, epsilon = 1e-9);
            assert_relative_eq!(v, py as f64 + 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn camera_position_matches_look_at_eye() {
        let pos = [0.7, -0.3, 1.9];
        let cam = Camera::look_at(pos, [0.0; 3], [0.0, 1.0, 0.0], 32, 32, 45.0);
        let c = cam.position();
        for a in 0..3 {
            assert_relative_eq!(c[a], pos[a], epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_ray_respects_the_template_band() {
        let (_, posed) = sphere_template(0.5);
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 16, 16, 40.0);
        let ray = cam.pixel_ray(8, 8);
        let mut rng = crate::rng::stream(7, "sample-ray");
        let eta = 0.08;
        let set = sample_ray(&ray, &posed, CanoMode::Template, 48, eta, &mut rng).unwrap();
        assert!(!set.samples.is_empty());
        let mut prev = f64::NEG_INFINITY;
        for s in &set.samples {
            assert!(s.t > prev, "depths must increase");
            prev = s.t;
            assert!(dist(s.world, add(ray.origin, scale(ray.dir, s.t))) < 1e-12);
            assert_eq!(s.valid, s.template_dist <= eta);
            assert_relative_eq!(crate::linalg::norm(s.canonical_dir), 1.0, epsilon = 1e-12);
        }
        assert!(set.valid_count() >= 2, "a center ray crosses the band twice");
        // Identity pose: canonical equals world.
        for s in &set.samples {
            assert!(dist(s.canonical, s.world) < 1e-9);
        }
        // A ray pointing away misses entirely.
        let away = Ray {
            origin: [0.0, 0.0, 3.0],
            dir: [0.0, 0.0, 1.0],
            pixel: (0, 0),
            gt_color: [0.0; 3],
            gt_mask: 0.0,
        };
        let empty = sample_ray(&away, &posed, CanoMode::Template, 48, eta, &mut rng).unwrap();
        assert!(empty.samples.is_empty());
    }

    #[test]
    fn hand_computed_two_sample_composite() {
        let (color, mask) = composite_reference(&[0.5, 0.5], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_relative_eq!(color[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(color[1], 0.25, epsilon = 1e-15);
        assert_relative_eq!(color[2], 0.0, epsilon = 1e-15);
        assert_relative_eq!(mask, 0.75, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn composited_mask_stays_in_unit_range(alphas in proptest::collection::vec(0.0f64..=1.0, 0..12)) {
            let colors = vec![[1.0, 1.0, 1.0]; alphas.len()];
            let (color, mask) = composite_reference(&alphas, &colors);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&mask));
            for c in color {
                prop_assert!(c <= mask + 1e-12);
            }
        }
    }

    /// Independent implementation of the compositing equation, straight
    /// from the definition with naive logistic CDFs.
    fn brute_force_ray(
        prog: &FieldProgram,
        buf: &mut TapeBuffers,
        params: &ParamVector,
        set: &SampleSet,
        k: f64,
    ) -> ([f64; 3], f64) {
        let phi = |s: f64| 1.0 / (1.0 + (-k * s).exp());
        let valid: Vec<&Sample> = set.samples.iter().filter(|s| s.valid).collect();
        let mut sdfs = Vec::new();
        let mut colors = Vec::new();
        for s in &valid {
            let out = prog
                .eval_field(buf, params, s.canonical, s.canonical_dir)
                .unwrap();
            sdfs.push(out.sdf);
            colors.push(out.color);
        }
        if valid.len() < 2 {
            return ([0.0; 3], 0.0);
        }
        let alphas: Vec<f64> = (0..valid.len() - 1)
            .map(|i| ((phi(sdfs[i]) - phi(sdfs[i + 1])) / phi(sdfs[i])).max(0.0))
            .collect();
        composite_reference(&alphas, &colors)
    }

    #[test]
    fn render_ray_matches_the_brute_force_equation() {
        let (_, posed) = sphere_template(0.5);
        let domain = posed.aabb.dilate(0.2);
        let (_, prog, params) = small_field(domain);
        let cam = Camera::look_at([0.4, 0.3, 2.8], [0.0; 3], [0.0, 1.0, 0.0], 24, 24, 40.0);
        let mut buf = TapeBuffers::new();
        let k = crate::field::sharpness_effective_from_raw(params.segment("sharpness")[0]);
        let mut rng = crate::rng::stream(13, "brute");
        let mut checked = 0;
        for px in 8..16 {
            let ray = cam.pixel_ray(px, 12);
            let set = sample_ray(&ray, &posed, CanoMode::Template, 32, 0.1, &mut rng).unwrap();
            if set.valid_count() < 2 {
                continue;
            }
            checked += 1;
            let (c, m) = render_ray(&prog, &mut buf, &params, &set).unwrap();
            let (cb, mb) = brute_force_ray(&prog, &mut buf, &params, &set, k);
            assert!((m - mb).abs() <= 1e-12, "mask {m} vs {mb}");
            for a in 0..3 {
                assert!((c[a] - cb[a]).abs() <= 1e-12, "color {} vs {}", c[a], cb[a]);
            }
        }
        assert!(checked >= 4, "too few rays crossed the template");
    }

    /// Fit the field to a plane SDF, then check that the largest render
    /// weight lands on a sample bracketing the zero crossing.
    #[test]
    fn render_weight_peaks_at_the_surface_crossing() {
        let domain = Aabb {
            lo: [-1.0; 3],
            hi: [1.0; 3],
        };
        // A larger table keeps the coarse levels dense; dense trilinear
        // levels reproduce a linear SDF exactly, so the fit can get tight.
        let mut cfg = FieldConfig::desk_default(domain);
        cfg.grid.levels = 4;
        cfg.grid.table_size = 1 << 15;
        cfg.grid.finest_resolution = 64;
        cfg.geo_width = 24;
        cfg.color_width = 24;
        cfg.latent = 7;
        let prog = FieldProgram::new(cfg.clone()).unwrap();
        let mut params = crate::field::init_weights(&cfg, 11);
        let mut rng = crate::rng::stream(21, "plane-fit");
        let mut adam = Adam::new(
            AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            params.len(),
        );
        let mut runner = GradRunner::new(1);
        for _ in 0..500 {
            let pts: Vec<V3> = (0..256)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let mut grad = vec![0.0; params.len()];
            runner
                .run(&params, &pts, |t, chunk| {
                    let mut acc = t.scalar(0.0);
                    for p in chunk {
                        let s = prog.sdf_value(t, *p);
                        let d = t.add_const(s, -p[2]);
                        let sq = t.mul(d, d);
                        acc = t.add(acc, sq);
                    }
                    t.scale(acc, 1.0 / 256.0)
                }, &mut grad)
                .unwrap();
            adam.step(&mut params.values, &grad);
        }
        // Freeze a plausible sharpness so alphas are informative.
        params.segment_mut("sharpness")[0] = crate::field::sharpness_raw_from_effective(40.0);
        // The fit must actually track the plane along the probed line.
        {
            let mut buf = TapeBuffers::new();
            let mut worst = 0.0f64;
            for i in 0..17 {
                let z = -0.8 + 1.6 * i as f64 / 16.0;
                let p = [0.1, -0.2, z];
                let out = prog.eval_field(&mut buf, &params, p, [0.0, 0.0, 1.0]).unwrap();
                worst = worst.max((out.sdf - z).abs());
            }
            assert!(worst < 0.1, "plane fit residual {worst}");
        }

        // A straight ray entering the half-space: the SDF decreases along
        // the ray and crosses zero at t = 1.0.
        let n = 33;
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let t = 0.2 + 1.6 * (i as f64 + 0.5) / n as f64;
                let p = [0.1, -0.2, 1.0 - t];
                Sample {
                    t,
                    world: p,
                    canonical: p,
                    canonical_dir: [0.0, 0.0, -1.0],
                    template_dist: 0.0,
                    valid: true,
                }
            })
            .collect();
        let set = SampleSet { samples };
        let mut buf = TapeBuffers::new();
        let mut tape = buf.tape(&params);
        let sharp = prog.sharpness(&mut tape);
        let rg = build_ray_graph(&prog, &mut tape, sharp, &set);
        let k = tape.scalar_value(sharp);
        let sdf_vals: Vec<f64> = rg.geo.iter().map(|g| tape.scalar_value(g.sdf)).collect();
        let phi = |s: f64| 1.0 / (1.0 + (-k * s).exp());
        let alphas: Vec<f64> = (0..n - 1)
            .map(|i| ((phi(sdf_vals[i]) - phi(sdf_vals[i + 1])) / phi(sdf_vals[i])).max(0.0))
            .collect();
        let mut trans = 1.0;
        let mut best = (0usize, -1.0);
        for (i, a) in alphas.iter().enumerate() {
            let w = trans * a;
            if w > best.1 {
                best = (i, w);
            }
            trans *= 1.0 - a;
        }
        // The crossing sits between samples bracketing z = 0.
        let cross = set
            .samples
            .windows(2)
            .position(|w| w[0].canonical[2] >= 0.0 && w[1].canonical[2] < 0.0)
            .unwrap();
        assert!(
            best.0.abs_diff(cross) <= 1,
            "weight argmax {} vs crossing {}",
            best.0,
            cross
        );
        assert!(best.1 > 0.1, "crossing weight should dominate");
    }

    #[test]
    fn loss_values_match_hand_computation_on_degenerate_rays() {
        let domain = Aabb {
            lo: [-1.0; 3],
            hi: [1.0; 3],
        };
        let (_, prog, params) = small_field(domain);
        let mut buf = TapeBuffers::new();
        // A ray with no valid samples renders black with zero mask.
        let empty = SupervisedRay {
            samples: SampleSet::default(),
            gt_color: [0.0; 3],
            gt_mask: 0.0,
        };
        let items = [LossItem::Ray(empty.clone())];
        let w = LossWeights::default();
        let (total, parts) =
            compute_loss(&prog, &mut buf, &params, &items, &w, HUBER_DELTA, [0.0; 3]).unwrap();
        // Color exactly zero, mask BCE = -ln(1 - eps).
        assert_relative_eq!(parts.color, 0.0, epsilon = 1e-15);
        let bg_bce = -(1.0f64 - BCE_EPS).ln();
        assert_relative_eq!(parts.mask, bg_bce, epsilon = 1e-12);
        assert_relative_eq!(total, w.mask * bg_bce, epsilon = 1e-12);

        // Same ray but labeled foreground: BCE = -ln(eps).
        let fg = SupervisedRay {
            gt_mask: 1.0,
            ..empty
        };
        let (_, parts) = compute_loss(
            &prog,
            &mut buf,
            &params,
            &[LossItem::Ray(fg)],
            &w,
            HUBER_DELTA,
            [0.0; 3],
        )
        .unwrap();
        assert_relative_eq!(parts.mask, -(BCE_EPS.ln()), epsilon = 1e-9);

        // Uniform-point terms equal the independently computed means of
        // exp(-|s|) and (|grad s| - 1)^2 over the same points.
        let mut rng = crate::rng::stream(3, "loss-uniform");
        let pts = uniform_box_points(&domain, 32, &mut rng);
        let mut want_sparse = 0.0;
        let mut want_eik = 0.0;
        for p in &pts {
            let out = prog.eval_field(&mut buf, &params, *p, [0.0, 0.0, 1.0]).unwrap();
            want_sparse += (-out.sdf.abs()).exp();
            let g = crate::linalg::norm(out.normal);
            want_eik += (g - 1.0) * (g - 1.0);
        }
        want_sparse /= pts.len() as f64;
        want_eik /= pts.len() as f64;
        let uni: Vec<LossItem> = pts.into_iter().map(LossItem::Uniform).collect();
        let (total, parts) =
            compute_loss(&prog, &mut buf, &params, &uni, &w, HUBER_DELTA, [0.0; 3]).unwrap();
        assert_relative_eq!(parts.sparse, want_sparse, epsilon = 1e-9);
        assert_relative_eq!(parts.eikonal, want_eik, epsilon = 1e-7);
        assert_relative_eq!(
            total,
            w.eikonal * want_eik + w.sparse * want_sparse,
            epsilon = 1e-7
        );
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (_, posed) = sphere_template(0.5);
        let domain = posed.aabb.dilate(0.2);
        let (_, prog, params) = small_field(domain);
        let cam = Camera::look_at([0.2, 0.1, 2.6], [0.0; 3], [0.0, 1.0, 0.0], 16, 16, 40.0);
        let mut rng = crate::rng::stream(17, "loss-fd");
        let mut items = Vec::new();
        for px in [7u32, 8] {
            let mut ray = cam.pixel_ray(px, 8);
            ray.gt_color = [0.4, 0.5, 0.6];
            ray.gt_mask = 1.0;
            let samples = sample_ray(&ray, &posed, CanoMode::Template, 24, 0.1, &mut rng).unwrap();
            assert!(samples.valid_count() >= 2);
            items.push(LossItem::Ray(SupervisedRay {
                samples,
                gt_color: ray.gt_color,
                gt_mask: ray.gt_mask,
            }));
        }
        for p in uniform_box_points(&domain, 8, &mut rng) {
            items.push(LossItem::Uniform(p));
        }
        let weights = LossWeights::default();
        let norm = LossNorm::for_items(&items);
        let build = |t: &mut Tape| {
            build_loss_graph(&prog, t, &items, &weights, HUBER_DELTA, [0.1, 0.2, 0.3], &norm).0
        };
        let (_, grad) = crate::difftape::grad(&params, &build).unwrap();
        // Probe parameters whose gradient clears the central-difference
        // noise floor (loss is O(1), so differences near 1e-6 of it drown
        // in roundoff), spread across the vector, plus the sharpness.
        let mut idx: Vec<usize> = grad
            .iter()
            .enumerate()
            .filter(|(_, g)| g.abs() > 1e-3)
            .map(|(i, _)| i)
            .collect();
        assert!(idx.len() > 50, "loss should touch many parameters");
        let step = idx.len() / 24;
        idx = idx.into_iter().step_by(step.max(1)).take(24).collect();
        idx.push(params.len() - 1);
        // Check against two steps and accept the better agreement per
        // parameter: truncation error falls with the step, roundoff grows
        // with its inverse, while a wrong analytic gradient disagrees at
        // every step.
        let fine = crate::difftape::finite_diff_check(&params, &idx, 3e-7, &build).unwrap();
        let coarse = crate::difftape::finite_diff_check(&params, &idx, 1e-6, &build).unwrap();
        for (j, &i) in idx.iter().enumerate() {
            let rel = |a: f64, fd: f64| (a - fd).abs() / fd.abs().max(1e-8);
            let best = rel(fine.analytic[j], fine.numeric[j])
                .min(rel(coarse.analytic[j], coarse.numeric[j]));
            assert!(best < 1e-4, "rel err {best} at parameter {i}");
        }
    }

    #[test]
    fn chunked_loss_matches_unchunked() {
        let (_, posed) = sphere_template(0.5);
        let domain = posed.aabb.dilate(0.2);
        let (_, prog, params) = small_field(domain);
        let cam = Camera::look_at([0.0, 0.2, 2.7], [0.0; 3], [0.0, 1.0, 0.0], 16, 16, 40.0);
        let mut rng = crate::rng::stream(19, "chunked-loss");
        let mut items = Vec::new();
        for px in 6..10u32 {
            let mut ray = cam.pixel_ray(px, 8);
            ray.gt_color = [0.2, 0.3, 0.4];
            ray.gt_mask = 1.0;
            let samples = sample_ray(&ray, &posed, CanoMode::Template, 16, 0.1, &mut rng).unwrap();
            items.push(LossItem::Ray(SupervisedRay {
                samples,
                gt_color: ray.gt_color,
                gt_mask: ray.gt_mask,
            }));
        }
        for p in uniform_box_points(&domain, 12, &mut rng) {
            items.push(LossItem::Uniform(p));
        }
        let weights = LossWeights::default();
        let norm = LossNorm::for_items(&items);
        let run = |k: usize| {
            let mut runner = GradRunner::new(k);
            let mut grad = vec![0.0; params.len()];
            let loss = runner
                .run(&params, &items, |t, chunk| {
                    build_loss_graph(&prog, t, chunk, &weights, HUBER_DELTA, [0.0; 3], &norm).0
                }, &mut grad)
                .unwrap();
            (loss, grad)
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_relative_eq!(l1, l4, epsilon = 1e-12, max_relative = 1e-12);
        for (a, b) in g1.iter().zip(&g4) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn render_image_is_deterministic_for_a_seed() {
        let (_, posed) = sphere_template(0.5);
        let domain = posed.aabb.dilate(0.2);
        let (_, prog, params) = small_field(domain);
        let cam = Camera::look_at([0.0, 0.0, 2.8], [0.0; 3], [0.0, 1.0, 0.0], 8, 8, 40.0);
        let cfg = RenderConfig {
            samples_per_ray: 12,
            eta: 0.1,
            background: [0.3, 0.0, 0.0],
            seed: 42,
            ..RenderConfig::default()
        };
        let (img1, mask1) = render_image(&prog, &params, &cam, &posed, &cfg).unwrap();
        let (img2, mask2) = render_image(&prog, &params, &cam, &posed, &cfg).unwrap();
        assert_eq!(img1, img2);
        assert_eq!(mask1, mask2);
        let other = RenderConfig { seed: 43, ..cfg };
        let (img3, _) = render_image(&prog, &params, &cam, &posed, &other).unwrap();
        assert_ne!(img1, img3, "different jitter should shift some pixel");
        // Corner pixels miss the dilated sphere and show the background.
        assert_eq!(img1.get(0, 0), [0.3, 0.0, 0.0]);
        assert_eq!(mask1.get(0, 0), 0.0);
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(5, 4);
        let mut mask = Mask::new(5, 4);
        for y in 0..4 {
            for x in 0..5 {
                let v = (x + 5 * y) as f64 / 19.0;
                img.set(x, y, [v, 1.0 - v, v * v]);
                mask.set(x, y, v);
            }
        }
        let ip = dir.path().join("img.png");
        let mp = dir.path().join("mask.png");
        img.save_png(&ip).unwrap();
        mask.save_png(&mp).unwrap();
        let img2 = Image::load_png(&ip).unwrap();
        let mask2 = Mask::load_png(&mp).unwrap();
        for (a, b) in img.pixels.iter().zip(&img2.pixels) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        // Quantized values round-trip exactly.
        let img3 = {
            let q = Image {
                width: img2.width,
                height: img2.height,
                pixels: img2.pixels.clone(),
            };
            q.save_png(&ip).unwrap();
            Image::load_png(&ip).unwrap()
        };
        assert_eq!(img2, img3);
        for (a, b) in mask.values.iter().zip(&mask2.values) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn meta_preprocess_halves_and_smooths() {
        let mut img = Image::new(8, 8);
        let mut mask = Mask::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, [0.25, 0.5, 0.75]);
                mask.set(x, y, 1.0);
            }
        }
        let cam = Camera::look_at([0.0, 0.0, 2.0], [0.0; 3], [0.0, 1.0, 0.0], 8, 8, 45.0);
        let (img2, mask2, cam2) = meta_preprocess(&img, &mask, &cam);
        assert_eq!((img2.width, img2.height), (4, 4));
        assert_eq!((cam2.width, cam2.height), (4, 4));
        assert_relative_eq!(cam2.fx, cam.fx / 2.0, epsilon = 1e-15);
        assert_relative_eq!(cam2.cx, cam.cx / 2.0, epsilon = 1e-15);
        // Constant inputs stay constant through box filter and blur.
        for p in &img2.pixels {
            assert_relative_eq!(p[1], 0.5, epsilon = 1e-12);
        }
        for v in &mask2.values {
            assert_relative_eq!(v, &1.0, epsilon = 1e-12);
        }
        // A bright dot spreads but keeps its mass when the kernel stays
        // clear of the borders.
        let mut dot = Image::new(12, 12);
        dot.set(6, 6, [1.0, 1.0, 1.0]);
        let half = downsample_half(&dot);
        assert_relative_eq!(half.get(3, 3)[0], 0.25, epsilon = 1e-15);
        let blurred = gaussian_blur_5(&half, 1.0);
        let sum: f64 = blurred.pixels.iter().map(|p| p[0]).sum();
        assert_relative_eq!(sum, 0.25, epsilon = 1e-12);
        assert!(blurred.get(3, 3)[0] < 0.25, "the dot must spread");
    }

    #[test]
    fn pixel_batches_stay_inside_the_dilated_bbox() {
        let mut mask = Mask::new(32, 32);
        for y in 10..20 {
            for x in 12..18 {
                mask.set(x, y, 1.0);
            }
        }
        let mut rng = crate::rng::stream(23, "pixel-batch");
        let picks = sample_pixels(&mask, 200, 4, &mut rng);
        for (x, y) in picks {
            assert!((8..=21).contains(&x), "x {x}");
            assert!((6..=23).contains(&y), "y {y}");
        }
        // Empty mask falls back to the full image.
        let empty = Mask::new(16, 16);
        let picks = sample_pixels(&empty, 100, 4, &mut rng);
        assert!(picks.iter().all(|&(x, y)| x < 16 && y < 16));
    }
}

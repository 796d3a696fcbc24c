//! Synthetic articulated-body scenes with analytic ground truth.
//!
//! The subject is a union of colored capsules rigidly attached to skeleton
//! bones, so its signed distance, surface normals, and silhouettes are exact
//! closed forms in any pose. Scenes are sphere-traced into images and masks,
//! the capsule surfaces are triangulated into a rigidly skinned template, and
//! ground-truth meshes come from the same distance field, which makes every
//! downstream reconstruction metric checkable against an oracle.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, CameraRecord, TemplateRecord};
use crate::linalg::{add, cross, dist, dot, normalize, scale, sub, V3};
use crate::mesh::{isosurface, Aabb, TriMesh};
use crate::renderer::{Camera, Image, Mask};
use crate::rng::stream_indexed;
use crate::template::{
    forward_kinematics, Joint, Pose, SkeletalMotion, Skeleton, SkinWeights, TemplateMesh,
};
use crate::{Error, Result};

/// Sphere-tracing hit tolerance in meters.
pub const TRACE_TOL: f64 = 1e-5;
/// Sphere-tracing step budget per ray.
pub const TRACE_MAX_STEPS: usize = 256;

/// Fixed directional light for Lambert shading.
pub fn light_dir() -> V3 {
    normalize([0.4, 1.0, 0.6])
}

/// One capsule bone: a segment with radius and albedo, rigidly attached to a
/// skeleton joint. Endpoints are in canonical (rest) space.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capsule {
    pub joint: usize,
    pub a: V3,
    pub b: V3,
    pub radius: f64,
    pub color: [f64; 3],
}

/// The synthetic subject: a skeleton plus capsules attached to its joints.
/// The canonical pose is the skeleton's rest pose.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticBody {
    pub skeleton: Skeleton,
    pub capsules: Vec<Capsule>,
}

impl AnalyticBody {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        if self.capsules.is_empty() {
            return Err(Error::data("body has no capsules"));
        }
        for (i, c) in self.capsules.iter().enumerate() {
            if c.joint >= self.skeleton.len() {
                return Err(Error::data(format!(
                    "capsule {i} attached to joint {}, skeleton has {}",
                    c.joint,
                    self.skeleton.len()
                )));
            }
            if !(c.radius > 0.0 && c.radius.is_finite()) {
                return Err(Error::data(format!("capsule {i} has radius {}", c.radius)));
            }
            for x in c.a.iter().chain(c.b.iter()).chain(c.color.iter()) {
                if !x.is_finite() {
                    return Err(Error::data(format!("capsule {i} has non-finite data")));
                }
            }
        }
        Ok(())
    }

    /// The default ten-capsule human: torso, head, and paired upper arms,
    /// forearms, thighs, and shins, each on its own joint with a distinct
    /// saturated color.
    pub fn desk_body() -> AnalyticBody {
        let joint = |name: &str, parent: Option<usize>, position: V3| Joint {
            name: name.to_string(),
            parent,
            position,
        };
        let skeleton = Skeleton {
            joints: vec![
                joint("pelvis", None, [0.0, 1.0, 0.0]),
                joint("neck", Some(0), [0.0, 1.45, 0.0]),
                joint("l_shoulder", Some(1), [0.20, 1.45, 0.0]),
                joint("l_elbow", Some(2), [0.45, 1.45, 0.0]),
                joint("r_shoulder", Some(1), [-0.20, 1.45, 0.0]),
                joint("r_elbow", Some(4), [-0.45, 1.45, 0.0]),
                joint("l_hip", Some(0), [0.10, 0.95, 0.0]),
                joint("l_knee", Some(6), [0.10, 0.55, 0.0]),
                joint("r_hip", Some(0), [-0.10, 0.95, 0.0]),
                joint("r_knee", Some(8), [-0.10, 0.55, 0.0]),
            ],
        };
        let capsule = |joint: usize, a: V3, b: V3, radius: f64, color: [f64; 3]| Capsule {
            joint,
            a,
            b,
            radius,
            color,
        };
        let capsules = vec![
            capsule(0, [0.0, 1.0, 0.0], [0.0, 1.45, 0.0], 0.14, [0.90, 0.20, 0.20]),
            capsule(1, [0.0, 1.45, 0.0], [0.0, 1.70, 0.0], 0.11, [0.95, 0.75, 0.20]),
            capsule(2, [0.20, 1.45, 0.0], [0.45, 1.45, 0.0], 0.05, [0.20, 0.80, 0.30]),
            capsule(3, [0.45, 1.45, 0.0], [0.70, 1.45, 0.0], 0.045, [0.10, 0.60, 0.90]),
            capsule(4, [-0.20, 1.45, 0.0], [-0.45, 1.45, 0.0], 0.05, [0.70, 0.30, 0.90]),
            capsule(5, [-0.45, 1.45, 0.0], [-0.70, 1.45, 0.0], 0.045, [0.90, 0.50, 0.10]),
            capsule(6, [0.10, 0.95, 0.0], [0.10, 0.55, 0.0], 0.07, [0.20, 0.30, 0.90]),
            capsule(7, [0.10, 0.55, 0.0], [0.10, 0.12, 0.0], 0.055, [0.80, 0.20, 0.60]),
            capsule(8, [-0.10, 0.95, 0.0], [-0.10, 0.55, 0.0], 0.07, [0.10, 0.80, 0.80]),
            capsule(9, [-0.10, 0.55, 0.0], [-0.10, 0.12, 0.0], 0.055, [0.60, 0.90, 0.20]),
        ];
        AnalyticBody { skeleton, capsules }
    }
}

/// Closest point on segment [a, b] to p.
pub fn segment_closest(p: V3, a: V3, b: V3) -> V3 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 < 1e-30 {
        return a;
    }
    let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
    add(a, scale(ab, t))
}

/// Exact capsule signed distance: distance to the core segment minus the
/// radius. A zero-length segment degenerates to a sphere.
pub fn capsule_sdf(p: V3, a: V3, b: V3, radius: f64) -> f64 {
    dist(p, segment_closest(p, a, b)) - radius
}

/// A capsule with endpoints moved into world space by a posed bone.
#[derive(Clone, Debug)]
pub struct PosedCapsule {
    pub a: V3,
    pub b: V3,
    pub radius: f64,
    pub color: [f64; 3],
}

/// The body in one pose, with world-space capsule endpoints precomputed.
#[derive(Clone, Debug)]
pub struct PosedBody {
    pub capsules: Vec<PosedCapsule>,
}

impl PosedBody {
    pub fn new(body: &AnalyticBody, pose: &Pose) -> Result<PosedBody> {
        let transforms = forward_kinematics(&body.skeleton, pose)?;
        let capsules = body
            .capsules
            .iter()
            .map(|c| {
                let g = &transforms[c.joint];
                PosedCapsule {
                    a: g.transform_point(c.a),
                    b: g.transform_point(c.b),
                    radius: c.radius,
                    color: c.color,
                }
            })
            .collect();
        Ok(PosedBody { capsules })
    }

    /// Signed distance and the index of the closest capsule.
    pub fn sdf(&self, p: V3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.capsules.iter().enumerate() {
            let s = capsule_sdf(p, c.a, c.b, c.radius);
            if s < best.0 {
                best = (s, i);
            }
        }
        best
    }

    /// Exact outward surface normal taken from the closest capsule.
    pub fn normal(&self, p: V3) -> V3 {
        let (_, i) = self.sdf(p);
        let c = &self.capsules[i];
        normalize(sub(p, segment_closest(p, c.a, c.b)))
    }

    /// World-space bounds of the posed body surface.
    pub fn aabb(&self) -> Aabb {
        let mut bb = Aabb::empty();
        for c in &self.capsules {
            for p in [c.a, c.b] {
                bb.expand(add(p, [c.radius; 3]));
                bb.expand(sub(p, [c.radius; 3]));
            }
        }
        bb
    }

    /// Minimum of the signed distance along the ray o + t d, t >= 0. Exact:
    /// the per-capsule minimum is the ray-to-segment distance minus the
    /// radius, and the minimum over capsules commutes.
    pub fn min_sdf_along_ray(&self, o: V3, d: V3) -> f64 {
        self.capsules
            .iter()
            .map(|c| ray_segment_distance(o, d, c.a, c.b) - c.radius)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Distance between the ray o + t d (t >= 0, d unit) and segment [a, b].
fn ray_segment_distance(o: V3, d: V3, a: V3, b: V3) -> f64 {
    let u = sub(b, a);
    let w = sub(o, a);
    let uu = dot(u, u);
    if uu < 1e-30 {
        // Degenerate segment: distance from point a to the ray.
        let t = dot(sub(a, o), d).max(0.0);
        return dist(a, add(o, scale(d, t)));
    }
    let ud = dot(u, d);
    let uw = dot(u, w);
    let dw = dot(d, w);
    let denom = uu - ud * ud; // d is unit
    let (mut s, mut t);
    if denom.abs() < 1e-14 * uu {
        // Parallel: fix s = 0 and use the closest ray point.
        s = 0.0;
        t = -dw;
    } else {
        s = (uw - ud * dw) / denom;
        t = (ud * uw - uu * dw) / denom;
    }
    // Clamp into s in [0, 1], t >= 0 and re-solve the free variable.
    if t < 0.0 {
        t = 0.0;
        s = (uw / uu).clamp(0.0, 1.0);
    } else {
        if s < 0.0 {
            s = 0.0;
        } else if s > 1.0 {
            s = 1.0;
        } else {
            return dist(add(a, scale(u, s)), add(o, scale(d, t)));
        }
        t = (dot(sub(add(a, scale(u, s)), o), d)).max(0.0);
    }
    dist(add(a, scale(u, s)), add(o, scale(d, t)))
}

/// Evaluates the body's signed distance and the closest capsule's albedo at
/// a world point, in the given pose.
pub fn analytic_sdf(body: &AnalyticBody, pose: &Pose, p: V3) -> Result<(f64, [f64; 3])> {
    let posed = PosedBody::new(body, pose)?;
    let (s, i) = posed.sdf(p);
    Ok((s, posed.capsules[i].color))
}

/// Lambert shading with a fixed ambient floor.
pub fn shade(albedo: [f64; 3], normal: V3) -> [f64; 3] {
    let lambert = 0.35 + 0.65 * dot(normal, light_dir()).max(0.0);
    [
        albedo[0] * lambert,
        albedo[1] * lambert,
        albedo[2] * lambert,
    ]
}

/// Sphere-traces one ray against the posed body. Returns the hit point and
/// capsule index, or None on a miss.
pub fn trace_ray(posed: &PosedBody, bounds: &Aabb, o: V3, d: V3) -> Option<(V3, usize)> {
    let (t0, t1) = bounds.ray_range(o, d)?;
    let mut t = t0.max(0.0);
    for _ in 0..TRACE_MAX_STEPS {
        let p = add(o, scale(d, t));
        let (s, i) = posed.sdf(p);
        if s < TRACE_TOL {
            return Some((p, i));
        }
        t += s;
        if t > t1 {
            return None;
        }
    }
    None
}

/// Renders the posed body into an exact image/mask pair by sphere tracing.
/// Optional Gaussian pixel noise (std `noise_sigma`) perturbs the image only;
/// the mask stays exact. Deterministic for a seed regardless of thread count.
pub fn raytrace_gt(
    posed: &PosedBody,
    camera: &Camera,
    background: [f64; 3],
    noise_sigma: f64,
    seed: u64,
) -> (Image, Mask) {
    let bounds = posed.aabb();
    let w = camera.width;
    let h = camera.height;
    let rows: Vec<Vec<([f64; 3], f64)>> = (0..h)
        .into_par_iter()
        .map(|py| {
            (0..w)
                .map(|px| {
                    let ray = camera.pixel_ray(px, py);
                    match trace_ray(posed, &bounds, ray.origin, ray.dir) {
                        Some((p, i)) => {
                            let c = &posed.capsules[i];
                            let n = normalize(sub(p, segment_closest(p, c.a, c.b)));
                            let mut color = shade(c.color, n);
                            if noise_sigma > 0.0 {
                                let idx = py as u64 * w as u64 + px as u64;
                                let mut rng = stream_indexed(seed, "pixel-noise", idx);
                                for ch in color.iter_mut() {
                                    *ch = (*ch + noise_sigma * standard_normal(&mut rng))
                                        .clamp(0.0, 1.0);
                                }
                            }
                            (color, 1.0)
                        }
                        None => (background, 0.0),
                    }
                })
                .collect()
        })
        .collect();
    let mut image = Image::new(w, h);
    let mut mask = Mask::new(w, h);
    for (py, row) in rows.iter().enumerate() {
        for (px, (color, m)) in row.iter().enumerate() {
            image.set(px as u32, py as u32, *color);
            mask.set(px as u32, py as u32, *m);
        }
    }
    (image, mask)
}

/// One standard normal draw by the Box-Muller transform.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Camera rig shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Evenly spaced on a horizontal circle at `camera_height`.
    Ring,
    /// Fibonacci-spiral points on a full sphere around `look_at`.
    Sphere,
}

/// Declarative description of a synthetic capture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub cameras: usize,
    pub placement: Placement,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub width: u32,
    pub height: u32,
    pub vfov_deg: f64,
    pub look_at: V3,
    pub frames: usize,
    pub seed: u64,
    pub motion_amplitude: f64,
    pub background: [f64; 3],
    pub noise_sigma: f64,
    pub gt_mesh_resolution: usize,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            cameras: 8,
            placement: Placement::Ring,
            camera_radius: 2.8,
            camera_height: 1.0,
            width: 64,
            height: 64,
            vfov_deg: 45.0,
            look_at: [0.0, 0.95, 0.0],
            frames: 12,
            seed: 0,
            motion_amplitude: 0.35,
            background: [0.0; 3],
            noise_sigma: 0.0,
            gt_mesh_resolution: 96,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras == 0 {
            return Err(Error::data("scene needs at least one camera"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::data("image dimensions must be at least 16"));
        }
        if self.frames == 0 {
            return Err(Error::data("scene needs at least one frame"));
        }
        if !(self.vfov_deg > 0.0 && self.vfov_deg < 180.0) {
            return Err(Error::data("vertical fov must be in (0, 180) degrees"));
        }
        if !(self.camera_radius > 0.0) {
            return Err(Error::data("camera radius must be positive"));
        }
        if !(self.motion_amplitude >= 0.0) {
            return Err(Error::data("motion amplitude must be non-negative"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::data("noise sigma must be non-negative"));
        }
        if self.gt_mesh_resolution < 16 {
            return Err(Error::data("ground-truth mesh resolution must be at least 16"));
        }
        Ok(())
    }
}

/// Places the rig described by the spec.
pub fn place_cameras(spec: &SceneSpec) -> Vec<Camera> {
    let n = spec.cameras;
    (0..n)
        .map(|i| {
            let pos = match spec.placement {
                Placement::Ring => {
                    let ang = std::f64::consts::TAU * i as f64 / n as f64;
                    [
                        spec.camera_radius * ang.sin(),
                        spec.camera_height,
                        spec.camera_radius * ang.cos(),
                    ]
                }
                Placement::Sphere => {
                    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).max(0.0).sqrt();
                    let ang = golden * i as f64;
                    add(
                        spec.look_at,
                        scale([r * ang.cos(), y, r * ang.sin()], spec.camera_radius),
                    )
                }
            };
            let dir = normalize(sub(spec.look_at, pos));
            // Near-vertical viewing directions need a different up vector.
            let up = if dir[1].abs() > 0.99 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            Camera::look_at(pos, spec.look_at, up, spec.width, spec.height, spec.vfov_deg)
        })
        .collect()
}

/// Draws the per-frame motion: frame 0 is the rest pose, later frames get
/// independent uniform joint perturbations plus root yaw and drift, each from
/// its own seeded stream so frames regenerate independently.
pub fn sample_motion(
    skeleton: &Skeleton,
    frames: usize,
    amplitude: f64,
    seed: u64,
) -> SkeletalMotion {
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        if f == 0 || amplitude == 0.0 {
            out.push(Pose::rest(skeleton.len()));
            continue;
        }
        let mut rng = stream_indexed(seed, "motion", f as u64);
        let mut draw = |scl: f64| rng.gen_range(-amplitude..=amplitude) * scl;
        let mut theta = vec![[0.0; 3]; skeleton.len()];
        for row in theta.iter_mut().skip(1) {
            for c in row.iter_mut() {
                *c = draw(1.0);
            }
        }
        let root_rot = [0.0, draw(1.0), 0.0];
        let root_pos = [draw(0.3), 0.0, draw(0.3)];
        out.push(Pose {
            theta,
            root_rot,
            root_pos,
        });
    }
    SkeletalMotion { frames: out }
}

/// Triangulates one capsule: two hemispherical caps joined by a cylinder,
/// `slices` around the axis and `stacks` rings per hemisphere. Vertices lie
/// exactly on the capsule surface; winding is outward.
pub fn capsule_mesh(a: V3, b: V3, radius: f64, slices: usize, stacks: usize) -> Result<TriMesh> {
    assert!(slices >= 3 && stacks >= 1);
    let axis = sub(b, a);
    let len = dot(axis, axis).sqrt();
    if len < 1e-9 {
        return Err(Error::data("capsule has coincident endpoints; cannot mesh"));
    }
    let u = scale(axis, 1.0 / len);
    let pick = if u[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let e1 = normalize(cross(u, pick));
    let e2 = cross(u, e1);
    // Ring ladder: lower hemisphere (pole at a - u r up to the a equator),
    // then the b equator, then the upper hemisphere rings below its pole.
    let mut rings: Vec<(V3, f64)> = Vec::new();
    for s in 1..=stacks {
        let phi = -std::f64::consts::FRAC_PI_2 * (1.0 - s as f64 / stacks as f64);
        rings.push((add(a, scale(u, radius * phi.sin())), radius * phi.cos()));
    }
    for s in 0..stacks {
        let phi = std::f64::consts::FRAC_PI_2 * s as f64 / stacks as f64;
        rings.push((add(b, scale(u, radius * phi.sin())), radius * phi.cos()));
    }
    let mut mesh = TriMesh::default();
    mesh.vertices.push(sub(a, scale(u, radius)));
    for (center, rho) in &rings {
        for j in 0..slices {
            let ang = std::f64::consts::TAU * j as f64 / slices as f64;
            mesh.vertices.push(add(
                *center,
                add(scale(e1, rho * ang.cos()), scale(e2, rho * ang.sin())),
            ));
        }
    }
    mesh.vertices.push(add(b, scale(u, radius)));
    let ring_base = |k: usize| 1 + k * slices;
    let top = (mesh.vertices.len() - 1) as u32;
    for j in 0..slices {
        let jn = (j + 1) % slices;
        // Bottom fan around the a pole.
        mesh.faces.push([
            0,
            (ring_base(0) + jn) as u32,
            (ring_base(0) + j) as u32,
        ]);
        // Quad strips between consecutive rings.
        for k in 0..rings.len() - 1 {
            let a0 = (ring_base(k) + j) as u32;
            let a1 = (ring_base(k) + jn) as u32;
            let b0 = (ring_base(k + 1) + j) as u32;
            let b1 = (ring_base(k + 1) + jn) as u32;
            mesh.faces.push([a0, a1, b1]);
            mesh.faces.push([a0, b1, b0]);
        }
        // Top fan around the b pole.
        let last = ring_base(rings.len() - 1);
        mesh.faces.push([top, (last + j) as u32, (last + jn) as u32]);
    }
    Ok(mesh)
}

/// Builds the capture template for a body: triangulated capsules with rigid
/// per-bone skinning. Faces never span capsules, so posing is exactly rigid
/// per face and canonical warps round-trip to machine precision.
pub fn body_template(body: &AnalyticBody) -> Result<TemplateMesh> {
    body.validate()?;
    let mut mesh = TriMesh::default();
    let mut weights: SkinWeights = Vec::new();
    for (i, c) in body.capsules.iter().enumerate() {
        let part = capsule_mesh(c.a, c.b, c.radius, 20, 4)
            .map_err(|e| Error::data(format!("capsule {i}: {e}")))?;
        let base = mesh.vertices.len() as u32;
        weights.extend(std::iter::repeat(vec![(c.joint as u32, 1.0)]).take(part.vertices.len()));
        mesh.vertices.extend_from_slice(&part.vertices);
        mesh.faces
            .extend(part.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }
    let rest = Pose::rest(body.skeleton.len());
    TemplateMesh::new(mesh, body.skeleton.clone(), weights, rest)
}

/// Extracts the exact ground-truth surface of the posed body.
pub fn gt_mesh(posed: &PosedBody, resolution: usize) -> TriMesh {
    let bb = posed.aabb();
    let size = bb.size();
    let margin = 3.0 * size.iter().fold(0.0f64, |m, s| m.max(*s)) / resolution as f64;
    let domain = bb.dilate(margin);
    isosurface(|p| posed.sdf(p).0, &domain, resolution)
}

/// Generates a complete capture dataset at `out`: cameras, per-frame images
/// and masks, the motion file, a skinned template, and exact ground-truth
/// meshes. Refuses to overwrite; builds in a sibling `.partial` directory and
/// renames into place so failures leave no partial dataset behind.
pub fn make_dataset(body: &AnalyticBody, spec: &SceneSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    body.validate()?;
    if out.exists() {
        return Err(Error::usage(format!(
            "output {} already exists",
            out.display()
        )));
    }
    let name = out
        .file_name()
        .ok_or_else(|| Error::usage("output path has no final component"))?
        .to_string_lossy()
        .into_owned();
    let partial = out.with_file_name(format!("{name}.partial"));
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    match build_dataset(body, spec, &partial) {
        Ok(()) => {
            fs::rename(&partial, out)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            Err(e)
        }
    }
}

fn build_dataset(body: &AnalyticBody, spec: &SceneSpec, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let cameras = place_cameras(spec);
    let ids: Vec<String> = (0..cameras.len()).map(|i| format!("cam{i:02}")).collect();
    let records: Vec<CameraRecord> = ids
        .iter()
        .zip(&cameras)
        .map(|(id, cam)| CameraRecord::from_camera(id, cam))
        .collect();
    dataset::write_json(&root.join("cameras.json"), &records)?;

    let template = body_template(body)?;
    template.mesh.write_obj(&root.join("template.obj"))?;
    dataset::write_json(
        &root.join("template.json"),
        &TemplateRecord {
            skeleton: template.skeleton.clone(),
            weights: template.weights.clone(),
            canonical_pose: template.canonical_pose.clone(),
        },
    )?;

    let motion = sample_motion(&body.skeleton, spec.frames, spec.motion_amplitude, spec.seed);
    dataset::write_json(&root.join("motion.json"), &motion)?;

    fs::create_dir_all(root.join("gt_meshes"))?;
    for (f, pose) in motion.frames.iter().enumerate() {
        let posed = PosedBody::new(body, pose)?;
        for (ci, (id, cam)) in ids.iter().zip(&cameras).enumerate() {
            let noise_seed = stream_index_for(spec.seed, f, ci);
            let (image, mask) =
                raytrace_gt(&posed, cam, spec.background, spec.noise_sigma, noise_seed);
            let ipath = dataset::image_path(root, f, id);
            let mpath = dataset::mask_path(root, f, id);
            fs::create_dir_all(ipath.parent().unwrap())?;
            fs::create_dir_all(mpath.parent().unwrap())?;
            image.save_png(&ipath)?;
            mask.save_png(&mpath)?;
        }
        gt_mesh(&posed, spec.gt_mesh_resolution).write_obj(&dataset::gt_mesh_path(root, f))?;
    }
    Ok(())
}

/// Distinct noise seed per (frame, camera) pair.
fn stream_index_for(seed: u64, frame: usize, camera: usize) -> u64 {
    seed ^ ((frame as u64) << 32) ^ (camera as u64).wrapping_mul(0x9e37_79b9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::pose_template;
    use std::path::PathBuf;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir =
            std::env::temp_dir().join(format!("metacap-synth-{tag}-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).unwrap();
        }
        dir
    }

    fn sphere_body(radius: f64, center: V3) -> AnalyticBody {
        AnalyticBody {
            skeleton: Skeleton {
                joints: vec![Joint {
                    name: "root".to_string(),
                    parent: None,
                    position: center,
                }],
            },
            capsules: vec![Capsule {
                joint: 0,
                a: center,
                b: center,
                radius,
                color: [0.8, 0.3, 0.2],
            }],
        }
    }

    #[test]
    fn capsule_sdf_hand_values() {
        let (a, b, r) = ([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.25);
        assert_eq!(capsule_sdf([0.0, 0.0, 0.0], a, b, r), -r);
        assert!((capsule_sdf([0.5, 0.25, 0.0], a, b, r)).abs() < 1e-15);
        assert!((capsule_sdf([2.0, 0.0, 0.0], a, b, r) - 0.75).abs() < 1e-15);
        assert!((capsule_sdf([0.0, 1.0, 0.0], a, b, r) - 0.75).abs() < 1e-15);
        // Degenerate segment acts as a sphere.
        assert!((capsule_sdf([0.0, 2.0, 0.0], a, a, r) - (5f64.sqrt() - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn posed_sdf_is_the_rigidly_moved_canonical_sdf() {
        let body = AnalyticBody::desk_body();
        let mut pose = Pose::rest(body.skeleton.len());
        // Bend the left elbow; probe near the left forearm only.
        pose.theta[3] = [0.0, 0.0, 1.1];
        let posed = PosedBody::new(&body, &pose).unwrap();
        let fk = forward_kinematics(&body.skeleton, &pose).unwrap();
        let g = &fk[3];
        let canonical_probe = [0.6, 1.48, 0.02];
        let world_probe = g.transform_point(canonical_probe);
        let rest = PosedBody::new(&body, &Pose::rest(body.skeleton.len())).unwrap();
        let forearm = |pb: &PosedBody, p: V3| {
            let c = &pb.capsules[3];
            capsule_sdf(p, c.a, c.b, c.radius)
        };
        assert!((forearm(&posed, world_probe) - forearm(&rest, canonical_probe)).abs() < 1e-12);
    }

    #[test]
    fn analytic_sdf_satisfies_the_eikonal_property() {
        let body = AnalyticBody::desk_body();
        let motion = sample_motion(&body.skeleton, 3, 0.3, 5);
        let posed = PosedBody::new(&body, &motion.frames[2]).unwrap();
        let mut rng = stream_indexed(9, "eik-probe", 0);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 200 {
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(-1.0..1.0),
            ];
            // Stay away from capsule seams: the two closest capsules must
            // differ by more than the finite-difference step scale.
            let mut ds: Vec<f64> = posed
                .capsules
                .iter()
                .map(|c| capsule_sdf(p, c.a, c.b, c.radius))
                .collect();
            ds.sort_by(f64::total_cmp);
            if ds[1] - ds[0] < 1e-3 || ds[0].abs() < 1e-3 {
                continue;
            }
            let mut grad = [0.0; 3];
            for axis in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[axis] += h;
                pm[axis] -= h;
                grad[axis] = (posed.sdf(pp).0 - posed.sdf(pm).0) / (2.0 * h);
            }
            let mag = dot(grad, grad).sqrt();
            assert!((mag - 1.0).abs() < 1e-3, "|grad| = {mag} at {p:?}");
            checked += 1;
        }
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let body = AnalyticBody::desk_body();
        let posed = PosedBody::new(&body, &Pose::rest(body.skeleton.len())).unwrap();
        let cam = Camera::look_at(
            [0.0, 1.0, 3.0],
            [0.0, 1.0, 6.0],
            [0.0, 1.0, 0.0],
            32,
            32,
            45.0,
        );
        let (_, mask) = raytrace_gt(&posed, &cam, [0.0; 3], 0.0, 0);
        assert!(mask.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sphere_projects_to_a_disc_of_the_predicted_radius() {
        let r = 0.3;
        let depth = 4.0;
        let body = sphere_body(r, [0.0, 0.0, 0.0]);
        let posed = PosedBody::new(&body, &Pose::rest(1)).unwrap();
        let cam = Camera::look_at(
            [0.0, 0.0, depth],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            128,
            128,
            40.0,
        );
        let (_, mask) = raytrace_gt(&posed, &cam, [0.0; 3], 0.0, 0);
        let area: f64 = mask.values.iter().sum();
        let measured_radius = (area / std::f64::consts::PI).sqrt();
        // The silhouette of a sphere is slightly wider than the pinhole
        // projection of its center section; both bounds sit within a pixel.
        let predicted = cam.fx * r / depth;
        assert!(
            (measured_radius - predicted).abs() <= 1.0,
            "disc radius {measured_radius} px vs predicted {predicted} px"
        );
    }

    #[test]
    fn doubling_resolution_preserves_the_mask_area_fraction() {
        let body = sphere_body(0.35, [0.0, 0.1, 0.0]);
        let posed = PosedBody::new(&body, &Pose::rest(1)).unwrap();
        let lo = Camera::look_at([0.2, 0.0, 3.0], [0.0, 0.1, 0.0], [0.0, 1.0, 0.0], 64, 64, 45.0);
        let hi = Camera::look_at([0.2, 0.0, 3.0], [0.0, 0.1, 0.0], [0.0, 1.0, 0.0], 128, 128, 45.0);
        let (_, mlo) = raytrace_gt(&posed, &lo, [0.0; 3], 0.0, 0);
        let (_, mhi) = raytrace_gt(&posed, &hi, [0.0; 3], 0.0, 0);
        let frac = |m: &Mask| m.values.iter().sum::<f64>() / m.values.len() as f64;
        let (flo, fhi) = (frac(&mlo), frac(&mhi));
        assert!(
            (flo - fhi).abs() / fhi < 0.01,
            "area fractions {flo} vs {fhi}"
        );
    }

    #[test]
    fn mask_agrees_with_the_analytic_ray_sdf_minimum() {
        let body = AnalyticBody::desk_body();
        let motion = sample_motion(&body.skeleton, 2, 0.35, 11);
        let posed = PosedBody::new(&body, &motion.frames[1]).unwrap();
        let cam = Camera::look_at(
            [1.8, 1.4, 2.2],
            [0.0, 0.95, 0.0],
            [0.0, 1.0, 0.0],
            48,
            48,
            50.0,
        );
        let (_, mask) = raytrace_gt(&posed, &cam, [0.0; 3], 0.0, 0);
        for py in 0..48 {
            for px in 0..48 {
                let ray = cam.pixel_ray(px, py);
                let m = posed.min_sdf_along_ray(ray.origin, ray.dir);
                // Within sphere-tracing tolerance of grazing either call is
                // acceptable; outside it they must agree exactly.
                if m.abs() <= 10.0 * TRACE_TOL {
                    continue;
                }
                let expected = if m < 0.0 { 1.0 } else { 0.0 };
                assert_eq!(
                    mask.get(px, py),
                    expected,
                    "pixel ({px},{py}) min ray sdf {m}"
                );
            }
        }
    }

    #[test]
    fn capsule_mesh_vertices_lie_on_the_surface() {
        let (a, b, r) = ([0.1, 0.2, 0.3], [0.5, 0.9, 0.1], 0.17);
        let mesh = capsule_mesh(a, b, r, 20, 4).unwrap();
        mesh.validate().unwrap();
        for v in &mesh.vertices {
            assert!(capsule_sdf(*v, a, b, r).abs() < 1e-12);
        }
        // Closed and outward: positive enclosed volume close to analytic.
        let mut six_v = 0.0;
        for f in 0..mesh.faces.len() {
            let [p, q, s] = mesh.face_vertices(f);
            six_v += dot(p, cross(q, s));
        }
        let vol = six_v / 6.0;
        let exact = std::f64::consts::PI * r * r * dist(a, b)
            + 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!(vol > 0.9 * exact && vol < exact, "volume {vol} vs {exact}");
    }

    #[test]
    fn template_tracks_the_analytic_surface_in_every_frame() {
        let body = AnalyticBody::desk_body();
        let template = body_template(&body).unwrap();
        let motion = sample_motion(&body.skeleton, 3, 0.35, 7);
        let per_capsule = 2 + 2 * 4 * 20;
        for pose in &motion.frames {
            let posed_body = PosedBody::new(&body, pose).unwrap();
            let posed_template = pose_template(&template, pose).unwrap();
            for (v, p) in posed_template.mesh.vertices.iter().enumerate() {
                let c = &posed_body.capsules[v / per_capsule];
                // Each vertex stays on its own capsule, and never pokes out
                // of the union.
                assert!(capsule_sdf(*p, c.a, c.b, c.radius).abs() < 1e-3);
                assert!(posed_body.sdf(*p).0 < 1e-3);
            }
        }
    }

    #[test]
    fn make_dataset_writes_a_complete_valid_capture() {
        let body = AnalyticBody::desk_body();
        let spec = SceneSpec {
            cameras: 3,
            frames: 2,
            width: 32,
            height: 32,
            gt_mesh_resolution: 48,
            seed: 4,
            ..SceneSpec::default()
        };
        let dir = temp_dir("capture");
        let out = dir.join("ds");
        fs::create_dir_all(&dir).unwrap();
        make_dataset(&body, &spec, &out).unwrap();
        let violations = crate::dataset::validate_dataset(&out).unwrap();
        assert!(violations.is_empty(), "{violations:?}");
        let ds = crate::dataset::CaptureDataset::open(&out).unwrap();
        assert_eq!(ds.n_cameras(), 3);
        assert_eq!(ds.n_frames(), 2);
        let mut pairs = 0;
        for f in 0..2 {
            assert!(ds.has_gt_mesh(f));
            ds.load_gt_mesh(f).unwrap().validate().unwrap();
            for c in 0..3 {
                ds.load_image(f, c).unwrap();
                ds.load_mask(f, c).unwrap();
                pairs += 1;
            }
        }
        assert_eq!(pairs, 6);
        // Refuses to overwrite.
        assert!(make_dataset(&body, &spec, &out).is_err());
        // Motion round-trips at full precision.
        let motion = sample_motion(&body.skeleton, 2, spec.motion_amplitude, 4);
        assert_eq!(
            serde_json::to_string(&ds.motion).unwrap(),
            serde_json::to_string(&motion).unwrap()
        );
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn same_seed_regenerates_byte_identical_datasets() {
        let body = AnalyticBody::desk_body();
        let spec = SceneSpec {
            cameras: 2,
            frames: 2,
            width: 24,
            height: 24,
            gt_mesh_resolution: 24,
            noise_sigma: 0.05,
            seed: 9,
            ..SceneSpec::default()
        };
        let dir = temp_dir("identical");
        fs::create_dir_all(&dir).unwrap();
        let out_a = dir.join("a");
        let out_b = dir.join("b");
        make_dataset(&body, &spec, &out_a).unwrap();
        make_dataset(&body, &spec, &out_b).unwrap();
        let mut stack = vec![PathBuf::new()];
        let mut compared = 0;
        while let Some(rel) = stack.pop() {
            for entry in fs::read_dir(out_a.join(&rel)).unwrap() {
                let entry = entry.unwrap();
                let sub = rel.join(entry.file_name());
                if entry.file_type().unwrap().is_dir() {
                    stack.push(sub);
                } else {
                    let bytes_a = fs::read(out_a.join(&sub)).unwrap();
                    let bytes_b = fs::read(out_b.join(&sub)).unwrap();
                    assert_eq!(bytes_a, bytes_b, "{} differs", sub.display());
                    compared += 1;
                }
            }
        }
        assert!(compared >= 4 + 2 * 2 * 2 + 2, "only {compared} files");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn failed_generation_leaves_no_partial_output() {
        let body = AnalyticBody::desk_body();
        let spec = SceneSpec {
            cameras: 0,
            ..SceneSpec::default()
        };
        let dir = temp_dir("fail");
        fs::create_dir_all(&dir).unwrap();
        let out = dir.join("ds");
        assert!(make_dataset(&body, &spec, &out).is_err());
        assert!(!out.exists());
        assert!(fs::read_dir(&dir).unwrap().next().is_none(), "stray files");
        fs::remove_dir_all(&dir).unwrap();
    }
}

//! Articulated template machinery: skeleton forward kinematics, linear blend
//! skinning, nearest-triangle queries, and the warp between observation and
//! canonical space.

use serde::{Deserialize, Serialize};

use crate::linalg::{scale, Affine, V3};
use crate::mesh::{Aabb, Bvh, TriMesh};
use crate::renderer::Camera;
use crate::{Error, Result};

/// One joint of the skeleton; parents must precede children.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    pub name: String,
    /// Index of the parent joint; `None` exactly for the root.
    pub parent: Option<usize>,
    /// Canonical joint position (meters).
    pub position: V3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

impl Skeleton {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut roots = 0;
        for (j, joint) in self.joints.iter().enumerate() {
            match joint.parent {
                None => roots += 1,
                Some(p) if p >= j => {
                    return Err(Error::data(format!(
                        "joint {j} ({}) has parent {p}; parents must precede children",
                        joint.name
                    )));
                }
                Some(_) => {}
            }
            if !joint.position.iter().all(|x| x.is_finite()) {
                return Err(Error::data(format!("joint {j} position is not finite")));
            }
        }
        if roots != 1 {
            return Err(Error::data(format!(
                "skeleton needs exactly one root joint, found {roots}"
            )));
        }
        Ok(())
    }
}

/// One frame of skeletal motion: per-joint axis-angle rotations plus the
/// root rotation and translation. The root joint's own entry in `theta` is
/// ignored; the root rotates by `root_rot`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub theta: Vec<V3>,
    pub root_rot: V3,
    pub root_pos: V3,
}

impl Pose {
    pub fn rest(joints: usize) -> Pose {
        Pose {
            theta: vec![[0.0; 3]; joints],
            root_rot: [0.0; 3],
            root_pos: [0.0; 3],
        }
    }

    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        if self.theta.len() != skeleton.len() {
            return Err(Error::data(format!(
                "pose has {} joint rotations, skeleton has {} joints",
                self.theta.len(),
                skeleton.len()
            )));
        }
        let finite = self.theta.iter().all(|t| t.iter().all(|x| x.is_finite()))
            && self.root_rot.iter().all(|x| x.is_finite())
            && self.root_pos.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::data("pose contains non-finite values"));
        }
        Ok(())
    }
}

/// Per-frame poses of one capture sequence (motion window fixed at 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletalMotion {
    pub frames: Vec<Pose>,
}

/// Global joint transforms by forward kinematics. Each joint rotates about
/// its own canonical position: `G_j = G_parent T(g_j) R(theta_j) T(-g_j)`,
/// with the root using the root rotation and translation
/// `G_root = T(z) T(g) R(alpha) T(-g)`.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<Affine>> {
    pose.validate(skeleton)?;
    let mut global = Vec::with_capacity(skeleton.len());
    for (j, joint) in skeleton.joints.iter().enumerate() {
        let g = joint.position;
        let local = |axis_angle: V3| {
            let angle = crate::linalg::norm(axis_angle);
            Affine::translation(g)
                .mul(&Affine::rotation(axis_angle, angle))
                .mul(&Affine::translation(scale(g, -1.0)))
        };
        let m = match joint.parent {
            None => Affine::translation(pose.root_pos).mul(&local(pose.root_rot)),
            Some(p) => {
                let parent: &Affine = &global[p];
                parent.mul(&local(pose.theta[j]))
            }
        };
        global.push(m);
    }
    Ok(global)
}

/// Sparse per-vertex skinning weights: `(joint, weight)` pairs.
pub type SkinWeights = Vec<Vec<(u32, f64)>>;

/// The canonical template: mesh, skeleton, skinning weights, and the
/// canonical pose, with a prebuilt BVH over the canonical triangles for
/// canonical-to-world warps.
#[derive(Clone, Debug)]
pub struct TemplateMesh {
    pub mesh: TriMesh,
    pub skeleton: Skeleton,
    pub weights: SkinWeights,
    pub canonical_pose: Pose,
    canon_bvh: Bvh,
}

impl TemplateMesh {
    pub fn new(
        mesh: TriMesh,
        skeleton: Skeleton,
        weights: SkinWeights,
        canonical_pose: Pose,
    ) -> Result<TemplateMesh> {
        mesh.validate()?;
        skeleton.validate()?;
        canonical_pose.validate(&skeleton)?;
        if weights.len() != mesh.vertices.len() {
            return Err(Error::data(format!(
                "{} weight rows for {} vertices",
                weights.len(),
                mesh.vertices.len()
            )));
        }
        for (v, row) in weights.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, w) in row {
                if j as usize >= skeleton.len() {
                    return Err(Error::data(format!(
                        "vertex {v} weights reference joint {j}, skeleton has {}",
                        skeleton.len()
                    )));
                }
                if !(w >= 0.0) {
                    return Err(Error::data(format!("vertex {v} has negative weight")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::data(format!(
                    "vertex {v} weights sum to {sum}, expected 1"
                )));
            }
        }
        let canon_bvh = Bvh::build(&mesh);
        Ok(TemplateMesh {
            mesh,
            skeleton,
            weights,
            canonical_pose,
            canon_bvh,
        })
    }

    pub fn canonical_bvh(&self) -> &Bvh {
        &self.canon_bvh
    }

    /// Canonical bounding box of the template surface.
    pub fn canonical_aabb(&self) -> Aabb {
        self.mesh.aabb()
    }
}

/// Which canonicalization the ray warp uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanoMode {
    /// Nearest-face blended inverse transforms (the full method).
    Template,
    /// Only the inverse root transform; the ablation baseline. Empty
    /// skipping still uses template distances.
    RootOnly,
}

/// A template posed by one motion frame.
#[derive(Clone, Debug)]
pub struct PosedTemplate {
    /// Posed mesh (same topology as the canonical mesh).
    pub mesh: TriMesh,
    /// Per-vertex transforms `T_v` with `X_v = T_v X̄_v`.
    pub transforms: Vec<Affine>,
    pub bvh: Bvh,
    pub aabb: Aabb,
    /// Root-only rigid transform `G_root(M) G_root(M̄)^{-1}`.
    pub root_transform: Affine,
    root_inverse: Affine,
}

/// Pose the template by LBS:
/// `T_v = (sum_j w_jv G_j(M)) (sum_j w_jv G_j(M̄))^{-1}`.
pub fn pose_template(template: &TemplateMesh, pose: &Pose) -> Result<PosedTemplate> {
    let posed_g = forward_kinematics(&template.skeleton, pose)?;
    let canon_g = forward_kinematics(&template.skeleton, &template.canonical_pose)?;
    let root = template
        .skeleton
        .joints
        .iter()
        .position(|j| j.parent.is_none())
        .expect("validated skeleton has a root");
    let root_transform = posed_g[root].mul(
        &canon_g[root]
            .inverse()
            .ok_or_else(|| Error::numerical("singular canonical root transform"))?,
    );
    let root_inverse = root_transform
        .inverse()
        .ok_or_else(|| Error::numerical("singular root transform"))?;

    let mut transforms = Vec::with_capacity(template.mesh.vertices.len());
    let mut vertices = Vec::with_capacity(template.mesh.vertices.len());
    for (v, (x_bar, row)) in template
        .mesh
        .vertices
        .iter()
        .zip(&template.weights)
        .enumerate()
    {
        let blend_posed = Affine::blend(
            &row.iter()
                .map(|&(j, w)| (w, posed_g[j as usize]))
                .collect::<Vec<_>>(),
        );
        let blend_canon = Affine::blend(
            &row.iter()
                .map(|&(j, w)| (w, canon_g[j as usize]))
                .collect::<Vec<_>>(),
        );
        let inv = blend_canon.inverse().ok_or_else(|| {
            Error::numerical(format!(
                "vertex {v}: blended canonical transform is singular"
            ))
        })?;
        let t = blend_posed.mul(&inv);
        if t.inverse().is_none() {
            return Err(Error::numerical(format!(
                "vertex {v}: blended transform is singular"
            )));
        }
        vertices.push(t.transform_point(*x_bar));
        transforms.push(t);
    }
    let mesh = TriMesh {
        vertices,
        faces: template.mesh.faces.clone(),
    };
    let bvh = Bvh::build(&mesh);
    let aabb = mesh.aabb();
    Ok(PosedTemplate {
        mesh,
        transforms,
        bvh,
        aabb,
        root_transform,
        root_inverse,
    })
}

/// Nearest posed triangle with the blended per-point transform.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceHit {
    pub face: usize,
    pub bary: [f64; 3],
    pub dist: f64,
    /// `T_p = sum_k b_k T_{v_k}` (component-wise blend).
    pub transform: Affine,
}

pub fn nearest_triangle(posed: &PosedTemplate, p: V3) -> SurfaceHit {
    let hit = posed.bvh.closest_point(&posed.mesh, p);
    let [a, b, c] = posed.mesh.faces[hit.face];
    let transform = Affine::blend(&[
        (hit.bary[0], posed.transforms[a as usize]),
        (hit.bary[1], posed.transforms[b as usize]),
        (hit.bary[2], posed.transforms[c as usize]),
    ]);
    SurfaceHit {
        face: hit.face,
        bary: hit.bary,
        dist: hit.dist,
        transform,
    }
}

/// A world point moved into canonical space.
#[derive(Clone, Copy, Debug)]
pub struct WarpedPoint {
    pub canonical: V3,
    /// Distance to the posed template surface (for empty skipping).
    pub dist: f64,
    /// The inverse transform that was applied (canonical <- world).
    pub inverse: Affine,
}

/// Warp a world point to canonical space via the nearest-face blended
/// transform (or the root transform in root-only mode). The template
/// distance is always the true nearest-face distance.
pub fn warp_point(posed: &PosedTemplate, p: V3, mode: CanoMode) -> Result<WarpedPoint> {
    let hit = nearest_triangle(posed, p);
    let inverse = match mode {
        CanoMode::Template => hit.transform.inverse().ok_or_else(|| {
            Error::numerical(format!(
                "blended transform at face {} is singular",
                hit.face
            ))
        })?,
        CanoMode::RootOnly => posed.root_inverse,
    };
    Ok(WarpedPoint {
        canonical: inverse.transform_point(p),
        dist: hit.dist,
        inverse,
    })
}

/// Spec-level convenience: canonical point and template distance.
pub fn warp_to_canonical(posed: &PosedTemplate, p: V3) -> Result<(V3, f64)> {
    let w = warp_point(posed, p, CanoMode::Template)?;
    Ok((w.canonical, w.dist))
}

/// Warp a canonical point forward into world space using the transform of
/// its nearest canonical face (used to pose extracted meshes).
pub fn warp_from_canonical(
    template: &TemplateMesh,
    posed: &PosedTemplate,
    p_bar: V3,
    mode: CanoMode,
) -> V3 {
    match mode {
        CanoMode::RootOnly => posed.root_transform.transform_point(p_bar),
        CanoMode::Template => {
            let hit = template.canon_bvh.closest_point(&template.mesh, p_bar);
            let [a, b, c] = template.mesh.faces[hit.face];
            let t = Affine::blend(&[
                (hit.bary[0], posed.transforms[a as usize]),
                (hit.bary[1], posed.transforms[b as usize]),
                (hit.bary[2], posed.transforms[c as usize]),
            ]);
            t.transform_point(p_bar)
        }
    }
}

/// Per-vertex visibility: a vertex is visible when at least one camera sees
/// it in front of the lens, inside the image, and not blocked by the posed
/// template itself (with an epsilon clearance at the vertex end).
pub fn vertex_visibility(posed: &PosedTemplate, cameras: &[Camera]) -> Vec<bool> {
    let clearance = 1e-4 * posed.aabb.diagonal();
    posed
        .mesh
        .vertices
        .iter()
        .map(|&v| {
            cameras.iter().any(|cam| {
                let Some((u, vv, depth)) = cam.project(v) else {
                    return false;
                };
                if depth <= 0.0
                    || u < 0.0
                    || vv < 0.0
                    || u >= cam.width as f64
                    || vv >= cam.height as f64
                {
                    return false;
                }
                !posed
                    .bvh
                    .segment_blocked(&posed.mesh, cam.position(), v, clearance)
            })
        })
        .collect()
}

/// Fraction of posed surface area whose face has at least one visible
/// vertex; a coverage diagnostic for sparse-view setups.
pub fn visible_area_fraction(posed: &PosedTemplate, visible: &[bool]) -> f64 {
    let mut seen = 0.0;
    let mut total = 0.0;
    for f in 0..posed.mesh.faces.len() {
        let area = posed.mesh.face_area(f);
        total += area;
        if posed.mesh.faces[f].iter().any(|&v| visible[v as usize]) {
            seen += area;
        }
    }
    if total > 0.0 {
        seen / total
    } else {
        0.0
    }
}

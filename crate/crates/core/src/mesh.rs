//! Triangle meshes with a BVH for nearest-point and ray queries, plus OBJ
//! input/output and area-weighted surface sampling.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::linalg::{add, cross, dist, dot, norm, normalize, scale, sub, V3};
use crate::{Error, Result};

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub lo: V3,
    pub hi: V3,
}

impl Aabb {
    /// An inverted box that unions correctly with anything.
    pub fn empty() -> Aabb {
        Aabb {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    pub fn from_points<I: IntoIterator<Item = V3>>(points: I) -> Aabb {
        let mut b = Aabb::empty();
        for p in points {
            b.expand(p);
        }
        b
    }

    pub fn expand(&mut self, p: V3) {
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(p[a]);
            self.hi[a] = self.hi[a].max(p[a]);
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            lo: [
                self.lo[0].min(other.lo[0]),
                self.lo[1].min(other.lo[1]),
                self.lo[2].min(other.lo[2]),
            ],
            hi: [
                self.hi[0].max(other.hi[0]),
                self.hi[1].max(other.hi[1]),
                self.hi[2].max(other.hi[2]),
            ],
        }
    }

    /// Grow by `r` on every side.
    pub fn dilate(&self, r: f64) -> Aabb {
        Aabb {
            lo: sub(self.lo, [r, r, r]),
            hi: add(self.hi, [r, r, r]),
        }
    }

    pub fn contains(&self, p: V3) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    pub fn clamp(&self, p: V3) -> V3 {
        [
            p[0].clamp(self.lo[0], self.hi[0]),
            p[1].clamp(self.lo[1], self.hi[1]),
            p[2].clamp(self.lo[2], self.hi[2]),
        ]
    }

    pub fn center(&self) -> V3 {
        scale(add(self.lo, self.hi), 0.5)
    }

    pub fn diagonal(&self) -> f64 {
        dist(self.lo, self.hi)
    }

    pub fn size(&self) -> V3 {
        sub(self.hi, self.lo)
    }

    /// Squared distance from `p` to the box (0 inside).
    pub fn dist2(&self, p: V3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = if p[a] < self.lo[a] {
                self.lo[a] - p[a]
            } else if p[a] > self.hi[a] {
                p[a] - self.hi[a]
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    /// Parameter range where the ray `o + t d` overlaps the box, clipped to
    /// `t >= 0`. Returns `None` on a miss.
    pub fn ray_range(&self, o: V3, d: V3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < self.lo[a] || o[a] > self.hi[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[a];
                let (mut ta, mut tb) = ((self.lo[a] - o[a]) * inv, (self.hi[a] - o[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }
}

/// An indexed triangle mesh.
#[derive(Clone, Debug, Default)]
pub struct TriMesh {
    pub vertices: Vec<V3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter().copied())
    }

    pub fn face_vertices(&self, f: usize) -> [V3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_vertices(f);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Unit normal of face `f` (right-hand winding); zero for degenerate.
    pub fn face_normal(&self, f: usize) -> V3 {
        let [a, b, c] = self.face_vertices(f);
        normalize(cross(sub(b, a), sub(c, a)))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<V3> {
        let mut n = vec![[0.0; 3]; self.vertices.len()];
        for f in 0..self.faces.len() {
            let [a, b, c] = self.face_vertices(f);
            let fan = cross(sub(b, a), sub(c, a));
            for &v in &self.faces[f] {
                n[v as usize] = add(n[v as usize], fan);
            }
        }
        n.into_iter().map(normalize).collect()
    }

    /// Check indices, finiteness, and non-degenerate faces.
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::data(format!("vertex {i} is not finite")));
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            for &v in face {
                if v as usize >= self.vertices.len() {
                    return Err(Error::data(format!(
                        "face {f} references vertex {v}, mesh has {}",
                        self.vertices.len()
                    )));
                }
            }
            if self.face_area(f) < 1e-14 {
                return Err(Error::data(format!("face {f} is degenerate")));
            }
        }
        Ok(())
    }

    /// Draw `n` points uniformly by area, with their face normals.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<(V3, V3)> {
        let mut cum = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.face_area(f);
            cum.push(total);
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.gen_range(0.0..total);
            let f = cum.partition_point(|&c| c <= u).min(self.faces.len() - 1);
            let [a, b, c] = self.face_vertices(f);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let (b1, b2) = (1.0 - s, r2 * s);
            let b3 = 1.0 - b1 - b2;
            let p = add(add(scale(a, b1), scale(b, b2)), scale(c, b3));
            out.push((p, self.face_normal(f)));
        }
        out
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a minimal OBJ (v / f records; f entries may carry /vt/vn parts,
    /// quads are fan-triangulated).
    pub fn read_obj(path: &Path) -> Result<TriMesh> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::data(format!("open {}: {e}", path.display())))?;
        let mut mesh = TriMesh::default();
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let mut v = [0.0; 3];
                    for x in v.iter_mut() {
                        *x = it
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| Error::data(format!("obj line {}: bad vertex", ln + 1)))?;
                    }
                    mesh.vertices.push(v);
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|tok| {
                            let first = tok.split('/').next().unwrap_or("");
                            first.parse::<i64>().ok().and_then(|i| {
                                if i > 0 {
                                    Some((i - 1) as u32)
                                } else {
                                    // negative indices count from the end
                                    let n = mesh.vertices.len() as i64 + i;
                                    (n >= 0).then_some(n as u32)
                                }
                            })
                        })
                        .collect::<Option<Vec<u32>>>()
                        .ok_or_else(|| Error::data(format!("obj line {}: bad face", ln + 1)))?;
                    if idx.len() < 3 {
                        return Err(Error::data(format!("obj line {}: face needs 3 vertices", ln + 1)));
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        mesh.validate()?;
        Ok(mesh)
    }

    /// A UV sphere, useful for analytic oracles.
    pub fn uv_sphere(center: V3, radius: f64, stacks: usize, slices: usize) -> TriMesh {
        let mut mesh = TriMesh::default();
        for i in 0..=stacks {
            let theta = std::f64::consts::PI * i as f64 / stacks as f64;
            // Exact poles: sin(pi) is a last-ulp residue, which would leave
            // the pole row vertices subtly non-coincident.
            let (st, ct) = if i == 0 {
                (0.0, 1.0)
            } else if i == stacks {
                (0.0, -1.0)
            } else {
                (theta.sin(), theta.cos())
            };
            for j in 0..slices {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / slices as f64;
                mesh.vertices.push(add(
                    center,
                    scale([st * phi.cos(), ct, st * phi.sin()], radius),
                ));
            }
        }
        let at = |i: usize, j: usize| (i * slices + j % slices) as u32;
        for i in 0..stacks {
            for j in 0..slices {
                let (a, b, c, d) = (at(i, j), at(i, j + 1), at(i + 1, j + 1), at(i + 1, j));
                if i > 0 {
                    mesh.faces.push([a, b, c]);
                }
                if i + 1 < stacks {
                    mesh.faces.push([a, c, d]);
                }
            }
        }
        // Pole rows duplicate vertices at identical positions; faces touching
        // both pole duplicates are skipped above, so no degenerate triangles.
        mesh
    }
}

/// Closest point on triangle `(a, b, c)` to `p`, with barycentric
/// coordinates. Follows the standard Voronoi-region case analysis.
pub fn closest_point_triangle(p: V3, a: V3, b: V3, c: V3) -> (V3, [f64; 3]) {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (add(a, scale(ab, v)), [1.0 - v, v, 0.0]);
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (add(a, scale(ac, w)), [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (add(b, scale(sub(c, b), w)), [0.0, 1.0 - w, w]);
    }
    let denom = va + vb + vc;
    if !(denom.abs() > 0.0) {
        return (a, [1.0, 0.0, 0.0]);
    }
    let v = vb / denom;
    let w = vc / denom;
    (
        add(add(a, scale(ab, v)), scale(ac, w)),
        [1.0 - v - w, v, w],
    )
}

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter.
pub fn ray_triangle(o: V3, d: V3, a: V3, b: V3, c: V3) -> Option<f64> {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let pv = cross(d, e2);
    let det = dot(e1, pv);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = sub(o, a);
    let u = dot(tv, pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = cross(tv, e1);
    let v = dot(d, qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(dot(e2, qv) * inv)
}

/// Result of a nearest-point query against a mesh.
#[derive(Clone, Copy, Debug)]
pub struct ClosestHit {
    pub face: usize,
    pub point: V3,
    pub bary: [f64; 3],
    pub dist: f64,
}

#[derive(Clone, Debug)]
struct BvhNode {
    aabb: Aabb,
    /// Leaf: `(start, count)` into `order`; interior: children `(left, right)`.
    kind: NodeKind,
}

#[derive(Clone, Copy, Debug)]
enum NodeKind {
    Leaf { start: u32, count: u32 },
    Inner { left: u32, right: u32 },
}

/// Bounding-volume hierarchy over a mesh's triangles. Holds face indices
/// only; queries take the mesh it was built from.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Bvh {
        assert!(!mesh.faces.is_empty(), "BVH over empty mesh");
        let centroids: Vec<V3> = (0..mesh.faces.len())
            .map(|f| {
                let [a, b, c] = mesh.face_vertices(f);
                scale(add(add(a, b), c), 1.0 / 3.0)
            })
            .collect();
        let mut order: Vec<u32> = (0..mesh.faces.len() as u32).collect();
        let mut nodes = Vec::new();
        build_node(mesh, &centroids, &mut order, 0, mesh.faces.len(), &mut nodes);
        Bvh { nodes, order }
    }

    /// Globally nearest triangle to `p`. Exact distance ties resolve to the
    /// smallest face index, matching a brute-force ascending scan.
    pub fn closest_point(&self, mesh: &TriMesh, p: V3) -> ClosestHit {
        let mut best = ClosestHit {
            face: usize::MAX,
            point: p,
            bary: [0.0; 3],
            dist: f64::INFINITY,
        };
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.aabb.dist2(p) > best_d2 {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &f in &self.order[start as usize..(start + count) as usize] {
                        let [a, b, c] = mesh.face_vertices(f as usize);
                        let (q, bary) = closest_point_triangle(p, a, b, c);
                        let d2 = {
                            let d = sub(p, q);
                            dot(d, d)
                        };
                        if d2 < best_d2 || (d2 == best_d2 && (f as usize) < best.face) {
                            best_d2 = d2;
                            best = ClosestHit {
                                face: f as usize,
                                point: q,
                                bary,
                                dist: d2.sqrt(),
                            };
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = self.nodes[left as usize].aabb.dist2(p);
                    let dr = self.nodes[right as usize].aabb.dist2(p);
                    // Push the farther child first so the nearer pops first.
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }

    /// Number of triangle crossings along `o + t d` with `t > 0`.
    pub fn count_crossings(&self, mesh: &TriMesh, o: V3, d: V3) -> usize {
        let mut count = 0;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.aabb.ray_range(o, d).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count: n } => {
                    for &f in &self.order[start as usize..(start + n) as usize] {
                        let [a, b, c] = mesh.face_vertices(f as usize);
                        if let Some(t) = ray_triangle(o, d, a, b, c) {
                            if t > 0.0 {
                                count += 1;
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        count
    }

    /// Whether any triangle blocks the open segment from `o` to `q`,
    /// ignoring hits within `end_clearance` (world units) of `q`.
    pub fn segment_blocked(&self, mesh: &TriMesh, o: V3, q: V3, end_clearance: f64) -> bool {
        let d = sub(q, o);
        let len = norm(d);
        if len < 1e-300 {
            return false;
        }
        let t_max = 1.0 - end_clearance / len;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            match node.aabb.ray_range(o, d) {
                None => continue,
                Some((t0, _)) if t0 > t_max => continue,
                Some(_) => {}
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &f in &self.order[start as usize..(start + count) as usize] {
                        let [a, b, c] = mesh.face_vertices(f as usize);
                        if let Some(t) = ray_triangle(o, d, a, b, c) {
                            if t > 0.0 && t < t_max {
                                return true;
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        false
    }
}

fn build_node(
    mesh: &TriMesh,
    centroids: &[V3],
    order: &mut [u32],
    start: usize,
    count: usize,
    nodes: &mut Vec<BvhNode>,
) -> u32 {
    let slice = &order[start..start + count];
    let mut aabb = Aabb::empty();
    for &f in slice.iter() {
        for v in mesh.face_vertices(f as usize) {
            aabb.expand(v);
        }
    }
    let id = nodes.len() as u32;
    nodes.push(BvhNode {
        aabb,
        kind: NodeKind::Leaf {
            start: start as u32,
            count: count as u32,
        },
    });
    if count <= LEAF_SIZE {
        return id;
    }
    let cbox = Aabb::from_points(slice.iter().map(|&f| centroids[f as usize]));
    let ext = cbox.size();
    let axis = if ext[0] >= ext[1] && ext[0] >= ext[2] {
        0
    } else if ext[1] >= ext[2] {
        1
    } else {
        2
    };
    let mid = count / 2;
    order[start..start + count].select_nth_unstable_by(mid, |&x, &y| {
        centroids[x as usize][axis]
            .partial_cmp(&centroids[y as usize][axis])
            .unwrap()
            .then(x.cmp(&y))
    });
    let left = build_node(mesh, centroids, order, start, mid, nodes);
    let right = build_node(mesh, centroids, order, start + mid, count - mid, nodes);
    nodes[id as usize].kind = NodeKind::Inner { left, right };
    id
}

/// Zero-isosurface triangulation on a uniform grid by tetrahedral
/// marching: each cell splits into the six Kuhn tetrahedra sharing its main
/// diagonal, a decomposition that is consistent across neighboring cells,
/// so the result is watertight without case tables or face ambiguities.
/// Crossing vertices are welded by grid-edge key. Triangles are wound so
/// normals point toward positive values.
pub fn isosurface<F>(sample: F, domain: &Aabb, resolution: usize) -> TriMesh
where
    F: Fn(V3) -> f64 + Sync,
{
    assert!(resolution >= 2, "isosurface needs a real grid");
    let n = resolution;
    let np = n + 1;
    let step = [
        (domain.hi[0] - domain.lo[0]) / n as f64,
        (domain.hi[1] - domain.lo[1]) / n as f64,
        (domain.hi[2] - domain.lo[2]) / n as f64,
    ];
    let grid_point = |i: usize, j: usize, k: usize| -> V3 {
        [
            domain.lo[0] + step[0] * i as f64,
            domain.lo[1] + step[1] * j as f64,
            domain.lo[2] + step[2] * k as f64,
        ]
    };
    // Sample the grid in parallel z-slabs; snap exact zeros off the level
    // set so no crossing lands on a grid vertex.
    let values: Vec<f64> = (0..np)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut slab = Vec::with_capacity(np * np);
            for j in 0..np {
                for i in 0..np {
                    let v = sample(grid_point(i, j, k));
                    slab.push(if v == 0.0 { 1e-12 } else { v });
                }
            }
            slab
        })
        .collect();
    let vid = |i: usize, j: usize, k: usize| -> usize { (k * np + j) * np + i };

    // The six tetrahedra around the 0-6 diagonal; cube corners are indexed
    // by (x, y, z) bits as usual.
    const CORNERS: [[usize; 3]; 8] = [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ];
    const TETS: [[usize; 4]; 6] = [
        [0, 1, 2, 6],
        [0, 2, 3, 6],
        [0, 3, 7, 6],
        [0, 7, 4, 6],
        [0, 4, 5, 6],
        [0, 5, 1, 6],
    ];

    fn edge_cut(
        verts: &mut Vec<V3>,
        edge_vertex: &mut std::collections::HashMap<(usize, usize), u32>,
        ga: usize,
        gb: usize,
        pa: V3,
        pb: V3,
        va: f64,
        vb: f64,
    ) -> u32 {
        let key = if ga < gb { (ga, gb) } else { (gb, ga) };
        *edge_vertex.entry(key).or_insert_with(|| {
            let t = va / (va - vb);
            let p = [
                pa[0] + t * (pb[0] - pa[0]),
                pa[1] + t * (pb[1] - pa[1]),
                pa[2] + t * (pb[2] - pa[2]),
            ];
            verts.push(p);
            (verts.len() - 1) as u32
        })
    }

    // All six tetrahedra above are positively oriented, so triangle winding
    // follows from the permutation parity of the corner labels alone. That
    // keeps orientation exact even for sliver triangles where a geometric
    // test would drown in rounding noise.
    fn parity_even(seq: [usize; 4]) -> bool {
        let mut inv = 0;
        for x in 0..4 {
            for y in x + 1..4 {
                if seq[x] > seq[y] {
                    inv += 1;
                }
            }
        }
        inv % 2 == 0
    }

    let mut verts: Vec<V3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut edge_vertex: std::collections::HashMap<(usize, usize), u32> =
        std::collections::HashMap::new();

    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let mut gids = [0usize; 8];
                let mut pts = [[0.0f64; 3]; 8];
                let mut any_neg = false;
                let mut any_pos = false;
                for (c, corner) in CORNERS.iter().enumerate() {
                    gids[c] = vid(i + corner[0], j + corner[1], k + corner[2]);
                    pts[c] = grid_point(i + corner[0], j + corner[1], k + corner[2]);
                    if values[gids[c]] < 0.0 {
                        any_neg = true;
                    } else {
                        any_pos = true;
                    }
                }
                if !any_neg || !any_pos {
                    continue;
                }
                for tet in &TETS {
                    let vs = [
                        values[gids[tet[0]]],
                        values[gids[tet[1]]],
                        values[gids[tet[2]]],
                        values[gids[tet[3]]],
                    ];
                    let mut inside = [0usize; 4];
                    let mut outside = [0usize; 4];
                    let (mut ni, mut no) = (0, 0);
                    for a in 0..4 {
                        if vs[a] < 0.0 {
                            inside[ni] = a;
                            ni += 1;
                        } else {
                            outside[no] = a;
                            no += 1;
                        }
                    }
                    if ni == 0 || ni == 4 {
                        continue;
                    }
                    macro_rules! cut {
                        ($a:expr, $b:expr) => {
                            edge_cut(
                                &mut verts,
                                &mut edge_vertex,
                                gids[tet[$a]],
                                gids[tet[$b]],
                                pts[tet[$a]],
                                pts[tet[$b]],
                                vs[$a],
                                vs[$b],
                            )
                        };
                    }
                    match ni {
                        1 => {
                            let i = inside[0];
                            let p0 = cut!(i, outside[0]);
                            let p1 = cut!(i, outside[1]);
                            let p2 = cut!(i, outside[2]);
                            if parity_even([i, outside[0], outside[1], outside[2]]) {
                                faces.push([p0, p1, p2]);
                            } else {
                                faces.push([p0, p2, p1]);
                            }
                        }
                        3 => {
                            let o = outside[0];
                            let p0 = cut!(inside[0], o);
                            let p1 = cut!(inside[1], o);
                            let p2 = cut!(inside[2], o);
                            if parity_even([o, inside[0], inside[1], inside[2]]) {
                                faces.push([p0, p2, p1]);
                            } else {
                                faces.push([p0, p1, p2]);
                            }
                        }
                        2 => {
                            let (i0, i1) = (inside[0], inside[1]);
                            let (o0, o1) = (outside[0], outside[1]);
                            let a = cut!(i0, o0);
                            let b = cut!(i0, o1);
                            let c = cut!(i1, o1);
                            let d = cut!(i1, o0);
                            // a-b-c-d walks the quad perimeter.
                            if parity_even([i0, i1, o0, o1]) {
                                faces.push([a, b, c]);
                                faces.push([a, c, d]);
                            } else {
                                faces.push([a, d, c]);
                                faces.push([a, c, b]);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
    }
    TriMesh {
        vertices: verts,
        faces,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_soup(n: usize, seed: u64) -> TriMesh {
        let mut rng = crate::rng::stream(seed, "mesh-soup");
        let mut mesh = TriMesh::default();
        for _ in 0..n {
            let base: V3 = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let v = mesh.vertices.len() as u32;
            mesh.vertices.push(base);
            mesh.vertices.push(add(base, [
                rng.gen_range(0.05..0.3),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            ]));
            mesh.vertices.push(add(base, [
                rng.gen_range(-0.1..0.1),
                rng.gen_range(0.05..0.3),
                rng.gen_range(-0.1..0.1),
            ]));
            mesh.faces.push([v, v + 1, v + 2]);
        }
        mesh
    }

    /// Brute-force nearest triangle with the ascending-index tie policy.
    fn brute_closest(mesh: &TriMesh, p: V3) -> ClosestHit {
        let mut best = ClosestHit {
            face: usize::MAX,
            point: p,
            bary: [0.0; 3],
            dist: f64::INFINITY,
        };
        let mut best_d2 = f64::INFINITY;
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.face_vertices(f);
            let (q, bary) = closest_point_triangle(p, a, b, c);
            let d = sub(p, q);
            let d2 = dot(d, d);
            if d2 < best_d2 {
                best_d2 = d2;
                best = ClosestHit {
                    face: f,
                    point: q,
                    bary,
                    dist: d2.sqrt(),
                };
            }
        }
        best
    }

    #[test]
    fn closest_point_triangle_regions() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]);
        // Interior projection.
        let (q, bary) = closest_point_triangle([0.5, 0.5, 3.0], a, b, c);
        assert_relative_eq!(q[0], 0.5);
        assert_relative_eq!(q[1], 0.5);
        assert_relative_eq!(q[2], 0.0);
        assert_relative_eq!(bary[0] + bary[1] + bary[2], 1.0, epsilon = 1e-12);
        // Vertex region.
        let (q, bary) = closest_point_triangle([-1.0, -1.0, 0.0], a, b, c);
        assert_eq!(q, a);
        assert_eq!(bary, [1.0, 0.0, 0.0]);
        // Edge region.
        let (q, _) = closest_point_triangle([1.0, -2.0, 0.0], a, b, c);
        assert_relative_eq!(q[0], 1.0);
        assert_relative_eq!(q[1], 0.0);
    }

    #[test]
    fn bvh_matches_brute_force_exactly() {
        let mesh = random_soup(400, 9);
        let bvh = Bvh::build(&mesh);
        let mut rng = crate::rng::stream(10, "mesh-query");
        for _ in 0..500 {
            let p: V3 = [
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ];
            let got = bvh.closest_point(&mesh, p);
            let want = brute_closest(&mesh, p);
            assert_eq!(got.face, want.face, "face mismatch at {p:?}");
            assert_eq!(got.dist, want.dist);
            assert_eq!(got.point, want.point);
        }
    }

    #[test]
    fn bvh_tie_breaks_toward_smaller_face_index() {
        // Two identical triangles stacked: every query ties; index 0 wins.
        let mesh = TriMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            faces: vec![[3, 4, 5], [0, 1, 2]],
        };
        let bvh = Bvh::build(&mesh);
        let hit = bvh.closest_point(&mesh, [0.2, 0.2, 0.5]);
        assert_eq!(hit.face, 0);
    }

    #[test]
    fn crossing_parity_on_closed_sphere() {
        let mesh = TriMesh::uv_sphere([0.0, 0.0, 0.0], 1.0, 16, 24);
        let bvh = Bvh::build(&mesh);
        let dir = normalize([1.0, 0.000317, 0.000711]);
        assert_eq!(bvh.count_crossings(&mesh, [0.0, 0.1, 0.0], dir) % 2, 1);
        assert_eq!(bvh.count_crossings(&mesh, [2.0, 0.1, 0.0], dir) % 2, 0);
        assert_eq!(bvh.count_crossings(&mesh, [-3.0, 0.1, 0.0], dir) % 2, 0);
    }

    #[test]
    fn segment_visibility_respects_occluders() {
        let mesh = TriMesh::uv_sphere([0.0, 0.0, 0.0], 1.0, 16, 24);
        let bvh = Bvh::build(&mesh);
        let eye = [3.0, 0.0, 0.0];
        // Front pole is visible, back pole is occluded by the sphere body.
        assert!(!bvh.segment_blocked(&mesh, eye, [1.0, 0.0, 0.0], 1e-3));
        assert!(bvh.segment_blocked(&mesh, eye, [-1.0, 0.0, 0.0], 1e-3));
    }

    #[test]
    fn obj_round_trip() {
        let mesh = random_soup(20, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        mesh.write_obj(&path).unwrap();
        let back = TriMesh::read_obj(&path).unwrap();
        assert_eq!(mesh.vertices, back.vertices);
        assert_eq!(mesh.faces, back.faces);
    }

    #[test]
    fn surface_sampling_is_area_weighted() {
        // Two triangles, one with 9x the area; expect ~90% of samples on it.
        let mesh = TriMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 0.0],
                [13.0, 0.0, 0.0],
                [10.0, 3.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        let mut rng = crate::rng::stream(2, "mesh-sample");
        let pts = mesh.sample_surface(4000, &mut rng);
        let big = pts.iter().filter(|(p, _)| p[0] >= 5.0).count();
        let frac = big as f64 / 4000.0;
        assert!((frac - 0.9).abs() < 0.03, "area fraction {frac}");
    }

    #[test]
    fn ray_box_ranges() {
        let b = Aabb {
            lo: [0.0, 0.0, 0.0],
            hi: [1.0, 1.0, 1.0],
        };
        let (t0, t1) = b.ray_range([-1.0, 0.5, 0.5], [1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(t0, 1.0);
        assert_relative_eq!(t1, 2.0);
        assert!(b.ray_range([-1.0, 2.0, 0.5], [1.0, 0.0, 0.0]).is_none());
        // Origin inside: range starts at 0.
        let (t0, _) = b.ray_range([0.5, 0.5, 0.5], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(t0, 0.0);
    }

    #[test]
    fn sphere_mesh_is_closed_and_outward() {
        let mesh = TriMesh::uv_sphere([1.0, 2.0, 3.0], 0.5, 12, 18);
        mesh.validate().unwrap();
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.face_vertices(f);
            let centroid = scale(add(add(a, b), c), 1.0 / 3.0);
            let outward = sub(centroid, [1.0, 2.0, 3.0]);
            assert!(
                dot(mesh.face_normal(f), outward) > 0.0,
                "face {f} winds inward"
            );
        }
    }

    fn check_watertight(mesh: &TriMesh) {
        let mut undirected: std::collections::HashMap<(u32, u32), usize> =
            std::collections::HashMap::new();
        let mut directed: std::collections::HashSet<(u32, u32)> = std::collections::HashSet::new();
        for f in &mesh.faces {
            for e in 0..3 {
                let u = f[e];
                let v = f[(e + 1) % 3];
                assert_ne!(u, v, "degenerate edge");
                assert!(directed.insert((u, v)), "directed edge ({u},{v}) repeats");
                *undirected.entry((u.min(v), u.max(v))).or_insert(0) += 1;
            }
        }
        for (e, c) in &undirected {
            assert_eq!(*c, 2, "edge {e:?} is on {c} faces");
        }
    }

    fn mesh_volume(mesh: &TriMesh) -> f64 {
        let mut six_v = 0.0;
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.face_vertices(f);
            six_v += dot(a, cross(b, c));
        }
        six_v / 6.0
    }

    #[test]
    fn isosurface_recovers_a_unit_sphere() {
        let domain = Aabb {
            lo: [-1.5; 3],
            hi: [1.5; 3],
        };
        let mesh = isosurface(|p| norm(p) - 1.0, &domain, 128);
        assert!(mesh.faces.len() > 1000);
        mesh.validate().unwrap();
        let tol = 2.0 / 128.0;
        for v in &mesh.vertices {
            let r = norm(*v);
            assert!((r - 1.0).abs() <= tol, "vertex radius {r} off the sphere");
        }
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.face_vertices(f);
            let centroid = scale(add(add(a, b), c), 1.0 / 3.0);
            assert!(
                dot(mesh.face_normal(f), centroid) > 0.0,
                "face {f} winds inward"
            );
        }
        let vol = mesh_volume(&mesh);
        let exact = 4.0 / 3.0 * std::f64::consts::PI;
        assert!((vol - exact).abs() / exact < 0.01, "volume {vol} vs {exact}");
    }

    #[test]
    fn isosurface_is_watertight_on_a_lumpy_blob() {
        let field = |p: V3| {
            norm(p) - 0.9 - 0.08 * (3.0 * p[0]).sin() * (2.0 * p[1]).cos()
                + 0.05 * (5.0 * p[2] + 1.0).sin()
        };
        let domain = Aabb {
            lo: [-1.4; 3],
            hi: [1.4; 3],
        };
        let mesh = isosurface(field, &domain, 40);
        assert!(!mesh.faces.is_empty());
        check_watertight(&mesh);
        // Every vertex sits within interpolation error of the level set.
        let cell_diag = 3f64.sqrt() * 2.8 / 40.0;
        for v in &mesh.vertices {
            assert!(field(*v).abs() <= cell_diag, "vertex far from level set");
        }
    }

    #[test]
    fn isosurface_of_a_positive_field_is_empty() {
        let domain = Aabb {
            lo: [-1.0; 3],
            hi: [1.0; 3],
        };
        let mesh = isosurface(|p| 1.0 + dot(p, p), &domain, 16);
        assert!(mesh.vertices.is_empty());
        assert!(mesh.faces.is_empty());
    }

    #[test]
    fn isosurface_sandwiches_a_capsule() {
        let (a, b, r) = ([-0.3, 0.0, 0.0], [0.3, 0.0, 0.0], 0.25);
        let sdf = move |p: V3| {
            let ab = sub(b, a);
            let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
            dist(p, add(a, scale(ab, t))) - r
        };
        let domain = Aabb {
            lo: [-0.8; 3],
            hi: [0.8; 3],
        };
        let res = 64;
        let mesh = isosurface(sdf, &domain, res);
        check_watertight(&mesh);
        let cell_diag = 3f64.sqrt() * 1.6 / res as f64;
        for v in &mesh.vertices {
            assert!(
                sdf(*v).abs() <= 2.0 * cell_diag,
                "vertex escapes the sandwich"
            );
        }
        let vol = mesh_volume(&mesh);
        let exact = std::f64::consts::PI * r * r * 0.6 + 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!(
            (vol - exact).abs() / exact < 0.02,
            "volume {vol} vs analytic {exact}"
        );
    }
}

//! The implicit body representation: a multiresolution hash encoding of
//! canonical-space points feeding a geometry MLP (SDF + latent) and a color
//! MLP, with the unbiased SDF-to-alpha conversion for volume rendering.
//!
//! Spatial SDF gradients (normals, eikonal residuals) are exact: the forward
//! pass records the analytic derivative of encode+MLP as ordinary first-order
//! tape ops (trilinear corner blends with derivative weights, chained through
//! the MLP by the product rule), so gradients of gradient-dependent losses
//! come out of the same reverse sweep as everything else.

use std::sync::Arc;

use rand::Rng;

use crate::difftape::{ParamLayout, ParamVector, Tape, TapeBuffers, Val};
use crate::linalg::V3;
use crate::mesh::Aabb;
use crate::rng::stream;
use crate::{Error, Result};

/// Multiresolution hash grid shape.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features: usize,
    /// Rows per level; must be a power of two.
    pub table_size: usize,
    pub base_resolution: usize,
    pub finest_resolution: usize,
    /// Canonical domain box; callers clamp points to it before encoding.
    pub domain: Aabb,
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::data("hash grid needs at least one level"));
        }
        if self.features < 1 {
            return Err(Error::data("hash grid needs at least one feature"));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::data(format!(
                "table_size {} is not a power of two",
                self.table_size
            )));
        }
        if self.base_resolution < 1 || self.finest_resolution < self.base_resolution {
            return Err(Error::data(
                "resolutions must satisfy 1 <= base <= finest",
            ));
        }
        for a in 0..3 {
            if !(self.domain.lo[a] < self.domain.hi[a]) {
                return Err(Error::data("domain box is empty or inverted"));
            }
        }
        Ok(())
    }

    /// Cells per axis at `level`; grows geometrically from base to finest.
    pub fn level_resolution(&self, level: usize) -> usize {
        if self.levels == 1 {
            return self.base_resolution;
        }
        let b = ((self.finest_resolution as f64).ln() - (self.base_resolution as f64).ln())
            / (self.levels - 1) as f64;
        (self.base_resolution as f64 * (b * level as f64).exp()).round() as usize
    }

    /// Dense levels store their full corner grid without hashing.
    pub fn level_is_dense(&self, level: usize) -> bool {
        let r = self.level_resolution(level) + 1;
        r.checked_pow(3).map_or(false, |n| n <= self.table_size)
    }
}

const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Table slot for a corner `cell` (coordinates in `[0, resolution]`) at
/// `level`. Dense levels use row-major indexing with x fastest; hashed
/// levels XOR the coordinates multiplied by fixed odd primes, modulo the
/// table size.
pub fn hash_index(level: usize, cell: [u32; 3], config: &HashGridConfig) -> usize {
    if config.level_is_dense(level) {
        let n = config.level_resolution(level) as u32 + 1;
        (cell[0] + n * (cell[1] + n * cell[2])) as usize
    } else {
        let h = cell[0].wrapping_mul(HASH_PRIMES[0])
            ^ cell[1].wrapping_mul(HASH_PRIMES[1])
            ^ cell[2].wrapping_mul(HASH_PRIMES[2]);
        (h as usize) & (config.table_size - 1)
    }
}

/// Full field shape: grid plus MLP heads.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    /// Hidden layers in the geometry MLP (softplus activations).
    pub geo_hidden: usize,
    pub geo_width: usize,
    /// Latent vector width passed from the geometry head to the color head.
    pub latent: usize,
    /// Hidden layers in the color MLP (softplus, sigmoid output).
    pub color_hidden: usize,
    pub color_width: usize,
    /// Initial effective sharpness of the logistic CDF used by
    /// [`sdf_to_alpha`].
    pub sharpness_init: f64,
}

impl FieldConfig {
    /// Desk-scale defaults: L=8, F=2, T=2^16, resolutions 16..256, 2x64
    /// MLPs. `sharpness_init` makes the logistic transition band (the
    /// central 12%..88% swing, width 4/k) about 0.3 canonical units.
    pub fn desk_default(domain: Aabb) -> FieldConfig {
        FieldConfig {
            grid: HashGridConfig {
                levels: 8,
                features: 2,
                table_size: 1 << 16,
                base_resolution: 16,
                finest_resolution: 256,
                domain,
            },
            geo_hidden: 2,
            geo_width: 64,
            latent: 15,
            color_hidden: 2,
            color_width: 64,
            sharpness_init: 4.0 / 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.geo_hidden < 1 || self.color_hidden < 1 {
            return Err(Error::data("MLPs need at least one hidden layer"));
        }
        if self.geo_width < 1 || self.color_width < 1 || self.latent < 1 {
            return Err(Error::data("MLP widths and latent must be positive"));
        }
        if !(self.sharpness_init > 0.0) {
            return Err(Error::data("sharpness_init must be positive"));
        }
        Ok(())
    }

    fn geo_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut inp = self.grid.levels * self.grid.features;
        for _ in 0..self.geo_hidden {
            dims.push((self.geo_width, inp));
            inp = self.geo_width;
        }
        dims.push((1 + self.latent, inp));
        dims
    }

    fn color_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut inp = self.latent + 6; // latent ++ view dir ++ unit normal
        for _ in 0..self.color_hidden {
            dims.push((self.color_width, inp));
            inp = self.color_width;
        }
        dims.push((3, inp));
        dims
    }

    pub fn layout(&self) -> ParamLayout {
        let mut b = ParamLayout::builder();
        for l in 0..self.grid.levels {
            b.push(format!("hash.l{l}"), self.grid.table_size * self.grid.features);
        }
        for (i, (rows, cols)) in self.geo_dims().into_iter().enumerate() {
            b.push(format!("geo.w{i}"), rows * cols);
            b.push(format!("geo.b{i}"), rows);
        }
        for (i, (rows, cols)) in self.color_dims().into_iter().enumerate() {
            b.push(format!("col.w{i}"), rows * cols);
            b.push(format!("col.b{i}"), rows);
        }
        b.push("sharpness", 1);
        b.build()
    }

    pub fn param_count(&self) -> usize {
        self.layout().total()
    }
}

/// The stored sharpness parameter is `ln(k)/10`; the effective sharpness is
/// `k = exp(10 * raw)`. The log-scale parameterization lets k move by
/// orders of magnitude under the small learning rates used everywhere here;
/// a directly stored k would be frozen near its initialization.
pub fn sharpness_raw_from_effective(k: f64) -> f64 {
    k.ln() / 10.0
}

pub fn sharpness_effective_from_raw(raw: f64) -> f64 {
    (10.0 * raw).exp()
}

/// Deterministic weight initialization: hash tables ~ U(-1e-4, 1e-4), MLP
/// weights ~ N(0, 1/fan_in), biases zero, sharpness at its configured
/// initial effective value.
pub fn init_weights(config: &FieldConfig, seed: u64) -> ParamVector {
    let layout = Arc::new(config.layout());
    let mut p = ParamVector::zeros(layout);
    let mut hash_rng = stream(seed, "field-hash");
    for l in 0..config.grid.levels {
        for v in p.segment_mut(&format!("hash.l{l}")) {
            *v = hash_rng.gen_range(-1e-4..1e-4);
        }
    }
    let mut mlp_rng = stream(seed, "field-mlp");
    let mut normal = move || -> f64 {
        // Box-Muller; the upper-open uniform is shifted away from zero.
        let u1: f64 = 1.0 - mlp_rng.gen::<f64>();
        let u2: f64 = mlp_rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    for (prefix, dims) in [("geo", config.geo_dims()), ("col", config.color_dims())] {
        for (i, (_rows, cols)) in dims.into_iter().enumerate() {
            let std = 1.0 / (cols as f64).sqrt();
            for v in p.segment_mut(&format!("{prefix}.w{i}")) {
                *v = std * normal();
            }
        }
    }
    p.segment_mut("sharpness")[0] = sharpness_raw_from_effective(config.sharpness_init);
    p
}

/// Unbiased SDF-to-opacity conversion: with `Phi(s) = sigmoid(sharpness*s)`,
/// `alpha = max((Phi(s_i) - Phi(s_next)) / Phi(s_i), 0)`. Defined as 0 when
/// `Phi(s_i)` underflows.
pub fn sdf_to_alpha(s_i: f64, s_next: f64, sharpness: f64) -> f64 {
    let phi = |s: f64| {
        let x = sharpness * s;
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };
    let pi = phi(s_i);
    if pi <= 0.0 {
        return 0.0;
    }
    ((pi - phi(s_next)) / pi).max(0.0)
}

/// Field evaluation result at one canonical point.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// Canonical-space signed distance (meters).
    pub sdf: f64,
    /// Radiance in [0, 1]^3.
    pub color: [f64; 3],
    /// Spatial SDF gradient (not normalized).
    pub normal: V3,
}

#[derive(Clone, Copy, Debug)]
struct LayerOffsets {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

/// Geometry head outputs on the tape.
pub struct GeoSample {
    pub sdf: Val,
    pub latent: Val,
    /// ∇s as a length-3 value, built from tangent propagation.
    pub normal: Val,
    /// True if the query point was clamped to the domain box.
    pub clamped: bool,
}

/// A [`FieldConfig`] with all parameter offsets resolved, ready to record
/// field evaluations on a tape. Immutable and shareable across workers.
#[derive(Clone, Debug)]
pub struct FieldProgram {
    pub cfg: FieldConfig,
    pub layout: Arc<ParamLayout>,
    level_res: Vec<usize>,
    hash_off: Vec<usize>,
    geo: Vec<LayerOffsets>,
    col: Vec<LayerOffsets>,
    sharp_off: usize,
}

impl FieldProgram {
    pub fn new(cfg: FieldConfig) -> Result<FieldProgram> {
        cfg.validate()?;
        let layout = Arc::new(cfg.layout());
        let level_res: Vec<usize> = (0..cfg.grid.levels)
            .map(|l| cfg.grid.level_resolution(l))
            .collect();
        let hash_off: Vec<usize> = (0..cfg.grid.levels)
            .map(|l| layout.expect_span(&format!("hash.l{l}")).0)
            .collect();
        let collect_layers = |prefix: &str, dims: Vec<(usize, usize)>| -> Vec<LayerOffsets> {
            dims.into_iter()
                .enumerate()
                .map(|(i, (rows, cols))| LayerOffsets {
                    w: layout.expect_span(&format!("{prefix}.w{i}")).0,
                    b: layout.expect_span(&format!("{prefix}.b{i}")).0,
                    rows,
                    cols,
                })
                .collect()
        };
        let geo = collect_layers("geo", cfg.geo_dims());
        let col = collect_layers("col", cfg.color_dims());
        let sharp_off = layout.expect_span("sharpness").0;
        Ok(FieldProgram {
            cfg,
            layout,
            level_res,
            hash_off,
            geo,
            col,
            sharp_off,
        })
    }

    /// Effective sharpness `k` on the tape.
    pub fn sharpness(&self, t: &mut Tape) -> Val {
        let raw = t.param_slice(self.sharp_off, 1);
        let scaled = t.scale(raw, 10.0);
        t.exp(scaled)
    }

    pub fn sharpness_value(&self, params: &ParamVector) -> f64 {
        sharpness_effective_from_raw(params.values[self.sharp_off])
    }

    /// Hash-encode `p` (clamped to the domain box): per level, gather the 8
    /// corner feature rows and blend trilinearly; also emit the three
    /// spatial tangent blends. Returns (features, d features / d p, clamped).
    fn encode(&self, t: &mut Tape, p: V3) -> (Val, [Val; 3], bool) {
        let dom = &self.cfg.grid.domain;
        let f = self.cfg.grid.features;
        let mut u = [0.0f64; 3];
        let mut inv_size = [0.0f64; 3];
        let mut clamped = false;
        for a in 0..3 {
            let size = dom.hi[a] - dom.lo[a];
            inv_size[a] = 1.0 / size;
            let ua = (p[a] - dom.lo[a]) * inv_size[a];
            if !(0.0..=1.0).contains(&ua) {
                clamped = true;
            }
            u[a] = ua.clamp(0.0, 1.0);
        }
        let mut feats = Vec::with_capacity(self.level_res.len());
        let mut dfeats: [Vec<Val>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut ids = Vec::with_capacity(8 * f);
        for (l, &res) in self.level_res.iter().enumerate() {
            let mut cell = [0u32; 3];
            let mut fr = [0.0f64; 3];
            for a in 0..3 {
                let x = u[a] * res as f64;
                let c = (x.floor() as i64).clamp(0, res as i64 - 1);
                cell[a] = c as u32;
                fr[a] = x - c as f64;
            }
            ids.clear();
            for k in 0..8u32 {
                let corner = [
                    cell[0] + (k & 1),
                    cell[1] + ((k >> 1) & 1),
                    cell[2] + ((k >> 2) & 1),
                ];
                let slot = hash_index(l, corner, &self.cfg.grid);
                for j in 0..f {
                    ids.push((slot * f + j) as u32);
                }
            }
            let g = t.gather(self.hash_off[l], &ids);
            let mut w = [0.0f64; 8];
            for (k, wk) in w.iter_mut().enumerate() {
                let mut acc = 1.0;
                for a in 0..3 {
                    let hi = (k >> a) & 1 == 1;
                    acc *= if hi { fr[a] } else { 1.0 - fr[a] };
                }
                *wk = acc;
            }
            feats.push(t.corner_blend(g, f, w));
            for a in 0..3 {
                // d/dp of the trilinear weights; zero where the query was
                // clamped to the box (the encoding is constant beyond it).
                let du = if (0.0..=1.0).contains(&((p[a] - dom.lo[a]) * inv_size[a])) {
                    res as f64 * inv_size[a]
                } else {
                    0.0
                };
                let mut dw = [0.0f64; 8];
                for (k, dwk) in dw.iter_mut().enumerate() {
                    let hi_a = (k >> a) & 1 == 1;
                    let mut acc = if hi_a { 1.0 } else { -1.0 };
                    for b in 0..3 {
                        if b == a {
                            continue;
                        }
                        let hi = (k >> b) & 1 == 1;
                        acc *= if hi { fr[b] } else { 1.0 - fr[b] };
                    }
                    *dwk = acc * du;
                }
                dfeats[a].push(t.corner_blend(g, f, dw));
            }
        }
        let feat = t.concat(&feats);
        let d = [
            t.concat(&dfeats[0]),
            t.concat(&dfeats[1]),
            t.concat(&dfeats[2]),
        ];
        (feat, d, clamped)
    }

    /// Encoded feature vector (values only), for inspection and tests.
    pub fn encode_values(&self, buf: &mut TapeBuffers, params: &ParamVector, p: V3) -> Vec<f64> {
        let mut t = buf.tape(params);
        let (feat, _, _) = self.encode(&mut t, p);
        t.value(feat).to_vec()
    }

    /// Full geometry pass with tangent streams: SDF, latent, and exact ∇s.
    pub fn geometry(&self, t: &mut Tape, p: V3) -> GeoSample {
        let (feat, dfeat, clamped) = self.encode(t, p);
        let mut h = feat;
        let mut th = dfeat;
        for layer in &self.geo[..self.geo.len() - 1] {
            let z = t.linear(layer.w, Some(layer.b), layer.rows, layer.cols, h);
            h = t.softplus(z);
            let sig = t.sigmoid(z);
            for ta in th.iter_mut() {
                let lin = t.linear(layer.w, None, layer.rows, layer.cols, *ta);
                *ta = t.mul(sig, lin);
            }
        }
        let out_layer = self.geo[self.geo.len() - 1];
        let full = t.linear(out_layer.w, Some(out_layer.b), out_layer.rows, out_layer.cols, h);
        let sdf = t.view(full, 0, 1);
        let latent = t.view(full, 1, self.cfg.latent);
        // Only the SDF row of the output weights feeds the tangents.
        let parts: Vec<Val> = th
            .iter()
            .map(|ta| t.linear(out_layer.w, None, 1, out_layer.cols, *ta))
            .collect();
        let normal = t.concat(&parts);
        GeoSample {
            sdf,
            latent,
            normal,
            clamped,
        }
    }

    /// SDF only, without tangent streams; the fast path for mesh extraction
    /// and sphere tracing.
    pub fn sdf_value(&self, t: &mut Tape, p: V3) -> Val {
        let (feat, _) = self.encode_values_only(t, p);
        let mut h = feat;
        for layer in &self.geo[..self.geo.len() - 1] {
            let z = t.linear(layer.w, Some(layer.b), layer.rows, layer.cols, h);
            h = t.softplus(z);
        }
        let out = self.geo[self.geo.len() - 1];
        t.linear(out.w, Some(out.b), 1, out.cols, h)
    }

    fn encode_values_only(&self, t: &mut Tape, p: V3) -> (Val, bool) {
        // Same corner math as `encode` without tangent blends.
        let dom = &self.cfg.grid.domain;
        let f = self.cfg.grid.features;
        let mut u = [0.0f64; 3];
        let mut clamped = false;
        for a in 0..3 {
            let ua = (p[a] - dom.lo[a]) / (dom.hi[a] - dom.lo[a]);
            if !(0.0..=1.0).contains(&ua) {
                clamped = true;
            }
            u[a] = ua.clamp(0.0, 1.0);
        }
        let mut feats = Vec::with_capacity(self.level_res.len());
        let mut ids = Vec::with_capacity(8 * f);
        for (l, &res) in self.level_res.iter().enumerate() {
            let mut cell = [0u32; 3];
            let mut fr = [0.0f64; 3];
            for a in 0..3 {
                let x = u[a] * res as f64;
                let c = (x.floor() as i64).clamp(0, res as i64 - 1);
                cell[a] = c as u32;
                fr[a] = x - c as f64;
            }
            ids.clear();
            for k in 0..8u32 {
                let corner = [
                    cell[0] + (k & 1),
                    cell[1] + ((k >> 1) & 1),
                    cell[2] + ((k >> 2) & 1),
                ];
                let slot = hash_index(l, corner, &self.cfg.grid);
                for j in 0..f {
                    ids.push((slot * f + j) as u32);
                }
            }
            let g = t.gather(self.hash_off[l], &ids);
            let mut w = [0.0f64; 8];
            for (k, wk) in w.iter_mut().enumerate() {
                let mut acc = 1.0;
                for a in 0..3 {
                    let hi = (k >> a) & 1 == 1;
                    acc *= if hi { fr[a] } else { 1.0 - fr[a] };
                }
                *wk = acc;
            }
            feats.push(t.corner_blend(g, f, w));
        }
        (t.concat(&feats), clamped)
    }

    /// Color head: latent ++ view direction ++ guarded unit normal through
    /// the color MLP, sigmoid output.
    pub fn color(&self, t: &mut Tape, geo: &GeoSample, view_dir: V3) -> Val {
        let n = geo.normal;
        let d2 = t.dot(n, n);
        let d2g = t.add_const(d2, 1e-16); // |n| guard, epsilon 1e-8
        let nrm = t.sqrt(d2g);
        let one = t.scalar(1.0);
        let inv = t.div(one, nrm);
        let nhat = t.scale_by(n, inv);
        let dir = t.constant(&view_dir);
        let mut h = t.concat(&[geo.latent, dir, nhat]);
        for layer in &self.col[..self.col.len() - 1] {
            let z = t.linear(layer.w, Some(layer.b), layer.rows, layer.cols, h);
            h = t.softplus(z);
        }
        let out = self.col[self.col.len() - 1];
        let z = t.linear(out.w, Some(out.b), out.rows, out.cols, h);
        t.sigmoid(z)
    }

    /// One-point evaluation (SDF, color, normal), off-tape.
    pub fn eval_field(
        &self,
        buf: &mut TapeBuffers,
        params: &ParamVector,
        p: V3,
        view_dir: V3,
    ) -> Result<FieldOutput> {
        let mut t = buf.tape(params);
        let geo = self.geometry(&mut t, p);
        let sdf = t.scalar_value(geo.sdf);
        let normal = t.value(geo.normal);
        let normal = [normal[0], normal[1], normal[2]];
        if !sdf.is_finite() || normal.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "geometry head produced a non-finite output at {p:?}"
            )));
        }
        let c = self.color(&mut t, &geo, view_dir);
        let cv = t.value(c);
        let color = [cv[0], cv[1], cv[2]];
        if color.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "color head produced a non-finite output at {p:?}"
            )));
        }
        Ok(FieldOutput { sdf, color, normal })
    }

    /// SDF at one point, off-tape.
    pub fn sdf_at(&self, buf: &mut TapeBuffers, params: &ParamVector, p: V3) -> f64 {
        let mut t = buf.tape(params);
        let v = self.sdf_value(&mut t, p);
        t.scalar_value(v)
    }
}

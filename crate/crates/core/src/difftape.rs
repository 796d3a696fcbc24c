//! Reverse-mode automatic differentiation over a flat parameter vector.
//!
//! The tape records vector-valued operations (a node's output is a small
//! contiguous span of an arena, not a single scalar), which keeps node counts
//! in the tens of thousands per training step instead of tens of millions.
//! Network weights are never copied onto the tape: `linear` and `gather` read
//! straight from the parameter vector and scatter their adjoints straight into
//! the gradient buffer, so a step's memory footprint is the activation arena
//! plus one dense gradient.
//!
//! Forward values are computed eagerly as nodes are pushed; `backward` then
//! runs a single reverse sweep. Evaluation order is fully deterministic.
//!
//! Subgradient conventions at non-smooth points (documented, deterministic):
//! `max`/`min` and the clamps route the adjoint to their first argument at
//! exact ties, `abs` uses derivative +1 at zero, and `huber` uses the
//! quadratic branch at |x| = delta (both branches agree there).

use std::sync::Arc;

use crate::{Error, Result};

/// One named contiguous block of the parameter vector.
#[derive(Clone, Debug)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Immutable map from segment names to offsets in a flat parameter vector.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    segs: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    /// Total parameter count P.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segs
    }

    /// Offset and length of a named segment.
    pub fn span(&self, name: &str) -> Option<(usize, usize)> {
        self.segs
            .iter()
            .find(|s| s.name == name)
            .map(|s| (s.offset, s.len))
    }

    /// Like [`span`](Self::span) but panics with the segment name; for
    /// internal lookups of segments the layout is known to contain.
    pub fn expect_span(&self, name: &str) -> (usize, usize) {
        self.span(name)
            .unwrap_or_else(|| panic!("layout has no segment `{name}`"))
    }

    /// Structural equality: same names, offsets, and lengths.
    pub fn same_shape(&self, other: &ParamLayout) -> bool {
        self.total == other.total
            && self.segs.len() == other.segs.len()
            && self
                .segs
                .iter()
                .zip(&other.segs)
                .all(|(a, b)| a.name == b.name && a.offset == b.offset && a.len == b.len)
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    segs: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    /// Append a segment and return its offset.
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.total;
        self.segs.push(Segment {
            name: name.into(),
            offset,
            len,
        });
        self.total += len;
        offset
    }

    pub fn build(self) -> ParamLayout {
        ParamLayout {
            segs: self.segs,
            total: self.total,
        }
    }
}

/// A flat parameter vector with its layout.
#[derive(Clone, Debug)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::data(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of a named segment.
    pub fn segment(&self, name: &str) -> &[f64] {
        let (off, len) = self.layout.expect_span(name);
        &self.values[off..off + len]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let (off, len) = self.layout.expect_span(name);
        &mut self.values[off..off + len]
    }
}

/// Handle to a tape value: a contiguous span of the forward arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val {
    off: u32,
    len: u32,
}

impl Val {
    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Neg,
    OneMinus,
}

#[derive(Clone, Copy, Debug)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const,
    ParamSlice { src: u32 },
    Gather { base: u32, ids: (u32, u32) },
    Linear { w: u32, b: i64, rows: u32, cols: u32, x: Val },
    CornerBlend { x: Val, feat: u32, w: [f64; 8] },
    Concat { parts: (u32, u32) },
    Unary { k: Unary, x: Val },
    Scale { x: Val, c: f64 },
    AddConst { x: Val },
    ClampMin { x: Val, c: f64 },
    ClampMax { x: Val, c: f64 },
    Huber { x: Val, delta: f64 },
    Bin { k: Bin, a: Val, b: Val },
    ScaleBy { x: Val, s: Val },
    Dot { a: Val, b: Val },
    Sum { x: Val },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const => "const",
        Op::ParamSlice { .. } => "param_slice",
        Op::Gather { .. } => "gather",
        Op::Linear { .. } => "linear",
        Op::CornerBlend { .. } => "corner_blend",
        Op::Concat { .. } => "concat",
        Op::Unary { k, .. } => match k {
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
            Unary::Neg => "neg",
            Unary::OneMinus => "one_minus",
        },
        Op::Scale { .. } => "scale",
        Op::AddConst { .. } => "add_const",
        Op::ClampMin { .. } => "clamp_min",
        Op::ClampMax { .. } => "clamp_max",
        Op::Huber { .. } => "huber",
        Op::Bin { k, .. } => match k {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
            Bin::Max => "max",
            Bin::Min => "min",
        },
        Op::ScaleBy { .. } => "scale_by",
        Op::Dot { .. } => "dot",
        Op::Sum { .. } => "sum",
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    out: Val,
}

/// Reusable arenas backing a tape. Construct once, reuse across steps; all
/// allocations amortize to zero after warmup.
#[derive(Default)]
pub struct TapeBuffers {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    idx: Vec<u32>,
    parts: Vec<Val>,
}

impl TapeBuffers {
    pub fn new() -> Self {
        Self::default()
    }

    fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.idx.clear();
        self.parts.clear();
    }

    /// Begin recording a fresh graph over `params`.
    pub fn tape<'a>(&'a mut self, params: &'a ParamVector) -> Tape<'a> {
        self.clear();
        Tape {
            params: &params.values,
            buf: self,
        }
    }
}

/// An in-progress computation graph. Values are computed as ops are pushed.
pub struct Tape<'a> {
    params: &'a [f64],
    buf: &'a mut TapeBuffers,
}

impl<'a> Tape<'a> {
    /// Read the forward value of `v`.
    pub fn value(&self, v: Val) -> &[f64] {
        &self.buf.vals[v.off as usize..(v.off + v.len) as usize]
    }

    /// Read a length-1 value as a scalar.
    pub fn scalar_value(&self, v: Val) -> f64 {
        assert_eq!(v.len, 1, "scalar_value on length-{} value", v.len);
        self.buf.vals[v.off as usize]
    }

    fn alloc(&mut self, len: usize) -> Val {
        let off = self.buf.vals.len() as u32;
        self.buf.vals.resize(off as usize + len, 0.0);
        Val {
            off,
            len: len as u32,
        }
    }

    fn finish(&mut self, op: Op, out: Val) -> Val {
        self.buf.nodes.push(Node { op, out });
        out
    }

    /// Split the arena so `out` is writable while earlier values stay
    /// readable. Inputs always precede outputs in the arena.
    fn out_and_prior(&mut self, out: Val) -> (&mut [f64], &[f64]) {
        let (prior, rest) = self.buf.vals.split_at_mut(out.off as usize);
        (&mut rest[..out.len as usize], prior)
    }

    pub fn constant(&mut self, values: &[f64]) -> Val {
        let out = self.alloc(values.len());
        let (o, _) = self.out_and_prior(out);
        o.copy_from_slice(values);
        self.finish(Op::Const, out)
    }

    pub fn scalar(&mut self, v: f64) -> Val {
        self.constant(&[v])
    }

    /// A contiguous slice of the parameter vector as a tape value.
    pub fn param_slice(&mut self, offset: usize, len: usize) -> Val {
        assert!(offset + len <= self.params.len(), "param slice out of range");
        let out = self.alloc(len);
        let src = &self.params[offset..offset + len];
        let (o, _) = self.out_and_prior(out);
        o.copy_from_slice(src);
        self.finish(Op::ParamSlice { src: offset as u32 }, out)
    }

    /// `out[k] = params[base + ids[k]]`. The adjoint scatters sparsely into
    /// the gradient at the same indices.
    pub fn gather(&mut self, base: usize, ids: &[u32]) -> Val {
        let id_off = self.buf.idx.len() as u32;
        self.buf.idx.extend_from_slice(ids);
        let out = self.alloc(ids.len());
        for (k, &id) in ids.iter().enumerate() {
            let src = base + id as usize;
            assert!(src < self.params.len(), "gather index out of range");
            self.buf.vals[out.off as usize + k] = self.params[src];
        }
        self.finish(
            Op::Gather {
                base: base as u32,
                ids: (id_off, ids.len() as u32),
            },
            out,
        )
    }

    /// Affine map `W x + b` with `W` (`rows` x `cols`, row-major) and `b`
    /// read directly from the parameter vector. Pass `b: None` for a pure
    /// matrix product.
    pub fn linear(&mut self, w: usize, b: Option<usize>, rows: usize, cols: usize, x: Val) -> Val {
        assert_eq!(x.len(), cols, "linear input length != cols");
        assert!(w + rows * cols <= self.params.len(), "weight block out of range");
        if let Some(b) = b {
            assert!(b + rows <= self.params.len(), "bias block out of range");
        }
        let out = self.alloc(rows);
        let params = self.params;
        let (o, prior) = self.out_and_prior(out);
        let xs = &prior[x.off as usize..(x.off + x.len) as usize];
        for r in 0..rows {
            let row = &params[w + r * cols..w + (r + 1) * cols];
            let mut acc = match b {
                Some(b) => params[b + r],
                None => 0.0,
            };
            for c in 0..cols {
                acc += row[c] * xs[c];
            }
            o[r] = acc;
        }
        self.finish(
            Op::Linear {
                w: w as u32,
                b: b.map_or(-1, |b| b as i64),
                rows: rows as u32,
                cols: cols as u32,
                x,
            },
            out,
        )
    }

    /// Blend 8 corner feature rows with constant weights:
    /// `out[j] = sum_k w[k] * x[k*feat + j]`.
    pub fn corner_blend(&mut self, x: Val, feat: usize, w: [f64; 8]) -> Val {
        assert_eq!(x.len(), 8 * feat, "corner_blend input length != 8*feat");
        let out = self.alloc(feat);
        let (o, prior) = self.out_and_prior(out);
        let xs = &prior[x.off as usize..(x.off + x.len) as usize];
        for (j, oj) in o.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * xs[k * feat + j];
            }
            *oj = acc;
        }
        self.finish(
            Op::CornerBlend {
                x,
                feat: feat as u32,
                w,
            },
            out,
        )
    }

    pub fn concat(&mut self, parts: &[Val]) -> Val {
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let part_off = self.buf.parts.len() as u32;
        self.buf.parts.extend_from_slice(parts);
        let out = self.alloc(total);
        let (o, prior) = self.out_and_prior(out);
        let mut at = 0;
        for p in parts {
            o[at..at + p.len()].copy_from_slice(&prior[p.off as usize..(p.off + p.len) as usize]);
            at += p.len();
        }
        self.finish(
            Op::Concat {
                parts: (part_off, parts.len() as u32),
            },
            out,
        )
    }

    fn unary(&mut self, k: Unary, x: Val) -> Val {
        let out = self.alloc(x.len());
        let (o, prior) = self.out_and_prior(out);
        let xs = &prior[x.off as usize..(x.off + x.len) as usize];
        for (o, &x) in o.iter_mut().zip(xs) {
            *o = match k {
                Unary::Sigmoid => sigmoid(x),
                Unary::Softplus => softplus(x),
                Unary::Exp => x.exp(),
                Unary::Ln => x.ln(),
                Unary::Sqrt => x.sqrt(),
                Unary::Abs => x.abs(),
                Unary::Neg => -x,
                Unary::OneMinus => 1.0 - x,
            };
        }
        self.finish(Op::Unary { k, x }, out)
    }

    pub fn sigmoid(&mut self, x: Val) -> Val {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Val) -> Val {
        self.unary(Unary::Softplus, x)
    }

    pub fn exp(&mut self, x: Val) -> Val {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Val) -> Val {
        self.unary(Unary::Ln, x)
    }

    pub fn sqrt(&mut self, x: Val) -> Val {
        self.unary(Unary::Sqrt, x)
    }

    pub fn abs(&mut self, x: Val) -> Val {
        self.unary(Unary::Abs, x)
    }

    pub fn neg(&mut self, x: Val) -> Val {
        self.unary(Unary::Neg, x)
    }

    pub fn one_minus(&mut self, x: Val) -> Val {
        self.unary(Unary::OneMinus, x)
    }

    fn affine1(&mut self, op: Op, x: Val, f: impl Fn(f64) -> f64) -> Val {
        let out = self.alloc(x.len());
        let (o, prior) = self.out_and_prior(out);
        let xs = &prior[x.off as usize..(x.off + x.len) as usize];
        for (o, &x) in o.iter_mut().zip(xs) {
            *o = f(x);
        }
        self.finish(op, out)
    }

    pub fn scale(&mut self, x: Val, c: f64) -> Val {
        self.affine1(Op::Scale { x, c }, x, |v| c * v)
    }

    pub fn add_const(&mut self, x: Val, c: f64) -> Val {
        self.affine1(Op::AddConst { x }, x, |v| v + c)
    }

    /// `max(x, c)` elementwise; adjoint flows to `x` when `x >= c`.
    pub fn clamp_min(&mut self, x: Val, c: f64) -> Val {
        self.affine1(Op::ClampMin { x, c }, x, |v| v.max(c))
    }

    /// `min(x, c)` elementwise; adjoint flows to `x` when `x <= c`.
    pub fn clamp_max(&mut self, x: Val, c: f64) -> Val {
        self.affine1(Op::ClampMax { x, c }, x, |v| v.min(c))
    }

    /// Elementwise Huber penalty: `0.5 x^2` for `|x| <= delta`, else
    /// `delta (|x| - 0.5 delta)`.
    pub fn huber(&mut self, x: Val, delta: f64) -> Val {
        self.affine1(Op::Huber { x, delta }, x, |v| {
            if v.abs() <= delta {
                0.5 * v * v
            } else {
                delta * (v.abs() - 0.5 * delta)
            }
        })
    }

    fn bin(&mut self, k: Bin, a: Val, b: Val) -> Val {
        assert_eq!(a.len, b.len, "binary op length mismatch");
        let out = self.alloc(a.len());
        let (o, prior) = self.out_and_prior(out);
        let xs = &prior[a.off as usize..(a.off + a.len) as usize];
        let ys = &prior[b.off as usize..(b.off + b.len) as usize];
        for i in 0..o.len() {
            let (x, y) = (xs[i], ys[i]);
            o[i] = match k {
                Bin::Add => x + y,
                Bin::Sub => x - y,
                Bin::Mul => x * y,
                Bin::Div => x / y,
                Bin::Max => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
                Bin::Min => {
                    if x <= y {
                        x
                    } else {
                        y
                    }
                }
            };
        }
        self.finish(Op::Bin { k, a, b }, out)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        self.bin(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        self.bin(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        self.bin(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Val, b: Val) -> Val {
        self.bin(Bin::Div, a, b)
    }

    /// Elementwise max; ties route the adjoint to `a`.
    pub fn vmax(&mut self, a: Val, b: Val) -> Val {
        self.bin(Bin::Max, a, b)
    }

    /// Elementwise min; ties route the adjoint to `a`.
    pub fn vmin(&mut self, a: Val, b: Val) -> Val {
        self.bin(Bin::Min, a, b)
    }

    /// Multiply a vector by a length-1 value.
    pub fn scale_by(&mut self, x: Val, s: Val) -> Val {
        assert_eq!(s.len, 1, "scale_by takes a scalar second argument");
        let out = self.alloc(x.len());
        let (o, prior) = self.out_and_prior(out);
        let sv = prior[s.off as usize];
        let xs = &prior[x.off as usize..(x.off + x.len) as usize];
        for (o, &x) in o.iter_mut().zip(xs) {
            *o = sv * x;
        }
        self.finish(Op::ScaleBy { x, s }, out)
    }

    pub fn dot(&mut self, a: Val, b: Val) -> Val {
        assert_eq!(a.len, b.len, "dot length mismatch");
        let out = self.alloc(1);
        let (o, prior) = self.out_and_prior(out);
        let xs = &prior[a.off as usize..(a.off + a.len) as usize];
        let ys = &prior[b.off as usize..(b.off + b.len) as usize];
        o[0] = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
        self.finish(Op::Dot { a, b }, out)
    }

    pub fn sum(&mut self, x: Val) -> Val {
        let out = self.alloc(1);
        let (o, prior) = self.out_and_prior(out);
        o[0] = prior[x.off as usize..(x.off + x.len) as usize].iter().sum();
        self.finish(Op::Sum { x }, out)
    }

    /// A sub-span of `v` as a value, without copying or adding a node.
    /// Adjoints written through the view land inside `v`'s adjoint span and
    /// reach `v`'s producer directly.
    pub fn view(&self, v: Val, start: usize, len: usize) -> Val {
        assert!(start + len <= v.len(), "view out of range");
        Val {
            off: v.off + start as u32,
            len: len as u32,
        }
    }

    /// Arithmetic mean as `sum / len`.
    pub fn mean(&mut self, x: Val) -> Val {
        let n = x.len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Locate the first node whose output contains a non-finite value.
    fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        for (i, n) in self.buf.nodes.iter().enumerate() {
            let vals = &self.buf.vals[n.out.off as usize..(n.out.off + n.out.len) as usize];
            if vals.iter().any(|v| !v.is_finite()) {
                return Some((i, op_name(&n.op)));
            }
        }
        None
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn non_finite_error(tape: &Tape) -> Error {
    match tape.first_non_finite() {
        Some((i, name)) => Error::numerical(format!(
            "non-finite value first produced by op `{name}` (node {i})"
        )),
        None => Error::numerical("non-finite loss".to_string()),
    }
}

/// Evaluate a scalar loss without computing gradients.
pub fn eval_with<F>(buf: &mut TapeBuffers, params: &ParamVector, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape) -> Val,
{
    let mut tape = buf.tape(params);
    let out = build(&mut tape);
    assert_eq!(out.len(), 1, "loss must be a scalar");
    let loss = tape.scalar_value(out);
    if !loss.is_finite() {
        return Err(non_finite_error(&tape));
    }
    Ok(loss)
}

/// Evaluate a scalar loss and accumulate `d loss / d params` into `grad`
/// (which must have exactly `params.len()` entries and is added to, not
/// overwritten). Returns the loss value.
pub fn grad_with<F>(
    buf: &mut TapeBuffers,
    params: &ParamVector,
    grad: &mut [f64],
    build: F,
) -> Result<f64>
where
    F: FnOnce(&mut Tape) -> Val,
{
    assert_eq!(
        grad.len(),
        params.len(),
        "gradient buffer length != parameter count"
    );
    let mut tape = buf.tape(params);
    let out = build(&mut tape);
    assert_eq!(out.len(), 1, "loss must be a scalar");
    let loss = tape.scalar_value(out);
    if !loss.is_finite() {
        return Err(non_finite_error(&tape));
    }
    backward(buf, &params.values, out, grad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical(
            "non-finite gradient after backward sweep".to_string(),
        ));
    }
    Ok(loss)
}

/// Convenience wrapper over [`grad_with`]: fresh buffers, zeroed gradient.
pub fn grad<F>(params: &ParamVector, build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape) -> Val,
{
    let mut buf = TapeBuffers::new();
    let mut g = vec![0.0; params.len()];
    let loss = grad_with(&mut buf, params, &mut g, build)?;
    Ok((loss, g))
}

fn backward(buf: &mut TapeBuffers, params: &[f64], out: Val, grad: &mut [f64]) {
    let TapeBuffers {
        nodes,
        vals,
        adj,
        idx,
        parts,
    } = buf;
    adj.clear();
    adj.resize(vals.len(), 0.0);
    adj[out.off as usize] = 1.0;

    for node in nodes.iter().rev() {
        let o = node.out;
        let (o_off, o_len) = (o.off as usize, o.len as usize);
        macro_rules! sp {
            ($v:expr, $arr:expr) => {
                &$arr[$v.off as usize..($v.off + $v.len) as usize]
            };
        }
        match node.op {
            Op::Const => {}
            Op::ParamSlice { src } => {
                let dy = &adj[o_off..o_off + o_len];
                for (i, d) in dy.iter().enumerate() {
                    grad[src as usize + i] += d;
                }
            }
            Op::Gather { base, ids } => {
                let dy = &adj[o_off..o_off + o_len];
                let ids = &idx[ids.0 as usize..(ids.0 + ids.1) as usize];
                for (k, &id) in ids.iter().enumerate() {
                    grad[base as usize + id as usize] += dy[k];
                }
            }
            Op::Linear { w, b, rows, cols, x } => {
                let (rows, cols) = (rows as usize, cols as usize);
                let w = w as usize;
                // dy is read before mutating adj at x; copy the small row.
                for r in 0..rows {
                    let dyr = adj[o_off + r];
                    if dyr == 0.0 {
                        continue;
                    }
                    if b >= 0 {
                        grad[b as usize + r] += dyr;
                    }
                    let xs_off = x.off as usize;
                    let wrow = w + r * cols;
                    for c in 0..cols {
                        grad[wrow + c] += dyr * vals[xs_off + c];
                        adj[xs_off + c] += params[wrow + c] * dyr;
                    }
                }
            }
            Op::CornerBlend { x, feat, w } => {
                let feat = feat as usize;
                for j in 0..o_len {
                    let dyj = adj[o_off + j];
                    if dyj == 0.0 {
                        continue;
                    }
                    for (k, wk) in w.iter().enumerate() {
                        adj[x.off as usize + k * feat + j] += wk * dyj;
                    }
                }
            }
            Op::Concat { parts: pr } => {
                let list = &parts[pr.0 as usize..(pr.0 + pr.1) as usize];
                let mut at = o_off;
                for p in list {
                    for i in 0..p.len() {
                        adj[p.off as usize + i] += adj[at + i];
                    }
                    at += p.len();
                }
            }
            Op::Unary { k, x } => {
                for i in 0..o_len {
                    let dy = adj[o_off + i];
                    if dy == 0.0 {
                        continue;
                    }
                    let xi = vals[x.off as usize + i];
                    let oi = vals[o_off + i];
                    let dx = match k {
                        Unary::Sigmoid => oi * (1.0 - oi),
                        Unary::Softplus => sigmoid(xi),
                        Unary::Exp => oi,
                        Unary::Ln => 1.0 / xi,
                        Unary::Sqrt => 0.5 / oi,
                        Unary::Abs => {
                            if xi >= 0.0 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                        Unary::Neg => -1.0,
                        Unary::OneMinus => -1.0,
                    };
                    adj[x.off as usize + i] += dx * dy;
                }
            }
            Op::Scale { x, c } => {
                for i in 0..o_len {
                    adj[x.off as usize + i] += c * adj[o_off + i];
                }
            }
            Op::AddConst { x } => {
                for i in 0..o_len {
                    adj[x.off as usize + i] += adj[o_off + i];
                }
            }
            Op::ClampMin { x, c } => {
                for i in 0..o_len {
                    if vals[x.off as usize + i] >= c {
                        adj[x.off as usize + i] += adj[o_off + i];
                    }
                }
            }
            Op::ClampMax { x, c } => {
                for i in 0..o_len {
                    if vals[x.off as usize + i] <= c {
                        adj[x.off as usize + i] += adj[o_off + i];
                    }
                }
            }
            Op::Huber { x, delta } => {
                for i in 0..o_len {
                    let xi = vals[x.off as usize + i];
                    let dx = if xi.abs() <= delta {
                        xi
                    } else {
                        delta * xi.signum()
                    };
                    adj[x.off as usize + i] += dx * adj[o_off + i];
                }
            }
            Op::Bin { k, a, b } => {
                for i in 0..o_len {
                    let dy = adj[o_off + i];
                    if dy == 0.0 {
                        continue;
                    }
                    let (ai, bi) = (vals[a.off as usize + i], vals[b.off as usize + i]);
                    match k {
                        Bin::Add => {
                            adj[a.off as usize + i] += dy;
                            adj[b.off as usize + i] += dy;
                        }
                        Bin::Sub => {
                            adj[a.off as usize + i] += dy;
                            adj[b.off as usize + i] -= dy;
                        }
                        Bin::Mul => {
                            adj[a.off as usize + i] += bi * dy;
                            adj[b.off as usize + i] += ai * dy;
                        }
                        Bin::Div => {
                            adj[a.off as usize + i] += dy / bi;
                            adj[b.off as usize + i] -= dy * ai / (bi * bi);
                        }
                        Bin::Max => {
                            if ai >= bi {
                                adj[a.off as usize + i] += dy;
                            } else {
                                adj[b.off as usize + i] += dy;
                            }
                        }
                        Bin::Min => {
                            if ai <= bi {
                                adj[a.off as usize + i] += dy;
                            } else {
                                adj[b.off as usize + i] += dy;
                            }
                        }
                    }
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = vals[s.off as usize];
                let mut ds = 0.0;
                for i in 0..o_len {
                    let dy = adj[o_off + i];
                    adj[x.off as usize + i] += sv * dy;
                    ds += vals[x.off as usize + i] * dy;
                }
                adj[s.off as usize] += ds;
            }
            Op::Dot { a, b } => {
                let dy = adj[o_off];
                if dy != 0.0 {
                    let (xs, ys) = (sp!(a, vals), sp!(b, vals));
                    for i in 0..xs.len() {
                        adj[a.off as usize + i] += ys[i] * dy;
                    }
                    for i in 0..ys.len() {
                        adj[b.off as usize + i] += xs[i] * dy;
                    }
                }
            }
            Op::Sum { x } => {
                let dy = adj[o_off];
                if dy != 0.0 {
                    for i in 0..x.len() {
                        adj[x.off as usize + i] += dy;
                    }
                }
            }
        }
    }
}

/// Result of a finite-difference spot check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare analytic gradients against central finite differences at the
/// given parameter `indices`. Relative error is
/// `|analytic - fd| / max(1e-8, |fd|)`.
pub fn finite_diff_check<F>(
    params: &ParamVector,
    indices: &[usize],
    step: f64,
    build: F,
) -> Result<FdReport>
where
    F: Fn(&mut Tape) -> Val,
{
    let (_, g) = grad(params, &build)?;
    let mut buf = TapeBuffers::new();
    let mut probe = params.clone();
    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_index = indices.first().copied().unwrap_or(0);
    for &i in indices {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let hi = eval_with(&mut buf, &probe, &build)?;
        probe.values[i] = orig - step;
        let lo = eval_with(&mut buf, &probe, &build)?;
        probe.values[i] = orig;
        let fd = (hi - lo) / (2.0 * step);
        let rel = (g[i] - fd).abs() / fd.abs().max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
        analytic.push(g[i]);
        numeric.push(fd);
    }
    Ok(FdReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

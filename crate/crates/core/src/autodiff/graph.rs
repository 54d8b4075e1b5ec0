//! Define-by-run reverse-mode tape over [`Tensor`]s.
//!
//! A fresh [`Graph`] is built for every forward pass. Parameters enter the
//! graph by name from a [`ParamStore`]; after [`Graph::backward`] their
//! gradients come back keyed by the same names.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::Matrix3;

use super::gemm::{gemm, matmul, View};
use super::tensor::Tensor;
use super::ParamStore;
use crate::body_model::{BodyModelSpec, ShapeParams, SkinCache, NUM_BETAS, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::rotations::{
    axis_angle_to_mat_jacobian, mat_to_axis_angle_jacobian, sixd_to_mat_jacobian,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    #[cfg(test)]
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    LeftMulConst { a: Arc<Tensor>, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Softplus(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    BlockLinear { x: Var, w: Var, b: Var },
    SixdToMat { x: Var, jac: Vec<[[f64; 6]; 9]> },
    MatToAxisAngle { x: Var, jac: Vec<[[f64; 9]; 3]> },
    AxisAngleToMat { x: Var, jac: Vec<[[f64; 3]; 9]> },
    Body { rot: Var, beta: Var, model: Arc<BodyModelSpec>, caches: Vec<SkinCache> },
    Project { j: Var, cam: Var },
    MaskedRms { x: Var, mask: Arc<Tensor>, rms: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    frozen_prefixes: Vec<String>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            frozen_prefixes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph whose parameters never require gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Parameters whose name starts with `prefix` enter as constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that requires a gradient regardless of parameter bookkeeping.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named parameter from the store; repeated lookups share one leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_index.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let trainable =
            self.grad_enabled && !self.frozen_prefixes.iter().any(|p| name.starts_with(p));
        let v = self.push(t, Op::Leaf, trainable);
        self.param_index.insert(name.to_string(), v);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        Ok(v)
    }

    /// Names of trainable parameters touched by this graph, in first-use order.
    pub fn trainable_params(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    // ---------------------------------------------------------------- ops

    /// `x · w + b` over the last axis of `x`; `w: [din, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::Shape(format!("linear: x {xs:?} vs w {ws:?}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Shape(format!("linear: bias {:?}", self.shape(b))));
            }
        }
        let m = self.value(x).numel() / din.max(1);
        let mut out = vec![0.0; m * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        matmul(m, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = dout;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, ng))
    }

    /// `a · x[b]` for every leading batch index of `x: [B, k, n]`, `a: [m, k]` constant.
    pub fn left_mul_const(&mut self, a: Arc<Tensor>, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (m, k) = (a.shape()[0], a.shape()[1]);
        if xs.len() != 3 || xs[1] != k {
            return Err(Error::Shape(format!("left_mul_const: a {:?} vs x {xs:?}", a.shape())));
        }
        let (bsz, n) = (xs[0], xs[2]);
        let mut out = vec![0.0; bsz * m * n];
        let xv = self.value(x).data();
        for b in 0..bsz {
            matmul(m, k, n, a.data(), false, &xv[b * k * n..(b + 1) * k * n], false, &mut out[b * m * n..(b + 1) * m * n], false);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![bsz, m, n], out)?, Op::LeftMulConst { a, x }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "elementwise: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = Tensor::new(self.shape(a).to_vec(), self.value(a).data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::Shape(format!("add_broadcast: {sa:?} vs {sb:?}")));
        }
        let inner = self.value(b).numel();
        let bv = self.value(b).data();
        let data = self.value(a).data().chunks(inner).flat_map(|c| c.iter().zip(bv).map(|(x, y)| x + y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(sa, data)?, Op::AddBroadcast(a, b), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!("layer_norm: x {xs:?}")));
        }
        let rows = self.value(x).numel() / d;
        let (xv, g, bt) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; rows * d];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for i in 0..d {
                out[r * d + i] = (row[i] - mu) * rs * g[i] + bt[i];
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Tensor::new(xs, out)?, Op::LayerNorm { x, gamma, beta, mean, rstd }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = Tensor::new(self.shape(x).to_vec(), self.value(x).data().iter().map(|v| gelu(*v).0).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = Tensor::new(self.shape(x).to_vec(), self.value(x).data().iter().map(|v| softplus(*v)).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Softplus(x), ng)
    }

    /// Multi-head scaled dot-product attention, unmasked. `q, k, v: [B, T, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::Shape(format!("attention: q {qs:?}")));
        }
        let (bsz, t, d) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d={d} not divisible by heads={heads}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; bsz * heads * t * t];
        let mut out = vec![0.0; bsz * t * d];
        for b in 0..bsz {
            for h in 0..heads {
                let base = b * t * d + h * dh;
                let p_off = (b * heads + h) * t * t;
                let p = &mut probs[p_off..p_off + t * t];
                gemm(t, dh, t, scale, qv, View::strided(base, d, 1), kv, View::strided(base, 1, d), 0.0, p, View::row_major(0, t));
                for row in p.chunks_mut(t) {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                gemm(t, t, dh, 1.0, p, View::row_major(0, t), vv, View::strided(base, d, 1), 0.0, &mut out, View::strided(base, d, 1));
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Tensor::new(qs, out)?, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Attention probabilities `[B, heads, T, T]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rank = xs.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute {perm:?} of {xs:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let data = permute_data(self.value(x).data(), &xs, perm);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::Shape(format!("slice axis {axis} [{start}, +{len}) of {xs:?}")));
        }
        let (outer, n, inner) = split3(&xs, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&xv[s..s + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x, axis, start }, ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            if s.len() != first.len()
                || axis >= s.len()
                || s.iter().enumerate().any(|(i, d)| i != axis && *d != first[i])
            {
                return Err(Error::Shape(format!("concat: {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split3(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let n = self.shape(*v)[axis];
                data.extend_from_slice(&self.value(*v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|v| self.ng(*v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// Per-group affine maps: `x: [M, G, din]`, `w: [G, din, dout]`, `b: [G, dout]`.
    pub fn block_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || xs[2] != ws[1] || self.shape(b) != [ws[0], ws[2]] {
            return Err(Error::Shape(format!("block_linear: x {xs:?} w {ws:?}")));
        }
        let (m, g, din, dout) = (xs[0], xs[1], xs[2], ws[2]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; m * g * dout];
        for r in 0..m {
            for gi in 0..g {
                out[(r * g + gi) * dout..(r * g + gi + 1) * dout].copy_from_slice(&bv[gi * dout..(gi + 1) * dout]);
            }
        }
        for gi in 0..g {
            // rows r: x[r, gi, :] · w[gi]
            gemm(m, din, dout, 1.0, xv, View::strided(gi * din, g * din, 1), wv, View::row_major(gi * din * dout, dout), 1.0, &mut out, View::strided(gi * dout, g * dout, 1));
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, g, dout], out)?, Op::BlockLinear { x, w, b }, ng))
    }

    /// `[..., 6] → [..., 9]` Gram-Schmidt decoding.
    pub fn sixd_to_mat(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&6) {
            return Err(Error::Shape(format!("sixd_to_mat: {xs:?}")));
        }
        let mut data = Vec::with_capacity(self.value(x).numel() / 6 * 9);
        let mut jac = Vec::new();
        for r in self.value(x).data().chunks(6) {
            let (val, j) = sixd_to_mat_jacobian(r.try_into().expect("chunk of 6"))?;
            data.extend_from_slice(&val);
            jac.push(j);
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = 9;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::SixdToMat { x, jac }, ng))
    }

    /// `[..., 9] → [..., 3]` logarithm map.
    pub fn mat_to_axis_angle(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&9) {
            return Err(Error::Shape(format!("mat_to_axis_angle: {xs:?}")));
        }
        let mut data = Vec::with_capacity(self.value(x).numel() / 3);
        let mut jac = Vec::new();
        for m in self.value(x).data().chunks(9) {
            let (val, j) = mat_to_axis_angle_jacobian(m.try_into().expect("chunk of 9"));
            data.extend_from_slice(&val);
            jac.push(j);
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = 3;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::MatToAxisAngle { x, jac }, ng))
    }

    /// `[..., 3] → [..., 9]` Rodrigues formula.
    pub fn axis_angle_to_mat(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&3) {
            return Err(Error::Shape(format!("axis_angle_to_mat: {xs:?}")));
        }
        let mut data = Vec::with_capacity(self.value(x).numel() * 3);
        let mut jac = Vec::new();
        for v in self.value(x).data().chunks(3) {
            let (val, j) = axis_angle_to_mat_jacobian(v.try_into().expect("chunk of 3"));
            data.extend_from_slice(&val);
            jac.push(j);
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = 9;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::AxisAngleToMat { x, jac }, ng))
    }

    /// Skinned body: `rot: [B, 24, 9]`, `beta: [B, 10]` → `[B, V + 24, 3]`
    /// (vertices followed by forward-kinematics joints).
    pub fn body(&mut self, model: Arc<BodyModelSpec>, rot: Var, beta: Var) -> Result<Var> {
        let rs = self.shape(rot).to_vec();
        let bsz = rs[0];
        if rs != [bsz, NUM_JOINTS, 9] || self.shape(beta) != [bsz, NUM_BETAS] {
            return Err(Error::Shape(format!("body: rot {rs:?} beta {:?}", self.shape(beta))));
        }
        let nv = model.num_vertices();
        let mut data = Vec::with_capacity(bsz * (nv + NUM_JOINTS) * 3);
        let mut caches = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let rv = &self.value(rot).data()[b * NUM_JOINTS * 9..(b + 1) * NUM_JOINTS * 9];
            let mats: Vec<Matrix3<f64>> = rv.chunks(9).map(Matrix3::from_row_slice).collect();
            let bv: [f64; NUM_BETAS] = self.value(beta).data()[b * NUM_BETAS..(b + 1) * NUM_BETAS].try_into().expect("checked shape");
            let beta_b = ShapeParams::from_array_unchecked(bv);
            let (mesh, cache) = model.forward_rotmats(&mats, &beta_b);
            data.extend(mesh.vertices.iter().chain(&mesh.joints).flatten());
            caches.push(cache);
        }
        let ng = self.ng(rot) || self.ng(beta);
        let t = Tensor::new(vec![bsz, nv + NUM_JOINTS, 3], data)?;
        Ok(self.push(t, Op::Body { rot, beta, model, caches }, ng))
    }

    /// Weak-perspective projection: `j: [B, N, 3]`, `cam: [B, 3]` as `(s, tx, ty)`.
    pub fn project(&mut self, j: Var, cam: Var) -> Result<Var> {
        let js = self.shape(j).to_vec();
        if js.len() != 3 || js[2] != 3 || self.shape(cam) != [js[0], 3] {
            return Err(Error::Shape(format!("project: j {js:?} cam {:?}", self.shape(cam))));
        }
        let (bsz, n) = (js[0], js[1]);
        let (jv, cv) = (self.value(j).data(), self.value(cam).data());
        let mut out = Vec::with_capacity(bsz * n * 2);
        for b in 0..bsz {
            let (s, tx, ty) = (cv[3 * b], cv[3 * b + 1], cv[3 * b + 2]);
            for p in jv[b * n * 3..(b + 1) * n * 3].chunks(3) {
                out.push(s * p[0] + tx);
                out.push(s * p[1] + ty);
            }
        }
        let ng = self.ng(j) || self.ng(cam);
        Ok(self.push(Tensor::new(vec![bsz, n, 2], out)?, Op::Project { j, cam }, ng))
    }

    /// Per-row masked root-mean-square: `x: [B, n]`, `mask: [B, n]` of 0/1
    /// weights → `[B]`. Rows with empty mask yield 0.
    pub fn masked_rms(&mut self, x: Var, mask: Arc<Tensor>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || mask.shape() != xs.as_slice() {
            return Err(Error::Shape(format!("masked_rms: x {xs:?} mask {:?}", mask.shape())));
        }
        let n = xs[1];
        let rms: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .zip(mask.data().chunks(n))
            .map(|(r, m)| {
                let wsum: f64 = m.iter().sum();
                if wsum > 0.0 {
                    (r.iter().zip(m).map(|(v, w)| w * v * v).sum::<f64>() / wsum).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let ng = self.ng(x);
        let t = Tensor::new(vec![xs[0]], rms.clone())?;
        Ok(self.push(t, Op::MaskedRms { x, mask, rms }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar node. Returns gradients of every trainable
    /// parameter in first-use order (zeros where no gradient flowed).
    pub fn backward(&self, loss: Var) -> Result<Vec<(String, Tensor)>> {
        let grads = self.backward_all(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect())
    }

    /// Reverse pass returning the gradient of every node that needs one.
    pub fn backward_all(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(grads)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.ng(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let din = *self.shape(*x).last().expect("rank ≥ 1");
                let dout = *node.value.shape().last().expect("rank ≥ 1");
                let m = self.value(*x).numel() / din.max(1);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    matmul(m, dout, din, g, false, self.value(*w).data(), true, dx, true);
                }
                if let Some(dw) = self.grad_slot(grads, *w) {
                    matmul(din, m, dout, self.value(*x).data(), true, g, false, dw, true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.grad_slot(grads, *b) {
                        for row in g.chunks(dout) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::LeftMulConst { a, x } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let xs = self.shape(*x);
                let (bsz, n) = (xs[0], xs[2]);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for b in 0..bsz {
                        matmul(k, m, n, a.data(), true, &g[b * m * n..(b + 1) * m * n], false, &mut dx[b * k * n..(b + 1) * k * n], true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.grad_slot(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    let bv = self.value(*b).data();
                    d.iter_mut().zip(g).zip(bv).for_each(|((d, g), y)| *d += g * y);
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    let av = self.value(*a).data();
                    d.iter_mut().zip(g).zip(av).for_each(|((d, g), x)| *d += g * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let inner = self.value(*b).numel();
                if let Some(d) = self.grad_slot(grads, *b) {
                    for chunk in g.chunks(inner) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = self.shape(*gamma)[0];
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let rows = xv.len() / d;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx_all = self.ng(*x).then(|| vec![0.0; xv.len()]);
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for k in 0..d {
                        let xhat = (xr[k] - mu) * rs;
                        dgamma[k] += gr[k] * xhat;
                        dbeta[k] += gr[k];
                        let dxhat = gr[k] * gam[k];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                    }
                    if let Some(dx) = dx_all.as_mut() {
                        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                        for k in 0..d {
                            let xhat = (xr[k] - mu) * rs;
                            dx[r * d + k] = rs * (gr[k] * gam[k] - m1 - xhat * m2);
                        }
                    }
                }
                if let (Some(src), Some(dst)) = (dx_all, self.grad_slot(grads, *x)) {
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                if let Some(dst) = self.grad_slot(grads, *gamma) {
                    dst.iter_mut().zip(dgamma).for_each(|(a, b)| *a += b);
                }
                if let Some(dst) = self.grad_slot(grads, *beta) {
                    dst.iter_mut().zip(dbeta).for_each(|(a, b)| *a += b);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().zip(g).zip(xv).for_each(|((d, g), x)| *d += g * gelu(*x).1);
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().zip(g).zip(xv).for_each(|((d, g), x)| *d += g * sigmoid(*x));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let qs = self.shape(*q);
                let (bsz, t, d) = (qs[0], qs[1], qs[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; t * t];
                for b in 0..bsz {
                    for h in 0..*heads {
                        let base = b * t * d + h * dh;
                        let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        // dV += Pᵀ dO
                        gemm(t, t, dh, 1.0, p, View::transposed(0, t), g, View::strided(base, d, 1), 1.0, &mut dv, View::strided(base, d, 1));
                        // dP = dO Vᵀ
                        gemm(t, dh, t, 1.0, g, View::strided(base, d, 1), vv, View::strided(base, 1, d), 0.0, &mut dp, View::row_major(0, t));
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for r in 0..t {
                            let pr = &p[r * t..(r + 1) * t];
                            let dr = &mut dp[r * t..(r + 1) * t];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot);
                            }
                        }
                        // dQ += s · dS K ; dK += s · dSᵀ Q
                        gemm(t, t, dh, scale, &dp, View::row_major(0, t), kv, View::strided(base, d, 1), 1.0, &mut dq, View::strided(base, d, 1));
                        gemm(t, t, dh, scale, &dp, View::transposed(0, t), qv, View::strided(base, d, 1), 1.0, &mut dk, View::strided(base, d, 1));
                    }
                }
                for (var, src) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(dst) = self.grad_slot(grads, *var) {
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, p) in perm.iter().enumerate() {
                    inv[*p] = i;
                }
                let back = permute_data(g, gy.shape(), &inv);
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().zip(back).for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, n, inner) = split3(&xs, *axis);
                let len = gy.shape()[*axis];
                if let Some(d) = self.grad_slot(grads, *x) {
                    for o in 0..outer {
                        let s = (o * n + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d[s..s + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split3(gy.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let n = self.shape(*v)[*axis];
                    if let Some(d) = self.grad_slot(grads, *v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            d[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += n;
                }
            }
            Op::BlockLinear { x, w, b } => {
                let xs = self.shape(*x);
                let (m, gr, din) = (xs[0], xs[1], xs[2]);
                let dout = self.shape(*w)[2];
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let wv = self.value(*w).data();
                    for gi in 0..gr {
                        gemm(m, dout, din, 1.0, g, View::strided(gi * dout, gr * dout, 1), wv, View::transposed(gi * din * dout, dout), 1.0, dx, View::strided(gi * din, gr * din, 1));
                    }
                }
                if let Some(dw) = self.grad_slot(grads, *w) {
                    let xv = self.value(*x).data();
                    for gi in 0..gr {
                        gemm(din, m, dout, 1.0, xv, View::strided(gi * din, 1, gr * din), g, View::strided(gi * dout, gr * dout, 1), 1.0, dw, View::row_major(gi * din * dout, dout));
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for row in g.chunks(gr * dout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SixdToMat { x, jac } => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    apply_jacobian_t(jac, g, d);
                }
            }
            Op::MatToAxisAngle { x, jac } => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    apply_jacobian_t(jac, g, d);
                }
            }
            Op::AxisAngleToMat { x, jac } => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    apply_jacobian_t(jac, g, d);
                }
            }
            Op::Body { rot, beta, model, caches } => {
                let nv = model.num_vertices();
                let stride = (nv + NUM_JOINTS) * 3;
                let mut drot = vec![0.0; self.value(*rot).numel()];
                let mut dbeta = vec![0.0; self.value(*beta).numel()];
                for (b, cache) in caches.iter().enumerate() {
                    let gb = &g[b * stride..(b + 1) * stride];
                    let dverts: Vec<[f64; 3]> = gb[..nv * 3].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                    let djoints: Vec<[f64; 3]> = gb[nv * 3..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                    let (dr, db) = model.backward_rotmats(cache, &dverts, &djoints);
                    for (j, m) in dr.iter().enumerate() {
                        drot[(b * NUM_JOINTS + j) * 9..(b * NUM_JOINTS + j + 1) * 9].copy_from_slice(m);
                    }
                    dbeta[b * NUM_BETAS..(b + 1) * NUM_BETAS].copy_from_slice(&db);
                }
                if let Some(d) = self.grad_slot(grads, *rot) {
                    d.iter_mut().zip(drot).for_each(|(a, b)| *a += b);
                }
                if let Some(d) = self.grad_slot(grads, *beta) {
                    d.iter_mut().zip(dbeta).for_each(|(a, b)| *a += b);
                }
            }
            Op::Project { j, cam } => {
                let js = self.shape(*j);
                let (bsz, n) = (js[0], js[1]);
                let (jv, cv) = (self.value(*j).data(), self.value(*cam).data());
                if let Some(d) = self.grad_slot(grads, *j) {
                    for b in 0..bsz {
                        let s = cv[3 * b];
                        for p in 0..n {
                            d[(b * n + p) * 3] += s * g[(b * n + p) * 2];
                            d[(b * n + p) * 3 + 1] += s * g[(b * n + p) * 2 + 1];
                        }
                    }
                }
                if let Some(d) = self.grad_slot(grads, *cam) {
                    for b in 0..bsz {
                        for p in 0..n {
                            let (gx, gyv) = (g[(b * n + p) * 2], g[(b * n + p) * 2 + 1]);
                            d[3 * b] += gx * jv[(b * n + p) * 3] + gyv * jv[(b * n + p) * 3 + 1];
                            d[3 * b + 1] += gx;
                            d[3 * b + 2] += gyv;
                        }
                    }
                }
            }
            Op::MaskedRms { x, mask, rms } => {
                let n = self.shape(*x)[1];
                let xv = self.value(*x).data();
                if let Some(d) = self.grad_slot(grads, *x) {
                    for (r, &rv) in rms.iter().enumerate() {
                        if rv <= 0.0 {
                            continue;
                        }
                        let m = &mask.data()[r * n..(r + 1) * n];
                        let wsum: f64 = m.iter().sum();
                        let c = g[r] / (wsum * rv);
                        for k in 0..n {
                            d[r * n + k] += c * m[k] * xv[r * n + k];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
        }
    }
}

fn apply_jacobian_t<const I: usize, const O: usize>(jac: &[[[f64; I]; O]], g: &[f64], d: &mut [f64]) {
    for (r, j) in jac.iter().enumerate() {
        let gr = &g[r * O..(r + 1) * O];
        let dr = &mut d[r * I..(r + 1) * I];
        for o in 0..O {
            if gr[o] == 0.0 {
                continue;
            }
            for i in 0..I {
                dr[i] += j[o][i] * gr[o];
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut idx = vec![0; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

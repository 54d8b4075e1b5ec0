//! Transformer building blocks expressed on the autodiff tape.
//!
//! Each layer is a pair of functions: `init_*` creates named tensors in a
//! [`ParamStore`], and the forward function looks them up by the same prefix.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Xavier-uniform weight `[din, dout]` and zero bias.
pub fn init_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, din: usize, dout: usize) {
    let limit = (6.0 / (din + dout) as f64).sqrt();
    let dist = Uniform::new(-limit, limit).expect("valid range");
    store.insert(format!("{name}.weight"), Tensor::from_fn(&[din, dout], |_| dist.sample(rng)));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
}

pub fn init_normal<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, shape: &[usize], std: f64) {
    let dist = Normal::new(0.0, std).expect("valid std");
    store.insert(name, Tensor::from_fn(shape, |_| dist.sample(rng)));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[d]));
}

pub fn init_block<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, ffn_mult: usize) {
    init_layer_norm(store, &format!("{name}.ln1"), d);
    for proj in ["q", "k", "v", "proj"] {
        init_linear(store, rng, &format!("{name}.attn.{proj}"), d, d);
    }
    init_layer_norm(store, &format!("{name}.ln2"), d);
    init_linear(store, rng, &format!("{name}.fc1"), d, d * ffn_mult);
    init_linear(store, rng, &format!("{name}.fc2"), d * ffn_mult, d);
}

pub fn init_encoder<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    layers: usize,
    d: usize,
    ffn_mult: usize,
) {
    for l in 0..layers {
        init_block(store, rng, &format!("{name}.{l}"), d, ffn_mult);
    }
}

pub fn linear(g: &mut Graph, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.weight"))?;
    let b = g.param(ps, &format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm(g: &mut Graph, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(ps, &format!("{name}.gamma"))?;
    let beta = g.param(ps, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Output of one pre-norm block plus the attention node for introspection.
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

/// Pre-normalization transformer block on `x: [B, T, d]`:
/// `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn block(g: &mut Graph, ps: &ParamStore, name: &str, x: Var, heads: usize) -> Result<BlockOutput> {
    let h = layer_norm(g, ps, &format!("{name}.ln1"), x)?;
    let q = linear(g, ps, &format!("{name}.attn.q"), h)?;
    let k = linear(g, ps, &format!("{name}.attn.k"), h)?;
    let v = linear(g, ps, &format!("{name}.attn.v"), h)?;
    let attention = g.attention(q, k, v, heads)?;
    let a = linear(g, ps, &format!("{name}.attn.proj"), attention)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, ps, &format!("{name}.ln2"), x)?;
    let h = linear(g, ps, &format!("{name}.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, ps, &format!("{name}.fc2"), h)?;
    let out = g.add(x, h)?;
    Ok(BlockOutput { out, attention })
}

/// Stack of `layers` blocks; returns the final sequence and per-layer
/// attention nodes.
pub fn encoder(
    g: &mut Graph,
    ps: &ParamStore,
    name: &str,
    x: Var,
    layers: usize,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let mut x = x;
    let mut attn = Vec::with_capacity(layers);
    for l in 0..layers {
        let out = block(g, ps, &format!("{name}.{l}"), x, heads)?;
        x = out.out;
        attn.push(out.attention);
    }
    Ok((x, attn))
}

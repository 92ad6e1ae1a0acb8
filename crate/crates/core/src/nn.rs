//! Layer building blocks on top of [`Graph`]. Sequences are `T x C` (one row per snippet).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Mat, Var};
use crate::params::ParamStore;

/// Forward-pass context: train/inference mode and the dropout RNG.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

pub fn init_linear<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.init_weight(&format!("{prefix}.w"), fan_in, fan_out, rng);
    store.init_zeros(&format!("{prefix}.b"), (1, fan_out));
}

/// Conv weights are stored as `(kernel * fan_in, fan_out)` to match [`Graph::im2col`].
pub fn init_conv<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    kernel: usize,
    rng: &mut R,
) {
    store.init_weight(&format!("{prefix}.w"), kernel * fan_in, fan_out, rng);
    store.init_zeros(&format!("{prefix}.b"), (1, fan_out));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.init_ones(&format!("{prefix}.g"), (1, dim));
    store.init_zeros(&format!("{prefix}.b"), (1, dim));
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{prefix}.w"));
    let b = g.param(store, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Same-padded 1-D convolution along the snippet axis.
pub fn conv1d(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, kernel: usize) -> Var {
    let cols = if kernel == 1 { x } else { g.im2col(x, kernel) };
    linear(g, store, prefix, cols)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let gain = g.param(store, &format!("{prefix}.g"));
    let bias = g.param(store, &format!("{prefix}.b"));
    let n = g.layer_norm_rows(x, 1e-5);
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

pub fn dropout(g: &mut Graph, x: Var, p: f64, ctx: &mut Ctx) -> Var {
    if !ctx.train || p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let shape = g.shape(x);
    let mask = Mat::from_shape_fn(shape, |_| if ctx.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
    let m = g.leaf(mask);
    g.mul(x, m)
}

#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

pub fn init_transformer_block<R: Rng>(store: &mut ParamStore, prefix: &str, dims: BlockDims, rng: &mut R) {
    for name in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.attn.{name}"), dims.dim, dims.dim, rng);
    }
    init_layer_norm(store, &format!("{prefix}.ln1"), dims.dim);
    init_linear(store, &format!("{prefix}.ff1"), dims.dim, dims.ff_dim, rng);
    init_linear(store, &format!("{prefix}.ff2"), dims.ff_dim, dims.dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), dims.dim);
}

/// Multi-head scaled dot-product self-attention with query = key = value = `x`.
pub fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    dims: BlockDims,
    ctx: &mut Ctx,
) -> Var {
    let q = linear(g, store, &format!("{prefix}.q"), x);
    let k = linear(g, store, &format!("{prefix}.k"), x);
    let v = linear(g, store, &format!("{prefix}.v"), x);
    let head_dim = dims.dim / dims.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let (a, b) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, a, b);
        let kh = g.slice_cols(k, a, b);
        let vh = g.slice_cols(v, a, b);
        let scores = g.matmul_bt(qh, kh);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        let attn = dropout(g, attn, dims.dropout, ctx);
        outs.push(g.matmul(attn, vh));
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, store, &format!("{prefix}.o"), cat)
}

/// Post-norm encoder block: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    dims: BlockDims,
    ctx: &mut Ctx,
) -> Var {
    let a = self_attention(g, store, &format!("{prefix}.attn"), x, dims, ctx);
    let a = dropout(g, a, dims.dropout, ctx);
    let x = g.add(x, a);
    let x = layer_norm(g, store, &format!("{prefix}.ln1"), x);
    let h = linear(g, store, &format!("{prefix}.ff1"), x);
    let h = g.relu(h);
    let h = linear(g, store, &format!("{prefix}.ff2"), h);
    let h = dropout(g, h, dims.dropout, ctx);
    let x = g.add(x, h);
    layer_norm(g, store, &format!("{prefix}.ln2"), x)
}

/// Fixed sinusoidal position code, `len x dim`. Wavelengths grow geometrically
/// from 2 to `2 * len` snippets so every channel varies over the sequence.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    let pairs = dim.div_ceil(2).max(1);
    Mat::from_shape_fn((len, dim), |(t, i)| {
        let j = (i / 2) as f64;
        let ratio = if pairs > 1 { j / (pairs - 1) as f64 } else { 0.0 };
        let period = 2.0 * (len.max(2) as f64).powf(ratio);
        let a = std::f64::consts::TAU * t as f64 / period + if i % 2 == 0 { 0.0 } else { 0.25 * std::f64::consts::TAU };
        a.sin()
    })
}

//! Pre-norm transformer over unit tokens, evaluated in f64 with an exact
//! hand-written reverse pass.
//!
//! Two evaluation paths share every per-token kernel:
//!
//! * [`forward_full`] runs the whole token buffer under an explicit mask and
//!   keeps the activations needed by [`backward_full`];
//! * [`forward_block`] runs one unit's tokens against cached key/value
//!   blocks of earlier units, which is what the streaming generator uses.
//!
//! Attention always visits keys in ascending token order, so for a forward
//! mask both paths perform the same floating-point operations in the same
//! order and agree bit for bit.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::mask::AttentionMask;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Whether a token carries generated context or the noise of the unit
/// being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Context = 0,
    Noise = 1,
}

/// Positional identity of a token: embedding slot of its unit and its
/// offset inside the unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub slot: usize,
    pub offset: usize,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Projection weights, `N(0, 0.02^2)`.
    Normal,
    /// Embedding tables, `N(0, 1)`.
    Embedding,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Shapes of the network and where each tensor lives in the flat θ.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub channels: usize,
    pub n_slots: usize,
    pub max_offset: usize,
    blocks: Vec<ParamBlock>,
    w_in: usize,
    b_in: usize,
    emb_unit: usize,
    emb_offset: usize,
    emb_role: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

impl Architecture {
    pub fn new(d_model: usize, n_heads: usize, n_layers: usize, channels: usize, n_slots: usize, max_offset: usize) -> Self {
        let d = d_model;
        let f = 4 * d;
        let mut blocks = Vec::new();
        let mut cursor = 0;
        let mut push = |name: String, len: usize, init: Init| {
            let offset = cursor;
            blocks.push(ParamBlock { name, offset, len, init });
            cursor += len;
            offset
        };
        let w_in = push("embed.in.weight".into(), d * channels, Init::Normal);
        let b_in = push("embed.in.bias".into(), d, Init::Zeros);
        let emb_unit = push("embed.unit".into(), n_slots * d, Init::Embedding);
        let emb_offset = push("embed.offset".into(), max_offset * d, Init::Embedding);
        let emb_role = push("embed.role".into(), 2 * d, Init::Embedding);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = |s: &str| alloc::format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.gain"), d, Init::Ones),
                ln1_b: push(p("ln1.bias"), d, Init::Zeros),
                wq: push(p("attn.wq"), d * d, Init::Normal),
                wk: push(p("attn.wk"), d * d, Init::Normal),
                wv: push(p("attn.wv"), d * d, Init::Normal),
                wo: push(p("attn.wo"), d * d, Init::Normal),
                bo: push(p("attn.bo"), d, Init::Zeros),
                ln2_g: push(p("ln2.gain"), d, Init::Ones),
                ln2_b: push(p("ln2.bias"), d, Init::Zeros),
                w1: push(p("mlp.w1"), f * d, Init::Normal),
                b1: push(p("mlp.b1"), f, Init::Zeros),
                w2: push(p("mlp.w2"), d * f, Init::Normal),
                b2: push(p("mlp.b2"), d, Init::Zeros),
            });
        }
        let lnf_g = push("final.ln.gain".into(), d, Init::Ones);
        let lnf_b = push("final.ln.bias".into(), d, Init::Zeros);
        let w_out = push("head.weight".into(), channels * d, Init::Normal);
        let b_out = push("head.bias".into(), channels, Init::Zeros);
        Self {
            d_model,
            n_heads,
            n_layers,
            channels,
            n_slots,
            max_offset,
            blocks,
            w_in,
            b_in,
            emb_unit,
            emb_offset,
            emb_role,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.head_dim() as f64)
    }
}

/// Cached keys and values of one unit at one layer, `n_tokens x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub n_tokens: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl KvBlock {
    pub fn bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * core::mem::size_of::<f64>()
    }
}

// ---------------------------------------------------------------- kernels

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// `y = W x + b` for `W: out x in`.
fn linear(w: &[f64], b: Option<&[f64]>, x: &[f64], y: &mut [f64]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let mut acc = b.map_or(0.0, |b| b[o]);
        let row = &w[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        *yo = acc;
    }
}

/// Reverse of [`linear`]: accumulates into `dw`, `db` and `dx`.
fn linear_back(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: Option<&mut [f64]>, dx: &mut [f64]) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    if let Some(db) = db {
        for (d, &g) in db.iter_mut().zip(dy) {
            *d += g;
        }
    }
}

/// Returns `rstd`; writes normalised values to `xhat` and the affine
/// output to `y`.
fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let rstd = 1.0 / libm::sqrt(var + LN_EPS);
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = gain[i] * xhat[i] + bias[i];
    }
    rstd
}

fn layer_norm_back(xhat: &[f64], rstd: f64, gain: &[f64], dy: &[f64], dgain: &mut [f64], dbias: &mut [f64], dx: &mut [f64]) {
    let n = xhat.len();
    let mut sum_d = 0.0;
    let mut sum_dx = 0.0;
    let mut dxhat = vec![0.0; n];
    for i in 0..n {
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
        sum_d += dxhat[i];
        sum_dx += dxhat[i] * xhat[i];
    }
    let nf = n as f64;
    for i in 0..n {
        dx[i] += rstd / nf * (nf * dxhat[i] - sum_d - xhat[i] * sum_dx);
    }
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + libm::tanh(GELU_K * (u + GELU_C * u * u * u)))
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = libm::tanh(GELU_K * (u + GELU_C * u * u * u));
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

/// Softmax attention of one query head over `(key, value)` pairs visited
/// in order. Leaves the probabilities in `probs`, adds the number of
/// multiplies performed to `mults`.
fn attend<'a>(
    q: &[f64],
    kv: impl Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
    scale: f64,
    probs: &mut Vec<f64>,
    out: &mut [f64],
    mults: &mut u64,
) {
    probs.clear();
    let mut max = f64::NEG_INFINITY;
    for (k, _) in kv.clone() {
        let s = dot(q, k) * scale;
        *mults += q.len() as u64;
        if s > max {
            max = s;
        }
        probs.push(s);
    }
    let mut sum = 0.0;
    for p in probs.iter_mut() {
        *p = libm::exp(*p - max);
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (p, (_, v)) in probs.iter().zip(kv) {
        for j in 0..out.len() {
            out[j] += p * v[j];
        }
        *mults += v.len() as u64;
    }
}

fn embed(arch: &Architecture, theta: &[f64], x: &[f64], meta: &TokenMeta, h: &mut [f64]) {
    let d = arch.d_model;
    linear(
        &theta[arch.w_in..arch.w_in + d * arch.channels],
        Some(&theta[arch.b_in..arch.b_in + d]),
        x,
        h,
    );
    let u = &theta[arch.emb_unit + meta.slot * d..][..d];
    let o = &theta[arch.emb_offset + meta.offset * d..][..d];
    let r = &theta[arch.emb_role + meta.role as usize * d..][..d];
    for i in 0..d {
        h[i] += u[i] + o[i] + r[i];
    }
}

/// Second half of a block: residual attention projection plus the MLP.
/// Returns the activations the reverse pass needs.
fn block_tail(arch: &Architecture, theta: &[f64], lo: &LayerOffsets, ctx: &[f64], h: &mut [f64], cache: Option<&mut TailCache>) {
    let d = arch.d_model;
    let f = 4 * d;
    let mut o = vec![0.0; d];
    linear(&theta[lo.wo..lo.wo + d * d], Some(&theta[lo.bo..lo.bo + d]), ctx, &mut o);
    for i in 0..d {
        h[i] += o[i];
    }
    let mut xhat = vec![0.0; d];
    let mut m = vec![0.0; d];
    let rstd = layer_norm(h, &theta[lo.ln2_g..lo.ln2_g + d], &theta[lo.ln2_b..lo.ln2_b + d], &mut xhat, &mut m);
    let mut u = vec![0.0; f];
    linear(&theta[lo.w1..lo.w1 + f * d], Some(&theta[lo.b1..lo.b1 + f]), &m, &mut u);
    let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    let mut y = vec![0.0; d];
    linear(&theta[lo.w2..lo.w2 + d * f], Some(&theta[lo.b2..lo.b2 + d]), &g, &mut y);
    for i in 0..d {
        h[i] += y[i];
    }
    if let Some(c) = cache {
        *c = TailCache { xhat2: xhat, rstd2: rstd, m, u, g };
    }
}

fn head(arch: &Architecture, theta: &[f64], h: &[f64], out: &mut [f64], xhat: &mut [f64]) -> f64 {
    let d = arch.d_model;
    let mut f = vec![0.0; d];
    let rstd = layer_norm(h, &theta[arch.lnf_g..arch.lnf_g + d], &theta[arch.lnf_b..arch.lnf_b + d], xhat, &mut f);
    linear(
        &theta[arch.w_out..arch.w_out + arch.channels * d],
        Some(&theta[arch.b_out..arch.b_out + arch.channels]),
        &f,
        out,
    );
    rstd
}

#[derive(Debug, Clone, Default)]
struct TailCache {
    xhat2: Vec<f64>,
    rstd2: f64,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `probs[token][head]`, aligned with the token's key list.
    probs: Vec<Vec<Vec<f64>>>,
    ctx: Vec<f64>,
    tails: Vec<TailCache>,
}

/// Activations of a full-buffer forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    n_tokens: usize,
    inputs: Vec<f64>,
    meta: Vec<TokenMeta>,
    keys: Vec<Vec<usize>>,
    layers: Vec<LayerTrace>,
    xhat_f: Vec<f64>,
    rstd_f: Vec<f64>,
    /// `n_tokens x channels`.
    pub output: Vec<f64>,
}

/// Runs every token of the buffer under `mask`.
///
/// `inputs` is `n_tokens x channels`, `meta` gives each token's positional
/// slot, offset and role.
pub fn forward_full(arch: &Architecture, theta: &[f64], inputs: &[f64], meta: &[TokenMeta], mask: &AttentionMask, mults: &mut u64) -> Trace {
    let n = meta.len();
    let d = arch.d_model;
    let dh = arch.head_dim();
    let scale = arch.scale();
    let keys: Vec<Vec<usize>> = (0..n).map(|q| mask.keys(q).collect()).collect();

    let mut h = vec![0.0; n * d];
    for t in 0..n {
        embed(arch, theta, &inputs[t * arch.channels..(t + 1) * arch.channels], &meta[t], &mut h[t * d..(t + 1) * d]);
    }

    let mut layers = Vec::with_capacity(arch.n_layers);
    for lo in &arch.layers {
        let mut xhat1 = vec![0.0; n * d];
        let mut rstd1 = vec![0.0; n];
        let mut a = vec![0.0; n * d];
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        for t in 0..n {
            let r = t * d..(t + 1) * d;
            rstd1[t] = layer_norm(
                &h[r.clone()],
                &theta[lo.ln1_g..lo.ln1_g + d],
                &theta[lo.ln1_b..lo.ln1_b + d],
                &mut xhat1[r.clone()],
                &mut a[r.clone()],
            );
            linear(&theta[lo.wq..lo.wq + d * d], None, &a[r.clone()], &mut q[r.clone()]);
            linear(&theta[lo.wk..lo.wk + d * d], None, &a[r.clone()], &mut k[r.clone()]);
            linear(&theta[lo.wv..lo.wv + d * d], None, &a[r.clone()], &mut v[r.clone()]);
        }
        let mut ctx = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(n);
        for t in 0..n {
            let mut per_head = Vec::with_capacity(arch.n_heads);
            for hd in 0..arch.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let kv = keys[t].iter().map(|&j| {
                    let base = j * d;
                    (&k[base + cols.start..base + cols.end], &v[base + cols.start..base + cols.end])
                });
                let mut p = Vec::new();
                attend(&q[t * d + cols.start..t * d + cols.end], kv, scale, &mut p, &mut ctx[t * d + cols.start..t * d + cols.end], mults);
                per_head.push(p);
            }
            probs.push(per_head);
        }
        let mut tails = vec![TailCache::default(); n];
        for t in 0..n {
            block_tail(arch, theta, lo, &ctx[t * d..(t + 1) * d], &mut h[t * d..(t + 1) * d], Some(&mut tails[t]));
        }
        layers.push(LayerTrace { xhat1, rstd1, a, q, k, v, probs, ctx, tails });
    }

    let c = arch.channels;
    let mut output = vec![0.0; n * c];
    let mut xhat_f = vec![0.0; n * d];
    let mut rstd_f = vec![0.0; n];
    for t in 0..n {
        rstd_f[t] = head(arch, theta, &h[t * d..(t + 1) * d], &mut output[t * c..(t + 1) * c], &mut xhat_f[t * d..(t + 1) * d]);
    }
    Trace {
        n_tokens: n,
        inputs: inputs.to_vec(),
        meta: meta.to_vec(),
        keys,
        layers,
        xhat_f,
        rstd_f,
        output,
    }
}

/// Gradient of `<upstream, trace.output>` with respect to θ.
pub fn backward_full(arch: &Architecture, theta: &[f64], trace: &Trace, upstream: &[f64]) -> Vec<f64> {
    let n = trace.n_tokens;
    let d = arch.d_model;
    let f = 4 * d;
    let c = arch.channels;
    let dh = arch.head_dim();
    let scale = arch.scale();
    let mut grad = vec![0.0; theta.len()];

    // Head.
    let mut dh_res = vec![0.0; n * d];
    for t in 0..n {
        let dy = &upstream[t * c..(t + 1) * c];
        if dy.iter().all(|&g| g == 0.0) {
            continue;
        }
        let xhat = &trace.xhat_f[t * d..(t + 1) * d];
        let gain = &theta[arch.lnf_g..arch.lnf_g + d];
        let fvec: Vec<f64> = (0..d).map(|i| gain[i] * xhat[i] + theta[arch.lnf_b + i]).collect();
        let mut df = vec![0.0; d];
        {
            let (dw, rest) = grad[arch.w_out..].split_at_mut(c * d);
            let db = &mut rest[arch.b_out - arch.w_out - c * d..][..c];
            linear_back(&theta[arch.w_out..arch.w_out + c * d], &fvec, dy, dw, Some(db), &mut df);
        }
        let (dg, db) = grad[arch.lnf_g..arch.lnf_g + 2 * d].split_at_mut(d);
        layer_norm_back(xhat, trace.rstd_f[t], gain, &df, dg, db, &mut dh_res[t * d..(t + 1) * d]);
    }

    for (lo, lt) in arch.layers.iter().zip(&trace.layers).rev() {
        // MLP and output projection, per token.
        let mut dctx = vec![0.0; n * d];
        for t in 0..n {
            let tail = &lt.tails[t];
            let dres = dh_res[t * d..(t + 1) * d].to_vec();
            // y = W2 g + b2
            let mut dg = vec![0.0; f];
            {
                let (dw2, rest) = grad[lo.w2..].split_at_mut(d * f);
                let db2 = &mut rest[lo.b2 - lo.w2 - d * f..][..d];
                linear_back(&theta[lo.w2..lo.w2 + d * f], &tail.g, &dres, dw2, Some(db2), &mut dg);
            }
            let du: Vec<f64> = dg.iter().zip(&tail.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
            let mut dm = vec![0.0; d];
            {
                let (dw1, rest) = grad[lo.w1..].split_at_mut(f * d);
                let db1 = &mut rest[lo.b1 - lo.w1 - f * d..][..f];
                linear_back(&theta[lo.w1..lo.w1 + f * d], &tail.m, &du, dw1, Some(db1), &mut dm);
            }
            let mut dh_mid = dres;
            {
                let (dg2, db2) = grad[lo.ln2_g..lo.ln2_g + 2 * d].split_at_mut(d);
                layer_norm_back(&tail.xhat2, tail.rstd2, &theta[lo.ln2_g..lo.ln2_g + d], &dm, dg2, db2, &mut dh_mid);
            }
            // o = Wo ctx + bo
            {
                let (dwo, rest) = grad[lo.wo..].split_at_mut(d * d);
                let dbo = &mut rest[lo.bo - lo.wo - d * d..][..d];
                linear_back(&theta[lo.wo..lo.wo + d * d], &lt.ctx[t * d..(t + 1) * d], &dh_mid, dwo, Some(dbo), &mut dctx[t * d..(t + 1) * d]);
            }
            dh_res[t * d..(t + 1) * d].copy_from_slice(&dh_mid);
        }

        // Attention.
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for t in 0..n {
            for hd in 0..arch.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let dc = &dctx[t * d + cols.start..t * d + cols.end];
                if dc.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let p = &lt.probs[t][hd];
                let keys = &trace.keys[t];
                let mut dp = vec![0.0; keys.len()];
                for (i, &j) in keys.iter().enumerate() {
                    let vj = &lt.v[j * d + cols.start..j * d + cols.end];
                    dp[i] = dot(dc, vj);
                    let dvj = &mut dv[j * d + cols.start..j * d + cols.end];
                    for e in 0..dh {
                        dvj[e] += p[i] * dc[e];
                    }
                }
                let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qt = &lt.q[t * d + cols.start..t * d + cols.end];
                for (i, &j) in keys.iter().enumerate() {
                    let ds = p[i] * (dp[i] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lt.k[j * d + cols.start..j * d + cols.end];
                    for e in 0..dh {
                        dq[t * d + cols.start + e] += ds * kj[e];
                        dk[j * d + cols.start + e] += ds * qt[e];
                    }
                }
            }
        }

        // q/k/v projections and the first layer norm.
        for t in 0..n {
            let r = t * d..(t + 1) * d;
            let a = &lt.a[r.clone()];
            let mut da = vec![0.0; d];
            linear_back(&theta[lo.wq..lo.wq + d * d], a, &dq[r.clone()], &mut grad[lo.wq..lo.wq + d * d], None, &mut da);
            linear_back(&theta[lo.wk..lo.wk + d * d], a, &dk[r.clone()], &mut grad[lo.wk..lo.wk + d * d], None, &mut da);
            linear_back(&theta[lo.wv..lo.wv + d * d], a, &dv[r.clone()], &mut grad[lo.wv..lo.wv + d * d], None, &mut da);
            let (dg1, db1) = grad[lo.ln1_g..lo.ln1_g + 2 * d].split_at_mut(d);
            layer_norm_back(&lt.xhat1[r.clone()], lt.rstd1[t], &theta[lo.ln1_g..lo.ln1_g + d], &da, dg1, db1, &mut dh_res[r]);
        }
    }

    // Embeddings.
    for t in 0..n {
        let dh0 = &dh_res[t * d..(t + 1) * d];
        let meta = trace.meta[t];
        let x = &trace.inputs[t * c..(t + 1) * c];
        for o in 0..d {
            let g = dh0[o];
            for i in 0..c {
                grad[arch.w_in + o * c + i] += g * x[i];
            }
            grad[arch.b_in + o] += g;
            grad[arch.emb_unit + meta.slot * d + o] += g;
            grad[arch.emb_offset + meta.offset * d + o] += g;
            grad[arch.emb_role + meta.role as usize * d + o] += g;
        }
    }
    grad
}

/// Runs the tokens of one unit against cached blocks of earlier units.
///
/// `past[l]` lists the cached blocks for layer `l` in ascending unit order.
/// Returns the head outputs (if requested) and this unit's own key/value
/// blocks per layer.
pub fn forward_block(
    arch: &Architecture,
    theta: &[f64],
    inputs: &[f64],
    meta: &[TokenMeta],
    past: &[Vec<&KvBlock>],
    want_output: bool,
    mults: &mut u64,
) -> (Option<Vec<f64>>, Vec<KvBlock>) {
    let n = meta.len();
    let d = arch.d_model;
    let dh = arch.head_dim();
    let scale = arch.scale();
    let mut h = vec![0.0; n * d];
    for t in 0..n {
        embed(arch, theta, &inputs[t * arch.channels..(t + 1) * arch.channels], &meta[t], &mut h[t * d..(t + 1) * d]);
    }
    let mut own = Vec::with_capacity(arch.n_layers);
    let mut probs = Vec::new();
    for (l, lo) in arch.layers.iter().enumerate() {
        let mut xhat = vec![0.0; d];
        let mut a = vec![0.0; d];
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        for t in 0..n {
            let r = t * d..(t + 1) * d;
            layer_norm(&h[r.clone()], &theta[lo.ln1_g..lo.ln1_g + d], &theta[lo.ln1_b..lo.ln1_b + d], &mut xhat, &mut a);
            linear(&theta[lo.wq..lo.wq + d * d], None, &a, &mut q[r.clone()]);
            linear(&theta[lo.wk..lo.wk + d * d], None, &a, &mut k[r.clone()]);
            linear(&theta[lo.wv..lo.wv + d * d], None, &a, &mut v[r]);
        }
        let mut ctx = vec![0.0; n * d];
        for t in 0..n {
            for hd in 0..arch.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let cached = past[l].iter().flat_map(|b| {
                    let cols = cols.clone();
                    (0..b.n_tokens).map(move |j| {
                        let base = j * d;
                        (&b.keys[base + cols.start..base + cols.end], &b.values[base + cols.start..base + cols.end])
                    })
                });
                let current = (0..n).map(|j| {
                    let base = j * d;
                    (&k[base + cols.start..base + cols.end], &v[base + cols.start..base + cols.end])
                });
                attend(&q[t * d + cols.start..t * d + cols.end], cached.chain(current), scale, &mut probs, &mut ctx[t * d + cols.start..t * d + cols.end], mults);
            }
        }
        for t in 0..n {
            block_tail(arch, theta, lo, &ctx[t * d..(t + 1) * d], &mut h[t * d..(t + 1) * d], None);
        }
        own.push(KvBlock { n_tokens: n, keys: k, values: v });
    }
    let output = want_output.then(|| {
        let c = arch.channels;
        let mut out = vec![0.0; n * c];
        let mut xhat = vec![0.0; d];
        for t in 0..n {
            head(arch, theta, &h[t * d..(t + 1) * d], &mut out[t * c..(t + 1) * c], &mut xhat);
        }
        out
    });
    (output, own)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.3, 2.1] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let x = [0.3, -1.2, 0.8, 2.0];
        let gain = [1.1, 0.9, -0.5, 1.3];
        let bias = [0.0, 0.1, 0.2, -0.3];
        let dy = [0.7, -0.2, 0.4, 1.0];
        let f = |x: &[f64]| {
            let mut xh = [0.0; 4];
            let mut y = [0.0; 4];
            layer_norm(x, &gain, &bias, &mut xh, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut xh = [0.0; 4];
        let mut y = [0.0; 4];
        let rstd = layer_norm(&x, &gain, &bias, &mut xh, &mut y);
        let mut dg = [0.0; 4];
        let mut db = [0.0; 4];
        let mut dx = [0.0; 4];
        layer_norm_back(&xh, rstd, &gain, &dy, &mut dg, &mut db, &mut dx);
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn attention_probabilities_sum_to_one() {
        let q = [0.5, -0.1];
        let keys = [[0.1, 0.2], [0.3, -0.4], [1.0, 1.0]];
        let vals = [[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let mut probs = Vec::new();
        let mut out = [0.0; 2];
        let mut mults = 0;
        attend(&q, keys.iter().zip(&vals).map(|(k, v)| (&k[..], &v[..])), 0.7, &mut probs, &mut out, &mut mults);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(mults, 12);
    }
}

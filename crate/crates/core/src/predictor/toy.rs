//! A tiny two-level convolutional denoiser with one self-attention block at
//! the bottleneck, written out by hand with its backward pass.
//!
//! ```text
//! x ─conv3─(+emb)─silu─ h1 ─avgpool─conv3─silu─ h2 ─attn(+res)─ h3 ─up─┐
//!                        └──────────────── skip ──────────────────────concat─conv3─silu─conv3─ ε
//! emb = silu(W_t·sin(t) + b_t + W_c·c)
//! ```
//!
//! All math is generic over the float type: inference and training run in
//! `f32`, gradient checks rerun the same code in `f64`.

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{check_request, ConditioningVector, NoisePredictor, PredictRequest, Prediction};
use crate::attention::{apply_probs, attention_probs, value_guidance, AttentionMode, Matrix, QkvBundle};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape};

const CHECKPOINT_KIND: &str = "pnpmix-toy-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Feature width of both levels (also `d_k` of the attention block).
    pub model_width: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
}

impl ToyConfig {
    pub fn new(shape: Shape, model_width: usize, cond_dim: usize) -> Self {
        Self {
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            model_width,
            cond_dim,
            time_dim: 16,
            emb_dim: 32,
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.height,
            self.width,
            self.model_width,
            self.cond_dim,
            self.time_dim,
            self.emb_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Parameter(format!("toy config has a zero dimension: {self:?}")));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "toy denoiser needs even spatial size, got {}x{}",
                self.height, self.width
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Parameter("time embedding width must be even".into()));
        }
        Ok(())
    }

    /// Names and logical shapes of every parameter tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, m, e) = (self.channels, self.model_width, self.emb_dim);
        vec![
            ("time_w", vec![e, self.time_dim]),
            ("time_b", vec![e]),
            ("cond_w", vec![e, self.cond_dim]),
            ("in_w", vec![m, c, 3, 3]),
            ("in_b", vec![m]),
            ("in_emb", vec![m, e]),
            ("mid_w", vec![m, m, 3, 3]),
            ("mid_b", vec![m]),
            ("attn_q", vec![m, m]),
            ("attn_k", vec![m, m]),
            ("attn_v", vec![m, m]),
            ("attn_o", vec![m, m]),
            ("up_w", vec![m, 2 * m, 3, 3]),
            ("up_b", vec![m]),
            ("out_w", vec![c, m, 3, 3]),
            ("out_b", vec![c]),
        ]
    }
}

// Parameter slots, matching `param_specs` order.
const TIME_W: usize = 0;
const TIME_B: usize = 1;
const COND_W: usize = 2;
const IN_W: usize = 3;
const IN_B: usize = 4;
const IN_EMB: usize = 5;
const MID_W: usize = 6;
const MID_B: usize = 7;
const ATTN_Q: usize = 8;
const ATTN_K: usize = 9;
const ATTN_V: usize = 10;
const ATTN_O: usize = 11;
const UP_W: usize = 12;
const UP_B: usize = 13;
const OUT_W: usize = 14;
const OUT_B: usize = 15;

fn c<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Float>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

/// `y = W·x (+ b)` with `W` stored `[out, in]`.
fn linear<T: Float>(w: &[T], b: Option<&[T]>, x: &[T], out_dim: usize) -> Vec<T> {
    let in_dim = x.len();
    (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.map_or(T::zero(), |b| b[o]);
            for (wv, xv) in row.iter().zip(x) {
                acc = acc + *wv * *xv;
            }
            acc
        })
        .collect()
}

/// Accumulates `dW += dy ⊗ x`, returns `Wᵀ·dy`.
fn linear_backward<T: Float>(w: &[T], x: &[T], dy: &[T], dw: &mut [T]) -> Vec<T> {
    let in_dim = x.len();
    let mut dx = vec![T::zero(); in_dim];
    for (o, &g) in dy.iter().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] = drow[i] + g * x[i];
            dx[i] = dx[i] + row[i] * g;
        }
    }
    dx
}

/// Valid output range for a kernel tap offset `d ∈ {-1,0,1}` with zero padding.
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

/// 3×3 convolution, stride 1, zero padding 1. `input` is `[ci, h, w]`.
fn conv3x3<T: Float>(input: &[T], weight: &[T], bias: &[T], ci: usize, co: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); co * plane];
    for o in 0..co {
        let op = &mut out[o * plane..(o + 1) * plane];
        op.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..ci {
            let ip = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, w);
                    let wv = weight[((o * ci + i) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * w;
                        let orow = &mut op[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            orow[x] = orow[x] + wv * ip[(src as isize + x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3`]; accumulates weight and bias grads, returns input grad.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Float>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Vec<T> {
    let plane = h * w;
    let mut din = vec![T::zero(); if need_input_grad { ci * plane } else { 0 }];
    for o in 0..co {
        let gp = &dout[o * plane..(o + 1) * plane];
        dbias[o] = gp.iter().fold(dbias[o], |a, &g| a + g);
        for i in 0..ci {
            let ip = &input[i * plane..(i + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, w);
                    let widx = ((o * ci + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * w;
                        for x in x0..x1 {
                            let s = (src as isize + x as isize + dx) as usize;
                            let g = gp[y * w + x];
                            acc = acc + g * ip[s];
                            if need_input_grad {
                                din[i * plane + s] = din[i * plane + s] + wv * g;
                            }
                        }
                    }
                    dweight[widx] = dweight[widx] + acc;
                }
            }
        }
    }
    din
}

fn avgpool2<T: Float>(input: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = c::<T>(0.25);
    let mut out = vec![T::zero(); ch * h2 * w2];
    for k in 0..ch {
        for y in 0..h2 {
            for x in 0..w2 {
                let base = k * h * w;
                let s = input[base + 2 * y * w + 2 * x]
                    + input[base + 2 * y * w + 2 * x + 1]
                    + input[base + (2 * y + 1) * w + 2 * x]
                    + input[base + (2 * y + 1) * w + 2 * x + 1];
                out[(k * h2 + y) * w2 + x] = s * quarter;
            }
        }
    }
    out
}

fn avgpool2_backward<T: Float>(dout: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = c::<T>(0.25);
    let mut din = vec![T::zero(); ch * h * w];
    for k in 0..ch {
        for y in 0..h {
            for x in 0..w {
                din[(k * h + y) * w + x] = dout[(k * h2 + y / 2) * w2 + x / 2] * quarter;
            }
        }
    }
    din
}

fn upsample2<T: Float>(input: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); ch * h * w];
    for k in 0..ch {
        for y in 0..h {
            for x in 0..w {
                out[(k * h + y) * w + x] = input[(k * h2 + y / 2) * w2 + x / 2];
            }
        }
    }
    out
}

fn upsample2_backward<T: Float>(dout: &[T], ch: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut din = vec![T::zero(); ch * h2 * w2];
    for k in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let d = &mut din[(k * h2 + y / 2) * w2 + x / 2];
                *d = *d + dout[(k * h + y) * w + x];
            }
        }
    }
    din
}

/// `[n × k]·[k × m]`.
fn matmul<T: Float>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `Aᵀ·B` for `A: [n × k]`, `B: [n × m]` → `[k × m]`.
fn matmul_tn<T: Float>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(&b[i * m..(i + 1) * m]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `A·Bᵀ` for `A: [n × k]`, `B: [m × k]` → `[n × m]`.
fn matmul_nt<T: Float>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc = acc + *x * *y;
            }
            out[i * m + j] = acc;
        }
    }
    out
}

fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for col in 0..cols {
            out[col * rows + r] = a[r * cols + col];
        }
    }
    out
}

/// Intermediate activations kept for the backward pass.
struct Cache<T> {
    tfeat: Vec<T>,
    cond: Vec<T>,
    e_pre: Vec<T>,
    e: Vec<T>,
    input: Vec<T>,
    a1: Vec<T>,
    pooled: Vec<T>,
    a2: Vec<T>,
    /// Bottleneck tokens `[n × m]` (transpose of h2).
    tokens: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    attn_out: Vec<T>,
    cat: Vec<T>,
    a4: Vec<T>,
    h4: Vec<T>,
}

/// Parameter tensors as flat vectors, in `param_specs` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Float> ParamSet<T> {
    fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|v| U::from(*v).unwrap()).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (i, flat);
            }
            flat -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn get_flat(&self, flat: usize) -> T {
        let (i, j) = self.locate(flat);
        self.tensors[i][j]
    }

    pub fn set_flat(&mut self, flat: usize, v: T) {
        let (i, j) = self.locate(flat);
        self.tensors[i][j] = v;
    }
}

pub type ToyGradients = ParamSet<f32>;

/// Network evaluation over a given parameter set.
struct Net<'a, T> {
    cfg: &'a ToyConfig,
    p: &'a ParamSet<T>,
}

impl<'a, T: Float> Net<'a, T> {
    /// Runs the forward pass. `donor` switches the attention block into
    /// guided mode: keys come from the donor and values are guided by `alpha`.
    fn forward(
        &self,
        x: &[T],
        t: usize,
        cond: &[T],
        donor: Option<(&QkvBundle<T>, T)>,
    ) -> Result<(Vec<T>, Cache<T>)> {
        let cfg = self.cfg;
        let p = &self.p.tensors;
        let (ch, m, e_dim) = (cfg.channels, cfg.model_width, cfg.emb_dim);
        let (h, w) = (cfg.height, cfg.width);
        let (hh, hw) = (h / 2, w / 2);
        let n = hh * hw;

        let tfeat: Vec<T> = timestep_features(t, cfg.time_dim).into_iter().map(c).collect();
        let mut e_pre = linear(&p[TIME_W], Some(&p[TIME_B]), &tfeat, e_dim);
        for (slot, v) in e_pre.iter_mut().zip(linear(&p[COND_W], None, cond, e_dim)) {
            *slot = *slot + v;
        }
        let e: Vec<T> = e_pre.iter().map(|&v| silu(v)).collect();
        let emb_bias = linear(&p[IN_EMB], None, &e, m);

        let mut a1 = conv3x3(x, &p[IN_W], &p[IN_B], ch, m, h, w);
        for (k, bias) in emb_bias.iter().enumerate() {
            a1[k * h * w..(k + 1) * h * w].iter_mut().for_each(|v| *v = *v + *bias);
        }
        let h1: Vec<T> = a1.iter().map(|&v| silu(v)).collect();

        let pooled = avgpool2(&h1, m, h, w);
        let a2 = conv3x3(&pooled, &p[MID_W], &p[MID_B], m, m, hh, hw);
        let h2: Vec<T> = a2.iter().map(|&v| silu(v)).collect();

        let tokens = transpose(&h2, m, n);
        let q = matmul(&tokens, &p[ATTN_Q], n, m, m);
        let k = matmul(&tokens, &p[ATTN_K], n, m, m);
        let v = matmul(&tokens, &p[ATTN_V], n, m, m);
        let own_q = Matrix::from_vec(n, m, q.clone())?;
        let (probs, attn_out) = match donor {
            None => {
                let probs = attention_probs(&own_q, &Matrix::from_vec(n, m, k.clone())?);
                let out = apply_probs(&probs, &Matrix::from_vec(n, m, v.clone())?);
                (probs.into_vec(), out.into_vec())
            }
            Some((d, alpha)) => {
                if d.tokens() != n || d.d_k() != m || d.v.cols() != m {
                    return Err(Error::Parameter(format!(
                        "donor attention bundle is {}x{}, layer expects {n}x{m}",
                        d.tokens(),
                        d.d_k()
                    )));
                }
                let guided_v = value_guidance(&d.v, &Matrix::from_vec(n, m, v.clone())?, alpha)?;
                let probs = attention_probs(&own_q, &d.k);
                let out = apply_probs(&probs, &guided_v);
                (probs.into_vec(), out.into_vec())
            }
        };
        let projected = matmul(&attn_out, &p[ATTN_O], n, m, m);
        let mut h3 = h2.clone();
        for kk in 0..m {
            for i in 0..n {
                h3[kk * n + i] = h3[kk * n + i] + projected[i * m + kk];
            }
        }

        let up = upsample2(&h3, m, h, w);
        let mut cat = up;
        cat.extend_from_slice(&h1);
        let a4 = conv3x3(&cat, &p[UP_W], &p[UP_B], 2 * m, m, h, w);
        let h4: Vec<T> = a4.iter().map(|&v| silu(v)).collect();
        let out = conv3x3(&h4, &p[OUT_W], &p[OUT_B], m, ch, h, w);

        let cache = Cache {
            tfeat,
            cond: cond.to_vec(),
            e_pre,
            e,
            input: x.to_vec(),
            a1,
            pooled,
            a2,
            tokens,
            q,
            k,
            v,
            probs,
            attn_out,
            cat,
            a4,
            h4,
        };
        Ok((out, cache))
    }

    /// Backward of a plain (non-guided) forward pass; accumulates into `grads`.
    fn backward(&self, cache: &Cache<T>, dout: &[T], grads: &mut ParamSet<T>) {
        let cfg = self.cfg;
        let p = &self.p.tensors;
        let g = &mut grads.tensors;
        let (ch, m) = (cfg.channels, cfg.model_width);
        let (h, w) = (cfg.height, cfg.width);
        let (hh, hw) = (h / 2, w / 2);
        let n = hh * hw;
        let scale = T::one() / c::<T>(m as f64).sqrt();

        let (gw, gb) = split_pair(g, OUT_W, OUT_B);
        let dh4 = conv3x3_backward(&cache.h4, &p[OUT_W], dout, m, ch, h, w, gw, gb, true);
        let da4: Vec<T> = dh4.iter().zip(&cache.a4).map(|(&d, &a)| d * silu_grad(a)).collect();
        let (gw, gb) = split_pair(g, UP_W, UP_B);
        let dcat = conv3x3_backward(&cache.cat, &p[UP_W], &da4, 2 * m, m, h, w, gw, gb, true);
        let plane = h * w;
        let (dup, dh1_skip) = dcat.split_at(m * plane);
        let dh3 = upsample2_backward(dup, m, h, w);

        // h3 = h2 + (attn_out · W_o)ᵀ
        let dproj = transpose(&dh3, m, n);
        let dwo = matmul_tn(&cache.attn_out, &dproj, n, m, m);
        add_into(&mut g[ATTN_O], &dwo);
        let d_attn_out = matmul_nt(&dproj, &p[ATTN_O], n, m, m);

        // attn_out = P·V
        let dv = matmul_tn(&cache.probs, &d_attn_out, n, n, m);
        let dprobs = matmul_nt(&d_attn_out, &cache.v, n, m, n);
        let mut dscores = vec![T::zero(); n * n];
        for i in 0..n {
            let prow = &cache.probs[i * n..(i + 1) * n];
            let drow = &dprobs[i * n..(i + 1) * n];
            let dot = prow.iter().zip(drow).fold(T::zero(), |a, (&pp, &dd)| a + pp * dd);
            for j in 0..n {
                dscores[i * n + j] = prow[j] * (drow[j] - dot) * scale;
            }
        }
        let dq = matmul(&dscores, &cache.k, n, n, m);
        let dk = matmul_tn(&dscores, &cache.q, n, n, m);

        let mut dtokens = vec![T::zero(); n * m];
        for (slot, dproj_mat) in [(ATTN_Q, &dq), (ATTN_K, &dk), (ATTN_V, &dv)] {
            add_into(&mut g[slot], &matmul_tn(&cache.tokens, dproj_mat, n, m, m));
            add_into(&mut dtokens, &matmul_nt(dproj_mat, &p[slot], n, m, m));
        }
        let mut dh2 = dh3.clone();
        add_into(&mut dh2, &transpose(&dtokens, n, m));

        let da2: Vec<T> = dh2.iter().zip(&cache.a2).map(|(&d, &a)| d * silu_grad(a)).collect();
        let (gw, gb) = split_pair(g, MID_W, MID_B);
        let dpooled = conv3x3_backward(&cache.pooled, &p[MID_W], &da2, m, m, hh, hw, gw, gb, true);
        let mut dh1 = avgpool2_backward(&dpooled, m, h, w);
        add_into(&mut dh1, dh1_skip);

        let da1: Vec<T> = dh1.iter().zip(&cache.a1).map(|(&d, &a)| d * silu_grad(a)).collect();
        let demb_bias: Vec<T> = (0..m)
            .map(|k| da1[k * plane..(k + 1) * plane].iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        let (gw, gb) = split_pair(g, IN_W, IN_B);
        conv3x3_backward(&cache.input, &p[IN_W], &da1, ch, m, h, w, gw, gb, false);

        let de = linear_backward(&p[IN_EMB], &cache.e, &demb_bias, &mut g[IN_EMB]);
        let de_pre: Vec<T> = de.iter().zip(&cache.e_pre).map(|(&d, &a)| d * silu_grad(a)).collect();
        linear_backward(&p[TIME_W], &cache.tfeat, &de_pre, &mut g[TIME_W]);
        add_into(&mut g[TIME_B], &de_pre);
        linear_backward(&p[COND_W], &cache.cond, &de_pre, &mut g[COND_W]);
    }
}

fn split_pair<T>(g: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// One training example: clean sample, timestep, the noise added, and its condition.
pub(crate) struct NoisyExample<'a> {
    pub x_t: &'a [f32],
    pub t: usize,
    pub target: &'a [f32],
    pub cond: &'a [f32],
}

/// Sum over examples of `‖ε − ε_θ(x_t, t, c)‖²`, divided by the batch size.
fn batch_loss<T: Float>(
    cfg: &ToyConfig,
    params: &ParamSet<T>,
    batch: &[NoisyExample<'_>],
    grads: Option<&mut ParamSet<T>>,
) -> Result<T> {
    let net = Net { cfg, p: params };
    let inv_b = T::one() / c::<T>(batch.len() as f64);
    let mut total = T::zero();
    let mut grads = grads;
    for ex in batch {
        let x: Vec<T> = ex.x_t.iter().map(|v| T::from(*v).unwrap()).collect();
        let cond: Vec<T> = ex.cond.iter().map(|v| T::from(*v).unwrap()).collect();
        let (out, cache) = net.forward(&x, ex.t, &cond, None)?;
        let mut dout = Vec::with_capacity(out.len());
        for (o, tgt) in out.iter().zip(ex.target) {
            let diff = *o - T::from(*tgt).unwrap();
            total = total + diff * diff;
            dout.push(c::<T>(2.0) * diff * inv_b);
        }
        if let Some(g) = grads.as_deref_mut() {
            net.backward(&cache, &dout, g);
        }
    }
    Ok(total * inv_b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    config: ToyConfig,
    params: ParamSet<f32>,
}

impl ToyDenoiser {
    pub fn zeros(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_specs()
            .iter()
            .map(|(_, s)| vec![0.0; s.iter().product()])
            .collect();
        Ok(Self {
            config,
            params: ParamSet { tensors },
        })
    }

    /// Gaussian weights scaled by `1/√fan_in`, zero biases; seeded.
    pub fn random(config: ToyConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (tensor, (name, shape)) in model.params.tensors.iter_mut().zip(config.param_specs()) {
            if shape.len() == 1 {
                continue;
            }
            let fan_in: usize = shape[1..].iter().product();
            let gain = if name == "out_w" { 0.5 } else { 1.0 };
            let std = gain / (fan_in as f32).sqrt();
            for v in tensor.iter_mut() {
                let z: f32 = StandardNormal.sample(&mut rng);
                *v = z * std;
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, flat: usize) -> f32 {
        self.params.get_flat(flat)
    }

    pub fn set_param(&mut self, flat: usize, v: f32) {
        self.params.set_flat(flat, v)
    }

    pub(crate) fn loss_and_grad(&self, batch: &[NoisyExample<'_>]) -> Result<(f32, ToyGradients)> {
        let mut grads = self.params.zeros_like();
        let loss = batch_loss(&self.config, &self.params, batch, Some(&mut grads))?;
        Ok((loss, grads))
    }

    /// Analytic gradient and loss evaluated in `f64`.
    pub(crate) fn loss_and_grad_f64(&self, batch: &[NoisyExample<'_>]) -> Result<(f64, ParamSet<f64>)> {
        let params: ParamSet<f64> = self.params.cast();
        let mut grads = params.zeros_like();
        let loss = batch_loss(&self.config, &params, batch, Some(&mut grads))?;
        Ok((loss, grads))
    }

    /// Loss in `f64` with one parameter (by flat index) overridden.
    pub(crate) fn loss_f64_with(&self, batch: &[NoisyExample<'_>], flat: usize, value: f64) -> Result<f64> {
        let mut params: ParamSet<f64> = self.params.cast();
        params.set_flat(flat, value);
        batch_loss(&self.config, &params, batch, None)
    }

    pub(crate) fn apply_sgd(&mut self, grads: &ToyGradients, lr: f32) {
        for (p, g) in self.params.tensors.iter_mut().zip(&grads.tensors) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let specs = self.config.param_specs();
        let blocks: Vec<LatentTensor> = self
            .params
            .tensors
            .iter()
            .map(|t| LatentTensor::from_vec(Shape::new(1, 1, t.len()), t.clone()))
            .collect::<Result<_>>()?;
        let entries: Vec<(String, Vec<usize>, &LatentTensor)> = specs
            .into_iter()
            .zip(&blocks)
            .map(|((name, shape), t)| (name.to_string(), shape, t))
            .collect();
        let meta = serde_json::to_value(self.config).expect("config serializes");
        write_container(path, CHECKPOINT_KIND, meta, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (index, blocks) = read_container(path, CHECKPOINT_KIND)?;
        let config: ToyConfig = serde_json::from_value(index.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = Self::zeros(config)?;
        let specs = config.param_specs();
        if specs.len() != index.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, expected {}",
                index.entries.len(),
                specs.len()
            )));
        }
        for (((name, shape), entry), (slot, block)) in specs
            .iter()
            .zip(&index.entries)
            .zip(model.params.tensors.iter_mut().zip(blocks))
        {
            if entry.name != *name || entry.shape != *shape {
                return Err(Error::Format(format!(
                    "checkpoint entry {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            *slot = block.into_vec();
        }
        Ok(model)
    }
}

impl NoisePredictor for ToyDenoiser {
    fn name(&self) -> String {
        format!("toy(width={})", self.config.model_width)
    }

    fn input_shape(&self) -> Option<Shape> {
        Some(self.config.shape())
    }

    fn cond_dim(&self) -> Option<usize> {
        Some(self.config.cond_dim)
    }

    fn forward(&self, req: &PredictRequest<'_>) -> Result<Prediction> {
        check_request(self, req)?;
        let donor = match req.directive {
            Some(d) if d.mode == AttentionMode::Guided => {
                let kv = d.donor.as_ref().expect("validated directive has a donor");
                let layer = kv.layers.first().ok_or_else(|| {
                    Error::Parameter(format!("donor {} carries no attention layers", kv.tag))
                })?;
                Some((layer, d.alpha))
            }
            _ => None,
        };
        let net = Net {
            cfg: &self.config,
            p: &self.params,
        };
        let (out, cache) = net.forward(req.x_t.data(), req.t, req.cond.values(), donor)?;
        let n = (self.config.height / 2) * (self.config.width / 2);
        let m = self.config.model_width;
        let bundle = QkvBundle::new(
            Matrix::from_vec(n, m, cache.q)?,
            Matrix::from_vec(n, m, cache.k)?,
            Matrix::from_vec(n, m, cache.v)?,
        )?;
        let eps = LatentTensor::from_vec_unchecked(self.config.shape(), out);
        eps.check_finite("toy denoiser output")?;
        Ok(Prediction {
            eps,
            attention: vec![bundle],
        })
    }
}

/// Convenience: noise prediction with a plain (unguided) pass.
pub fn toy_predict(model: &ToyDenoiser, x: &LatentTensor, t: usize, cond: &ConditioningVector) -> Result<LatentTensor> {
    model.predict(&PredictRequest::new(x, t, cond))
}

//! Temporal shift-window self-attention over (frame, height, width) tokens.
//!
//! Even blocks attend within non-overlapping windows of `w_t` frames that span
//! the full spatial extent. Odd blocks roll the frame axis by `w_t / 2` first,
//! mask the window that straddles the wrap seam so frames from opposite ends
//! of the clip cannot see each other, and roll back afterwards. Query/key
//! vectors carry 3D rotary embeddings in window-local coordinates.

use crate::error::{config, invalid, Result};
use crate::exec::Exec;
use crate::nn::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, NormCache, Weight};

/// Additive bias used for blocked attention pairs.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    w_t: usize,
}

impl WindowSpec {
    pub fn new(w_t: usize) -> Result<Self> {
        if w_t < 2 || !w_t.is_multiple_of(2) {
            return Err(config(format!("temporal window must be even and >= 2, got {w_t}")));
        }
        Ok(WindowSpec { w_t })
    }

    pub fn window(&self) -> usize {
        self.w_t
    }

    pub fn shift(&self) -> usize {
        self.w_t / 2
    }

    /// Shift actually applied for a clip of `t` frames; clips shorter than one
    /// window need none.
    pub fn effective_shift(&self, t: usize) -> usize {
        if t >= self.w_t {
            self.shift()
        } else {
            0
        }
    }

    /// `(start, len)` frame ranges: `ceil(t / w_t)` windows, short tail unpadded.
    pub fn windows(&self, t: usize) -> Vec<(usize, usize)> {
        (0..t).step_by(self.w_t).map(|a| (a, self.w_t.min(t - a))).collect()
    }
}

/// Tokens laid out frame-major over `(t, h, w)` with `d` features each.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenField {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl TokenField {
    pub fn new(t: usize, h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || d == 0 {
            return Err(invalid(format!("token field {t}x{h}x{w}x{d} has a zero axis")));
        }
        if data.len() != t * h * w * d {
            return Err(invalid(format!("token field {t}x{h}x{w}x{d} needs {} values, got {}", t * h * w * d, data.len())));
        }
        Ok(TokenField { t, h, w, d, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize, d: usize) -> Self {
        TokenField { t, h, w, d, data: vec![0.0; t * h * w * d] }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    fn with_data(&self, t: usize, data: Vec<f64>) -> TokenField {
        TokenField { t, h: self.h, w: self.w, d: self.d, data }
    }
}

/// Windows cut along the frame axis plus the frame ranges they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub windows: Vec<TokenField>,
    pub ranges: Vec<(usize, usize)>,
    pub t: usize,
}

pub fn partition_temporal(x: &TokenField, spec: WindowSpec) -> Partition {
    let ranges = spec.windows(x.t);
    let fl = x.frame_len();
    let windows = ranges
        .iter()
        .map(|&(a, len)| x.with_data(len, x.data[a * fl..(a + len) * fl].to_vec()))
        .collect();
    Partition { windows, ranges, t: x.t }
}

pub fn unpartition(p: &Partition) -> Result<TokenField> {
    let first = p.windows.first().ok_or_else(|| invalid("empty partition"))?;
    let fl = first.frame_len();
    let mut data = vec![0.0; p.t * fl];
    for (win, &(a, len)) in p.windows.iter().zip(&p.ranges) {
        if win.t != len || win.frame_len() != fl {
            return Err(invalid("window does not match its recorded range"));
        }
        data[a * fl..(a + len) * fl].copy_from_slice(&win.data);
    }
    Ok(first.with_data(p.t, data))
}

/// Rolls the frame axis: output frame `i` is input frame `(i + s) mod t`.
pub fn cyclic_shift(x: &TokenField, s: usize) -> Result<TokenField> {
    if s >= x.t {
        return Err(invalid(format!("shift {s} must be < {} frames", x.t)));
    }
    let fl = x.frame_len();
    let mut data = Vec::with_capacity(x.data.len());
    data.extend_from_slice(&x.data[s * fl..]);
    data.extend_from_slice(&x.data[..s * fl]);
    Ok(x.with_data(x.t, data))
}

/// Frame-level attention mask for one window; token `i` lives in frame
/// `i / (h·w)` of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    frames: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn all_allowed(frames: usize) -> Self {
        AttnMask { frames, allowed: vec![true; frames * frames] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn allows_frames(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.frames + j]
    }

    pub fn is_all_allowed(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Token-level additive mask (`0` or [`MASK_NEG`]) for `hw` tokens per frame.
    pub fn additive(&self, hw: usize) -> Vec<f64> {
        let m = self.frames * hw;
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                if !self.allows_frames(i / hw, j / hw) {
                    out[i * m + j] = MASK_NEG;
                }
            }
        }
        out
    }
}

/// Per-window masks after the forward roll by `spec.shift()`: pairs whose
/// original frames lie on opposite sides of the wrap seam are blocked.
pub fn build_boundary_mask(t: usize, spec: WindowSpec) -> Vec<AttnMask> {
    build_masks(t, spec, spec.effective_shift(t))
}

fn build_masks(t: usize, spec: WindowSpec, shift: usize) -> Vec<AttnMask> {
    // rolled frames at index >= seam wrapped around from the start of the clip
    let seam = t - shift;
    spec.windows(t)
        .into_iter()
        .map(|(a, len)| {
            if shift == 0 || a + len <= seam || a >= seam {
                return AttnMask::all_allowed(len);
            }
            let allowed = (0..len * len)
                .map(|ij| ((a + ij / len) >= seam) == ((a + ij % len) >= seam))
                .collect();
            AttnMask { frames: len, allowed }
        })
        .collect()
}

/// Rotary embedding over (t, h, w) with per-axis sub-dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub base: f64,
    pub split: (usize, usize, usize),
}

impl RopeConfig {
    /// Equal thirds of `d`; needs `d % 6 == 0`.
    pub fn for_dim(d: usize) -> Result<Self> {
        let cfg = RopeConfig { base: 10_000.0, split: (d / 3, d / 3, d / 3) };
        cfg.validate(d)?;
        Ok(cfg)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let (a, b, c) = self.split;
        if a + b + c != d || a % 2 != 0 || b % 2 != 0 || c % 2 != 0 {
            return Err(config(format!("rope split {:?} must be even parts summing to {d}", self.split)));
        }
        Ok(())
    }

    /// Inverse frequencies for each rotary pair, in feature order.
    fn inv_freqs(&self) -> Vec<(usize, f64)> {
        let (a, b, c) = self.split;
        let mut out = Vec::with_capacity((a + b + c) / 2);
        for (axis, len) in [a, b, c].into_iter().enumerate() {
            for j in 0..len / 2 {
                out.push((axis, self.base.powf(-2.0 * j as f64 / len as f64)));
            }
        }
        out
    }
}

/// Rotates each pair of `v` by `pos[axis] * freq`; `sign = -1` applies the inverse.
fn rotate(v: &mut [f64], pos: [f64; 3], freqs: &[(usize, f64)], sign: f64) {
    for (p, &(axis, f)) in freqs.iter().enumerate() {
        let angle = sign * pos[axis] * f;
        if angle == 0.0 {
            continue;
        }
        let (s, c) = angle.sin_cos();
        let (x0, x1) = (v[2 * p], v[2 * p + 1]);
        v[2 * p] = x0 * c - x1 * s;
        v[2 * p + 1] = x0 * s + x1 * c;
    }
}

/// Applies 3D RoPE with positions measured from `origin`.
pub fn apply_rope3d(x: &TokenField, cfg: &RopeConfig, origin: (usize, usize, usize)) -> Result<TokenField> {
    cfg.validate(x.d)?;
    let freqs = cfg.inv_freqs();
    let mut out = x.clone();
    for (idx, v) in out.data.chunks_exact_mut(x.d).enumerate() {
        let ti = idx / (x.h * x.w);
        let hi = idx / x.w % x.h;
        let wi = idx % x.w;
        let pos = [
            ti as f64 - origin.0 as f64,
            hi as f64 - origin.1 as f64,
            wi as f64 - origin.2 as f64,
        ];
        rotate(v, pos, &freqs, 1.0);
    }
    Ok(out)
}

/// Multi-head attention weights for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    pub heads: usize,
    /// `[d, 3d]`, columns ordered q | k | v.
    pub w_qkv: Weight,
    pub b_qkv: Weight,
    pub w_o: Weight,
    pub b_o: Weight,
}

impl AttnWeights {
    pub fn zeros(d: usize, heads: usize) -> Self {
        AttnWeights {
            heads,
            w_qkv: Weight::zeros(&[d, 3 * d]),
            b_qkv: Weight::zeros(&[3 * d]),
            w_o: Weight::zeros(&[d, d]),
            b_o: Weight::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_o.shape[0]
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(config(format!("dim {d} not divisible by {} heads", self.heads)));
        }
        if !(d / self.heads).is_multiple_of(2) {
            return Err(config(format!("head dim {} must be even for rotary pairs", d / self.heads)));
        }
        if self.w_qkv.shape != [d, 3 * d] || self.w_o.shape != [d, d] || self.b_qkv.len() != 3 * d || self.b_o.len() != d {
            return Err(config(format!("attention weight shapes do not match dim {d}")));
        }
        Ok(())
    }
}

struct WindowCache {
    /// Token indices (into the unrolled field) in window order.
    tokens: Vec<usize>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × m × m` softmax probabilities.
    probs: Vec<f64>,
}

pub(crate) struct AttnCache {
    x: Vec<f64>,
    attn: Vec<f64>,
    windows: Vec<WindowCache>,
    pub(crate) pairs: usize,
}

/// Layout helper shared by forward and backward.
struct Geometry {
    t: usize,
    hw: usize,
    w: usize,
    shift: usize,
}

impl Geometry {
    fn window_tokens(&self, start: usize, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len * self.hw);
        for i in start..start + len {
            let orig = (i + self.shift) % self.t;
            out.extend((0..self.hw).map(|s| orig * self.hw + s));
        }
        out
    }

    fn position(&self, local_idx: usize) -> [f64; 3] {
        let f = local_idx / self.hw;
        let s = local_idx % self.hw;
        [f as f64, (s / self.w) as f64, (s % self.w) as f64]
    }
}

pub(crate) fn attention_forward(
    x: &TokenField,
    spec: WindowSpec,
    shifted: bool,
    rope: &RopeConfig,
    wts: &AttnWeights,
    exec: Exec,
) -> Result<(TokenField, AttnCache)> {
    let d = x.d;
    wts.validate(d)?;
    rope.validate(d)?;
    let n = x.tokens();
    let heads = wts.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let shift = if shifted { spec.effective_shift(x.t) } else { 0 };
    let geo = Geometry { t: x.t, hw: x.h * x.w, w: x.w, shift };
    let qkv = linear(&x.data, &wts.w_qkv, &wts.b_qkv, n);
    let masks = build_masks(x.t, spec, shift);
    let ranges = spec.windows(x.t);
    let freqs = rope.inv_freqs();

    let windows: Vec<(WindowCache, Vec<f64>)> = exec.map(ranges.len(), |wi| {
        let (start, len) = ranges[wi];
        let tokens = geo.window_tokens(start, len);
        let m = tokens.len();
        let mut q = vec![0.0; m * d];
        let mut k = vec![0.0; m * d];
        let mut v = vec![0.0; m * d];
        for (li, &tok) in tokens.iter().enumerate() {
            let row = &qkv[tok * 3 * d..(tok + 1) * 3 * d];
            q[li * d..(li + 1) * d].copy_from_slice(&row[..d]);
            k[li * d..(li + 1) * d].copy_from_slice(&row[d..2 * d]);
            v[li * d..(li + 1) * d].copy_from_slice(&row[2 * d..]);
            let pos = geo.position(li);
            rotate(&mut q[li * d..(li + 1) * d], pos, &freqs, 1.0);
            rotate(&mut k[li * d..(li + 1) * d], pos, &freqs, 1.0);
        }
        let bias = if masks[wi].is_all_allowed() { None } else { Some(masks[wi].additive(geo.hw)) };
        let mut probs = vec![0.0; heads * m * m];
        let mut out = vec![0.0; m * d];
        for h in 0..heads {
            let off = h * hd;
            let p = &mut probs[h * m * m..(h + 1) * m * m];
            for i in 0..m {
                let qi = &q[i * d + off..i * d + off + hd];
                let row = &mut p[i * m..(i + 1) * m];
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    let kj = &k[j * d + off..j * d + off + hd];
                    let mut s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    if let Some(b) = &bias {
                        s += b[i * m + j];
                    }
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                let oi = &mut out[i * d + off..i * d + off + hd];
                for j in 0..m {
                    let pij = row[j];
                    if pij == 0.0 {
                        continue;
                    }
                    for (o, vv) in oi.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                        *o += pij * vv;
                    }
                }
            }
        }
        (WindowCache { tokens, q, k, v, probs }, out)
    });

    let mut attn = vec![0.0; n * d];
    let mut pairs = 0;
    let mut caches = Vec::with_capacity(windows.len());
    for (cache, out) in windows {
        for (li, &tok) in cache.tokens.iter().enumerate() {
            attn[tok * d..(tok + 1) * d].copy_from_slice(&out[li * d..(li + 1) * d]);
        }
        pairs += cache.tokens.len() * cache.tokens.len();
        caches.push(cache);
    }
    let y = linear(&attn, &wts.w_o, &wts.b_o, n);
    Ok((x.with_data(x.t, y), AttnCache { x: x.data.clone(), attn, windows: caches, pairs }))
}

pub(crate) fn attention_backward(
    cache: &AttnCache,
    dy: &[f64],
    field: (usize, usize, usize, usize),
    rope: &RopeConfig,
    wts: &AttnWeights,
    grads: &mut AttnWeights,
    exec: Exec,
) -> Vec<f64> {
    let (t, h, w, d) = field;
    let n = t * h * w;
    let heads = wts.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let geo = Geometry { t, hw: h * w, w, shift: 0 };
    let freqs = rope.inv_freqs();
    let dattn = linear_backward(&cache.attn, dy, &wts.w_o, &mut grads.w_o, &mut grads.b_o, n);

    let per_window: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = exec.map(cache.windows.len(), |wi| {
        let wc = &cache.windows[wi];
        let m = wc.tokens.len();
        let mut dout = vec![0.0; m * d];
        for (li, &tok) in wc.tokens.iter().enumerate() {
            dout[li * d..(li + 1) * d].copy_from_slice(&dattn[tok * d..(tok + 1) * d]);
        }
        let mut dq = vec![0.0; m * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut ds = vec![0.0; m];
        for hh in 0..heads {
            let off = hh * hd;
            let p = &wc.probs[hh * m * m..(hh + 1) * m * m];
            for i in 0..m {
                let doi = &dout[i * d + off..i * d + off + hd];
                let prow = &p[i * m..(i + 1) * m];
                // dP_ij = dO_i · V_j ; dS = P ∘ (dP − Σ_j P dP)
                let mut dot = 0.0;
                for j in 0..m {
                    let dp = if prow[j] == 0.0 {
                        0.0
                    } else {
                        doi.iter().zip(&wc.v[j * d + off..j * d + off + hd]).map(|(a, b)| a * b).sum()
                    };
                    ds[j] = dp;
                    dot += prow[j] * dp;
                }
                for j in 0..m {
                    let pij = prow[j];
                    if pij == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        dv[j * d + off + c] += pij * doi[c];
                    }
                    let g = pij * (ds[j] - dot) * scale;
                    for c in 0..hd {
                        dq[i * d + off + c] += g * wc.k[j * d + off + c];
                        dk[j * d + off + c] += g * wc.q[i * d + off + c];
                    }
                }
            }
        }
        for li in 0..m {
            let pos = geo.position(li);
            rotate(&mut dq[li * d..(li + 1) * d], pos, &freqs, -1.0);
            rotate(&mut dk[li * d..(li + 1) * d], pos, &freqs, -1.0);
        }
        (dq, dk, dv)
    });

    let mut dqkv = vec![0.0; n * 3 * d];
    for (wc, (dq, dk, dv)) in cache.windows.iter().zip(per_window) {
        for (li, &tok) in wc.tokens.iter().enumerate() {
            let row = &mut dqkv[tok * 3 * d..(tok + 1) * 3 * d];
            row[..d].copy_from_slice(&dq[li * d..(li + 1) * d]);
            row[d..2 * d].copy_from_slice(&dk[li * d..(li + 1) * d]);
            row[2 * d..].copy_from_slice(&dv[li * d..(li + 1) * d]);
        }
    }
    linear_backward(&cache.x, &dqkv, &wts.w_qkv, &mut grads.w_qkv, &mut grads.b_qkv, n)
}

/// Window attention (shifted or not) with window-local RoPE.
pub fn window_attention(
    x: &TokenField,
    spec: WindowSpec,
    shifted: bool,
    rope: &RopeConfig,
    weights: &AttnWeights,
) -> Result<TokenField> {
    window_attention_with(x, spec, shifted, rope, weights, Exec::default())
}

pub fn window_attention_with(
    x: &TokenField,
    spec: WindowSpec,
    shifted: bool,
    rope: &RopeConfig,
    weights: &AttnWeights,
    exec: Exec,
) -> Result<TokenField> {
    Ok(attention_forward(x, spec, shifted, rope, weights, exec)?.0)
}

/// Like [`window_attention_with`], also returning the number of token pairs scored.
pub fn window_attention_counted(
    x: &TokenField,
    spec: WindowSpec,
    shifted: bool,
    rope: &RopeConfig,
    weights: &AttnWeights,
    exec: Exec,
) -> Result<(TokenField, usize)> {
    let (y, cache) = attention_forward(x, spec, shifted, rope, weights, exec)?;
    Ok((y, cache.pairs))
}

/// Token pairs scored by one window-attention layer: `Σ_windows (len·h·w)²`.
pub fn attention_pairs(t: usize, hw: usize, spec: WindowSpec) -> usize {
    spec.windows(t).iter().map(|&(_, len)| (len * hw) * (len * hw)).sum()
}

/// Pre-norm transformer block: attention then a GELU feed-forward, each residual.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Weight,
    pub ln1_b: Weight,
    pub attn: AttnWeights,
    pub ln2_g: Weight,
    pub ln2_b: Weight,
    pub ff1_w: Weight,
    pub ff1_b: Weight,
    pub ff2_w: Weight,
    pub ff2_b: Weight,
}

impl BlockWeights {
    pub fn zeros(d: usize, heads: usize, ff: usize) -> Self {
        BlockWeights {
            ln1_g: Weight::zeros(&[d]),
            ln1_b: Weight::zeros(&[d]),
            attn: AttnWeights::zeros(d, heads),
            ln2_g: Weight::zeros(&[d]),
            ln2_b: Weight::zeros(&[d]),
            ff1_w: Weight::zeros(&[d, ff]),
            ff1_b: Weight::zeros(&[ff]),
            ff2_w: Weight::zeros(&[ff, d]),
            ff2_b: Weight::zeros(&[d]),
        }
    }

    pub fn ff_dim(&self) -> usize {
        self.ff1_w.shape[1]
    }
}

pub(crate) struct BlockCache {
    ln1: NormCache,
    attn: AttnCache,
    ln2: NormCache,
    h2: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) fn block_forward(
    x: &TokenField,
    wts: &BlockWeights,
    spec: WindowSpec,
    shifted: bool,
    rope: &RopeConfig,
    exec: Exec,
) -> Result<(TokenField, BlockCache)> {
    let d = x.d;
    let n = x.tokens();
    let (h1, ln1) = layer_norm(&x.data, &wts.ln1_g, &wts.ln1_b, d);
    let (a, attn) = attention_forward(&x.with_data(x.t, h1), spec, shifted, rope, &wts.attn, exec)?;
    let x2: Vec<f64> = x.data.iter().zip(&a.data).map(|(p, q)| p + q).collect();
    let (h2, ln2) = layer_norm(&x2, &wts.ln2_g, &wts.ln2_b, d);
    let f1 = linear(&h2, &wts.ff1_w, &wts.ff1_b, n);
    let g: Vec<f64> = f1.iter().map(|&v| gelu(v)).collect();
    let f2 = linear(&g, &wts.ff2_w, &wts.ff2_b, n);
    let out: Vec<f64> = x2.iter().zip(&f2).map(|(p, q)| p + q).collect();
    Ok((x.with_data(x.t, out), BlockCache { ln1, attn, ln2, h2, f1, g }))
}

pub(crate) fn block_backward(
    cache: &BlockCache,
    dout: &[f64],
    field: (usize, usize, usize, usize),
    wts: &BlockWeights,
    rope: &RopeConfig,
    grads: &mut BlockWeights,
    exec: Exec,
) -> Vec<f64> {
    let d = field.3;
    let n = field.0 * field.1 * field.2;
    let dg = linear_backward(&cache.g, dout, &wts.ff2_w, &mut grads.ff2_w, &mut grads.ff2_b, n);
    let df1: Vec<f64> = dg.iter().zip(&cache.f1).map(|(g, &f)| g * gelu_grad(f)).collect();
    let dh2 = linear_backward(&cache.h2, &df1, &wts.ff1_w, &mut grads.ff1_w, &mut grads.ff1_b, n);
    let dln2 = layer_norm_backward(&dh2, &cache.ln2, &wts.ln2_g, &mut grads.ln2_g, &mut grads.ln2_b, d);
    let dx2: Vec<f64> = dout.iter().zip(&dln2).map(|(a, b)| a + b).collect();
    let dh1 = attention_backward(&cache.attn, &dx2, field, rope, &wts.attn, &mut grads.attn, exec);
    let dln1 = layer_norm_backward(&dh1, &cache.ln1, &wts.ln1_g, &mut grads.ln1_g, &mut grads.ln1_b, d);
    dx2.iter().zip(&dln1).map(|(a, b)| a + b).collect()
}

pub fn swin_block(
    x: &TokenField,
    wts: &BlockWeights,
    spec: WindowSpec,
    shifted: bool,
    rope: &RopeConfig,
) -> Result<TokenField> {
    Ok(block_forward(x, wts, spec, shifted, rope, Exec::default())?.0)
}

/// Unshifted block followed by a shifted block.
pub fn swin_block_pair(
    x: &TokenField,
    pair: (&BlockWeights, &BlockWeights),
    spec: WindowSpec,
    rope: &RopeConfig,
) -> Result<TokenField> {
    let y = swin_block(x, pair.0, spec, false, rope)?;
    swin_block(&y, pair.1, spec, true, rope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::Rng;

    fn random_field(t: usize, h: usize, w: usize, d: usize, rng: &mut Rng) -> TokenField {
        TokenField::new(t, h, w, d, (0..t * h * w * d).map(|_| rng.normal()).collect()).unwrap()
    }

    fn random_weight(shape: &[usize], scale: f64, rng: &mut Rng) -> Weight {
        let n: usize = shape.iter().product();
        Weight { shape: shape.to_vec(), data: (0..n).map(|_| rng.normal() * scale).collect() }
    }

    fn random_attn(d: usize, heads: usize, rng: &mut Rng) -> AttnWeights {
        let s = 1.0 / (d as f64).sqrt();
        AttnWeights {
            heads,
            w_qkv: random_weight(&[d, 3 * d], s, rng),
            b_qkv: random_weight(&[3 * d], 0.1, rng),
            w_o: random_weight(&[d, d], s, rng),
            b_o: random_weight(&[d], 0.1, rng),
        }
    }

    fn random_block(d: usize, heads: usize, rng: &mut Rng) -> BlockWeights {
        let s = 1.0 / (d as f64).sqrt();
        BlockWeights {
            ln1_g: random_weight(&[d], 0.2, rng).map_add(1.0),
            ln1_b: random_weight(&[d], 0.1, rng),
            attn: random_attn(d, heads, rng),
            ln2_g: random_weight(&[d], 0.2, rng).map_add(1.0),
            ln2_b: random_weight(&[d], 0.1, rng),
            ff1_w: random_weight(&[d, 4 * d], s, rng),
            ff1_b: random_weight(&[4 * d], 0.1, rng),
            ff2_w: random_weight(&[4 * d, d], 0.5 * s, rng),
            ff2_b: random_weight(&[d], 0.1, rng),
        }
    }

    trait MapAdd {
        fn map_add(self, v: f64) -> Self;
    }
    impl MapAdd for Weight {
        fn map_add(mut self, v: f64) -> Self {
            self.data.iter_mut().for_each(|x| *x += v);
            self
        }
    }

    #[test]
    fn partition_counts_and_roundtrip() {
        let spec = WindowSpec::new(4).unwrap();
        let mut rng = Rng::new(1);
        let x = random_field(8, 2, 3, 6, &mut rng);
        let p = partition_temporal(&x, spec);
        assert_eq!(p.windows.iter().map(|w| w.t).collect::<Vec<_>>(), vec![4, 4]);
        assert_eq!(unpartition(&p).unwrap(), x);
        let x7 = random_field(7, 2, 2, 6, &mut rng);
        let p7 = partition_temporal(&x7, spec);
        assert_eq!(p7.windows.iter().map(|w| w.t).collect::<Vec<_>>(), vec![4, 3]);
        assert_eq!(unpartition(&p7).unwrap(), x7);
        for t in 1..13 {
            let x = random_field(t, 1, 2, 6, &mut rng);
            assert_eq!(unpartition(&partition_temporal(&x, WindowSpec::new(2).unwrap())).unwrap(), x);
        }
        assert!(WindowSpec::new(3).is_err());
    }

    #[test]
    fn cyclic_shift_by_hand() {
        let data: Vec<f64> = (0..4).flat_map(|f| std::iter::repeat_n(f as f64, 6)).collect();
        let x = TokenField::new(4, 1, 1, 6, data).unwrap();
        let y = cyclic_shift(&x, 2).unwrap();
        let tags: Vec<f64> = (0..4).map(|f| y.frame(f)[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0, 0.0, 1.0]);
        assert_eq!(cyclic_shift(&x, 0).unwrap(), x);
        assert!(cyclic_shift(&x, 4).is_err());
        let mut rng = Rng::new(2);
        for s in 0..7 {
            let x = random_field(7, 2, 1, 6, &mut rng);
            let back = cyclic_shift(&cyclic_shift(&x, s).unwrap(), (7 - s) % 7).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn seam_mask_by_hand() {
        let spec = WindowSpec::new(4).unwrap();
        let masks = build_boundary_mask(8, spec);
        assert!(masks[0].is_all_allowed());
        // rolled window 1 holds original frames [6, 7, 0, 1]
        let m = &masks[1];
        let orig = [6, 7, 0, 1];
        for i in 0..4 {
            for j in 0..4 {
                let same_side = (orig[i] >= 6) == (orig[j] >= 6);
                assert_eq!(m.allows_frames(i, j), same_side, "{} {}", orig[i], orig[j]);
                assert_eq!(m.allows_frames(i, j), m.allows_frames(j, i));
            }
            assert!(m.allows_frames(i, i));
        }
        assert!(build_boundary_mask(3, spec).iter().all(AttnMask::is_all_allowed));
        assert!(build_masks(8, spec, 0).iter().all(AttnMask::is_all_allowed));
        let add = m.additive(2);
        assert_eq!(add.len(), 64);
        assert_eq!(add[4], MASK_NEG);
        assert_eq!(add[1], 0.0);
    }

    #[test]
    fn rope_properties() {
        let cfg = RopeConfig::for_dim(12).unwrap();
        let mut rng = Rng::new(3);
        let x = random_field(3, 2, 2, 12, &mut rng);
        // origin at the first token: that token is unrotated
        let r = apply_rope3d(&x, &cfg, (0, 0, 0)).unwrap();
        assert_eq!(&r.data[..12], &x.data[..12]);
        for (a, b) in r.data.chunks_exact(2).zip(x.data.chunks_exact(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() <= 1e-12);
        }
        assert!(RopeConfig::for_dim(8).is_err());
        assert!(apply_rope3d(&x, &RopeConfig { base: 1e4, split: (4, 4, 2) }, (0, 0, 0)).is_err());
    }

    #[test]
    fn rope_relative_position() {
        let cfg = RopeConfig::for_dim(12).unwrap();
        let freqs = cfg.inv_freqs();
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let q: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
            let k: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
            let p1 = [rng.uniform() * 8.0, rng.uniform() * 8.0, rng.uniform() * 8.0];
            let p2 = [rng.uniform() * 8.0, rng.uniform() * 8.0, rng.uniform() * 8.0];
            let dot = |a: [f64; 3], b: [f64; 3]| {
                let (mut qq, mut kk) = (q.clone(), k.clone());
                rotate(&mut qq, a, &freqs, 1.0);
                rotate(&mut kk, b, &freqs, 1.0);
                qq.iter().zip(&kk).map(|(x, y)| x * y).sum::<f64>()
            };
            let shifted = |p: [f64; 3]| [p[0] + 5.0, p[1] + 3.0, p[2] + 2.0];
            assert!((dot(p1, p2) - dot(shifted(p1), shifted(p2))).abs() <= 1e-10);
        }
    }

    #[test]
    fn single_window_matches_plain_attention() {
        let mut rng = Rng::new(5);
        let x = random_field(3, 2, 2, 12, &mut rng);
        let wts = random_attn(12, 2, &mut rng);
        let cfg = RopeConfig::for_dim(12).unwrap();
        let spec = WindowSpec::new(4).unwrap();
        let a = window_attention(&x, spec, false, &cfg, &wts).unwrap();
        let b = window_attention(&x, spec, true, &cfg, &wts).unwrap();
        assert_eq!(a, b);
        let seq = window_attention_with(&x, spec, true, &cfg, &wts, Exec::Sequential).unwrap();
        assert_eq!(a, seq);
    }

    #[test]
    fn pair_count_is_linear_in_frames() {
        let spec = WindowSpec::new(4).unwrap();
        let mut rng = Rng::new(6);
        let cfg = RopeConfig::for_dim(6).unwrap();
        let wts = random_attn(6, 1, &mut rng);
        for t in [4usize, 7, 8, 16] {
            let x = random_field(t, 2, 2, 6, &mut rng);
            let (_, cache) = attention_forward(&x, spec, true, &cfg, &wts, Exec::default()).unwrap();
            assert_eq!(cache.pairs, attention_pairs(t, 4, spec));
        }
        assert_eq!(attention_pairs(16, 4, spec), 2 * attention_pairs(8, 4, spec));
    }

    #[test]
    fn zero_weights_pass_residual() {
        let mut rng = Rng::new(7);
        let x = random_field(8, 2, 2, 12, &mut rng);
        let z = BlockWeights::zeros(12, 2, 48);
        let cfg = RopeConfig::for_dim(12).unwrap();
        let y = swin_block_pair(&x, (&z, &z), WindowSpec::new(4).unwrap(), &cfg).unwrap();
        assert_eq!(y, x);
    }

    /// Which output frames change when frame 0 of the input is perturbed.
    fn influenced(blocks: &[(BlockWeights, bool)], t: usize, seed: u64) -> Vec<bool> {
        let mut rng = Rng::new(seed);
        let x = random_field(t, 2, 2, 12, &mut rng);
        let mut x2 = x.clone();
        x2.data[3] += 0.5;
        let cfg = RopeConfig::for_dim(12).unwrap();
        let spec = WindowSpec::new(4).unwrap();
        let run = |mut f: TokenField| {
            for (b, shifted) in blocks {
                f = swin_block(&f, b, spec, *shifted, &cfg).unwrap();
            }
            f
        };
        let (a, b) = (run(x), run(x2));
        (0..t).map(|i| a.frame(i) != b.frame(i)).collect()
    }

    #[test]
    fn influence_after_one_pair() {
        let mut rng = Rng::new(8);
        let blocks = vec![(random_block(12, 2, &mut rng), false), (random_block(12, 2, &mut rng), true)];
        let reach = influenced(&blocks, 8, 9);
        assert_eq!(reach, vec![true, true, true, true, true, true, false, false]);
        let reach = influenced(&blocks[..1], 8, 9);
        assert_eq!(reach, vec![true, true, true, true, false, false, false, false]);
        let mut two = blocks.clone();
        two.push((random_block(12, 2, &mut rng), false));
        two.push((random_block(12, 2, &mut rng), true));
        assert!(influenced(&two, 8, 9)[7]);
    }

    fn fd_check<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64], idx: impl Iterator<Item = usize>) {
        for i in idx {
            let h = 1e-5;
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "idx {i}: analytic {} numeric {num}", analytic[i]);
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let (t, h, w, d) = (6, 2, 2, 12);
        let x = random_field(t, h, w, d, &mut rng);
        let blk = random_block(d, 2, &mut rng);
        let r: Vec<f64> = (0..x.data.len()).map(|_| rng.normal()).collect();
        let cfg = RopeConfig::for_dim(d).unwrap();
        let spec = WindowSpec::new(4).unwrap();
        for shifted in [false, true] {
            let loss = |xd: &[f64], b: &BlockWeights| {
                let f = TokenField::new(t, h, w, d, xd.to_vec()).unwrap();
                let y = swin_block(&f, b, spec, shifted, &cfg).unwrap();
                y.data.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, cache) = block_forward(&x, &blk, spec, shifted, &cfg, Exec::default()).unwrap();
            let mut grads = BlockWeights::zeros(d, 2, 4 * d);
            let dx = block_backward(&cache, &r, (t, h, w, d), &blk, &cfg, &mut grads, Exec::default());
            fd_check(|xd| loss(xd, &blk), &x.data, &dx, (0..x.data.len()).step_by(7));
            let wq = blk.attn.w_qkv.data.clone();
            fd_check(
                |wd| {
                    let mut b = blk.clone();
                    b.attn.w_qkv.data = wd.to_vec();
                    loss(&x.data, &b)
                },
                &wq,
                &grads.attn.w_qkv.data,
                (0..wq.len()).step_by(11),
            );
        }
    }
}

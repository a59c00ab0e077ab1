//! Velocity-prediction transformer built from shift-window block pairs.
//!
//! `z (b,c,f,h,w)` is cut into `p×p` spatial patches, embedded, offset by a
//! sinusoidal σ embedding and a projected conditioning vector, passed through
//! `depth` alternating unshifted/shifted blocks and projected back to patches.
//! There is no positional table: the model runs at any `(h, w)` divisible by `p`.

use crate::error::{config, Error, Result};
use crate::exec::Exec;
use crate::latent::{resize_spatial, Extent5, LatentGrid, Rng};
use crate::nn::{linear, linear_backward, matmul, Weight};
use crate::schedule::{eval_checked, euler_step, Conditioning, SigmaSchedule, VelocityModel};
use crate::swin::{block_backward, block_forward, BlockCache, BlockWeights, RopeConfig, TokenField, WindowSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub window: usize,
    pub cond_dim: usize,
    pub ff_mult: usize,
    pub rope_base: f64,
}

impl DenoiserConfig {
    /// Preview-stage model.
    pub fn base(channels: usize) -> Self {
        DenoiserConfig { channels, patch: 2, dim: 60, heads: 5, depth: 4, window: 4, cond_dim: 8, ff_mult: 4, rope_base: 10_000.0 }
    }

    /// Refiner: 5× narrower and 2.5× fewer heads than [`DenoiserConfig::base`].
    pub fn refiner(channels: usize) -> Self {
        DenoiserConfig { dim: 12, heads: 2, ..Self::base(channels) }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if self.channels == 0 || self.patch == 0 || self.cond_dim == 0 || self.ff_mult == 0 {
            return Err(config("channels, patch, cond_dim and ff_mult must be positive"));
        }
        if self.depth == 0 || !self.depth.is_multiple_of(2) {
            return Err(config(format!("depth {} must be a positive even number", self.depth)));
        }
        if d == 0 || !d.is_multiple_of(6) {
            return Err(config(format!("dim {d} must be a positive multiple of 6")));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) || !(d / self.heads).is_multiple_of(2) {
            return Err(config(format!("dim {d} must split into {} even-width heads", self.heads)));
        }
        WindowSpec::new(self.window)?;
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn rope(&self) -> RopeConfig {
        let t = self.dim / 3;
        RopeConfig { base: self.rope_base, split: (t, t, t) }
    }
}

/// All weights of the velocity transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub patch_w: Weight,
    pub patch_b: Weight,
    pub sigma_w: Weight,
    pub sigma_b: Weight,
    pub cond_w: Weight,
    pub blocks: Vec<BlockWeights>,
    pub head_w: Weight,
    pub head_b: Weight,
}

impl DenoiserParams {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let (d, pd) = (config.dim, config.patch_dim());
        let ff = config.ff_mult * d;
        Ok(DenoiserParams {
            patch_w: Weight::zeros(&[pd, d]),
            patch_b: Weight::zeros(&[d]),
            sigma_w: Weight::zeros(&[d, d]),
            sigma_b: Weight::zeros(&[d]),
            cond_w: Weight::zeros(&[config.cond_dim, d]),
            blocks: (0..config.depth).map(|_| BlockWeights::zeros(d, config.heads, ff)).collect(),
            head_w: Weight::zeros(&[d, pd]),
            head_b: Weight::zeros(&[pd]),
            config,
        })
    }

    /// Scaled-normal init; norms start at unit gain.
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for (name, w) in p.named_mut() {
            if name.ends_with("ln1.g") || name.ends_with("ln2.g") {
                w.data.iter_mut().for_each(|v| *v = 1.0);
            } else if w.shape.len() == 2 {
                let scale = if name == "head.w" { 0.05 } else { 1.0 } / (w.shape[0] as f64).sqrt();
                w.data.iter_mut().for_each(|v| *v = rng.normal() * scale);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("validated config")
    }

    /// Parameters in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Weight)> {
        let mut out: Vec<(String, &Weight)> = vec![
            ("patch.w".into(), &self.patch_w),
            ("patch.b".into(), &self.patch_b),
            ("sigma.w".into(), &self.sigma_w),
            ("sigma.b".into(), &self.sigma_b),
            ("cond.w".into(), &self.cond_w),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("ln1.g"), &b.ln1_g),
                (p("ln1.b"), &b.ln1_b),
                (p("attn.qkv.w"), &b.attn.w_qkv),
                (p("attn.qkv.b"), &b.attn.b_qkv),
                (p("attn.out.w"), &b.attn.w_o),
                (p("attn.out.b"), &b.attn.b_o),
                (p("ln2.g"), &b.ln2_g),
                (p("ln2.b"), &b.ln2_b),
                (p("ff1.w"), &b.ff1_w),
                (p("ff1.b"), &b.ff1_b),
                (p("ff2.w"), &b.ff2_w),
                (p("ff2.b"), &b.ff2_b),
            ]);
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Weight)> {
        let mut out: Vec<(String, &mut Weight)> = vec![
            ("patch.w".into(), &mut self.patch_w),
            ("patch.b".into(), &mut self.patch_b),
            ("sigma.w".into(), &mut self.sigma_w),
            ("sigma.b".into(), &mut self.sigma_b),
            ("cond.w".into(), &mut self.cond_w),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("ln1.g"), &mut b.ln1_g),
                (p("ln1.b"), &mut b.ln1_b),
                (p("attn.qkv.w"), &mut b.attn.w_qkv),
                (p("attn.qkv.b"), &mut b.attn.b_qkv),
                (p("attn.out.w"), &mut b.attn.w_o),
                (p("attn.out.b"), &mut b.attn.b_o),
                (p("ln2.g"), &mut b.ln2_g),
                (p("ln2.b"), &mut b.ln2_b),
                (p("ff1.w"), &mut b.ff1_w),
                (p("ff1.b"), &mut b.ff1_b),
                (p("ff2.w"), &mut b.ff2_w),
                (p("ff2.b"), &mut b.ff2_b),
            ]);
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, w)| w.len()).sum()
    }

    /// Adds `scale * other` elementwise.
    pub fn add_scaled(&mut self, other: &DenoiserParams, scale: f64) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += scale * y);
        }
    }

    fn check_input(&self, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> Result<()> {
        let c = &self.config;
        let e = z.extent();
        if e.c != c.channels {
            return Err(Error::Shape(format!("model expects {} channels, got {e}", c.channels)));
        }
        if !e.h.is_multiple_of(c.patch) || !e.w.is_multiple_of(c.patch) {
            return Err(config(format!("spatial dims of {e} not divisible by patch {}", c.patch)));
        }
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} outside [0, 1]")));
        }
        if cond.len() != c.cond_dim {
            return Err(config(format!("conditioning length {} != {}", cond.len(), c.cond_dim)));
        }
        Ok(())
    }
}

/// Sinusoidal features of σ: `[cos(1000σ·f_j), sin(1000σ·f_j)]`, `f_j = 10000^{-j/(d/2)}`.
pub fn sigma_features(sigma: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let arg = |j: usize| 1000.0 * sigma * (-(10_000f64.ln()) * j as f64 / half as f64).exp();
    (0..half).map(|j| arg(j).cos()).chain((0..half).map(|j| arg(j).sin())).collect()
}

/// Fixed conditioning vector shared by all stages.
pub fn default_conditioning(len: usize) -> Conditioning {
    Conditioning((0..len).map(|i| ((i as f64 + 1.0) * 0.7).sin()).collect())
}

fn patchify(z: &LatentGrid, b: usize, p: usize) -> (usize, usize, usize, Vec<f64>) {
    let e = z.extent();
    let (th, tw) = (e.h / p, e.w / p);
    let pd = e.c * p * p;
    let mut out = vec![0.0; e.f * th * tw * pd];
    for c in 0..e.c {
        for f in 0..e.f {
            for y in 0..e.h {
                for x in 0..e.w {
                    let tok = (f * th + y / p) * tw + x / p;
                    let feat = (c * p + y % p) * p + x % p;
                    out[tok * pd + feat] = z.get(b, c, f, y, x);
                }
            }
        }
    }
    (e.f, th, tw, out)
}

/// Inverse of [`patchify`] for one batch item, writing into `out` at item `b`.
fn unpatchify_into(tokens: &[f64], e: Extent5, b: usize, p: usize, out: &mut [f64]) {
    let (th, tw) = (e.h / p, e.w / p);
    let pd = e.c * p * p;
    for c in 0..e.c {
        for f in 0..e.f {
            for y in 0..e.h {
                for x in 0..e.w {
                    let tok = (f * th + y / p) * tw + x / p;
                    let feat = (c * p + y % p) * p + x % p;
                    out[e.offset(b, c, f, y, x)] = tokens[tok * pd + feat];
                }
            }
        }
    }
}

struct ItemCache {
    field: (usize, usize, usize, usize),
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    last: Vec<f64>,
}

fn embedding(params: &DenoiserParams, sigma: f64, cond: &Conditioning) -> (Vec<f64>, Vec<f64>) {
    let d = params.config.dim;
    let feats = sigma_features(sigma, d);
    let mut emb = linear(&feats, &params.sigma_w, &params.sigma_b, 1);
    let c = matmul(&cond.0, &params.cond_w.data, 1, params.config.cond_dim, d);
    emb.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
    (feats, emb)
}

fn forward_item(
    params: &DenoiserParams,
    z: &LatentGrid,
    b: usize,
    emb: &[f64],
    exec: Exec,
) -> Result<(Vec<f64>, ItemCache)> {
    let cfg = &params.config;
    let d = cfg.dim;
    let (t, th, tw, patches) = patchify(z, b, cfg.patch);
    let n = t * th * tw;
    let mut x = linear(&patches, &params.patch_w, &params.patch_b, n);
    for row in x.chunks_exact_mut(d) {
        row.iter_mut().zip(emb).for_each(|(a, e)| *a += e);
    }
    let spec = WindowSpec::new(cfg.window)?;
    let rope = cfg.rope();
    let mut field = TokenField::new(t, th, tw, d, x)?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for (i, blk) in params.blocks.iter().enumerate() {
        let (y, cache) = block_forward(&field, blk, spec, i % 2 == 1, &rope, exec)?;
        caches.push(cache);
        field = y;
    }
    let out = linear(&field.data, &params.head_w, &params.head_b, n);
    Ok((out, ItemCache { field: (t, th, tw, d), patches, blocks: caches, last: field.data }))
}

/// Predicted velocity for every batch item.
pub fn forward_velocity(params: &DenoiserParams, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> Result<LatentGrid> {
    forward_velocity_with(params, z, sigma, cond, Exec::default())
}

pub fn forward_velocity_with(
    params: &DenoiserParams,
    z: &LatentGrid,
    sigma: f64,
    cond: &Conditioning,
    exec: Exec,
) -> Result<LatentGrid> {
    params.check_input(z, sigma, cond)?;
    let e = z.extent();
    let (_, emb) = embedding(params, sigma, cond);
    let items = exec.map(e.b, |b| forward_item(params, z, b, &emb, Exec::Sequential).map(|(o, _)| o));
    let mut out = vec![0.0; e.len()];
    for (b, item) in items.into_iter().enumerate() {
        unpatchify_into(&item?, e, b, params.config.patch, &mut out);
    }
    Ok(LatentGrid::from_parts(e, out))
}

/// Exact parameter gradients of `Σ upstream ⊙ forward_velocity(params, z, σ, cond)`.
pub fn backward(
    params: &DenoiserParams,
    z: &LatentGrid,
    sigma: f64,
    cond: &Conditioning,
    upstream: &LatentGrid,
) -> Result<DenoiserParams> {
    backward_with(params, z, sigma, cond, upstream, Exec::default())
}

pub fn backward_with(
    params: &DenoiserParams,
    z: &LatentGrid,
    sigma: f64,
    cond: &Conditioning,
    upstream: &LatentGrid,
    exec: Exec,
) -> Result<DenoiserParams> {
    params.check_input(z, sigma, cond)?;
    if upstream.extent() != z.extent() {
        return Err(Error::Shape(format!("upstream {} vs input {}", upstream.extent(), z.extent())));
    }
    let e = z.extent();
    let (feats, emb) = embedding(params, sigma, cond);
    let per_item = exec.map(e.b, |b| -> Result<(DenoiserParams, Vec<f64>)> {
        let (_, cache) = forward_item(params, z, b, &emb, Exec::Sequential)?;
        let (_, _, _, dup) = patchify(upstream, b, params.config.patch);
        Ok(item_backward(params, &cache, &dup))
    });
    let mut grads = params.zeros_like();
    let mut demb = vec![0.0; params.config.dim];
    for item in per_item {
        let (g, de) = item?;
        grads.add_scaled(&g, 1.0);
        demb.iter_mut().zip(&de).for_each(|(a, b)| *a += b);
    }
    let d = params.config.dim;
    linear_backward(&feats, &demb, &params.sigma_w, &mut grads.sigma_w, &mut grads.sigma_b, 1);
    for (i, &c) in cond.0.iter().enumerate() {
        for j in 0..d {
            grads.cond_w.data[i * d + j] += c * demb[j];
        }
    }
    Ok(grads)
}

/// Backward through one item; returns grads and the embedding gradient.
fn item_backward(params: &DenoiserParams, cache: &ItemCache, dout: &[f64]) -> (DenoiserParams, Vec<f64>) {
    let mut g = params.zeros_like();
    let (t, h, w, d) = cache.field;
    let n = t * h * w;
    let mut dx = linear_backward(&cache.last, dout, &params.head_w, &mut g.head_w, &mut g.head_b, n);
    let rope = params.config.rope();
    for (i, blk) in params.blocks.iter().enumerate().rev() {
        dx = block_backward(&cache.blocks[i], &dx, cache.field, blk, &rope, &mut g.blocks[i], Exec::Sequential);
    }
    let mut demb = vec![0.0; d];
    for row in dx.chunks_exact(d) {
        demb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    linear_backward(&cache.patches, &dx, &params.patch_w, &mut g.patch_w, &mut g.patch_b, n);
    (g, demb)
}

impl VelocityModel for DenoiserParams {
    fn evaluate(&self, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> Result<LatentGrid> {
        forward_velocity(self, z, sigma, cond)
    }
}

/// Loss and gradients for one flow-mapping training example:
/// `z_t = (1 − t)·z_hr + t·z_lr`, target `u* = z_lr − z_hr`.
pub fn refiner_loss(
    params: &DenoiserParams,
    z_lr: &LatentGrid,
    z_hr: &LatentGrid,
    t: f64,
    cond: &Conditioning,
) -> Result<(f64, DenoiserParams)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("t = {t} outside (0, 1)")));
    }
    let (z_t, target) = flow_pair(z_lr, z_hr, t)?;
    velocity_loss(params, &z_t, t, &target, cond, Exec::default())
}

/// `(z_t, u*)` on the straight path from `end` (t = 1) to `start` (t = 0).
pub fn flow_pair(end: &LatentGrid, start: &LatentGrid, t: f64) -> Result<(LatentGrid, LatentGrid)> {
    let z_t = crate::latent::axpy(t, end, &start.scale(1.0 - t))?;
    let target = end.sub(start)?;
    Ok((z_t, target))
}

/// MSE between predicted and target velocity, with its parameter gradients.
pub fn velocity_loss(
    params: &DenoiserParams,
    z: &LatentGrid,
    sigma: f64,
    target: &LatentGrid,
    cond: &Conditioning,
    exec: Exec,
) -> Result<(f64, DenoiserParams)> {
    let pred = forward_velocity_with(params, z, sigma, cond, exec)?;
    let loss = crate::latent::mse(&pred, target)?;
    let scale = 2.0 / pred.values().len() as f64;
    let upstream = LatentGrid::from_parts(
        pred.extent(),
        pred.values().iter().zip(target.values()).map(|(p, t)| scale * (p - t)).collect(),
    );
    let grads = backward_with(params, z, sigma, cond, &upstream, exec)?;
    Ok((loss, grads))
}

/// Upsamples the preview and integrates the refiner ODE from t = 1 to 0 with
/// `n_steps` uniform steps (exactly `n_steps` model evaluations).
pub fn refine<M: VelocityModel + ?Sized>(
    model: &M,
    preview_lo: &LatentGrid,
    target_hw: (usize, usize),
    n_steps: usize,
    cond: &Conditioning,
) -> Result<LatentGrid> {
    let sched = SigmaSchedule::linear(n_steps)?;
    let mut z = resize_spatial(preview_lo, target_hw.0, target_hw.1)?;
    for i in 0..n_steps {
        let (cur, next) = (sched.sigma(i), sched.sigma(i + 1));
        let u = eval_checked(model, &z, cur, cond)?;
        z = euler_step(&z, &u, cur, next)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::sample_gaussian;
    use crate::schedule::estimate_clean;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig { channels: 2, patch: 2, dim: 12, heads: 2, depth: 2, window: 2, cond_dim: 3, ff_mult: 4, rope_base: 10_000.0 }
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::base(4).validate().is_ok());
        assert!(DenoiserConfig::refiner(4).validate().is_ok());
        assert!(DenoiserConfig { depth: 3, ..tiny() }.validate().is_err());
        assert!(DenoiserConfig { dim: 16, ..tiny() }.validate().is_err());
        assert!(DenoiserConfig { heads: 4, ..tiny() }.validate().is_err());
        assert!(DenoiserConfig { window: 3, ..tiny() }.validate().is_err());
    }

    #[test]
    fn extent_contract_and_resolution_agnostic() {
        let params = DenoiserParams::init(tiny(), &mut Rng::new(1)).unwrap();
        let cond = Conditioning(vec![0.1, -0.2, 0.3]);
        for (h, w) in [(4, 4), (8, 6), (16, 16), (32, 32)] {
            let z = sample_gaussian(Extent5::new(2, 2, 3, h, w).unwrap(), &mut Rng::new(2));
            let u = forward_velocity(&params, &z, 0.4, &cond).unwrap();
            assert_eq!(u.extent(), z.extent());
            assert!(u.is_finite());
        }
        let odd = LatentGrid::zeros(Extent5::new(1, 2, 3, 5, 4).unwrap());
        assert!(matches!(forward_velocity(&params, &odd, 0.4, &cond), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let mut params = DenoiserParams::init(tiny(), &mut Rng::new(1)).unwrap();
        params.head_w = Weight::zeros(&params.head_w.shape);
        params.head_b = Weight::zeros(&params.head_b.shape);
        let z = sample_gaussian(Extent5::new(1, 2, 3, 4, 4).unwrap(), &mut Rng::new(2));
        let u = forward_velocity(&params, &z, 0.5, &Conditioning(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_roundtrip() {
        let z = sample_gaussian(Extent5::new(2, 3, 2, 4, 6).unwrap(), &mut Rng::new(4));
        let mut out = vec![0.0; z.values().len()];
        for b in 0..2 {
            let (_, _, _, toks) = patchify(&z, b, 2);
            unpatchify_into(&toks, z.extent(), b, 2, &mut out);
        }
        assert_eq!(out, z.values());
    }

    #[test]
    fn zero_upstream_and_dead_cond_branch() {
        let params = DenoiserParams::init(tiny(), &mut Rng::new(5)).unwrap();
        let z = sample_gaussian(Extent5::new(1, 2, 4, 4, 4).unwrap(), &mut Rng::new(6));
        let zero_cond = Conditioning::zeros(3);
        let g = backward(&params, &z, 0.3, &zero_cond, &LatentGrid::zeros(z.extent())).unwrap();
        assert!(g.named().iter().all(|(_, w)| w.data.iter().all(|&v| v == 0.0)));
        let up = sample_gaussian(z.extent(), &mut Rng::new(7));
        let g = backward(&params, &z, 0.3, &zero_cond, &up).unwrap();
        assert!(g.cond_w.data.iter().all(|&v| v == 0.0));
        assert!(g.patch_w.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = DenoiserParams::init(DenoiserConfig { depth: 2, ..tiny() }, &mut Rng::new(8)).unwrap();
        let z = sample_gaussian(Extent5::new(2, 2, 4, 4, 4).unwrap(), &mut Rng::new(9));
        let up = sample_gaussian(z.extent(), &mut Rng::new(10));
        let cond = Conditioning(vec![0.5, -0.4, 0.9]);
        let sigma = 0.37;
        let grads = backward(&params, &z, sigma, &cond, &up).unwrap();
        let loss = |p: &DenoiserParams| -> f64 {
            let u = forward_velocity(p, &z, sigma, &cond).unwrap();
            u.values().iter().zip(up.values()).map(|(a, b)| a * b).sum()
        };
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let mut rng = Rng::new(11);
        let mut worst: f64 = 0.0;
        for (k, name) in names.iter().enumerate() {
            let len = params.named()[k].1.len();
            for _ in 0..3 {
                let i = rng.below(len);
                let mut plus = params.clone();
                plus.named_mut()[k].1.data[i] += 1e-5;
                let mut minus = params.clone();
                minus.named_mut()[k].1.data[i] -= 1e-5;
                let num = (loss(&plus) - loss(&minus)) / 2e-5;
                let ana = grads.named()[k].1.data[i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{name}[{i}]: analytic {ana} numeric {num}");
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4);
    }

    #[test]
    fn flow_pair_recovers_target() {
        let mut rng = Rng::new(12);
        let e = Extent5::new(1, 2, 3, 4, 4).unwrap();
        let (lr, hr) = (sample_gaussian(e, &mut rng), sample_gaussian(e, &mut rng));
        for t in [0.1, 0.5, 0.93] {
            let (zt, u) = flow_pair(&lr, &hr, t).unwrap();
            let rec = estimate_clean(&zt, &u, t).unwrap();
            for (a, b) in rec.values().iter().zip(hr.values()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn refiner_loss_cases() {
        let mut params = DenoiserParams::init(tiny(), &mut Rng::new(13)).unwrap();
        let e = Extent5::new(1, 2, 2, 4, 4).unwrap();
        let z = sample_gaussian(e, &mut Rng::new(14));
        let cond = Conditioning::zeros(3);
        assert!(refiner_loss(&params, &z, &z, 0.0, &cond).is_err());
        assert!(refiner_loss(&params, &z, &z, 1.0, &cond).is_err());
        params.head_w = Weight::zeros(&params.head_w.shape);
        let (loss, _) = refiner_loss(&params, &z, &z, 0.5, &cond).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn refine_with_exact_velocity_and_zero_model() {
        struct Const(LatentGrid);
        impl VelocityModel for Const {
            fn evaluate(&self, _: &LatentGrid, _: f64, _: &Conditioning) -> Result<LatentGrid> {
                Ok(self.0.clone())
            }
        }
        struct Zero;
        impl VelocityModel for Zero {
            fn evaluate(&self, z: &LatentGrid, _: f64, _: &Conditioning) -> Result<LatentGrid> {
                Ok(LatentGrid::zeros(z.extent()))
            }
        }
        let mut rng = Rng::new(15);
        let lo = sample_gaussian(Extent5::new(1, 4, 3, 4, 4).unwrap(), &mut rng);
        let z_lr = resize_spatial(&lo, 8, 8).unwrap();
        let z_hr = sample_gaussian(z_lr.extent(), &mut rng);
        let model = Const(z_lr.sub(&z_hr).unwrap());
        let cond = Conditioning::zeros(0);
        for n in [1, 3, 10] {
            let out = refine(&model, &lo, (8, 8), n, &cond).unwrap();
            for (a, b) in out.values().iter().zip(z_hr.values()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
        assert_eq!(refine(&Zero, &lo, (8, 8), 4, &cond).unwrap(), z_lr);
        assert!(refine(&Zero, &lo, (8, 8), 0, &cond).is_err());
    }
}

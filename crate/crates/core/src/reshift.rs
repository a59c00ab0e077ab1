//! Preview stage: denoise at the model's native resolution up to a turning
//! step, estimate the clean latent, downscale it, re-inject noise at the same
//! level and finish the remaining steps at low resolution.

use crate::error::{config, invalid, Result};
use crate::latent::{axpy, resize_spatial, Extent5, LatentGrid, NoiseSource, Rng};
use crate::schedule::{estimate_clean, eval_checked, integrate_range, Conditioning, SigmaSchedule, VelocityModel};

#[derive(Debug, Clone, PartialEq)]
pub struct PreviewConfig {
    pub n_total: usize,
    /// Turning-point step, `1 <= k < n_total`.
    pub k: usize,
    pub hi: (usize, usize),
    pub lo: (usize, usize),
    pub shift: f64,
    pub seed: u64,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        PreviewConfig { n_total: 40, k: 10, hi: (8, 8), lo: (4, 4), shift: 5.0, seed: 0 }
    }
}

impl PreviewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k >= self.n_total {
            return Err(config(format!("turning step k={} must lie in 1..{}", self.k, self.n_total)));
        }
        let (h, w) = self.hi;
        let (hl, wl) = self.lo;
        if hl == 0 || wl == 0 || hl > h || wl > w {
            return Err(config(format!("preview resolution {hl}x{wl} must be within 1x1..={h}x{w}")));
        }
        if !(self.shift >= 1.0) {
            return Err(config(format!("shift {} < 1", self.shift)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<SigmaSchedule> {
        SigmaSchedule::new(self.n_total, self.shift)
    }
}

/// Result of one preview run with its evaluation accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct PreviewOutput {
    pub latent: LatentGrid,
    pub hi_extent: Extent5,
    /// Model evaluations at full resolution (`k` steps plus the clean estimate).
    pub nfe_hi: usize,
    /// Model evaluations at preview resolution.
    pub nfe_lo: usize,
    /// Noise level at which the resolution switch happens.
    pub sigma_switch: f64,
}

impl PreviewOutput {
    /// (hi, lo) token-steps for a patchified model with spatial patch `p`.
    pub fn token_steps(&self, patch: usize) -> (u64, u64) {
        let tokens = |e: Extent5| (e.b * e.f * (e.h / patch) * (e.w / patch)) as u64;
        (self.nfe_hi as u64 * tokens(self.hi_extent), self.nfe_lo as u64 * tokens(self.latent.extent()))
    }
}

/// `ẑ₀↓ + σ_k·ε̃` with `ε̃` drawn at `clean_lo`'s extent.
pub fn reshift_noise(clean_lo: &LatentGrid, sigma_k: f64, noise: &mut dyn NoiseSource) -> Result<LatentGrid> {
    if !(sigma_k > 0.0 && sigma_k <= 1.0) {
        return Err(invalid(format!("reshift level {sigma_k} outside (0, 1]")));
    }
    if !clean_lo.is_finite() {
        return Err(invalid("clean latent is not finite"));
    }
    let eps = noise.gaussian(clean_lo.extent());
    axpy(sigma_k, &eps, clean_lo)
}

/// Full preview run: `z₁` is drawn from `Rng::new(cfg.seed)` at the template's
/// `(b, c, f)` and `cfg.hi`, and the same stream supplies the reshift noise.
pub fn generate_preview<M: VelocityModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    cfg: &PreviewConfig,
    template: Extent5,
) -> Result<PreviewOutput> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let z1 = rng.gaussian(template.with_spatial(cfg.hi.0, cfg.hi.1));
    generate_preview_from(model, cond, cfg, z1, &mut rng)
}

/// Preview run from an explicit initial latent and noise source.
pub fn generate_preview_from<M: VelocityModel + ?Sized>(
    model: &M,
    cond: &Conditioning,
    cfg: &PreviewConfig,
    z1: LatentGrid,
    noise: &mut dyn NoiseSource,
) -> Result<PreviewOutput> {
    cfg.validate()?;
    let hi_extent = z1.extent();
    if (hi_extent.h, hi_extent.w) != cfg.hi {
        return Err(config(format!("initial latent {hi_extent} does not match hi resolution {:?}", cfg.hi)));
    }
    let sched = cfg.schedule()?;
    let k = cfg.k;
    let z_k = integrate_range(model, z1, &sched, 0, k, cond)?;
    let sigma_k = sched.sigma(k);
    let u_k = eval_checked(model, &z_k, sigma_k, cond)?;
    let clean = estimate_clean(&z_k, &u_k, sigma_k)?;
    let clean_lo = resize_spatial(&clean, cfg.lo.0, cfg.lo.1)?;
    let z = reshift_noise(&clean_lo, sigma_k, noise)?;
    // resume at σ_k on the same schedule tail
    let latent = integrate_range(model, z, &sched, k, cfg.n_total, cond)?;
    Ok(PreviewOutput { latent, hi_extent, nfe_hi: k + 1, nfe_lo: cfg.n_total - k, sigma_switch: sigma_k })
}

//! Synthetic low/high-quality latent pairs for refiner training.
//!
//! The pixel path blurs, box-downsamples and bilinearly upsamples the clip
//! before encoding; the latent path then adds Gaussian noise so the refiner
//! cannot treat the task as pure deblurring.

use crate::codec::ToyCodec;
use crate::error::{config, Result};
use crate::latent::{axpy, resize_spatial, sample_gaussian, LatentGrid, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationConfig {
    pub blur_radius: usize,
    /// Gaussian blur standard deviation in pixels; `0` disables blurring.
    pub blur_sigma: f64,
    /// Pixel down/up factor; `1` disables resampling.
    pub down_factor: usize,
    /// Standard deviation of the additive latent noise.
    pub latent_noise: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig { blur_radius: 2, blur_sigma: 1.0, down_factor: 2, latent_noise: 0.02, seed: 0 }
    }
}

impl DegradationConfig {
    pub fn identity() -> Self {
        DegradationConfig { blur_radius: 0, blur_sigma: 0.0, down_factor: 1, latent_noise: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0) || !(self.latent_noise >= 0.0) || self.down_factor == 0 {
            return Err(config("degradation scales must be >= 0 and factor >= 1"));
        }
        Ok(())
    }
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur per frame, edges clamped.
pub fn blur(x: &LatentGrid, radius: usize, sigma: f64) -> LatentGrid {
    if radius == 0 || sigma == 0.0 {
        return x.clone();
    }
    let e = x.extent();
    let k = gaussian_kernel(radius, sigma);
    let r = radius as isize;
    let (h, w) = (e.h as isize, e.w as isize);
    let mut out = Vec::with_capacity(e.len());
    let mut tmp = vec![0.0; e.h * e.w];
    for plane in x.values().chunks_exact(e.h * e.w) {
        for y in 0..h {
            for xx in 0..w {
                tmp[(y * w + xx) as usize] = (-r..=r)
                    .map(|o| k[(o + r) as usize] * plane[(y * w + (xx + o).clamp(0, w - 1)) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for xx in 0..w {
                out.push(
                    (-r..=r)
                        .map(|o| k[(o + r) as usize] * tmp[((y + o).clamp(0, h - 1) * w + xx) as usize])
                        .sum(),
                );
            }
        }
    }
    LatentGrid::from_parts(e, out)
}

/// Box-average downsampling by an integer factor.
pub fn box_down(x: &LatentGrid, factor: usize) -> Result<LatentGrid> {
    let e = x.extent();
    if !e.h.is_multiple_of(factor) || !e.w.is_multiple_of(factor) {
        return Err(config(format!("spatial dims of {e} not divisible by {factor}")));
    }
    let (ho, wo) = (e.h / factor, e.w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Vec::with_capacity(e.len() / (factor * factor));
    for plane in x.values().chunks_exact(e.h * e.w) {
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += plane[(y * factor + dy) * e.w + xx * factor + dx];
                    }
                }
                out.push(s * norm);
            }
        }
    }
    Ok(LatentGrid::from_parts(e.with_spatial(ho, wo), out))
}

/// `(z_lr, z_hr)` for a pixel clip using the config's own seed.
pub fn degrade_pair(hr_pixels: &LatentGrid, codec: &ToyCodec, cfg: &DegradationConfig) -> Result<(LatentGrid, LatentGrid)> {
    degrade_pair_with(hr_pixels, codec, cfg, &mut Rng::new(cfg.seed))
}

pub fn degrade_pair_with(
    hr_pixels: &LatentGrid,
    codec: &ToyCodec,
    cfg: &DegradationConfig,
    rng: &mut Rng,
) -> Result<(LatentGrid, LatentGrid)> {
    cfg.validate()?;
    let e = hr_pixels.extent();
    if !e.h.is_multiple_of(2 * cfg.down_factor) || !e.w.is_multiple_of(2 * cfg.down_factor) {
        return Err(config(format!("pixel dims of {e} must be divisible by 2 x factor {}", cfg.down_factor)));
    }
    let z_hr = codec.encode(hr_pixels)?;
    let mut px = blur(hr_pixels, cfg.blur_radius, cfg.blur_sigma);
    if cfg.down_factor > 1 {
        px = resize_spatial(&box_down(&px, cfg.down_factor)?, e.h, e.w)?;
    }
    let mut z_lr = codec.encode(&px)?;
    if cfg.latent_noise > 0.0 {
        let n = sample_gaussian(z_lr.extent(), rng);
        z_lr = axpy(cfg.latent_noise, &n, &z_lr)?;
    }
    Ok((z_lr, z_hr))
}

/// Variance of the 5-point Laplacian response over interior latent samples.
pub fn laplacian_energy(z: &LatentGrid) -> f64 {
    let e = z.extent();
    let mut vals = Vec::new();
    for plane in z.values().chunks_exact(e.h * e.w) {
        for y in 1..e.h.saturating_sub(1) {
            for x in 1..e.w.saturating_sub(1) {
                let c = plane[y * e.w + x];
                let lap = plane[(y - 1) * e.w + x] + plane[(y + 1) * e.w + x] + plane[y * e.w + x - 1]
                    + plane[y * e.w + x + 1]
                    - 4.0 * c;
                vals.push(lap);
            }
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

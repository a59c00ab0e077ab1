//! Procedural pixel-space training clips.

use crate::latent::{Extent5, LatentGrid, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    BouncingRect,
    MovingGaussian,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bouncing_rect" => Ok(SynthKind::BouncingRect),
            "moving_gaussian" => Ok(SynthKind::MovingGaussian),
            other => Err(format!("unknown synth kind {other:?}")),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::BouncingRect => "bouncing_rect",
            SynthKind::MovingGaussian => "moving_gaussian",
        })
    }
}

/// Motion and appearance of one clip. Positions are in pixels; for the
/// rectangle `pos` is its top-left corner, for the blob its centre.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub kind: SynthKind,
    pub pos: (f64, f64),
    pub vel: (f64, f64),
    /// Rectangle side length or blob standard deviation.
    pub size: f64,
    pub background: f64,
    pub foreground: f64,
    /// Per-channel multiplier on the foreground contrast.
    pub channel_gain: Vec<f64>,
}

impl SynthParams {
    pub fn random(kind: SynthKind, extent: Extent5, rng: &mut Rng) -> Self {
        let (h, w) = (extent.h as f64, extent.w as f64);
        let size = match kind {
            SynthKind::BouncingRect => (0.25 + 0.2 * rng.uniform()) * h.min(w),
            SynthKind::MovingGaussian => (0.08 + 0.08 * rng.uniform()) * h.min(w),
        };
        let span = |len: f64| match kind {
            SynthKind::BouncingRect => len - size,
            SynthKind::MovingGaussian => len - 1.0,
        };
        let pos = (rng.uniform() * span(h), rng.uniform() * span(w));
        let speed = 0.5 + 1.5 * rng.uniform();
        let angle = std::f64::consts::TAU * rng.uniform();
        let background = 0.05 + 0.2 * rng.uniform();
        let foreground = 0.7 + 0.25 * rng.uniform();
        let channel_gain = (0..extent.c).map(|_| 0.6 + 0.4 * rng.uniform()).collect();
        SynthParams {
            kind,
            pos,
            vel: (speed * angle.sin(), speed * angle.cos()),
            size,
            background,
            foreground,
            channel_gain,
        }
    }
}

/// Folds `x` into `[0, len]` as an elastic bounce between the two walls.
fn bounce(x: f64, len: f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    let m = x.rem_euclid(2.0 * len);
    if m > len {
        2.0 * len - m
    } else {
        m
    }
}

/// Overlap of pixel `[j, j+1)` with `[a, a + s)`.
fn coverage(j: usize, a: f64, s: f64) -> f64 {
    let lo = (j as f64).max(a);
    let hi = (j as f64 + 1.0).min(a + s);
    (hi - lo).max(0.0)
}

/// Renders one clip (batch 1) with exact area-coverage anti-aliasing for the
/// rectangle and pixel-centre sampling for the blob. Values lie in `[0, 1]`.
pub fn render(params: &SynthParams, extent: Extent5) -> LatentGrid {
    let e = Extent5 { b: 1, ..extent };
    let (h, w) = (e.h as f64, e.w as f64);
    let mut out = vec![0.0; e.len()];
    let mut plane = vec![0.0; e.h * e.w];
    for f in 0..e.f {
        let t = f as f64;
        match params.kind {
            SynthKind::BouncingRect => {
                let y0 = bounce(params.pos.0 + params.vel.0 * t, h - params.size);
                let x0 = bounce(params.pos.1 + params.vel.1 * t, w - params.size);
                for y in 0..e.h {
                    let cy = coverage(y, y0, params.size);
                    for x in 0..e.w {
                        plane[y * e.w + x] = cy * coverage(x, x0, params.size);
                    }
                }
            }
            SynthKind::MovingGaussian => {
                let cy = bounce(params.pos.0 + params.vel.0 * t, h - 1.0) + 0.5;
                let cx = bounce(params.pos.1 + params.vel.1 * t, w - 1.0) + 0.5;
                let inv = 1.0 / (2.0 * params.size * params.size);
                for y in 0..e.h {
                    for x in 0..e.w {
                        let dy = y as f64 + 0.5 - cy;
                        let dx = x as f64 + 0.5 - cx;
                        plane[y * e.w + x] = (-(dy * dy + dx * dx) * inv).exp();
                    }
                }
            }
        }
        for c in 0..e.c {
            let gain = params.channel_gain.get(c).copied().unwrap_or(1.0);
            let contrast = (params.foreground - params.background) * gain;
            for (i, &p) in plane.iter().enumerate() {
                out[e.offset(0, c, f, 0, 0) + i] = (params.background + contrast * p).clamp(0.0, 1.0);
            }
        }
    }
    LatentGrid::from_parts(e, out)
}

/// Deterministic clip(s): one random parameter draw per batch item.
pub fn synth_video(kind: SynthKind, extent: Extent5, rng: &mut Rng) -> LatentGrid {
    let items: Vec<LatentGrid> = (0..extent.b)
        .map(|_| render(&SynthParams::random(kind, extent, rng), extent))
        .collect();
    LatentGrid::stack(&items).expect("uniform item extents")
}

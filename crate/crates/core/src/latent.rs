//! Dense 5-axis latent tensors, resampling and the counter-based RNG.

use crate::error::{invalid, Error, Result};

/// Axis lengths of a latent grid in (batch, channel, frame, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent5 {
    pub b: usize,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl Extent5 {
    pub fn new(b: usize, c: usize, f: usize, h: usize, w: usize) -> Result<Self> {
        let e = Extent5 { b, c, f, h, w };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.b, self.c, self.f, self.h, self.w].contains(&0) {
            return Err(invalid(format!("extent {self} has a zero axis")));
        }
        self.checked_len()
            .map(|_| ())
            .ok_or_else(|| invalid(format!("extent {self} overflows addressing")))
    }

    fn checked_len(&self) -> Option<usize> {
        self.b
            .checked_mul(self.c)?
            .checked_mul(self.f)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.f * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_spatial(&self, h: usize, w: usize) -> Self {
        Extent5 { h, w, ..*self }
    }

    pub fn with_frames(&self, f: usize) -> Self {
        Extent5 { f, ..*self }
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Extent5 { c, ..*self }
    }

    pub fn as_array(&self) -> [usize; 5] {
        [self.b, self.c, self.f, self.h, self.w]
    }

    /// Flat offset of element (b, c, f, h, w).
    #[inline]
    pub fn offset(&self, b: usize, c: usize, f: usize, h: usize, w: usize) -> usize {
        (((b * self.c + c) * self.f + f) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Extent5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}x{}", self.b, self.c, self.f, self.h, self.w)
    }
}

/// Row-major (b, c, f, h, w) tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    extent: Extent5,
    values: Vec<f64>,
}

impl LatentGrid {
    pub fn from_vec(extent: Extent5, values: Vec<f64>) -> Result<Self> {
        extent.validate()?;
        if values.len() != extent.len() {
            return Err(Error::Shape(format!(
                "extent {extent} needs {} values, got {}",
                extent.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(LatentGrid { extent, values })
    }

    /// Builds a grid without re-validating; callers guarantee the invariants.
    pub(crate) fn from_parts(extent: Extent5, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), extent.len());
        LatentGrid { extent, values }
    }

    pub fn zeros(extent: Extent5) -> Self {
        LatentGrid { extent, values: vec![0.0; extent.len()] }
    }

    pub fn filled(extent: Extent5, value: f64) -> Self {
        LatentGrid { extent, values: vec![value; extent.len()] }
    }

    pub fn extent(&self) -> Extent5 {
        self.extent
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, b: usize, c: usize, f: usize, h: usize, w: usize) -> f64 {
        self.values[self.extent.offset(b, c, f, h, w)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, alpha: f64) -> LatentGrid {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        LatentGrid::from_parts(self.extent, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        axpy(-1.0, other, self)
    }

    /// Copies frames `start..start + len` of every (batch, channel) plane.
    pub fn frames(&self, start: usize, len: usize) -> Result<LatentGrid> {
        let e = self.extent;
        if len == 0 || start + len > e.f {
            return Err(invalid(format!("frame range {start}..{} outside {} frames", start + len, e.f)));
        }
        let plane = e.h * e.w;
        let out_e = e.with_frames(len);
        let mut out = Vec::with_capacity(out_e.len());
        for b in 0..e.b {
            for c in 0..e.c {
                let base = e.offset(b, c, start, 0, 0);
                out.extend_from_slice(&self.values[base..base + len * plane]);
            }
        }
        Ok(LatentGrid::from_parts(out_e, out))
    }

    /// Extracts one batch item as a batch-1 grid.
    pub fn batch_item(&self, b: usize) -> LatentGrid {
        let e = self.extent;
        let per = e.len() / e.b;
        LatentGrid::from_parts(Extent5 { b: 1, ..e }, self.values[b * per..(b + 1) * per].to_vec())
    }

    /// Stacks batch-1 (or larger) grids of equal per-item extent along the batch axis.
    pub fn stack(items: &[LatentGrid]) -> Result<LatentGrid> {
        let first = items.first().ok_or_else(|| invalid("cannot stack zero grids"))?.extent;
        let mut total_b = 0;
        let mut values = Vec::new();
        for g in items {
            let e = g.extent;
            if (e.c, e.f, e.h, e.w) != (first.c, first.f, first.h, first.w) {
                return Err(Error::Shape(format!("cannot stack {e} with {first}")));
            }
            total_b += e.b;
            values.extend_from_slice(&g.values);
        }
        Ok(LatentGrid::from_parts(Extent5 { b: total_b, ..first }, values))
    }
}

fn same_extent(a: &LatentGrid, b: &LatentGrid) -> Result<()> {
    if a.extent != b.extent {
        return Err(Error::Shape(format!("{} vs {}", a.extent, b.extent)));
    }
    Ok(())
}

/// Returns `alpha * x + y`.
pub fn axpy(alpha: f64, x: &LatentGrid, y: &LatentGrid) -> Result<LatentGrid> {
    same_extent(x, y)?;
    let values = x.values.iter().zip(&y.values).map(|(&a, &b)| alpha * a + b).collect();
    Ok(LatentGrid::from_parts(x.extent, values))
}

/// Mean squared elementwise difference.
pub fn mse(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    same_extent(a, b)?;
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.values.len() as f64)
}

/// Align-corners sample positions for resampling `n_in` samples onto `n_out`.
///
/// A single output sample sits at the input centre.
fn sample_coords(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let pos = if n_out == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear, align-corners, edge-clamped spatial resampling. Frames are untouched.
pub fn resize_spatial(z: &LatentGrid, h_out: usize, w_out: usize) -> Result<LatentGrid> {
    if h_out == 0 || w_out == 0 {
        return Err(invalid(format!("resize target {h_out}x{w_out} has a zero axis")));
    }
    let e = z.extent;
    if e.h == h_out && e.w == w_out {
        return Ok(z.clone());
    }
    let ys = sample_coords(e.h, h_out);
    let xs = sample_coords(e.w, w_out);
    let out_e = e.with_spatial(h_out, w_out);
    let mut out = Vec::with_capacity(out_e.len());
    for plane in z.values.chunks_exact(e.h * e.w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * e.w + x0] * (1.0 - fx) + plane[y0 * e.w + x1] * fx;
                let bot = plane[y1 * e.w + x0] * (1.0 - fx) + plane[y1 * e.w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(LatentGrid::from_parts(out_e, out))
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 stream.
///
/// Draw `i` is `mix64(seed + (i + 1) * GOLDEN)`, so any draw can be computed
/// without the ones before it and parallel fills cannot reorder the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream keyed by `(seed, stream)`; does not advance `self`.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN))))
    }

    #[inline]
    fn draw_at(&self, index: u64) -> u64 {
        mix64(self.seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.draw_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        to_open_unit(self.next_u64())
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        let (z, _) = box_muller(self.uniform(), self.uniform());
        z
    }
}

#[inline]
fn to_open_unit(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let a = std::f64::consts::TAU * u2;
    (r * a.cos(), r * a.sin())
}

/// Source of standard-normal grids; [`Rng`] is the production implementation.
pub trait NoiseSource {
    fn gaussian(&mut self, extent: Extent5) -> LatentGrid;
}

impl NoiseSource for Rng {
    fn gaussian(&mut self, extent: Extent5) -> LatentGrid {
        sample_gaussian(extent, self)
    }
}

/// I.i.d. standard normals via Box–Muller: element pair `(2j, 2j+1)` uses
/// draws `2j` and `2j+1` past the current counter.
pub fn sample_gaussian(extent: Extent5, rng: &mut Rng) -> LatentGrid {
    let n = extent.len();
    let pairs = n.div_ceil(2) as u64;
    let base = rng.counter;
    let mut values = Vec::with_capacity(n + 1);
    for j in 0..pairs {
        let u1 = to_open_unit(rng.draw_at(base + 2 * j));
        let u2 = to_open_unit(rng.draw_at(base + 2 * j + 1));
        let (a, b) = box_muller(u1, u2);
        values.push(a);
        values.push(b);
    }
    values.truncate(n);
    rng.counter = base + 2 * pairs;
    LatentGrid::from_parts(extent, values)
}

/// Summary statistics of a value slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub nan: usize,
}

/// Streaming accumulator (Welford) used for [`Stats`].
#[derive(Debug, Clone, Copy)]
pub struct StatsAcc {
    count: usize,
    nan: usize,
    min: f64,
    max: f64,
    mean: f64,
    m2: f64,
}

impl Default for StatsAcc {
    fn default() -> Self {
        StatsAcc { count: 0, nan: 0, min: f64::INFINITY, max: f64::NEG_INFINITY, mean: 0.0, m2: 0.0 }
    }
}

impl StatsAcc {
    pub fn push(&mut self, v: f64) {
        if v.is_nan() {
            self.nan += 1;
            return;
        }
        self.count += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn finish(&self) -> Stats {
        let std = if self.count > 0 { (self.m2 / self.count as f64).sqrt() } else { 0.0 };
        Stats { count: self.count, min: self.min, max: self.max, mean: self.mean, std, nan: self.nan }
    }
}

impl LatentGrid {
    pub fn stats(&self) -> Stats {
        let mut acc = StatsAcc::default();
        self.values.iter().for_each(|&v| acc.push(v));
        acc.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ext(b: usize, c: usize, f: usize, h: usize, w: usize) -> Extent5 {
        Extent5::new(b, c, f, h, w).unwrap()
    }

    /// Scalar bilinear oracle: evaluates the align-corners sample by hand.
    fn bilinear_oracle(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
        let y0 = y.floor().clamp(0.0, (h - 1) as f64);
        let x0 = x.floor().clamp(0.0, (w - 1) as f64);
        let y1 = (y0 + 1.0).min((h - 1) as f64);
        let x1 = (x0 + 1.0).min((w - 1) as f64);
        let (dy, dx) = (y - y0, x - x0);
        let at = |yy: f64, xx: f64| img[yy as usize * w + xx as usize];
        at(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + at(y0, x1) * (1.0 - dy) * dx
            + at(y1, x0) * dy * (1.0 - dx)
            + at(y1, x1) * dy * dx
    }

    #[test]
    fn resize_matches_scalar_oracle() {
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let z = LatentGrid::from_vec(ext(1, 1, 1, 4, 4), img.clone()).unwrap();
        let out = resize_spatial(&z, 2, 2).unwrap();
        // align-corners: output i maps to i * (4 - 1) / (2 - 1)
        let expect: Vec<f64> = [(0.0, 0.0), (0.0, 3.0), (3.0, 0.0), (3.0, 3.0)]
            .iter()
            .map(|&(y, x)| bilinear_oracle(&img, 4, 4, y, x))
            .collect();
        assert_eq!(expect, vec![0.0, 3.0, 12.0, 15.0]);
        assert_eq!(out.values(), expect.as_slice());

        let up = resize_spatial(&z, 7, 5).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                let o = bilinear_oracle(&img, 4, 4, i as f64 * 3.0 / 6.0, j as f64 * 3.0 / 4.0);
                assert!((up.get(0, 0, 0, i, j) - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_constant_and_identity() {
        let z = LatentGrid::filled(ext(2, 3, 2, 5, 6), 3.5);
        for (h, w) in [(1, 1), (2, 9), (10, 3), (5, 6)] {
            assert!(resize_spatial(&z, h, w).unwrap().values().iter().all(|&v| v == 3.5));
        }
        let down_up = resize_spatial(&resize_spatial(&z, 2, 3).unwrap(), 5, 6).unwrap();
        assert_eq!(down_up, z);

        let mut rng = Rng::new(3);
        let g = sample_gaussian(ext(1, 2, 3, 4, 5), &mut rng);
        assert_eq!(resize_spatial(&g, 4, 5).unwrap(), g);
        assert!(matches!(resize_spatial(&g, 0, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gaussian_is_deterministic_and_seed_sensitive() {
        let e = ext(1, 2, 3, 4, 5);
        let a = sample_gaussian(e, &mut Rng::new(11));
        let b = sample_gaussian(e, &mut Rng::new(11));
        let c = sample_gaussian(e, &mut Rng::new(12));
        assert_eq!(a.values(), b.values());
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn gaussian_moments() {
        // 10^5 samples: std error of mean ~0.003, of variance ~0.0045.
        let g = sample_gaussian(ext(1, 1, 1, 250, 400), &mut Rng::new(2024));
        let s = g.stats();
        assert!(s.mean.abs() < 0.02, "mean {}", s.mean);
        assert!((s.std * s.std - 1.0).abs() < 0.05, "var {}", s.std * s.std);
    }

    #[test]
    fn gaussian_odd_length_advances_counter() {
        let mut rng = Rng::new(5);
        let _ = sample_gaussian(ext(1, 1, 1, 1, 3), &mut rng);
        assert_eq!(rng.counter(), 4);
    }

    #[test]
    fn axpy_cases() {
        let e = ext(1, 1, 1, 1, 2);
        let x = LatentGrid::from_vec(e, vec![1.0, 2.0]).unwrap();
        let y = LatentGrid::from_vec(e, vec![3.0, 4.0]).unwrap();
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        assert_eq!(axpy(1.0, &x, &LatentGrid::zeros(e)).unwrap(), x);
        assert_eq!(axpy(2.0, &x, &y).unwrap().values(), &[5.0, 8.0]);
        let other = LatentGrid::zeros(ext(1, 1, 1, 2, 1));
        assert!(matches!(axpy(1.0, &x, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_cases() {
        let e = ext(1, 1, 1, 1, 2);
        let a = LatentGrid::from_vec(e, vec![0.0, 0.0]).unwrap();
        let b = LatentGrid::from_vec(e, vec![2.0, 0.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 2.0);

        let e = ext(2, 3, 4, 5, 6);
        let p = sample_gaussian(e, &mut Rng::new(1));
        let q = sample_gaussian(e, &mut Rng::new(2));
        // two-pass oracle: differences first, then a plain loop
        let diffs: Vec<f64> = p.values().iter().zip(q.values()).map(|(x, y)| x - y).collect();
        let mut acc = 0.0;
        for d in &diffs {
            acc += d * d;
        }
        let oracle = acc / diffs.len() as f64;
        assert!((mse(&p, &q).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        let e = ext(1, 1, 1, 1, 2);
        assert!(matches!(LatentGrid::from_vec(e, vec![1.0]), Err(Error::Shape(_))));
        assert!(LatentGrid::from_vec(e, vec![1.0, f64::NAN]).is_err());
        assert!(Extent5::new(1, 0, 1, 1, 1).is_err());
    }

    #[test]
    fn frames_and_stack() {
        let e = ext(2, 2, 4, 2, 2);
        let g = sample_gaussian(e, &mut Rng::new(9));
        let sub = g.frames(1, 2).unwrap();
        assert_eq!(sub.extent(), e.with_frames(2));
        assert_eq!(sub.get(1, 1, 0, 1, 0), g.get(1, 1, 1, 1, 0));
        let parts = [g.batch_item(0), g.batch_item(1)];
        assert_eq!(LatentGrid::stack(&parts).unwrap(), g);
    }
}

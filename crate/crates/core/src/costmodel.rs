//! Analytical FLOPs and latency for multi-stage sampling pipelines.
//!
//! Conventions: a multiply-add counts as 2 FLOPs; softmax, normalisation,
//! embeddings and the VAE decode are not counted. Per block and step:
//!
//! * attention scores and mixing, `4·n_blk²·d` summed over attention blocks,
//! * q/k/v/o projections, `8·n·d²`,
//! * feed-forward with `d_ff = 4d`, `2·2·n·d·d_ff = 16·n·d²`.
//!
//! Heads do not change the count.

use crate::error::{config, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    Global,
    /// Non-overlapping temporal windows of `w_t` frames spanning full space.
    Windowed { w_t: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub name: String,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub steps: usize,
    pub attention: AttentionMode,
    /// Fixed per-step seconds added on top of the FLOP-proportional time.
    pub step_overhead_s: f64,
}

impl StageSpec {
    /// Stage over a `(f, h, w)` latent cut into `p×p` patches.
    #[allow(clippy::too_many_arguments)]
    pub fn from_latent(
        name: &str,
        (f, h, w): (usize, usize, usize),
        patch: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        steps: usize,
        attention: AttentionMode,
    ) -> Result<Self> {
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(config(format!("latent {h}x{w} not divisible by patch {patch}")));
        }
        let s = StageSpec {
            name: name.to_string(),
            frames: f,
            tokens_per_frame: (h / patch) * (w / patch),
            dim,
            heads,
            depth,
            steps,
            attention,
            step_overhead_s: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.tokens_per_frame == 0 || self.dim == 0 || self.depth == 0 || self.steps == 0 {
            return Err(config(format!("stage {:?}: frames, tokens, dim, depth and steps must be >= 1", self.name)));
        }
        if let AttentionMode::Windowed { w_t } = self.attention {
            if w_t == 0 {
                return Err(config(format!("stage {:?}: window must be >= 1", self.name)));
            }
        }
        if !(self.step_overhead_s >= 0.0) {
            return Err(config(format!("stage {:?}: overhead must be >= 0", self.name)));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        StageSpec { steps, ..self.clone() }
    }

    /// `Σ n_blk²` over the attention blocks of one layer.
    pub fn pair_sum(&self) -> f64 {
        let hw = self.tokens_per_frame as f64;
        match self.attention {
            AttentionMode::Global => (self.tokens() as f64).powi(2),
            AttentionMode::Windowed { w_t } => {
                let full = self.frames / w_t;
                let tail = self.frames % w_t;
                let blk = (w_t as f64 * hw).powi(2);
                full as f64 * blk + (tail as f64 * hw).powi(2)
            }
        }
    }

    /// FLOPs of one step split into (attention pairs, projections, FFN).
    pub fn step_terms(&self) -> (f64, f64, f64) {
        let n = self.tokens() as f64;
        let d = self.dim as f64;
        let l = self.depth as f64;
        (4.0 * self.pair_sum() * d * l, 8.0 * n * d * d * l, 16.0 * n * d * d * l)
    }

    pub fn step_flops(&self) -> f64 {
        let (a, p, f) = self.step_terms();
        a + p + f
    }
}

pub fn stage_flops(s: &StageSpec) -> f64 {
    s.step_flops() * s.steps as f64
}

/// Affine wall-clock model: `rate·flops + overhead·steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeModel {
    pub sec_per_flop: f64,
    pub step_overhead_s: f64,
}

impl TimeModel {
    pub fn predict(&self, s: &StageSpec) -> f64 {
        self.sec_per_flop * stage_flops(s) + (self.step_overhead_s + s.step_overhead_s) * s.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub stages: Vec<StageSpec>,
    pub baseline: StageSpec,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(config("pipeline has no stages"));
        }
        self.stages.iter().try_for_each(StageSpec::validate)?;
        self.baseline.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub name: String,
    pub flops: f64,
    /// Fraction of the pipeline total.
    pub share: f64,
    /// Stage FLOPs over baseline FLOPs.
    pub ratio: f64,
    pub predicted_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub rows: Vec<StageRow>,
    pub total_flops: f64,
    pub baseline_flops: f64,
    pub predicted_s: f64,
    pub baseline_predicted_s: f64,
}

impl PipelineReport {
    /// Pipeline FLOPs over baseline FLOPs.
    pub fn ratio(&self) -> f64 {
        self.total_flops / self.baseline_flops
    }

    pub fn speedup(&self) -> f64 {
        self.baseline_flops / self.total_flops
    }

    pub fn time_ratio(&self) -> f64 {
        self.predicted_s / self.baseline_predicted_s
    }

    /// `stage,flops,share,ratio,predicted_s` with `total` and `baseline` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,flops,share,ratio,predicted_s\n");
        let mut row = |name: &str, flops: f64, share: f64, ratio: f64, t: f64| {
            out.push_str(&format!("{name},{flops:.6e},{share:.6},{ratio:.6},{t:.6}\n"));
        };
        for r in &self.rows {
            row(&r.name, r.flops, r.share, r.ratio, r.predicted_s);
        }
        row("total", self.total_flops, 1.0, self.ratio(), self.predicted_s);
        row("baseline", self.baseline_flops, self.baseline_flops / self.total_flops, 1.0, self.baseline_predicted_s);
        out
    }
}

pub fn pipeline_report(p: &PipelineSpec, time: &TimeModel) -> Result<PipelineReport> {
    p.validate()?;
    let baseline_flops = stage_flops(&p.baseline);
    let flops: Vec<f64> = p.stages.iter().map(stage_flops).collect();
    let total_flops: f64 = flops.iter().sum();
    let rows: Vec<StageRow> = p
        .stages
        .iter()
        .zip(&flops)
        .map(|(s, &f)| StageRow {
            name: s.name.clone(),
            flops: f,
            share: f / total_flops,
            ratio: f / baseline_flops,
            predicted_s: time.predict(s),
        })
        .collect();
    Ok(PipelineReport {
        predicted_s: rows.iter().map(|r| r.predicted_s).sum(),
        rows,
        total_flops,
        baseline_flops,
        baseline_predicted_s: time.predict(&p.baseline),
    })
}

/// Per-step costs of a preview split at step `k` of `n_total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDivision {
    pub n_total: usize,
    pub c_hi: f64,
    pub c_lo: f64,
    pub c_refine: f64,
    pub c_0: f64,
}

impl StepDivision {
    /// Costs derived from one step of each preview stage and a full refiner run.
    pub fn from_stages(hi: &StageSpec, lo: &StageSpec, refiner: &StageSpec, n_total: usize, time: &TimeModel) -> Self {
        StepDivision {
            n_total,
            c_hi: time.predict(&hi.with_steps(1)),
            c_lo: time.predict(&lo.with_steps(1)),
            c_refine: time.predict(refiner),
            c_0: 0.0,
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.c_hi + (self.n_total - k) as f64 * self.c_lo + self.c_refine + self.c_0
    }
}

pub fn step_division_curve(k_values: &[usize], div: &StepDivision) -> Result<Vec<(usize, f64)>> {
    k_values
        .iter()
        .map(|&k| {
            if k == 0 || k > div.n_total {
                Err(Error::InvalidArgument(format!("k = {k} outside (0, {}]", div.n_total)))
            } else {
                Ok((k, div.time(k)))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn affine_fit(points: &[(f64, f64)]) -> Result<AffineFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::Calibration("affine fit needs at least two points".into()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Calibration("affine fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(AffineFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub model: TimeModel,
    /// `measured − predicted` per input, in order.
    pub residuals: Vec<f64>,
}

impl Calibration {
    pub fn rms_residual(&self) -> f64 {
        (self.residuals.iter().map(|r| r * r).sum::<f64>() / self.residuals.len() as f64).sqrt()
    }
}

/// Least-squares fit of `seconds = rate·flops + overhead·steps`.
pub fn calibrate(measured: &[(StageSpec, f64)]) -> Result<Calibration> {
    if measured.len() < 2 {
        return Err(Error::Calibration(format!("need at least 2 measurements, got {}", measured.len())));
    }
    let rows: Vec<(f64, f64, f64)> = measured.iter().map(|(s, t)| (stage_flops(s), s.steps as f64, *t)).collect();
    // Normalise columns so the singularity test is scale free.
    let na = rows.iter().map(|r| r.0 * r.0).sum::<f64>().sqrt();
    let nb = rows.iter().map(|r| r.1 * r.1).sum::<f64>().sqrt();
    let (mut aa, mut ab, mut bb, mut ay, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(a, b, y) in &rows {
        let (a, b) = (a / na, b / nb);
        aa += a * a;
        ab += a * b;
        bb += b * b;
        ay += a * y;
        by += b * y;
    }
    let det = aa * bb - ab * ab;
    if !(det > 1e-12) {
        return Err(Error::Calibration("measurements do not separate FLOPs from step count".into()));
    }
    let rate = (bb * ay - ab * by) / det / na;
    let overhead = (aa * by - ab * ay) / det / nb;
    let model = TimeModel { sec_per_flop: rate, step_overhead_s: overhead };
    let residuals = measured.iter().zip(&rows).map(|((s, _), r)| r.2 - model.predict(s)).collect();
    Ok(Calibration { model, residuals })
}

/// Published baseline/ours figures used for side-by-side reporting only.
pub mod published {
    pub const BASELINE_PFLOPS: f64 = 658.5;
    pub const BASELINE_S: f64 = 3497.0;
    pub const STEPS30_PFLOPS: f64 = 197.5;
    pub const STEPS30_S: f64 = 1049.0;
    pub const STEPS50_PFLOPS: f64 = 329.2;
    pub const STEPS50_S: f64 = 1748.0;
    pub const OURS_PFLOPS: f64 = 34.3;
    pub const OURS_S: f64 = 278.0;
    /// Preview split step `k` against end-to-end seconds.
    pub const STEP_DIVISION: [(f64, f64); 5] = [(5.0, 201.0), (10.0, 252.0), (20.0, 369.0), (30.0, 481.0), (40.0, 610.0)];
    /// Refiner steps against end-to-end seconds.
    pub const REFINER_STEPS: [(f64, f64); 5] = [(8.0, 244.5), (9.0, 247.0), (10.0, 249.0), (11.0, 251.8), (12.0, 254.2)];

    pub fn flops_reduction() -> f64 {
        BASELINE_PFLOPS / OURS_PFLOPS
    }
}

/// Overhead-free time model under which `baseline` takes `seconds`.
pub fn anchored_time_model(baseline: &StageSpec, seconds: f64) -> TimeModel {
    TimeModel { sec_per_flop: seconds / stage_flops(baseline), step_overhead_s: 0.0 }
}

/// Two-stage pipeline at 14B-class scale: 21 latent frames, 30×52 tokens per
/// frame at preview resolution, 10 hi + 30 half-resolution preview steps and
/// a 10-step windowed refiner, against 50 global steps at twice the side.
pub fn reference_two_stage() -> PipelineSpec {
    let stage = |name: &str, hw: (usize, usize), dim, heads, depth, steps, attention| StageSpec {
        name: name.to_string(),
        frames: 21,
        tokens_per_frame: hw.0 * hw.1,
        dim,
        heads,
        depth,
        steps,
        attention,
        step_overhead_s: 0.0,
    };
    PipelineSpec {
        stages: vec![
            stage("preview_hi", (30, 52), 5120, 40, 40, 10, AttentionMode::Global),
            stage("preview_lo", (15, 26), 5120, 40, 40, 30, AttentionMode::Global),
            stage("refine", (60, 104), 1024, 16, 20, 10, AttentionMode::Windowed { w_t: 4 }),
        ],
        baseline: stage("baseline", (60, 104), 5120, 40, 40, 50, AttentionMode::Global),
    }
}

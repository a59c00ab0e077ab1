//! AdamW training for the base model and the refiner.
//!
//! Every iteration draws its clips, crops, path positions and noise from a
//! stream derived from `(seed, iteration)`, so a run split across a resume is
//! bit-identical to a straight run.

use std::time::Instant;

use crate::codec::ToyCodec;
use crate::degrade::{degrade_pair_with, DegradationConfig};
use crate::denoiser::{default_conditioning, flow_pair, velocity_loss, DenoiserParams};
use crate::error::{config, Result};
use crate::exec::Exec;
use crate::latent::{sample_gaussian, LatentGrid, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub phase1_frames: usize,
    pub phase1_iters: usize,
    pub phase2_frames: usize,
    pub phase2_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 4,
            phase1_frames: 5,
            phase1_iters: 100,
            phase2_frames: 9,
            phase2_iters: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config("optimizer betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.phase1_frames == 0 {
            return Err(config("batch size and frame counts must be positive"));
        }
        if self.phase2_frames < self.phase1_frames {
            return Err(config("phase-2 frame count must be >= phase-1 frame count"));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.phase1_iters + self.phase2_iters
    }

    pub fn frames_at(&self, iter: usize) -> usize {
        if iter < self.phase1_iters {
            self.phase1_frames
        } else {
            self.phase2_frames
        }
    }
}

/// What the model learns to predict.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Noise-to-data flow matching on encoded clips.
    Base,
    /// Flow mapping from degraded to clean latents.
    Refiner(DegradationConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub frames: usize,
    pub wall_ms: f64,
}

/// AdamW first/second moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: DenoiserParams,
    pub v: DenoiserParams,
}

impl AdamState {
    pub fn new(params: &DenoiserParams) -> Self {
        AdamState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: DenoiserParams,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub objective: Objective,
    pub codec: ToyCodec,
    exec: Exec,
}

impl Trainer {
    pub fn new(params: DenoiserParams, cfg: TrainConfig, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamState::new(&params);
        Ok(Trainer { params, opt, cfg, objective, codec: ToyCodec, exec: Exec::default() })
    }

    pub fn resume(params: DenoiserParams, opt: AdamState, cfg: TrainConfig, objective: Objective) -> Result<Self> {
        let mut t = Self::new(params, cfg, objective)?;
        t.opt = opt;
        Ok(t)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Index of the next iteration to run.
    pub fn next_iter(&self) -> usize {
        self.opt.step as usize
    }

    /// Builds the `(input, sigma, target)` examples for one iteration.
    fn examples(&self, dataset: &[LatentGrid], iter: usize) -> Result<Vec<(LatentGrid, f64, LatentGrid)>> {
        let frames = self.cfg.frames_at(iter);
        let mut rng = Rng::new(self.cfg.seed).derive(iter as u64);
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let clip = &dataset[rng.below(dataset.len())];
            let total = clip.extent().f;
            if frames > total {
                return Err(config(format!("clip has {total} frames, schedule needs {frames}")));
            }
            let start = rng.below(total - frames + 1);
            let crop = clip.frames(start, frames)?;
            let t = rng.uniform();
            let mut item_rng = rng.derive(1);
            rng.next_u64();
            match &self.objective {
                Objective::Base => {
                    let z0 = self.codec.encode(&crop)?;
                    let eps = sample_gaussian(z0.extent(), &mut item_rng);
                    let (z_t, target) = flow_pair(&eps, &z0, t)?;
                    out.push((z_t, t, target));
                }
                Objective::Refiner(deg) => {
                    let (z_lr, z_hr) = degrade_pair_with(&crop, &self.codec, deg, &mut item_rng)?;
                    let (z_t, target) = flow_pair(&z_lr, &z_hr, t)?;
                    out.push((z_t, t, target));
                }
            }
        }
        Ok(out)
    }

    /// Runs one iteration; returns the batch-mean loss.
    pub fn step(&mut self, dataset: &[LatentGrid]) -> Result<LossRecord> {
        if dataset.is_empty() {
            return Err(config("training dataset is empty"));
        }
        let started = Instant::now();
        let iter = self.next_iter();
        let examples = self.examples(dataset, iter)?;
        let cond = default_conditioning(self.params.config.cond_dim);
        let params = &self.params;
        let results = self.exec.map(examples.len(), |i| {
            let (z, s, target) = &examples[i];
            velocity_loss(params, z, *s, target, &cond, Exec::Sequential)
        });
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        let inv = 1.0 / examples.len() as f64;
        for r in results {
            let (l, g) = r?;
            loss += l * inv;
            grads.add_scaled(&g, inv);
        }
        self.apply_adamw(&grads);
        Ok(LossRecord { iter, loss, frames: self.cfg.frames_at(iter), wall_ms: started.elapsed().as_secs_f64() * 1e3 })
    }

    fn apply_adamw(&mut self, grads: &DenoiserParams) {
        let c = &self.cfg;
        self.opt.step += 1;
        let t = self.opt.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let params = self.params.named_mut();
        let ms = self.opt.m.named_mut();
        let vs = self.opt.v.named_mut();
        for ((((_, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grads.named()) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m.data[i] / bc1) / ((v.data[i] / bc2).sqrt() + c.eps) + c.weight_decay * p.data[i];
                p.data[i] -= c.lr * update;
            }
        }
    }

    /// Runs iterations until `until` (exclusive, global index) is reached.
    pub fn run_until(&mut self, dataset: &[LatentGrid], until: usize, mut log: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut records = Vec::new();
        while self.next_iter() < until {
            let r = self.step(dataset)?;
            log(&r);
            records.push(r);
        }
        Ok(records)
    }
}

/// Trains a refiner for the full progressive schedule.
pub fn train_refiner(
    dataset: &[LatentGrid],
    init: DenoiserParams,
    deg: &DegradationConfig,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(config("training dataset is empty"));
    }
    let mut trainer = Trainer::new(init, cfg.clone(), Objective::Refiner(deg.clone()))?;
    let log = trainer.run_until(dataset, cfg.total_iters(), |_| {})?;
    Ok((trainer.params, log))
}

/// Mean loss over the first and last `window` records.
pub fn loss_progress(log: &[LossRecord], window: usize) -> (f64, f64) {
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    let w = window.min(log.len()).max(1);
    (mean(&log[..w]), mean(&log[log.len() - w..]))
}

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use vidgen_core::denoiser::{backward_with, default_conditioning, forward_velocity_with, DenoiserConfig, DenoiserParams};
use vidgen_core::swin::{window_attention_with, AttnWeights, RopeConfig, TokenField, WindowSpec};
use vidgen_core::train::{Objective, Trainer, TrainConfig};
use vidgen_core::synth::{synth_video, SynthKind};
use vidgen_core::{sample_gaussian, Exec, Extent5, LatentGrid, Rng};

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("parallel", Exec::Parallel));
    m
}

fn window_attention(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let (t, h, w, d) = (16, 8, 8, 24);
    let x = TokenField::new(t, h, w, d, (0..t * h * w * d).map(|_| rng.normal()).collect()).unwrap();
    let mut wts = AttnWeights::zeros(d, 4);
    wts.w_qkv.data.iter_mut().for_each(|v| *v = rng.normal() * 0.2);
    wts.w_o.data.iter_mut().for_each(|v| *v = rng.normal() * 0.2);
    let rope = RopeConfig::for_dim(d).unwrap();
    let spec = WindowSpec::new(4).unwrap();
    let mut g = c.benchmark_group("window_attention");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| window_attention_with(black_box(&x), spec, true, &rope, &wts, exec).unwrap())
        });
    }
    g.finish();
}

fn denoiser_batch(c: &mut Criterion) {
    let params = DenoiserParams::init(DenoiserConfig::refiner(4), &mut Rng::new(2)).unwrap();
    let z = sample_gaussian(Extent5::new(4, 4, 8, 8, 8).unwrap(), &mut Rng::new(3));
    let cond = default_conditioning(8);
    let up = z.scale(1e-3);
    let mut g = c.benchmark_group("denoiser_batch4");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| forward_velocity_with(&params, black_box(&z), 0.5, &cond, exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| backward_with(&params, black_box(&z), 0.5, &cond, &up, exec).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let data: Vec<LatentGrid> =
        (0..8).map(|_| synth_video(SynthKind::BouncingRect, Extent5::new(1, 1, 9, 16, 16).unwrap(), &mut rng)).collect();
    let cfg = TrainConfig { lr: 1e-3, batch_size: 8, phase1_iters: 1_000_000, ..TrainConfig::default() };
    let init = DenoiserParams::init(DenoiserConfig::refiner(4), &mut Rng::new(5)).unwrap();
    let mut g = c.benchmark_group("train_step_batch8");
    g.sample_size(20);
    for (name, exec) in modes() {
        let mut trainer = Trainer::new(init.clone(), cfg.clone(), Objective::Base).unwrap().with_exec(exec);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| trainer.step(&data).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, window_attention, denoiser_batch, train_step);
criterion_main!(benches);

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

use vidgen_core::checkpoint::{load_optimizer, load_params, save_optimizer, save_params};
use vidgen_core::codec::ToyCodec;
use vidgen_core::costmodel::{
    self, affine_fit, calibrate, pipeline_report, published, stage_flops, step_division_curve, AttentionMode,
    PipelineSpec, StageSpec, StepDivision, TimeModel,
};
use vidgen_core::degrade::DegradationConfig;
use vidgen_core::denoiser::{default_conditioning, forward_velocity, refine, DenoiserConfig, DenoiserParams};
use vidgen_core::lgr::{self, write_atomic};
use vidgen_core::reshift::{generate_preview, PreviewConfig};
use vidgen_core::schedule::NfeCounter;
use vidgen_core::synth::{synth_video, SynthKind};
use vidgen_core::train::{loss_progress, AdamState, Objective, TrainConfig, Trainer};
use vidgen_core::{sample_gaussian, Exec, Extent5, LatentGrid, Rng};

use crate::config::{check_positive, config_err, Config, StageEntry};
use crate::manifest::{self, Manifest};

const TRAIN_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Base,
    Refiner,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Base => "base",
            Target::Refiner => "refiner",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Target::Base),
            "refiner" => Ok(Target::Refiner),
            other => Err(config_err(format!("unknown training target {other:?}"))),
        }
    }
}

fn ms(since: Instant) -> String {
    format!("{:.3}", since.elapsed().as_secs_f64() * 1e3)
}

fn finish(m: &mut Manifest, started: Instant, output: &Path) -> Result<PathBuf> {
    m.push("wall_ms.total", ms(started));
    let path = manifest::path_for(output);
    m.write(&path)?;
    Ok(path)
}

fn clip_kind(kind: &str, i: usize) -> Result<SynthKind> {
    match kind {
        "mixed" if i.is_multiple_of(2) => Ok(SynthKind::BouncingRect),
        "mixed" => Ok(SynthKind::MovingGaussian),
        k => k.parse().map_err(config_err),
    }
}

pub fn synth(cfg: &Config) -> Result<PathBuf> {
    let started = Instant::now();
    let s = &cfg.synth;
    check_positive("synth.count", s.count)?;
    for key in s.clip_seeds.keys() {
        match key.parse::<usize>() {
            Ok(i) if i < s.count => {}
            _ => return Err(config_err(format!("synth.clip_seeds key {key:?} is not a clip index below {}", s.count))),
        }
    }
    let extent = Extent5::new(1, s.channels, s.frames, s.height, s.width)?;
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    let master = Rng::new(cfg.seed);
    let mut index = String::from("file,kind,seed,extent\n");
    for i in 0..s.count {
        let seed = s.clip_seeds.get(&i.to_string()).copied().unwrap_or_else(|| master.derive(i as u64).seed());
        let kind = clip_kind(&s.kind, i)?;
        let clip = synth_video(kind, extent, &mut Rng::new(seed));
        let name = format!("clip_{i:04}.lgr");
        lgr::write_file(&s.out.join(&name), &clip)?;
        writeln!(index, "{name},{kind},{seed},{extent}")?;
    }
    write_atomic(&s.out.join("index.csv"), index.as_bytes())?;
    let mut m = Manifest::new("synth", cfg)?;
    m.push("clips", s.count);
    m.push("output", s.out.display());
    let path = finish(&mut m, started, &s.out)?;
    println!("wrote {} clips to {}", s.count, s.out.display());
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LatentGrid>> {
    let index_path = dir.join("index.csv");
    let index = fs::read_to_string(&index_path).with_context(|| format!("reading dataset index {}", index_path.display()))?;
    let clips = index
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let file = l.split(',').next().unwrap_or_default();
            lgr::read_file(&dir.join(file)).with_context(|| format!("reading clip {file}"))
        })
        .collect::<Result<Vec<_>>>()?;
    if clips.is_empty() {
        return Err(config_err(format!("dataset {} is empty", dir.display())));
    }
    Ok(clips)
}

fn optimizer_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

fn loss_csv_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn train(cfg: &Config, target: Target, force: bool) -> Result<PathBuf> {
    let started = Instant::now();
    let t = &cfg.train;
    let data = load_dataset(&t.data)?;
    let channels = 4 * data[0].extent().c;
    let model_cfg = match target {
        Target::Base => DenoiserConfig::base(channels),
        Target::Refiner => DenoiserConfig::refiner(channels),
    };
    let out = match target {
        Target::Base => &t.base_out,
        Target::Refiner => &t.refiner_out,
    };
    let tc = TrainConfig {
        lr: t.lr,
        beta1: t.beta1,
        beta2: t.beta2,
        eps: t.eps,
        weight_decay: t.weight_decay,
        batch_size: t.batch_size,
        phase1_frames: t.phase1_frames,
        phase1_iters: t.phase1_iters,
        phase2_frames: t.phase2_frames,
        phase2_iters: t.phase2_iters,
        seed: Rng::new(cfg.seed).derive(TRAIN_STREAM).seed(),
    };
    let objective = match target {
        Target::Base => Objective::Base,
        Target::Refiner => {
            let d = &cfg.degrade;
            Objective::Refiner(DegradationConfig {
                blur_radius: d.blur_radius,
                blur_sigma: d.blur_sigma,
                down_factor: d.down_factor,
                latent_noise: d.latent_noise,
                seed: 0,
            })
        }
    };
    let (params, opt) = if t.resume {
        let (params, _) = load_params(out)?;
        if params.config != model_cfg {
            return Err(config_err(format!("{} holds a different model than target {}", out.display(), target.name())));
        }
        let opt = load_optimizer(&optimizer_path(out), &params)?;
        (params, opt)
    } else {
        if out.exists() && !force {
            return Err(config_err(format!("{} exists; pass --force to overwrite or set train.resume", out.display())));
        }
        let params = DenoiserParams::init(model_cfg, &mut Rng::new(cfg.seed).derive(INIT_STREAM))?;
        let opt = AdamState::new(&params);
        (params, opt)
    };
    let resumed_from = opt.step;
    let total = tc.total_iters();
    let until = if t.stop_at == 0 { total } else { t.stop_at.min(total) };
    let mut trainer = Trainer::resume(params, opt, tc, objective)?;
    let log = trainer.run_until(&data, until, |r| {
        if r.iter % 20 == 0 {
            eprintln!("iter {:>5}  frames {}  loss {:.6}", r.iter, r.frames, r.loss);
        }
    })?;

    save_params(out, &trainer.params, &[("target".into(), target.name().into())])?;
    save_optimizer(&optimizer_path(out), &trainer.opt)?;
    let mut csv = String::from("iter,loss,frames,wall_ms\n");
    for r in &log {
        writeln!(csv, "{},{},{},{:.3}", r.iter, r.loss, r.frames, r.wall_ms)?;
    }
    write_atomic(&loss_csv_path(out), csv.as_bytes())?;

    let mut m = Manifest::new("train", cfg)?;
    m.push("target", target.name());
    m.push("iterations.start", resumed_from);
    m.push("iterations.end", trainer.opt.step);
    if !log.is_empty() {
        let (first, last) = loss_progress(&log, 20);
        m.push("loss.first20_mean", first);
        m.push("loss.last20_mean", last);
        println!("{} iterations, first-20 mean loss {first:.6}, last-20 mean loss {last:.6}", log.len());
    }
    m.push("params", trainer.params.param_count());
    m.push("output", out.display());
    finish(&mut m, started, out)
}

fn indexed(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{i}"),
    };
    path.with_file_name(name)
}

pub fn preview(cfg: &Config) -> Result<PathBuf> {
    let started = Instant::now();
    let p = &cfg.preview;
    check_positive("preview.count", p.count)?;
    let (params, _) = load_params(&p.checkpoint)?;
    let template = Extent5::new(1, params.config.channels, p.frames, p.height, p.width)?;
    let cond = default_conditioning(params.config.cond_dim);
    let jobs: Vec<(PathBuf, u64)> = (0..p.count)
        .map(|i| (if p.count == 1 { p.out.clone() } else { indexed(&p.out, i) }, p.seed + i as u64))
        .collect();
    let results = Exec::default().map(jobs.len(), |i| {
        let pc = PreviewConfig {
            n_total: p.n_total,
            k: p.k,
            hi: (p.height, p.width),
            lo: (p.lo_height, p.lo_width),
            shift: p.shift,
            seed: jobs[i].1,
        };
        let counter = NfeCounter::new(&params);
        generate_preview(&counter, &cond, &pc, template).map(|o| (o, counter.calls()))
    });
    let mut m = Manifest::new("preview", cfg)?;
    for ((path, seed), r) in jobs.iter().zip(results) {
        let (out, calls) = r?;
        lgr::write_file(path, &out.latent)?;
        let i = m.entries.iter().filter(|(k, _)| k.starts_with("output.")).count();
        m.push(&format!("output.{i}"), path.display());
        m.push(&format!("seed.{i}"), seed);
        m.push(&format!("nfe_hi.{i}"), out.nfe_hi);
        m.push(&format!("nfe_lo.{i}"), out.nfe_lo);
        m.push(&format!("nfe_total.{i}"), calls);
        m.push(&format!("sigma_switch.{i}"), out.sigma_switch);
        m.push(&format!("extent.{i}"), out.latent.extent());
        println!("wrote {} ({}, nfe {} + {})", path.display(), out.latent.extent(), out.nfe_hi, out.nfe_lo);
    }
    finish(&mut m, started, &p.out)
}

fn ppm(frame: &LatentGrid, b: usize, f: usize) -> Vec<u8> {
    let e = frame.extent();
    let mut out = format!("P6\n{} {}\n255\n", e.w, e.h).into_bytes();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..e.h {
        for x in 0..e.w {
            for ch in 0..3 {
                let c = if e.c == 3 { ch } else { 0 };
                out.push(quant(frame.get(b, c, f, y, x)));
            }
        }
    }
    out
}

pub fn refine_cmd(cfg: &Config) -> Result<PathBuf> {
    let started = Instant::now();
    let r = &cfg.refine;
    check_positive("refine.steps", r.steps)?;
    check_positive("refine.scale", r.scale)?;
    let (params, _) = load_params(&r.checkpoint)?;
    let preview = lgr::read_file(&r.preview)?;
    let e = preview.extent();
    let target_hw = (e.h * r.scale, e.w * r.scale);
    let counter = NfeCounter::new(&params);
    let cond = default_conditioning(params.config.cond_dim);
    let refined = refine(&counter, &preview, target_hw, r.steps, &cond)?;
    lgr::write_file(&r.out, &refined)?;

    let pixels = ToyCodec.decode(&refined)?;
    let pe = pixels.extent();
    fs::create_dir_all(&r.frames_dir).with_context(|| format!("creating {}", r.frames_dir.display()))?;
    for b in 0..pe.b {
        for f in 0..pe.f {
            write_atomic(&r.frames_dir.join(format!("frame_{b}_{f:04}.ppm")), &ppm(&pixels, b, f))?;
        }
    }
    let mut m = Manifest::new("refine", cfg)?;
    m.push("steps", r.steps);
    m.push("nfe", counter.calls());
    m.push("preview_extent", e);
    m.push("output_extent", refined.extent());
    m.push("pixel_extent", pe);
    m.push("frames", pe.b * pe.f);
    m.push("output", r.out.display());
    m.push("frames_dir", r.frames_dir.display());
    println!("wrote {} ({}) and {} frames", r.out.display(), refined.extent(), pe.b * pe.f);
    finish(&mut m, started, &r.out)
}

fn stage_from(e: &StageEntry) -> Result<StageSpec> {
    let s = StageSpec {
        name: e.name.clone(),
        frames: e.frames,
        tokens_per_frame: e.height * e.width,
        dim: e.dim,
        heads: e.heads,
        depth: e.depth,
        steps: e.steps,
        attention: if e.window == 0 { AttentionMode::Global } else { AttentionMode::Windowed { w_t: e.window } },
        step_overhead_s: e.overhead_s,
    };
    s.validate()?;
    Ok(s)
}

fn measure_toy(seed: u64) -> Result<Vec<(StageSpec, f64)>> {
    let model_cfg = DenoiserConfig::base(4);
    let params = DenoiserParams::init(model_cfg.clone(), &mut Rng::new(seed))?;
    let cond = default_conditioning(model_cfg.cond_dim);
    let mut rng = Rng::new(seed).derive(1);
    let mut out = Vec::new();
    for &(side, steps) in &[(8, 2), (8, 6), (16, 2), (16, 4)] {
        let z = sample_gaussian(Extent5::new(1, 4, 8, side, side)?, &mut rng);
        let start = Instant::now();
        for _ in 0..steps {
            forward_velocity(&params, &z, 0.5, &cond)?;
        }
        let secs = start.elapsed().as_secs_f64();
        let spec = StageSpec::from_latent(
            &format!("toy_{side}x{side}_{steps}steps"),
            (8, side, side),
            model_cfg.patch,
            model_cfg.dim,
            model_cfg.heads,
            model_cfg.depth,
            steps,
            AttentionMode::Windowed { w_t: model_cfg.window },
        )?;
        out.push((spec, secs));
    }
    Ok(out)
}

pub fn profile(cfg: &Config, measure: bool) -> Result<PathBuf> {
    let started = Instant::now();
    let p = &cfg.profile;
    let pipeline = if p.stages.is_empty() {
        costmodel::reference_two_stage()
    } else {
        let baseline = p.baseline.as_ref().ok_or_else(|| config_err("profile.baseline is required with custom stages"))?;
        PipelineSpec { stages: p.stages.iter().map(stage_from).collect::<Result<_>>()?, baseline: stage_from(baseline)? }
    };
    let time = if p.sec_per_flop > 0.0 {
        TimeModel { sec_per_flop: p.sec_per_flop, step_overhead_s: p.step_overhead_s }
    } else {
        TimeModel {
            step_overhead_s: p.step_overhead_s,
            ..costmodel::anchored_time_model(&pipeline.baseline, published::BASELINE_S)
        }
    };
    let report = pipeline_report(&pipeline, &time)?;
    fs::create_dir_all(&p.out).with_context(|| format!("creating {}", p.out.display()))?;
    write_atomic(&p.out.join("pipeline.csv"), report.to_csv().as_bytes())?;

    let base = &pipeline.baseline;
    let base_flops = stage_flops(base);
    let base_time = time.predict(base);
    let mut variants = String::from("variant,steps,flops,flops_ratio,predicted_s,time_ratio\n");
    for (name, frac) in [("baseline", 1.0), ("steps_30pct", 0.3), ("steps_50pct", 0.5)] {
        let v = base.with_steps(((base.steps as f64) * frac).round() as usize);
        let f = stage_flops(&v);
        let t = time.predict(&v);
        writeln!(variants, "{name},{},{f:.6e},{:.6},{t:.6},{:.6}", v.steps, f / base_flops, t / base_time)?;
    }
    write_atomic(&p.out.join("variants.csv"), variants.as_bytes())?;

    let mut division = String::from("k,predicted_s\n");
    if pipeline.stages.len() >= 2 {
        let (hi, lo) = (&pipeline.stages[0], &pipeline.stages[1]);
        let div = StepDivision {
            n_total: p.n_total,
            c_hi: time.predict(&hi.with_steps(1)),
            c_lo: time.predict(&lo.with_steps(1)),
            c_refine: pipeline.stages[2..].iter().map(|s| time.predict(s)).sum(),
            c_0: 0.0,
        };
        for (k, t) in step_division_curve(&p.k_values, &div)? {
            writeln!(division, "{k},{t:.6}")?;
        }
    }
    write_atomic(&p.out.join("step_division.csv"), division.as_bytes())?;

    let split_fit = affine_fit(&published::STEP_DIVISION)?;
    let refiner_fit = affine_fit(&published::REFINER_STEPS)?;
    let mut text = String::new();
    writeln!(text, "pipeline total        {:.4} PFLOPs", report.total_flops / 1e15)?;
    writeln!(text, "baseline              {:.4} PFLOPs", report.baseline_flops / 1e15)?;
    writeln!(text, "flops ratio           {:.6}", report.ratio())?;
    writeln!(text, "flops reduction       {:.3}x", report.speedup())?;
    writeln!(text, "predicted time        {:.3} s (baseline {:.3} s)", report.predicted_s, report.baseline_predicted_s)?;
    writeln!(
        text,
        "published reduction   {:.1}x ({} / {} PFLOPs; published figure, not bit-reproducible by this model)",
        published::flops_reduction(),
        published::BASELINE_PFLOPS,
        published::OURS_PFLOPS
    )?;
    writeln!(
        text,
        "published split fit   slope {:.4} s/step, intercept {:.4} s, R^2 {:.6}",
        split_fit.slope, split_fit.intercept, split_fit.r2
    )?;
    writeln!(text, "published refine fit  slope {:.4} s/step, R^2 {:.6}", refiner_fit.slope, refiner_fit.r2)?;
    writeln!(text, "times cover transformer passes only; latent decoding is excluded")?;

    let mut m = Manifest::new("profile", cfg)?;
    m.push("measure", measure);
    if measure {
        let measured = measure_toy(cfg.seed)?;
        let cal = calibrate(&measured)?;
        let mut csv = String::from("stage,flops,steps,measured_s,predicted_s\n");
        for (s, secs) in &measured {
            writeln!(csv, "{},{:.6e},{},{secs:.6},{:.6}", s.name, stage_flops(s), s.steps, cal.model.predict(s))?;
        }
        write_atomic(&p.out.join("calibration.csv"), csv.as_bytes())?;
        writeln!(
            text,
            "calibrated            {:.6e} s/FLOP, {:.6e} s/step overhead, rms residual {:.6e} s",
            cal.model.sec_per_flop, cal.model.step_overhead_s, cal.rms_residual()
        )?;
    }
    write_atomic(&p.out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    m.push("flops_ratio", report.ratio());
    m.push("output", p.out.display());
    finish(&mut m, started, &p.out)
}

pub fn inspect(path: &Path) -> Result<()> {
    let (extent, s) = lgr::inspect_file(path).with_context(|| format!("inspecting {}", path.display()))?;
    println!("file    {}", path.display());
    println!("extent  {extent}");
    println!("count   {}", s.count);
    println!("min     {}", s.min);
    println!("max     {}", s.max);
    println!("mean    {}", s.mean);
    println!("std     {}", s.std);
    println!("nan     {}", s.nan);
    Ok(())
}

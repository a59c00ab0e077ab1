//! Model and optimizer checkpoints as tensor archives.
//!
//! Parameters and optimizer moments live in separate archives so that a
//! parameter checkpoint depends on nothing but the weights and the config.

use std::path::Path;

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::latent::{Extent5, LatentGrid};
use crate::lgr::TensorArchive;
use crate::nn::Weight;
use crate::train::AdamState;

fn bad(msg: impl Into<String>) -> Error {
    Error::Format { offset: 0, msg: msg.into() }
}

fn weight_extent(w: &Weight) -> Result<Extent5> {
    match w.shape.as_slice() {
        [n] => Extent5::new(1, 1, 1, 1, *n),
        [r, c] => Extent5::new(1, 1, 1, *r, *c),
        s => Err(bad(format!("unsupported weight rank {}", s.len()))),
    }
}

fn config_meta(c: &DenoiserConfig) -> Vec<(String, String)> {
    [
        ("model.channels", c.channels.to_string()),
        ("model.patch", c.patch.to_string()),
        ("model.dim", c.dim.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.depth", c.depth.to_string()),
        ("model.window", c.window.to_string()),
        ("model.cond_dim", c.cond_dim.to_string()),
        ("model.ff_mult", c.ff_mult.to_string()),
        ("model.rope_base", c.rope_base.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn config_from(a: &TensorArchive) -> Result<DenoiserConfig> {
    fn get<T: std::str::FromStr>(a: &TensorArchive, k: &str) -> Result<T> {
        a.meta(k)
            .ok_or_else(|| bad(format!("missing meta key {k}")))?
            .parse()
            .map_err(|_| bad(format!("unparsable meta value for {k}")))
    }
    let c = DenoiserConfig {
        channels: get(a, "model.channels")?,
        patch: get(a, "model.patch")?,
        dim: get(a, "model.dim")?,
        heads: get(a, "model.heads")?,
        depth: get(a, "model.depth")?,
        window: get(a, "model.window")?,
        cond_dim: get(a, "model.cond_dim")?,
        ff_mult: get(a, "model.ff_mult")?,
        rope_base: get(a, "model.rope_base")?,
    };
    c.validate()?;
    Ok(c)
}

fn pack(prefix: &str, p: &DenoiserParams, out: &mut Vec<(String, LatentGrid)>) -> Result<()> {
    for (name, w) in p.named() {
        out.push((format!("{prefix}{name}"), LatentGrid::from_vec(weight_extent(w)?, w.data.clone())?));
    }
    Ok(())
}

fn unpack(prefix: &str, a: &TensorArchive, p: &mut DenoiserParams) -> Result<()> {
    for (name, w) in p.named_mut() {
        let key = format!("{prefix}{name}");
        let t = a.tensor(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
        if t.extent() != weight_extent(w)? {
            return Err(Error::Shape(format!("tensor {key} has extent {}, expected {}", t.extent(), weight_extent(w)?)));
        }
        w.data.copy_from_slice(t.values());
    }
    Ok(())
}

pub fn params_archive(p: &DenoiserParams, extra_meta: &[(String, String)]) -> Result<TensorArchive> {
    let mut meta = config_meta(&p.config);
    meta.extend(extra_meta.iter().cloned());
    let mut tensors = Vec::new();
    pack("", p, &mut tensors)?;
    Ok(TensorArchive { meta, tensors })
}

pub fn params_from_archive(a: &TensorArchive) -> Result<DenoiserParams> {
    let mut p = DenoiserParams::zeros(config_from(a)?)?;
    unpack("", a, &mut p)?;
    Ok(p)
}

pub fn save_params(path: &Path, p: &DenoiserParams, extra_meta: &[(String, String)]) -> Result<()> {
    params_archive(p, extra_meta)?.save(path)
}

pub fn load_params(path: &Path) -> Result<(DenoiserParams, TensorArchive)> {
    let a = TensorArchive::load(path)?;
    Ok((params_from_archive(&a)?, a))
}

pub fn save_optimizer(path: &Path, opt: &AdamState) -> Result<()> {
    let mut meta = config_meta(&opt.m.config);
    meta.push(("opt.step".into(), opt.step.to_string()));
    let mut tensors = Vec::new();
    pack("m.", &opt.m, &mut tensors)?;
    pack("v.", &opt.v, &mut tensors)?;
    TensorArchive { meta, tensors }.save(path)
}

pub fn load_optimizer(path: &Path, params: &DenoiserParams) -> Result<AdamState> {
    let a = TensorArchive::load(path)?;
    if config_from(&a)? != params.config {
        return Err(Error::Config("optimizer state belongs to a different model config".into()));
    }
    let step = a
        .meta("opt.step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing or invalid opt.step"))?;
    let mut opt = AdamState::new(params);
    opt.step = step;
    unpack("m.", &a, &mut opt.m)?;
    unpack("v.", &a, &mut opt.v)?;
    Ok(opt)
}

use std::path::Path;

use super::format::{push_f32s, read, write_atomic, Reader};
use crate::architecture::{Model, ModelConfig};
use crate::augmentation::AugmentConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor, UpsampleMode};
use crate::supervised::EnsembleWeights;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2FC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model with the inference settings it was trained for.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub alpha: EnsembleWeights,
    pub augment: AugmentConfig,
}

fn counts(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Topology and inference settings as `meta.*` tensors.
fn meta_tensors(ck: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let c = ck.model.config();
    let scalar = |name: &str, v: f64| (format!("meta.{name}"), vec![1], vec![v]);
    let list = |name: &str, v: Vec<f64>| (format!("meta.{name}"), vec![v.len()], v);
    vec![
        scalar("input_dim", c.input_dim as f64),
        scalar("num_classes", c.num_classes as f64),
        scalar("num_activities", c.num_activities as f64),
        scalar("kernel", c.kernel as f64),
        scalar("depth", c.depth as f64),
        list("encoder_channels", counts(&c.encoder_channels)),
        list("decoder_channels", counts(&c.decoder_channels)),
        list("tpp_windows", counts(&c.tpp_windows)),
        scalar("upsample_nearest", f64::from(u8::from(c.upsample_mode == UpsampleMode::Nearest))),
        scalar("skip_connections", f64::from(u8::from(c.skip_connections))),
        scalar("activity_hidden", c.activity_hidden as f64),
        list("alpha", ck.alpha.as_slice().to_vec()),
        scalar("w0", ck.augment.w0 as f64),
        scalar("pi0", ck.augment.pi0),
        scalar("tta_samples", ck.augment.tta_samples as f64),
        scalar("augment_enabled", f64::from(u8::from(ck.augment.enabled))),
    ]
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = meta_tensors(ck);
    for store in ck.model.all_stores() {
        for p in store.iter() {
            entries.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, data);
    }
    Ok(out)
}

fn parse_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("checkpoint: tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.f32s(numel)?;
        if entries.iter().any(|(n, _): &(String, Tensor)| *n == name) {
            return Err(Error::Format(format!("checkpoint: tensor {name:?} appears twice")));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok(entries)
}

fn meta<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a [f64]> {
    let full = format!("meta.{name}");
    entries
        .iter()
        .find(|(n, _)| *n == full)
        .map(|(_, t)| t.data())
        .ok_or_else(|| Error::Format(format!("checkpoint: missing tensor {full:?}")))
}

fn meta_usize(entries: &[(String, Tensor)], name: &str) -> Result<usize> {
    let v = meta(entries, name)?;
    match v {
        [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
        _ => Err(Error::Format(format!("checkpoint: meta.{name} is not a count"))),
    }
}

fn meta_list(entries: &[(String, Tensor)], name: &str) -> Result<Vec<usize>> {
    Ok(meta(entries, name)?.iter().map(|&x| x as usize).collect())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let entries = parse_entries(bytes)?;
    let cfg = ModelConfig {
        input_dim: meta_usize(&entries, "input_dim")?,
        num_classes: meta_usize(&entries, "num_classes")?,
        num_activities: meta_usize(&entries, "num_activities")?,
        kernel: meta_usize(&entries, "kernel")?,
        depth: meta_usize(&entries, "depth")?,
        encoder_channels: meta_list(&entries, "encoder_channels")?,
        decoder_channels: meta_list(&entries, "decoder_channels")?,
        tpp_windows: meta_list(&entries, "tpp_windows")?,
        upsample_mode: if meta_usize(&entries, "upsample_nearest")? == 1 {
            UpsampleMode::Nearest
        } else {
            UpsampleMode::Linear
        },
        skip_connections: meta_usize(&entries, "skip_connections")? == 1,
        activity_hidden: meta_usize(&entries, "activity_hidden")?,
    };
    let mut model = Model::new(cfg, 0).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    let alpha = EnsembleWeights::normalized(meta(&entries, "alpha")?)
        .map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    let augment = AugmentConfig {
        w0: meta_usize(&entries, "w0")?,
        pi0: meta(&entries, "pi0")?[0],
        tta_samples: meta_usize(&entries, "tta_samples")?,
        enabled: meta_usize(&entries, "augment_enabled")? == 1,
    };
    let mut stored = ParamStore::new();
    for (name, t) in &entries {
        if !name.starts_with("meta.") {
            stored.add(name.clone(), t.clone(), false);
        }
    }
    let mut expected = 0;
    for store in model.all_stores_mut() {
        expected += store.len();
        store.load_from(&stored).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("checkpoint: {m}")),
            other => other,
        })?;
    }
    if stored.len() != expected {
        let known: Vec<String> = model.all_stores().iter().flat_map(|s| s.iter().map(|p| p.name.clone())).collect();
        let extra = stored.iter().find(|p| !known.contains(&p.name)).map(|p| p.name.clone()).unwrap_or_default();
        return Err(Error::Format(format!("checkpoint: unexpected tensor {extra:?}")));
    }
    if alpha.len() != model.config().depth {
        return Err(Error::Format("checkpoint: ensemble weights do not match depth".into()));
    }
    Ok(Checkpoint { model, alpha, augment })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

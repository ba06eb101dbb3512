//! Model checkpoints.
//!
//! Binary container: magic `RPCK0001`, an element-width tag, a canonical
//! `key=value` echo of the build config, then every param-store entry in
//! store order as `(name, trainable, shape, little-endian values)`. Values
//! round-trip bit-exactly. Loading rebuilds the model from the config echo
//! and overwrites its tensors, so a checkpoint is self-describing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::resnet::{build_model, ResNetConfig, ResNetModel, Stem};
use crate::simam::{Placement, SimAMConfig};

const MAGIC: &[u8; 8] = b"RPCK0001";

impl std::fmt::Display for Stem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stem::Paper1x1 => "paper_1x1",
            Stem::Classic7x7 => "classic_7x7",
            Stem::Small3x3 => "small_3x3",
        })
    }
}

impl std::str::FromStr for Stem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_1x1" => Ok(Stem::Paper1x1),
            "classic_7x7" => Ok(Stem::Classic7x7),
            "small_3x3" => Ok(Stem::Small3x3),
            other => Err(Error::Config(format!(
                "unknown stem {other:?} (expected paper_1x1, classic_7x7 or small_3x3)"
            ))),
        }
    }
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Placement::PerBlockAdditive => "per_block_additive",
            Placement::PerBlockResidual => "per_block_residual",
            Placement::AfterStage2 => "after_stage2",
            Placement::None => "none",
        })
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_block_additive" => Ok(Placement::PerBlockAdditive),
            "per_block_residual" => Ok(Placement::PerBlockResidual),
            "after_stage2" => Ok(Placement::AfterStage2),
            "none" => Ok(Placement::None),
            other => Err(Error::Config(format!(
                "unknown simam placement {other:?}"
            ))),
        }
    }
}

/// Canonical text echo of the config; stable field order, shortest
/// round-trip float formatting.
pub fn config_to_text(cfg: &ResNetConfig) -> String {
    format!(
        "input_channels={}\nnum_classes={}\nstem={}\nwidth_mult={}\nsimam_lambda={}\nsimam_placement={}\npost_add_relu={}\nstage_blocks={},{},{},{}\n",
        cfg.input_channels,
        cfg.num_classes,
        cfg.stem,
        cfg.width_mult,
        cfg.simam.lambda,
        cfg.simam.placement,
        cfg.post_add_relu,
        cfg.stage_blocks[0],
        cfg.stage_blocks[1],
        cfg.stage_blocks[2],
        cfg.stage_blocks[3],
    )
}

pub fn config_from_text(text: &str) -> Result<ResNetConfig> {
    let mut cfg = ResNetConfig::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
        let bad = |e: String| Error::Checkpoint(format!("config key {key}: {e}"));
        match key {
            "input_channels" => cfg.input_channels = value.parse().map_err(|e| bad(format!("{e}")))?,
            "num_classes" => cfg.num_classes = value.parse().map_err(|e| bad(format!("{e}")))?,
            "stem" => cfg.stem = value.parse()?,
            "width_mult" => cfg.width_mult = value.parse().map_err(|e| bad(format!("{e}")))?,
            "simam_lambda" => cfg.simam.lambda = value.parse().map_err(|e| bad(format!("{e}")))?,
            "simam_placement" => cfg.simam.placement = value.parse()?,
            "post_add_relu" => cfg.post_add_relu = value.parse().map_err(|e| bad(format!("{e}")))?,
            "stage_blocks" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.parse().map_err(|e| bad(format!("{e}"))))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(bad("expected four block counts".into()));
                }
                cfg.stage_blocks = [parts[0], parts[1], parts[2], parts[3]];
            }
            other => return Err(Error::Checkpoint(format!("unknown config key {other:?}"))),
        }
    }
    let _ = SimAMConfig::new(cfg.simam.lambda, cfg.simam.placement)?;
    Ok(cfg)
}

pub fn save<E: Elem>(model: &ResNetModel<E>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[std::mem::size_of::<E>() as u8])?;
    let cfg_text = config_to_text(model.config());
    w.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    w.write_all(cfg_text.as_bytes())?;
    w.write_all(&(model.store().len() as u32).to_le_bytes())?;
    for (name, tensor, trainable) in model.store().iter() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[trainable as u8])?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &e in tensor.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.values() {
            match std::mem::size_of::<E>() {
                4 => w.write_all(&(v.to_f64() as f32).to_le_bytes())?,
                _ => w.write_all(&v.to_f64().to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Element width (4 or 8 bytes) stored in a checkpoint, without loading it.
pub fn peek_elem_width(path: &Path) -> Result<u8> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    Ok(tag[0])
}

pub fn load<E: Elem>(path: &Path) -> Result<ResNetModel<E>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if tag[0] as usize != std::mem::size_of::<E>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {}-byte elements, expected {}",
            tag[0],
            std::mem::size_of::<E>()
        )));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let mut cfg_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.read_exact(&mut cfg_bytes)?;
    let cfg = config_from_text(
        std::str::from_utf8(&cfg_bytes)
            .map_err(|e| Error::Checkpoint(format!("config echo is not UTF-8: {e}")))?,
    )?;

    let mut model = build_model::<E>(&cfg, 0)?;
    r.read_exact(&mut len4)?;
    let count = u32::from_le_bytes(len4) as usize;
    if count != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} entries, model expects {}",
            model.store().len()
        )));
    }
    for id in model.store().ids().collect::<Vec<_>>() {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2)?;
        let mut name_bytes = vec![0u8; u16::from_le_bytes(len2) as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("entry name is not UTF-8: {e}")))?;
        if name != model.store().name(id) {
            return Err(Error::Checkpoint(format!(
                "entry {name:?} does not match model entry {:?}",
                model.store().name(id)
            )));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?; // trainable flag, implied by the rebuilt model
        r.read_exact(&mut b1)?;
        let rank = b1[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e8 = [0u8; 8];
            r.read_exact(&mut e8)?;
            shape.push(u64::from_le_bytes(e8) as usize);
        }
        if shape != model.store().get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "entry {name:?} has shape {shape:?}, model expects {:?}",
                model.store().get(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        match std::mem::size_of::<E>() {
            4 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                for c in buf.chunks_exact(4) {
                    values.push(E::from_f64(
                        f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
                    ));
                }
            }
            _ => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                for c in buf.chunks_exact(8) {
                    let mut a = [0u8; 8];
                    a.copy_from_slice(c);
                    values.push(E::from_f64(f64::from_le_bytes(a)));
                }
            }
        }
        let trainable = model.store().is_trainable(id);
        let mut t = crate::tensor::Tensor::from_parts(shape, values, trainable);
        t.set_requires_grad(trainable);
        *model.store_mut().get_mut(id) = t;
    }
    Ok(model)
}

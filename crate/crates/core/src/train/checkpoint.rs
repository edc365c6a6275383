//! Adaptor checkpoints.
//!
//! ```text
//! "WKCK" | version u32 | dtype u8 (4 = f32, 8 = f64) | guidance u8
//! | d_model u32 | d_text u32 | layers u32 | heads u32 | d_ff u32 | seed u64 | step u64
//! | has_optimizer u8
//! | every tensor in declared order, raw little-endian | log_scale
//! | [adam_step u64 | m tensors | v tensors | m_scale | v_scale]
//! | crc32 of all preceding bytes u32
//! ```
//!
//! Tensor shapes follow from the dims, so blobs carry no per-tensor headers. A JSON manifest
//! next to the file (`<path>.json`) lists names, shapes and training metadata.

use super::optim::AdamState;
use crate::codec::{crc32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real};
use crate::vgka::{AdaptorConfig, AdaptorParams, Guidance};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CKPT_MAGIC: &[u8; 4] = b"WKCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: AdaptorParams<T>,
    /// `ln(1/τ)`.
    pub log_scale: T,
    pub optimizer: Option<AdamState<T>>,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub config: AdaptorConfig,
    pub seed: u64,
    pub step: u64,
    pub param_count: usize,
    pub tau: f64,
    pub has_optimizer: bool,
    pub tensors: Vec<TensorInfo>,
    /// Free-form training metadata supplied by the caller.
    pub training: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    let c = &ck.params.config;
    let mut w = ByteWriter::new();
    w.bytes(CKPT_MAGIC);
    w.u32(CKPT_VERSION);
    w.u8(T::DTYPE.code());
    w.u8(c.guidance.code());
    for d in [c.d_model, c.d_text, c.layers, c.heads, c.d_ff] {
        w.len_u32(d);
    }
    w.u64(ck.seed);
    w.u64(ck.step);
    w.u8(ck.optimizer.is_some() as u8);
    for t in ck.params.tensors() {
        w.reals(t.data());
    }
    w.reals(&[ck.log_scale]);
    if let Some(o) = &ck.optimizer {
        w.u64(o.step);
        for t in o.m.tensors() {
            w.reals(t.data());
        }
        for t in o.v.tensors() {
            w.reals(t.data());
        }
        w.reals(&[o.m_scale, o.v_scale]);
    }
    let c = crc32(&[&w.buf]);
    w.u32(c);
    w.buf
}

/// Writes the checkpoint and its manifest.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    ck: &Checkpoint<T>,
    training: serde_json::Value,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, encode(ck))?;
    let manifest = CheckpointManifest {
        format: "WKCK".into(),
        version: CKPT_VERSION,
        dtype: T::DTYPE,
        config: ck.params.config,
        seed: ck.seed,
        step: ck.step,
        param_count: ck.params.param_count(),
        tau: (-ck.log_scale.as_f64()).exp(),
        has_optimizer: ck.optimizer.is_some(),
        tensors: ck
            .params
            .tensor_names()
            .into_iter()
            .zip(ck.params.tensors())
            .map(|(name, t)| TensorInfo {
                name,
                shape: [t.rows(), t.cols()],
            })
            .collect(),
        training,
    };
    std::fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_params<S: Real, T: Real>(
    r: &mut ByteReader,
    config: AdaptorConfig,
    what: &str,
) -> Result<AdaptorParams<T>> {
    let mut p = AdaptorParams::<T>::zeros(config);
    for t in p.tensors_mut() {
        let vals: Vec<S> = r.reals(t.len(), what)?;
        for (d, s) in t.data_mut().iter_mut().zip(vals) {
            *d = T::lit(s.as_f64());
        }
    }
    Ok(p)
}

fn read_scalar<S: Real, T: Real>(r: &mut ByteReader, what: &str) -> Result<T> {
    Ok(T::lit(r.reals::<S>(1, what)?[0].as_f64()))
}

fn decode_body<S: Real, T: Real>(
    r: &mut ByteReader,
    config: AdaptorConfig,
    has_opt: bool,
) -> Result<(AdaptorParams<T>, T, Option<AdamState<T>>)> {
    let params = read_params::<S, T>(r, config, "weights")?;
    let log_scale = read_scalar::<S, T>(r, "log scale")?;
    let optimizer = if has_opt {
        let step = r.u64("optimizer step")?;
        let m = read_params::<S, T>(r, config, "first moments")?;
        let v = read_params::<S, T>(r, config, "second moments")?;
        let m_scale = read_scalar::<S, T>(r, "scale moment")?;
        let v_scale = read_scalar::<S, T>(r, "scale moment")?;
        Some(AdamState {
            step,
            m,
            v,
            m_scale,
            v_scale,
        })
    } else {
        None
    };
    Ok((params, log_scale, optimizer))
}

/// Reads a checkpoint, converting to `T` if it was stored at the other precision.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let data = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::NotFound(format!("checkpoint {} does not exist", path.display()))
        }
        _ => e.into(),
    })?;
    decode_checkpoint(&data)
}

pub fn decode_checkpoint<T: Real>(data: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = ByteReader::new(data, 0);
    if r.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::format(0, None, "bad magic, expected \"WKCK\""));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(
            4,
            None,
            format!("unsupported checkpoint version {version}, this build reads {CKPT_VERSION}"),
        ));
    }
    if data.len() < 4 {
        return Err(r.err("truncated"));
    }
    let (body, tail) = data.split_at(data.len() - 4);
    if crc32(&[body]) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::Checksum {
            record: "checkpoint".into(),
            offset: body.len() as u64,
        });
    }
    let mut r = ByteReader::new(body, 0);
    r.take(8, "magic and version")?;
    let dtype_at = r.offset();
    let dtype = DType::from_code(r.u8("dtype")?)
        .ok_or_else(|| Error::format(dtype_at, None, "unknown dtype code"))?;
    let guidance =
        Guidance::from_code(r.u8("guidance")?).ok_or_else(|| r.err("unknown guidance code"))?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32("dims")? as usize;
    }
    let config = AdaptorConfig {
        d_model: dims[0],
        d_text: dims[1],
        layers: dims[2],
        heads: dims[3],
        d_ff: dims[4],
        guidance,
    };
    config.validate().map_err(|e| r.err(e.to_string()))?;
    let expect = config.param_count().saturating_mul(dtype.size());
    if expect > r.remaining() {
        return Err(r.err(format!(
            "checkpoint truncated: {} weight bytes expected, {} present",
            expect,
            r.remaining()
        )));
    }
    let seed = r.u64("seed")?;
    let step = r.u64("step")?;
    let has_opt = match r.u8("optimizer flag")? {
        0 => false,
        1 => true,
        _ => return Err(r.err("optimizer flag must be 0 or 1")),
    };
    let (params, log_scale, optimizer) = match dtype {
        DType::F32 => decode_body::<f32, T>(&mut r, config, has_opt)?,
        DType::F64 => decode_body::<f64, T>(&mut r, config, has_opt)?,
    };
    if r.remaining() != 0 {
        return Err(r.err("trailing bytes after checkpoint body"));
    }
    Ok(Checkpoint {
        params,
        log_scale,
        optimizer,
        seed,
        step,
    })
}

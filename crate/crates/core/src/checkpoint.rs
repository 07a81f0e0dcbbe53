//! Binary checkpoint container for parameters, config and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "NCASEGCP"
//! u32       format version (currently 1)
//! u64       config length L
//! L bytes   training config as UTF-8 `key = value` text
//! u32       tensor count
//! per tensor:
//!   u32       name length N
//!   N bytes   tensor name (UTF-8)
//!   u32       rank D
//!   D x u64   dimensions
//!   f64 x prod(dims)   values, row-major, raw IEEE-754 bit patterns
//! ```
//!
//! Parameter tensors use their field names (`kernel1` .. `classifier_b2`).
//! Optimizer state, when present, rides along as three extra tensors:
//! `adam_m`, `adam_v` (flat, one entry per parameter) and `adam_step`
//! (a single element). Adam hyperparameters are rebuilt from the embedded
//! config. Values round-trip bit-exactly because raw bit patterns are
//! stored.

use crate::config::{KeyValueFile, TrainConfig};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::{NcaParams, ParamDims};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NCASEGCP";
const FORMAT_VERSION: u32 = 1;

/// Everything a checkpoint file carries.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: NcaParams,
    pub config: TrainConfig,
    pub adam: Option<AdamState>,
}

/// Write a checkpoint. The file is written to a sibling temp path first and
/// renamed into place, so an interrupted save never leaves a torn file.
pub fn save_checkpoint(
    path: &Path,
    params: &NcaParams,
    config: &TrainConfig,
    adam: Option<&AdamState>,
) -> Result<()> {
    let display = path.display().to_string();
    let tmp_name = match path.file_name() {
        Some(name) => {
            let mut n = name.to_os_string();
            n.push(".tmp");
            n
        }
        None => return Err(Error::Checkpoint(format!("`{display}` is not a file path"))),
    };
    let tmp = path.with_file_name(tmp_name);
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&display, e))?;
        let mut w = BufWriter::new(file);
        write_body(&mut w, params, config, adam).map_err(|e| Error::io(&display, e))?;
        w.flush().map_err(|e| Error::io(&display, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

fn write_body(
    w: &mut impl Write,
    params: &NcaParams,
    config: &TrainConfig,
    adam: Option<&AdamState>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let cfg_text = config.to_key_value_string();
    w.write_all(&(cfg_text.len() as u64).to_le_bytes())?;
    w.write_all(cfg_text.as_bytes())?;

    let shapes = params.field_shapes();
    let slices = params.field_slices();
    let count = shapes.len() + if adam.is_some() { 3 } else { 0 };
    w.write_all(&(count as u32).to_le_bytes())?;
    for ((name, dims), data) in shapes.iter().zip(slices) {
        write_tensor(w, name, dims, data)?;
    }
    if let Some(state) = adam {
        write_tensor(w, "adam_m", &[state.m.len()], &state.m)?;
        write_tensor(w, "adam_v", &[state.v.len()], &state.v)?;
        write_tensor(w, "adam_step", &[1], &[state.step as f64])?;
    }
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, dims: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

/// Read a checkpoint back; fails on bad magic, unknown version, unknown or
/// missing tensors, or shapes inconsistent with the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, &display)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("`{display}` is not a checkpoint file (bad magic)")));
    }
    let version = read_u32(&mut r, &display)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "`{display}` has format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }

    let cfg_len = read_u64(&mut r, &display)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg_bytes, &display)?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| Error::Checkpoint(format!("`{display}`: embedded config is not UTF-8")))?;
    let mut config = TrainConfig::default();
    KeyValueFile::parse(&cfg_text)?.apply(&mut [&mut config])?;
    config.validate()?;
    let dims = ParamDims::from_config(&config);

    let count = read_u32(&mut r, &display)? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..count {
        let (name, shape, data) = read_tensor(&mut r, &display)?;
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("`{display}`: duplicate tensor `{name}`")));
        }
    }

    let mut params = NcaParams::zeros(dims);
    for (name, expected_shape) in params.field_shapes() {
        let (shape, data) = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("`{display}`: missing tensor `{name}`")))?;
        if shape != expected_shape {
            return Err(Error::Checkpoint(format!(
                "`{display}`: tensor `{name}` has shape {shape:?}, config implies {expected_shape:?}"
            )));
        }
        copy_field(&mut params, name, &data);
    }

    let adam = match (
        tensors.remove("adam_m"),
        tensors.remove("adam_v"),
        tensors.remove("adam_step"),
    ) {
        (None, None, None) => None,
        (Some((_, m)), Some((_, v)), Some((_, step))) => {
            let mut state = AdamState::new(dims, &config);
            if m.len() != state.m.len() || v.len() != state.v.len() {
                return Err(Error::Checkpoint(format!(
                    "`{display}`: optimizer moments have {} entries, config implies {}",
                    m.len(),
                    state.m.len()
                )));
            }
            let raw = step.first().copied().unwrap_or(-1.0);
            if !(raw >= 0.0 && raw.fract() == 0.0 && raw <= 2f64.powi(53)) {
                return Err(Error::Checkpoint(format!(
                    "`{display}`: adam_step value {raw} is not a step count"
                )));
            }
            state.m = m;
            state.v = v;
            state.step = raw as u64;
            Some(state)
        }
        _ => {
            return Err(Error::Checkpoint(format!(
                "`{display}`: optimizer state is incomplete (need adam_m, adam_v, adam_step)"
            )))
        }
    };

    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("`{display}`: unknown tensor `{name}`")));
    }

    Ok(Checkpoint { params, config, adam })
}

fn copy_field(params: &mut NcaParams, name: &str, data: &[f64]) {
    let idx = params
        .field_shapes()
        .iter()
        .position(|(n, _)| *n == name)
        .expect("caller passes a known field name");
    params.field_slices_mut()[idx].copy_from_slice(data);
}

fn read_tensor(r: &mut impl Read, path: &str) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = read_u32(r, path)? as usize;
    if name_len > 256 {
        return Err(Error::Checkpoint(format!("`{path}`: tensor name of {name_len} bytes")));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(r, &mut name_bytes, path)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Checkpoint(format!("`{path}`: tensor name is not UTF-8")))?;
    let rank = read_u32(r, path)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("`{path}`: tensor `{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = read_u64(r, path)? as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::Checkpoint(format!("`{path}`: tensor `{name}` size overflows")))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        read_exact(r, &mut buf, path)?;
        data.push(f64::from_bits(u64::from_le_bytes(buf)));
    }
    Ok((name, shape, data))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("`{path}`: truncated checkpoint"))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(u64::from_le_bytes(buf))
}

//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"UDCK"
//! version u32                       (currently 1)
//! scalar  u8                        (4 = f32 parameters, 8 = f64)
//! count   u32                       number of sections
//! section name_len u32, name bytes, payload_len u64, payload bytes
//! ```
//!
//! Sections written by this crate: `meta` (JSON), `config` (JSON model
//! configuration, so a checkpoint is enough to rebuild its network), `params`
//! (array table in the parameter scalar), `adam_m` / `adam_v` (array tables,
//! always f64). An array table is `count u32`, then per array: name, ndim
//! u8, dims u32 each, raw element bits in row-major order. Raw bits make a
//! save/load round trip exact, which the resume guarantee depends on.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"UDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// Which network the parameters belong to.
    pub model: String,
    /// Training iterations completed when the snapshot was taken.
    pub iter: u64,
    /// Adam timestep, equal to the number of optimizer steps applied.
    pub adam_t: u64,
    /// Seed the run was launched with.
    pub seed: u64,
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_array_f64(out: &mut Vec<u8>, name: &str, a: &ArrayD<f64>) {
    write_str(out, name);
    out.push(a.ndim() as u8);
    for d in a.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_array_t<T: Scalar>(out: &mut Vec<u8>, name: &str, a: &ArrayD<T>) {
    write_str(out, name);
    out.push(a.ndim() as u8);
    for d in a.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    match std::mem::size_of::<T>() {
        4 => {
            for v in a.iter() {
                out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
            }
        }
        8 => {
            for v in a.iter() {
                out.extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
            }
        }
        other => panic!("unsupported scalar width {other}"),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("bad utf-8 in name".into()))
    }

    fn array_f64(&mut self) -> Result<(String, ArrayD<f64>)> {
        let name = self.string()?;
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| Error::Format("array shape mismatch".into()))?;
        Ok((name, arr))
    }

    fn array_t<T: Scalar>(&mut self) -> Result<(String, ArrayD<T>)> {
        let name = self.string()?;
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let data: Vec<T> = match std::mem::size_of::<T>() {
            4 => self
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect(),
            8 => self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect(),
            other => panic!("unsupported scalar width {other}"),
        };
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| Error::Format("array shape mismatch".into()))?;
        Ok((name, arr))
    }
}

/// Everything read back from a checkpoint file.
pub struct LoadedCheckpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    /// The model configuration as saved, to be deserialized by the caller
    /// that knows which family `meta.model` names.
    pub config: serde_json::Value,
    pub params: Vec<(String, ArrayD<T>)>,
    pub adam: Option<AdamState>,
}

/// Writes a checkpoint; Adam state is optional so inference snapshots stay
/// lean.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    config: &serde_json::Value,
    store: &ParamStore<T>,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();

    let meta_json = serde_json::to_vec(meta)?;
    sections.push(("meta", meta_json));
    let config_json = serde_json::to_vec(config)?;
    sections.push(("config", config_json));

    let mut params = Vec::new();
    params.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, _, value) in store.iter() {
        write_array_t(&mut params, name, value);
    }
    sections.push(("params", params));

    if let Some(state) = adam {
        for (label, list) in [("adam_m", &state.m), ("adam_v", &state.v)] {
            let mut blob = Vec::new();
            blob.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for (arr, (name, _, _)) in list.iter().zip(store.iter()) {
                write_array_f64(&mut blob, name, arr);
            }
            sections.push((label, blob));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(std::mem::size_of::<T>() as u8);
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, payload) in &sections {
        write_str(&mut out, name);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`] with the same scalar
/// type.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind as usize != std::mem::size_of::<T>() {
        return Err(Error::Format(format!(
            "checkpoint stores {}-byte scalars, expected {}",
            kind,
            std::mem::size_of::<T>()
        )));
    }
    let count = r.u32()? as usize;
    let mut meta: Option<CheckpointMeta> = None;
    let mut config: Option<serde_json::Value> = None;
    let mut params: Option<Vec<(String, ArrayD<T>)>> = None;
    let mut adam_m: Option<Vec<(String, ArrayD<f64>)>> = None;
    let mut adam_v: Option<Vec<(String, ArrayD<f64>)>> = None;
    for _ in 0..count {
        let name = r.string()?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        let mut pr = Reader {
            buf: payload,
            pos: 0,
        };
        match name.as_str() {
            "meta" => meta = Some(serde_json::from_slice(payload)?),
            "config" => config = Some(serde_json::from_slice(payload)?),
            "params" => {
                let n = pr.u32()? as usize;
                let mut list = Vec::with_capacity(n);
                for _ in 0..n {
                    list.push(pr.array_t::<T>()?);
                }
                params = Some(list);
            }
            "adam_m" | "adam_v" => {
                let n = pr.u32()? as usize;
                let mut list = Vec::with_capacity(n);
                for _ in 0..n {
                    list.push(pr.array_f64()?);
                }
                if name == "adam_m" {
                    adam_m = Some(list);
                } else {
                    adam_v = Some(list);
                }
            }
            _ => {} // unknown sections are skipped for forward compatibility
        }
    }
    let meta = meta.ok_or_else(|| Error::Format("missing meta section".into()))?;
    let config = config.ok_or_else(|| Error::Format("missing config section".into()))?;
    let params = params.ok_or_else(|| Error::Format("missing params section".into()))?;
    let adam = match (adam_m, adam_v) {
        (Some(m), Some(v)) => {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(Error::Format("optimizer state length mismatch".into()));
            }
            Some(AdamState {
                m: m.into_iter().map(|(_, a)| a).collect(),
                v: v.into_iter().map(|(_, a)| a).collect(),
                t: meta.adam_t,
            })
        }
        (None, None) => None,
        _ => return Err(Error::Format("partial optimizer state".into())),
    };
    Ok(LoadedCheckpoint {
        meta,
        config,
        params,
        adam,
    })
}

/// Copies loaded parameter values into a freshly-built store. Names, order,
/// and shapes must all match; anything else is an error, not a warning.
pub fn restore_params<T: Scalar>(
    store: &mut ParamStore<T>,
    loaded: &[(String, ArrayD<T>)],
) -> Result<()> {
    if loaded.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, value)) in ids.into_iter().zip(loaded) {
        if store.name(id) != name {
            return Err(Error::Format(format!(
                "parameter order mismatch: {} vs {}",
                store.name(id),
                name
            )));
        }
        if store.get(id).shape() != value.shape() {
            return Err(Error::Format(format!("parameter {name} shape mismatch")));
        }
        store.set(id, value.clone());
    }
    Ok(())
}

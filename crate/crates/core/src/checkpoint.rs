//! Parameter checkpoint archive.
//!
//! Layout: 8-byte magic `APKCKPT1`, a little-endian u32 manifest length, a
//! JSON manifest (groups in order, freeze flags, parameter names and shapes),
//! then every tensor's values as raw little-endian f32 in manifest order.
//! Saving and reloading an f32 store is bit-exact.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"APKCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestParam {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestGroup {
    pub name: String,
    pub frozen: bool,
    pub params: Vec<ManifestParam>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub groups: Vec<ManifestGroup>,
}

pub fn save<E: Scalar>(store: &ParamStore<E>, path: &Path) -> Result<()> {
    let mut groups = Vec::new();
    for gname in store.group_names() {
        let params = store
            .group_params(gname)
            .iter()
            .map(|&id| {
                let (_, pname) = store.meta(id);
                ManifestParam {
                    name: pname.to_string(),
                    shape: store.get(id).shape().to_vec(),
                }
            })
            .collect();
        groups.push(ManifestGroup {
            name: gname.to_string(),
            frozen: store.is_frozen(gname),
            params,
        });
    }
    let manifest = serde_json::to_vec(&Manifest { groups })?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    for gname in store.group_names() {
        for &id in store.group_params(gname) {
            for v in store.get(id).data() {
                let f = v.to_f64().unwrap_or(f64::NAN) as f32;
                w.write_all(&f.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a parameter checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(serde_json::from_slice(&buf)?)
}

/// Load values into an existing store whose structure must match the file
/// exactly (same groups, names, shapes). Freeze flags from the file are
/// applied to the store.
pub fn load_into<E: Scalar>(store: &mut ParamStore<E>, path: &Path) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a parameter checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    let manifest: Manifest = serde_json::from_slice(&buf)?;

    let mut seen = 0usize;
    for group in &manifest.groups {
        for param in &group.params {
            let id = store.id_of(&group.name, &param.name).ok_or_else(|| {
                Error::Data(format!(
                    "checkpoint parameter {}/{} not present in model",
                    group.name, param.name
                ))
            })?;
            if store.get(id).shape() != param.shape.as_slice() {
                return Err(Error::Data(format!(
                    "shape of {}/{}: checkpoint {:?} vs model {:?}",
                    group.name,
                    param.name,
                    param.shape,
                    store.get(id).shape()
                )));
            }
            let numel: usize = param.shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            let values = store.get_mut(id).data_mut();
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                let f = f32::from_le_bytes(chunk.try_into().unwrap());
                values[i] = crate::tensor::lit::<E>(f as f64);
            }
            seen += 1;
        }
    }
    if seen != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {seen} parameters, model has {}",
            store.len()
        )));
    }
    for group in &manifest.groups {
        store.set_frozen(&group.name, group.frozen)?;
    }
    Ok(())
}

//! On-disk parameter sets: a `manifest.json` (names → shapes) plus one
//! little-endian f32 blob per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    dtype: String,
    order: Vec<String>,
    shapes: BTreeMap<String, Vec<usize>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn blob_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

pub fn save_params<T: Scalar>(dir: &Path, params: &ParamSet<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut shapes = BTreeMap::new();
    for (name, t) in params.iter() {
        if name.contains(['/', '\\']) {
            return Err(Error::Param {
                name: name.into(),
                msg: "parameter names may not contain path separators".into(),
            });
        }
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        let path = blob_path(dir, name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        shapes.insert(name.to_string(), t.shape().to_vec());
    }
    let manifest = Manifest {
        dtype: "f32le".into(),
        order: params.names().to_vec(),
        shapes,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Manifest {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_params<T: Scalar>(dir: &Path) -> Result<ParamSet<T>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Manifest {
        path: path.clone(),
        source,
    })?;
    if manifest.dtype != "f32le" {
        return Err(Error::Param {
            name: path.display().to_string(),
            msg: format!("unsupported dtype {}", manifest.dtype),
        });
    }
    let mut out = ParamSet::new();
    for name in &manifest.order {
        let shape = manifest.shapes.get(name).ok_or_else(|| Error::Param {
            name: name.clone(),
            msg: "listed in order but has no shape".into(),
        })?;
        let blob = blob_path(dir, name);
        let bytes = fs::read(&blob).map_err(io_err(&blob))?;
        let expected: usize = shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Param {
                name: name.clone(),
                msg: format!("blob has {} bytes, shape {shape:?} needs {expected}", bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push(name.clone(), Tensor::new(shape, data)?)?;
    }
    Ok(out)
}

/// Copies tensors from `source` into `target`, requiring identical names and shapes.
pub fn assign_params<T: Scalar>(target: &mut ParamSet<T>, source: &ParamSet<T>) -> Result<()> {
    for i in 0..target.len() {
        let name = target.names()[i].clone();
        let src = source.by_name(&name).ok_or_else(|| Error::Param {
            name: name.clone(),
            msg: "missing from loaded weights".into(),
        })?;
        if src.shape() != target.get(i).shape() {
            return Err(Error::Param {
                name,
                msg: format!(
                    "shape mismatch: loaded {:?}, model expects {:?}",
                    src.shape(),
                    target.get(i).shape()
                ),
            });
        }
        *target.get_mut(i) = src.clone();
    }
    Ok(())
}

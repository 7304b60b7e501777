// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk tensor directories: `manifest.json` plus one raw little-endian
//! blob per named tensor. Checkpoints, activation banks, Transform Matrix
//! fits and activation dumps all use this layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "cctune-tensors/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    /// Start of the tensor inside `file`.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined metadata (config echo, training state, ...).
    pub meta: serde_json::Value,
}

fn blob_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.bin")
}

fn tmp_sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Writes `tensors` under `dir`, replacing any previous contents
/// atomically: everything lands in a sibling temp directory first, which is
/// then renamed into place.
pub fn write_tensor_dir<T: Scalar>(
    dir: &Path,
    tensors: &[(String, &Tensor<T>)],
    meta: serde_json::Value,
) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = tmp_sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in tensors {
        let file = blob_name(name);
        if !seen.insert(file.clone()) {
            return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
        }
        let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
        fs::write(tmp.join(&file), &bytes)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.into(),
            file,
            offset: 0,
            nbytes: bytes.len() as u64,
        });
    }
    let manifest = TensorManifest {
        format: FORMAT.into(),
        tensors: entries,
        meta,
    };
    fs::write(
        tmp.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    if dir.exists() {
        let old = tmp_sibling(dir, "old");
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<TensorManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let m: TensorManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint {
            name: MANIFEST.into(),
            msg: format!("unsupported format `{}`", m.format),
        });
    }
    Ok(m)
}

/// Reads every tensor listed in `dir`'s manifest, in manifest order.
pub fn read_tensor_dir<T: Scalar>(
    dir: &Path,
) -> Result<(Vec<(String, Tensor<T>)>, serde_json::Value)> {
    let m = read_manifest(dir)?;
    let mut out = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        let bad = |msg: String| Error::Checkpoint {
            name: e.name.clone(),
            msg,
        };
        if e.dtype != T::DTYPE {
            return Err(bad(format!(
                "dtype {} where {} was expected",
                e.dtype,
                T::DTYPE
            )));
        }
        let count: usize = e.shape.iter().product();
        if e.shape.is_empty() || count == 0 || e.nbytes != (count * T::BYTES) as u64 {
            return Err(bad(format!(
                "shape {:?} disagrees with {} bytes",
                e.shape, e.nbytes
            )));
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| bad(format!("{}: {err}", path.display())))?;
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        if bytes.len() < end {
            return Err(bad(format!(
                "blob holds {} bytes, manifest needs {end}",
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((out, m.meta))
}

/// Looks a tensor up by name, erroring with the name when absent.
pub fn take_tensor<T>(tensors: &mut Vec<(String, Tensor<T>)>, name: &str) -> Result<Tensor<T>> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Checkpoint {
            name: name.into(),
            msg: "missing from manifest".into(),
        })?;
    Ok(tensors.remove(i).1)
}

//! Binary parameter files: magic, version, JSON header, little-endian f64
//! tensor data, then a SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PolicyParameters, PolicyShape};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KTPOLICY";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamFileMeta {
    /// Model family, e.g. "retriever" or "promptpg".
    pub kind: String,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: ParamFileMeta,
    dims: Vec<(String, usize)>,
    tensors: Vec<TensorEntry>,
}

/// A named tensor read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_tensor_file(
    path: &Path,
    meta: &ParamFileMeta,
    dims: &[(&str, usize)],
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        dims: dims.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, _, data) in tensors {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("refusing to save tensor `{name}`")));
        }
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&buf).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<(ParamFileMeta, Vec<(String, usize)>, Vec<StoredTensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a parameter file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let hend = 16 + hlen;
    if body.len() < hend {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[16..hend]).map_err(|e| bad(&e.to_string()))?;
    let mut data = body[hend..].chunks_exact(8);
    if !data.remainder().is_empty() {
        return Err(bad("misaligned tensor data"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let values: Vec<f64> = data
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.len() != n {
            return Err(bad(&format!("tensor `{}` is truncated", t.name)));
        }
        tensors.push(StoredTensor {
            name: t.name,
            shape: t.shape,
            data: values,
        });
    }
    if data.next().is_some() {
        return Err(bad("trailing tensor data"));
    }
    Ok((header.meta, header.dims, tensors))
}

pub fn save_params(path: &Path, params: &PolicyParameters, meta: &ParamFileMeta) -> Result<()> {
    let s = params.shape;
    write_tensor_file(
        path,
        meta,
        &[("embedding_dim", s.embedding_dim), ("hidden", s.hidden), ("layers", s.layers)],
        &params.tensors(),
    )
}

pub fn load_params(path: &Path) -> Result<(PolicyParameters, ParamFileMeta)> {
    let (meta, dims, tensors) = read_tensor_file(path)?;
    let dim = |k: &str| {
        dims.iter()
            .find(|(n, _)| n == k)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Format(format!("{}: missing dimension `{k}`", path.display())))
    };
    let shape = PolicyShape {
        embedding_dim: dim("embedding_dim")?,
        hidden: dim("hidden")?,
        layers: dim("layers")?,
    };
    if shape.embedding_dim == 0 || shape.hidden == 0 || shape.layers == 0 {
        return Err(Error::Format(format!("{}: zero policy dimension", path.display())));
    }
    let mut params = PolicyParameters::zeros(shape);
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != tensors.len() {
        return Err(Error::Format(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            expected.len(),
            tensors.len()
        )));
    }
    for (((name, shape), (_, dst)), stored) in expected.iter().zip(params.tensors_mut()).zip(&tensors) {
        if &stored.name != name || &stored.shape != shape {
            return Err(Error::Format(format!(
                "{}: tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                path.display(),
                stored.name,
                stored.shape
            )));
        }
        dst.copy_from_slice(&stored.data);
    }
    Ok((params, meta))
}

/// Loads and checks that the stored shape and model kind match.
pub fn load_params_expecting(path: &Path, shape: PolicyShape, kind: &str) -> Result<(PolicyParameters, ParamFileMeta)> {
    let (params, meta) = load_params(path)?;
    if params.shape != shape {
        return Err(Error::Format(format!(
            "{}: stored shape {:?} differs from configured {:?}",
            path.display(),
            params.shape,
            shape
        )));
    }
    if meta.kind != kind {
        return Err(Error::Format(format!("{}: stored kind `{}`, expected `{kind}`", path.display(), meta.kind)));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_params;

    fn meta() -> ParamFileMeta {
        ParamFileMeta {
            kind: "retriever".into(),
            seed: 5,
            config_digest: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let p = init_params(6, 4, 2, 1).unwrap();
        save_params(&path, &p, &meta()).unwrap();
        let (q, m) = load_params(&path).unwrap();
        assert_eq!(m, meta());
        let a: Vec<u64> = p.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = q.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_and_shape_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let p = init_params(6, 4, 1, 1).unwrap();
        save_params(&path, &p, &meta()).unwrap();
        let other = PolicyShape {
            embedding_dim: 6,
            hidden: 8,
            layers: 1,
        };
        assert!(matches!(load_params_expecting(&path, other, "retriever"), Err(Error::Format(_))));
        assert!(matches!(load_params_expecting(&path, p.shape, "promptpg"), Err(Error::Format(_))));
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(matches!(err, Error::Format(m) if m.contains("checksum")));
    }

    #[test]
    fn non_finite_parameters_are_not_saved() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = init_params(3, 2, 1, 1).unwrap();
        p.b0[1] = f64::INFINITY;
        assert!(matches!(save_params(&dir.path().join("x"), &p, &meta()), Err(Error::NonFinite(_))));
    }
}

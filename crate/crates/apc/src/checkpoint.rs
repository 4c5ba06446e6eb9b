//! Checkpoint blobs: a header describing dimensions plus named f64 arrays,
//! little-endian throughout. The same format backs model checkpoints and
//! prototype bank dumps.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, RealArray};

const MAGIC: u32 = 0x4150434b; // "APCK"
const VERSION: u32 = 1;

/// Write named blobs with a JSON header (dims, counts).
pub fn write_blobs<H: Serialize>(
    path: &Path,
    header: &H,
    blobs: &IndexMap<String, RealArray>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC.to_le_bytes());
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header_json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, arr) in blobs {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(arr.shape().len() as u32).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in arr.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_blobs<H: DeserializeOwned>(path: &Path) -> Result<(H, IndexMap<String, RealArray>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let mut need = |n: usize| -> Result<&[u8]> {
        if off + n > bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated", path.display())));
        }
        let s = &bytes[off..off + n];
        off += n;
        Ok(s)
    };
    let magic = u32::from_le_bytes(need(4)?.try_into().unwrap());
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(need(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(need(4)?.try_into().unwrap()) as usize;
    let header: H = serde_json::from_slice(need(hlen)?)?;
    let count = u32::from_le_bytes(need(4)?.try_into().unwrap()) as usize;
    let mut blobs = IndexMap::with_capacity(count);
    for _ in 0..count {
        let nlen = u32::from_le_bytes(need(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(need(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 blob name".into()))?;
        let ndim = u32::from_le_bytes(need(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(need(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(need(8)?.try_into().unwrap()));
        }
        blobs.insert(name, RealArray::new(shape, data)?);
    }
    Ok((header, blobs))
}

/// Collect a parameter set into blobs under a section prefix
/// (`"{section}/{param name}"`).
pub fn collect_section(blobs: &mut IndexMap<String, RealArray>, section: &str, set: &ParamSet) {
    for p in set.iter() {
        blobs.insert(format!("{section}/{}", p.name), p.value.clone());
    }
}

/// Load a section back into an existing parameter set with strict name and
/// shape checking: every parameter must be present with the stored shape.
pub fn load_section(
    blobs: &IndexMap<String, RealArray>,
    section: &str,
    set: &mut ParamSet,
) -> Result<()> {
    for p in set.iter_mut() {
        let key = format!("{section}/{}", p.name);
        let arr = blobs
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {key}")))?;
        if arr.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "blob {key}: shape {:?} does not match expected {:?}",
                arr.shape(),
                p.value.shape()
            )));
        }
        p.value = arr.clone();
    }
    Ok(())
}

/// Load only the parameters of `set` whose names start with `prefix`,
/// strictly checking presence and shape.
pub fn load_prefixed(
    blobs: &IndexMap<String, RealArray>,
    section: &str,
    set: &mut ParamSet,
    prefix: &str,
) -> Result<()> {
    for p in set.iter_mut() {
        if !p.name.starts_with(prefix) {
            continue;
        }
        let key = format!("{section}/{}", p.name);
        let arr = blobs
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {key}")))?;
        if arr.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "blob {key}: shape {:?} does not match expected {:?}",
                arr.shape(),
                p.value.shape()
            )));
        }
        p.value = arr.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Header {
        dim: usize,
        count: usize,
    }

    #[test]
    fn blob_round_trip_with_strict_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut set = ParamSet::new();
        set.insert("a.w", RealArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        set.insert("a.b", RealArray::new(vec![3], vec![-1.0, 0.5, 2.25]).unwrap(), false);
        let mut blobs = IndexMap::new();
        collect_section(&mut blobs, "model", &set);
        write_blobs(&path, &Header { dim: 3, count: 2 }, &blobs).unwrap();

        let (header, loaded): (Header, _) = read_blobs(&path).unwrap();
        assert_eq!(header, Header { dim: 3, count: 2 });
        let mut restored = ParamSet::new();
        restored.insert("a.w", RealArray::zeros(&[2, 3]), true);
        restored.insert("a.b", RealArray::zeros(&[3]), false);
        load_section(&loaded, "model", &mut restored).unwrap();
        assert_eq!(restored.get("a.w").unwrap().value, set.get("a.w").unwrap().value);
        assert_eq!(restored.get("a.b").unwrap().value, set.get("a.b").unwrap().value);

        // wrong shape is rejected
        let mut bad = ParamSet::new();
        bad.insert("a.w", RealArray::zeros(&[3, 2]), true);
        assert!(load_section(&loaded, "model", &mut bad).is_err());
        // missing name is rejected
        let mut missing = ParamSet::new();
        missing.insert("a.nope", RealArray::zeros(&[1]), true);
        assert!(load_section(&loaded, "model", &mut missing).is_err());
    }
}

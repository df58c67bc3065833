//! "ADVW" tensor container: the on-disk format shared by model weights and
//! adversarial example batches.
//!
//! Layout: magic `ADVW`, version (u32 LE, = 1), tensor count (u32 LE), then
//! per tensor: name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE
//! each), values (f64 LE, row-major). Metadata travels as a final
//! tensor-like entry named `__meta__` whose values are the UTF-8 bytes of
//! key=value lines.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADVW";
pub const VERSION: u32 = 1;
pub const META_NAME: &str = "__meta__";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta_value(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("missing metadata key `{key}`"),
            })
    }
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    buf.write_u32::<LittleEndian>(name.len() as u32)?;
    buf.write_all(name.as_bytes())?;
    buf.write_u32::<LittleEndian>(t.shape.len() as u32)?;
    for &d in &t.shape {
        buf.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in &t.values {
        buf.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn save(archive: &Archive, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_u32::<LittleEndian>(VERSION)?;
    buf.write_u32::<LittleEndian>((archive.tensors.len() + 1) as u32)?;
    for (name, t) in &archive.tensors {
        if name == META_NAME {
            return Err(Error::InvalidInput(format!("`{META_NAME}` is reserved")));
        }
        write_tensor(&mut buf, name, t)?;
    }
    let meta_text: String = archive
        .meta
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    let meta_values: Vec<f64> = meta_text.bytes().map(|b| b as f64).collect();
    let meta_tensor = Tensor::new(vec![meta_values.len()], meta_values)?;
    write_tensor(&mut buf, META_NAME, &meta_tensor)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn fmt_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn load(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor::new(bytes);

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| fmt_err(0, "file too short for magic"))?;
    if &magic != MAGIC {
        return Err(fmt_err(0, format!("bad magic {magic:?}, expected ADVW")));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| fmt_err(4, "truncated version"))?;
    if version != VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let count = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| fmt_err(8, "truncated tensor count"))? as usize;

    let mut archive = Archive::default();
    for _ in 0..count {
        let off = cur.position();
        let name_len = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt_err(off, "truncated name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)
            .map_err(|_| fmt_err(cur.position(), "truncated name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| fmt_err(off, "tensor name is not UTF-8"))?;
        let rank = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt_err(cur.position(), "truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.read_u32::<LittleEndian>().map_err(|_| {
                fmt_err(cur.position(), "truncated dims")
            })? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(cur.read_f64::<LittleEndian>().map_err(|_| {
                fmt_err(cur.position(), format!("truncated values for `{name}`"))
            })?);
        }
        if name == META_NAME {
            let text: String = values
                .iter()
                .map(|&v| v as u8 as char)
                .collect();
            for line in text.lines() {
                if let Some((k, v)) = line.split_once('=') {
                    archive.meta.insert(k.to_string(), v.to_string());
                }
            }
        } else {
            archive.tensors.push((name, Tensor::new(shape, values)?));
        }
    }
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("advbench-container-{}-{name}", std::process::id()))
    }

    fn sample() -> Archive {
        let mut meta = BTreeMap::new();
        meta.insert("arch".to_string(), "cnn-a".to_string());
        meta.insert("seed".to_string(), "42".to_string());
        Archive {
            tensors: vec![
                ("w".into(), Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, f64::MIN_POSITIVE, 3.0]).unwrap()),
                ("b".into(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
            meta,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let path = tmp("rt.advw");
        let a = sample();
        save(&a, &path).unwrap();
        let b = load(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_magic_rejected() {
        let path = tmp("magic.advw");
        save(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn wrong_version_rejected() {
        let path = tmp("version.advw");
        save(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncated_file_rejected() {
        let path = tmp("trunc.advw");
        save(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));
    }
}

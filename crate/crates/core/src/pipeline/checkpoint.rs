//! Versioned binary checkpoint: named sections of named f32 tensors, plus
//! the config snapshot and step counter. Tensor payloads are raw
//! little-endian f32, so a save/load round trip is bit-exact.

use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TRYONCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub data: ArrayD<f32>,
}

#[derive(Debug, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub config_text: String,
    pub sections: BTreeMap<String, Vec<TensorEntry>>,
    /// Opaque trainer state (rng position, optimizer step counters).
    pub extra: BTreeMap<String, Vec<u8>>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("checkpoint: invalid utf8 string"))
}

fn write_tensor(w: &mut impl Write, t: &TensorEntry) -> Result<()> {
    write_str(w, &t.name)?;
    write_u32(w, t.data.ndim() as u32)?;
    for &d in t.data.shape() {
        write_u64(w, d as u64)?;
    }
    let std_layout = t.data.as_standard_layout();
    let slice = std_layout.as_slice().unwrap();
    let mut bytes = Vec::with_capacity(slice.len() * 4);
    for v in slice {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_u64(w, bytes.len() as u64)?;
    w.write_all(&bytes)?;
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<TensorEntry> {
    let name = read_str(r)?;
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let nbytes = read_u64(r)? as usize;
    let mut bytes = vec![0u8; nbytes];
    r.read_exact(&mut bytes)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = ArrayD::from_shape_vec(IxDyn(&shape), values)
        .map_err(|_| Error::format(format!("checkpoint tensor `{name}`: shape/data mismatch")))?;
    Ok(TensorEntry { name, data })
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, FORMAT_VERSION)?;
        write_u64(&mut w, self.step)?;
        write_str(&mut w, &self.config_text)?;
        write_u32(&mut w, self.sections.len() as u32)?;
        for (name, entries) in &self.sections {
            write_str(&mut w, name)?;
            write_u32(&mut w, entries.len() as u32)?;
            for e in entries {
                write_tensor(&mut w, e)?;
            }
        }
        write_u32(&mut w, self.extra.len() as u32)?;
        for (name, bytes) in &self.extra {
            write_str(&mut w, name)?;
            write_u64(&mut w, bytes.len() as u64)?;
            w.write_all(bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let step = read_u64(&mut r)?;
        let config_text = read_str(&mut r)?;
        let n_sections = read_u32(&mut r)? as usize;
        let mut sections = BTreeMap::new();
        for _ in 0..n_sections {
            let name = read_str(&mut r)?;
            let count = read_u32(&mut r)? as usize;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                entries.push(read_tensor(&mut r)?);
            }
            sections.insert(name, entries);
        }
        let n_extra = read_u32(&mut r)? as usize;
        let mut extra = BTreeMap::new();
        for _ in 0..n_extra {
            let name = read_str(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            extra.insert(name, bytes);
        }
        Ok(Checkpoint {
            step,
            config_text,
            sections,
            extra,
        })
    }

    /// Copy entries into a parameter/buffer list, matching strictly by name
    /// and shape.
    pub fn apply_section(
        &self,
        section: &str,
        params: &[std::rc::Rc<crate::nn::Param>],
        buffers: &[std::rc::Rc<crate::nn::Buffer>],
    ) -> Result<()> {
        let entries = self
            .sections
            .get(section)
            .ok_or_else(|| Error::format(format!("checkpoint: missing section `{section}`")))?;
        let by_name: std::collections::HashMap<&str, &TensorEntry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let expected = params.len() + buffers.len();
        if entries.len() != expected {
            return Err(Error::format(format!(
                "checkpoint section `{section}`: {} entries, expected {expected}",
                entries.len()
            )));
        }
        for p in params {
            let e = by_name.get(p.name()).ok_or_else(|| {
                Error::format(format!("checkpoint section `{section}`: missing `{}`", p.name()))
            })?;
            if e.data.shape() != p.shape() {
                return Err(Error::format(format!(
                    "checkpoint `{}`: shape {:?} incompatible with model {:?}",
                    p.name(),
                    e.data.shape(),
                    p.shape()
                )));
            }
            p.set(e.data.clone());
        }
        for b in buffers {
            let e = by_name.get(b.name.as_str()).ok_or_else(|| {
                Error::format(format!("checkpoint section `{section}`: missing `{}`", b.name))
            })?;
            *b.value.borrow_mut() = e.data.clone();
        }
        Ok(())
    }
}

/// Collect a network's parameters and buffers into section entries.
pub fn section_of(
    params: &[std::rc::Rc<crate::nn::Param>],
    buffers: &[std::rc::Rc<crate::nn::Buffer>],
) -> Vec<TensorEntry> {
    let mut entries: Vec<TensorEntry> = params
        .iter()
        .map(|p| TensorEntry {
            name: p.name().to_string(),
            data: p.value(),
        })
        .collect();
    entries.extend(buffers.iter().map(|b| TensorEntry {
        name: b.name.clone(),
        data: b.value.borrow().clone(),
    }));
    entries
}

//! Binary checkpoint format.
//!
//! ```text
//! "MSPN"  version:u8 (0x01 pooling network, 0x02 patch network)
//! config  little-endian u32 words (layout depends on version)
//! names   u32 count, then per name: u32 byte length + UTF-8 bytes
//! params  u32 tensor count, then per tensor: u32 element count + f32 LE values
//! ```
//!
//! Tensors follow the fixed node order conv1..conv4, fc1, fc2, fc-out,
//! weights before bias.

use super::{Architecture, MspnConfig, NetworkGraph, PatchNetConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::PoolMode;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MSPN";
pub const VERSION_MSPN: u8 = 0x01;
pub const VERSION_PATCH: u8 = 0x02;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialises `graph` into `out`. Values are stored as `f32`.
pub fn write_checkpoint<T: Scalar, W: Write>(graph: &NetworkGraph<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    match graph.architecture() {
        Architecture::Mspn(c) => {
            buf.push(VERSION_MSPN);
            let mode = match c.ssp_mode {
                PoolMode::Max => 0,
                PoolMode::Average => 1,
            };
            let mask = c.enabled.iter().enumerate().fold(0, |m, (i, &e)| m | ((e as usize) << i));
            for v in [c.in_channels, c.input_height]
                .into_iter()
                .chain(c.channels)
                .chain(c.fc_widths)
                .chain([c.n_classes, mode, mask])
            {
                put_u32(&mut buf, v)?;
            }
        }
        Architecture::Patch(c) => {
            buf.push(VERSION_PATCH);
            for v in [c.in_channels, c.patch_size]
                .into_iter()
                .chain(c.channels)
                .chain(c.fc_widths)
                .chain([c.n_classes])
            {
                put_u32(&mut buf, v)?;
            }
        }
    }
    put_u32(&mut buf, graph.class_names().len())?;
    for name in graph.class_names() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
    }
    let params = graph.params();
    put_u32(&mut buf, params.len())?;
    for p in params {
        put_u32(&mut buf, p.len())?;
        for v in p {
            let f = v.to_f32().ok_or_else(|| Error::contract("parameter not representable as f32"))?;
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn save_checkpoint<T: Scalar>(graph: &NetworkGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(graph, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint, validating the embedded configuration and every
/// declared tensor size against it.
pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<NetworkGraph<T>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = cur.take(1, "version")?[0];
    let config_at = cur.pos;
    let arch = match version {
        VERSION_MSPN => {
            let mut w = [0usize; 11];
            for (i, slot) in w.iter_mut().enumerate() {
                *slot = cur.u32(&format!("config word {i}"))?;
            }
            let ssp_mode = match w[9] {
                0 => PoolMode::Max,
                1 => PoolMode::Average,
                m => return Err(cur.fail(format!("unknown ssp mode {m}"))),
            };
            if w[10] > 0b111 {
                return Err(cur.fail(format!("invalid ssp stage mask {:#b}", w[10])));
            }
            Architecture::Mspn(MspnConfig {
                in_channels: w[0],
                input_height: w[1],
                channels: [w[2], w[3], w[4], w[5]],
                fc_widths: [w[6], w[7]],
                n_classes: w[8],
                ssp_mode,
                enabled: [0, 1, 2].map(|i| w[10] & (1 << i) != 0),
            })
        }
        VERSION_PATCH => {
            let mut w = [0usize; 9];
            for (i, slot) in w.iter_mut().enumerate() {
                *slot = cur.u32(&format!("config word {i}"))?;
            }
            Architecture::Patch(PatchNetConfig {
                in_channels: w[0],
                patch_size: w[1],
                channels: [w[2], w[3], w[4], w[5]],
                fc_widths: [w[6], w[7]],
                n_classes: w[8],
            })
        }
        v => {
            return Err(Error::Checkpoint {
                offset: 4,
                reason: format!("unsupported version {v:#04x}"),
            })
        }
    };
    let mut graph = NetworkGraph::<T>::zeroed(arch).map_err(|e| Error::Checkpoint {
        offset: config_at as u64,
        reason: format!("invalid embedded config: {e}"),
    })?;

    let n_names = cur.u32("class name count")?;
    if n_names != graph.n_classes() {
        return Err(cur.fail(format!("{n_names} class names for {} classes", graph.n_classes())));
    }
    let mut names = Vec::with_capacity(n_names);
    for _ in 0..n_names {
        let len = cur.u32("class name length")?;
        let raw = cur.take(len, "class name")?;
        let name = std::str::from_utf8(raw).map_err(|_| cur.fail("class name is not UTF-8"))?;
        names.push(name.to_string());
    }
    graph.set_class_names(names)?;

    let n_tensors = cur.u32("tensor count")?;
    let expected = graph.params().len();
    if n_tensors != expected {
        return Err(cur.fail(format!("declares {n_tensors} tensors, config implies {expected}")));
    }
    for (i, slot) in graph.params_mut().into_iter().enumerate() {
        let len = cur.u32("tensor length")?;
        if len != slot.len() {
            return Err(cur.fail(format!("tensor {i} declares {len} values, config implies {}", slot.len())));
        }
        let raw = cur.take(4 * len, "tensor values")?;
        for (dst, b) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
    }
    if cur.pos != bytes.len() {
        return Err(cur.fail(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(graph)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<NetworkGraph<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

//! Binary network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DCPCKPT\0"
//! version u32      1
//! then sections, each: tag [u8; 4], length u64, payload
//!   "HEAD"  UTF-8 JSON: provenance, array lengths, network skeleton
//!   "DATA"  f64 values of every array, in skeleton order
//! ```
//!
//! A JSON sidecar `<path>.json` repeats the provenance for humans.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ArrayMut, Complexity, NetworkDef};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DCPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Digest of the configuration that produced the network.
    pub config_hash: String,
    pub epochs_trained: u64,
}

#[derive(Serialize, Deserialize)]
struct Head {
    meta: CheckpointMeta,
    lens: Vec<u64>,
    net: NetworkDef,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    arch: &'a str,
    num_classes: usize,
    seed: u64,
    config_hash: &'a str,
    epochs_trained: u64,
    params: u64,
    flops: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Serializes `net` to bytes in the checkpoint layout.
pub fn encode_checkpoint(net: &NetworkDef, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut skeleton = net.clone();
    let mut values: Vec<f64> = Vec::new();
    let mut lens: Vec<u64> = Vec::new();
    skeleton.visit_arrays_mut(&mut |a| match a {
        ArrayMut::Vector(v) => {
            lens.push(v.len() as u64);
            values.extend_from_slice(v);
            v.clear();
        }
        ArrayMut::Tensor(t) => {
            lens.push(t.len() as u64);
            values.extend_from_slice(t.data());
            *t = Tensor::hollow(t.shape());
        }
    });
    let head = serde_json::to_vec(&Head {
        meta: meta.clone(),
        lens,
        net: skeleton,
    })?;
    let mut data = Vec::with_capacity(values.len() * 8);
    for v in values {
        data.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = Vec::with_capacity(32 + head.len() + data.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    section(&mut out, b"HEAD", &head);
    section(&mut out, b"DATA", &data);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<&'a [u8]> {
        let found = self.take(4, "section tag")?;
        if found != tag {
            return Err(Error::Corrupt(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = u64::from_le_bytes(self.take(8, "section length")?.try_into().expect("8 bytes"));
        let len =
            usize::try_from(len).map_err(|_| Error::Corrupt("section length overflows".into()))?;
        self.take(len, "section payload")
    }
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkDef, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < CHECKPOINT_MAGIC.len() || bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    r.take(CHECKPOINT_MAGIC.len(), "magic")?;
    let version = u32::from_le_bytes(r.take(4, "format version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let head: Head = serde_json::from_slice(r.section(b"HEAD")?)
        .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let data = r.section(b"DATA")?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the data section",
            bytes.len() - r.pos
        )));
    }
    let total: u64 = head.lens.iter().sum();
    if total.checked_mul(8) != Some(data.len() as u64) {
        return Err(Error::Corrupt(format!(
            "data section holds {} bytes, header describes {total} values",
            data.len()
        )));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut net = head.net;
    let mut lens = head.lens.iter();
    let mut problem: Option<Error> = None;
    net.visit_arrays_mut(&mut |a| {
        let Some(&len) = lens.next() else {
            problem.get_or_insert(Error::Corrupt("fewer array lengths than arrays".into()));
            return;
        };
        let vals: Vec<f64> = values.by_ref().take(len as usize).collect();
        match a {
            ArrayMut::Vector(v) => *v = vals,
            ArrayMut::Tensor(t) => {
                if numel(&t.shape()) != vals.len() {
                    problem.get_or_insert(Error::Corrupt(format!(
                        "tensor {:?} stored with {} values",
                        t.shape(),
                        vals.len()
                    )));
                    return;
                }
                *t = Tensor::from_vec(t.shape(), vals).expect("length checked");
            }
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if lens.next().is_some() {
        return Err(Error::Corrupt("more array lengths than arrays".into()));
    }
    net.validate()
        .map_err(|e| Error::Corrupt(format!("stored network is inconsistent: {e}")))?;
    Ok((net, head.meta))
}

/// Writes the checkpoint and its JSON sidecar.
pub fn save_checkpoint(net: &NetworkDef, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net, meta)?)?;
    let c = Complexity::of(net);
    let sidecar = Sidecar {
        format_version: CHECKPOINT_VERSION,
        arch: &net.arch,
        num_classes: net.num_classes,
        seed: meta.seed,
        config_hash: &meta.config_hash,
        epochs_trained: meta.epochs_trained,
        params: c.params,
        flops: c.flops,
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkDef, CheckpointMeta)> {
    if !path.is_file() {
        return Err(Error::Data(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    decode_checkpoint(&std::fs::read(path)?)
}

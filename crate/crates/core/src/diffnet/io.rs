//! Weights file.
//!
//! ```text
//! magic        8 bytes   "IMPRWGTS"
//! version      u32 LE    1
//! arch_len     u32 LE    byte length of the architecture JSON
//! arch         UTF-8     JSON description of the layer list
//! fp_len       u32 LE
//! fingerprint  ASCII     hex digest of the architecture JSON
//! tensors      u32 LE    number of tensors (weights, bias per layer)
//! per tensor:  u64 LE element count, then that many f64 LE values
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Architecture, LayerParams, NetworkWeights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMPRWGTS";
const VERSION: u32 = 1;

pub fn save_weights(net: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let arch = serde_json::to_vec(net.architecture()).expect("architecture serializes");
    let fp = net.architecture().fingerprint();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    buf.extend_from_slice(&arch);
    buf.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    buf.extend_from_slice(fp.as_bytes());
    buf.extend_from_slice(&(2 * net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        for t in [&p.weights, &p.bias] {
            buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&buf).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::corrupt(self.path, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a weights file, checking its internal fingerprint.
pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(8)? != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let arch_len = cur.u32()? as usize;
    let arch: Architecture = serde_json::from_slice(cur.take(arch_len)?)
        .map_err(|e| Error::corrupt(path, format!("architecture: {e}")))?;
    let fp_len = cur.u32()? as usize;
    let fp = String::from_utf8(cur.take(fp_len)?.to_vec()).map_err(|_| Error::corrupt(path, "fingerprint"))?;
    if fp != arch.fingerprint() {
        return Err(Error::FingerprintMismatch { expected: arch.fingerprint(), found: fp });
    }
    let count = cur.u32()? as usize;
    if !count.is_multiple_of(2) {
        return Err(Error::corrupt(path, "odd tensor count"));
    }
    let mut params = Vec::with_capacity(count / 2);
    for _ in 0..count / 2 {
        let mut pair = [Vec::new(), Vec::new()];
        for t in pair.iter_mut() {
            let n = usize::try_from(cur.u64()?).map_err(|_| Error::corrupt(path, "tensor length"))?;
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::corrupt(path, "tensor length"))?)?;
            *t = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        }
        let [weights, bias] = pair;
        params.push(LayerParams { weights, bias });
    }
    if cur.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    NetworkWeights::from_params(arch, params).map_err(|e| match e {
        Error::ShapeMismatch { expected, actual } => {
            Error::corrupt(path, format!("parameter shapes: expected {expected}, got {actual}"))
        }
        other => other,
    })
}

/// Loads weights that must match `expected`.
pub fn load_weights_for(path: impl AsRef<Path>, expected: &Architecture) -> Result<NetworkWeights> {
    let net = load_weights(path)?;
    let (want, have) = (expected.fingerprint(), net.architecture().fingerprint());
    if want != have {
        return Err(Error::FingerprintMismatch { expected: want, found: have });
    }
    Ok(net)
}

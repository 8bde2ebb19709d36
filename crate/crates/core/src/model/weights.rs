//! Binary container for named f64 arrays, used for network weights and
//! optimizer checkpoints.
//!
//! Layout (little-endian): 4-byte magic, `u32` version, 32-byte SHA-256 of
//! the signature string, `u32` signature length and bytes, `u32` array
//! count, then per array `u32` name length, name, `u32` rank, `u32` extents
//! and the row-major `f64` values. A SHA-256 of all preceding bytes closes
//! the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{MultiTaskNet, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NDLW";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        version: VERSION,
        message: message.into(),
    }
}

pub(crate) fn encode(magic: &[u8; 4], signature: &str, arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(magic);
    put_u32(&mut out, VERSION as usize);
    out.extend_from_slice(&Sha256::digest(signature.as_bytes()));
    put_u32(&mut out, signature.len());
    out.extend_from_slice(signature.as_bytes());
    put_u32(&mut out, arrays.len());
    for a in arrays {
        put_u32(&mut out, a.name.len());
        out.extend_from_slice(a.name.as_bytes());
        put_u32(&mut out, a.shape.len());
        a.shape.iter().for_each(|&d| put_u32(&mut out, d));
        a.data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err("file truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| format_err("string is not UTF-8"))
    }
}

/// Returns the stored signature and arrays after checking magic, version
/// and both digests.
pub(crate) fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<(String, Vec<NamedArray>)> {
    if bytes.len() < 4 + 4 + 32 + 32 || &bytes[..4] != magic {
        return Err(format_err(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let (payload, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != sum {
        return Err(format_err("checksum mismatch"));
    }
    let mut r = Reader {
        buf: payload,
        pos: 4,
    };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format {
            version,
            message: format!("unsupported version, expected {VERSION}"),
        });
    }
    let digest = r.bytes(32)?.to_vec();
    let signature = r.string()?;
    if Sha256::digest(signature.as_bytes()).as_slice() != digest {
        return Err(format_err("config digest does not match stored signature"));
    }
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(
            n.checked_mul(8)
                .ok_or_else(|| format_err("array too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.pos != payload.len() {
        return Err(format_err("trailing bytes after last array"));
    }
    Ok((signature, arrays))
}

pub(crate) fn write_arrays(
    path: &Path,
    magic: &[u8; 4],
    signature: &str,
    arrays: &[NamedArray],
) -> Result<()> {
    std::fs::write(path, encode(magic, signature, arrays)).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_arrays(path: &Path, magic: &[u8; 4]) -> Result<(String, Vec<NamedArray>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

impl MultiTaskNet {
    pub(crate) fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out: Vec<NamedArray> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| NamedArray {
                name: n.clone(),
                shape: p.shape().to_vec(),
                data: p.data().to_vec(),
            })
            .collect();
        for (i, s) in self.stats.iter().enumerate() {
            let prefix = bn_prefix(i);
            let c = s.mean.len();
            out.push(NamedArray {
                name: format!("{prefix}.bn.running_mean"),
                shape: vec![c],
                data: s.mean.clone(),
            });
            out.push(NamedArray {
                name: format!("{prefix}.bn.running_var"),
                shape: vec![c],
                data: s.var.clone(),
            });
        }
        out
    }

    pub(crate) fn from_arrays(cfg: &NetworkConfig, arrays: Vec<NamedArray>) -> Result<Self> {
        let mut net = MultiTaskNet::new(cfg)?;
        let expected = net.to_arrays();
        if arrays.len() != expected.len() {
            return Err(format_err(format!(
                "expected {} arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        for (want, got) in expected.iter().zip(&arrays) {
            if want.name != got.name || want.shape != got.shape {
                return Err(format_err(format!(
                    "array {} {:?} where {} {:?} was expected",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        let mut it = arrays.into_iter();
        for p in net.params.iter_mut() {
            let a = it.next().unwrap();
            *p = Tensor::new(&a.shape, a.data)?;
        }
        for s in net.stats.iter_mut() {
            s.mean = it.next().unwrap().data;
            s.var = it.next().unwrap().data;
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(WEIGHTS_MAGIC, &self.cfg.signature(), &self.to_arrays())
    }

    /// Rebuilds a network saved with a structurally identical config.
    pub fn from_bytes(cfg: &NetworkConfig, bytes: &[u8]) -> Result<Self> {
        cfg.validate()?;
        let (sig, arrays) = decode(WEIGHTS_MAGIC, bytes)?;
        if sig != cfg.signature() {
            return Err(format_err(format!(
                "layer signature mismatch: file has [{sig}], config has [{}]",
                cfg.signature()
            )));
        }
        Self::from_arrays(cfg, arrays)
    }
}

fn bn_prefix(i: usize) -> String {
    if i < super::TRUNK_LAYERS {
        format!("trunk.{:02}", i + 1)
    } else {
        "cls".into()
    }
}

pub fn save_weights(net: &MultiTaskNet, path: &Path) -> Result<()> {
    std::fs::write(path, net.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path, cfg: &NetworkConfig) -> Result<MultiTaskNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MultiTaskNet::from_bytes(cfg, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut net = MultiTaskNet::new(&tiny()).unwrap();
        net.stats[3].mean[1] = 0.123;
        let bytes = net.to_bytes();
        let back = MultiTaskNet::from_bytes(&tiny(), &bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn mismatched_layers_name_both_signatures() {
        let net = MultiTaskNet::new(&tiny()).unwrap();
        let mut other = tiny();
        other.channels_per_stage[5] = 3;
        let err = MultiTaskNet::from_bytes(&other, &net.to_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }));
        assert!(msg.contains(&tiny().signature()) && msg.contains(&other.signature()));
    }

    #[test]
    fn corruption_is_detected() {
        let net = MultiTaskNet::new(&tiny()).unwrap();
        let mut bytes = net.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            MultiTaskNet::from_bytes(&tiny(), &bytes),
            Err(Error::Format { .. })
        ));
        assert!(MultiTaskNet::from_bytes(&tiny(), &bytes[..10]).is_err());
    }
}

//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "USMC" | version u32 | config_len u32 | config utf-8 bytes
//!   | tensor_count u32 | per tensor: name_len u32, name bytes, rank u32,
//!     dims u64 each, payload f64 LE | crc32 u32 over all preceding bytes
//!
//! Writes are atomic (temp file + rename) and save -> load -> save is
//! byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usm_core::net::{ModelConfig, UsmNet};
use usm_core::tensor::Tensor;

use crate::config::{model_config_from_text, model_config_text};
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"USMC";
pub const VERSION: u32 = 1;

/// IEEE CRC-32 (the zlib polynomial), bit-reflected, table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    const POLY: u32 = 0xEDB8_8320;
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { POLY ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut crc = !0u32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Serialize named tensors plus a config blob into the container format.
pub fn encode(config_text: &str, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(HarnessError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse the container format, validating magic, version and checksum.
pub fn decode(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(HarnessError::BadMagic);
    }
    if bytes.len() < 4 + 4 + 4 {
        return Err(HarnessError::Truncated("header".into()));
    }
    let body_len = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if crc32(&bytes[..body_len]) != stored_crc {
        return Err(HarnessError::CrcMismatch);
    }
    let mut r = Reader {
        buf: &bytes[..body_len],
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HarnessError::UnsupportedVersion(version));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "config")?;
    let config_text = String::from_utf8(cfg_bytes.to_vec())
        .map_err(|_| HarnessError::malformed("checkpoint", "config is not utf-8"))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| HarnessError::malformed("checkpoint", format!("tensor {i} name")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 8, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            name,
            Tensor::new(shape, data)
                .map_err(|e| HarnessError::malformed("checkpoint", e.to_string()))?,
        ));
    }
    if r.pos != body_len {
        return Err(HarnessError::malformed(
            "checkpoint",
            format!("{} trailing bytes", body_len - r.pos),
        ));
    }
    Ok((config_text, tensors))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(HarnessError::io(&tmp))?;
        f.write_all(bytes).map_err(HarnessError::io(&tmp))?;
        f.sync_all().map_err(HarnessError::io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(HarnessError::io(path))?;
    Ok(())
}

pub fn save_raw(path: &Path, config_text: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(config_text, tensors))
}

pub fn load_raw(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(HarnessError::io(path))?;
    decode(&bytes)
}

/// Save a model: its config as the embedded blob, parameters in canonical
/// visit order.
pub fn save_net(path: &Path, net: &UsmNet) -> Result<()> {
    save_raw(path, &model_config_text(net.config()), &net.params.named())
}

/// Rebuild a model from a checkpoint: construct from the embedded config,
/// then overwrite every parameter by name (missing or extra names are format
/// errors).
pub fn load_net(path: &Path) -> Result<UsmNet> {
    let (config_text, tensors) = load_raw(path)?;
    let config = model_config_from_text(&config_text)?;
    net_from_parts(config, tensors)
}

pub fn net_from_parts(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<UsmNet> {
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = UsmNet::new(config, &mut seed_rng)?;
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut missing = Vec::new();
    net.params.for_each_param_mut(&mut |name, t| {
        match by_name.remove(&name) {
            Some(loaded) => {
                if loaded.shape() == t.shape() {
                    let mut loaded = loaded;
                    loaded.set_requires_grad(true);
                    *t = loaded;
                } else {
                    missing.push(format!(
                        "{name}: shape {:?} != expected {:?}",
                        loaded.shape(),
                        t.shape()
                    ));
                }
            }
            None => missing.push(format!("{name}: absent")),
        }
    });
    if !missing.is_empty() {
        return Err(HarnessError::malformed(
            "checkpoint",
            format!("parameter mismatches: {}", missing.join("; ")),
        ));
    }
    if !by_name.is_empty() {
        let extra: Vec<String> = by_name.into_keys().collect();
        return Err(HarnessError::malformed(
            "checkpoint",
            format!("unexpected tensors: {}", extra.join(", ")),
        ));
    }
    Ok(net)
}

/// Container reuse for sample dumps: one tensor named "samples" plus the
/// data-spec text that generated them.
pub fn save_samples(path: &Path, spec_text: &str, samples: &Tensor) -> Result<()> {
    save_raw(path, spec_text, &[("samples".to_string(), samples.clone())])
}

pub fn load_samples(path: &Path) -> Result<(String, Tensor)> {
    let (text, mut tensors) = load_raw(path)?;
    if tensors.len() != 1 || tensors[0].0 != "samples" {
        return Err(HarnessError::malformed(
            "samples file",
            "expected exactly one tensor named 'samples'",
        ));
    }
    Ok((text, tensors.pop().expect("checked length").1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_known_vector() {
        // standard check value for "123456789"
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn encode_decode_round_trip() {
        let t1 = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 5.5, -6.125]).unwrap();
        let t2 = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let tensors = vec![("alpha".to_string(), t1), ("beta".to_string(), t2)];
        let bytes = encode("model.h = 16\n", &tensors);
        let (cfg, back) = decode(&bytes).unwrap();
        assert_eq!(cfg, "model.h = 16\n");
        assert_eq!(back.len(), 2);
        for ((n1, a), (n2, b)) in tensors.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert!(a.bit_eq(b));
        }
        // re-encode is byte-identical
        assert_eq!(encode(&cfg, &back), bytes);
    }

    #[test]
    fn corruption_and_version_gates() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode("", &[("x".to_string(), t)]);
        // flip a payload byte
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(HarnessError::CrcMismatch)));

        // wrong magic
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut bytes = encode("", &[("x".to_string(), t)]);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(HarnessError::BadMagic)));

        // bumped version (with repaired crc)
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut bytes = encode("", &[("x".to_string(), t)]);
        let v = VERSION + 1;
        bytes[4..8].copy_from_slice(&v.to_le_bytes());
        let body = bytes.len() - 4;
        let crc = crc32(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(HarnessError::UnsupportedVersion(v2)) if v2 == VERSION + 1
        ));

        // truncation
        let t = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
        let bytes = encode("", &[("x".to_string(), t)]);
        let cut = &bytes[..bytes.len() - 20];
        assert!(matches!(
            decode(cut),
            Err(HarnessError::CrcMismatch) | Err(HarnessError::Truncated(_))
        ));
    }
}

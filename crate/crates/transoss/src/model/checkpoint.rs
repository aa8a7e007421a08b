//! Binary checkpoint format.
//!
//! Layout: magic `TOSS`, format version (u32 LE), a length-prefixed
//! canonical key=value config block (model keys plus `classifier_present`),
//! a tensor count, then per tensor a u32 element count followed by f64
//! little-endian values in the documented parameter visit order (classifier
//! last), and a trailing CRC-64 over everything before it. Round trips are
//! bitwise lossless.

use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::Params;

const MAGIC: &[u8; 4] = b"TOSS";
const VERSION: u32 = 1;

static CRC_TABLE: OnceLock<[u64; 256]> = OnceLock::new();

fn crc_table() -> &'static [u64; 256] {
    CRC_TABLE.get_or_init(|| {
        let mut t = [0u64; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u64;
            for _ in 0..8 {
                c = if c & 1 == 1 {
                    (c >> 1) ^ 0xC96C_5795_D787_0F42
                } else {
                    c >> 1
                };
            }
            *slot = c;
        }
        t
    })
}

/// CRC-64/XZ (ECMA-182 polynomial, reflected).
pub fn crc64(bytes: &[u8]) -> u64 {
    let t = crc_table();
    let mut c = !0u64;
    for &b in bytes {
        c = t[((c ^ b as u64) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

/// Serialize params + config to the checkpoint byte layout.
pub fn to_bytes(params: &Params, cfg: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config_text = format!(
        "{}classifier_present={}\n",
        cfg.to_kv_block(),
        params.classifier.is_some()
    );
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.tensor_count() as u32).to_le_bytes());
    params.for_each_tensor(&mut |t| {
        out.extend_from_slice(&(t.numel() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    let crc = crc64(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(params: &Params, cfg: &ModelConfig, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params, cfg)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes back into a parameter tree and its config.
pub fn from_bytes(bytes: &[u8]) -> Result<(Params, ModelConfig)> {
    if bytes.len() < 16 {
        return Err(Error::CheckpointFormat("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc64(body) != stored {
        return Err(Error::CheckpointFormat("checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::CheckpointFormat("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let config_len = cur.u32()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| Error::CheckpointFormat("config block is not UTF-8".into()))?;
    let mut classifier_present = false;
    let mut model_lines = String::new();
    for line in config_text.lines() {
        if let Some(v) = line.strip_prefix("classifier_present=") {
            classifier_present = v == "true";
        } else {
            model_lines.push_str(line);
            model_lines.push('\n');
        }
    }
    let cfg = ModelConfig::from_kv_block(&model_lines)?;
    let mut params = Params::zeros(&cfg);
    if !classifier_present {
        params.classifier = None;
    } else if params.classifier.is_none() {
        return Err(Error::CheckpointFormat(
            "classifier_present=true but num_classes=0".into(),
        ));
    }
    let tensor_count = cur.u32()? as usize;
    if tensor_count != params.tensor_count() {
        return Err(Error::CheckpointFormat(format!(
            "{} tensors in file, config implies {}",
            tensor_count,
            params.tensor_count()
        )));
    }
    let mut failure: Option<Error> = None;
    params.for_each_tensor_mut(&mut |t| {
        if failure.is_some() {
            return;
        }
        let read = (|| -> Result<()> {
            let numel = cur.u32()? as usize;
            if numel != t.numel() {
                return Err(Error::CheckpointFormat(format!(
                    "tensor of {} values where {} expected",
                    numel,
                    t.numel()
                )));
            }
            let raw = cur.take(numel * 8)?;
            for (i, chunk) in raw.chunks_exact(8).enumerate() {
                t.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            Ok(())
        })();
        if let Err(e) = read {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if cur.pos != body.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after parameters",
            body.len() - cur.pos
        )));
    }
    Ok((params, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(Params, ModelConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_known_vector() {
        // CRC-64/XZ of "123456789"
        assert_eq!(crc64(b"123456789"), 0x995D_C9BB_DF19_39FA);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut cfg = ModelConfig::desk();
        cfg.num_classes = 5;
        let p = Params::init(&cfg, 42);
        let bytes = to_bytes(&p, &cfg);
        let (p2, cfg2) = from_bytes(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p.fingerprint(), p2.fingerprint());
        let bytes2 = to_bytes(&p2, &cfg2);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toss");
        let cfg = ModelConfig::desk();
        let p = Params::init(&cfg, 7);
        save_checkpoint(&p, &cfg, &path).unwrap();
        let (p2, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(p.fingerprint(), p2.fingerprint());
        assert_eq!(cfg, cfg2);
        assert!(p2.classifier.is_none());
    }

    #[test]
    fn bad_magic_is_reported() {
        let cfg = ModelConfig::desk();
        let p = Params::init(&cfg, 7);
        let mut bytes = to_bytes(&p, &cfg);
        bytes[0] = b'X';
        // fix the checksum so the magic check is what trips
        let n = bytes.len();
        let crc = crc64(&bytes[..n - 8]);
        bytes[n - 8..].copy_from_slice(&crc.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = ModelConfig::desk();
        let p = Params::init(&cfg, 7);
        let mut bytes = to_bytes(&p, &cfg);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let cfg = ModelConfig::desk();
        let p = Params::init(&cfg, 7);
        let mut bytes = to_bytes(&p, &cfg);
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc64(&bytes[..n - 8]);
        bytes[n - 8..].copy_from_slice(&crc.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn pretrain_to_finetune_handoff() {
        // save a headless trunk, load it, attach a fresh classifier
        let cfg = ModelConfig::desk();
        let p = Params::init(&cfg, 3);
        let bytes = to_bytes(&p, &cfg);
        let (mut p2, mut cfg2) = from_bytes(&bytes).unwrap();
        assert!(p2.classifier.is_none());
        p2.attach_classifier(8, cfg2.embed_dim, 99);
        cfg2.num_classes = 8;
        assert_eq!(
            p2.classifier.as_ref().unwrap().w.shape(),
            &[cfg2.embed_dim, 8]
        );
        // trunk untouched by the attach
        assert_eq!(p.tokenizer_opt.w.data(), p2.tokenizer_opt.w.data());
        let bytes2 = to_bytes(&p2, &cfg2);
        let (p3, _) = from_bytes(&bytes2).unwrap();
        assert_eq!(p2.fingerprint(), p3.fingerprint());
    }
}

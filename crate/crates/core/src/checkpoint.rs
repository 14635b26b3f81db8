//! Self-describing binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPCS" | version u16 | config_len u32 | RunConfig JSON
//! | tensor_count u32 | tensor records | mask_count u32 | mask records
//! | step u64 | CRC-32 of everything before it (u32)
//! ```
//!
//! A record is `name_len u32 | UTF-8 name | rank u32 | dims u32 * rank |
//! f32 payload`.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::encoder::{EncoderWeights, MaskSet};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"SPCS";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub weights: EncoderWeights<f32>,
    pub masks: MaskSet<f32>,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len());
    for &d in dims {
        put_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn mask_name(layer: usize, kind: &str) -> String {
    format!("mask.layer.{layer}.{kind}")
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        put_u32(&mut out, config.len());
        out.extend_from_slice(&config);
        let parts = self.weights.parts();
        put_u32(&mut out, parts.len());
        for (name, dims, data) in &parts {
            put_record(&mut out, name, dims, data);
        }
        put_u32(&mut out, self.masks.heads.len() + self.masks.neurons.len());
        for (l, gates) in self.masks.heads.iter().enumerate() {
            put_record(&mut out, &mask_name(l, "heads"), &[gates.len()], gates);
        }
        for (l, gates) in self.masks.neurons.iter().enumerate() {
            put_record(&mut out, &mask_name(l, "neurons"), &[gates.len()], gates);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let integrity = |what: &str| Error::Integrity(format!("{}: {what}", path.display()));
        if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..4] != MAGIC {
            return Err(integrity("not a checkpoint (bad magic or too short)"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "{}: checkpoint format version {version}, supported version {FORMAT_VERSION}",
                path.display()
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(integrity("CRC mismatch (corrupted or truncated)"));
        }

        let mut r = Reader { buf: body, pos: 6 };
        let config_len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::Compatibility(format!("{}: embedded config: {e}", path.display())))?;
        let count = r.u32()? as usize;
        let mut parts = Vec::with_capacity(count);
        for _ in 0..count {
            parts.push(r.record()?);
        }
        let weights = EncoderWeights::from_parts(&config.model, parts)?;
        let mut masks = MaskSet::<f32>::ones_for(&weights);
        let expected: Vec<(String, usize)> = (0..masks.heads.len())
            .map(|l| (mask_name(l, "heads"), masks.heads[l].len()))
            .chain((0..masks.neurons.len()).map(|l| (mask_name(l, "neurons"), masks.neurons[l].len())))
            .collect();
        let mask_count = r.u32()? as usize;
        if mask_count != expected.len() {
            return Err(Error::Compatibility(format!(
                "{}: {mask_count} mask records, config implies {}",
                path.display(),
                expected.len()
            )));
        }
        let layers = masks.heads.len();
        for (k, (name, len)) in expected.iter().enumerate() {
            let (got, dims, data) = r.record()?;
            if &got != name || dims != [*len] {
                return Err(Error::Compatibility(format!(
                    "{}: mask record {got} {dims:?}, expected {name} [{len}]",
                    path.display()
                )));
            }
            if k < layers {
                masks.heads[k] = data;
            } else {
                masks.neurons[k - layers] = data;
            }
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != body.len() {
            return Err(integrity("trailing bytes after step record"));
        }
        Ok(Checkpoint {
            config,
            weights,
            masks,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}

pub fn checkpoint_save(
    path: &Path,
    weights: &EncoderWeights<f32>,
    masks: &MaskSet<f32>,
    config: &RunConfig,
    step: u64,
) -> Result<()> {
    Checkpoint {
        config: config.clone(),
        weights: weights.clone(),
        masks: masks.clone(),
        step,
    }
    .save(path)
}

pub fn checkpoint_load(path: &Path) -> Result<(EncoderWeights<f32>, MaskSet<f32>, RunConfig, u64)> {
    let c = Checkpoint::load(path)?;
    Ok((c.weights, c.masks, c.config, c.step))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("record at byte {} runs past the end", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Integrity(format!("non-UTF-8 record name at byte {}", self.pos)))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("record {name}: dimension overflow")))?;
        let bytes = self.take(numel.checked_mul(4).ok_or_else(|| Error::Integrity("payload overflow".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, dims, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_model, ModelConfig};

    fn sample() -> Checkpoint {
        let config = RunConfig {
            model: ModelConfig {
                vocab_size: 50,
                max_seq_len: 8,
                hidden_dim: 8,
                num_layers: 2,
                heads_per_layer: 2,
                head_dim: 4,
                ffn_dim: 6,
                dropout_rate: 0.1,
                seed: 3,
            },
            ..Default::default()
        };
        let weights = init_model(&config.model).unwrap();
        let mut masks = MaskSet::ones_for(&weights);
        masks.heads[1][0] = 0.0;
        masks.neurons[0][5] = 0.0;
        Checkpoint {
            config,
            weights,
            masks,
            step: 77,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        assert_eq!(&bytes[..4], b"SPCS");
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().encode();
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(Checkpoint::decode(&flipped, Path::new("x")), Err(Error::Integrity(_))));
        for cut in [3, 10, bytes.len() / 3, bytes.len() - 1] {
            let r = Checkpoint::decode(&bytes[..cut], Path::new("x"));
            assert!(matches!(r, Err(Error::Integrity(_))), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn version_gate_names_both() {
        let mut bytes = sample().encode();
        bytes[4..6].copy_from_slice(&9u16.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match Checkpoint::decode(&bytes, Path::new("x")) {
            Err(Error::Compatibility(m)) => assert!(m.contains('9') && m.contains('1'), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_incompatible() {
        let mut c = sample();
        c.config.model.ffn_dim = 7;
        let bytes = c.encode();
        assert!(matches!(Checkpoint::decode(&bytes, Path::new("x")), Err(Error::Compatibility(_))));
    }

    #[test]
    fn save_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spcs");
        let c = sample();
        checkpoint_save(&p, &c.weights, &c.masks, &c.config, c.step).unwrap();
        let (w, m, cfg, step) = checkpoint_load(&p).unwrap();
        assert_eq!((w, m, cfg, step), (c.weights, c.masks, c.config, c.step));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}

//! Binary parameter snapshot plus a JSON sidecar.
//!
//! Binary layout, little-endian: magic `TSGCKPT\0`, `u32` version, `u32`
//! parameter count, then per parameter a `u32`-length-prefixed UTF-8 name,
//! `u64` Adam step count, `u32` rank, `u32` extents, and the value, first
//! moment and second moment as `f32` arrays. A CRC32 of everything before it
//! closes the file. The sidecar (same path, `.json`) holds the configuration,
//! vocabulary, RNG streams, step and data cursor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::Config;
use super::Streams;
use crate::data::SamplerState;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{ParamStore, Tensor};
use crate::text::Vocabulary;

const MAGIC: &[u8; 8] = b"TSGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Complete resumable training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub step: u64,
    pub streams: Streams,
    pub sampler: SamplerState,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    step: u64,
    params_crc32: u32,
    config: BTreeMap<String, Value>,
    vocab: Vocabulary,
    streams: Streams,
    sampler: SamplerState,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, self.store.len() as u32);
        for (_, p) in self.store.iter() {
            put_u32(&mut buf, p.name.len() as u32);
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&p.step_count.to_le_bytes());
            put_u32(&mut buf, p.value.rank() as u32);
            for &d in p.value.shape() {
                put_u32(&mut buf, d as u32);
            }
            for t in [&p.value, &p.adam_m, &p.adam_v] {
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());

        let sidecar = Sidecar {
            format_version: FORMAT_VERSION,
            step: self.step,
            params_crc32: crc,
            config: self.config.entries(),
            vocab: self.vocab.clone(),
            streams: self.streams.clone(),
            sampler: self.sampler,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, &buf)?;
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Integrity(format!("{}: {m}", path.display()));
        if bytes.len() < MAGIC.len() + 12 {
            return Err(bad("file truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(bad("checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }

        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if sidecar.format_version != FORMAT_VERSION || sidecar.params_crc32 != crc {
            return Err(bad("sidecar does not belong to this parameter file"));
        }
        let entries: Vec<(String, Value)> = sidecar.config.into_iter().collect();
        let config = Config::from_entries(&entries)?;
        let mut store = ParamStore::new();
        let mut init = rand_chacha::ChaCha8Rng::from_seed_u64(0);
        Model::new(config.model.clone(), sidecar.vocab.clone(), &mut store, &mut init)?;

        let count = r.u32()? as usize;
        if count != store.len() {
            return Err(bad(&format!("{count} parameters stored, model has {}", store.len())));
        }
        for p in store.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("parameter name is not UTF-8"))?;
            if name != p.name {
                return Err(bad(&format!("parameter {name} where {} was expected", p.name)));
            }
            p.step_count = r.u64()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != p.value.shape() {
                return Err(bad(&format!("{name}: shape {shape:?}, model expects {:?}", p.value.shape())));
            }
            let n = p.value.len();
            p.value = Tensor::new(&shape, r.f32s(n)?)?;
            p.adam_m = Tensor::new(&shape, r.f32s(n)?)?;
            p.adam_v = Tensor::new(&shape, r.f32s(n)?)?;
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config,
            vocab: sidecar.vocab,
            store,
            step: sidecar.step,
            streams: sidecar.streams,
            sampler: sidecar.sampler,
        })
    }

    /// The model structure matching the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut scratch = ParamStore::<f32>::new();
        Model::new(self.config.model.clone(), self.vocab.clone(), &mut scratch, &mut rand_chacha::ChaCha8Rng::from_seed_u64(0))
    }
}

trait FromSeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl FromSeedU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

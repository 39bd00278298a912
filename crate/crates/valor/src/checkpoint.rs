//! Checkpoint file format.
//!
//! Layout: magic bytes `VALORCKPT`, little-endian u32 version, then
//! length-prefixed records. Each record is `u32 name_len, name bytes,
//! u32 rank, u64 extents..., f64 payload` (little-endian throughout).
//! Parameters are stored under `param/<name>`, optimizer moments under
//! `opt/m/<name>` and `opt/v/<name>`, and scalar/bookkeeping state under
//! `meta/...` records (the config TOML is packed into f64 bit patterns).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"VALORCKPT";
pub const VERSION: u32 = 1;

/// Everything a training run needs to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub params: Vec<(String, Tensor)>,
    pub opt_m: Vec<(String, Tensor)>,
    pub opt_v: Vec<(String, Tensor)>,
    pub opt_t: u64,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub config_toml: String,
}

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// UTF-8 bytes packed 8-per-f64 via bit patterns; exact round trip.
fn pack_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks(8)
        .map(|c| {
            let mut word = [0u8; 8];
            word[..c.len()].copy_from_slice(c);
            f64::from_bits(u64::from_le_bytes(word))
        })
        .collect()
}

fn unpack_bytes(words: &[f64], len: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(words.len() * 8);
    for w in words {
        out.extend_from_slice(&w.to_bits().to_le_bytes());
    }
    if len > out.len() {
        return Err(Error::CheckpointRecord(format!(
            "packed payload of {} bytes cannot hold declared length {len}",
            out.len()
        )));
    }
    out.truncate(len);
    Ok(out)
}

pub fn save(path: &Path, ckpt: &CheckpointData) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    for (name, t) in &ckpt.params {
        push_record(&mut out, &format!("param/{name}"), &t.shape, &t.data);
    }
    for (name, t) in &ckpt.opt_m {
        push_record(&mut out, &format!("opt/m/{name}"), &t.shape, &t.data);
    }
    for (name, t) in &ckpt.opt_v {
        push_record(&mut out, &format!("opt/v/{name}"), &t.shape, &t.data);
    }
    push_record(&mut out, "meta/opt_t", &[1], &[ckpt.opt_t as f64]);
    push_record(&mut out, "meta/step", &[1], &[ckpt.step as f64]);

    let seed_words: Vec<f64> = ckpt
        .rng_seed
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    push_record(&mut out, "meta/rng_seed", &[4], &seed_words);
    let lo = (ckpt.rng_word_pos & u128::from(u64::MAX)) as u64;
    let hi = (ckpt.rng_word_pos >> 64) as u64;
    push_record(
        &mut out,
        "meta/rng_word_pos",
        &[2],
        &[f64::from_bits(lo), f64::from_bits(hi)],
    );

    let cfg_bytes = ckpt.config_toml.as_bytes();
    push_record(&mut out, "meta/config_len", &[1], &[cfg_bytes.len() as f64]);
    let packed = pack_bytes(cfg_bytes);
    push_record(&mut out, "meta/config", &[packed.len()], &packed);

    // Write through a temp file so a failed save never leaves partial state.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(what.to_string()));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.off >= self.bytes.len()
    }
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, off: 0 };
    if r.take(MAGIC.len(), "magic").map(|m| m != MAGIC).unwrap_or(true) {
        return Err(Error::CheckpointBadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }

    let mut params = Vec::new();
    let mut opt_m = Vec::new();
    let mut opt_v = Vec::new();
    let mut meta: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();

    while !r.done() {
        let name_len = r.u32("record name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "record name")?.to_vec())
            .map_err(|_| Error::CheckpointRecord("record name is not UTF-8".into()))?;
        let rank = r.u32(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&format!("{name} extents"))? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f64s(n, &format!("{name} payload"))?;

        if let Some(p) = name.strip_prefix("param/") {
            params.push((p.to_string(), Tensor::new(shape, data)?));
        } else if let Some(p) = name.strip_prefix("opt/m/") {
            opt_m.push((p.to_string(), Tensor::new(shape, data)?));
        } else if let Some(p) = name.strip_prefix("opt/v/") {
            opt_v.push((p.to_string(), Tensor::new(shape, data)?));
        } else if name.starts_with("meta/") {
            meta.push((name, shape, data));
        } else {
            return Err(Error::CheckpointRecord(format!("unknown record '{name}'")));
        }
    }

    let find = |key: &str| -> Result<&(String, Vec<usize>, Vec<f64>)> {
        meta.iter()
            .find(|(n, _, _)| n == key)
            .ok_or_else(|| Error::CheckpointRecord(format!("missing record '{key}'")))
    };

    let opt_t = find("meta/opt_t")?.2[0] as u64;
    let step = find("meta/step")?.2[0] as u64;

    let seed_rec = find("meta/rng_seed")?;
    if seed_rec.2.len() != 4 {
        return Err(Error::CheckpointRecord("rng seed must hold 4 words".into()));
    }
    let mut rng_seed = [0u8; 32];
    for (i, w) in seed_rec.2.iter().enumerate() {
        rng_seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_bits().to_le_bytes());
    }

    let pos_rec = find("meta/rng_word_pos")?;
    if pos_rec.2.len() != 2 {
        return Err(Error::CheckpointRecord("rng word pos must hold 2 words".into()));
    }
    let rng_word_pos =
        u128::from(pos_rec.2[0].to_bits()) | (u128::from(pos_rec.2[1].to_bits()) << 64);

    let cfg_len = find("meta/config_len")?.2[0] as usize;
    let cfg_words = &find("meta/config")?.2;
    let config_toml = String::from_utf8(unpack_bytes(cfg_words, cfg_len)?)
        .map_err(|_| Error::CheckpointRecord("config snapshot is not UTF-8".into()))?;

    Ok(CheckpointData {
        params,
        opt_m,
        opt_v,
        opt_t,
        step,
        rng_seed,
        rng_word_pos,
        config_toml,
    })
}

//! Binary checkpoint files.
//!
//! Layout, little-endian, no padding:
//!
//! ```text
//! "TFRD"  u32 version  u32 c  u32 T  u32 heads  u32 H  u32 W  u64 count
//! count × { u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f32 data[..] }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TFRD";
pub const FORMAT_VERSION: u32 = 1;

/// Configuration block stored after the magic and version.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub channels: usize,
    pub fusion_blocks: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
}

impl CheckpointHeader {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            channels: cfg.channels,
            fusion_blocks: cfg.fusion_blocks,
            heads: cfg.heads,
            height: cfg.height,
            width: cfg.width,
        }
    }

    /// Fails with [`Error::Version`] when `cfg` disagrees with the stored block.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::of(cfg);
        if *self != want {
            return Err(Error::Version(format!(
                "checkpoint was written for c={} T={} heads={} input {}×{}, requested c={} T={} heads={} input {}×{}",
                self.channels,
                self.fusion_blocks,
                self.heads,
                self.height,
                self.width,
                want.channels,
                want.fusion_blocks,
                want.heads,
                want.height,
                want.width
            )));
        }
        Ok(())
    }
}

fn u32_field(what: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode(header: &CheckpointHeader, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + 4 * params.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (what, v) in [
        ("channels", header.channels),
        ("fusion blocks", header.fusion_blocks),
        ("heads", header.heads),
        ("height", header.height),
        ("width", header.width),
    ] {
        out.extend_from_slice(&u32_field(what, v)?.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, value) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(value.rank()).map_err(|_| Error::Format(format!("rank of {name} exceeds 255")))?;
        out.push(rank);
        for &d in value.shape() {
            out.extend_from_slice(&u32_field("dimension", d)?.to_le_bytes());
        }
        for &x in value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated checkpoint: {what} needs {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

/// Parse a complete checkpoint; nothing is returned unless every byte checks out.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected \"TFRD\""
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let mut cfg = [0usize; 5];
    for v in &mut cfg {
        *v = r.u32("config block")? as usize;
    }
    let header = CheckpointHeader {
        channels: cfg[0],
        fusion_blocks: cfg[1],
        heads: cfg[2],
        height: cfg[3],
        width: cfg[4],
    };
    let count = r.u64("record count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("record {name}: shape {shape:?} overflows")))?;
        let payload = r.take(numel, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        if store.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter name {name} in checkpoint")));
        }
        store.add(name, value)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok((header, store))
}

pub fn save(path: &Path, model: &Model<f32>) -> Result<()> {
    let bytes = encode(&CheckpointHeader::of(model.config()), model.params())?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore<f32>)> {
    decode(&fs::read(path)?)
}

/// Load a checkpoint into a model of layout `cfg`, rejecting config mismatches.
pub fn load_model(path: &Path, cfg: ModelConfig) -> Result<Model<f32>> {
    let (header, store) = load(path)?;
    header.check(&cfg)?;
    Model::with_params(cfg, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Enhancement;

    fn cfg() -> ModelConfig {
        ModelConfig {
            channels: 8,
            fusion_blocks: 2,
            heads: 2,
            height: 32,
            width: 32,
            enhancement: Enhancement::Progressive,
            seed: 1,
        }
    }

    fn bytes() -> Vec<u8> {
        let m = Model::<f32>::new(cfg()).unwrap();
        encode(&CheckpointHeader::of(m.config()), m.params()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = Model::<f32>::new(cfg()).unwrap();
        let b = encode(&CheckpointHeader::of(m.config()), m.params()).unwrap();
        let (h, store) = decode(&b).unwrap();
        assert_eq!(h, CheckpointHeader::of(&cfg()));
        assert_eq!(&store, m.params());
        assert_eq!(encode(&h, &store).unwrap(), b);
    }

    #[test]
    fn header_layout() {
        let b = bytes();
        assert_eq!(&b[..4], b"TFRD");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let words: Vec<u32> = (0..5)
            .map(|i| u32::from_le_bytes(b[8 + 4 * i..12 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(words, [8, 2, 2, 32, 32]);
        let m = Model::<f32>::new(cfg()).unwrap();
        assert_eq!(
            u64::from_le_bytes(b[28..36].try_into().unwrap()),
            m.params().len() as u64
        );
        let names: usize = m.params().names().iter().map(|n| 2 + n.len() + 1).sum();
        let dims: usize = m.params().values().iter().map(|v| 4 * v.rank()).sum();
        assert_eq!(b.len(), 36 + names + dims + 4 * cfg().param_count());
    }

    #[test]
    fn corruption_is_rejected() {
        let b = bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        for cut in [3, 20, 40, b.len() - 1] {
            assert!(matches!(decode(&b[..cut]), Err(Error::Format(_))), "cut at {cut}");
        }
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
        let mut ver = b.clone();
        ver[4] = 2;
        assert!(matches!(decode(&ver), Err(Error::Version(_))));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2])).unwrap();
        let one = encode(&CheckpointHeader::of(&cfg()), &store).unwrap();
        // splice the single record in twice and bump the count
        let record = one[36..].to_vec();
        let mut two = one.clone();
        two.extend_from_slice(&record);
        two[28..36].copy_from_slice(&2u64.to_le_bytes());
        let err = decode(&two).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("duplicate")), "{err}");
    }

    #[test]
    fn config_mismatch_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &Model::new(cfg()).unwrap()).unwrap();
        assert!(load_model(&path, cfg()).is_ok());
        for other in [
            ModelConfig { channels: 16, ..cfg() },
            ModelConfig {
                fusion_blocks: 4,
                ..cfg()
            },
            ModelConfig { heads: 4, ..cfg() },
        ] {
            assert!(matches!(load_model(&path, other), Err(Error::Version(_))), "{other:?}");
        }
    }
}

//! Single-file binary checkpoints.
//!
//! Layout (little-endian): magic `MSFTCKPT`, `u16` version, backbone config,
//! mode flags, `u32` record count, records, then the CRC32 of every
//! preceding byte. A record is a `u32`-length-prefixed UTF-8 name, a dtype
//! tag, a `u8` rank, `u32` extents and the raw element values.

use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::msft::{AttentionMode, Mixing, MsftConfig, Sharing};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::training::{Mode, Model};

pub const MAGIC: &[u8; 8] = b"MSFTCKPT";
pub const VERSION: u16 = 1;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn mode_tag(m: Mode) -> u8 {
    Mode::ALL.iter().position(|&x| x == m).expect("listed") as u8
}

fn sharing_tag(s: Sharing) -> u8 {
    match s {
        Sharing::PerScale => 0,
        Sharing::Shared => 1,
        Sharing::Frozen => 2,
    }
}

fn attention_tag(a: AttentionMode) -> u8 {
    match a {
        AttentionMode::InScale => 0,
        AttentionMode::Naive => 1,
        AttentionMode::Aligned => 2,
    }
}

fn mixing_tag(m: Mixing) -> u8 {
    match m {
        Mixing::Learned => 0,
        Mixing::Average => 1,
        Mixing::ScaleZero => 2,
    }
}

pub fn encode<T: Scalar>(model: &Model<T>, dtype: DType) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    w.extend_from_slice(&VERSION.to_le_bytes());
    let b = &model.backbone;
    for v in [b.layers, b.d, b.heads, b.patch, b.ffn_mult] {
        w.extend_from_slice(&u32_of(v, "backbone field")?.to_le_bytes());
    }
    w.extend_from_slice(&b.eps.to_le_bytes());
    w.extend_from_slice(&b.rope_base.to_le_bytes());
    let m = &model.msft;
    w.push(mode_tag(model.mode));
    w.extend_from_slice(&u32_of(m.k, "k")?.to_le_bytes());
    w.extend_from_slice(&u32_of(m.s, "s")?.to_le_bytes());
    w.extend_from_slice(&u32_of(m.lora_rank.unwrap_or(0), "lora rank")?.to_le_bytes());
    w.extend_from_slice(&m.lora_alpha.to_le_bytes());
    w.extend_from_slice(&[
        sharing_tag(m.adapters),
        sharing_tag(m.lora),
        u8::from(m.c2f),
        u8::from(m.f2c),
        attention_tag(m.attention),
        mixing_tag(m.mixing),
        u8::from(m.train_mask_token),
    ]);
    w.extend_from_slice(&u32_of(model.params.len(), "record count")?.to_le_bytes());
    for (name, t) in model.params.iter() {
        w.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        w.extend_from_slice(name.as_bytes());
        w.push(dtype.tag());
        w.push(u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("{name}: rank too large")))?);
        for &e in t.shape() {
            w.extend_from_slice(&u32_of(e, "extent")?.to_le_bytes());
        }
        for &x in t.data() {
            match dtype {
                DType::F32 => w.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                DType::F64 => w.extend_from_slice(&x.as_f64().to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&w);
    w.extend_from_slice(&crc.to_le_bytes());
    Ok(w)
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("unexpected end of data at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(Error::Corrupt(format!("invalid flag byte {t}"))),
        }
    }
}

fn pick<X: Copy>(options: &[X], tag: u8, what: &str) -> Result<X> {
    options
        .get(tag as usize)
        .copied()
        .ok_or_else(|| Error::Corrupt(format!("invalid {what} tag {tag}")))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("missing checkpoint magic".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version > VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("CRC mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 10 };
    let backbone = BackboneConfig {
        layers: r.usize()?,
        d: r.usize()?,
        heads: r.usize()?,
        patch: r.usize()?,
        ffn_mult: r.usize()?,
        eps: r.f64()?,
        rope_base: r.f64()?,
    };
    backbone.validate().map_err(|e| Error::Corrupt(format!("stored backbone config: {e}")))?;
    let mode = pick(&Mode::ALL, r.u8()?, "mode")?;
    let sharing = [Sharing::PerScale, Sharing::Shared, Sharing::Frozen];
    let k = r.usize()?;
    let s = r.usize()?;
    let rank = r.usize()?;
    let msft = MsftConfig {
        k,
        s,
        lora_rank: (rank > 0).then_some(rank),
        lora_alpha: r.f64()?,
        adapters: pick(&sharing, r.u8()?, "sharing")?,
        lora: pick(&sharing, r.u8()?, "sharing")?,
        c2f: r.bool()?,
        f2c: r.bool()?,
        attention: pick(
            &[AttentionMode::InScale, AttentionMode::Naive, AttentionMode::Aligned],
            r.u8()?,
            "attention",
        )?,
        mixing: pick(&[Mixing::Learned, Mixing::Average, Mixing::ScaleZero], r.u8()?, "mixing")?,
        train_mask_token: r.bool()?,
    };
    let count = r.usize()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt(format!("{name}: unknown dtype")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Corrupt(format!("{name}: size overflow")))?)?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Model::from_parts(backbone, mode, msft, params)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, dtype: DType) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model, dtype)?)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    decode(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks that it was written for `expected`.
pub fn load_compatible<T: Scalar>(path: impl AsRef<Path>, expected: &BackboneConfig) -> Result<Model<T>> {
    let model = load_checkpoint(path)?;
    if model.backbone != *expected {
        return Err(Error::Incompatible(format!(
            "checkpoint backbone {:?} differs from the configured {:?}",
            model.backbone, expected
        )));
    }
    Ok(model)
}

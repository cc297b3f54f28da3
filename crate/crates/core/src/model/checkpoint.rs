//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "DBDNCKPT"
//! version   u32      1
//! config    7 x u32  variant, input_channels, base_channels, pairs,
//!                    growth_rate, block_layers, depth
//! count     u32      number of named tensors
//! tensor    u32 name length, UTF-8 name, u32 rank, rank x u32 extents,
//!           f32 values in row-major order
//! ```
//!
//! Parameters come first in registration order, then batch-norm buffers.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, Network, Variant};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"DBDNCKPT";
pub const VERSION: u32 = 1;

fn variant_code(v: Variant) -> u32 {
    match v {
        Variant::V1 => 0,
        Variant::V2 => 1,
        Variant::DncnnRef => 2,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("extent fits u32").to_le_bytes());
}

pub fn to_bytes<T: Real>(net: &Network<T>) -> Vec<u8> {
    let c = net.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&variant_code(c.variant).to_le_bytes());
    for v in [
        c.input_channels,
        c.base_channels,
        c.pairs,
        c.growth_rate,
        c.block_layers,
        c.depth,
    ] {
        put_u32(&mut out, v);
    }
    let store = net.params();
    let tensors: Vec<(&str, &Tensor<T>)> = store
        .params()
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .chain(store.buffers().iter().map(|b| (b.name.as_str(), &b.value)))
        .collect();
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &e in t.shape() {
            put_u32(&mut out, e);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointFormat(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn extent(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Network<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let variant = match r.u32()? {
        0 => Variant::V1,
        1 => Variant::V2,
        2 => Variant::DncnnRef,
        other => return Err(Error::CheckpointFormat(format!("unknown variant code {other}"))),
    };
    let config = ModelConfig {
        variant,
        input_channels: r.extent()?,
        base_channels: r.extent()?,
        pairs: r.extent()?,
        growth_rate: r.extent()?,
        block_layers: r.extent()?,
        depth: r.extent()?,
    };
    config
        .validate()
        .map_err(|e| Error::CheckpointFormat(format!("invalid config block: {e}")))?;
    let mut net = Network::<T>::build(config, 0)?;
    let expected = net.params().params().len() + net.params().buffers().len();
    let count = r.extent()?;
    if count != expected {
        return Err(Error::CheckpointFormat(format!(
            "{count} tensors stored, config defines {expected}"
        )));
    }
    let mut seen = vec![false; expected];
    for _ in 0..count {
        let len = r.extent()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.extent()?;
        if rank > 8 {
            return Err(Error::CheckpointFormat(format!("implausible rank {rank} for `{name}`")));
        }
        let shape = (0..rank).map(|_| r.extent()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::CheckpointFormat("size overflow".into()))?,
        )?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();

        let store = net.params_mut();
        let n_params = store.params().len();
        let (slot, target) = if let Some(i) = store.params().iter().position(|p| p.name == name) {
            (i, &mut store.params_mut()[i].value)
        } else if let Some(i) = store.buffers().iter().position(|b| b.name == name) {
            (n_params + i, &mut store.buffers_mut()[i].value)
        } else {
            return Err(Error::CheckpointFormat(format!("unexpected tensor `{name}`")));
        };
        if target.shape() != shape.as_slice() {
            return Err(Error::CheckpointShape {
                name,
                expected: target.shape().to_vec(),
                found: shape,
            });
        }
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::CheckpointFormat(format!("duplicate tensor `{name}`")));
        }
        *target = Tensor::from_vec(&shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(net)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(net))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of the serialized network.
pub fn checkpoint_digest<T: Real>(net: &Network<T>) -> String {
    Sha256::digest(to_bytes(net))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Network<f32> {
        let mut cfg = ModelConfig::tiny(Variant::V1);
        cfg.base_channels = 4;
        cfg.growth_rate = 2;
        cfg.block_layers = 2;
        Network::build(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let net = tiny();
        let bytes = to_bytes(&net);
        let back = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = to_bytes(&tiny());
        for cut in [0, 4, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(from_bytes::<f32>(&bytes[..cut]), Err(Error::CheckpointFormat(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn distinct_errors_for_version_and_shape() {
        let mut bytes = to_bytes(&tiny());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes::<f32>(&bytes),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));

        // declare a wider base in the config block than the tensors carry
        let mut bytes = to_bytes(&tiny());
        bytes[20..24].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::CheckpointShape { .. })));

        let mut bytes = to_bytes(&tiny());
        bytes[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = to_bytes(&tiny());
        bytes.push(0);
        assert!(from_bytes::<f32>(&bytes).is_err());
    }
}

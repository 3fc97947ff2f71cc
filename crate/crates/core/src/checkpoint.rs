//! Binary model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MKD1"
//! image_size patch_size channels embed_dim depth heads mlp_hidden num_classes
//! tensor_count
//! per tensor: name_len name_bytes rank extent... f32_le_data...
//! ```
//!
//! Tensors appear in canonical parameter order. The MLP ratio is stored as
//! the hidden width, so a loaded config carries `mlp_hidden / embed_dim`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{param_shapes, ViT, ViTConfig, ViTParams};

pub const MAGIC: &[u8; 4] = b"MKD1";

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::param(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(model: &ViT<f32>) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + 4 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    for v in [
        c.image_size,
        c.patch_size,
        c.channels,
        c.embed_dim,
        c.depth,
        c.heads,
        c.mlp_hidden(),
        c.num_classes,
    ] {
        push_u32(&mut out, v)?;
    }
    let entries = model.params.entries();
    push_u32(&mut out, entries.len())?;
    for (name, t) in entries {
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.rank())?;
        for &e in t.shape() {
            push_u32(&mut out, e)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ViT<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let mut header = [0usize; 8];
    for (slot, name) in header.iter_mut().zip([
        "image_size",
        "patch_size",
        "channels",
        "embed_dim",
        "depth",
        "heads",
        "mlp_hidden",
        "num_classes",
    ]) {
        *slot = r.u32(name)?;
    }
    let [image_size, patch_size, channels, embed_dim, depth, heads, mlp_hidden, num_classes] =
        header;
    if embed_dim == 0 {
        return Err(Error::Load("embed_dim is zero".into()));
    }
    let config = ViTConfig {
        image_size,
        patch_size,
        channels,
        embed_dim,
        depth,
        heads,
        mlp_ratio: mlp_hidden as f64 / embed_dim as f64,
        num_classes,
    };
    config.validate().map_err(|e| Error::Load(e.to_string()))?;
    if config.mlp_hidden() != mlp_hidden {
        return Err(Error::Load(format!("mlp hidden width {mlp_hidden} is not representable")));
    }

    let expected = param_shapes(&config);
    let count = r.u32("tensor count")?;
    if count != expected.len() {
        return Err(Error::Load(format!(
            "expected {} tensors, file has {count}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let at = r.pos as u64;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Format {
            offset: at,
            msg: "tensor name is not UTF-8".into(),
        })?;
        if name != want_name {
            return Err(Error::Load(format!("expected tensor {want_name}, found {name}")));
        }
        let rank = r.u32("rank")?;
        if rank != want_shape.len() {
            return Err(Error::Load(format!("{name}: rank {rank}, expected {}", want_shape.len())));
        }
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::Load(format!("{name}: shape {shape:?}, expected {want_shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(4 * numel, "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after last tensor".into(),
        });
    }
    let params = ViTParams::from_entries(&config, tensors)?;
    Ok(ViT { config, params })
}

pub fn save(model: &ViT<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)?).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ViT<f32>> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::file(path, e))?)
}

/// Loads and checks the stored architecture against `expected`.
pub fn load_expecting(path: impl AsRef<Path>, expected: &ViTConfig) -> Result<ViT<f32>> {
    let model = load(path)?;
    let c = &model.config;
    let same = c.image_size == expected.image_size
        && c.patch_size == expected.patch_size
        && c.channels == expected.channels
        && c.embed_dim == expected.embed_dim
        && c.depth == expected.depth
        && c.heads == expected.heads
        && c.mlp_hidden() == expected.mlp_hidden()
        && c.num_classes == expected.num_classes;
    if !same {
        return Err(Error::Load(format!(
            "checkpoint holds {c:?}, configuration asks for {expected:?}"
        )));
    }
    Ok(ViT {
        config: expected.clone(),
        params: model.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
            num_classes: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = ViT::<f32>::new(cfg(), 3).unwrap();
        // include values that only survive a bit-exact path
        m.params.head.bias.data_mut()[0] = f32::MIN_POSITIVE;
        m.params.head.bias.data_mut()[1] = -0.0;
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, a), (_, b)) in m.params.entries().into_iter().zip(back.params.entries()) {
            let a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&ViT::<f32>::new(cfg(), 0).unwrap()).unwrap();
        assert_eq!(&bytes[..4], b"MKD1");
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!((0..9).map(word).collect::<Vec<_>>(), vec![8, 4, 3, 8, 2, 2, 32, 3, 32]);
        // first tensor name
        assert_eq!(word(9), 12);
        assert_eq!(&bytes[44..56], b"patch.weight");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&ViT::<f32>::new(cfg(), 0).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { .. })));
        let mut wrong_count = bytes.clone();
        wrong_count[36] = 7;
        assert!(matches!(decode(&wrong_count), Err(Error::Load(_))));
    }

    #[test]
    fn load_checks_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&ViT::<f32>::new(cfg(), 0).unwrap(), &path).unwrap();
        assert!(load_expecting(&path, &cfg()).is_ok());
        let other = ViTConfig {
            embed_dim: 16,
            ..cfg()
        };
        assert!(matches!(load_expecting(&path, &other), Err(Error::Load(_))));
        assert!(matches!(load(dir.path().join("none")), Err(Error::File { .. })));
    }
}

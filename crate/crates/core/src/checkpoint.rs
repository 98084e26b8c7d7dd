//! Binary checkpoints for every trained artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ADVLCKPT"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen     {"kind", "meta", "arrays": [{"name", "shape", "offset", "len"}]}
//! payload           f32 values; `offset`/`len` count elements
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::classifier::Classifier;
use crate::codec::LatentCodec;
use crate::data::DataRange;
use crate::diffusion::{Denoiser, DenoiserConfig, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::inversion::{ConditionEmbedding, Provenance};
use crate::nn::{Activation, Mlp};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADVLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 16;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// Named arrays plus a free-form metadata record.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<(String, Tensor)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self { kind: kind.to_string(), meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push((name.into(), t.clone()));
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no array `{name}`")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.len() };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { kind: self.kind.clone(), meta: self.meta.clone(), arrays })?;
        let mut out = Vec::with_capacity(PREFIX + header.len() + 4 * offset + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Checks, in order: magic, length, digest, version.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(Error::Truncated { expected: PREFIX + DIGEST, found: bytes.len() });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format(format!("not a checkpoint: magic {:02x?}", &bytes[..8])));
        }
        if bytes.len() < PREFIX {
            return Err(Error::Truncated { expected: PREFIX + DIGEST, found: bytes.len() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_end = PREFIX + hlen;
        if bytes.len() < header_end + DIGEST {
            return Err(Error::Truncated { expected: header_end + DIGEST, found: bytes.len() });
        }
        let digest_ok = |end: usize| Sha256::digest(&bytes[..end]).as_slice() == &bytes[end..end + DIGEST];
        let header: Header = match serde_json::from_slice(&bytes[PREFIX..header_end]) {
            Ok(h) => h,
            Err(e) => {
                let end = bytes.len() - DIGEST;
                return Err(if digest_ok(end) { Error::Format(format!("checkpoint header: {e}")) } else { Error::HashMismatch });
            }
        };
        let elems: usize = header.arrays.iter().map(|a| a.len).sum();
        let expected = header_end + 4 * elems + DIGEST;
        if bytes.len() < expected {
            return Err(Error::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - expected)));
        }
        if !digest_ok(expected - DIGEST) {
            return Err(Error::HashMismatch);
        }
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let payload = &bytes[header_end..expected - DIGEST];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            if a.offset + a.len > elems || a.shape.iter().product::<usize>() != a.len {
                return Err(Error::Format(format!("array `{}` has inconsistent extents", a.name)));
            }
            let data = payload[4 * a.offset..4 * (a.offset + a.len)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push((a.name, Tensor::new(a.shape, data)?));
        }
        Ok(Self { kind: header.kind, meta: header.meta, arrays })
    }

    /// Writes the file and returns the hex digest of its bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn push_mlp(ck: &mut Checkpoint, prefix: &str, mlp: &Mlp) {
    for (name, p) in mlp.param_names(prefix).into_iter().zip(mlp.params()) {
        ck.push(name, p);
    }
}

fn read_params(ck: &Checkpoint, prefix: &str, dims: &[usize]) -> Result<Vec<Tensor>> {
    Mlp::names_for(dims, prefix).iter().map(|n| ck.array(n).cloned()).collect()
}

fn read_mlp(ck: &Checkpoint, prefix: &str, dims: &[usize], hidden: Activation, output: Activation) -> Result<Mlp> {
    Mlp::from_params(dims, hidden, output, read_params(ck, prefix, dims)?)
}

pub fn denoiser_checkpoint(model: &Denoiser, sched: &DiffusionSchedule) -> Checkpoint {
    let mut ck = Checkpoint::new("denoiser", json!({ "config": model.config, "schedule": sched }));
    push_mlp(&mut ck, "net", &model.net);
    ck.push("class_table", &model.class_table);
    ck
}

pub fn read_denoiser(ck: &Checkpoint) -> Result<(Denoiser, DiffusionSchedule)> {
    ck.expect_kind("denoiser")?;
    let config: DenoiserConfig = ck.meta_field("config")?;
    let sched: DiffusionSchedule = ck.meta_field("schedule")?;
    let sched = sched.rebuild()?;
    let params = read_params(ck, "net", &config.layer_dims())?;
    Ok((Denoiser::from_parts(config, params, ck.array("class_table")?.clone())?, sched))
}

pub fn codec_checkpoint(codec: &LatentCodec) -> Checkpoint {
    let meta = json!({ "encoder_dims": codec.encoder.dims, "range": codec.range });
    let mut ck = Checkpoint::new("codec", meta);
    push_mlp(&mut ck, "encoder", &codec.encoder);
    push_mlp(&mut ck, "decoder", &codec.decoder);
    ck
}

pub fn read_codec(ck: &Checkpoint) -> Result<LatentCodec> {
    ck.expect_kind("codec")?;
    let enc_dims: Vec<usize> = ck.meta_field("encoder_dims")?;
    let range: DataRange = ck.meta_field("range")?;
    let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
    let out = match range {
        DataRange::Unit => Activation::Sigmoid,
        DataRange::Unbounded => Activation::Identity,
    };
    Ok(LatentCodec {
        encoder: read_mlp(ck, "encoder", &enc_dims, Activation::Silu, Activation::Identity)?,
        decoder: read_mlp(ck, "decoder", &dec_dims, Activation::Silu, out)?,
        range,
    })
}

pub fn classifier_checkpoint(c: &Classifier) -> Checkpoint {
    let mut ck = Checkpoint::new("classifier", json!({ "dims": c.net.dims }));
    push_mlp(&mut ck, "net", &c.net);
    ck
}

pub fn read_classifier(ck: &Checkpoint) -> Result<Classifier> {
    ck.expect_kind("classifier")?;
    let dims: Vec<usize> = ck.meta_field("dims")?;
    Ok(Classifier { net: read_mlp(ck, "net", &dims, Activation::Silu, Activation::Identity)? })
}

pub fn embedding_checkpoint(e: &ConditionEmbedding) -> Checkpoint {
    let mut ck = Checkpoint::new("embedding", json!({ "provenance": e.provenance }));
    ck.push("vector", &e.vector);
    ck
}

pub fn read_embedding(ck: &Checkpoint) -> Result<ConditionEmbedding> {
    ck.expect_kind("embedding")?;
    let provenance: Provenance = ck.meta_field("provenance")?;
    Ok(ConditionEmbedding { vector: ck.array("vector")?.clone(), provenance })
}

/// A batch of samples with labels, stored without quantization.
pub fn images_checkpoint(x: &Tensor, labels: &[usize], image_size: Option<(usize, usize)>) -> Checkpoint {
    let mut ck = Checkpoint::new("images", json!({ "image_size": image_size, "labels": labels }));
    ck.push("images", x);
    ck
}

pub fn read_images(ck: &Checkpoint) -> Result<(Tensor, Vec<usize>, Option<(usize, usize)>)> {
    ck.expect_kind("images")?;
    let x = ck.array("images")?.clone();
    let labels: Vec<usize> = ck.meta_field("labels")?;
    if labels.len() != x.rows() {
        return Err(Error::CountMismatch { images: x.rows(), labels: labels.len() });
    }
    Ok((x, labels, ck.meta_field("image_size")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    fn sample() -> Checkpoint {
        let mut rng = RngStream::new(0);
        let mut ck = Checkpoint::new("test", json!({ "note": "x" }));
        ck.push("a", &rng.gaussian(&[3, 2]));
        ck.push("b", &rng.gaussian(&[4]));
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_payload_fails_hash() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::HashMismatch)));
    }

    #[test]
    fn truncation_reports_expected_length() {
        let bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        match Checkpoint::from_bytes(&bytes[..n - 5]) {
            Err(Error::Truncated { expected, found }) => assert_eq!((expected, found), (n, n - 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_checked_after_hash() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        let n = bytes.len();
        let digest = Sha256::digest(&bytes[..n - DIGEST]);
        bytes[n - DIGEST..].copy_from_slice(&digest);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(9))));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT0000"), Err(Error::Format(_))));
    }
}

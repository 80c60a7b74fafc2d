//! Persistence: 8-bit PGM images, lossless tensor dumps, digest-checked
//! parameter checkpoints and TOML manifests.

use std::fs;
use std::path::Path;

use restore_autodiff::{ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVRCKPT";
const TENSOR_MAGIC: &[u8; 8] = b"ADVRTNSR";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn pgm_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Pgm {
        offset,
        msg: msg.into(),
    }
}

/// Encodes a `[1, H, W]` or `[H, W]` image with values in `[0, 1]` as binary
/// PGM with maxval 255.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [1, h, w] | [h, w] => (h, w),
        ref s => {
            return Err(crate::error::invalid(
                "save_image",
                format!("expected a grayscale image, got {s:?}"),
            ))
        }
    };
    let mut out = format!("P5 {w} {h} 255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes binary PGM (maxval ≤ 255) into a `[1, H, W]` tensor in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(pgm_err(0, format!("expected magic P5, found {found:?}")));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err(
                pos,
                format!("expected header field {} as a decimal number", i + 1),
            ));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pgm_err(start, "header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(pgm_err(pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(pgm_err(pos, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(pgm_err(pos, "missing whitespace after header"));
    }
    pos += 1;
    let need = w * h;
    if bytes.len() - pos < need {
        return Err(pgm_err(bytes.len(), format!("truncated pixel data: need {need} bytes")));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok(Tensor::new(vec![1, h, w], data)?)
}

pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)?).map_err(io_err(path))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(io_err(path))?)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.0.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|&n| n <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor of shape {shape:?} exceeds the remaining data")))?;
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Writes a lossless little-endian dump of a tensor.
pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = Writer(TENSOR_MAGIC.to_vec());
    w.tensor(t);
    let path = path.as_ref();
    fs::write(path, w.0).map_err(io_err(path))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    if !bytes.starts_with(TENSOR_MAGIC) {
        return Err(Error::Checkpoint(format!("{} is not a tensor dump", path.display())));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: TENSOR_MAGIC.len(),
    };
    r.tensor()
}

/// Model families that can be stored in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Autoencoder,
    Rldm,
    EmbeddingModel,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Autoencoder => "autoencoder",
            Self::Rldm => "rldm",
            Self::EmbeddingModel => "embedding-model",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "autoencoder" => Ok(Self::Autoencoder),
            "rldm" => Ok(Self::Rldm),
            "embedding-model" => Ok(Self::EmbeddingModel),
            other => Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Named parameter tensors together with the configuration that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// JSON echo of the model and training configuration.
    pub config: String,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
        w.u32(CHECKPOINT_VERSION);
        w.str(self.kind.tag());
        w.str(&self.config);
        w.u32(self.blobs.len() as u32);
        for (name, t) in &self.blobs {
            w.str(name);
            w.tensor(t);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("digest mismatch".into()));
        }
        if !body.starts_with(CHECKPOINT_MAGIC) {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = ModelKind::from_tag(&r.str()?)?;
        let config = r.str()?;
        let n = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            blobs.push((name, r.tensor()?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { kind, config, blobs })
    }

    /// Checks the stored kind before handing the checkpoint to a loader.
    pub fn expect_kind(self, kind: ModelKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                kind.tag(),
                self.kind.tag()
            )));
        }
        Ok(self)
    }
}

/// Writes the checkpoint and returns the hex SHA-256 of the file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<String> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes();
    fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path).map_err(io_err(path))?)
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(io_err(path))?)))
}

/// Parameter tensors of a store, prefixed with `prefix`.
pub fn store_blobs(store: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|p| (format!("{prefix}{}", p.name()), p.value().clone()))
        .collect()
}

/// Loads every parameter of `store` from the blobs carrying `prefix`; the
/// prefixed blob names must match the store exactly.
pub fn load_store(store: &mut ParamStore, blobs: &[(String, Tensor)], prefix: &str) -> Result<()> {
    let mine: Vec<&(String, Tensor)> = blobs.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
    if mine.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters under {prefix:?}, found {}",
            store.len(),
            mine.len()
        )));
    }
    for (name, t) in mine {
        store
            .set_value(&name[prefix.len()..], t.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

/// Serialises a value as TOML (keys in declaration order).
pub fn to_manifest<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_manifest<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_manifest(value)?).map_err(io_err(path))
}

pub fn read_manifest<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_round_trip() {
        let img = Tensor::new(vec![1, 32, 32], (0..1024).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5 32 32 255\n"));
        let back = decode_pgm(&bytes).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn pgm_rejects_ascii_variant() {
        let err = decode_pgm(b"P3 2 2 255\n0 0 0 0").unwrap_err();
        assert!(matches!(err, Error::Pgm { offset: 0, .. }));
        let err = decode_pgm(b"P5 2 x 255\n").unwrap_err();
        assert!(matches!(err, Error::Pgm { offset: 5, .. }), "{err}");
        assert!(decode_pgm(b"P5 2 2 255\n\x00").is_err());
    }

    #[test]
    fn pgm_accepts_comments() {
        let t = decode_pgm(b"P5\n# c\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let ck = Checkpoint {
            kind: ModelKind::EmbeddingModel,
            config: "{\"a\":1}".into(),
            blobs: vec![
                (
                    "w".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(0.1)),
            ],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.blobs[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("digest"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(ModelKind::from_tag("gan").is_err());
        assert!(back.expect_kind(ModelKind::Rldm).is_err());
    }
}

//! Binary checkpoints for every model kind.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCUP" | u32 version | u32 meta_len | meta (UTF-8 key=value lines)
//! u32 n_tensors | n × (u32 name_len | name | u32 ndim | ndim × u64 dim | u64 offset)
//! u64 payload_len | payload (f32 blobs) | 32-byte SHA-256 of everything before it
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::AttributeLabel;
use crate::disc::Discriminator;
use crate::error::{Error, Result};
use crate::grad::{Module, Tensor};
use crate::prompt::{MaterializedPrompt, PromptBlock};
use crate::scalar::Scalar;
use crate::seqmodel::{CausalLm, TransformerConfig};

pub const MAGIC: &[u8; 4] = b"DCUP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Clm,
    Disc,
    Prompt,
    Materialized,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clm => "clm",
            Self::Disc => "disc",
            Self::Prompt => "prompt",
            Self::Materialized => "materialized",
        }
    }
}

/// Ordered `key=value` pairs from a checkpoint header.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metadata(pub Vec<(String, String)>);

impl Metadata {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.0.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.0.push((key.to_string(), value)),
        }
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key).ok_or_else(|| Error::Format(format!("metadata lacks `{key}`")))?;
        raw.parse().map_err(|_| Error::Format(format!("metadata `{key}` has bad value `{raw}`")))
    }

    fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
            out.push((k.to_string(), v.to_string()));
        }
        Ok(Self(out))
    }
}

/// A model that can be rebuilt from its header metadata.
pub trait Checkpointable<S: Scalar>: Module<S> + Sized {
    const KIND: ModelKind;
    /// Shape-determining hyperparameters.
    fn architecture(&self) -> Metadata;
    /// A model with the right shapes; values are overwritten on load.
    fn skeleton(meta: &Metadata) -> Result<Self>;
}

fn arch_meta(c: &TransformerConfig) -> Metadata {
    let mut m = Metadata::default();
    m.set("vocab_size", c.vocab_size);
    m.set("d_model", c.d_model);
    m.set("layers", c.layers);
    m.set("heads", c.heads);
    m.set("max_context", c.max_context);
    m
}

fn arch_from(meta: &Metadata) -> Result<TransformerConfig> {
    Ok(TransformerConfig {
        vocab_size: meta.require("vocab_size")?,
        d_model: meta.require("d_model")?,
        layers: meta.require("layers")?,
        heads: meta.require("heads")?,
        max_context: meta.require("max_context")?,
    })
}

impl<S: Scalar> Checkpointable<S> for CausalLm<S> {
    const KIND: ModelKind = ModelKind::Clm;
    fn architecture(&self) -> Metadata {
        arch_meta(&self.config())
    }
    fn skeleton(meta: &Metadata) -> Result<Self> {
        CausalLm::new(arch_from(meta)?, 0)
    }
}

impl<S: Scalar> Checkpointable<S> for Discriminator<S> {
    const KIND: ModelKind = ModelKind::Disc;
    fn architecture(&self) -> Metadata {
        arch_meta(&self.config())
    }
    fn skeleton(meta: &Metadata) -> Result<Self> {
        Discriminator::new(arch_from(meta)?, 0)
    }
}

impl<S: Scalar> Checkpointable<S> for PromptBlock<S> {
    const KIND: ModelKind = ModelKind::Prompt;
    fn architecture(&self) -> Metadata {
        let mut m = Metadata::default();
        m.set("prompt_len", self.len());
        m.set("d_model", self.d_model());
        m.set("attribute", self.attribute.name());
        m
    }
    fn skeleton(meta: &Metadata) -> Result<Self> {
        let attr: String = meta.require("attribute")?;
        let attr = AttributeLabel::parse(&attr).map_err(|e| Error::Format(e.to_string()))?;
        PromptBlock::init(meta.require("prompt_len")?, meta.require("d_model")?, attr, 0)
    }
}

impl<S: Scalar> Checkpointable<S> for MaterializedPrompt<S> {
    const KIND: ModelKind = ModelKind::Materialized;
    fn architecture(&self) -> Metadata {
        let (rows, cols) = self.matrix.dims2();
        let mut m = Metadata::default();
        m.set("prompt_len", rows);
        m.set("d_model", cols);
        m.set("attribute", self.attribute.name());
        m
    }
    fn skeleton(meta: &Metadata) -> Result<Self> {
        let attr: String = meta.require("attribute")?;
        let attribute = AttributeLabel::parse(&attr).map_err(|e| Error::Format(e.to_string()))?;
        let matrix = Tensor::zeros(&[meta.require("prompt_len")?, meta.require("d_model")?]);
        Ok(MaterializedPrompt { matrix, attribute })
    }
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes `model`; `extra` is appended after the fixed keys.
pub fn encode<S: Scalar, M: Checkpointable<S>>(model: &M, extra: &Metadata) -> Vec<u8> {
    let mut meta = Metadata::default();
    meta.set("kind", M::KIND.name());
    for (k, v) in model.architecture().0.into_iter().chain(extra.0.iter().cloned()) {
        meta.set(&k, v);
    }
    let text = meta.render();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for &v in t.data() {
            payload.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint<S: Scalar, M: Checkpointable<S>>(model: &M, extra: &Metadata, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, extra))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflow".into()))
    }
}

/// Reads the header only, returning the stored metadata.
pub fn peek_metadata(bytes: &[u8]) -> Result<Metadata> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    Metadata::parse(text)
}

/// Decodes a checkpoint of kind `M`, verifying the checksum.
pub fn decode<S: Scalar, M: Checkpointable<S>>(bytes: &[u8]) -> Result<(M, Metadata)> {
    let meta = peek_metadata(bytes)?;
    if bytes.len() < 32 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let found = meta.get("kind").unwrap_or("");
    if found != M::KIND.name() {
        return Err(Error::KindMismatch { expected: M::KIND.name().into(), found: found.into() });
    }
    let mut model = M::skeleton(&meta)?;
    let mut r = Reader { buf: body, pos: 0 };
    r.take(8)?;
    let n = r.u32()? as usize;
    r.take(n)?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        dir.push((name, shape, r.len()?));
    }
    let payload_len = r.len()?;
    let payload = r.take(payload_len)?;
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let expected: Vec<(String, Vec<usize>)> =
        model.named_params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != dir.len() {
        return Err(Error::Format(format!("expected {} tensors, found {}", expected.len(), dir.len())));
    }
    for (((name, shape), (dname, dshape, offset)), t) in expected.iter().zip(&dir).zip(model.params_mut()) {
        if name != dname || shape != dshape {
            return Err(Error::Format(format!("tensor `{dname}` {dshape:?} does not match `{name}` {shape:?}")));
        }
        let nbytes = t.numel() * 4;
        let blob = offset
            .checked_add(nbytes)
            .filter(|&e| e <= payload.len())
            .map(|e| &payload[*offset..e])
            .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past the payload")))?;
        let rg = t.requires_grad;
        let values: Vec<S> =
            blob.chunks_exact(4).map(|c| S::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
        *t = Tensor::new(shape, values)?;
        t.requires_grad = rg;
    }
    Ok((model, meta))
}

pub fn load_checkpoint<S: Scalar, M: Checkpointable<S>>(path: &Path) -> Result<(M, Metadata)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerConfig {
        TransformerConfig { vocab_size: 16, d_model: 8, layers: 1, heads: 2, max_context: 16 }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let lm = CausalLm::<f32>::new(small(), 4).unwrap();
        let mut extra = Metadata::default();
        extra.set("seed", 4);
        let bytes = encode(&lm, &extra);
        let (back, meta): (CausalLm<f32>, _) = decode(&bytes).unwrap();
        assert_eq!(back.param_hash(), lm.param_hash());
        assert_eq!(meta.get("seed"), Some("4"));
        assert_eq!(meta.get("kind"), Some("clm"));
        let probe = [0, 3, 7, 2];
        assert_eq!(back.forward(&probe, None).unwrap(), lm.forward(&probe, None).unwrap());

        let block = PromptBlock::<f32>::init(5, 8, AttributeLabel::NEGATIVE, 2).unwrap();
        let (b2, _): (PromptBlock<f32>, _) = decode(&encode(&block, &Metadata::default())).unwrap();
        assert_eq!(b2.param_hash(), block.param_hash());
        assert_eq!(b2.attribute, AttributeLabel::NEGATIVE);
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let d = Discriminator::<f32>::new(small(), 1).unwrap();
        let bytes = encode(&d, &Metadata::default());
        let mut flipped = bytes.clone();
        let i = bytes.len() - 40;
        flipped[i] ^= 0x01;
        assert!(matches!(decode::<f32, Discriminator<f32>>(&flipped), Err(Error::Format(_))));
        assert!(matches!(decode::<f32, Discriminator<f32>>(&bytes[..bytes.len() - 7]), Err(Error::Format(_))));
        assert!(matches!(decode::<f32, CausalLm<f32>>(&bytes), Err(Error::KindMismatch { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode::<f32, Discriminator<f32>>(&magic), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(decode::<f32, Discriminator<f32>>(&version), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.ckpt");
        let lm = CausalLm::<f32>::new(small(), 1).unwrap();
        save_checkpoint(&lm, &Metadata::default(), &p).unwrap();
        let (back, _): (CausalLm<f32>, _) = load_checkpoint(&p).unwrap();
        assert_eq!(back.param_hash(), lm.param_hash());
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}

//! Binary model file.
//!
//! Layout, all integers `u32` little-endian and floats `f64` little-endian:
//!
//! ```text
//! magic "CVLN" | version
//! config:   embedding_dim | classes | head_bias (u8) | group_count | (width, count)*
//! arrays:   vocab_size | embeddings (vocab_size × d, row-major)
//!           per filter: weights (d × width, row-major) | bias
//!           head (classes × m, row-major) | head_bias (classes)
//! vocab:    per id: byte_len | utf-8 bytes
//! ```

use crate::corpus::{EmbeddingTable, Vocabulary, PAD_TOKEN, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, DenseVector};

use super::{CnnModel, ConvFilter, FilterSpec, ModelConfig};

const MAGIC: &[u8; 4] = b"CVLN";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn serialize_model(model: &CnnModel, vocab: &Vocabulary) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, MODEL_FORMAT_VERSION);

    let cfg = &model.config;
    put_u32(&mut out, cfg.embedding_dim as u32);
    put_u32(&mut out, cfg.classes as u32);
    out.push(u8::from(cfg.head_bias));
    put_u32(&mut out, cfg.filters.0.len() as u32);
    for &(w, n) in &cfg.filters.0 {
        put_u32(&mut out, w as u32);
        put_u32(&mut out, n as u32);
    }

    put_u32(&mut out, model.embeddings.vocab_size() as u32);
    put_f64s(&mut out, model.embeddings.matrix.as_slice());
    for f in &model.filters {
        put_f64s(&mut out, f.weights.as_slice());
        put_f64s(&mut out, &[f.bias]);
    }
    put_f64s(&mut out, model.head.as_slice());
    put_f64s(&mut out, model.head_bias.as_slice());

    for tok in vocab.tokens() {
        put_u32(&mut out, tok.len() as u32);
        out.extend_from_slice(tok.as_bytes());
    }
    out
}

pub fn deserialize_model(bytes: &[u8]) -> Result<(CnnModel, Vocabulary)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {MODEL_FORMAT_VERSION}"
        )));
    }
    let embedding_dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let head_bias = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad head-bias flag {b}"))),
    };
    let groups = r.u32()? as usize;
    let mut spec = Vec::with_capacity(groups.min(64));
    for _ in 0..groups {
        spec.push((r.u32()? as usize, r.u32()? as usize));
    }
    let config = ModelConfig {
        embedding_dim,
        filters: FilterSpec(spec),
        classes,
        head_bias,
    };

    let vocab_size = r.u32()? as usize;
    let embeddings = EmbeddingTable {
        matrix: DenseMatrix::new(vocab_size, embedding_dim, r.f64s(vocab_size * embedding_dim)?)?,
    };
    let mut filters = Vec::new();
    for (id, width) in config.filters.widths().into_iter().enumerate() {
        let weights = DenseMatrix::new(embedding_dim, width, r.f64s(embedding_dim * width)?)?;
        let bias = r.f64s(1)?[0];
        filters.push(ConvFilter::new(id, weights, bias));
    }
    let m = filters.len();
    let head = DenseMatrix::new(classes, m, r.f64s(classes * m)?)?;
    let head_bias = DenseVector::new(r.f64s(classes)?)?;

    let mut tokens = Vec::with_capacity(vocab_size);
    for _ in 0..vocab_size {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        let tok = std::str::from_utf8(raw).map_err(|_| Error::Format("vocabulary token is not UTF-8".into()))?;
        tokens.push(tok.to_string());
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
        return Err(Error::Format("vocabulary must start with PAD, UNK".into()));
    }
    let vocab = Vocabulary::from_tokens(tokens.into_iter().skip(2))?;

    let model = CnnModel {
        config,
        embeddings,
        filters,
        head,
        head_bias,
    };
    model.validate()?;
    Ok((model, vocab))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
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
            .ok_or_else(|| Error::Format(format!("truncated payload at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::random_model;

    fn sample() -> (CnnModel, Vocabulary) {
        let vocab = Vocabulary::from_tokens((0..6).map(|i| format!("tok{i}"))).unwrap();
        let cfg = ModelConfig { embedding_dim: 5, ..Default::default() };
        (random_model(cfg, vocab.len(), 9), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, vocab) = sample();
        let bytes = serialize_model(&model, &vocab);
        let (back, vocab_back) = deserialize_model(&bytes).unwrap();
        assert_eq!(vocab_back, vocab);
        assert_eq!(back, model);
        assert_eq!(serialize_model(&back, &vocab_back), bytes);
    }

    #[test]
    fn rejects_version_and_truncation() {
        let (model, vocab) = sample();
        let mut bytes = serialize_model(&model, &vocab);
        let err = deserialize_model(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        bytes[4] = 7;
        let err = deserialize_model(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert!(deserialize_model(b"nope").is_err());
    }
}

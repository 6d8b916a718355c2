//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "ILRRCKPT"
//! version      u32
//! config       8 × u32  vocab_size hidden_dim num_layers num_heads
//!                       max_seq_len mask_token_id ffn_dim tied_head
//! vocab        u32 count, then per word: u32 byte length + UTF-8 bytes
//! sections     u32 count, then per section:
//!              u32 name length + name, u32 element count, raw f32 array
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tokens::Vocab;

use super::{DenoiserConfig, Weights};

pub const MAGIC: &[u8; 8] = b"ILRRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Trained denoiser with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: Weights,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn new(weights: Weights, vocab: Vocab) -> Result<Self> {
        if vocab.len() != weights.config.vocab_size {
            return Err(Error::Contract(format!(
                "vocabulary has {} words but the model expects {}",
                vocab.len(),
                weights.config.vocab_size
            )));
        }
        if vocab.mask_id() != weights.config.mask_token_id {
            return Err(Error::Contract(
                "vocabulary and model disagree on the mask token".into(),
            ));
        }
        Ok(Checkpoint { weights, vocab })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.weights.config
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize to bytes.
pub fn write_checkpoint(ckpt: &Checkpoint, out: &mut impl Write) -> Result<()> {
    let c = &ckpt.weights.config;
    let mut buf = Vec::with_capacity(16 + 4 * ckpt.weights.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        c.vocab_size,
        c.hidden_dim,
        c.num_layers,
        c.num_heads,
        c.max_seq_len,
        c.mask_token_id as usize,
        c.ffn_dim,
        c.tied_head as usize,
    ] {
        put_u32(&mut buf, v)?;
    }
    put_u32(&mut buf, ckpt.vocab.len())?;
    for w in ckpt.vocab.words() {
        put_u32(&mut buf, w.len())?;
        buf.extend_from_slice(w.as_bytes());
    }
    let sections = ckpt.weights.sections();
    put_u32(&mut buf, sections.len())?;
    for (name, data) in sections {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, data.len())?;
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Deserialize and validate.
pub fn read_checkpoint(input: &mut impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut f = [0usize; 8];
    for (i, v) in f.iter_mut().enumerate() {
        *v = cur.u32(&format!("config field {i}"))?;
    }
    let config = DenoiserConfig {
        vocab_size: f[0],
        hidden_dim: f[1],
        num_layers: f[2],
        num_heads: f[3],
        max_seq_len: f[4],
        mask_token_id: f[5] as u32,
        ffn_dim: f[6],
        tied_head: match f[7] {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("bad tied_head flag {other}"))),
        },
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;

    let n_words = cur.u32("vocabulary size")?;
    if n_words != config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary table has {n_words} words, header declares {}",
            config.vocab_size
        )));
    }
    let words = (0..n_words)
        .map(|_| cur.string("vocabulary word"))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_words(words).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut weights = Weights::init(config, &mut Rng::new(0, 0))?;
    let n_sections = cur.u32("section count")?;
    let mut expected = weights.sections_mut();
    if n_sections != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{n_sections} weight sections, expected {}",
            expected.len()
        )));
    }
    for (name, dst) in expected.iter_mut() {
        let got = cur.string("section name")?;
        if got != *name {
            return Err(Error::Checkpoint(format!(
                "expected section {name}, found {got}"
            )));
        }
        let count = cur.u32("element count")?;
        if count != dst.len() {
            return Err(Error::Checkpoint(format!(
                "section {name} holds {count} values but the header implies {}",
                dst.len()
            )));
        }
        let raw = cur.take(4 * count, name)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    drop(expected);
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last section",
            bytes.len() - cur.pos
        )));
    }
    Checkpoint::new(weights, vocab).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}

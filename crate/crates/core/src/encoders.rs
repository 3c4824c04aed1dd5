//! Direction-token text encoder and the frozen image feature store.
//!
//! Captions are tokenized as `[CLS] [FORWARD|BACKWARD] w1 .. wn`. The encoder
//! is a small pre-norm transformer; the final hidden state at the `[CLS]`
//! position is projected to the joint space and L2-normalized.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const FORWARD: u32 = 3;
pub const BACKWARD: u32 = 4;
/// First id assigned to a content word.
pub const FIRST_WORD: u32 = 5;

const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[FORWARD]", "[BACKWARD]"];

/// Query direction, selecting which learnable token follows `[CLS]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reversed,
}

impl Direction {
    pub fn token(self) -> u32 {
        match self {
            Direction::Forward => FORWARD,
            Direction::Reversed => BACKWARD,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "reversed" | "backward" => Ok(Direction::Reversed),
            other => Err(Error::Usage(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary, assigning ids in first-seen order.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self::new();
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    /// Returns the id of `word`, adding it if new.
    pub fn insert(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = FIRST_WORD + self.words.len() as u32;
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        match id {
            0..FIRST_WORD => Some(RESERVED[id as usize]),
            _ => self.words.get((id - FIRST_WORD) as usize).map(String::as_str),
        }
    }

    /// Total id range including reserved tokens.
    pub fn len(&self) -> usize {
        FIRST_WORD as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// One word per line; line `n` (0-based) gets id `n + 5`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut v = Self::new();
        for (n, line) in text.lines().enumerate() {
            let word = line.trim_end_matches('\r');
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    message: format!("invalid vocabulary word {word:?}"),
                });
            }
            if v.index.contains_key(word) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    message: format!("duplicate word {word:?}"),
                });
            }
            v.insert(word);
        }
        Ok(v)
    }
}

/// Lowercases and splits a caption into words; `.`, `,`, `!` and `?` become
/// separate tokens.
pub fn split_caption(caption: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in caption.split_whitespace() {
        let lower = raw.to_lowercase();
        let trimmed = lower.trim_end_matches(['.', ',', '!', '?']);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        out.extend(lower[trimmed.len()..].chars().map(String::from));
    }
    out
}

/// `[CLS, direction, word ids..]`, or `[CLS, word ids..]` when `direction`
/// is `None`. Unknown words map to `[UNK]`; captions longer than
/// `max_len - 2` words are rejected.
pub fn tokenize<S: AsRef<str>>(caption: &[S], direction: Option<Direction>, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    let max_words = max_len.saturating_sub(2);
    if caption.len() > max_words {
        return Err(Error::CaptionTooLong {
            words: caption.len(),
            max: max_words,
        });
    }
    let mut ids = Vec::with_capacity(caption.len() + 2);
    ids.push(CLS);
    if let Some(d) = direction {
        ids.push(d.token());
    }
    ids.extend(caption.iter().map(|w| vocab.id(w.as_ref())));
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    /// Joint embedding dimension, shared with image features.
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            max_len: 24,
            out_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_len < 3 || self.out_dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config("max_len >= 3, out_dim > 0 and ff_dim > 0 required".into()));
        }
        Ok(())
    }
}

pub const TOKEN_EMBEDDING: &str = "text.tok_emb";
pub const PROJECTION: &str = "text.proj";
const LN_EPS: f64 = 1e-5;

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Fresh text-encoder parameters, all trainable, named under `text.`.
pub fn init_text_encoder(cfg: &EncoderConfig, vocab_size: usize, rng: &mut impl Rng) -> ParamStore {
    let (de, ff) = (cfg.embed_dim, cfg.ff_dim);
    let mut s = ParamStore::new();
    let linear_std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
    s.insert(TOKEN_EMBEDDING, normal_tensor(vec![vocab_size, de], 0.02, rng), false);
    s.insert("text.pos_emb", normal_tensor(vec![cfg.max_len, de], 0.02, rng), false);
    for l in 0..cfg.layers {
        let p = |n: &str| format!("text.l{l}.{n}");
        for ln in ["ln1", "ln2"] {
            s.insert(p(&format!("{ln}.g")), Tensor::vector(vec![1.0; de]).unwrap(), false);
            s.insert(p(&format!("{ln}.b")), Tensor::zeros(vec![de]), false);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            s.insert(p(w), normal_tensor(vec![de, de], linear_std(de), rng), false);
            s.insert(p(&w.replace('w', "b")), Tensor::zeros(vec![de]), false);
        }
        s.insert(p("ff.w1"), normal_tensor(vec![de, ff], linear_std(de), rng), false);
        s.insert(p("ff.b1"), Tensor::zeros(vec![ff]), false);
        s.insert(p("ff.w2"), normal_tensor(vec![ff, de], linear_std(ff), rng), false);
        s.insert(p("ff.b2"), Tensor::zeros(vec![de]), false);
    }
    s.insert("text.ln_f.g", Tensor::vector(vec![1.0; de]).unwrap(), false);
    s.insert("text.ln_f.b", Tensor::zeros(vec![de]), false);
    s.insert(PROJECTION, normal_tensor(vec![de, cfg.out_dim], linear_std(de), rng), false);
    s
}

/// Checks that `store` holds a complete text encoder for `cfg`; returns the
/// vocabulary size.
pub fn validate_text_params(store: &ParamStore, cfg: &EncoderConfig) -> Result<usize> {
    let shape = |name: &str| -> Result<Vec<usize>> {
        store
            .get(name)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    };
    let emb = shape(TOKEN_EMBEDDING)?;
    if emb.len() != 2 || emb[1] != cfg.embed_dim || emb[0] < FIRST_WORD as usize {
        return Err(Error::Data(format!("bad token embedding shape {emb:?}")));
    }
    let expect = |name: String, want: Vec<usize>| -> Result<()> {
        let got = shape(&name)?;
        if got != want {
            return Err(Error::Data(format!("{name}: shape {got:?}, expected {want:?}")));
        }
        Ok(())
    };
    let (de, ff) = (cfg.embed_dim, cfg.ff_dim);
    expect("text.pos_emb".into(), vec![cfg.max_len, de])?;
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            expect(format!("text.l{l}.{w}"), vec![de, de])?;
        }
        expect(format!("text.l{l}.ff.w1"), vec![de, ff])?;
        expect(format!("text.l{l}.ff.w2"), vec![ff, de])?;
    }
    expect(PROJECTION.into(), vec![de, cfg.out_dim])?;
    Ok(emb[0])
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b)?)
}

/// Encodes a batch of token sequences to unit rows `[seqs.len(), out_dim]`.
pub fn encode_batch<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &EncoderConfig, seqs: &[Vec<u32>]) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Data("empty token batch".into()));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.first() != Some(&CLS) {
            return Err(Error::Data("token sequence must start with [CLS]".into()));
        }
        if s.len() > cfg.max_len {
            return Err(Error::CaptionTooLong {
                words: s.len().saturating_sub(2),
                max: cfg.max_len - 2,
            });
        }
        segments.push((ids.len(), s.len()));
        ids.extend(s.iter().map(|&t| t as usize));
        positions.extend(0..s.len());
    }
    let tok = tape.gather_rows(p[TOKEN_EMBEDDING], &ids)?;
    let pos = tape.gather_rows(p["text.pos_emb"], &positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.layers {
        let n = |s: &str| p[format!("text.l{l}.{s}").as_str()];
        let h = tape.layer_norm_rows(x, n("ln1.g"), n("ln1.b"), LN_EPS)?;
        let q = linear(tape, h, n("wq"), n("bq"))?;
        let k = linear(tape, h, n("wk"), n("bk"))?;
        let v = linear(tape, h, n("wv"), n("bv"))?;
        let a = tape.attention(q, k, v, &segments, cfg.heads)?;
        let o = linear(tape, a, n("wo"), n("bo"))?;
        x = tape.add(x, o)?;
        let h = tape.layer_norm_rows(x, n("ln2.g"), n("ln2.b"), LN_EPS)?;
        let f = linear(tape, h, n("ff.w1"), n("ff.b1"))?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, n("ff.w2"), n("ff.b2"))?;
        x = tape.add(x, f)?;
    }
    let x = tape.layer_norm_rows(x, p["text.ln_f.g"], p["text.ln_f.b"], LN_EPS)?;
    let starts: Vec<usize> = segments.iter().map(|&(s, _)| s).collect();
    let cls = tape.gather_rows(x, &starts)?;
    let y = tape.matmul(cls, p[PROJECTION])?;
    Ok(tape.l2_normalize_rows(y)?)
}

/// Unit-norm embedding of one token sequence.
pub fn encode_text(ids: &[u32], params: &ParamStore, cfg: &EncoderConfig) -> Result<Tensor<f32>> {
    let mut rows = embed_sequences(params, cfg, std::slice::from_ref(&ids.to_vec()))?;
    Ok(Tensor::vector(rows.pop().expect("one row"))?)
}

/// Inference-only batched encoding; chunks run in parallel and are merged in
/// input order.
pub fn embed_sequences(params: &ParamStore, cfg: &EncoderConfig, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
    const CHUNK: usize = 64;
    let chunks: Vec<Result<Vec<Vec<f32>>>> = seqs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = Tape::<f32>::new();
            let mut frozen = params.clone();
            frozen.set_frozen("", true);
            let bound = frozen.bind(&mut tape);
            let out = encode_batch(&mut tape, &bound, cfg, chunk)?;
            let t = tape.value(out);
            Ok((0..chunk.len()).map(|i| t.row(i).to_vec()).collect())
        })
        .collect();
    let mut rows = Vec::with_capacity(seqs.len());
    for c in chunks {
        rows.extend(c?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Imported,
}

/// Read-only map from image id to a unit feature vector. Ids are kept in
/// ascending order, so row index order equals id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureStore {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
    provenance: Provenance,
}

const NORM_TOL: f64 = 1e-6;
const BCIR_MAGIC: &[u8; 4] = b"BCIR";
const BCIR_VERSION: u32 = 1;

impl ImageFeatureStore {
    /// Synthetic vectors must already be unit norm; imported vectors are
    /// normalized when their norm is off by more than 1e-6.
    pub fn new(mut entries: Vec<(String, Vec<f32>)>, provenance: Provenance) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("empty image store".into()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let dim = entries[0].1.len();
        if dim == 0 {
            return Err(Error::Data("zero-dimensional image features".into()));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        for (id, mut v) in entries {
            if v.len() != dim {
                return Err(Error::Data(format!("image {id}: dim {} != {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("image {id}: non-finite feature")));
            }
            let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                match provenance {
                    Provenance::Imported if norm > 0.0 => v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32),
                    _ => return Err(Error::Data(format!("image {id}: norm {norm} is not 1"))),
                }
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::Data(format!("duplicate image id {id}")));
            }
            ids.push(id);
            data.extend(v);
        }
        Ok(Self {
            ids,
            index,
            dim,
            data,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn row(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        Ok(self.row(self.index_of(id)?))
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (i, id) in self.ids.iter().enumerate() {
            h.update(id.as_bytes());
            h.update_f32s(self.row(i));
        }
        h.finish()
    }

    pub fn to_bcir_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(BCIR_MAGIC);
        out.extend_from_slice(&BCIR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save_bcir(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&self.to_bcir_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_bcir(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bcir_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn from_bcir_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != BCIR_MAGIC {
            return Err("bad magic, expected BCIR".into());
        }
        let version = r.u32()?;
        if version != BCIR_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("id is not UTF-8: {e}"))?
                .to_string();
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            entries.push((id, v));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Self::new(entries, Provenance::Imported).map_err(|e| e.to_string())
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// The stored unit vector for `id`. Image features never enter a tape as
/// trainable values.
pub fn encode_image(id: &str, store: &ImageFeatureStore) -> Result<Tensor<f32>> {
    Ok(Tensor::vector(store.get(id)?.to_vec())?)
}

//! Trained model state, its checkpoint file, and query composition for
//! inference.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::composer::{Additive, Combiner, CombinerConfig, Composer};
use crate::data::TokenScheme;
use crate::encoders::{embed_sequences, validate_text_params, ByteReader, EncoderConfig, ImageFeatureStore};
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

const MAGIC: &[u8; 4] = b"BCKP";
const VERSION: u32 = 1;
const META_MODEL: &str = "meta.model";
const META_STEP: &str = "meta.step";
const META_FINGERPRINT: &str = "meta.fingerprint";
const MOMENT_M: &str = "optim.m/";
const MOMENT_V: &str = "optim.v/";

/// Architecture and training regime needed to rebuild a model from its
/// arrays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelMeta {
    pub encoder: EncoderConfig,
    /// Present once a combiner has been attached (stage 2).
    pub combiner: Option<CombinerConfig>,
    pub stage: u8,
    pub token_scheme: TokenScheme,
    /// Whether reversed queries were part of training.
    pub bidirectional: bool,
}

impl ModelMeta {
    fn to_array(self) -> Tensor<f32> {
        let e = self.encoder;
        let data = vec![
            e.embed_dim as f32,
            e.layers as f32,
            e.heads as f32,
            e.ff_dim as f32,
            e.max_len as f32,
            e.out_dim as f32,
            self.combiner.map_or(0.0, |c| c.hidden as f32),
            self.stage as f32,
            match self.token_scheme {
                TokenScheme::Both => 0.0,
                TokenScheme::ReversedOnly => 1.0,
            },
            if self.bidirectional { 1.0 } else { 0.0 },
        ];
        Tensor::vector(data).expect("finite metadata")
    }

    fn from_array(t: &Tensor<f32>) -> std::result::Result<Self, String> {
        let d = t.data();
        if d.len() != 10 || d.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(format!("malformed {META_MODEL} array"));
        }
        let u = |i: usize| d[i] as usize;
        Ok(Self {
            encoder: EncoderConfig {
                embed_dim: u(0),
                layers: u(1),
                heads: u(2),
                ff_dim: u(3),
                max_len: u(4),
                out_dim: u(5),
            },
            combiner: (u(6) > 0).then(|| CombinerConfig {
                hidden: u(6),
                ..CombinerConfig::default()
            }),
            stage: u(7) as u8,
            token_scheme: match u(8) {
                0 => TokenScheme::Both,
                1 => TokenScheme::ReversedOnly,
                other => return Err(format!("unknown token scheme code {other}")),
            },
            bidirectional: u(9) == 1,
        })
    }
}

/// AdamW first and second moments per parameter name.
pub type Moments = BTreeMap<String, (Tensor<f32>, Tensor<f32>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub meta: ModelMeta,
    pub params: ParamStore,
    pub moments: Moments,
    pub step: u64,
    /// FNV-1a of the resolved configuration that produced this state.
    pub fingerprint: u64,
}

/// u64 as four exactly representable 16-bit chunks.
fn u64_array(x: u64) -> Tensor<f32> {
    Tensor::vector((0..4).map(|i| ((x >> (16 * i)) & 0xffff) as f32).collect()).expect("finite")
}

fn array_u64(t: &Tensor<f32>, name: &str) -> std::result::Result<u64, String> {
    if t.numel() != 4 {
        return Err(format!("malformed {name} array"));
    }
    Ok(t.data().iter().enumerate().fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i))))
}

impl ModelState {
    pub fn has_combiner(&self) -> bool {
        self.meta.combiner.is_some() && self.params.contains("comb.mix.w1")
    }

    /// Every array written to a checkpoint, in file order.
    fn arrays(&self) -> Vec<(String, bool, Tensor<f32>)> {
        let mut out = vec![
            (META_FINGERPRINT.to_string(), true, u64_array(self.fingerprint)),
            (META_MODEL.to_string(), true, self.meta.to_array()),
            (META_STEP.to_string(), true, u64_array(self.step)),
        ];
        for (name, (m, v)) in &self.moments {
            out.push((format!("{MOMENT_M}{name}"), false, m.clone()));
            out.push((format!("{MOMENT_V}{name}"), false, v.clone()));
        }
        for (name, p) in self.params.iter() {
            out.push((name.to_string(), p.frozen, p.tensor.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = self.arrays();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, frozen, t) in &arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*frozen as u8);
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 {
            return Err("file too short".into());
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let want = u64::from_le_bytes(trailer.try_into().unwrap());
        if fnv1a(body) != want {
            return Err("checksum mismatch".into());
        }
        let mut r = ByteReader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic, expected BCKP".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m_parts = BTreeMap::new();
        let mut v_parts = BTreeMap::new();
        let mut meta = None;
        let (mut step, mut fingerprint) = (None, None);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| format!("array name is not UTF-8: {e}"))?
                .to_string();
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(format!("{name}: frozen flag {other}")),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or("array too large")?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
            match name.as_str() {
                META_MODEL => meta = Some(ModelMeta::from_array(&t)?),
                META_STEP => step = Some(array_u64(&t, META_STEP)?),
                META_FINGERPRINT => fingerprint = Some(array_u64(&t, META_FINGERPRINT)?),
                _ => {
                    if let Some(p) = name.strip_prefix(MOMENT_M) {
                        m_parts.insert(p.to_string(), t);
                    } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                        v_parts.insert(p.to_string(), t);
                    } else {
                        if params.contains(&name) {
                            return Err(format!("duplicate array {name}"));
                        }
                        params.insert(name, t, frozen);
                    }
                }
            }
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes before checksum", body.len() - r.pos));
        }
        let mut moments = Moments::new();
        for (name, m) in m_parts {
            let v = v_parts.remove(&name).ok_or_else(|| format!("{name}: first moment without second"))?;
            moments.insert(name, (m, v));
        }
        if let Some(name) = v_parts.keys().next() {
            return Err(format!("{name}: second moment without first"));
        }
        let meta = meta.ok_or_else(|| format!("missing {META_MODEL}"))?;
        let state = Self {
            meta,
            params,
            moments,
            step: step.ok_or_else(|| format!("missing {META_STEP}"))?,
            fingerprint: fingerprint.ok_or_else(|| format!("missing {META_FINGERPRINT}"))?,
        };
        validate_text_params(&state.params, &state.meta.encoder).map_err(|e| e.to_string())?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Hash of the whole checkpoint encoding.
    pub fn hash(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }

    /// Unit text embeddings for token sequences.
    pub fn embed_texts(&self, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        embed_sequences(&self.params.subset("text."), &self.meta.encoder, seqs)
    }

    /// Composed unit query embeddings for `(image row, text embedding)`
    /// pairs, using the combiner when one is attached and addition
    /// otherwise.
    pub fn compose(&self, store: &ImageFeatureStore, images: &[usize], texts: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        compose_rows(self.has_combiner().then(|| self.params.subset("comb.")), store, images, texts)
    }
}

/// Inference-time composition; `combiner` holds `comb.*` parameters.
pub fn compose_rows(
    combiner: Option<ParamStore>,
    store: &ImageFeatureStore,
    images: &[usize],
    texts: &[Vec<f32>],
) -> Result<Vec<Vec<f32>>> {
    const CHUNK: usize = 256;
    if images.len() != texts.len() {
        return Err(Error::Data(format!("{} images but {} texts", images.len(), texts.len())));
    }
    let mut frozen = combiner;
    if let Some(c) = frozen.as_mut() {
        c.set_frozen("", true);
    }
    let idx: Vec<usize> = (0..images.len()).collect();
    let parts: Vec<Result<Vec<Vec<f32>>>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let img_rows: Vec<&[f32]> = chunk.iter().map(|&i| store.row(images[i])).collect();
            let txt_rows: Vec<&[f32]> = chunk.iter().map(|&i| texts[i].as_slice()).collect();
            let mut tape = Tape::<f32>::new();
            let img = tape.constant(Tensor::from_rows(&img_rows)?);
            let txt = tape.constant(Tensor::from_rows(&txt_rows)?);
            let out = match &frozen {
                Some(p) => {
                    let bound = p.bind(&mut tape);
                    Combiner::new(&bound).compose(&mut tape, img, txt)?
                }
                None => Additive.compose(&mut tape, img, txt)?,
            };
            let t = tape.value(out);
            Ok((0..chunk.len()).map(|i| t.row(i).to_vec()).collect())
        })
        .collect();
    let mut rows = Vec::with_capacity(images.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

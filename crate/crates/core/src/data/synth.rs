//! Synthetic attribute-world corpus.
//!
//! Every image is a tuple of attribute values (color, shape, size, count).
//! Its feature vector is the concatenation of one one-hot block per
//! attribute, zero-padded to the feature dimension, plus Gaussian instance
//! noise on every coordinate, L2-normalized. A triplet changes
//! exactly one attribute of its reference, and the caption names that change.
//! Absolute changes ("change color to red") are one-to-one forward but
//! one-to-many reversed, which is what the reversal oracle records.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_vocabulary, Dataset, OracleEntry, ReversalOracle, Split, Subsets, Triplet, SUBSET_SIZE};
use crate::encoders::{ImageFeatureStore, Provenance};
use crate::error::{Error, Result};

const NUMBER_WORDS: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
const MIN_CORPUS: usize = 2 * SUBSET_SIZE;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeSchema {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub sizes: Vec<String>,
    /// Ordered: a change from position `i` to `j > i` reads "add j-i".
    pub counts: Vec<String>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            colors: own(&["red", "blue", "green", "yellow", "purple"]),
            shapes: own(&["circle", "square", "triangle", "star"]),
            sizes: own(&["small", "medium", "large"]),
            counts: own(&["one", "two", "three"]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Color,
    Shape,
    Size,
    Count,
}

impl AttributeSchema {
    /// Non-empty attributes in block order.
    fn attributes(&self) -> Vec<(Kind, &[String])> {
        [
            (Kind::Color, self.colors.as_slice()),
            (Kind::Shape, self.shapes.as_slice()),
            (Kind::Size, self.sizes.as_slice()),
            (Kind::Count, self.counts.as_slice()),
        ]
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub attributes: AttributeSchema,
    pub corpus_size: usize,
    pub train_triplets: usize,
    pub val_triplets: usize,
    pub test_triplets: usize,
    /// Seeds caption template choice independently of the corpus seed.
    pub grammar_seed: u64,
    /// Standard deviation of the per-coordinate instance noise.
    pub noise: f64,
    /// Total feature dimension; must match the text encoder's output.
    pub feature_dim: usize,
    /// Assign every triplet a subset of six images.
    pub subsets: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            attributes: AttributeSchema::default(),
            corpus_size: 180,
            train_triplets: 800,
            val_triplets: 200,
            test_triplets: 200,
            grammar_seed: 0,
            noise: 0.3,
            feature_dim: 32,
            subsets: true,
        }
    }
}

impl SynthSpec {
    pub fn triplets(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_triplets,
            Split::Val => self.val_triplets,
            Split::Test => self.test_triplets,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub oracles: BTreeMap<Split, ReversalOracle>,
}

/// The change a caption describes, resolved against the schema.
#[derive(Debug, Clone, Copy)]
enum Change {
    /// Set attribute `attr` to value index `value`.
    Set { attr: usize, value: usize },
    /// Shift the count attribute by `delta` positions.
    Shift { attr: usize, delta: isize },
}

impl Change {
    fn apply(self, tuple: &[usize], cards: &[usize]) -> Option<Vec<usize>> {
        let mut out = tuple.to_vec();
        match self {
            Change::Set { attr, value } => {
                if tuple[attr] == value {
                    return None;
                }
                out[attr] = value;
            }
            Change::Shift { attr, delta } => {
                let v = tuple[attr] as isize + delta;
                if v < 0 || v >= cards[attr] as isize {
                    return None;
                }
                out[attr] = v as usize;
            }
        }
        Some(out)
    }
}

fn caption(kind: Kind, change: Change, values: &[String], rng: &mut impl Rng) -> String {
    match change {
        Change::Set { value, .. } => {
            let v = &values[value];
            let templates: &[&str] = match kind {
                Kind::Color => &["change color to {}", "make it {}", "turn it {}"],
                Kind::Shape => &["change shape to {}", "make it a {}"],
                Kind::Size => &["change size to {}", "make it {}"],
                Kind::Count => &["change count to {}"],
            };
            templates[rng.random_range(0..templates.len())].replace("{}", v)
        }
        Change::Shift { delta, .. } => {
            let word = NUMBER_WORDS[delta.unsigned_abs() - 1];
            if delta > 0 {
                format!("add {word}")
            } else {
                format!("remove {word}")
            }
        }
    }
}

fn check_spec(spec: &SynthSpec) -> Result<()> {
    if spec.corpus_size < MIN_CORPUS {
        return Err(Error::Data(format!(
            "corpus_size {} is below the minimum of {MIN_CORPUS}",
            spec.corpus_size
        )));
    }
    let attrs = spec.attributes.attributes();
    if attrs.iter().all(|(_, v)| v.len() < 2) {
        return Err(Error::Data("no attribute has two values, so no modification is expressible".into()));
    }
    if spec.attributes.counts.len() > NUMBER_WORDS.len() + 1 {
        return Err(Error::Data(format!("at most {} count values", NUMBER_WORDS.len() + 1)));
    }
    let blocks: usize = attrs.iter().map(|(_, v)| v.len()).sum();
    if spec.feature_dim < blocks {
        return Err(Error::Data(format!(
            "feature_dim {} cannot hold {blocks} attribute dimensions",
            spec.feature_dim
        )));
    }
    for (_, values) in &attrs {
        let distinct: BTreeSet<&String> = values.iter().collect();
        if distinct.len() != values.len() {
            return Err(Error::Data(format!("duplicate attribute values in {values:?}")));
        }
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Data(format!("noise must be >= 0, got {}", spec.noise)));
    }
    Ok(())
}

/// Generates a corpus, its triplet splits, subsets, and the per-split
/// reversal oracle. Identical `(spec, seed)` give identical output.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    check_spec(spec)?;
    let attrs = spec.attributes.attributes();
    let cards: Vec<usize> = attrs.iter().map(|(_, v)| v.len()).collect();
    let rng_for = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    };
    let mut image_rng = rng_for(0);
    let mut triplet_rng = rng_for(1);
    let mut subset_rng = rng_for(2);
    let mut grammar_rng = ChaCha8Rng::seed_from_u64(spec.grammar_seed);

    // Corpus: every attribute tuple once (as far as corpus_size allows), then
    // random repeats with fresh noise.
    let mut all: Vec<Vec<usize>> = vec![vec![]];
    for &c in &cards {
        all = all
            .into_iter()
            .flat_map(|t| {
                (0..c).map(move |v| {
                    let mut t = t.clone();
                    t.push(v);
                    t
                })
            })
            .collect();
    }
    all.shuffle(&mut image_rng);
    let mut tuples: Vec<Vec<usize>> = all.iter().take(spec.corpus_size).cloned().collect();
    while tuples.len() < spec.corpus_size {
        tuples.push(all[image_rng.random_range(0..all.len())].clone());
    }
    let ids: Vec<String> = (0..tuples.len()).map(|i| format!("img{i:05}")).collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Data(e.to_string()))?;
    let mut entries = Vec::with_capacity(tuples.len());
    for (id, t) in ids.iter().zip(&tuples) {
        let mut v = vec![0.0f64; spec.feature_dim];
        let mut offset = 0;
        for (a, &c) in cards.iter().enumerate() {
            v[offset + t[a]] = 1.0;
            offset += c;
        }
        for x in v.iter_mut() {
            *x += noise.sample(&mut image_rng);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        entries.push((id.clone(), v.iter().map(|x| (x / n) as f32).collect()));
    }
    let store = ImageFeatureStore::new(entries, Provenance::Synthetic)?;

    let mut by_tuple: HashMap<&[usize], Vec<usize>> = HashMap::new();
    for (i, t) in tuples.iter().enumerate() {
        by_tuple.entry(t.as_slice()).or_default().push(i);
    }
    let modifiable: Vec<usize> = (0..cards.len()).filter(|&a| cards[a] >= 2).collect();

    let mut seen = HashSet::new();
    let mut splits: [Vec<Triplet>; 3] = Default::default();
    let mut changes: [Vec<Change>; 3] = Default::default();
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let want = spec.triplets(split);
        let budget = 50 * want + 1000;
        let mut attempts = 0;
        while splits[si].len() < want {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Data(format!(
                    "schema too small: produced {} of {want} distinct {split} triplets",
                    splits[si].len()
                )));
            }
            let r = triplet_rng.random_range(0..tuples.len());
            let attr = modifiable[triplet_rng.random_range(0..modifiable.len())];
            let (kind, values) = attrs[attr];
            let change = match kind {
                Kind::Count => {
                    let to = triplet_rng.random_range(0..cards[attr]);
                    Change::Shift {
                        attr,
                        delta: to as isize - tuples[r][attr] as isize,
                    }
                }
                _ => Change::Set {
                    attr,
                    value: triplet_rng.random_range(0..cards[attr]),
                },
            };
            if matches!(change, Change::Shift { delta: 0, .. }) {
                continue;
            }
            let Some(target_tuple) = change.apply(&tuples[r], &cards) else {
                continue;
            };
            let Some(candidates) = by_tuple.get(target_tuple.as_slice()) else {
                continue;
            };
            let g = candidates[triplet_rng.random_range(0..candidates.len())];
            let text = caption(kind, change, values, &mut grammar_rng);
            if !seen.insert((r, g, text.clone())) {
                continue;
            }
            splits[si].push(Triplet {
                ref_id: ids[r].clone(),
                target_id: ids[g].clone(),
                caption: text,
                subset_id: None,
                split,
            });
            changes[si].push(change);
        }
    }

    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut oracles = BTreeMap::new();
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let entries = splits[si]
            .iter()
            .zip(&changes[si])
            .enumerate()
            .map(|(k, (t, change))| {
                let target = &tuples[index[t.target_id.as_str()]];
                let reversed_candidates = tuples
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| change.apply(x, &cards).as_ref() == Some(target))
                    .map(|(i, _)| ids[i].clone())
                    .collect();
                OracleEntry {
                    triplet_index: k,
                    reversed_candidates,
                }
            })
            .collect();
        oracles.insert(split, ReversalOracle { entries });
    }

    let mut subsets = Subsets::new();
    if spec.subsets {
        for (si, split) in Split::ALL.into_iter().enumerate() {
            for (k, t) in splits[si].iter_mut().enumerate() {
                let (r, g) = (index[t.ref_id.as_str()], index[t.target_id.as_str()]);
                let target = &tuples[g];
                // Hard negatives: nearest tuples to the target, never another
                // copy of the target tuple (that would be a false negative).
                let mut pool: Vec<(usize, u32, usize)> = (0..tuples.len())
                    .filter(|&i| i != r && tuples[i] != *target)
                    .map(|i| {
                        let dist = tuples[i].iter().zip(target).filter(|(a, b)| a != b).count();
                        (dist, subset_rng.random::<u32>(), i)
                    })
                    .collect();
                pool.sort_unstable();
                let mut members = vec![t.ref_id.clone(), t.target_id.clone()];
                members.extend(pool.iter().take(SUBSET_SIZE - 2).map(|&(_, _, i)| ids[i].clone()));
                let sid = format!("{split}-{k:05}");
                subsets.insert(sid.clone(), members);
                t.subset_id = Some(sid);
            }
        }
    }

    let all_triplets: Vec<Triplet> = splits.iter().flatten().cloned().collect();
    let vocab = build_vocabulary(&all_triplets);
    let dataset = Dataset::new(store, vocab, splits, subsets)?;
    Ok(SynthOutput { dataset, oracles })
}

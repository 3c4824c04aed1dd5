//! Triplets, datasets on disk, and paired forward/reversed batches.

mod synth;

pub use synth::{synth_generate, AttributeSchema, SynthOutput, SynthSpec};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{split_caption, tokenize, Direction, ImageFeatureStore, Vocabulary, BACKWARD, FORWARD};
use crate::error::{Error, Result};

pub const IMAGES_FILE: &str = "images.bcir";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SUBSETS_FILE: &str = "subsets.jsonl";

/// Number of images in a retrieval subset, reference and target included.
pub const SUBSET_SIZE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }

    pub fn oracle_file_name(self) -> String {
        format!("oracle_{}.jsonl", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }
}

/// One annotated query: reference image plus modification text, with its
/// ground-truth target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub ref_id: String,
    pub target_id: String,
    pub caption: String,
    pub subset_id: Option<String>,
    pub split: Split,
}

impl Triplet {
    pub fn words(&self) -> Vec<String> {
        split_caption(&self.caption)
    }
}

/// On-disk form. Exactly one of `caption` and `captions` is present; a
/// caption pair is joined with ". ".
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletRecord {
    ref_id: String,
    target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    captions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subset_id: Option<String>,
    split: Split,
}

impl TripletRecord {
    fn into_triplet(self) -> std::result::Result<Triplet, String> {
        let caption = match (self.caption, self.captions) {
            (Some(c), None) => c,
            (None, Some(cs)) if cs.len() == 2 => {
                format!("{}. {}", cs[0].trim_end_matches('.'), cs[1])
            }
            (None, Some(cs)) => return Err(format!("captions must hold 2 entries, got {}", cs.len())),
            (Some(_), Some(_)) => return Err("both caption and captions given".into()),
            (None, None) => return Err("missing caption".into()),
        };
        if self.ref_id == self.target_id {
            return Err(format!("ref_id equals target_id ({})", self.ref_id));
        }
        Ok(Triplet {
            ref_id: self.ref_id,
            target_id: self.target_id,
            caption,
            subset_id: self.subset_id,
            split: self.split,
        })
    }
}

/// Parses triplet lines. Blank lines are skipped; `path` only labels errors.
pub fn parse_triplets(text: &str, path: &Path) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: TripletRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let t = rec.into_triplet().map_err(parse_err)?;
        if !seen.insert((t.ref_id.clone(), t.target_id.clone(), t.caption.clone())) {
            return Err(parse_err(format!(
                "duplicate triplet ({}, {}, {:?})",
                t.ref_id, t.target_id, t.caption
            )));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(&text, path)
}

fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for row in rows {
        let line = serde_json::to_string(&row).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    write_lines(
        path,
        triplets.iter().map(|t| TripletRecord {
            ref_id: t.ref_id.clone(),
            target_id: t.target_id.clone(),
            caption: Some(t.caption.clone()),
            captions: None,
            subset_id: t.subset_id.clone(),
            split: t.split,
        }),
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsetRecord {
    subset_id: String,
    members: Vec<String>,
}

/// Subset id to its member image ids.
pub type Subsets = BTreeMap<String, Vec<String>>;

pub fn save_subsets(path: &Path, subsets: &Subsets) -> Result<()> {
    write_lines(
        path,
        subsets.iter().map(|(id, members)| SubsetRecord {
            subset_id: id.clone(),
            members: members.clone(),
        }),
    )
}

pub fn load_subsets(path: &Path) -> Result<Subsets> {
    let mut out = Subsets::new();
    for rec in read_lines::<SubsetRecord>(path)? {
        if out.insert(rec.subset_id.clone(), rec.members).is_some() {
            return Err(Error::format(path, format!("duplicate subset {}", rec.subset_id)));
        }
    }
    Ok(out)
}

/// For every triplet of a split, the corpus images that satisfy the
/// reversed reading of its caption. Kept apart from [`Dataset`] so the
/// training path has no way to reach it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReversalOracle {
    pub entries: Vec<OracleEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleEntry {
    pub triplet_index: usize,
    pub reversed_candidates: Vec<String>,
}

impl ReversalOracle {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(path, &self.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            entries: read_lines(path)?,
        })
    }

    pub fn candidates(&self, triplet_index: usize) -> Option<&[String]> {
        self.entries
            .iter()
            .find(|e| e.triplet_index == triplet_index)
            .map(|e| e.reversed_candidates.as_slice())
    }
}

/// An image corpus with its vocabulary and per-split triplets. Immutable
/// once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub store: ImageFeatureStore,
    pub vocab: Vocabulary,
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    pub test: Vec<Triplet>,
    pub subsets: Subsets,
}

impl Dataset {
    pub fn new(
        store: ImageFeatureStore,
        vocab: Vocabulary,
        splits: [Vec<Triplet>; 3],
        subsets: Subsets,
    ) -> Result<Self> {
        let [train, val, test] = splits;
        let ds = Self {
            store,
            vocab,
            train,
            val,
            test,
            subsets,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &[Triplet] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Members of `t`'s subset, if it has one.
    pub fn subset_of(&self, t: &Triplet) -> Option<&[String]> {
        t.subset_id.as_ref().and_then(|s| self.subsets.get(s)).map(Vec::as_slice)
    }

    fn validate(&self) -> Result<()> {
        for (id, members) in &self.subsets {
            let distinct: BTreeSet<&String> = members.iter().collect();
            if members.len() != SUBSET_SIZE || distinct.len() != SUBSET_SIZE {
                return Err(Error::Data(format!(
                    "subset {id} must hold {SUBSET_SIZE} distinct images, has {members:?}"
                )));
            }
            for m in members {
                self.store.index_of(m)?;
            }
        }
        for split in Split::ALL {
            for t in self.split(split) {
                if t.split != split {
                    return Err(Error::Data(format!(
                        "triplet ({}, {}) labelled {} found in {split} split",
                        t.ref_id, t.target_id, t.split
                    )));
                }
                if t.ref_id == t.target_id {
                    return Err(Error::Data(format!("triplet with ref_id == target_id ({})", t.ref_id)));
                }
                self.store.index_of(&t.ref_id)?;
                self.store.index_of(&t.target_id)?;
                if let Some(sid) = &t.subset_id {
                    let members = self
                        .subsets
                        .get(sid)
                        .ok_or_else(|| Error::Data(format!("unknown subset {sid}")))?;
                    if !members.contains(&t.ref_id) || !members.contains(&t.target_id) {
                        return Err(Error::Data(format!(
                            "subset {sid} does not contain both {} and {}",
                            t.ref_id, t.target_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the corpus, vocabulary, split files and (if any) subsets into
    /// `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save_bcir(&dir.join(IMAGES_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        for split in Split::ALL {
            save_triplets(&dir.join(split.file_name()), self.split(split))?;
        }
        if !self.subsets.is_empty() {
            save_subsets(&dir.join(SUBSETS_FILE), &self.subsets)?;
        }
        Ok(())
    }

    /// Reads a dataset directory. Missing split files count as empty; a
    /// missing vocabulary is rebuilt from the training captions.
    pub fn load(dir: &Path) -> Result<Self> {
        let store = ImageFeatureStore::load_bcir(&dir.join(IMAGES_FILE))?;
        let mut splits: [Vec<Triplet>; 3] = Default::default();
        for (slot, split) in splits.iter_mut().zip(Split::ALL) {
            let p = dir.join(split.file_name());
            if p.exists() {
                *slot = load_triplets(&p)?;
            }
        }
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = if vocab_path.exists() {
            Vocabulary::load(&vocab_path)?
        } else {
            build_vocabulary(&splits[0])
        };
        let subsets_path = dir.join(SUBSETS_FILE);
        let subsets = if subsets_path.exists() {
            load_subsets(&subsets_path)?
        } else {
            Subsets::new()
        };
        Self::new(store, vocab, splits, subsets)
    }
}

/// Vocabulary over every word in `triplets`, in lexicographic order.
pub fn build_vocabulary(triplets: &[Triplet]) -> Vocabulary {
    let words: BTreeSet<String> = triplets.iter().flat_map(|t| t.words()).collect();
    Vocabulary::from_words(words)
}

/// Which queries carry a direction token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenScheme {
    /// `[FORWARD]` on forward queries and `[BACKWARD]` on reversed ones.
    #[default]
    Both,
    /// Only reversed queries are marked; forward queries are `[CLS] words`.
    ReversedOnly,
}

impl TokenScheme {
    pub fn token(self, direction: Direction) -> Option<Direction> {
        match (self, direction) {
            (TokenScheme::ReversedOnly, Direction::Forward) => None,
            (_, d) => Some(d),
        }
    }
}

impl std::str::FromStr for TokenScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(TokenScheme::Both),
            "reversed-only" => Ok(TokenScheme::ReversedOnly),
            other => Err(Error::Usage(format!("unknown token scheme {other:?}"))),
        }
    }
}

/// One direction of a batch: query images (store rows), query token
/// sequences, and the store rows of the images to retrieve.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueryHalf {
    pub images: Vec<usize>,
    pub tokens: Vec<Vec<u32>>,
    pub positives: Vec<usize>,
}

impl QueryHalf {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Swaps the image roles and exchanges `[FORWARD]` and `[BACKWARD]`.
    pub fn flip(&self) -> QueryHalf {
        let swap = |t: u32| match t {
            FORWARD => BACKWARD,
            BACKWARD => FORWARD,
            other => other,
        };
        QueryHalf {
            images: self.positives.clone(),
            tokens: self
                .tokens
                .iter()
                .map(|s| s.iter().enumerate().map(|(i, &t)| if i == 1 { swap(t) } else { t }).collect())
                .collect(),
            positives: self.images.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DirectionalBatch {
    pub forward: QueryHalf,
    /// Empty unless the batch was built bi-directionally.
    pub reversed: QueryHalf,
}

/// Builds the forward half and, when `bidirectional`, the reversed half in
/// which each entry swaps reference and target and carries `[BACKWARD]`.
pub fn build_batch(
    triplets: &[&Triplet],
    vocab: &Vocabulary,
    store: &ImageFeatureStore,
    max_len: usize,
    bidirectional: bool,
    scheme: TokenScheme,
) -> Result<DirectionalBatch> {
    let mut batch = DirectionalBatch::default();
    for t in triplets {
        let r = store.index_of(&t.ref_id)?;
        let g = store.index_of(&t.target_id)?;
        let words = t.words();
        batch.forward.images.push(r);
        batch.forward.positives.push(g);
        batch
            .forward
            .tokens
            .push(tokenize(&words, scheme.token(Direction::Forward), vocab, max_len)?);
        if bidirectional {
            batch.reversed.images.push(g);
            batch.reversed.positives.push(r);
            batch
                .reversed
                .tokens
                .push(tokenize(&words, scheme.token(Direction::Reversed), vocab, max_len)?);
        }
    }
    Ok(batch)
}

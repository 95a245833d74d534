//! Labeled items ("videos") represented by feature vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::relgraph::{NodeId, RelationalGraph};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("record `{video}`: label `{label}` is not a node of the graph")]
    UnknownLabel { video: String, label: NodeId },
    #[error("record `{video}`: label `{label}` is an internal node, not a leaf")]
    NotALeaf { video: String, label: NodeId },
    #[error("record `{0}` has no labels")]
    NoLabels(String),
    #[error("record `{video}`: feature dimension {found}, corpus uses {expected}")]
    FeatureDim { video: String, expected: usize, found: usize },
    #[error("record `{0}` has no features and no sidecar entry")]
    MissingFeatures(String),
    #[error("duplicate video id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error("invalid synthesis parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// Leaf labels, sorted and de-duplicated.
    pub labels: Vec<NodeId>,
    pub features: Vec<f64>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    video_id: String,
    labels: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarHeader {
    dim: usize,
    ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    records: BTreeMap<String, VideoRecord>,
    feature_dim: usize,
    graph_id: String,
}

/// Short stable fingerprint of a graph's spec serialization.
pub fn graph_fingerprint(g: &RelationalGraph) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in g.to_json().bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{hash:016x}")
}

impl Corpus {
    /// Validate records against `g` and assemble a corpus.
    pub fn from_records(
        records: impl IntoIterator<Item = VideoRecord>,
        g: &RelationalGraph,
    ) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        let mut feature_dim = None;
        for mut rec in records {
            if rec.labels.is_empty() {
                return Err(CorpusError::NoLabels(rec.video_id));
            }
            rec.labels.sort();
            rec.labels.dedup();
            for label in &rec.labels {
                match g.node(label) {
                    Err(_) => {
                        return Err(CorpusError::UnknownLabel {
                            video: rec.video_id.clone(),
                            label: label.clone(),
                        })
                    }
                    Ok(n) if !n.is_leaf() => {
                        return Err(CorpusError::NotALeaf {
                            video: rec.video_id.clone(),
                            label: label.clone(),
                        })
                    }
                    Ok(_) => {}
                }
            }
            let dim = *feature_dim.get_or_insert(rec.features.len());
            if rec.features.len() != dim || dim == 0 {
                return Err(CorpusError::FeatureDim {
                    video: rec.video_id.clone(),
                    expected: dim,
                    found: rec.features.len(),
                });
            }
            if map.contains_key(&rec.video_id) {
                return Err(CorpusError::DuplicateId(rec.video_id));
            }
            map.insert(rec.video_id.clone(), rec);
        }
        Ok(Corpus {
            records: map,
            feature_dim: feature_dim.unwrap_or(0),
            graph_id: graph_fingerprint(g),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn graph_id(&self) -> &str {
        &self.graph_id
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.get(video_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &VideoRecord> {
        self.records.values()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.values().filter(move |r| r.split == split)
    }

    /// Video ids of a split grouped by leaf label (multi-label videos appear
    /// under each of their labels).
    pub fn by_leaf(&self, split: Split) -> BTreeMap<NodeId, Vec<&str>> {
        let mut out: BTreeMap<NodeId, Vec<&str>> = BTreeMap::new();
        for rec in self.split(split) {
            for label in &rec.labels {
                out.entry(label.clone()).or_default().push(&rec.video_id);
            }
        }
        out
    }

    /// Load a newline-delimited record file. Records without inline features
    /// take them from `sidecar`.
    pub fn load(
        path: impl AsRef<Path>,
        g: &RelationalGraph,
        sidecar: Option<&Path>,
    ) -> Result<Self, CorpusError> {
        let side = match sidecar {
            Some(p) => Some(read_sidecar(std::fs::File::open(p)?)?),
            None => None,
        };
        Self::read(BufReader::new(std::fs::File::open(path)?), g, side.as_ref())
    }

    pub fn read(
        reader: impl BufRead,
        g: &RelationalGraph,
        sidecar: Option<&BTreeMap<String, Vec<f64>>>,
    ) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine =
                serde_json::from_str(&line).map_err(|source| CorpusError::Parse { line: i + 1, source })?;
            let features = match parsed.features {
                Some(f) => f,
                None => sidecar
                    .and_then(|s| s.get(&parsed.video_id).cloned())
                    .ok_or_else(|| CorpusError::MissingFeatures(parsed.video_id.clone()))?,
            };
            records.push(VideoRecord {
                video_id: parsed.video_id,
                labels: parsed.labels,
                features,
                split: parsed.split,
            });
        }
        Self::from_records(records, g)
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for rec in self.records.values() {
            let line = RecordLine {
                video_id: rec.video_id.clone(),
                labels: rec.labels.clone(),
                features: Some(rec.features.clone()),
                split: rec.split,
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Write records without inline features plus the binary feature sidecar.
    pub fn save_with_sidecar(&self, path: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in self.records.values() {
            let line = RecordLine {
                video_id: rec.video_id.clone(),
                labels: rec.labels.clone(),
                features: None,
                split: rec.split,
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        w.flush()?;
        let mut s = std::io::BufWriter::new(std::fs::File::create(sidecar)?);
        write_sidecar(&mut s, self.feature_dim, self.records.values().map(|r| (r.video_id.as_str(), r.features.as_slice())))?;
        s.flush()?;
        Ok(())
    }
}

/// Sidecar layout: u32 LE header length, JSON header `{"dim", "ids"}`, then
/// one row of `dim` little-endian f32 per id, in header order.
pub fn write_sidecar<'a>(
    mut w: impl Write,
    dim: usize,
    rows: impl Iterator<Item = (&'a str, &'a [f64])> + Clone,
) -> std::io::Result<()> {
    let header = SidecarHeader { dim, ids: rows.clone().map(|(id, _)| id.to_owned()).collect() };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, row) in rows {
        for &x in row {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_sidecar(mut r: impl Read) -> Result<BTreeMap<String, Vec<f64>>, CorpusError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: SidecarHeader =
        serde_json::from_slice(&json).map_err(|e| CorpusError::Sidecar(e.to_string()))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() != header.ids.len() * header.dim * 4 {
        return Err(CorpusError::Sidecar(format!(
            "expected {} feature bytes, found {}",
            header.ids.len() * header.dim * 4,
            data.len()
        )));
    }
    let floats: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let mut out = BTreeMap::new();
    for (id, row) in header.ids.into_iter().zip(floats.chunks(header.dim.max(1))) {
        if out.insert(id.clone(), row.to_vec()).is_some() {
            return Err(CorpusError::Sidecar(format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub per_leaf: usize,
    pub feature_dim: usize,
    pub noise: f64,
}

/// Split sizes for `n` items of one leaf: 10% val, 10% test (floored), rest train.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

/// Class-conditional Gaussian corpus: one unit-norm anchor per leaf, each
/// record is its anchor plus isotropic noise.
pub fn gen_synthetic_corpus(
    g: &RelationalGraph,
    params: &SynthParams,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    if params.per_leaf == 0 {
        return Err(CorpusError::InvalidParameter("per_leaf must be at least 1".into()));
    }
    if params.feature_dim == 0 {
        return Err(CorpusError::InvalidParameter("feature_dim must be positive".into()));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(CorpusError::InvalidParameter(format!("noise must be >= 0, got {}", params.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let width = params.per_leaf.to_string().len();
    for leaf in g.leaves() {
        let anchor = loop {
            let v: Vec<f64> = (0..params.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                break v.into_iter().map(|x| x / n).collect::<Vec<f64>>();
            }
        };
        let mut order: Vec<usize> = (0..params.per_leaf).collect();
        order.shuffle(&mut rng);
        let (train, val, _) = split_counts(params.per_leaf);
        let mut splits = vec![Split::Test; params.per_leaf];
        for (rank, &i) in order.iter().enumerate() {
            splits[i] = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, split) in splits.into_iter().enumerate() {
            let features = anchor
                .iter()
                .map(|&a| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    a + params.noise * z
                })
                .collect();
            records.push(VideoRecord {
                video_id: format!("{leaf}/{i:0width$}"),
                labels: vec![leaf.clone()],
                features,
                split,
            });
        }
    }
    Corpus::from_records(records, g)
}

/// Leaf label sets for a list of video ids.
pub fn label_sets<'a>(corpus: &'a Corpus, ids: &[String]) -> Option<Vec<&'a [NodeId]>> {
    ids.iter().map(|id| corpus.get(id).map(|r| r.labels.as_slice())).collect()
}

/// Union of the labels of several videos.
pub fn label_union(corpus: &Corpus, ids: &[&str]) -> BTreeSet<NodeId> {
    ids.iter()
        .filter_map(|id| corpus.get(id))
        .flat_map(|r| r.labels.iter().cloned())
        .collect()
}

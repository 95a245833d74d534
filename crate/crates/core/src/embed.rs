//! Word vectors, category embeddings and their propagation up the graph.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::relgraph::{NodeId, RelationalGraph};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: {msg}")]
    MalformedRow { line: usize, msg: String },
    #[error("duplicate token `{0}`")]
    DuplicateToken(String),
    #[error("header declares {declared} entries, file has {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("token `{0}` not in vocabulary")]
    OutOfVocabulary(String),
    #[error("category name `{0}` has no tokens")]
    EmptyName(String),
    #[error("no vector for leaf `{0}`")]
    MissingLeafVector(NodeId),
    #[error("no vector for node `{0}`")]
    UnknownLabel(NodeId),
    #[error("empty label set")]
    EmptyLabels,
    #[error("vector has dimension {found}, expected {expected}")]
    WrongDimension { expected: usize, found: usize },
    #[error("graph failed validation with {0} violation(s)")]
    InvalidGraph(usize),
    #[error("cosine distance of a zero-norm vector")]
    ZeroNorm,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How to treat tokens missing from the word-vector table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    #[default]
    Error,
    /// Substitute a unit vector seeded by the token text.
    HashedUnit,
}

/// Pretrained word vectors in the common `<count> <dim>` text format.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl WordVectorTable {
    pub fn new(dim: usize) -> Self {
        WordVectorTable { dim, tokens: Vec::new(), vectors: Vec::new(), index: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Insert a token; tokens are stored lowercase.
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<(), EmbedError> {
        if vector.len() != self.dim {
            return Err(EmbedError::WrongDimension { expected: self.dim, found: vector.len() });
        }
        let token = token.to_lowercase();
        if self.index.contains_key(&token) {
            return Err(EmbedError::DuplicateToken(token));
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tokens.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let file = std::fs::File::open(path)?;
        Self::read(BufReader::new(file))
    }

    pub fn read(reader: impl BufRead) -> Result<Self, EmbedError> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| EmbedError::MalformedHeader("empty file".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match fields.as_slice() {
            [c, d] => (
                c.parse::<usize>().map_err(|_| EmbedError::MalformedHeader(header.clone()))?,
                d.parse::<usize>().map_err(|_| EmbedError::MalformedHeader(header.clone()))?,
            ),
            _ => return Err(EmbedError::MalformedHeader(header.clone())),
        };
        if dim == 0 {
            return Err(EmbedError::MalformedHeader(header));
        }
        let mut table = WordVectorTable::new(dim);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line");
            let vector = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| EmbedError::MalformedRow {
                        line: lineno,
                        msg: format!("`{p}`: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if vector.len() != dim {
                return Err(EmbedError::DimensionMismatch {
                    line: lineno,
                    expected: dim,
                    found: vector.len(),
                });
            }
            table.insert(token, vector)?;
        }
        if table.len() != count {
            return Err(EmbedError::CountMismatch { declared: count, found: table.len() });
        }
        Ok(table)
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (token, vector) in self.iter() {
            write!(w, "{token}")?;
            for x in vector {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn lookup(&self, token: &str, oov: OovPolicy) -> Result<Vec<f64>, EmbedError> {
        match (self.get(token), oov) {
            (Some(v), _) => Ok(v.to_vec()),
            (None, OovPolicy::HashedUnit) => Ok(hashed_unit_vector(token, self.dim)),
            (None, OovPolicy::Error) => Err(EmbedError::OutOfVocabulary(token.to_owned())),
        }
    }
}

/// Lowercase, split on whitespace and underscores.
pub fn tokenize(name: &str) -> Vec<String> {
    name.split(|c: char| c.is_whitespace() || c == '_')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Deterministic unit vector derived from the token text.
pub fn hashed_unit_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = norm(&v);
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Mean of the word vectors of the category name's tokens.
pub fn leaf_embedding(name: &str, wv: &WordVectorTable, oov: OovPolicy) -> Result<Vec<f64>, EmbedError> {
    let tokens = tokenize(name);
    if tokens.is_empty() {
        return Err(EmbedError::EmptyName(name.to_owned()));
    }
    let vectors = tokens.iter().map(|t| wv.lookup(t, oov)).collect::<Result<Vec<_>, _>>()?;
    Ok(mean(vectors.iter().map(Vec::as_slice), wv.dim))
}

/// Leaf vectors for every leaf of `g`, from the category names.
pub fn leaf_vectors(
    g: &RelationalGraph,
    wv: &WordVectorTable,
    oov: OovPolicy,
) -> Result<BTreeMap<NodeId, Vec<f64>>, EmbedError> {
    g.nodes()
        .filter(|n| n.is_leaf())
        .map(|n| Ok((n.id.clone(), leaf_embedding(&n.name, wv, oov)?)))
        .collect()
}

pub(crate) fn mean<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    let n = count as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `1 - cos(u, v)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::WrongDimension { expected: u.len(), found: v.len() });
    }
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu == 0.0 || vv == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    // sqrt(uu * vv) keeps d(u, u) exactly zero.
    Ok((1.0 - dot(u, v) / (uu * vv).sqrt()).clamp(0.0, 2.0))
}

/// Per-node embedding vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<NodeId, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_vectors(vectors: BTreeMap<NodeId, Vec<f64>>) -> Result<Self, EmbedError> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        for v in vectors.values() {
            if v.len() != dim {
                return Err(EmbedError::WrongDimension { expected: dim, found: v.len() });
            }
        }
        Ok(EmbeddingTable { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, id: &NodeId) -> Result<&[f64], EmbedError> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| EmbedError::UnknownLabel(id.clone()))
    }

    pub fn vectors(&self) -> &BTreeMap<NodeId, Vec<f64>> {
        &self.vectors
    }

    /// Mean of the vectors of a set of nodes.
    pub fn mean_of<'a>(&self, ids: impl IntoIterator<Item = &'a NodeId>) -> Result<Vec<f64>, EmbedError> {
        let vs = ids.into_iter().map(|id| self.get(id)).collect::<Result<Vec<_>, _>>()?;
        if vs.is_empty() {
            return Err(EmbedError::EmptyLabels);
        }
        Ok(mean(vs.into_iter(), self.dim))
    }

    /// JSON snapshot: a map from node id to its vector.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(&self.vectors).expect("vectors serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EmbedError> {
        Self::from_vectors(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Assign every internal node the mean of its direct children, bottom-up.
///
/// Only leaf entries of `leaf_vectors` are read; entries for internal nodes
/// are recomputed.
pub fn propagate(
    g: &RelationalGraph,
    leaf_vectors: &BTreeMap<NodeId, Vec<f64>>,
) -> Result<EmbeddingTable, EmbedError> {
    let report = g.validate();
    if !report.is_empty() {
        return Err(EmbedError::InvalidGraph(report.len()));
    }
    let dim = leaf_vectors.values().next().map_or(0, Vec::len);
    let mut out: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for id in g.bottom_up_order() {
        let node = g.node(&id).expect("ordered ids exist");
        let v = if node.is_leaf() {
            let v = leaf_vectors.get(&id).ok_or_else(|| EmbedError::MissingLeafVector(id.clone()))?;
            if v.len() != dim {
                return Err(EmbedError::WrongDimension { expected: dim, found: v.len() });
            }
            v.clone()
        } else {
            mean(node.children.iter().map(|c| out[c].as_slice()), dim)
        };
        out.insert(id, v);
    }
    Ok(EmbeddingTable { dim, vectors: out })
}

/// Mean of the label vectors of one item.
pub fn video_embedding<'a>(
    labels: impl IntoIterator<Item = &'a NodeId>,
    table: &EmbeddingTable,
) -> Result<Vec<f64>, EmbedError> {
    table.mean_of(labels)
}

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SamConfig, SamError, SubsetMode};
use crate::relgraph::NodeId;

/// Dense affine layer, `y = W x + b`, weights row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    fn uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<f64>>();
        let weight = draw(inputs * outputs);
        let bias = draw(outputs);
        Linear { inputs, outputs, weight, bias }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn fan_in_bound(&self) -> f64 {
        1.0 / (self.inputs as f64).sqrt()
    }
}

/// Weights of the encoder, relation networks, set head and the two
/// supervision heads, plus the classifier vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SamParams {
    pub config: SamConfig,
    pub vocabulary: Vec<NodeId>,
    pub embed_dim: usize,
    pub layers: Vec<Linear>,
}

/// Index of each named layer inside [`SamParams::layers`].
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub relations: usize,
}

impl Layout {
    pub fn for_config(cfg: &SamConfig) -> Self {
        let relations = match cfg.subset_mode {
            SubsetMode::FullPowerSet => cfg.max_set_size,
            SubsetMode::PairsOnly => cfg.max_set_size.min(2),
        };
        Layout { relations }
    }

    pub const ENCODER: [usize; 2] = [0, 1];

    /// Two layers of the relation network for subsets of size `k` (1-based).
    pub fn relation(&self, k: usize) -> [usize; 2] {
        debug_assert!(k >= 1 && k <= self.relations);
        [2 * k, 2 * k + 1]
    }

    pub fn head(&self) -> [usize; 2] {
        [2 * self.relations + 2, 2 * self.relations + 3]
    }

    pub fn classifier(&self) -> usize {
        2 * self.relations + 4
    }

    pub fn embedder(&self) -> usize {
        2 * self.relations + 5
    }

    pub fn num_layers(&self) -> usize {
        2 * self.relations + 6
    }

    pub fn name(&self, i: usize) -> String {
        match i {
            0 | 1 => format!("encoder.{i}"),
            _ if i < 2 * self.relations + 2 => format!("relation{}.{}", i / 2, i % 2),
            _ if i < 2 * self.relations + 4 => format!("head.{}", i % 2),
            _ if i == self.classifier() => "classifier".to_owned(),
            _ => "embedder".to_owned(),
        }
    }
}

impl SamParams {
    /// Seeded fan-in-scaled uniform initialization.
    pub fn init(cfg: &SamConfig, vocabulary: Vec<NodeId>, embed_dim: usize) -> Result<Self, SamError> {
        cfg.validate()?;
        if vocabulary.is_empty() || embed_dim == 0 {
            return Err(SamError::InvalidConfig("vocabulary and embedding dimension must be nonempty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shapes = Self::shapes(cfg, vocabulary.len(), embed_dim);
        let layers = shapes.into_iter().map(|(i, o)| Linear::uniform(i, o, &mut rng)).collect();
        Ok(SamParams { config: cfg.clone(), vocabulary, embed_dim, layers })
    }

    fn shapes(cfg: &SamConfig, vocab: usize, embed_dim: usize) -> Vec<(usize, usize)> {
        let layout = Layout::for_config(cfg);
        let h = cfg.hidden;
        let mut shapes = vec![(cfg.feature_dim, h), (h, h)];
        for k in 1..=layout.relations {
            shapes.push((k * h, h));
            shapes.push((h, h));
        }
        shapes.push((h, h));
        shapes.push((h, h));
        shapes.push((h, vocab));
        shapes.push((h, embed_dim));
        shapes
    }

    pub fn layout(&self) -> Layout {
        Layout::for_config(&self.config)
    }

    pub fn zeros_like(&self) -> SamParams {
        SamParams {
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            embed_dim: self.embed_dim,
            layers: self.layers.iter().map(|l| Linear::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn class_index(&self, id: &NodeId) -> Option<usize> {
        self.vocabulary.binary_search(id).ok()
    }

    /// Every scalar parameter, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect()
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.flat_mut().for_each(|x| *x *= factor);
    }

    pub fn add_scaled(&mut self, other: &SamParams, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += factor * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
    }
}

const MAGIC: &[u8; 8] = b"SETABSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: SamConfig,
    vocabulary: Vec<NodeId>,
    embed_dim: usize,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    inputs: usize,
    outputs: usize,
}

impl SamParams {
    /// Binary checkpoint: magic, u32 version, u32 header length, JSON header,
    /// then each layer's weights and bias as little-endian f32.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<(), SamError> {
        let layout = self.layout();
        let header = CheckpointHeader {
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            embed_dim: self.embed_dim,
            tensors: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| TensorInfo { name: layout.name(i), inputs: l.inputs, outputs: l.outputs })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for x in self.flat() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self, SamError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SamError::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(SamError::Checkpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        r.read_exact(&mut word)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let expected = Self::shapes(&header.config, header.vocabulary.len(), header.embed_dim);
        let found: Vec<(usize, usize)> = header.tensors.iter().map(|t| (t.inputs, t.outputs)).collect();
        if expected != found {
            return Err(SamError::Checkpoint("tensor shapes do not match configuration".into()));
        }
        let mut layers = Vec::with_capacity(expected.len());
        let mut read_f32 = |n: usize| -> Result<Vec<f64>, SamError> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect())
        };
        for (inputs, outputs) in expected {
            let weight = read_f32(inputs * outputs)?;
            let bias = read_f32(outputs)?;
            layers.push(Linear { inputs, outputs, weight, bias });
        }
        Ok(SamParams { config: header.config, vocabulary: header.vocabulary, embed_dim: header.embed_dim, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SamError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SamError> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

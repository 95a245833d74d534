use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use setabs_core::embed::OovPolicy;
use setabs_core::sam::{SamConfig, SubsetMode};

use crate::error::CliError;

/// Experiment configuration. Every section is optional except `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    /// Module hyperparameters; `feature_dim` is taken from the corpus.
    #[serde(default)]
    pub sam: Map<String, Value>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub tasks: TaskSection,
    #[serde(default)]
    pub service: ServiceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// Node list to build from; a synthetic tree is generated when absent.
    pub path: Option<PathBuf>,
    pub branching: Vec<usize>,
    /// Scale of the synthetic one-hot word vectors.
    pub word_vector_scale: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { path: None, branching: vec![4, 2, 5], word_vector_scale: 6.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    /// Text word-vector file; defaults to the synthetic vectors in the output directory.
    pub word_vectors: Option<PathBuf>,
    pub oov: OovPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Existing record file; the generated corpus is used when absent.
    pub path: Option<PathBuf>,
    /// Binary feature sidecar for `path`.
    pub features: Option<PathBuf>,
    pub per_leaf: usize,
    pub feature_dim: usize,
    pub noise: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { path: None, features: None, per_leaf: 100, feature_dim: 32, noise: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub n: usize,
    pub examples: usize,
    pub epochs: usize,
    pub baseline_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { n: 4, examples: 4000, epochs: 10, baseline_epochs: 20 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerChoice {
    #[default]
    Model,
    Oracle,
    MeanFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sizes: Vec<usize>,
    pub sets: usize,
    pub ooo_sizes: Vec<usize>,
    pub ooo_sets: usize,
    pub scorer: ScorerChoice,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { sizes: vec![2, 3, 4], sets: 600, ooo_sizes: vec![3, 4], ooo_sets: 300, scorer: ScorerChoice::Model }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub sizes: Vec<usize>,
    pub per_n: usize,
    pub vigilance_per_n: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection { sizes: vec![1, 2, 3, 4], per_n: 50, vigilance_per_n: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceSection {
    pub vigilance_every: usize,
    pub max_vigilance_failures: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection { vigilance_every: 5, max_vigilance_failures: 0 }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub n: Option<usize>,
    pub set_size: Option<usize>,
    pub pairs_only: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// The file at `path` (if any) with `overrides` applied. Without a file
    /// the seed must come from the command line.
    pub fn resolve(path: Option<&std::path::Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| CliError::MissingInput(p.to_path_buf()))?;
                Self::parse(&text)?
            }
            None => {
                let seed = overrides
                    .seed
                    .ok_or_else(|| CliError::Validation("a seed is required (--seed or a config file)".into()))?;
                Self::parse(&format!("{{\"seed\": {seed}}}"))?
            }
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = Some(o.clone());
        }
        if let Some(n) = overrides.n {
            cfg.train.n = n;
        }
        if let Some(n) = overrides.set_size {
            cfg.eval.sizes = vec![n];
            cfg.eval.ooo_sizes = vec![n];
            cfg.tasks.sizes = vec![n];
        }
        if overrides.pairs_only {
            cfg.sam.insert("subset_mode".into(), serde_json::to_value(SubsetMode::PairsOnly).expect("enum serializes"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Validation(m.to_owned()));
        if !(1..=4).contains(&self.train.n) {
            return bad("train.n must be in 1..=4");
        }
        if self.eval.sizes.iter().any(|n| !(1..=4).contains(n)) || self.tasks.sizes.iter().any(|n| !(1..=4).contains(n)) {
            return bad("set sizes must be in 1..=4");
        }
        if self.eval.ooo_sizes.iter().any(|n| !(2..=4).contains(n)) {
            return bad("odd-one-out set sizes must be in 2..=4");
        }
        if self.graph.branching.is_empty() || self.graph.branching.contains(&0) {
            return bad("graph.branching must be nonempty and positive");
        }
        // unknown keys and bad values in the module section surface here
        self.sam_config(1)?;
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Module configuration for a corpus of `feature_dim`. The init seed
    /// defaults to one derived from the run seed.
    pub fn sam_config(&self, feature_dim: usize) -> Result<SamConfig, CliError> {
        let mut m = self.sam.clone();
        if m.contains_key("feature_dim") {
            return Err(CliError::Validation("sam.feature_dim is taken from the corpus".into()));
        }
        m.insert("feature_dim".into(), feature_dim.into());
        m.entry("seed").or_insert_with(|| setabs_core::sampler::derive_seed(self.seed, crate::commands::stream::INIT).into());
        let cfg: SamConfig =
            serde_json::from_value(Value::Object(m)).map_err(|e| CliError::Validation(format!("sam: {e}")))?;
        cfg.validate().map_err(|e| CliError::Validation(format!("sam: {e}")))?;
        Ok(cfg)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

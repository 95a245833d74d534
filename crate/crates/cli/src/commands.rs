use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use setabs_core::corpus::{gen_synthetic_corpus, Split, SynthParams};
use setabs_core::embed::{leaf_vectors, propagate};
use setabs_core::evalsuite::{
    baseline_bce, baseline_graph_lookup, chance_level, eval_abstraction, eval_completion, eval_odd_one_out,
    render_table, singleton_config, singleton_examples, target_distribution, video_probabilities, EvalReport,
    MeanFeatureScorer, ModelScorer, OracleScorer, SetScorer,
};
use setabs_core::sam::{train, Objective, SamParams, TrainError, CHECKPOINT_VERSION};
use setabs_core::sampler::{
    build_outlier_sets, build_task_pool, derive_seed, sample_training_examples, RankingTask, SamplerConfig,
    TrainingExample,
};
use setabs_core::synth::{hierarchy, one_hot_word_vectors};
use setabs_core::{Corpus, EmbeddingTable, RelationalGraph, WordVectorTable};
use setabs_service::{display_from_corpus, human_report, read_log, Service, ServiceConfig, TaskPool};

use crate::config::{RunConfig, ScorerChoice};
use crate::error::{invalid, runtime, CliError};

/// Independent random streams derived from the run seed.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const OOO: u64 = 5;
    pub const TASKS: u64 = 6;
    pub const SERVICE: u64 = 7;
}

pub mod names {
    pub const GRAPH: &str = "graph.json";
    pub const WORD_VECTORS: &str = "word_vectors.txt";
    pub const EMBEDDINGS: &str = "embeddings.json";
    pub const CORPUS: &str = "corpus.ndjson";
    pub const FEATURES: &str = "features.bin";
    pub const TRAIN_EXAMPLES: &str = "train_examples.ndjson";
    pub const MODEL: &str = "model.ckpt";
    pub const TRAIN_METRICS: &str = "train_metrics.ndjson";
    pub const CLASSIFIER: &str = "classifier.ckpt";
    pub const CLASSIFIER_METRICS: &str = "classifier_metrics.ndjson";
    pub const MULTILABEL: &str = "multilabel.ckpt";
    pub const MULTILABEL_METRICS: &str = "multilabel_metrics.ndjson";
    pub const ABSTRACTION_REPORT: &str = "abstraction_report.json";
    pub const ABSTRACTION_TABLE: &str = "abstraction_table.txt";
    pub const TASKS: &str = "tasks.json";
    pub const DISPLAY: &str = "display.json";
    pub const COMPLETION_REPORT: &str = "completion_report.json";
    pub const COMPLETION_TABLE: &str = "completion_table.txt";
    pub const OUTLIER_SETS: &str = "outlier_sets.json";
    pub const OOO_REPORT: &str = "ooo_report.json";
    pub const OOO_TABLE: &str = "ooo_table.txt";
    pub const RESPONSES: &str = "responses.ndjson";
    pub const HUMAN_REPORT: &str = "human_report.json";
    pub const HUMAN_TABLE: &str = "human_table.txt";
    pub const MANIFESTS: &str = "manifests";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Classifier,
    MultiLabel,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    versions: BTreeMap<&'static str, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    created_unix_ms: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(runtime)?))
}

/// Per-run state: resolved configuration plus the files read and written.
pub struct Ctx {
    pub cfg: RunConfig,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out).map_err(|e| runtime(format!("creating {}: {e}", out.display())))?;
        Ok(Ctx { cfg, out, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.cfg.seed, stream)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// `explicit` or the named artifact in the output directory; must exist.
    fn input(&mut self, explicit: Option<&Path>, name: &str) -> Result<PathBuf, CliError> {
        let p = explicit.map_or_else(|| self.path(name), Path::to_path_buf);
        if !p.is_file() {
            return Err(CliError::MissingInput(p));
        }
        self.inputs.insert(p.display().to_string(), file_hash(&p)?);
        Ok(p)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, bytes.as_ref()).map_err(|e| runtime(format!("writing {}: {e}", p.display())))?;
        self.outputs.insert(name.to_owned(), sha256_hex(bytes.as_ref()));
        Ok(())
    }

    fn record_output(&mut self, name: &str) -> Result<(), CliError> {
        let h = file_hash(&self.path(name))?;
        self.outputs.insert(name.to_owned(), h);
        Ok(())
    }

    pub fn finish(&mut self, command: &str) -> Result<(), CliError> {
        let dir = self.path(names::MANIFESTS);
        std::fs::create_dir_all(&dir).map_err(runtime)?;
        let manifest = Manifest {
            command,
            seed: self.cfg.seed,
            config_sha256: sha256_hex(self.cfg.canonical_json().as_bytes()),
            config: &self.cfg,
            versions: BTreeMap::from([
                ("setabs", env!("CARGO_PKG_VERSION").to_owned()),
                ("checkpoint_format", CHECKPOINT_VERSION.to_string()),
            ]),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            created_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(runtime)? + "\n";
        std::fs::write(dir.join(format!("{command}.json")), text).map_err(runtime)
    }

    fn graph(&mut self) -> Result<RelationalGraph, CliError> {
        let p = self.input(None, names::GRAPH)?;
        RelationalGraph::load(&p).map_err(|e| invalid(format!("{}: {e}", p.display())))
    }

    fn embeddings(&mut self) -> Result<EmbeddingTable, CliError> {
        let p = self.input(None, names::EMBEDDINGS)?;
        EmbeddingTable::load(&p).map_err(|e| invalid(format!("{}: {e}", p.display())))
    }

    fn corpus(&mut self, g: &RelationalGraph) -> Result<Corpus, CliError> {
        let explicit = self.cfg.corpus.path.clone();
        let records = self.input(explicit.as_deref(), names::CORPUS)?;
        let features = self.cfg.corpus.features.clone();
        let sidecar = match (&explicit, &features) {
            (_, Some(f)) => Some(self.input(Some(f), names::FEATURES)?),
            (None, None) if self.path(names::FEATURES).is_file() => Some(self.input(None, names::FEATURES)?),
            _ => None,
        };
        Corpus::load(&records, g, sidecar.as_deref()).map_err(|e| invalid(format!("{}: {e}", records.display())))
    }

    fn checkpoint(&mut self, name: &str) -> Result<SamParams, CliError> {
        let p = self.input(None, name)?;
        SamParams::load(&p).map_err(|e| invalid(format!("{}: {e}", p.display())))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, explicit: Option<&Path>, name: &str) -> Result<T, CliError> {
        let p = self.input(explicit, name)?;
        let text = std::fs::read_to_string(&p).map_err(runtime)?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))
    }
}

fn pretty(v: &impl Serialize) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v).map_err(runtime)? + "\n")
}

fn ndjson<T: Serialize>(items: &[T]) -> Result<String, CliError> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).map_err(runtime)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn build_graph(ctx: &mut Ctx) -> Result<(), CliError> {
    let g = match ctx.cfg.graph.path.clone() {
        Some(p) => {
            let p = ctx.input(Some(&p), names::GRAPH)?;
            RelationalGraph::load(&p).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => {
            let g = hierarchy(&ctx.cfg.graph.branching).map_err(invalid)?;
            let mut buf = Vec::new();
            one_hot_word_vectors(&g, ctx.cfg.graph.word_vector_scale).write(&mut buf).map_err(runtime)?;
            ctx.write(names::WORD_VECTORS, buf)?;
            g
        }
    };
    let report = g.validate();
    if !report.is_empty() {
        return Err(invalid(format!("graph has {} violations: {:?}", report.len(), report.violations)));
    }
    ctx.write(names::GRAPH, g.to_json())?;
    println!("graph: {} nodes, {} leaves, {} abstraction nodes", g.len(), g.leaves().len(), g.internal_nodes().len());
    Ok(())
}

pub fn propagate_embeddings(ctx: &mut Ctx) -> Result<(), CliError> {
    let g = ctx.graph()?;
    let explicit = ctx.cfg.embedding.word_vectors.clone();
    let p = ctx.input(explicit.as_deref(), names::WORD_VECTORS)?;
    let wv = WordVectorTable::load(&p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
    let leaves = leaf_vectors(&g, &wv, ctx.cfg.embedding.oov).map_err(invalid)?;
    let table = propagate(&g, &leaves).map_err(invalid)?;
    ctx.write(names::EMBEDDINGS, table.to_json())?;
    println!("embeddings: {} nodes, dimension {}", table.vectors().len(), table.dim());
    Ok(())
}

pub fn gen_corpus(ctx: &mut Ctx) -> Result<(), CliError> {
    let g = ctx.graph()?;
    let c = &ctx.cfg.corpus;
    let params = SynthParams { per_leaf: c.per_leaf, feature_dim: c.feature_dim, noise: c.noise };
    let corpus = gen_synthetic_corpus(&g, &params, ctx.seed(stream::CORPUS)).map_err(invalid)?;
    corpus.save_with_sidecar(ctx.path(names::CORPUS), ctx.path(names::FEATURES)).map_err(runtime)?;
    ctx.record_output(names::CORPUS)?;
    ctx.record_output(names::FEATURES)?;
    println!(
        "corpus: {} records ({} train, {} val, {} test), feature dimension {}",
        corpus.len(),
        corpus.split(Split::Train).count(),
        corpus.split(Split::Val).count(),
        corpus.split(Split::Test).count(),
        corpus.feature_dim()
    );
    Ok(())
}

pub fn gen_train(ctx: &mut Ctx) -> Result<(), CliError> {
    let g = ctx.graph()?;
    let emb = ctx.embeddings()?;
    let corpus = ctx.corpus(&g)?;
    let cfg = SamplerConfig { n: ctx.cfg.train.n, split: Split::Train };
    let examples = sample_training_examples(&g, &corpus, &emb, &cfg, ctx.cfg.train.examples, ctx.seed(stream::TRAIN))
        .map_err(invalid)?;
    ctx.write(names::TRAIN_EXAMPLES, ndjson(&examples)?)?;
    println!("training examples: {} sets of {}", examples.len(), cfg.n);
    Ok(())
}

fn read_examples(ctx: &mut Ctx) -> Result<Vec<TrainingExample>, CliError> {
    let p = ctx.input(None, names::TRAIN_EXAMPLES)?;
    let text = std::fs::read_to_string(&p).map_err(runtime)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid(format!("{} line {}: {e}", p.display(), i + 1))))
        .collect()
}

pub fn train_model(ctx: &mut Ctx, baseline: Option<Baseline>) -> Result<(), CliError> {
    let g = ctx.graph()?;
    let emb = ctx.embeddings()?;
    let corpus = ctx.corpus(&g)?;
    let base = ctx.cfg.sam_config(corpus.feature_dim())?;
    let (cfg, vocab, examples, epochs, ckpt, metrics_name) = match baseline {
        None => (base, g.vocabulary(), read_examples(ctx)?, ctx.cfg.train.epochs, names::MODEL, names::TRAIN_METRICS),
        Some(Baseline::Classifier) => (
            singleton_config(&base, Objective::Classification),
            g.leaves(),
            singleton_examples(&g, &corpus, &emb, Split::Train, false).map_err(invalid)?,
            ctx.cfg.train.baseline_epochs,
            names::CLASSIFIER,
            names::CLASSIFIER_METRICS,
        ),
        Some(Baseline::MultiLabel) => (
            singleton_config(&base, Objective::MultiLabel),
            g.vocabulary(),
            singleton_examples(&g, &corpus, &emb, Split::Train, true).map_err(invalid)?,
            ctx.cfg.train.baseline_epochs,
            names::MULTILABEL,
            names::MULTILABEL_METRICS,
        ),
    };
    let params = SamParams::init(&cfg, vocab, emb.dim()).map_err(invalid)?;
    let mut metrics = Vec::new();
    let outcome = match train(params, &corpus, &examples, epochs, Some(&mut metrics)) {
        Ok(o) => o,
        Err(e @ TrainError::Diverged { .. }) => {
            ctx.write(metrics_name, &metrics)?;
            return Err(runtime(format!("{e}; lower the learning rate")));
        }
        Err(TrainError::MissingFeatures(id)) => return Err(invalid(format!("video `{id}` has no features"))),
        Err(e) => return Err(runtime(e)),
    };
    let mut buf = Vec::new();
    outcome.params.write_checkpoint(&mut buf).map_err(runtime)?;
    ctx.write(ckpt, buf)?;
    ctx.write(metrics_name, metrics)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "trained {} parameters for {epochs} epochs: loss {:.4}, subset top-1 {:.4}, whole-set top-1 {:.4}",
            outcome.params.num_parameters(),
            last.loss,
            last.subset_top1,
            last.set_top1
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ChanceRow {
    n: usize,
    top1: f64,
    top5: f64,
}

#[derive(Serialize)]
struct AbstractionOutput {
    reports: Vec<EvalReport>,
    chance: Vec<ChanceRow>,
}

pub fn eval_abstraction_cmd(ctx: &mut Ctx) -> Result<(), CliError> {
    let g = ctx.graph()?;
    let emb = ctx.embeddings()?;
    let corpus = ctx.corpus(&g)?;
    let model = ctx.checkpoint(names::MODEL)?;
    let classifier = if ctx.path(names::CLASSIFIER).is_file() { Some(ctx.checkpoint(names::CLASSIFIER)?) } else { None };
    let multilabel = if ctx.path(names::MULTILABEL).is_file() { Some(ctx.checkpoint(names::MULTILABEL)?) } else { None };
    let mut reports = Vec::new();
    let mut chance = Vec::new();
    for &n in &ctx.cfg.eval.sizes.clone() {
        let cfg = SamplerConfig { n, split: Split::Test };
        let seed = derive_seed(ctx.seed(stream::EVAL), n as u64);
        let sets = sample_training_examples(&g, &corpus, &emb, &cfg, ctx.cfg.eval.sets, seed).map_err(invalid)?;
        reports.push(eval_abstraction(&model, &corpus, &sets).map_err(invalid)?);
        for (params, lookup) in [(&classifier, true), (&multilabel, false)] {
            let Some(p) = params else { continue };
            let probs = video_probabilities(p, &corpus, sets.iter().flat_map(|s| &s.video_ids)).map_err(invalid)?;
            let r = if lookup { baseline_graph_lookup(&g, &p.vocabulary, &probs, &sets) } else { baseline_bce(&p.vocabulary, &probs, &sets) };
            reports.push(r.map_err(invalid)?);
        }
        let freq = target_distribution(&sets);
        let at = |k: usize| chance_level(&freq, k.min(freq.len())).map_err(invalid);
        chance.push(ChanceRow { n, top1: at(1)?, top5: at(5)? });
    }
    let mut table = render_table("Abstraction recognition", &reports, &["top1", "top5"]);
    for c in &chance {
        table.push_str(&format!("chance N={}: top1 {:.1} top5 {:.1}\n", c.n, 100.0 * c.top1, 100.0 * c.top5));
    }
    print!("{table}");
    ctx.write(names::ABSTRACTION_TABLE, &table)?;
    ctx.write(names::ABSTRACTION_REPORT, pretty(&AbstractionOutput { reports, chance })?)?;
    Ok(())
}

fn with_scorer<R>(
    ctx: &mut Ctx,
    choice: ScorerChoice,
    f: impl FnOnce(&mut Ctx, &dyn SetScorer, &RelationalGraph, &Corpus) -> Result<R, CliError>,
) -> Result<R, CliError> {
    let g = ctx.graph()?;
    let corpus = ctx.corpus(&g)?;
    match choice {
        ScorerChoice::Model => {
            let params = ctx.checkpoint(names::MODEL)?;
            let s = ModelScorer::new(&params, &corpus);
            f(ctx, &s, &g, &corpus)
        }
        ScorerChoice::Oracle => {
            let emb = ctx.embeddings()?;
            let s = OracleScorer { graph: &g, corpus: &corpus, embeddings: &emb };
            f(ctx, &s, &g, &corpus)
        }
        ScorerChoice::MeanFeature => {
            let s = MeanFeatureScorer { corpus: &corpus };
            f(ctx, &s, &g, &corpus)
        }
    }
}

pub fn eval_completion_cmd(ctx: &mut Ctx, scorer: Option<ScorerChoice>) -> Result<(), CliError> {
    let tasks: Vec<RankingTask> = ctx.json(None, names::TASKS)?;
    let choice = scorer.unwrap_or(ctx.cfg.eval.scorer);
    let sizes = ctx.cfg.tasks.sizes.clone();
    let reports = with_scorer(ctx, choice, |_, s, _, _| {
        let mut reports = Vec::new();
        for n in sizes {
            let group: Vec<RankingTask> = tasks.iter().filter(|t| !t.is_vigilance && t.n() == n).cloned().collect();
            if !group.is_empty() {
                reports.push(eval_completion(s, &group).map_err(invalid)?);
            }
        }
        Ok(reports)
    })?;
    if reports.is_empty() {
        return Err(invalid("no completion tasks of the configured sizes"));
    }
    let table = render_table("Set completion (Spearman rho)", &reports, &["rho"]);
    print!("{table}");
    ctx.write(names::COMPLETION_TABLE, &table)?;
    ctx.write(names::COMPLETION_REPORT, pretty(&reports)?)?;
    Ok(())
}

pub fn eval_ooo_cmd(ctx: &mut Ctx, scorer: Option<ScorerChoice>) -> Result<(), CliError> {
    let choice = scorer.unwrap_or(ctx.cfg.eval.scorer);
    let sizes = ctx.cfg.eval.ooo_sizes.clone();
    let count = ctx.cfg.eval.ooo_sets;
    let seed = ctx.seed(stream::OOO);
    let (sets, reports) = with_scorer(ctx, choice, |_, s, g, corpus| {
        let mut all = Vec::new();
        let mut reports = Vec::new();
        for n in sizes {
            let sets = build_outlier_sets(g, corpus, n, count, derive_seed(seed, n as u64)).map_err(invalid)?;
            reports.push(eval_odd_one_out(s, &sets).map_err(invalid)?);
            all.extend(sets);
        }
        Ok((all, reports))
    })?;
    let table = render_table("Odd one out", &reports, &["top1", "top2"]);
    print!("{table}");
    ctx.write(names::OUTLIER_SETS, pretty(&sets)?)?;
    ctx.write(names::OOO_TABLE, &table)?;
    ctx.write(names::OOO_REPORT, pretty(&reports)?)?;
    Ok(())
}

pub fn gen_tasks(ctx: &mut Ctx) -> Result<(), CliError> {
    let g = ctx.graph()?;
    let emb = ctx.embeddings()?;
    let corpus = ctx.corpus(&g)?;
    let t = ctx.cfg.tasks.clone();
    let tasks = build_task_pool(&g, &corpus, &emb, &t.sizes, t.per_n, t.vigilance_per_n, ctx.seed(stream::TASKS))
        .map_err(invalid)?;
    ctx.write(names::TASKS, pretty(&tasks)?)?;
    ctx.write(names::DISPLAY, pretty(&display_from_corpus(&g, &corpus))?)?;
    println!("ranking tasks: {} ({} vigilance)", tasks.len(), tasks.iter().filter(|t| t.is_vigilance).count());
    Ok(())
}

pub fn serve_cmd(ctx: &mut Ctx, tasks: Option<&Path>, display: Option<&Path>, log: Option<&Path>) -> Result<(), CliError> {
    let tasks_path = ctx.input(tasks, names::TASKS)?;
    let display_path = match display {
        Some(p) => Some(ctx.input(Some(p), names::DISPLAY)?),
        None if ctx.path(names::DISPLAY).is_file() => Some(ctx.input(None, names::DISPLAY)?),
        None => None,
    };
    let pool = TaskPool::load(&tasks_path, display_path.as_deref()).map_err(invalid)?;
    let log = log.map_or_else(|| ctx.path(names::RESPONSES), Path::to_path_buf);
    let config = ServiceConfig {
        seed: ctx.seed(stream::SERVICE),
        vigilance_every: ctx.cfg.service.vigilance_every,
        max_vigilance_failures: ctx.cfg.service.max_vigilance_failures,
    };
    let port = setabs_service::port_from_env().map_err(invalid)?;
    let service = Service::open(pool, config, &log).map_err(invalid)?;
    ctx.finish("serve")?;
    let addr = std::net::SocketAddr::from(([127, 0, 0, 1], port));
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    println!("serving {} tasks on http://{addr}, logging to {}", service.pool().tasks.len(), log.display());
    rt.block_on(setabs_service::serve(std::sync::Arc::new(service), addr)).map_err(runtime)
}

pub fn report_cmd(ctx: &mut Ctx, tasks: Option<&Path>, log: Option<&Path>) -> Result<(), CliError> {
    let tasks: Vec<RankingTask> = ctx.json(tasks, names::TASKS)?;
    let log = ctx.input(log, names::RESPONSES)?;
    let records = read_log(&log).map_err(invalid)?;
    let report = human_report(&records, &tasks, ctx.cfg.service.max_vigilance_failures).map_err(invalid)?;
    let mut table = render_table("Human baseline (Spearman rho)", std::slice::from_ref(&report.report), &["rho"]);
    table.push_str(&format!(
        "responses {}: scored {}, vigilance {}, excluded {} from {} flagged sessions\n",
        report.responses,
        report.included,
        report.vigilance_responses,
        report.excluded,
        report.flagged_sessions.len()
    ));
    print!("{table}");
    ctx.write(names::HUMAN_TABLE, &table)?;
    ctx.write(names::HUMAN_REPORT, pretty(&report)?)?;
    Ok(())
}

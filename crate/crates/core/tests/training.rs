mod common;

use setabs_core::corpus::Split;
use setabs_core::evalsuite::eval_abstraction;
use setabs_core::sam::{forward_set, loss, train, SamConfig, SamError, SamParams, TrainError, CHECKPOINT_VERSION};
use setabs_core::sampler::{sample_training_examples, SamplerConfig};

use common::*;

fn small_config(feature_dim: usize) -> SamConfig {
    let mut cfg = SamConfig::new(feature_dim);
    cfg.hidden = 16;
    cfg.learning_rate = 0.02;
    cfg.seed = 4;
    cfg
}

#[test]
fn repeated_steps_on_one_example_reduce_its_loss() {
    let w = bench_world(10, 8, 0.2, 1);
    let ex = sample_training_examples(&w.graph, &w.corpus, &w.embeddings, &SamplerConfig::default(), 1, 3).unwrap();
    let mut cfg = small_config(8);
    cfg.batch_size = 1;
    cfg.lr_step_epochs = 1000;
    let p = SamParams::init(&cfg, w.graph.vocabulary(), w.embeddings.dim()).unwrap();
    let feats: Vec<&[f64]> = ex[0].video_ids.iter().map(|id| w.corpus.get(id).unwrap().features.as_slice()).collect();
    let before = loss(&p, &forward_set(&p, &feats).unwrap(), &ex[0].subsets).unwrap();
    let out = train(p, &w.corpus, &ex, 60, None).unwrap();
    let after = loss(&out.params, &forward_set(&out.params, &feats).unwrap(), &ex[0].subsets).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    assert!(out.metrics.windows(2).all(|m| m[1].loss <= m[0].loss + 1e-9));
}

#[test]
fn metrics_stream_is_one_json_line_per_epoch() {
    let w = bench_world(10, 8, 0.2, 1);
    let ex = sample_training_examples(&w.graph, &w.corpus, &w.embeddings, &SamplerConfig::default(), 40, 3).unwrap();
    let p = SamParams::init(&small_config(8), w.graph.vocabulary(), w.embeddings.dim()).unwrap();
    let mut buf = Vec::new();
    let out = train(p, &w.corpus, &ex, 3, Some(&mut buf)).unwrap();
    let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, m) in lines.iter().zip(&out.metrics) {
        assert_eq!(&serde_json::from_str::<setabs_core::sam::EpochMetrics>(line).unwrap(), m);
    }
}

#[test]
fn initial_weights_respect_fan_in_bound() {
    let mut cfg = small_config(12);
    cfg.hidden = 20;
    let p = SamParams::init(&cfg, vec!["a".into(), "b".into()], 3).unwrap();
    for l in &p.layers {
        let b = l.fan_in_bound();
        assert!(l.weight.iter().chain(&l.bias).all(|x| x.abs() <= b));
        // not degenerate
        assert!(l.weight.iter().any(|x| x.abs() > 0.25 * b));
    }
}

#[test]
fn checkpoint_round_trips_at_single_precision() {
    let mut cfg = small_config(6);
    cfg.subset_mode = setabs_core::sam::SubsetMode::PairsOnly;
    let p = SamParams::init(&cfg, vec!["a".into(), "b".into(), "c".into()], 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    p.save(&path).unwrap();
    let q = SamParams::load(&path).unwrap();
    assert_eq!(q.config, p.config);
    assert_eq!(q.vocabulary, p.vocabulary);
    for (a, b) in p.flat().iter().zip(q.flat()) {
        assert_eq!(*a as f32 as f64, b);
    }
    // a second save of the reloaded model is byte-identical
    let path2 = dir.path().join("again.ckpt");
    q.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_rejects_bad_magic_version_and_truncation() {
    let p = SamParams::init(&small_config(3), vec!["a".into()], 2).unwrap();
    let mut bytes = Vec::new();
    p.write_checkpoint(&mut bytes).unwrap();

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(SamParams::read_checkpoint(bad.as_slice()), Err(SamError::Checkpoint(_))));

    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(SamParams::read_checkpoint(bad.as_slice()), Err(SamError::Checkpoint(_))));

    let short = &bytes[..bytes.len() - 4];
    assert!(SamParams::read_checkpoint(short).is_err());
}

#[test]
fn identical_seed_gives_identical_training() {
    let w = bench_world(10, 8, 0.3, 2);
    let ex = sample_training_examples(&w.graph, &w.corpus, &w.embeddings, &SamplerConfig::default(), 60, 1).unwrap();
    let run = |seed| {
        let mut cfg = small_config(8);
        cfg.seed = seed;
        let p = SamParams::init(&cfg, w.graph.vocabulary(), w.embeddings.dim()).unwrap();
        train(p, &w.corpus, &ex, 2, None).unwrap()
    };
    let (a, b, c) = (run(7), run(7), run(8));
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let w = bench_world(10, 8, 0.3, 2);
    let ex = sample_training_examples(&w.graph, &w.corpus, &w.embeddings, &SamplerConfig::default(), 60, 1).unwrap();
    let mut cfg = small_config(8);
    cfg.learning_rate = 1e6;
    let p = SamParams::init(&cfg, w.graph.vocabulary(), w.embeddings.dim()).unwrap();
    match train(p, &w.corpus, &ex, 5, None) {
        Err(TrainError::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics)),
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let w = bench_world(10, 8, 0.3, 2);
    let p = SamParams::init(&small_config(8), w.graph.vocabulary(), w.embeddings.dim()).unwrap();
    assert!(matches!(train(p, &w.corpus, &[], 1, None), Err(TrainError::Empty)));
}

#[test]
fn noiseless_corpus_is_learned() {
    let w = bench_world(50, 32, 0.0, 7);
    let ex = sample_training_examples(&w.graph, &w.corpus, &w.embeddings, &SamplerConfig::default(), 3000, 2).unwrap();
    let mut cfg = SamConfig::new(32);
    cfg.hidden = 64;
    cfg.learning_rate = 0.05;
    cfg.lr_step_epochs = 6;
    cfg.seed = 3;
    let p = SamParams::init(&cfg, w.graph.vocabulary(), w.embeddings.dim()).unwrap();
    let out = train(p, &w.corpus, &ex, 8, None).unwrap();
    let last = out.metrics.last().unwrap();
    assert!(last.subset_top1 >= 0.99, "train subset top-1 {}", last.subset_top1);
    let pairs = sample_training_examples(
        &w.graph,
        &w.corpus,
        &w.embeddings,
        &SamplerConfig { n: 2, split: Split::Test },
        300,
        9,
    )
    .unwrap();
    let top1 = eval_abstraction(&out.params, &w.corpus, &pairs).unwrap().metric("top1").unwrap();
    assert!(top1 >= 0.99, "held-out pair top-1 {top1}");
}

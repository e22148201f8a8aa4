use unidex_core::checkpoint::{self, Checkpoint};
use unidex_core::index::{build_index, load_index, save_index, Fingerprint};
use unidex_core::ingest::{hash_features, toy_encode, Role};
use unidex_core::pipeline::{document_sids, engine_from_features, QueryInput, SearchEngine};
use unidex_core::quantizer::{QuantizerConfig, QuantizerHead, TouchShape};
use unidex_core::rank::{RankHead, RankShape};
use unidex_core::synthetic::{clustered_benchmark, text_fixture, Benchmark, BenchmarkConfig};
use unidex_core::trainer::{train, LossConfig, TrainConfig};
use unidex_core::Error;

fn small_bench(seed: u64) -> Benchmark {
    let cfg = BenchmarkConfig {
        clusters: 5,
        topics_per_cluster: 4,
        docs_per_topic: 6,
        ..BenchmarkConfig::default()
    };
    clustered_benchmark(&cfg, seed).unwrap()
}

fn heads(code_dim: usize, seed: u64) -> (QuantizerHead, RankHead) {
    let touch = QuantizerHead::new(
        QuantizerConfig {
            code_dim,
            ..QuantizerConfig::default()
        },
        TouchShape {
            d_base: 32,
            ..TouchShape::default()
        },
        seed,
    )
    .unwrap();
    let rank = RankHead::new(
        RankShape {
            d_base: 32,
            ..RankShape::default()
        },
        seed,
    )
    .unwrap();
    (touch, rank)
}

fn engine(seed: u64) -> (Benchmark, SearchEngine) {
    let bench = small_bench(seed);
    let (touch, rank) = heads(6, seed);
    let engine = engine_from_features(&bench.docs, &touch, &rank).unwrap();
    (bench, engine)
}

#[test]
fn smaller_top_k_is_a_prefix() {
    let (bench, engine) = engine(1);
    for q in &bench.test {
        let full = engine.search(&q.input, 1000).unwrap();
        assert_eq!(full.hits.len(), full.touched);
        for k in [1, 3, 10] {
            let part = engine.search(&q.input, k).unwrap();
            assert_eq!(part.hits[..], full.hits[..k.min(full.hits.len())]);
        }
    }
}

#[test]
fn encoded_input_matches_feature_input() {
    let (bench, engine) = engine(2);
    for q in bench.test.iter().take(5) {
        let QueryInput::Feature(f) = &q.input else { panic!("feature query") };
        let encoded = QueryInput::Encoded {
            touch: toy_encode(f, engine.touch_head(), Role::Query).unwrap(),
            rank: toy_encode(f, engine.rank_head(), Role::RankQuery).unwrap(),
        };
        assert_eq!(engine.search(&encoded, 20).unwrap(), engine.search(&q.input, 20).unwrap());
    }
}

#[test]
fn max_candidates_keeps_lowest_ordinals() {
    let (bench, engine) = engine(3);
    let capped = engine.clone().with_max_candidates(Some(2));
    for q in &bench.test {
        let full = engine.search(&q.input, 1000).unwrap();
        let out = capped.search(&q.input, 1000).unwrap();
        assert_eq!(out.touched, full.touched);
        assert_eq!(out.truncated, full.touched > 2);
        let mut ords: Vec<u32> = full.hits.iter().map(|h| h.ordinal).collect();
        ords.sort_unstable();
        ords.truncate(2);
        let mut got: Vec<u32> = out.hits.iter().map(|h| h.ordinal).collect();
        got.sort_unstable();
        assert_eq!(got, ords);
    }
}

#[test]
fn zero_top_k_is_rejected() {
    let (bench, engine) = engine(4);
    assert!(matches!(engine.search(&bench.test[0].input, 0), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let bench = small_bench(5);
    let (touch, _) = heads(8, 5);
    let cfg = TrainConfig {
        steps: 120,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let loss = LossConfig::default();
    let (a, ha) = train(&bench.train, touch.clone(), &cfg, &loss).unwrap();
    let (b, hb) = train(&bench.train, touch.clone(), &cfg, &loss).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    let (_, other) = train(&bench.train, touch, &TrainConfig { seed: 10, ..cfg }, &loss).unwrap();
    assert_ne!(ha, other);

    let totals = ha.totals();
    let head: f64 = totals[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = totals[totals.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn single_instance_loss_falls() {
    let bench = small_bench(6);
    let one = vec![bench.train[0].clone()];
    let (_, rank) = heads(8, 6);
    let cfg = TrainConfig {
        steps: 100,
        batch_size: 1,
        learning_rate: 5e-3,
        warmup_steps: 5,
        seed: 0,
    };
    let (_, h) = train(&one, rank, &cfg, &LossConfig::default()).unwrap();
    let totals = h.totals();
    assert!(totals[99] < 0.5 * totals[0], "{} -> {}", totals[0], totals[99]);
}

#[test]
fn trained_heads_survive_checkpoint_files() {
    let bench = small_bench(7);
    let (touch, rank) = heads(8, 7);
    let cfg = TrainConfig {
        steps: 30,
        ..TrainConfig::default()
    };
    let (touch, _) = train(&bench.train, touch, &cfg, &LossConfig::default()).unwrap();
    let (rank, _) = train(&bench.train, rank, &cfg, &LossConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (tp, rp) = (dir.path().join("t.udxq"), dir.path().join("r.udxq"));
    checkpoint::save_touch(&touch, &tp).unwrap();
    checkpoint::save_rank(&rank, &rp).unwrap();
    assert_eq!(checkpoint::load_touch(&tp).unwrap(), touch);
    assert_eq!(checkpoint::load_rank(&rp).unwrap(), rank);
    assert!(matches!(checkpoint::load(&rp).unwrap(), Checkpoint::Rank(_)));
    assert!(matches!(checkpoint::load_touch(&rp), Err(Error::Config(_))));

    // The reloaded engine answers exactly like the in-memory one.
    let original = engine_from_features(&bench.docs, &touch, &rank).unwrap();
    let ip = dir.path().join("ix.udxi");
    let sids = document_sids(bench.docs.iter().map(|(id, f)| (id.as_str(), f)), &touch).unwrap();
    save_index(&build_index(&sids, Fingerprint::of_head(&touch)).unwrap(), &ip).unwrap();
    let loaded_touch = checkpoint::load_touch(&tp).unwrap();
    let index = load_index(&ip, Some(&checkpoint::head_checksum(&loaded_touch))).unwrap();
    let table = unidex_core::pipeline::rank_embeddings(
        bench.docs.iter().map(|(id, f)| (id.as_str(), f)),
        &checkpoint::load_rank(&rp).unwrap(),
    )
    .unwrap();
    let reloaded = SearchEngine::new(index, loaded_touch, checkpoint::load_rank(&rp).unwrap(), &table).unwrap();
    for q in &bench.test {
        assert_eq!(original.search(&q.input, 10).unwrap(), reloaded.search(&q.input, 10).unwrap());
    }
}

#[test]
fn corrupt_and_mismatched_files_are_rejected() {
    let (touch, _) = heads(6, 8);
    let (other, _) = heads(6, 9);
    let sids = vec![("a".to_string(), vec![]), ("b".to_string(), vec![])];
    let index = build_index(&sids, Fingerprint::of_head(&touch)).unwrap();
    let bytes = index.to_bytes();
    let checksum = checkpoint::head_checksum(&other);
    assert!(matches!(
        unidex_core::index::InvertedIndex::from_bytes(&bytes, Some(&checksum)),
        Err(Error::FingerprintMismatch)
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        unidex_core::index::InvertedIndex::from_bytes(&bad, None),
        Err(Error::BadMagic { .. })
    ));
    assert!(unidex_core::index::InvertedIndex::from_bytes(&bytes[..bytes.len() - 1], None).is_err());

    let ck = checkpoint::encode_touch(&touch);
    assert!(checkpoint::decode(&ck[..ck.len() / 2]).is_err());
    let mut wrong_version = ck.clone();
    wrong_version[4] = 99;
    assert!(matches!(checkpoint::decode(&wrong_version), Err(Error::UnsupportedVersion(_))));
}

#[test]
fn text_queries_hash_like_documents() {
    let fx = text_fixture(3, 2, 3, 1).unwrap();
    let touch = QuantizerHead::new(
        QuantizerConfig {
            code_dim: 6,
            ..QuantizerConfig::default()
        },
        TouchShape {
            d_base: 64,
            ..TouchShape::default()
        },
        0,
    )
    .unwrap();
    let rank = RankHead::new(
        RankShape {
            d_base: 64,
            ..RankShape::default()
        },
        0,
    )
    .unwrap();
    let docs: Vec<_> = fx
        .corpus
        .iter()
        .map(|d| (d.id.clone(), hash_features(&d.text, 64, 0).unwrap()))
        .collect();
    let engine = engine_from_features(&docs, &touch, &rank).unwrap();
    // A document's own text, issued as a query, shares its first query SIDs
    // with its own document SIDs and so is always retrieved.
    for d in &fx.corpus {
        let out = engine.search(&QueryInput::Text(d.text.clone()), 1000).unwrap();
        assert!(out.hits.iter().any(|h| h.doc_id == d.id), "{} not retrieved", d.id);
    }
}

use std::collections::BTreeSet;

use proptest::prelude::*;
use unidex_core::index::{build_index, Fingerprint, InvertedIndex};
use unidex_core::ingest::{decode_embeddings, encode_embeddings, EmbeddingTable, MultiVector, Role};
use unidex_core::matcher::{cosine, match_matrix, sim_max_max, sim_max_mean, sim_max_sum, MatchMatrix};
use unidex_core::quantizer::{
    encode_token, pack_sid, unpack_sid, CodeVector, QuantizerConfig, QuantizerHead, SemanticId, TouchShape,
};
use unidex_core::trainer::{infonce_loss, quant_reg_loss};

fn cfg(levels: u32, code_dim: usize) -> QuantizerConfig {
    QuantizerConfig {
        dim: 8,
        code_dim,
        levels,
        ewgs_delta: 1e-3,
    }
}

fn matrix() -> impl Strategy<Value = MatchMatrix> {
    (1usize..6, 1usize..9).prop_flat_map(|(m, n)| {
        prop::collection::vec(-1.0f64..=1.0, m * n)
            .prop_map(move |e| MatchMatrix::from_entries(m, n, e).unwrap())
    })
}

/// Brute-force SID-overlap scan: every doc sharing at least one SID with the query.
fn scan(docs: &[(String, Vec<SemanticId>)], query: &[SemanticId]) -> BTreeSet<u32> {
    docs.iter()
        .enumerate()
        .filter(|(_, (_, sids))| sids.iter().any(|s| query.contains(s)))
        .map(|(i, _)| i as u32)
        .collect()
}

fn corpus(space: u64) -> impl Strategy<Value = Vec<(String, Vec<SemanticId>)>> {
    prop::collection::vec(prop::collection::vec(0..space, 1..5), 0..40).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, s)| (format!("doc{i}"), s.into_iter().map(SemanticId).collect()))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pack_unpack_roundtrip(levels in 2u32..8, code_dim in 1usize..12, seed in any::<u64>()) {
        let c = cfg(levels, code_dim);
        let sid = SemanticId(seed % c.code_space());
        let codes = unpack_sid(sid, &c).unwrap();
        prop_assert!(codes.0.iter().all(|&v| v < levels));
        prop_assert_eq!(pack_sid(&codes, &c).unwrap(), sid);
    }

    #[test]
    fn unpack_pack_roundtrip(codes in prop::collection::vec(0u32..5, 1..10)) {
        let c = cfg(5, codes.len());
        let cv = CodeVector(codes);
        prop_assert_eq!(unpack_sid(pack_sid(&cv, &c).unwrap(), &c).unwrap(), cv);
    }

    #[test]
    fn matcher_identities(mm in matrix()) {
        let sum = sim_max_sum(&mm);
        let mean = sim_max_mean(&mm);
        prop_assert!((sum - mm.m() as f64 * mean).abs() <= 1e-12);
        prop_assert!(sim_max_max(&mm) >= mean);
    }

    #[test]
    fn cosine_bounded_and_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let ab = cosine(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, cosine(&b, &a).unwrap());
    }

    #[test]
    fn infonce_nonnegative_and_shift_invariant(
        raw in prop::collection::vec((-1.0f64..1.0, 0u32..3), 1..8),
        cross in prop::collection::vec(-1.0f64..1.0, 0..6),
        shift in -10.0f64..10.0,
        tau in 0.05f64..2.0,
    ) {
        let sims: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let labels: Vec<u32> = raw.iter().map(|r| r.1).collect();
        let base = infonce_loss(&sims, &labels, &cross, tau).unwrap();
        prop_assert!(base >= 0.0);
        let s2: Vec<f64> = sims.iter().map(|s| s + shift).collect();
        let c2: Vec<f64> = cross.iter().map(|s| s + shift).collect();
        let shifted = infonce_loss(&s2, &labels, &c2, tau).unwrap();
        prop_assert!((base - shifted).abs() <= 1e-10, "{} vs {}", base, shifted);
    }

    #[test]
    fn quant_reg_bounds(lows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 7), 1..5)) {
        let r = quant_reg_loss(&lows);
        prop_assert!((0.0..=0.25 * 7.0).contains(&r));
    }

    #[test]
    fn retrieve_equals_scan(docs in corpus(64), query in prop::collection::vec(0u64..64, 1..4)) {
        let fp = Fingerprint::unchecked(&cfg(2, 6));
        let index = build_index(&docs, fp).unwrap();
        let q: Vec<SemanticId> = query.into_iter().map(SemanticId).collect();
        let got: BTreeSet<u32> = index.retrieve(&q).unwrap().doc_ordinals.into_iter().collect();
        prop_assert_eq!(got, scan(&docs, &q));
    }

    #[test]
    fn build_is_order_independent(docs in corpus(32), seed in any::<u64>()) {
        let fp = Fingerprint::unchecked(&cfg(2, 5));
        let mut shuffled = docs.clone();
        let n = shuffled.len().max(1);
        shuffled.rotate_left((seed as usize) % n);
        let a = build_index(&docs, fp).unwrap();
        let b = build_index(&shuffled, fp).unwrap();
        for sid in 0..32u64 {
            let ids = |ix: &InvertedIndex| -> BTreeSet<String> {
                ix.posting(SemanticId(sid))
                    .unwrap_or(&[])
                    .iter()
                    .map(|&o| ix.doc_id(o).unwrap().to_string())
                    .collect()
            };
            prop_assert_eq!(ids(&a), ids(&b));
        }
    }

    #[test]
    fn remove_equals_rebuild(docs in corpus(32), picks in prop::collection::vec(any::<usize>(), 0..10)) {
        let fp = Fingerprint::unchecked(&cfg(2, 5));
        let mut index = build_index(&docs, fp).unwrap();
        let mut remaining = docs.clone();
        for p in picks {
            if remaining.is_empty() {
                break;
            }
            let (id, _) = remaining.remove(p % remaining.len());
            index.remove_doc(&id).unwrap();
        }
        prop_assert_eq!(&index, &build_index(&remaining, fp).unwrap());
        prop_assert_eq!(index.to_bytes(), build_index(&remaining, fp).unwrap().to_bytes());
    }

    #[test]
    fn embeddings_roundtrip(rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 3 * 4), 0..6)) {
        let mut table = EmbeddingTable::new();
        for (i, r) in rows.into_iter().enumerate() {
            table.insert(format!("id-{i}"), MultiVector::new(Role::Document, 4, r).unwrap()).unwrap();
        }
        let bytes = encode_embeddings(&table).unwrap();
        let back = decode_embeddings(&bytes, Role::Document).unwrap();
        prop_assert_eq!(encode_embeddings(&back).unwrap(), bytes);
        prop_assert_eq!(back, table);
    }

    #[test]
    fn equal_sids_give_unit_similarity(seed in 0u64..50, a in prop::collection::vec(-1.0f64..1.0, 8)) {
        let mut head = QuantizerHead::new(cfg(2, 5), TouchShape { d_base: 8, ..TouchShape::default() }, seed).unwrap();
        // A nonzero up-projection bias keeps every reconstruction away from the zero vector.
        head.b_up.iter_mut().for_each(|v| *v = 0.1);
        let ea = encode_token(&a, &head).unwrap();
        let flipped: Vec<f64> = a.iter().map(|v| v * 1.5).collect();
        let eb = encode_token(&flipped, &head).unwrap();
        if ea.sid == eb.sid {
            let mm = match_matrix(std::slice::from_ref(&ea.recon.0), std::slice::from_ref(&eb.recon.0)).unwrap();
            prop_assert_eq!(sim_max_max(&mm), 1.0);
        }
        let mm = match_matrix(std::slice::from_ref(&ea.recon.0), std::slice::from_ref(&ea.recon.0)).unwrap();
        prop_assert_eq!(sim_max_max(&mm), 1.0);
    }
}

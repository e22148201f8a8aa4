//! Seeded synthetic data: a clustered Gaussian benchmark in feature space and a
//! small word-based text fixture for end-to-end runs through the text path.
//!
//! Benchmark geometry: each cluster has a random unit centre `c`; each topic
//! inside it is `normalize(c + topic_spread·u)`; documents and queries are
//! `normalize(topic + noise·u')`. Relevance is topic-level: a test query's
//! relevant set is the documents of its topic. Training instances grade
//! candidates 2 (same topic), 1 (same cluster, other topic) and 0 (elsewhere),
//! with teacher score `label / 2`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalQuery, TestQuery};
use crate::ingest::{BaseFeature, DocumentRecord};
use crate::pipeline::QueryInput;
use crate::trainer::{EncodedInstance, TrainingInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub clusters: usize,
    pub topics_per_cluster: usize,
    pub docs_per_topic: usize,
    pub dim: usize,
    pub topic_spread: f64,
    pub doc_noise: f64,
    pub query_noise: f64,
    /// Training queries drawn per topic.
    pub train_queries_per_topic: usize,
    pub train_positives: usize,
    pub train_siblings: usize,
    pub train_randoms: usize,
}

impl Default for BenchmarkConfig {
    /// 50 clusters × 10 topics × 10 docs = 5,000 docs, 500 test queries, dim 32.
    fn default() -> Self {
        BenchmarkConfig {
            clusters: 50,
            topics_per_cluster: 10,
            docs_per_topic: 10,
            dim: 32,
            topic_spread: 0.6,
            doc_noise: 0.35,
            query_noise: 0.35,
            train_queries_per_topic: 2,
            train_positives: 4,
            train_siblings: 4,
            train_randoms: 8,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.topics_per_cluster == 0 || self.docs_per_topic == 0 || self.dim < 8 {
            return Err(Error::Config("benchmark needs nonempty clusters/topics/docs and dim >= 8".into()));
        }
        if self.train_positives == 0 {
            return Err(Error::Config("training instances need at least one positive".into()));
        }
        Ok(())
    }

    pub fn num_docs(&self) -> usize {
        self.clusters * self.topics_per_cluster * self.docs_per_topic
    }
}

/// One generated benchmark. `docs[i]` belongs to topic `doc_topic[i]`.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub docs: Vec<(String, BaseFeature)>,
    pub doc_topic: Vec<usize>,
    pub train: Vec<EncodedInstance>,
    pub test: Vec<EvalQuery>,
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn jitter(rng: &mut impl Rng, centre: &[f64], noise: f64) -> Vec<f64> {
    let u = gaussian(rng, centre.len());
    let v: Vec<f64> = centre.iter().zip(&u).map(|(c, u)| c + noise * u).collect();
    BaseFeature::normalized(v).values
}

fn topic_doc_ids(cfg: &BenchmarkConfig, topic: usize) -> std::ops::Range<usize> {
    topic * cfg.docs_per_topic..(topic + 1) * cfg.docs_per_topic
}

/// Generates the clustered benchmark. Identical `(cfg, seed)` give identical data.
pub fn clustered_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_topics = cfg.clusters * cfg.topics_per_cluster;
    let mut topics = Vec::with_capacity(n_topics);
    for _ in 0..cfg.clusters {
        let centre = BaseFeature::normalized(gaussian(&mut rng, cfg.dim)).values;
        for _ in 0..cfg.topics_per_cluster {
            topics.push(jitter(&mut rng, &centre, cfg.topic_spread));
        }
    }

    let mut docs = Vec::with_capacity(cfg.num_docs());
    let mut doc_topic = Vec::with_capacity(cfg.num_docs());
    for (t, centre) in topics.iter().enumerate() {
        for j in 0..cfg.docs_per_topic {
            docs.push((
                format!("d{t:04}-{j:02}"),
                BaseFeature {
                    values: jitter(&mut rng, centre, cfg.doc_noise),
                },
            ));
            doc_topic.push(t);
        }
    }

    let mut test = Vec::with_capacity(n_topics);
    for (t, centre) in topics.iter().enumerate() {
        test.push(EvalQuery {
            id: format!("q{t:04}"),
            input: QueryInput::Feature(BaseFeature {
                values: jitter(&mut rng, centre, cfg.query_noise),
            }),
            relevant_ids: topic_doc_ids(cfg, t).map(|i| docs[i].0.clone()).collect(),
        });
    }

    let all: Vec<usize> = (0..docs.len()).collect();
    let mut train = Vec::with_capacity(n_topics * cfg.train_queries_per_topic);
    for (t, centre) in topics.iter().enumerate() {
        let cluster = t / cfg.topics_per_cluster;
        let own: Vec<usize> = topic_doc_ids(cfg, t).collect();
        let siblings: Vec<usize> = (cluster * cfg.topics_per_cluster..(cluster + 1) * cfg.topics_per_cluster)
            .filter(|&s| s != t)
            .flat_map(|s| topic_doc_ids(cfg, s))
            .collect();
        for _ in 0..cfg.train_queries_per_topic {
            let query = BaseFeature {
                values: jitter(&mut rng, centre, cfg.query_noise),
            };
            let mut picked: Vec<(usize, u32)> = Vec::new();
            picked.extend(own.choose_multiple(&mut rng, cfg.train_positives).map(|&i| (i, 2)));
            picked.extend(siblings.choose_multiple(&mut rng, cfg.train_siblings).map(|&i| (i, 1)));
            let mut randoms = 0;
            while randoms < cfg.train_randoms {
                let &i = all.choose(&mut rng).expect("nonempty corpus");
                if doc_topic[i] / cfg.topics_per_cluster != cluster {
                    picked.push((i, 0));
                    randoms += 1;
                }
            }
            picked.shuffle(&mut rng);
            train.push(EncodedInstance {
                query,
                docs: picked.iter().map(|&(i, _)| docs[i].1.clone()).collect(),
                labels: picked.iter().map(|&(_, l)| l).collect(),
                teacher_scores: Some(picked.iter().map(|&(_, l)| f64::from(l) / 2.0).collect()),
            });
        }
    }

    Ok(Benchmark {
        docs,
        doc_topic,
        train,
        test,
    })
}

/// Word-based corpus, training and test files for the text pipeline.
#[derive(Debug, Clone)]
pub struct TextFixture {
    pub corpus: Vec<DocumentRecord>,
    pub train: Vec<TrainingInstance>,
    pub test: Vec<TestQuery>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "be", "do", "fu", "gi", "ha", "ju", "po", "ze",
];

fn word(rng: &mut impl Rng) -> String {
    (0..3).map(|_| *SYLLABLES.choose(rng).expect("syllables")).collect()
}

fn sentence(rng: &mut impl Rng, pools: &[(&[String], usize)]) -> String {
    let mut words: Vec<&str> = Vec::new();
    for (pool, n) in pools {
        words.extend(pool.choose_multiple(rng, *n).map(String::as_str));
    }
    words.shuffle(rng);
    words.join(" ")
}

/// Topics own a handful of invented words; documents and queries mix topic,
/// cluster and shared filler words.
pub fn text_fixture(clusters: usize, topics_per_cluster: usize, docs_per_topic: usize, seed: u64) -> Result<TextFixture> {
    if clusters == 0 || topics_per_cluster < 2 || docs_per_topic < 2 {
        return Err(Error::Config("fixture needs clusters >= 1, topics >= 2, docs >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler: Vec<String> = (0..12).map(|_| word(&mut rng)).collect();
    let cluster_words: Vec<Vec<String>> = (0..clusters).map(|_| (0..4).map(|_| word(&mut rng)).collect()).collect();
    let n_topics = clusters * topics_per_cluster;
    let topic_words: Vec<Vec<String>> = (0..n_topics).map(|_| (0..5).map(|_| word(&mut rng)).collect()).collect();

    let mut corpus = Vec::new();
    for t in 0..n_topics {
        let c = &cluster_words[t / topics_per_cluster];
        for j in 0..docs_per_topic {
            corpus.push(DocumentRecord {
                id: format!("doc-{t:03}-{j}"),
                text: sentence(&mut rng, &[(&topic_words[t], 3), (c, 2), (&filler, 2)]),
            });
        }
    }

    let mut test = Vec::new();
    let mut train = Vec::new();
    for t in 0..n_topics {
        let cluster = t / topics_per_cluster;
        let c = &cluster_words[cluster];
        let own: Vec<&DocumentRecord> = corpus[t * docs_per_topic..(t + 1) * docs_per_topic].iter().collect();
        test.push(TestQuery {
            query: DocumentRecord {
                id: format!("q-{t:03}"),
                text: sentence(&mut rng, &[(&topic_words[t], 2), (c, 1)]),
            },
            relevant_ids: own.iter().map(|d| d.id.clone()).collect(),
        });
        let sib_topic = cluster * topics_per_cluster + (t % topics_per_cluster + 1) % topics_per_cluster;
        let far_topic = (t + topics_per_cluster) % n_topics;
        let mut docs = vec![
            (own[0], 2),
            (own[1], 2),
            (&corpus[sib_topic * docs_per_topic], 1),
        ];
        if far_topic / topics_per_cluster != cluster {
            docs.push((&corpus[far_topic * docs_per_topic], 0));
        }
        train.push(TrainingInstance {
            query: DocumentRecord {
                id: format!("tq-{t:03}"),
                text: sentence(&mut rng, &[(&topic_words[t], 2), (c, 1)]),
            },
            docs: docs.iter().map(|(d, _)| (*d).clone()).collect(),
            labels: docs.iter().map(|&(_, l)| l).collect(),
            teacher_scores: Some(docs.iter().map(|&(_, l)| f64::from(l) / 2.0).collect()),
        });
    }
    Ok(TextFixture { corpus, train, test })
}

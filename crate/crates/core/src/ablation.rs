//! Ablation harness: one train → index → evaluate run per (setting, seed).

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::matcher::MatchStrategy;
use crate::pipeline::engine_from_features;
use crate::quantizer::{QuantizerConfig, QuantizerHead, TouchShape};
use crate::rank::{RankHead, RankShape};
use crate::synthetic::{clustered_benchmark, Benchmark, BenchmarkConfig};
use crate::trainer::{train, LossConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    MatchStrategy,
    DqSweep,
    SidCountQuery,
    SidCountDoc,
    /// Values: `none`, `match` (λ_match = 0) or `reg` (λ_reg = 0).
    LossRemoval,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::MatchStrategy => "match-strategy",
            AblationAxis::DqSweep => "dq-sweep",
            AblationAxis::SidCountQuery => "sid-count-query",
            AblationAxis::SidCountDoc => "sid-count-doc",
            AblationAxis::LossRemoval => "loss-removal",
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "match-strategy" => AblationAxis::MatchStrategy,
            "dq-sweep" => AblationAxis::DqSweep,
            "sid-count-query" => AblationAxis::SidCountQuery,
            "sid-count-doc" => AblationAxis::SidCountDoc,
            "loss-removal" => AblationAxis::LossRemoval,
            other => return Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Everything an ablation run holds fixed. The benchmark is regenerated per
/// seed, so all settings of one seed share corpus and query log.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationBase {
    pub benchmark: BenchmarkConfig,
    pub quantizer: QuantizerConfig,
    pub touch_shape: TouchShape,
    pub rank_shape: RankShape,
    pub touch_train: TrainConfig,
    pub rank_train: TrainConfig,
    pub loss: LossConfig,
    pub ks: Vec<usize>,
    pub max_candidates: Option<usize>,
}

impl Default for AblationBase {
    fn default() -> Self {
        let benchmark = BenchmarkConfig::default();
        AblationBase {
            quantizer: QuantizerConfig::default(),
            touch_shape: TouchShape {
                d_base: benchmark.dim,
                ..TouchShape::default()
            },
            rank_shape: RankShape {
                d_base: benchmark.dim,
                ..RankShape::default()
            },
            benchmark,
            touch_train: TrainConfig::default(),
            rank_train: TrainConfig::rank_default(),
            loss: LossConfig::default(),
            ks: vec![10, 300],
            max_candidates: None,
        }
    }
}

/// Touch-side settings of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub quantizer: QuantizerConfig,
    pub touch_shape: TouchShape,
    pub loss: LossConfig,
}

impl AblationBase {
    fn settings(&self) -> RunSettings {
        RunSettings {
            quantizer: self.quantizer,
            touch_shape: self.touch_shape,
            loss: self.loss,
        }
    }

    /// Applies one axis value on top of the base settings.
    pub fn apply(&self, axis: AblationAxis, value: &str) -> Result<RunSettings> {
        let mut s = self.settings();
        let parse_count = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{axis} value {v:?} is not a count")))
        };
        match axis {
            AblationAxis::MatchStrategy => s.loss.match_strategy = value.parse::<MatchStrategy>()?,
            AblationAxis::DqSweep => s.quantizer.code_dim = parse_count(value)?,
            AblationAxis::SidCountQuery => s.touch_shape.query_tokens = parse_count(value)?,
            AblationAxis::SidCountDoc => s.touch_shape.doc_tokens = parse_count(value)?,
            AblationAxis::LossRemoval => match value {
                "none" => {}
                "match" => s.loss.lambda_match = 0.0,
                "reg" => s.loss.lambda_reg = 0.0,
                other => {
                    return Err(Error::Config(format!(
                        "loss-removal value {other:?}, expected none|match|reg"
                    )))
                }
            },
        }
        s.quantizer.validate()?;
        s.loss.validate()?;
        if s.touch_shape.query_tokens == 0 || s.touch_shape.doc_tokens == 0 {
            return Err(Error::Config("SID counts must be positive".into()));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub setting: String,
    pub seed: u64,
    pub report: EvalReport,
    pub wall_time_s: f64,
}

/// Trains a touch head on the benchmark's instances.
pub fn train_touch(bench: &Benchmark, s: &RunSettings, cfg: &TrainConfig, seed: u64) -> Result<QuantizerHead> {
    let head = QuantizerHead::new(s.quantizer, s.touch_shape, seed)?;
    let cfg = TrainConfig { seed, ..*cfg };
    Ok(train(&bench.train, head, &cfg, &s.loss)?.0)
}

pub fn train_rank(bench: &Benchmark, shape: RankShape, cfg: &TrainConfig, loss: &LossConfig, seed: u64) -> Result<RankHead> {
    let head = RankHead::new(shape, seed)?;
    let cfg = TrainConfig { seed, ..*cfg };
    Ok(train(&bench.train, head, &cfg, loss)?.0)
}

/// Indexes the benchmark corpus with `touch` and evaluates its test queries.
pub fn evaluate_heads(
    bench: &Benchmark,
    touch: &QuantizerHead,
    rank: &RankHead,
    ks: &[usize],
    max_candidates: Option<usize>,
) -> Result<EvalReport> {
    let engine = engine_from_features(&bench.docs, touch, rank)?.with_max_candidates(max_candidates);
    evaluate(&bench.test, &engine, ks)
}

/// Runs every (setting, seed) pair; rows come out seed-major in value order.
///
/// The rank head is trained once per seed and shared by all settings.
pub fn run_ablation(spec: &AblationSpec, base: &AblationBase) -> Result<Vec<AblationRow>> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one value and one seed".into()));
    }
    let settings = spec
        .values
        .iter()
        .map(|v| base.apply(spec.axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let bench = clustered_benchmark(&base.benchmark, seed)?;
        let rank = train_rank(&bench, base.rank_shape, &base.rank_train, &base.loss, seed)?;
        for (value, s) in spec.values.iter().zip(&settings) {
            let start = Instant::now();
            let touch = train_touch(&bench, s, &base.touch_train, seed)?;
            let report = evaluate_heads(&bench, &touch, &rank, &base.ks, base.max_candidates)?;
            rows.push(AblationRow {
                axis: spec.axis,
                setting: value.clone(),
                seed,
                report,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

/// `axis,setting,seed,recall@K…,mrr@K…,avg_retrieved,wall_time_s`.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let ks: Vec<usize> = rows
        .first()
        .map(|r| r.report.recall_at_k.keys().copied().collect())
        .unwrap_or_default();
    let mut out = String::from("axis,setting,seed");
    for k in &ks {
        let _ = write!(out, ",recall@{k}");
    }
    for k in &ks {
        let _ = write!(out, ",mrr@{k}");
    }
    out.push_str(",avg_retrieved,wall_time_s\n");
    for r in rows {
        let _ = write!(out, "{},{},{}", r.axis, r.setting, r.seed);
        for k in &ks {
            let _ = write!(out, ",{}", r.report.recall_at_k.get(k).copied().unwrap_or(f64::NAN));
        }
        for k in &ks {
            let _ = write!(out, ",{}", r.report.mrr_at_k.get(k).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(out, ",{},{:.3}", r.report.avg_retrieved, r.wall_time_s);
    }
    out
}

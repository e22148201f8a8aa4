//! Trains touch heads on the clustered benchmark and compares them with an
//! untrained head, Max-Sum training and training without the matching loss.
//!
//! `cargo run --release -p unidex-core --example synthetic_bench -- [seed] [steps] [learning_rate]`

use std::time::Instant;

use unidex_core::ablation::{evaluate_heads, train_rank, train_touch, AblationBase, RunSettings};
use unidex_core::matcher::MatchStrategy;
use unidex_core::quantizer::QuantizerHead;
use unidex_core::synthetic::clustered_benchmark;
use unidex_core::trainer::LossConfig;

fn main() -> unidex_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let seed: u64 = arg(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut base = AblationBase::default();
    if let Some(steps) = arg(2).and_then(|s| s.parse().ok()) {
        base.touch_train.steps = steps;
        base.rank_train.steps = steps;
    }
    if let Some(lr) = arg(3).and_then(|s| s.parse().ok()) {
        base.touch_train.learning_rate = lr;
    }
    let bench = clustered_benchmark(&base.benchmark, seed)?;

    let t = Instant::now();
    let rank = train_rank(&bench, base.rank_shape, &base.rank_train, &base.loss, seed)?;
    println!("rank head trained in {:.1}s", t.elapsed().as_secs_f64());

    let untrained = QuantizerHead::new(base.quantizer, base.touch_shape, seed)?;
    let r = evaluate_heads(&bench, &untrained, &rank, &base.ks, None)?;
    println!("untrained  recall@10 {:.4} avg_retrieved {:.1}", r.recall_at_k[&10], r.avg_retrieved);

    let default = RunSettings {
        quantizer: base.quantizer,
        touch_shape: base.touch_shape,
        loss: base.loss,
    };
    let variants = [
        ("max-max", default),
        (
            "max-sum",
            RunSettings {
                loss: LossConfig {
                    match_strategy: MatchStrategy::MaxSum,
                    ..default.loss
                },
                ..default
            },
        ),
        (
            "no-match",
            RunSettings {
                loss: LossConfig {
                    lambda_match: 0.0,
                    ..default.loss
                },
                ..default
            },
        ),
    ];
    for (name, s) in variants {
        let t = Instant::now();
        let touch = train_touch(&bench, &s, &base.touch_train, seed)?;
        let secs = t.elapsed().as_secs_f64();
        let r = evaluate_heads(&bench, &touch, &rank, &base.ks, None)?;
        println!(
            "{name:10} recall@10 {:.4} mrr@10 {:.4} avg_retrieved {:.1} ({secs:.1}s)",
            r.recall_at_k[&10], r.mrr_at_k[&10], r.avg_retrieved
        );
    }
    Ok(())
}

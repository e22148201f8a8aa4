//! Learning objectives, hand-written backward pass, and the Adam training loop.

mod data;
mod graph;
mod loss;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::matcher::MatchStrategy;
use crate::quantizer::QuantizerHead;
use crate::rank::RankHead;

pub use data::{load_training, parse_training, EncodedInstance, TrainingInstance};
pub use graph::{
    backward, total_loss, Gradient, LossBreakdown, RoundMode, Trainable, TrainableHead,
};
pub use loss::{
    distill_mse_loss, distill_with_grad, infonce_loss, infonce_with_grad, matching_loss,
    matching_with_grad, quant_reg_loss, quant_reg_with_grad, InfoNceGrad, LossGrad,
};
pub use optim::{Adam, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_match: f64,
    pub lambda_reg: f64,
    pub lambda_distill: f64,
    pub in_batch_negatives: bool,
    /// Query/document similarity used by the touch objectives.
    pub match_strategy: MatchStrategy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            lambda_match: 1.0,
            lambda_reg: 0.1,
            lambda_distill: 1.0,
            in_batch_negatives: true,
            match_strategy: MatchStrategy::MaxMax,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_match", self.lambda_match),
            ("lambda_reg", self.lambda_reg),
            ("lambda_distill", self.lambda_distill),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Touch-head defaults.
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-2,
            warmup_steps: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Rank-head defaults: same schedule, lower peak learning rate.
    pub fn rank_default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub steps: Vec<StepLoss>,
}

impl LossHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total).collect()
    }

    /// `step,total,infonce,match,reg,distill` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,total,infonce,match,reg,distill\n");
        for s in &self.steps {
            let l = &s.loss;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step, l.total, l.infonce, l.matching, l.reg, l.distill
            ));
        }
        out
    }
}

/// Heads that can round their parameters to checkpoint precision.
pub trait Snap {
    fn snap(&mut self);
}

impl Snap for QuantizerHead {
    fn snap(&mut self) {
        checkpoint::snap_touch(self);
    }
}

impl Snap for RankHead {
    fn snap(&mut self) {
        checkpoint::snap_rank(self);
    }
}

/// Runs `cfg.steps` Adam updates over shuffled mini-batches.
///
/// Deterministic for a fixed `(instances, head, cfg, loss)`. The returned head
/// is rounded to `f32` so it behaves exactly like its saved checkpoint.
pub fn train<H: TrainableHead + Snap>(
    instances: &[EncodedInstance],
    mut head: H,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<(H, LossHistory)> {
    loss.validate()?;
    if instances.is_empty() {
        return Err(Error::Empty("training instances"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut history = LossHistory::default();
    if cfg.steps == 0 {
        return Ok((head, history));
    }
    let schedule = Schedule {
        peak: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    };
    let mut adam = Adam::new(&head);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut cursor = order.len();
    let batch_size = cfg.batch_size.min(instances.len());
    let mut batch = Vec::with_capacity(batch_size);

    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(instances[order[cursor]].clone());
            cursor += 1;
        }
        let (breakdown, grad) = head.batch_loss(&batch, loss, RoundMode::Ewgs, true)?;
        if let Some(term) = breakdown.non_finite_term() {
            return Err(Error::NonFiniteLoss { step, term });
        }
        history.steps.push(StepLoss {
            step,
            loss: breakdown,
        });
        adam.update(&mut head, &grad.expect("gradient requested"), schedule.lr(step));
    }
    head.check_finite()?;
    head.snap();
    Ok((head, history))
}

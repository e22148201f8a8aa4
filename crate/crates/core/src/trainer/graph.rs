//! Reverse-mode gradients through encoder → quantizer → matcher → losses.
//!
//! The graph is small and fixed, so each node's backward rule is written out
//! by hand. Max nodes route their gradient to the first argmax; the rounding
//! node uses [`RoundMode`].

use crate::error::{Error, Result};
use crate::ingest::BaseFeature;
use crate::matcher::{argmax, cosine_from_parts, MatchStrategy, ZERO_NORM};
use crate::quantizer::{ewgs_backward, pre_round, sigmoid, QuantizerHead};
use crate::rank::RankHead;

use super::data::EncodedInstance;
use super::loss::{distill_with_grad, infonce_with_grad, matching_with_grad, quant_reg_with_grad};
use super::LossConfig;

/// How the rounding step behaves in forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundMode {
    /// Round in forward, element-wise gradient scaling in backward.
    #[default]
    Ewgs,
    /// Round in forward, identity in backward.
    StraightThrough,
    /// No rounding at all: the code is the continuous `(K-1)·σ(low)`. Makes
    /// the whole graph differentiable, which is what finite differences need.
    Bypass,
}

/// Per-term loss values; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub infonce: f64,
    pub matching: f64,
    pub reg: f64,
    pub distill: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("infonce", self.infonce),
            ("match", self.matching),
            ("reg", self.reg),
            ("distill", self.distill),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Gradient blocks aligned with [`Trainable::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like<T: Trainable + ?Sized>(head: &T) -> Self {
        Gradient {
            blocks: head.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Flat parameter blocks of a head, in a fixed order.
pub trait Trainable {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;
    fn block_names(&self) -> Vec<&'static str>;
}

impl Trainable for QuantizerHead {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![&self.encoder.weights, &self.w_down, &self.b_down, &self.w_up, &self.b_up]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.encoder.weights,
            &mut self.w_down,
            &mut self.b_down,
            &mut self.w_up,
            &mut self.b_up,
        ]
    }

    fn block_names(&self) -> Vec<&'static str> {
        vec!["w_enc", "w_down", "b_down", "w_up", "b_up"]
    }
}

impl Trainable for RankHead {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![&self.encoder.weights]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.encoder.weights]
    }

    fn block_names(&self) -> Vec<&'static str> {
        vec!["w_enc"]
    }
}

/// A head the trainer can optimize.
pub trait TrainableHead: Trainable + Clone {
    /// Mean loss over a batch, plus its gradient when `with_grad` is set.
    fn batch_loss(
        &self,
        batch: &[EncodedInstance],
        cfg: &LossConfig,
        mode: RoundMode,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Gradient>)>;

    fn check_finite(&self) -> Result<()>;
}

struct TokenCache {
    slot: usize,
    /// Encoder output `tanh(W_enc[slot] · f)`.
    h: Vec<f64>,
    low: Vec<f64>,
    sig: Vec<f64>,
    pre_round: Vec<f64>,
    code: Vec<f64>,
    /// Vector that enters the similarity: the reconstruction (touch) or `h` (rank).
    out: Vec<f64>,
    out_sq: f64,
}

struct SeqCache {
    instance: usize,
    tokens: Vec<TokenCache>,
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `w` is `rows × cols`; returns `wᵀ · g`.
fn matvec_t(w: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (row, &gr) in w.chunks_exact(cols).zip(g) {
        if gr != 0.0 {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * gr;
            }
        }
    }
    out
}

/// `acc += g ⊗ x` for a row-major `g.len() × x.len()` matrix.
fn outer_acc(acc: &mut [f64], g: &[f64], x: &[f64]) {
    for (row, &gr) in acc.chunks_exact_mut(x.len()).zip(g) {
        if gr != 0.0 {
            for (a, &xv) in row.iter_mut().zip(x) {
                *a += gr * xv;
            }
        }
    }
}

/// One similarity evaluation with the entries that carry gradient.
struct SimEval {
    value: f64,
    /// `(query token, doc token, weight)`.
    routes: Vec<(usize, usize, f64)>,
}

fn pair_cos(q: &TokenCache, d: &TokenCache) -> f64 {
    cosine_from_parts(dot(&q.out, &d.out), q.out_sq, d.out_sq)
}

fn similarity(q: &SeqCache, d: &SeqCache, strategy: MatchStrategy) -> SimEval {
    let n = d.tokens.len();
    let entries: Vec<f64> = q
        .tokens
        .iter()
        .flat_map(|qt| d.tokens.iter().map(move |dt| pair_cos(qt, dt)))
        .collect();
    match strategy {
        MatchStrategy::MaxMax => {
            let k = argmax(&entries);
            SimEval {
                value: entries[k],
                routes: vec![(k / n, k % n, 1.0)],
            }
        }
        MatchStrategy::MaxSum | MatchStrategy::MaxMean => {
            let m = q.tokens.len();
            let w = if strategy == MatchStrategy::MaxMean {
                1.0 / m as f64
            } else {
                1.0
            };
            let mut value = 0.0;
            let mut routes = Vec::with_capacity(m);
            for (i, row) in entries.chunks_exact(n).enumerate() {
                let j = argmax(row);
                value += row[j];
                routes.push((i, j, w));
            }
            SimEval {
                value: value * w,
                routes,
            }
        }
    }
}

/// Adds `g · ∂cos(a, b)/∂a` and `g · ∂cos(a, b)/∂b`.
fn cosine_backward(a: &TokenCache, b: &TokenCache, g: f64, da: &mut [f64], db: &mut [f64]) {
    let (na, nb) = (a.out_sq.sqrt(), b.out_sq.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM || g == 0.0 {
        return;
    }
    let c = dot(&a.out, &b.out) / (a.out_sq * b.out_sq).sqrt();
    let inv = 1.0 / (na * nb);
    for k in 0..a.out.len() {
        da[k] += g * (b.out[k] * inv - c * a.out[k] / a.out_sq);
        db[k] += g * (a.out[k] * inv - c * b.out[k] / b.out_sq);
    }
}

/// Everything the loss layer produces: per-sequence output gradients and
/// per-sequence scale for the regularizer.
struct LossOutputs {
    breakdown: LossBreakdown,
    d_out: Vec<Vec<Vec<f64>>>,
    reg_scale: Vec<f64>,
}

/// `seqs` holds, per instance, the query followed by its documents;
/// `layout[b] = (query_seq, first_doc_seq, doc_count)`.
fn loss_layer(
    seqs: &[SeqCache],
    layout: &[(usize, usize, usize)],
    batch: &[EncodedInstance],
    cfg: &LossConfig,
    strategy: MatchStrategy,
    touch: bool,
    rank_tokens: usize,
) -> Result<LossOutputs> {
    let bsz = batch.len() as f64;
    let mut d_out: Vec<Vec<Vec<f64>>> = seqs
        .iter()
        .map(|s| s.tokens.iter().map(|t| vec![0.0; t.out.len()]).collect())
        .collect();
    let mut reg_scale = vec![0.0; seqs.len()];
    let mut sum = LossBreakdown::default();

    // Top-grade docs of each instance, the in-batch negative pool.
    let tops: Vec<Vec<usize>> = layout
        .iter()
        .zip(batch)
        .map(|(&(_, first, count), inst)| {
            let top = inst.top_label();
            (0..count).filter(|&i| inst.labels[i] == top).map(|i| first + i).collect()
        })
        .collect();

    for (b, (&(qs, first, count), inst)) in layout.iter().zip(batch).enumerate() {
        let own: Vec<SimEval> = (0..count)
            .map(|i| similarity(&seqs[qs], &seqs[first + i], strategy))
            .collect();
        let cross_seqs: Vec<usize> = if cfg.in_batch_negatives {
            tops.iter()
                .enumerate()
                .filter(|&(other, _)| other != b)
                .flat_map(|(_, t)| t.iter().copied())
                .collect()
        } else {
            Vec::new()
        };
        let cross: Vec<SimEval> = cross_seqs
            .iter()
            .map(|&s| similarity(&seqs[qs], &seqs[s], strategy))
            .collect();
        let sims: Vec<f64> = own.iter().map(|e| e.value).collect();
        let cross_vals: Vec<f64> = cross.iter().map(|e| e.value).collect();

        let nce = infonce_with_grad(&sims, &inst.labels, &cross_vals, cfg.tau)?;
        let mut g_sims = nce.grad_sims;
        let g_cross = nce.grad_cross;
        sum.infonce += nce.value;

        if touch {
            let m = matching_with_grad(&sims, &inst.labels)?;
            sum.matching += m.value;
            for (g, mg) in g_sims.iter_mut().zip(&m.grad) {
                *g += cfg.lambda_match * mg;
            }
            let lows: Vec<Vec<f64>> = seqs[qs].tokens.iter().map(|t| t.low.clone()).collect();
            sum.reg += quant_reg_with_grad(&lows).0;
            reg_scale[qs] = cfg.lambda_reg / bsz;
        } else if let Some(teacher) = &inst.teacher_scores {
            let d = distill_with_grad(&sims, teacher, rank_tokens)?;
            sum.distill += d.value;
            for (g, dg) in g_sims.iter_mut().zip(&d.grad) {
                *g += cfg.lambda_distill * dg;
            }
        }

        let route = |target: usize, eval: &SimEval, g: f64, d_out: &mut Vec<Vec<Vec<f64>>>| {
            if g == 0.0 {
                return;
            }
            for &(i, j, w) in &eval.routes {
                let (qa, da) = if qs < target {
                    let (lo, hi) = d_out.split_at_mut(target);
                    (&mut lo[qs][i], &mut hi[0][j])
                } else {
                    let (lo, hi) = d_out.split_at_mut(qs);
                    (&mut hi[0][i], &mut lo[target][j])
                };
                cosine_backward(
                    &seqs[qs].tokens[i],
                    &seqs[target].tokens[j],
                    g * w / bsz,
                    qa,
                    da,
                );
            }
        };
        for (i, eval) in own.iter().enumerate() {
            route(first + i, eval, g_sims[i], &mut d_out);
        }
        for (k, eval) in cross.iter().enumerate() {
            route(cross_seqs[k], eval, g_cross[k], &mut d_out);
        }
    }

    let breakdown = LossBreakdown {
        infonce: sum.infonce / bsz,
        matching: sum.matching / bsz,
        reg: sum.reg / bsz,
        distill: sum.distill / bsz,
        total: (sum.infonce
            + cfg.lambda_match * sum.matching
            + cfg.lambda_reg * sum.reg
            + cfg.lambda_distill * sum.distill)
            / bsz,
    };
    Ok(LossOutputs {
        breakdown,
        d_out,
        reg_scale,
    })
}

fn layout_for(batch: &[EncodedInstance]) -> Vec<(usize, usize, usize)> {
    let mut next = 0;
    batch
        .iter()
        .map(|inst| {
            let q = next;
            next += 1 + inst.docs.len();
            (q, q + 1, inst.docs.len())
        })
        .collect()
}

fn check_batch(batch: &[EncodedInstance], d_base: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    for inst in batch {
        inst.validate()?;
        for f in std::iter::once(&inst.query).chain(&inst.docs) {
            if f.dim() != d_base {
                return Err(Error::DimensionMismatch {
                    expected: d_base,
                    actual: f.dim(),
                });
            }
        }
    }
    Ok(())
}

fn features(batch: &[EncodedInstance]) -> Vec<(usize, &BaseFeature, bool)> {
    batch
        .iter()
        .enumerate()
        .flat_map(|(b, inst)| {
            std::iter::once((b, &inst.query, true)).chain(inst.docs.iter().map(move |d| (b, d, false)))
        })
        .collect()
}

fn encoder_backward(
    enc_grad: &mut [f64],
    per_slot: usize,
    tok: &TokenCache,
    dh: &[f64],
    feature: &[f64],
) {
    let dpre: Vec<f64> = dh.iter().zip(&tok.h).map(|(g, h)| g * (1.0 - h * h)).collect();
    let slot = &mut enc_grad[tok.slot * per_slot..(tok.slot + 1) * per_slot];
    outer_acc(slot, &dpre, feature);
}

impl TrainableHead for QuantizerHead {
    fn batch_loss(
        &self,
        batch: &[EncodedInstance],
        cfg: &LossConfig,
        mode: RoundMode,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Gradient>)> {
        check_batch(batch, self.encoder.d_base())?;
        let levels = self.config.levels;
        let scale = (levels - 1) as f64;
        let (d, dq) = (self.config.dim, self.config.code_dim);
        let feats = features(batch);
        let seqs: Vec<SeqCache> = feats
            .iter()
            .map(|&(b, f, is_query)| {
                let n = if is_query { self.query_tokens } else { self.doc_tokens };
                let tokens = (0..n)
                    .map(|slot| {
                        let h = self.encoder.forward_slot(slot, &f.values);
                        let low = crate::quantizer::matvec(&self.w_down, &h, &self.b_down);
                        let sig: Vec<f64> = low.iter().map(|&x| sigmoid(x)).collect();
                        let pre = pre_round(&low, levels);
                        let code: Vec<f64> = match mode {
                            RoundMode::Bypass => pre.clone(),
                            _ => pre.iter().map(|&p| (p + 0.5).floor().clamp(0.0, scale)).collect(),
                        };
                        let out = crate::quantizer::matvec(&self.w_up, &code, &self.b_up);
                        let out_sq = sq_norm(&out);
                        TokenCache {
                            slot,
                            h,
                            low,
                            sig,
                            pre_round: pre,
                            code,
                            out,
                            out_sq,
                        }
                    })
                    .collect();
                SeqCache { instance: b, tokens }
            })
            .collect();
        let layout = layout_for(batch);
        let outputs = loss_layer(&seqs, &layout, batch, cfg, cfg.match_strategy, true, 0)?;
        if !with_grad {
            return Ok((outputs.breakdown, None));
        }

        let mut grad = Gradient::zeros_like(self);
        let per_slot = d * self.encoder.d_base();
        let [g_enc, g_wd, g_bd, g_wu, g_bu] = &mut grad.blocks[..] else {
            unreachable!("touch head has five parameter blocks")
        };
        for ((seq, d_out), (&(_, f, _), &reg_scale)) in seqs
            .iter()
            .zip(&outputs.d_out)
            .zip(feats.iter().zip(&outputs.reg_scale))
        {
            debug_assert!(seq.instance < batch.len());
            let reg_grads = if reg_scale != 0.0 {
                let lows: Vec<Vec<f64>> = seq.tokens.iter().map(|t| t.low.clone()).collect();
                Some(quant_reg_with_grad(&lows).1)
            } else {
                None
            };
            for (t, (tok, d_recon)) in seq.tokens.iter().zip(d_out).enumerate() {
                let has_recon = d_recon.iter().any(|&v| v != 0.0);
                if !has_recon && reg_grads.is_none() {
                    continue;
                }
                let mut d_low = vec![0.0; dq];
                if has_recon {
                    outer_acc(g_wu, d_recon, &tok.code);
                    for (g, v) in g_bu.iter_mut().zip(d_recon) {
                        *g += v;
                    }
                    let d_code = matvec_t(&self.w_up, d_recon, dq);
                    let d_pre = match mode {
                        RoundMode::Ewgs => {
                            ewgs_backward(&d_code, &tok.pre_round, &tok.code, self.config.ewgs_delta)
                        }
                        RoundMode::StraightThrough | RoundMode::Bypass => d_code,
                    };
                    for k in 0..dq {
                        d_low[k] = d_pre[k] * scale * tok.sig[k] * (1.0 - tok.sig[k]);
                    }
                }
                if let Some(rg) = &reg_grads {
                    for (dl, r) in d_low.iter_mut().zip(&rg[t]) {
                        *dl += reg_scale * r;
                    }
                }
                outer_acc(g_wd, &d_low, &tok.h);
                for (g, v) in g_bd.iter_mut().zip(&d_low) {
                    *g += v;
                }
                let dh = matvec_t(&self.w_down, &d_low, d);
                encoder_backward(g_enc, per_slot, tok, &dh, &f.values);
            }
        }
        Ok((outputs.breakdown, Some(grad)))
    }

    fn check_finite(&self) -> Result<()> {
        QuantizerHead::check_finite(self)
    }
}

impl TrainableHead for RankHead {
    fn batch_loss(
        &self,
        batch: &[EncodedInstance],
        cfg: &LossConfig,
        _mode: RoundMode,
        with_grad: bool,
    ) -> Result<(LossBreakdown, Option<Gradient>)> {
        check_batch(batch, self.encoder.d_base())?;
        let feats = features(batch);
        let seqs: Vec<SeqCache> = feats
            .iter()
            .map(|&(b, f, _)| SeqCache {
                instance: b,
                tokens: (0..self.tokens)
                    .map(|slot| {
                        let h = self.encoder.forward_slot(slot, &f.values);
                        let out_sq = sq_norm(&h);
                        TokenCache {
                            slot,
                            out: h.clone(),
                            h,
                            low: Vec::new(),
                            sig: Vec::new(),
                            pre_round: Vec::new(),
                            code: Vec::new(),
                            out_sq,
                        }
                    })
                    .collect(),
            })
            .collect();
        let layout = layout_for(batch);
        let outputs = loss_layer(&seqs, &layout, batch, cfg, MatchStrategy::MaxSum, false, self.tokens)?;
        if !with_grad {
            return Ok((outputs.breakdown, None));
        }
        let mut grad = Gradient::zeros_like(self);
        let per_slot = self.encoder.dim() * self.encoder.d_base();
        for ((seq, d_out), &(_, f, _)) in seqs.iter().zip(&outputs.d_out).zip(&feats) {
            for (tok, dh) in seq.tokens.iter().zip(d_out) {
                if dh.iter().any(|&v| v != 0.0) {
                    encoder_backward(&mut grad.blocks[0], per_slot, tok, dh, &f.values);
                }
            }
        }
        Ok((outputs.breakdown, Some(grad)))
    }

    fn check_finite(&self) -> Result<()> {
        RankHead::check_finite(self)
    }
}

/// Loss of a single instance (batch of one, no in-batch negatives available).
pub fn total_loss<H: TrainableHead>(
    instance: &EncodedInstance,
    head: &H,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    head.batch_loss(std::slice::from_ref(instance), cfg, RoundMode::Ewgs, false)
        .map(|(l, _)| l)
}

/// Gradient of [`total_loss`] with respect to every head parameter.
pub fn backward<H: TrainableHead>(
    instance: &EncodedInstance,
    head: &H,
    cfg: &LossConfig,
    mode: RoundMode,
) -> Result<Gradient> {
    head.batch_loss(std::slice::from_ref(instance), cfg, mode, true)
        .map(|(_, g)| g.expect("gradient requested"))
}

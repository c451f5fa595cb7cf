//! The ensemble training loop.
//!
//! Each iteration draws a batch, pairs every network `k` with a random peer
//! `j`, computes all K gradients against a snapshot of the parameters and only
//! then applies one Adam step per network.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::{adam_step, OptState};
use crate::dataset::{MultiAnnotatedSample, UnannotatedSample};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::inference::{ensemble_agreement, validation_references, validation_scores};
use crate::loss::{accumulate_ce_grad, masked_ce_sum, ramp_lambda, total_network_loss, LossBreakdown, ProbMap, RampUp};
use crate::mask::{argmax_mask, consensus_set, consistency_set, restrict, separate_agreement, LabelMask, SparseLabels};
use crate::model::{ImageTensor, ModelParams, PixelClassifier};
use crate::synth::derive_seed;

/// How the kept checkpoint is chosen on the validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// One iteration for all networks, by fused Jaccard.
    Fused,
    /// Each network keeps its own best iteration, by its own Jaccard.
    PerNetwork,
}

impl Selection {
    pub fn name(&self) -> &'static str {
        match self {
            Selection::Fused => "fused",
            Selection::PerNetwork => "per-network",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fused" => Some(Selection::Fused),
            "per-network" => Some(Selection::PerNetwork),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub w_max: f64,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub annotated_per_iter: usize,
    pub unannotated_batch: usize,
    pub total_iters: usize,
    pub validation_every: usize,
    pub seed: u64,
    /// Train on disagreement pixels where the network and its peer agree.
    pub use_pc: bool,
    /// Train on unannotated pixels where all peers agree.
    pub use_ps: bool,
    /// Draw unannotated images at all.
    pub use_unannotated: bool,
    /// Every network learns from this one annotator instead of its own.
    pub single_annotator: Option<usize>,
    pub selection: Selection,
    /// How validation annotations are fused into references.
    pub val_reference: FusionStrategy,
}

impl TrainConfig {
    /// Schedule of the original GPU experiments.
    pub fn paper(k: usize) -> Self {
        Self {
            k,
            alpha: 1.0,
            beta: 1.0,
            w_max: 0.1,
            lr: 1e-4,
            lr_decay_every: 2000,
            lr_decay_factor: 0.1,
            annotated_per_iter: 1,
            unannotated_batch: 3,
            total_iters: 15000,
            validation_every: 500,
            seed: 0,
            use_pc: true,
            use_ps: true,
            use_unannotated: true,
            single_annotator: None,
            selection: Selection::Fused,
            val_reference: FusionStrategy::AverageVote,
        }
    }

    /// Shorter schedule with a larger step for the small reference network.
    pub fn desk(k: usize) -> Self {
        Self {
            lr: 1e-2,
            lr_decay_every: 1000,
            total_iters: 2000,
            validation_every: 100,
            ..Self::paper(k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return bad(format!("need at least 2 networks, got {}", self.k));
        }
        if self.validation_every == 0 || self.lr_decay_every == 0 || self.annotated_per_iter == 0 {
            return bad("validation_every, lr_decay_every and annotated_per_iter must be positive".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lr", self.lr), ("lr_decay_factor", self.lr_decay_factor)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        RampUp::new(self.w_max, 1)?;
        Ok(())
    }

    /// Step size at iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((t / self.lr_decay_every) as i32)
    }

    pub fn ramp(&self) -> Result<RampUp> {
        RampUp::new(self.w_max, self.total_iters.max(1))
    }

    fn annotation_index(&self, k: usize) -> usize {
        self.single_annotator.unwrap_or(k)
    }
}

/// Parameters kept by validation-based selection.
#[derive(Debug, Clone, PartialEq)]
pub struct BestRecord {
    pub params: Vec<ModelParams>,
    pub iterations: Vec<usize>,
    /// Fused score under [`Selection::Fused`], per-network scores otherwise.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub params: Vec<ModelParams>,
    pub opts: Vec<OptState>,
    pub t: usize,
    rng: ChaCha8Rng,
    pub best: BestRecord,
}

impl EnsembleState {
    /// Network `k` is initialised from `derive_seed(cfg.seed, k)`.
    pub fn new<M: PixelClassifier>(model: &M, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params: Vec<ModelParams> = (0..cfg.k).map(|k| model.init(derive_seed(cfg.seed, k as u64))).collect();
        let opts = params.iter().map(|p| OptState::new(p.len(), cfg.lr)).collect();
        Ok(Self {
            best: BestRecord {
                params: params.clone(),
                iterations: vec![0; cfg.k],
                scores: vec![f64::NEG_INFINITY; cfg.k],
            },
            params,
            opts,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX)),
        })
    }

    pub fn k(&self) -> usize {
        self.params.len()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// A peer index drawn uniformly from `0..count` without `k`; one draw.
pub fn pick_comparison<R: Rng + ?Sized>(k: usize, count: usize, rng: &mut R) -> Result<usize> {
    if count < 2 {
        return Err(Error::Config(format!("comparison needs at least 2 networks, got {count}")));
    }
    if k >= count {
        return Err(Error::Argument(format!("network {k} out of 0..{count}")));
    }
    let r = rng.random_range(0..count - 1);
    Ok(if r >= k { r + 1 } else { r })
}

/// Agreement targets and the disagreement pixels where both networks predict
/// the same label.
fn npce_targets(
    ann_k: &LabelMask,
    ann_j: &LabelMask,
    pred_k: &LabelMask,
    pred_j: &LabelMask,
) -> Result<(SparseLabels, SparseLabels)> {
    let (agree, disagree) = separate_agreement(ann_k, ann_j)?;
    let lcd = restrict(&consistency_set(pred_k, pred_j)?, &disagree)?;
    Ok((agree, lcd))
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn inv(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn forward_probs<M: PixelClassifier>(model: &M, params: &ModelParams, image: &ImageTensor) -> Result<(ProbMap, M::Cache)> {
    let (logits, cache) = model.forward(params, image)?;
    let p = ProbMap::from_logits(image.width(), image.height(), model.arch().num_classes(), logits)?;
    Ok((p, cache))
}

/// Single-sample agreement and peer-consistency losses of network `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpceTerms {
    pub l_ma: f64,
    pub l_pc: f64,
    /// Parameter gradients of `l_ma` and `l_pc`, unweighted.
    pub grad_ma: Vec<f64>,
    pub grad_pc: Vec<f64>,
}

/// Agreement loss on the pixels where annotations `k` and `j` match, and the
/// peer-consistency loss on the remaining pixels where networks `k` and `j`
/// predict the same label. Gradients are for network `k` only.
pub fn npce_losses<M: PixelClassifier>(
    model: &M,
    state: &EnsembleState,
    sample: &MultiAnnotatedSample,
    k: usize,
    j: usize,
) -> Result<NpceTerms> {
    if k == j {
        return Err(Error::Argument(format!("network {k} cannot be its own comparison")));
    }
    let n = state.k();
    if k >= n || j >= n || k >= sample.annotations.len() || j >= sample.annotations.len() {
        return Err(Error::Argument(format!(
            "networks {k}, {j} with {n} networks and {} annotations",
            sample.annotations.len()
        )));
    }
    let (pk, cache) = forward_probs(model, &state.params[k], &sample.image)?;
    let (pj, _) = forward_probs(model, &state.params[j], &sample.image)?;
    let (agree, lcd) = npce_targets(&sample.annotations[k], &sample.annotations[j], &argmax_mask(&pk), &argmax_mask(&pj))?;
    let (ma_sum, ma_n) = masked_ce_sum(&pk, &agree)?;
    let (pc_sum, pc_n) = masked_ce_sum(&pk, &lcd)?;
    let mut g = vec![0.0; pk.probs().len()];
    accumulate_ce_grad(&pk, &agree, inv(ma_n), &mut g)?;
    let grad_ma = model.backward(&cache, &g)?;
    g.iter_mut().for_each(|v| *v = 0.0);
    accumulate_ce_grad(&pk, &lcd, inv(pc_n), &mut g)?;
    let grad_pc = model.backward(&cache, &g)?;
    Ok(NpceTerms {
        l_ma: mean(ma_sum, ma_n),
        l_pc: mean(pc_sum, pc_n),
        grad_ma,
        grad_pc,
    })
}

/// Pseudo-supervised loss of network `k` on the pixels where every other
/// network predicts the same label, with its parameter gradient.
pub fn mnps_loss<M: PixelClassifier>(
    model: &M,
    state: &EnsembleState,
    sample: &UnannotatedSample,
    k: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = state.k();
    if n < 2 || k >= n {
        return Err(Error::Argument(format!("network {k} of {n}")));
    }
    let (pk, cache) = forward_probs(model, &state.params[k], &sample.image)?;
    let peers = (0..n)
        .filter(|&z| z != k)
        .map(|z| forward_probs(model, &state.params[z], &sample.image).map(|(p, _)| argmax_mask(&p)))
        .collect::<Result<Vec<_>>>()?;
    let cons = consensus_set(&peers.iter().collect::<Vec<_>>())?;
    let (sum, count) = masked_ce_sum(&pk, &cons)?;
    let mut g = vec![0.0; pk.probs().len()];
    accumulate_ce_grad(&pk, &cons, inv(count), &mut g)?;
    Ok((mean(sum, count), model.backward(&cache, &g)?))
}

/// One iteration's inputs.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub annotated: Vec<&'a MultiAnnotatedSample>,
    pub unannotated: Vec<&'a UnannotatedSample>,
}

struct Forwarded<C> {
    probs: ProbMap,
    pred: LabelMask,
    cache: C,
}

fn forward_all<M: PixelClassifier>(model: &M, params: &ModelParams, images: &[&ImageTensor]) -> Result<Vec<Forwarded<M::Cache>>> {
    images
        .iter()
        .map(|img| {
            let (probs, cache) = forward_probs(model, params, img)?;
            Ok(Forwarded {
                pred: argmax_mask(&probs),
                probs,
                cache,
            })
        })
        .collect()
}

fn finite_or_fail(k: usize, terms: [(&str, f64); 3]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(Error::Numeric(format!("network {k}: {name} is {v}"))),
        None => Ok(()),
    }
}

/// Losses (and gradients if `with_grad`) of every network at the current
/// parameters. Consumes one comparison draw per network.
fn ensemble_losses<M: PixelClassifier>(
    model: &M,
    state: &mut EnsembleState,
    batch: &Batch,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(Vec<LossBreakdown>, Vec<Vec<f64>>)> {
    let n = state.k();
    let peers = (0..n)
        .map(|k| pick_comparison(k, n, &mut state.rng))
        .collect::<Result<Vec<_>>>()?;
    for s in &batch.annotated {
        let need = (0..n).map(|k| cfg.annotation_index(k)).max().unwrap_or(0);
        if need >= s.annotations.len() {
            return Err(Error::Config(format!(
                "sample {} has {} annotations, annotator {need} requested",
                s.id,
                s.annotations.len()
            )));
        }
    }
    let lambda = ramp_lambda(state.t, &cfg.ramp()?);
    let ann_images: Vec<&ImageTensor> = batch.annotated.iter().map(|s| &s.image).collect();
    let un_images: Vec<&ImageTensor> = batch.unannotated.iter().map(|s| &s.image).collect();
    let fwd = state
        .params
        .par_iter()
        .map(|p| Ok((forward_all(model, p, &ann_images)?, forward_all(model, p, &un_images)?)))
        .collect::<Result<Vec<_>>>()?;

    let per_net = (0..n)
        .into_par_iter()
        .map(|k| -> Result<(LossBreakdown, Vec<f64>)> {
            let j = peers[k];
            let (ann_k, un_k) = &fwd[k];
            let (ann_j, _) = &fwd[j];
            let mut agree_sets = Vec::with_capacity(ann_k.len());
            let (mut ma_sum, mut ma_n, mut pc_sum, mut pc_n) = (0.0, 0, 0.0, 0);
            for (s, sample) in batch.annotated.iter().enumerate() {
                let (agree, lcd) = npce_targets(
                    &sample.annotations[cfg.annotation_index(k)],
                    &sample.annotations[cfg.annotation_index(j)],
                    &ann_k[s].pred,
                    &ann_j[s].pred,
                )?;
                let (a, an) = masked_ce_sum(&ann_k[s].probs, &agree)?;
                ma_sum += a;
                ma_n += an;
                if cfg.use_pc {
                    let (c, cn) = masked_ce_sum(&ann_k[s].probs, &lcd)?;
                    pc_sum += c;
                    pc_n += cn;
                }
                agree_sets.push((agree, lcd));
            }
            let mut cons_sets = Vec::new();
            let (mut ps_sum, mut ps_n) = (0.0, 0);
            if cfg.use_ps {
                for u in 0..un_k.len() {
                    let others: Vec<&LabelMask> = (0..n).filter(|&z| z != k).map(|z| &fwd[z].1[u].pred).collect();
                    let cons = consensus_set(&others)?;
                    let (s, sn) = masked_ce_sum(&un_k[u].probs, &cons)?;
                    ps_sum += s;
                    ps_n += sn;
                    cons_sets.push(cons);
                }
            }
            let (l_ma, l_pc, l_ps) = (mean(ma_sum, ma_n), mean(pc_sum, pc_n), mean(ps_sum, ps_n));
            finite_or_fail(k, [("l_ma", l_ma), ("l_pc", l_pc), ("l_ps", l_ps)])?;
            let breakdown = total_network_loss(l_ma, l_pc, l_ps, cfg.alpha, cfg.beta, lambda)?;
            let mut grad = Vec::new();
            if with_grad {
                grad = vec![0.0; state.params[k].len()];
                for (s, (agree, lcd)) in agree_sets.iter().enumerate() {
                    let f = &ann_k[s];
                    let mut g = vec![0.0; f.probs.probs().len()];
                    accumulate_ce_grad(&f.probs, agree, cfg.alpha * inv(ma_n), &mut g)?;
                    if cfg.use_pc {
                        accumulate_ce_grad(&f.probs, lcd, cfg.beta * inv(pc_n), &mut g)?;
                    }
                    add_into(&mut grad, &model.backward(&f.cache, &g)?);
                }
                for (u, cons) in cons_sets.iter().enumerate() {
                    if cons.is_empty() {
                        continue;
                    }
                    let f = &un_k[u];
                    let mut g = vec![0.0; f.probs.probs().len()];
                    accumulate_ce_grad(&f.probs, cons, lambda * inv(ps_n), &mut g)?;
                    add_into(&mut grad, &model.backward(&f.cache, &g)?);
                }
                if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!("network {k}: non-finite gradient at coordinate {i}")));
                }
            }
            Ok((breakdown, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_net.into_iter().unzip())
}

/// One optimisation step for every network. Returns each network's losses
/// at the parameters before the step.
pub fn train_iteration<M: PixelClassifier>(
    model: &M,
    state: &mut EnsembleState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<Vec<LossBreakdown>> {
    if state.t >= cfg.total_iters {
        return Err(Error::Usage(format!(
            "iteration {} is past the configured {} iterations",
            state.t, cfg.total_iters
        )));
    }
    let (losses, grads) = ensemble_losses(model, state, batch, cfg, true)?;
    let lr = cfg.lr_at(state.t);
    for (k, g) in grads.iter().enumerate() {
        state.opts[k].lr = lr;
        adam_step(&mut state.params[k], &mut state.opts[k], g)?;
    }
    state.t += 1;
    Ok(losses)
}

/// Training, validation and unannotated splits.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub multi: &'a [MultiAnnotatedSample],
    pub unannotated: &'a [UnannotatedSample],
    pub val: &'a [MultiAnnotatedSample],
}

/// One trace line: ensemble sums (`net == None`) or a single network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub net: Option<usize>,
    pub losses: LossBreakdown,
    pub agreement: f64,
    pub val_jaccard: f64,
}

pub const TRACE_HEADER: &str = "iter,net,l_ma,l_pc,l_ps,lambda,total,agreement,val_jaccard";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        let net = r.net.map_or_else(|| "all".to_string(), |k| k.to_string());
        let l = &r.losses;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iter, net, l.l_ma, l.l_pc, l.l_ps, l.lambda_t, l.total, r.agreement, r.val_jaccard
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: EnsembleState,
    pub trace: Vec<TraceRow>,
    pub network_trace: Vec<TraceRow>,
}

impl TrainOutcome {
    /// The parameters kept by validation selection.
    pub fn best_params(&self) -> &[ModelParams] {
        &self.state.best.params
    }
}

fn check_data<M: PixelClassifier>(model: &M, data: &TrainData, cfg: &TrainConfig) -> Result<()> {
    if data.multi.is_empty() {
        return Err(Error::Config("the multi-annotated training set is empty".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("the validation set is empty".into()));
    }
    let need = match cfg.single_annotator {
        Some(i) => i + 1,
        None => cfg.k,
    };
    let arch = model.arch();
    for s in data.multi.iter().chain(data.val) {
        if s.annotations.len() < need || (cfg.single_annotator.is_none() && s.annotations.len() != cfg.k) {
            return Err(Error::Config(format!(
                "sample {} has {} annotations, training needs {}",
                s.id,
                s.annotations.len(),
                need
            )));
        }
        if s.num_classes() != arch.num_classes() || s.image.channels() != arch.in_channels() {
            return Err(Error::Shape(format!(
                "sample {}: {} classes / {} channels, model has {} / {}",
                s.id,
                s.num_classes(),
                s.image.channels(),
                arch.num_classes(),
                arch.in_channels()
            )));
        }
    }
    Ok(())
}

fn draw_batch<'a>(rng: &mut ChaCha8Rng, data: &TrainData<'a>, cfg: &TrainConfig) -> Batch<'a> {
    let annotated = (0..cfg.annotated_per_iter)
        .map(|_| &data.multi[rng.random_range(0..data.multi.len())])
        .collect();
    let unannotated = if cfg.use_unannotated && !data.unannotated.is_empty() {
        (0..cfg.unannotated_batch)
            .map(|_| &data.unannotated[rng.random_range(0..data.unannotated.len())])
            .collect()
    } else {
        Vec::new()
    };
    Batch { annotated, unannotated }
}

fn sum_breakdowns(rows: &[LossBreakdown], cfg: &TrainConfig) -> LossBreakdown {
    let s = |f: fn(&LossBreakdown) -> f64| rows.iter().map(f).sum::<f64>();
    LossBreakdown {
        l_ma: s(|b| b.l_ma),
        l_pc: s(|b| b.l_pc),
        l_ps: s(|b| b.l_ps),
        alpha: cfg.alpha,
        beta: cfg.beta,
        lambda_t: rows.first().map_or(0.0, |b| b.lambda_t),
        total: s(|b| b.total),
    }
}

struct TracePoint {
    agreement: f64,
    network_agreement: Vec<f64>,
    fused: f64,
    per_network: Vec<f64>,
}

fn trace_point<M: PixelClassifier>(
    model: &M,
    params: &[ModelParams],
    data: &TrainData,
    refs: &[LabelMask],
    train_images: &[&ImageTensor],
) -> Result<TracePoint> {
    let (agreement, network_agreement) = ensemble_agreement(model, params, train_images)?;
    let (fused, per_network) = validation_scores(model, params, data.val, refs)?;
    Ok(TracePoint {
        agreement,
        network_agreement,
        fused,
        per_network,
    })
}

/// Keeps θ_t if it beats the best score so far (strictly).
fn select(state: &mut EnsembleState, p: &TracePoint, t: usize, cfg: &TrainConfig) {
    let best = &mut state.best;
    match cfg.selection {
        Selection::Fused => {
            if p.fused > best.scores[0] {
                best.params = state.params.clone();
                best.iterations = vec![t; state.params.len()];
                best.scores = vec![p.fused; state.params.len()];
            }
        }
        Selection::PerNetwork => {
            for (k, &score) in p.per_network.iter().enumerate() {
                if score > best.scores[k] {
                    best.params[k] = state.params[k].clone();
                    best.iterations[k] = t;
                    best.scores[k] = score;
                }
            }
        }
    }
}

/// Full training run with validation-based selection and a trace.
pub fn run_training<M: PixelClassifier>(model: &M, data: TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training_logged(model, data, cfg, &mut |_| {})
}

/// As [`run_training`], reporting every ensemble trace row as it is made.
pub fn run_training_logged<M: PixelClassifier>(
    model: &M,
    data: TrainData,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(model, &data, cfg)?;
    let mut state = EnsembleState::new(model, cfg)?;
    let mut trace = Vec::new();
    let mut network_trace = Vec::new();
    if cfg.total_iters == 0 {
        return Ok(TrainOutcome {
            state,
            trace,
            network_trace,
        });
    }
    let train_images: Vec<&ImageTensor> = data.multi.iter().map(|s| &s.image).collect();
    let refs = validation_references(data.val, cfg.val_reference, derive_seed(cfg.seed, 0x7A1))?;
    for t in 0..=cfg.total_iters {
        let traced = t % cfg.validation_every == 0;
        if t == cfg.total_iters && !traced {
            break;
        }
        // scores and selection see θ_t, before this iteration's update
        let point = if traced {
            let p = trace_point(model, &state.params, &data, &refs, &train_images)?;
            select(&mut state, &p, t, cfg);
            Some(p)
        } else {
            None
        };
        let batch = draw_batch(&mut state.rng, &data, cfg);
        let losses = if t < cfg.total_iters {
            train_iteration(model, &mut state, &batch, cfg)?
        } else {
            ensemble_losses(model, &mut state, &batch, cfg, false)?.0
        };
        let Some(point) = point else { continue };
        let row = TraceRow {
            iter: t,
            net: None,
            losses: sum_breakdowns(&losses, cfg),
            agreement: point.agreement,
            val_jaccard: point.fused,
        };
        log(&row);
        trace.push(row);
        for (k, l) in losses.iter().enumerate() {
            network_trace.push(TraceRow {
                iter: t,
                net: Some(k),
                losses: *l,
                agreement: point.network_agreement[k],
                val_jaccard: point.per_network[k],
            });
        }
    }
    Ok(TrainOutcome {
        state,
        trace,
        network_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, DatasetSpec};
    use crate::model::{ArchDescriptor, ConvLayer, ConvNet};

    fn tiny_data(seed: u64) -> Dataset {
        let spec = DatasetSpec {
            width: 16,
            height: 16,
            ..DatasetSpec::new(3, 4, 2, 0, 2, seed)
        };
        Dataset::generate(&spec).unwrap()
    }

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig {
            total_iters: total,
            validation_every: 5,
            seed: 9,
            ..TrainConfig::desk(2)
        }
    }

    fn naive_softmax(logits: &[f64], c: usize) -> Vec<f64> {
        logits
            .chunks(c)
            .flat_map(|px| {
                let m = px.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = px.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / s)
            })
            .collect()
    }

    fn naive_argmax(p: &[f64], c: usize) -> Vec<u8> {
        p.chunks(c)
            .map(|px| {
                let mut best = 0;
                for k in 1..c {
                    if px[k] > px[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }

    fn net_probs(model: &ConvNet, p: &ModelParams, img: &ImageTensor) -> Vec<f64> {
        naive_softmax(&model.forward(p, img).unwrap().0, model.arch().num_classes())
    }

    /// Mean -ln p over the pixels where `keep` holds, labels from `label`.
    fn naive_ce(p: &[f64], c: usize, keep: impl Fn(usize) -> bool, label: impl Fn(usize) -> u8) -> f64 {
        let (mut s, mut n) = (0.0, 0);
        for i in 0..p.len() / c {
            if keep(i) {
                s -= p[i * c + label(i) as usize].max(1e-12).ln();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    #[test]
    fn comparison_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(pick_comparison(0, 2, &mut rng).unwrap(), 1);
            assert_eq!(pick_comparison(1, 2, &mut rng).unwrap(), 0);
        }
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[pick_comparison(1, 3, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[1], 0);
        for c in [counts[0], counts[2]] {
            let f = c as f64 / 1e4;
            assert!((0.49..=0.51).contains(&f), "{counts:?}");
        }
        let (mut a, mut b) = (ChaCha8Rng::seed_from_u64(5), ChaCha8Rng::seed_from_u64(5));
        for k in 0..6 {
            assert_eq!(pick_comparison(k, 6, &mut a).unwrap(), pick_comparison(k, 6, &mut b).unwrap());
        }
        assert!(matches!(pick_comparison(0, 1, &mut a), Err(Error::Config(_))));
    }

    #[test]
    fn npce_matches_clean_room() {
        let data = tiny_data(3);
        let model = ConvNet::reference(1, 2).unwrap();
        let state = EnsembleState::new(&model, &cfg(10)).unwrap();
        for s in &data.multi {
            let t = npce_losses(&model, &state, s, 0, 1).unwrap();
            let pk = net_probs(&model, &state.params[0], &s.image);
            let pj = net_probs(&model, &state.params[1], &s.image);
            let (yk, yj) = (s.annotations[0].labels(), s.annotations[1].labels());
            let (mk, mj) = (naive_argmax(&pk, 2), naive_argmax(&pj, 2));
            let l_ma = naive_ce(&pk, 2, |i| yk[i] == yj[i], |i| yk[i]);
            let l_pc = naive_ce(&pk, 2, |i| yk[i] != yj[i] && mk[i] == mj[i], |i| mk[i]);
            assert!((t.l_ma - l_ma).abs() < 1e-10);
            assert!((t.l_pc - l_pc).abs() < 1e-10);
        }
    }

    #[test]
    fn npce_empty_disagreement_or_consistency() {
        let data = tiny_data(4);
        let model = ConvNet::reference(1, 2).unwrap();
        let state = EnsembleState::new(&model, &cfg(10)).unwrap();
        let mut s = data.multi[0].clone();
        s.annotations[1] = s.annotations[0].clone();
        let t = npce_losses(&model, &state, &s, 0, 1).unwrap();
        assert_eq!(t.l_pc, 0.0);
        assert!(t.grad_pc.iter().all(|&g| g == 0.0));

        // 1x1 networks whose biases force opposite predictions everywhere
        let arch = ArchDescriptor::new(vec![ConvLayer {
            in_channels: 1,
            out_channels: 2,
            kernel: 1,
        }])
        .unwrap();
        let lin = ConvNet::new(arch.clone());
        let mut st = EnsembleState::new(&lin, &cfg(10)).unwrap();
        st.params[0] = ModelParams::new(arch.clone(), vec![0.0, 0.0, 0.0, 5.0], 0).unwrap();
        st.params[1] = ModelParams::new(arch, vec![0.0, 0.0, 5.0, 0.0], 0).unwrap();
        let t = npce_losses(&lin, &st, &data.multi[0], 0, 1).unwrap();
        assert_eq!(t.l_pc, 0.0);
        assert!(t.l_ma > 0.0);
        assert!(npce_losses(&lin, &st, &data.multi[0], 1, 1).is_err());
    }

    #[test]
    fn mnps_matches_clean_room() {
        let data = tiny_data(5);
        let model = ConvNet::reference(1, 2).unwrap();
        let state = EnsembleState::new(&model, &TrainConfig { k: 4, ..cfg(10) }).unwrap();
        for u in &data.unannotated {
            for k in 0..4 {
                let (l, _) = mnps_loss(&model, &state, u, k).unwrap();
                let probs: Vec<Vec<f64>> = state.params.iter().map(|p| net_probs(&model, p, &u.image)).collect();
                let masks: Vec<Vec<u8>> = probs.iter().map(|p| naive_argmax(p, 2)).collect();
                let peers: Vec<usize> = (0..4).filter(|&z| z != k).collect();
                let unanimous = |i: usize| peers.iter().all(|&z| masks[z][i] == masks[peers[0]][i]);
                let oracle = naive_ce(&probs[k], 2, unanimous, |i| masks[peers[0]][i]);
                assert!((l - oracle).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mnps_degenerate_peers() {
        let data = tiny_data(6);
        let model = ConvNet::reference(1, 2).unwrap();
        let u = &data.unannotated[0];
        // K = 2: the single peer's mask covers the full grid
        let state = EnsembleState::new(&model, &cfg(10)).unwrap();
        let (l, _) = mnps_loss(&model, &state, u, 0).unwrap();
        let p0 = net_probs(&model, &state.params[0], &u.image);
        let m1 = naive_argmax(&net_probs(&model, &state.params[1], &u.image), 2);
        assert!((l - naive_ce(&p0, 2, |_| true, |i| m1[i])).abs() < 1e-10);
        // identical peers: full grid with their common mask
        let mut state = EnsembleState::new(&model, &TrainConfig { k: 3, ..cfg(10) }).unwrap();
        state.params[2] = state.params[1].clone();
        let (l, _) = mnps_loss(&model, &state, u, 0).unwrap();
        assert!((l - naive_ce(&p0, 2, |_| true, |i| m1[i])).abs() < 1e-10);
    }

    #[test]
    fn iteration_gradient_matches_term_gradients() {
        let data = tiny_data(7);
        let model = ConvNet::reference(1, 2).unwrap();
        let c = TrainConfig {
            alpha: 0.7,
            beta: 1.3,
            w_max: 0.5,
            ..cfg(4)
        };
        let mut state = EnsembleState::new(&model, &c).unwrap();
        state.t = 2;
        let batch = Batch {
            annotated: vec![&data.multi[0]],
            unannotated: vec![&data.unannotated[0]],
        };
        let (losses, grads) = ensemble_losses(&model, &mut state.clone(), &batch, &c, true).unwrap();
        let lambda = ramp_lambda(2, &c.ramp().unwrap());
        for k in 0..2 {
            let j = 1 - k;
            let t = npce_losses(&model, &state, &data.multi[0], k, j).unwrap();
            let (l_ps, g_ps) = mnps_loss(&model, &state, &data.unannotated[0], k).unwrap();
            assert!((losses[k].l_ma - t.l_ma).abs() < 1e-12);
            assert!((losses[k].l_pc - t.l_pc).abs() < 1e-12);
            assert!((losses[k].l_ps - l_ps).abs() < 1e-12);
            assert_eq!(losses[k].lambda_t, lambda);
            let l = &losses[k];
            assert!((l.total - (l.alpha * l.l_ma + l.beta * l.l_pc + l.lambda_t * l.l_ps)).abs() < 1e-12);
            for i in 0..grads[k].len() {
                let expect = c.alpha * t.grad_ma[i] + c.beta * t.grad_pc[i] + lambda * g_ps[i];
                assert!((grads[k][i] - expect).abs() < 1e-12 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn ablations_zero_their_terms() {
        let data = tiny_data(8);
        let model = ConvNet::reference(1, 2).unwrap();
        let c = TrainConfig {
            use_pc: false,
            use_ps: false,
            ..cfg(4)
        };
        let mut state = EnsembleState::new(&model, &c).unwrap();
        let batch = Batch {
            annotated: vec![&data.multi[0]],
            unannotated: vec![&data.unannotated[0]],
        };
        let losses = train_iteration(&model, &mut state, &batch, &c).unwrap();
        assert!(losses.iter().all(|l| l.l_pc == 0.0 && l.l_ps == 0.0 && l.l_ma > 0.0));
        // the same annotator for every network leaves nothing to disagree on
        let c = TrainConfig {
            single_annotator: Some(1),
            ..cfg(4)
        };
        let mut state = EnsembleState::new(&model, &c).unwrap();
        let losses = train_iteration(&model, &mut state, &batch, &c).unwrap();
        assert!(losses.iter().all(|l| l.l_pc == 0.0));
    }

    #[test]
    fn first_iteration_reports_initial_ramp() {
        let data = tiny_data(9);
        let model = ConvNet::reference(1, 2).unwrap();
        let c = cfg(50);
        let mut state = EnsembleState::new(&model, &c).unwrap();
        let batch = Batch {
            annotated: vec![&data.multi[1]],
            unannotated: vec![],
        };
        let losses = train_iteration(&model, &mut state, &batch, &c).unwrap();
        for l in &losses {
            assert!((l.lambda_t - 0.1 * (-5.0f64).exp()).abs() < 1e-15);
            assert_eq!(l.l_ps, 0.0);
        }
        assert_eq!(state.t, 1);
        assert!(state.opts.iter().all(|o| o.step == 1));
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig {
            lr: 1e-4,
            lr_decay_every: 2000,
            ..cfg(10)
        };
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(1999), 1e-4);
        assert!((c.lr_at(2000) - 1e-5).abs() < 1e-20);
        assert!((c.lr_at(4500) - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn replay_is_bit_identical() {
        let data = tiny_data(10);
        let model = ConvNet::reference(1, 2).unwrap();
        let c = cfg(100);
        let td = TrainData {
            multi: &data.multi,
            unannotated: &data.unannotated,
            val: &data.val,
        };
        let run = || {
            let mut state = EnsembleState::new(&model, &c).unwrap();
            let mut traj = Vec::new();
            for _ in 0..100 {
                let batch = draw_batch(&mut state.rng, &td, &c);
                train_iteration(&model, &mut state, &batch, &c).unwrap();
                traj.push(state.params.clone());
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_run_shape() {
        let data = tiny_data(11);
        let model = ConvNet::reference(1, 2).unwrap();
        let td = TrainData {
            multi: &data.multi,
            unannotated: &data.unannotated,
            val: &data.val,
        };
        let zero = run_training(&model, td, &cfg(0)).unwrap();
        assert!(zero.trace.is_empty());
        let init = EnsembleState::new(&model, &cfg(0)).unwrap();
        assert_eq!(zero.best_params(), init.params.as_slice());

        for (total, every) in [(10, 5), (12, 5), (7, 1)] {
            let c = TrainConfig {
                validation_every: every,
                ..cfg(total)
            };
            let out = run_training(&model, td, &c).unwrap();
            assert_eq!(out.trace.len(), total / every + 1);
            assert_eq!(out.network_trace.len(), 2 * out.trace.len());
            assert_eq!(out.state.t, total);
            if total % every == 0 {
                assert_eq!(out.trace.last().unwrap().losses.lambda_t, c.w_max);
            }
            for r in &out.trace {
                let l = &r.losses;
                assert!((l.total - (l.alpha * l.l_ma + l.beta * l.l_pc + l.lambda_t * l.l_ps)).abs() < 1e-12);
            }
            let csv = trace_csv(&out.trace);
            assert!(csv.starts_with(TRACE_HEADER));
            assert_eq!(csv.lines().count(), out.trace.len() + 1);
            let best = out.state.best.iterations[0];
            let row = out.trace.iter().find(|r| r.iter == best).unwrap();
            assert!(out.trace.iter().all(|r| r.val_jaccard <= row.val_jaccard));
        }
    }

    #[test]
    fn bad_inputs() {
        let data = tiny_data(12);
        let model = ConvNet::reference(1, 2).unwrap();
        let td = TrainData {
            multi: &[],
            unannotated: &data.unannotated,
            val: &data.val,
        };
        assert!(matches!(run_training(&model, td, &cfg(5)), Err(Error::Config(_))));
        assert!(matches!(EnsembleState::new(&model, &TrainConfig { k: 1, ..cfg(5) }), Err(Error::Config(_))));
        let td = TrainData {
            multi: &data.multi,
            unannotated: &data.unannotated,
            val: &data.val,
        };
        let three = TrainConfig { k: 3, ..cfg(5) };
        assert!(matches!(run_training(&model, td, &three), Err(Error::Config(_))));
        let mut state = EnsembleState::new(&model, &cfg(0)).unwrap();
        assert!(matches!(train_iteration(&model, &mut state, &Batch::default(), &cfg(0)), Err(Error::Usage(_))));
    }
}

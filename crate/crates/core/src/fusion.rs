//! Inference-time average fusion and the annotation-fusion baselines:
//! per-pixel plurality vote, random whole-mask selection and STAPLE.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::ProbMap;
use crate::mask::LabelMask;

/// Per-pixel, per-class arithmetic mean of the maps.
pub fn average_fuse(maps: &[&ProbMap]) -> Result<ProbMap> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::Argument("average fusion of zero maps".into()))?;
    for m in rest {
        if m.width() != first.width() || m.height() != first.height() || m.num_classes() != first.num_classes() {
            return Err(Error::Shape("probability maps of differing shapes".into()));
        }
    }
    let n = maps.len() as f64;
    let mut acc = first.probs().to_vec();
    for m in rest {
        for (a, v) in acc.iter_mut().zip(m.probs()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(ProbMap::from_parts_unchecked(first.width(), first.height(), first.num_classes(), acc))
}

fn check_masks(masks: &[&LabelMask]) -> Result<()> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::Argument("fusion of zero masks".into()))?;
    rest.iter().try_for_each(|m| first.check_same_shape(m))
}

/// Per-pixel most frequent label; ties go to the lowest class index.
pub fn majority_vote(masks: &[&LabelMask]) -> Result<LabelMask> {
    check_masks(masks)?;
    let first = masks[0];
    let c = first.num_classes();
    let mut counts = vec![0usize; c];
    let labels = (0..first.len())
        .map(|i| {
            counts.iter_mut().for_each(|v| *v = 0);
            for m in masks {
                counts[m.labels()[i] as usize] += 1;
            }
            let mut best = 0;
            for k in 1..c {
                if counts[k] > counts[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(first.width(), first.height(), c, labels)
}

/// One whole mask chosen uniformly, using a single draw from `rng`.
pub fn random_select<R: Rng + ?Sized>(masks: &[&LabelMask], rng: &mut R) -> Result<LabelMask> {
    if masks.is_empty() {
        return Err(Error::Argument("random selection from zero masks".into()));
    }
    Ok(masks[rng.random_range(0..masks.len())].clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StapleConfig {
    /// Starting sensitivity and specificity of every annotator.
    pub init: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Sensitivities and specificities are kept in `[clamp, 1 - clamp]`.
    pub clamp: f64,
}

impl Default for StapleConfig {
    fn default() -> Self {
        Self {
            init: 0.99999,
            tol: 1e-6,
            max_iter: 100,
            clamp: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StapleResult {
    pub fused: LabelMask,
    /// Posterior foreground probability per pixel.
    pub weights: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub specificities: Vec<f64>,
    pub prior: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Observed-data log likelihood at the start of each iteration, followed
    /// by its value at the final parameters.
    pub log_likelihood: Vec<f64>,
}

fn ln_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// E-step: fills `weights` and returns the observed-data log likelihood.
fn staple_e_step(decisions: &[Vec<bool>], p: &[f64], q: &[f64], prior: f64, weights: &mut [f64]) -> f64 {
    let lp: Vec<(f64, f64)> = p.iter().map(|v| (v.ln(), (1.0 - v).ln())).collect();
    let lq: Vec<(f64, f64)> = q.iter().map(|v| (v.ln(), (1.0 - v).ln())).collect();
    let (lf1, lf0) = (prior.ln(), (1.0 - prior).ln());
    let mut ll = 0.0;
    for (i, w) in weights.iter_mut().enumerate() {
        let (mut la, mut lb) = (lf1, lf0);
        for (k, d) in decisions.iter().enumerate() {
            if d[i] {
                la += lp[k].0;
                lb += lq[k].1;
            } else {
                la += lp[k].1;
                lb += lq[k].0;
            }
        }
        let lz = ln_sum_exp(la, lb);
        *w = (la - lz).exp();
        ll += lz;
    }
    ll
}

fn staple_core(decisions: &[Vec<bool>], cfg: &StapleConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64, usize, bool, Vec<f64>) {
    let k = decisions.len();
    let n = decisions[0].len();
    let lo = cfg.clamp;
    let hi = 1.0 - cfg.clamp;
    let fg: usize = decisions.iter().map(|d| d.iter().filter(|&&v| v).count()).sum();
    let prior = (fg as f64 / (k * n).max(1) as f64).clamp(lo, hi);
    let mut p = vec![cfg.init.clamp(lo, hi); k];
    let mut q = p.clone();
    let mut weights = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        trace.push(staple_e_step(decisions, &p, &q, prior, &mut weights));
        iterations += 1;
        let sw: f64 = weights.iter().sum();
        let sv: f64 = n as f64 - sw;
        let mut delta: f64 = 0.0;
        for (j, d) in decisions.iter().enumerate() {
            let (mut tp, mut tn) = (0.0, 0.0);
            for (i, &w) in weights.iter().enumerate() {
                if d[i] {
                    tp += w;
                } else {
                    tn += 1.0 - w;
                }
            }
            let np = if sw > 0.0 { (tp / sw).clamp(lo, hi) } else { p[j] };
            let nq = if sv > 0.0 { (tn / sv).clamp(lo, hi) } else { q[j] };
            delta = delta.max((np - p[j]).abs()).max((nq - q[j]).abs());
            p[j] = np;
            q[j] = nq;
        }
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    trace.push(staple_e_step(decisions, &p, &q, prior, &mut weights));
    (weights, p, q, prior, iterations, converged, trace)
}

/// Binary STAPLE by expectation-maximisation over per-annotator sensitivity
/// and specificity. The fused mask is the posterior thresholded at 0.5.
pub fn staple_binary(masks: &[&LabelMask], cfg: &StapleConfig) -> Result<StapleResult> {
    check_masks(masks)?;
    if masks.len() < 2 {
        return Err(Error::Argument("STAPLE needs at least two annotations".into()));
    }
    if masks.iter().any(|m| m.labels().iter().any(|&l| l > 1)) {
        return Err(Error::Argument("STAPLE binary input contains labels above 1".into()));
    }
    let decisions: Vec<Vec<bool>> = masks.iter().map(|m| m.labels().iter().map(|&l| l == 1).collect()).collect();
    let (weights, p, q, prior, iterations_used, converged, log_likelihood) = staple_core(&decisions, cfg);
    let first = masks[0];
    let labels = weights.iter().map(|&w| (w >= 0.5) as u8).collect();
    Ok(StapleResult {
        fused: LabelMask::new(first.width(), first.height(), first.num_classes(), labels)?,
        weights,
        sensitivities: p,
        specificities: q,
        prior,
        iterations_used,
        converged,
        log_likelihood,
    })
}

/// STAPLE for any class count. Binary masks use [`staple_binary`] directly;
/// otherwise each class is fused one-vs-rest and every pixel takes the class
/// with the largest posterior (ties to the lowest index).
pub fn staple(masks: &[&LabelMask], cfg: &StapleConfig) -> Result<LabelMask> {
    check_masks(masks)?;
    let first = masks[0];
    let c = first.num_classes();
    if c == 2 {
        return Ok(staple_binary(masks, cfg)?.fused);
    }
    if masks.len() < 2 {
        return Err(Error::Argument("STAPLE needs at least two annotations".into()));
    }
    let posteriors: Vec<Vec<f64>> = (0..c as u8)
        .map(|cls| {
            let decisions: Vec<Vec<bool>> =
                masks.iter().map(|m| m.labels().iter().map(|&l| l == cls).collect()).collect();
            staple_core(&decisions, cfg).0
        })
        .collect();
    let labels = (0..first.len())
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if posteriors[k][i] > posteriors[best][i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(first.width(), first.height(), c, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    /// Unweighted per-pixel plurality vote.
    AverageVote,
    Random,
    Staple,
}

impl FusionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::AverageVote => "average-vote",
            FusionStrategy::Random => "random",
            FusionStrategy::Staple => "staple",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average-vote" | "average" => Ok(FusionStrategy::AverageVote),
            "random" => Ok(FusionStrategy::Random),
            "staple" => Ok(FusionStrategy::Staple),
            other => Err(Error::Argument(format!(
                "unknown fusion strategy {other:?} (expected average-vote, random or staple)"
            ))),
        }
    }
}

/// Collapses several annotations of one image into a single mask.
pub fn fuse_annotations<R: Rng + ?Sized>(
    strategy: FusionStrategy,
    masks: &[&LabelMask],
    rng: &mut R,
) -> Result<LabelMask> {
    match strategy {
        FusionStrategy::AverageVote => majority_vote(masks),
        FusionStrategy::Random => random_select(masks, rng),
        FusionStrategy::Staple if masks.len() == 1 => Ok(masks[0].clone()),
        FusionStrategy::Staple => staple(masks, &StapleConfig::default()),
    }
}

//! Masked cross entropy, the Gaussian ramp-up weight and the per-network
//! loss composition.

use crate::error::{Error, Result};
use crate::mask::SparseLabels;

/// Floor applied to probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-6;

/// Per-pixel class probabilities, stored pixel-major (`probs[i * C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    num_classes: usize,
    probs: Vec<f64>,
    logits: Option<Vec<f64>>,
}

impl ProbMap {
    /// Wraps an existing probability field after checking it is one.
    pub fn from_probs(width: usize, height: usize, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Argument(format!("num_classes {num_classes} < 2")));
        }
        if probs.len() != width * height * num_classes {
            return Err(Error::Shape(format!(
                "{} probabilities for {width}x{height}x{num_classes}",
                probs.len()
            )));
        }
        for (i, px) in probs.chunks_exact(num_classes).enumerate() {
            if px.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Argument(format!("pixel {i} has a probability outside [0, 1]")));
            }
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Argument(format!("pixel {i} probabilities sum to {s}")));
            }
        }
        Ok(Self {
            width,
            height,
            num_classes,
            probs,
            logits: None,
        })
    }

    /// Per-pixel softmax of pixel-major scores. The scores are kept so that
    /// loss gradients can be reported against them.
    pub fn from_logits(width: usize, height: usize, num_classes: usize, logits: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Argument(format!("num_classes {num_classes} < 2")));
        }
        if logits.len() != width * height * num_classes {
            return Err(Error::Shape(format!(
                "{} scores for {width}x{height}x{num_classes}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite score in logits".into()));
        }
        let mut probs = vec![0.0; logits.len()];
        for (out, px) in probs
            .chunks_exact_mut(num_classes)
            .zip(logits.chunks_exact(num_classes))
        {
            softmax_into(px, out);
        }
        Ok(Self {
            width,
            height,
            num_classes,
            probs,
            logits: Some(logits),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    /// Probabilities of pixel `i`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, num_classes: usize, probs: Vec<f64>) -> Self {
        Self {
            width,
            height,
            num_classes,
            probs,
            logits: None,
        }
    }
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn check_targets(p: &ProbMap, targets: &SparseLabels) -> Result<()> {
    if targets.grid_size() != p.num_pixels() || targets.num_classes() != p.num_classes {
        return Err(Error::Shape(format!(
            "targets on {} pixels (C={}) vs probability map {}x{} (C={})",
            targets.grid_size(),
            targets.num_classes(),
            p.width,
            p.height,
            p.num_classes
        )));
    }
    Ok(())
}

/// Unnormalised masked cross entropy: `(sum of -log p[i, y_i], |S|)`.
pub fn masked_ce_sum(p: &ProbMap, targets: &SparseLabels) -> Result<(f64, usize)> {
    check_targets(p, targets)?;
    let c = p.num_classes;
    let sum = targets
        .iter()
        .map(|(i, y)| -p.probs[i * c + y as usize].max(PROB_FLOOR).ln())
        .sum();
    Ok((sum, targets.len()))
}

/// Adds `scale * (softmax - onehot)` on every target pixel into `grad`.
pub fn accumulate_ce_grad(p: &ProbMap, targets: &SparseLabels, scale: f64, grad: &mut [f64]) -> Result<()> {
    check_targets(p, targets)?;
    if grad.len() != p.probs.len() {
        return Err(Error::Shape(format!(
            "gradient buffer of {} for {} scores",
            grad.len(),
            p.probs.len()
        )));
    }
    let c = p.num_classes;
    for (i, y) in targets.iter() {
        let px = &p.probs[i * c..(i + 1) * c];
        let g = &mut grad[i * c..(i + 1) * c];
        for k in 0..c {
            g[k] += scale * px[k];
        }
        g[y as usize] -= scale;
    }
    Ok(())
}

/// Mean cross entropy over the target pixels together with its gradient with
/// respect to the pre-softmax scores (pixel-major, zero off the target set).
///
/// An empty target set yields a zero loss and a zero gradient.
pub fn masked_cross_entropy(p: &ProbMap, targets: &SparseLabels) -> Result<(f64, Vec<f64>)> {
    let (sum, n) = masked_ce_sum(p, targets)?;
    let mut grad = vec![0.0; p.probs.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n as f64;
    accumulate_ce_grad(p, targets, inv, &mut grad)?;
    Ok((sum * inv, grad))
}

/// Gaussian ramp-up schedule `w_max * exp(-5 (1 - t / t_max)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampUp {
    w_max: f64,
    t_max: usize,
}

impl RampUp {
    pub fn new(w_max: f64, t_max: usize) -> Result<Self> {
        if !(w_max > 0.0 && w_max.is_finite()) {
            return Err(Error::Config(format!("ramp-up w_max must be positive, got {w_max}")));
        }
        if t_max == 0 {
            return Err(Error::Config("ramp-up t_max must be at least 1".into()));
        }
        Ok(Self { w_max, t_max })
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }
}

/// Ramp-up weight at iteration `t`; iterations past `t_max` are clamped.
pub fn ramp_lambda(t: usize, schedule: &RampUp) -> f64 {
    let t = t.min(schedule.t_max);
    let phase = 1.0 - t as f64 / schedule.t_max as f64;
    schedule.w_max * (-5.0 * phase * phase).exp()
}

/// Loss terms of one network at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ma: f64,
    pub l_pc: f64,
    pub l_ps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_t: f64,
    pub total: f64,
}

/// `alpha * l_ma + beta * l_pc + lambda * l_ps`.
pub fn total_network_loss(
    l_ma: f64,
    l_pc: f64,
    l_ps: f64,
    alpha: f64,
    beta: f64,
    lambda_t: f64,
) -> Result<LossBreakdown> {
    let named = [
        ("l_ma", l_ma),
        ("l_pc", l_pc),
        ("l_ps", l_ps),
        ("alpha", alpha),
        ("beta", beta),
        ("lambda", lambda_t),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("{name} is not finite ({v})")));
    }
    Ok(LossBreakdown {
        l_ma,
        l_pc,
        l_ps,
        alpha,
        beta,
        lambda_t,
        total: alpha * l_ma + beta * l_pc + lambda_t * l_ps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{LabelMask, PixelSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, w: usize, h: usize, c: usize) -> (Vec<f64>, SparseLabels) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..w * h * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut idx = Vec::new();
        let mut lab = Vec::new();
        for i in 0..w * h {
            if rng.random_bool(0.6) {
                idx.push(i);
                lab.push(rng.random_range(0..c) as u8);
            }
        }
        let t = SparseLabels::new(PixelSet::new(idx, w * h).unwrap(), lab, c).unwrap();
        (logits, t)
    }

    /// Naive per-pixel loss straight from the scores.
    fn oracle_loss(logits: &[f64], c: usize, targets: &SparseLabels) -> f64 {
        let mut total = 0.0;
        for (i, y) in targets.iter() {
            let px = &logits[i * c..(i + 1) * c];
            let denom: f64 = px.iter().map(|v| v.exp()).sum();
            total += -(px[y as usize].exp() / denom).ln();
        }
        total / targets.len() as f64
    }

    #[test]
    fn uniform_binary_is_ln2() {
        let p = ProbMap::from_probs(4, 4, 2, vec![0.5; 32]).unwrap();
        let m = LabelMask::new(4, 4, 2, (0..16).map(|i| (i % 2) as u8).collect()).unwrap();
        let (loss, _) = masked_cross_entropy(&p, &SparseLabels::from_mask(&m)).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn empty_targets_give_zero() {
        let p = ProbMap::from_probs(2, 2, 2, vec![0.3, 0.7, 0.1, 0.9, 0.5, 0.5, 0.99, 0.01]).unwrap();
        let (loss, grad) = masked_cross_entropy(&p, &SparseLabels::empty(4, 2)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_probability_is_floored() {
        let p = ProbMap::from_probs(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let m = LabelMask::new(1, 1, 2, vec![1]).unwrap();
        let (loss, _) = masked_cross_entropy(&p, &SparseLabels::from_mask(&m)).unwrap();
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch() {
        let p = ProbMap::from_probs(2, 1, 2, vec![0.5; 4]).unwrap();
        assert!(matches!(masked_cross_entropy(&p, &SparseLabels::empty(3, 2)), Err(Error::Shape(_))));
        assert!(matches!(masked_cross_entropy(&p, &SparseLabels::empty(2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn probmap_validation() {
        assert!(ProbMap::from_probs(1, 1, 2, vec![0.6, 0.6]).is_err());
        assert!(ProbMap::from_probs(1, 1, 2, vec![1.2, -0.2]).is_err());
        assert!(ProbMap::from_logits(1, 1, 2, vec![f64::NAN, 0.0]).is_err());
        let p = ProbMap::from_logits(1, 1, 3, vec![1000.0, 0.0, -1000.0]).unwrap();
        assert!((p.pixel(0)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_and_finite_differences() {
        let (w, h, c) = (8, 8, 3);
        let (logits, targets) = random_problem(17, w, h, c);
        let p = ProbMap::from_logits(w, h, c, logits.clone()).unwrap();
        let (loss, grad) = masked_cross_entropy(&p, &targets).unwrap();
        assert!((loss - oracle_loss(&logits, c, &targets)).abs() < 1e-10);

        let step = 1e-5;
        for k in 0..logits.len() {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[k] += step;
            dn[k] -= step;
            let fd = (oracle_loss(&up, c, &targets) - oracle_loss(&dn, c, &targets)) / (2.0 * step);
            let denom = fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(
                (fd - grad[k]).abs() / denom < 1e-4 || (fd - grad[k]).abs() < 1e-10,
                "coordinate {k}: analytic {} fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn ramp_values() {
        let r = RampUp::new(0.1, 1000).unwrap();
        assert_eq!(ramp_lambda(1000, &r), 0.1);
        assert!((ramp_lambda(0, &r) - 6.737947e-4).abs() < 1e-9);
        assert!((ramp_lambda(500, &r) - 0.028650).abs() < 1e-6);
        assert_eq!(ramp_lambda(5000, &r), 0.1);
        assert!(RampUp::new(0.0, 10).is_err());
        assert!(RampUp::new(0.1, 0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_network_loss(1.0, 0.0, 0.0, 1.0, 1.0, 0.1).unwrap().total, 1.0);
        let b = total_network_loss(0.5, 0.25, 2.0, 1.0, 1.0, 0.1).unwrap();
        assert!((b.total - 0.95).abs() < 1e-12);
        assert!(matches!(
            total_network_loss(f64::INFINITY, 0.0, 0.0, 1.0, 1.0, 0.1),
            Err(Error::Numeric(_))
        ));
    }

    proptest! {
        #[test]
        fn split_recombination(seed in any::<u64>(), cut in 0usize..64) {
            let (logits, targets) = random_problem(seed, 8, 8, 2);
            prop_assume!(!targets.is_empty());
            let p = ProbMap::from_logits(8, 8, 2, logits).unwrap();
            let (whole, _) = masked_cross_entropy(&p, &targets).unwrap();
            let split = |keep: &dyn Fn(usize) -> bool| {
                let (i, l): (Vec<_>, Vec<_>) = targets.iter().filter(|(i, _)| keep(*i)).unzip();
                SparseLabels::new(PixelSet::new(i, 64).unwrap(), l, 2).unwrap()
            };
            let a = split(&|i| i < cut);
            let b = split(&|i| i >= cut);
            let (la, _) = masked_cross_entropy(&p, &a).unwrap();
            let (lb, _) = masked_cross_entropy(&p, &b).unwrap();
            let recombined = (la * a.len() as f64 + lb * b.len() as f64) / targets.len() as f64;
            prop_assert!((whole - recombined).abs() < 1e-12);
            prop_assert!(whole >= 0.0 && whole <= -PROB_FLOOR.ln());
        }

        #[test]
        fn ramp_monotone_and_scale_free(w in 0.01f64..10.0, t_max in 2usize..5000, t in 0usize..5000) {
            let r = RampUp::new(w, t_max).unwrap();
            let unit = RampUp::new(1.0, t_max).unwrap();
            let t = t % t_max;
            prop_assert!(ramp_lambda(t, &r) < ramp_lambda(t + 1, &r));
            prop_assert!((ramp_lambda(t, &r) / w - ramp_lambda(t, &unit)).abs() < 1e-12);
        }

        #[test]
        fn total_reproduces_sum(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0,
                                al in 0.0f64..2.0, be in 0.0f64..2.0, la in 0.0f64..1.0) {
            let r = total_network_loss(a, b, c, al, be, la).unwrap();
            prop_assert!((r.total - (al * a + be * b + la * c)).abs() < 1e-12);
        }
    }
}

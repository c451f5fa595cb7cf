//! Finite-difference verification of the reference model's backward pass.
//!
//! Each coordinate is compared against a central difference of the full-grid
//! cross entropy. A difference whose two probes flip any ReLU unit is not a
//! derivative, so it is retried with smaller steps; coordinates that still
//! straddle a kink are counted as skipped.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{masked_cross_entropy, ProbMap};
use crate::mask::{LabelMask, SparseLabels};
use crate::model::{init_params, ArchDescriptor, ConvNet, ImageTensor, ModelParams, PixelClassifier};
use crate::synth::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Negative control: perturb one analytic coordinate before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            size: 8,
            in_channels: 1,
            num_classes: 3,
            step: 1e-4,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

/// Relative errors below this magnitude of both gradients are measured
/// against the floor instead.
pub const RELATIVE_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub instance: usize,
    pub layer: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub params: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<LayerReport>,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates that needed a smaller step to avoid a ReLU kink.
    pub retried: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.map_or(0.0, |w| w.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error() < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(f, "layer {}: {} params, max relative error {:.3e}", l.layer, l.params, l.max_rel_error)?;
        }
        writeln!(
            f,
            "checked {} coordinates ({} retried at a smaller step, {} skipped at kinks)",
            self.checked, self.retried, self.skipped
        )?;
        if let Some(w) = self.worst {
            writeln!(
                f,
                "worst: instance {} layer {} parameter {}: analytic {:.12e} numeric {:.12e} (relative error {:.3e})",
                w.instance, w.layer, w.index, w.analytic, w.numeric, w.rel_error
            )?;
        }
        write!(
            f,
            "{} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        )
    }
}

struct Instance {
    params: ModelParams,
    image: ImageTensor,
    targets: SparseLabels,
}

fn make_instance(arch: &ArchDescriptor, cfg: &GradCheckConfig, i: usize) -> Result<Instance> {
    let seed = derive_seed(cfg.seed, i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(arch, seed);
    // non-zero biases so every block is exercised
    let offsets = arch.offsets();
    for (l, layer) in arch.layers().iter().enumerate() {
        let start = offsets[l] + layer.weight_count();
        for v in &mut params.values_mut()[start..start + layer.out_channels] {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    let n = cfg.size * cfg.size;
    let image = ImageTensor::new(
        cfg.size,
        cfg.size,
        cfg.in_channels,
        (0..n * cfg.in_channels).map(|_| rng.random::<f64>()).collect(),
    )?;
    let labels = (0..n).map(|_| rng.random_range(0..cfg.num_classes) as u8).collect();
    let mask = LabelMask::new(cfg.size, cfg.size, cfg.num_classes, labels)?;
    Ok(Instance {
        params,
        image,
        targets: SparseLabels::from_mask(&mask),
    })
}

fn loss_and_pattern(model: &ConvNet, params: &ModelParams, inst: &Instance, c: usize) -> Result<(f64, Vec<bool>)> {
    let (logits, cache) = model.forward(params, &inst.image)?;
    let p = ProbMap::from_logits(inst.image.width(), inst.image.height(), c, logits)?;
    Ok((masked_cross_entropy(&p, &inst.targets)?.0, cache.relu_pattern()))
}

pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let arch = ArchDescriptor::reference(cfg.in_channels, cfg.num_classes)?;
    let model = ConvNet::new(arch.clone());
    let offsets = arch.offsets();
    let layer_of = |idx: usize| offsets.iter().rposition(|&o| o <= idx).unwrap_or(0);
    let mut layers: Vec<LayerReport> = arch
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| LayerReport {
            layer: l,
            params: layer.param_count(),
            max_rel_error: 0.0,
        })
        .collect();
    let (mut worst, mut checked, mut retried, mut skipped) = (None::<Coordinate>, 0, 0, 0);
    let c = cfg.num_classes;
    for i in 0..cfg.instances {
        let inst = make_instance(&arch, cfg, i)?;
        let (logits, cache) = model.forward(&inst.params, &inst.image)?;
        let p = ProbMap::from_logits(cfg.size, cfg.size, c, logits)?;
        let (_, grad_logits) = masked_cross_entropy(&p, &inst.targets)?;
        let mut analytic = model.backward(&cache, &grad_logits)?;
        if cfg.corrupt {
            let mid = analytic.len() / 2;
            analytic[mid] = analytic[mid] * 1.5 + 1e-3;
        }
        let base = cache.relu_pattern();
        for idx in 0..analytic.len() {
            let mut numeric = None;
            for (attempt, h) in [cfg.step, cfg.step * 1e-2, cfg.step * 1e-4].into_iter().enumerate() {
                let mut plus = inst.params.clone();
                plus.values_mut()[idx] += h;
                let mut minus = inst.params.clone();
                minus.values_mut()[idx] -= h;
                let (lp, pp) = loss_and_pattern(&model, &plus, &inst, c)?;
                let (lm, pm) = loss_and_pattern(&model, &minus, &inst, c)?;
                if pp == base && pm == base {
                    numeric = Some((lp - lm) / (2.0 * h));
                    retried += (attempt > 0) as usize;
                    break;
                }
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            checked += 1;
            let rel = relative_error(analytic[idx], numeric);
            let l = layer_of(idx);
            layers[l].max_rel_error = layers[l].max_rel_error.max(rel);
            if worst.is_none_or(|w| rel > w.rel_error) {
                worst = Some(Coordinate {
                    instance: i,
                    layer: l,
                    index: idx,
                    analytic: analytic[idx],
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(GradCheckReport {
        layers,
        worst,
        checked,
        retried,
        skipped,
        tolerance: cfg.tolerance,
    })
}

//! Deterministic desk-scale scenes with ambiguous boundaries and simulated
//! annotators.
//!
//! A scene is one star-shaped object (an ellipse, a lobed blob, or a
//! disc-with-cup for the three-class variant) rendered as a blurred, noisy
//! indicator. Annotators redraw the clean boundary displaced along its normal
//! by a systematic bias plus a smooth jitter made of three random-phase
//! harmonics of the boundary angle.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::model::ImageTensor;

/// SplitMix64 finaliser, used to derive independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Blob,
    /// A cup (class 2) inside a disc (class 1).
    Nested,
}

impl ShapeFamily {
    pub fn num_classes(&self) -> usize {
        match self {
            ShapeFamily::Nested => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub shape: ShapeFamily,
    /// Intensity step between background and the innermost class.
    pub contrast: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Gaussian blur sigma in pixels.
    pub blur: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            shape: ShapeFamily::Ellipse,
            contrast: 0.6,
            noise: 0.05,
            blur: 1.5,
            seed,
        }
    }
}

const MIN_AREA: f64 = 0.05;
const MAX_AREA: f64 = 0.60;
const MAX_TRIES: usize = 64;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let phi = dy.atan2(dx);
        let scale: f64 = 1.0 + self.harmonics.iter().map(|(m, a, p)| a * (m * phi + p).cos()).sum::<f64>();
        (dx * dx + dy * dy).sqrt() <= self.r0 * scale
    }
}

fn draw_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let side = w.min(h);
    let cx = rng.random_range(0.35..0.65) * w;
    let cy = rng.random_range(0.35..0.65) * h;
    let a = rng.random_range(0.18..0.36) * side;
    let ellipse = Ellipse {
        cx,
        cy,
        a,
        b: a * rng.random_range(0.6..1.0),
        theta: rng.random_range(0.0..PI),
    };
    let mut labels = vec![0u8; spec.width * spec.height];
    let centre = |i: usize| ((i % spec.width) as f64 + 0.5, (i / spec.width) as f64 + 0.5);
    match spec.shape {
        ShapeFamily::Ellipse => {
            for (i, l) in labels.iter_mut().enumerate() {
                let (x, y) = centre(i);
                *l = ellipse.contains(x, y) as u8;
            }
        }
        ShapeFamily::Blob => {
            let blob = Blob {
                cx,
                cy,
                r0: a * 0.9,
                harmonics: (2..=4)
                    .map(|m| (m as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..TAU)))
                    .collect(),
            };
            for (i, l) in labels.iter_mut().enumerate() {
                let (x, y) = centre(i);
                *l = blob.contains(x, y) as u8;
            }
        }
        ShapeFamily::Nested => {
            let shrink = rng.random_range(0.4..0.6);
            let cup = Ellipse {
                cx: cx + rng.random_range(-0.1..0.1) * ellipse.b,
                cy: cy + rng.random_range(-0.1..0.1) * ellipse.b,
                a: ellipse.a * shrink,
                b: ellipse.b * shrink,
                theta: ellipse.theta + rng.random_range(-0.3..0.3),
            };
            for (i, l) in labels.iter_mut().enumerate() {
                let (x, y) = centre(i);
                *l = if cup.contains(x, y) && ellipse.contains(x, y) {
                    2
                } else {
                    ellipse.contains(x, y) as u8
                };
            }
        }
    }
    labels
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping.
fn blur(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * values[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Renders one scene and its clean ground truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<(ImageTensor, LabelMask)> {
    if spec.width < 8 || spec.height < 8 {
        return Err(Error::Argument(format!("scene {}x{} is too small", spec.width, spec.height)));
    }
    if !(spec.contrast > 0.0 && spec.contrast <= 1.0) || spec.noise < 0.0 || spec.blur < 0.0 {
        return Err(Error::Argument(format!(
            "contrast {} / noise {} / blur {} out of range",
            spec.contrast, spec.noise, spec.blur
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.width * spec.height;
    let labels = (0..MAX_TRIES)
        .map(|_| draw_labels(spec, &mut rng))
        .find(|l| {
            let frac = l.iter().filter(|&&v| v > 0).count() as f64 / n as f64;
            (MIN_AREA..=MAX_AREA).contains(&frac) && (spec.shape != ShapeFamily::Nested || l.contains(&2))
        })
        .ok_or_else(|| {
            Error::Generation(format!(
                "no object within the {MIN_AREA}-{MAX_AREA} area band after {MAX_TRIES} draws (seed {})",
                spec.seed
            ))
        })?;
    let c = spec.shape.num_classes();
    let level: Vec<f64> = labels.iter().map(|&l| l as f64 / (c - 1) as f64).collect();
    let smooth = blur(&level, spec.width, spec.height, spec.blur);
    let background = 0.5 - spec.contrast / 2.0;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let values = smooth
        .iter()
        .map(|&s| {
            let eps = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (background + spec.contrast * s + eps).clamp(0.0, 1.0)
        })
        .collect();
    let image = ImageTensor::new(spec.width, spec.height, 1, values)?;
    let gt = LabelMask::new(spec.width, spec.height, c, labels)?;
    Ok((image, gt))
}

/// Systematic and random deviation of one simulated annotator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatorProfile {
    /// Outward (positive) or inward (negative) boundary shift in pixels.
    pub bias_radius: f64,
    pub jitter_amplitude: f64,
    /// Shortest jitter wavelength along the boundary, in pixels.
    pub jitter_scale: f64,
    pub seed: u64,
}

impl AnnotatorProfile {
    pub fn new(bias_radius: f64, jitter_amplitude: f64, jitter_scale: f64, seed: u64) -> Result<Self> {
        if jitter_amplitude < 0.0 || jitter_scale < 1.0 || !bias_radius.is_finite() {
            return Err(Error::Argument(format!(
                "annotator profile bias {bias_radius}, amplitude {jitter_amplitude}, scale {jitter_scale}"
            )));
        }
        Ok(Self {
            bias_radius,
            jitter_amplitude,
            jitter_scale,
            seed,
        })
    }

    /// Largest boundary displacement this profile can produce.
    pub fn reach(&self) -> f64 {
        self.bias_radius.abs() + self.jitter_amplitude
    }

    /// Same annotator, independent jitter for another image.
    pub fn for_sample(&self, sample: u64) -> Self {
        Self {
            seed: derive_seed(self.seed, sample),
            ..*self
        }
    }

    /// `k` annotators with biases spread evenly over `[-spread, spread]`.
    pub fn default_set(k: usize, seed: u64) -> Vec<Self> {
        const SPREAD: f64 = 1.5;
        (0..k)
            .map(|i| {
                let bias = if k == 1 {
                    0.0
                } else {
                    SPREAD * (2.0 * i as f64 / (k - 1) as f64 - 1.0)
                };
                Self {
                    bias_radius: bias,
                    jitter_amplitude: 1.0,
                    jitter_scale: 12.0,
                    seed: derive_seed(seed, 1000 + i as u64),
                }
            })
            .collect()
    }
}

/// Distance from every pixel centre to the nearest pixel on the other side
/// of the `inside` boundary, capped: pixels with nothing within `radius`
/// report `f64::INFINITY`.
pub fn boundary_distance(inside: &[bool], w: usize, h: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut out = vec![f64::INFINITY; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let me = inside[(y as usize) * w + x as usize];
            let mut best2 = i64::MAX;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    if inside[yy as usize * w + xx as usize] != me {
                        best2 = best2.min((dx * dx + dy * dy) as i64);
                    }
                }
            }
            if best2 != i64::MAX && (best2 as f64).sqrt() <= radius as f64 {
                out[y as usize * w + x as usize] = (best2 as f64).sqrt();
            }
        }
    }
    out
}

struct Jitter {
    cx: f64,
    cy: f64,
    terms: [(f64, f64); 3],
    amplitude: f64,
}

impl Jitter {
    fn new(inside: &[bool], w: usize, profile: &AnnotatorProfile, rng: &mut ChaCha8Rng) -> Self {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, _) in inside.iter().enumerate().filter(|(_, v)| **v) {
            sx += (i % w) as f64 + 0.5;
            sy += (i / w) as f64 + 0.5;
            n += 1;
        }
        let n = n.max(1) as f64;
        let perimeter = 2.0 * (PI * n).sqrt();
        let max_freq = ((perimeter / profile.jitter_scale).floor() as i64).max(1);
        let mut terms = [(0.0, 0.0); 3];
        for t in terms.iter_mut() {
            *t = (rng.random_range(1..=max_freq) as f64, rng.random_range(0.0..TAU));
        }
        Self {
            cx: sx / n,
            cy: sy / n,
            terms,
            amplitude: profile.jitter_amplitude,
        }
    }

    fn at(&self, i: usize, w: usize) -> f64 {
        let theta = ((i / w) as f64 + 0.5 - self.cy).atan2((i % w) as f64 + 0.5 - self.cx);
        self.amplitude * self.terms.iter().map(|(f, p)| (f * theta + p).sin()).sum::<f64>() / 3.0
    }
}

fn annotate_level(inside: &[bool], w: usize, h: usize, profile: &AnnotatorProfile, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let jitter = Jitter::new(inside, w, profile, rng);
    let reach = profile.reach();
    if reach == 0.0 {
        return inside.to_vec();
    }
    let dist = boundary_distance(inside, w, h, reach.ceil() as usize);
    (0..w * h)
        .map(|i| {
            let offset = profile.bias_radius + jitter.at(i, w);
            if inside[i] {
                dist[i] > -offset
            } else {
                dist[i] <= offset
            }
        })
        .collect()
}

/// One annotator's redrawing of `clean_gt`.
///
/// For each class level `{label >= c}` the boundary moves outwards by the
/// local offset (outside pixels within that distance of the object join it)
/// or inwards (inside pixels within that distance of the background leave
/// it). Levels stay nested so multi-class masks remain valid.
pub fn simulate_annotator(clean_gt: &LabelMask, profile: &AnnotatorProfile) -> LabelMask {
    let (w, h, c) = (clean_gt.width(), clean_gt.height(), clean_gt.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut labels = vec![0u8; w * h];
    let mut parent: Option<Vec<bool>> = None;
    for level in 1..c as u8 {
        let inside: Vec<bool> = clean_gt.labels().iter().map(|&l| l >= level).collect();
        let mut drawn = annotate_level(&inside, w, h, profile, &mut rng);
        if let Some(p) = &parent {
            drawn.iter_mut().zip(p).for_each(|(d, &pv)| *d &= pv);
        }
        for (l, &d) in labels.iter_mut().zip(&drawn) {
            *l += d as u8;
        }
        parent = Some(drawn);
    }
    LabelMask::new(w, h, c, labels).expect("levels are nested")
}

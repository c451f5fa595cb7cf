//! Pixel-classifier interface and the built-in reference network.
//!
//! The reference network is a stack of zero-padded convolutions with ReLU
//! between layers; the default stack is 3x3 (in->8), 3x3 (8->8), 1x1 (8->C).
//! Each input channel is standardized per image before the first layer.
//! Gradients are computed by hand, layer by layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Input image, stored channel-major (`values[(c * height + y) * width + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}x{channels}")));
        }
        if values.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite image intensity".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Each channel shifted to zero mean and scaled to unit standard
    /// deviation (constant channels are only shifted).
    pub fn standardized(&self) -> ImageTensor {
        let plane = self.width * self.height;
        let mut values = self.values.clone();
        for ch in values.chunks_mut(plane) {
            let n = plane as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let sd = (ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
            ch.iter_mut().for_each(|v| *v = (*v - mean) * scale);
        }
        ImageTensor { values, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square, odd kernel side.
    pub kernel: usize,
}

impl ConvLayer {
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_channels
    }
}

/// Layer stack of a convolutional pixel classifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    layers: Vec<ConvLayer>,
}

pub const REFERENCE_HIDDEN: usize = 8;

impl ArchDescriptor {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("architecture needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.kernel % 2 == 0 || l.in_channels == 0 || l.out_channels == 0 {
                return Err(Error::Argument(format!("layer {i} is malformed: {l:?}")));
            }
        }
        for w in layers.windows(2) {
            if w[0].out_channels != w[1].in_channels {
                return Err(Error::Argument(format!(
                    "layer outputs {} channels but the next expects {}",
                    w[0].out_channels, w[1].in_channels
                )));
            }
        }
        if layers.last().map(|l| l.out_channels).unwrap_or(0) < 2 {
            return Err(Error::Argument("final layer must produce at least 2 classes".into()));
        }
        Ok(Self { layers })
    }

    /// conv 3x3 (in->8) + ReLU, conv 3x3 (8->8) + ReLU, conv 1x1 (8->C).
    pub fn reference(in_channels: usize, num_classes: usize) -> Result<Self> {
        Self::new(vec![
            ConvLayer {
                in_channels,
                out_channels: REFERENCE_HIDDEN,
                kernel: 3,
            },
            ConvLayer {
                in_channels: REFERENCE_HIDDEN,
                out_channels: REFERENCE_HIDDEN,
                kernel: 3,
            },
            ConvLayer {
                in_channels: REFERENCE_HIDDEN,
                out_channels: num_classes,
                kernel: 1,
            },
        ])
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Start offset of each layer's block in the flat parameter vector.
    /// Each block is the weights `[out][in][ky][kx]` followed by the biases.
    pub fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.param_count();
                Some(start)
            })
            .collect()
    }
}

/// Flat parameter vector for an architecture, plus the seed it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchDescriptor,
    values: Vec<f64>,
    seed: u64,
}

impl ModelParams {
    pub fn new(arch: ArchDescriptor, values: Vec<f64>, seed: u64) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture needing {}",
                values.len(),
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(Self { arch, values, seed })
    }

    pub fn zeros(arch: ArchDescriptor) -> Self {
        let n = arch.param_count();
        Self {
            arch,
            values: vec![0.0; n],
            seed: 0,
        }
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Uniform fan-in initialisation: weights are drawn from `U(-b, b)` with
/// `b = sqrt(1 / fan_in)`, biases start at zero.
pub fn init_params(arch: &ArchDescriptor, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for l in arch.layers() {
        let bound = (1.0 / l.fan_in() as f64).sqrt();
        values.extend((0..l.weight_count()).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, l.out_channels));
    }
    ModelParams {
        arch: arch.clone(),
        values,
        seed,
    }
}

/// A differentiable per-pixel classifier. Logits and their gradients are
/// pixel-major (`logits[i * C + c]`) so they line up with [`crate::ProbMap`].
pub trait PixelClassifier: Send + Sync {
    type Cache: Send + Sync;

    fn arch(&self) -> &ArchDescriptor;

    fn init(&self, seed: u64) -> ModelParams {
        init_params(self.arch(), seed)
    }

    fn forward(&self, params: &ModelParams, image: &ImageTensor) -> Result<(Vec<f64>, Self::Cache)>;

    /// Parameter gradient of a scalar loss whose gradient with respect to
    /// the logits of the cached forward pass is `grad_logits`.
    fn backward(&self, cache: &Self::Cache, grad_logits: &[f64]) -> Result<Vec<f64>>;
}

/// The built-in convolutional classifier.
#[derive(Debug, Clone)]
pub struct ConvNet {
    arch: ArchDescriptor,
}

impl ConvNet {
    pub fn new(arch: ArchDescriptor) -> Self {
        Self { arch }
    }

    pub fn reference(in_channels: usize, num_classes: usize) -> Result<Self> {
        Ok(Self::new(ArchDescriptor::reference(in_channels, num_classes)?))
    }
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    arch: ArchDescriptor,
    params: Vec<f64>,
    width: usize,
    height: usize,
    /// `activations[0]` is the input; `activations[l]` is the ReLU output of
    /// layer `l - 1`. The final (linear) layer's output is not stored.
    activations: Vec<Vec<f64>>,
}

impl ConvCache {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Which hidden units were active, over all hidden layers.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.activations[1..].iter().flatten().map(|&a| a > 0.0).collect()
    }
}

struct Grid {
    w: usize,
    h: usize,
}

/// out[o] += conv(input, weights[o]) + bias[o], zero padding.
fn conv_forward(layer: &ConvLayer, block: &[f64], input: &[f64], g: &Grid, out: &mut [f64]) {
    let (k, cin, cout) = (layer.kernel, layer.in_channels, layer.out_channels);
    let pad = k / 2;
    let plane = g.w * g.h;
    let (weights, bias) = block.split_at(layer.weight_count());
    for o in 0..cout {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    accumulate_shifted(out_plane, in_plane, g, ky as isize - pad as isize, kx as isize - pad as isize, wv);
                }
            }
        }
    }
}

/// dst[y][x] += scale * src[y + dy][x + dx] wherever the source is in bounds.
#[inline]
fn accumulate_shifted(dst: &mut [f64], src: &[f64], g: &Grid, dy: isize, dx: isize, scale: f64) {
    let (w, h) = (g.w as isize, g.h as isize);
    let y0 = (-dy).max(0);
    let y1 = (h - dy).min(h);
    let x0 = (-dx).max(0);
    let x1 = (w - dx).min(w);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let d = &mut dst[(y * w + x0) as usize..(y * w + x1) as usize];
        let s0 = ((y + dy) * w + x0 + dx) as usize;
        let s = &src[s0..s0 + d.len()];
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += scale * sv;
        }
    }
}

/// Sum over the overlap of a[y][x] * b[y + dy][x + dx].
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], g: &Grid, dy: isize, dx: isize) -> f64 {
    let (w, h) = (g.w as isize, g.h as isize);
    let y0 = (-dy).max(0);
    let y1 = (h - dy).min(h);
    let x0 = (-dx).max(0);
    let x1 = (w - dx).min(w);
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let ar = &a[(y * w + x0) as usize..(y * w + x1) as usize];
        let b0 = ((y + dy) * w + x0 + dx) as usize;
        let br = &b[b0..b0 + ar.len()];
        acc += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
    }
    acc
}

/// Accumulates the layer's parameter gradient into `grad_block` and, when
/// requested, the input gradient into `grad_input`.
fn conv_backward(
    layer: &ConvLayer,
    block: &[f64],
    input: &[f64],
    grad_out: &[f64],
    g: &Grid,
    grad_block: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let (k, cin, cout) = (layer.kernel, layer.in_channels, layer.out_channels);
    let pad = k as isize / 2;
    let plane = g.w * g.h;
    let nw = layer.weight_count();
    let weights = &block[..nw];
    let (gw, gb) = grad_block.split_at_mut(nw);
    for o in 0..cout {
        let go = &grad_out[o * plane..(o + 1) * plane];
        gb[o] += go.iter().sum::<f64>();
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    let idx = ((o * cin + i) * k + ky) * k + kx;
                    gw[idx] += shifted_dot(go, in_plane, g, dy, dx);
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let wv = weights[idx];
                        if wv != 0.0 {
                            // grad_in[y + dy][x + dx] += w * grad_out[y][x]
                            accumulate_shifted(&mut gi[i * plane..(i + 1) * plane], go, g, -dy, -dx, wv);
                        }
                    }
                }
            }
        }
    }
}

fn to_pixel_major(channel_major: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; channel_major.len()];
    for c in 0..channels {
        for p in 0..plane {
            out[p * channels + c] = channel_major[c * plane + p];
        }
    }
    out
}

fn to_channel_major(pixel_major: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixel_major.len()];
    for p in 0..plane {
        for c in 0..channels {
            out[c * plane + p] = pixel_major[p * channels + c];
        }
    }
    out
}

impl PixelClassifier for ConvNet {
    type Cache = ConvCache;

    fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    fn forward(&self, params: &ModelParams, image: &ImageTensor) -> Result<(Vec<f64>, ConvCache)> {
        if params.arch != self.arch {
            return Err(Error::Shape("parameters belong to a different architecture".into()));
        }
        if image.channels != self.arch.in_channels() {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                image.channels,
                self.arch.in_channels()
            )));
        }
        let g = Grid {
            w: image.width,
            h: image.height,
        };
        let plane = g.w * g.h;
        let offsets = self.arch.offsets();
        let layers = self.arch.layers();
        let mut activations = vec![image.standardized().values];
        let mut out = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            let block = &params.values[offsets[l]..offsets[l] + layer.param_count()];
            out = vec![0.0; layer.out_channels * plane];
            conv_forward(layer, block, &activations[l], &g, &mut out);
            if l + 1 < layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                activations.push(std::mem::take(&mut out));
            }
        }
        let logits = to_pixel_major(&out, self.arch.num_classes(), plane);
        let cache = ConvCache {
            arch: self.arch.clone(),
            params: params.values.clone(),
            width: g.w,
            height: g.h,
            activations,
        };
        Ok((logits, cache))
    }

    fn backward(&self, cache: &ConvCache, grad_logits: &[f64]) -> Result<Vec<f64>> {
        if cache.arch != self.arch {
            return Err(Error::Usage("cache was produced by a different architecture".into()));
        }
        let g = Grid {
            w: cache.width,
            h: cache.height,
        };
        let plane = g.w * g.h;
        let c = self.arch.num_classes();
        if grad_logits.len() != plane * c {
            return Err(Error::Usage(format!(
                "logit gradient of length {} does not match the cached {}x{}x{} forward pass",
                grad_logits.len(),
                g.w,
                g.h,
                c
            )));
        }
        let offsets = self.arch.offsets();
        let layers = self.arch.layers();
        let mut grad = vec![0.0; self.arch.param_count()];
        let mut grad_out = to_channel_major(grad_logits, c, plane);
        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let range = offsets[l]..offsets[l] + layer.param_count();
            let block = &cache.params[range.clone()];
            let input = &cache.activations[l];
            if l == 0 {
                conv_backward(layer, block, input, &grad_out, &g, &mut grad[range], None);
            } else {
                let mut grad_in = vec![0.0; layer.in_channels * plane];
                conv_backward(layer, block, input, &grad_out, &g, &mut grad[range], Some(&mut grad_in));
                // ReLU: the stored activation is positive exactly where the
                // pre-activation was.
                for (gv, &a) in grad_in.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                }
                grad_out = grad_in;
            }
        }
        Ok(grad)
    }
}

//! Set algebra over label masks.
//!
//! Pixels are addressed row-major (`index = y * width + x`). Every set
//! produced here is a sorted list of pixel indices, so intersections are
//! linear merges and results are independent of how they were computed.
//! Empty sets are ordinary values; the losses downstream treat them as a
//! zero contribution.

use crate::error::{Error, Result};
use crate::loss::ProbMap;

/// Per-pixel class assignment for one annotator or one network's hard
/// prediction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::Argument(format!(
                "num_classes must be in 2..=256, got {num_classes}"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels for a {width}x{height} grid",
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::Argument(format!(
                "label {} at pixel {pos} is not below num_classes {num_classes}",
                labels[pos]
            )));
        }
        Ok(Self {
            width,
            height,
            num_classes,
            labels,
        })
    }

    /// Mask with every pixel set to `label`.
    pub fn filled(width: usize, height: usize, num_classes: usize, label: u8) -> Result<Self> {
        Self::new(width, height, num_classes, vec![label; width * height])
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

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    /// Number of pixels carrying `class`.
    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub(crate) fn check_same_shape(&self, other: &LabelMask) -> Result<()> {
        if self.width != other.width
            || self.height != other.height
            || self.num_classes != other.num_classes
        {
            return Err(Error::Shape(format!(
                "mask {}x{} (C={}) vs {}x{} (C={})",
                self.width, self.height, self.num_classes, other.width, other.height, other.num_classes
            )));
        }
        Ok(())
    }
}

/// Strictly increasing set of pixel indices on a grid of `grid_size` pixels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PixelSet {
    indices: Vec<usize>,
    grid_size: usize,
}

impl PixelSet {
    pub fn new(indices: Vec<usize>, grid_size: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("pixel indices must be strictly increasing".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= grid_size {
                return Err(Error::Argument(format!(
                    "pixel index {last} outside grid of {grid_size}"
                )));
            }
        }
        Ok(Self { indices, grid_size })
    }

    pub fn empty(grid_size: usize) -> Self {
        Self {
            indices: Vec::new(),
            grid_size,
        }
    }

    pub fn full(grid_size: usize) -> Self {
        Self {
            indices: (0..grid_size).collect(),
            grid_size,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

/// Pixel set with one class label attached to each member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseLabels {
    pixels: PixelSet,
    labels: Vec<u8>,
    num_classes: usize,
}

impl SparseLabels {
    pub fn new(pixels: PixelSet, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if labels.len() != pixels.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} pixels",
                labels.len(),
                pixels.len()
            )));
        }
        if labels.iter().any(|&l| l as usize >= num_classes) {
            return Err(Error::Argument(format!(
                "sparse label not below num_classes {num_classes}"
            )));
        }
        Ok(Self {
            pixels,
            labels,
            num_classes,
        })
    }

    pub fn empty(grid_size: usize, num_classes: usize) -> Self {
        Self {
            pixels: PixelSet::empty(grid_size),
            labels: Vec::new(),
            num_classes,
        }
    }

    /// Every pixel of `mask` with its label.
    pub fn from_mask(mask: &LabelMask) -> Self {
        Self {
            pixels: PixelSet::full(mask.len()),
            labels: mask.labels.clone(),
            num_classes: mask.num_classes,
        }
    }

    pub fn pixels(&self) -> &PixelSet {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn grid_size(&self) -> usize {
        self.pixels.grid_size
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.pixels.indices.iter().copied().zip(self.labels.iter().copied())
    }
}

/// Pixels where two masks carry the same label.
fn equal_pixels(a: &LabelMask, b: &LabelMask) -> (SparseLabels, PixelSet) {
    let n = a.len();
    let mut agree_idx = Vec::new();
    let mut agree_lab = Vec::new();
    let mut disagree = Vec::new();
    for (i, (&la, &lb)) in a.labels.iter().zip(&b.labels).enumerate() {
        if la == lb {
            agree_idx.push(i);
            agree_lab.push(la);
        } else {
            disagree.push(i);
        }
    }
    let agree = SparseLabels {
        pixels: PixelSet {
            indices: agree_idx,
            grid_size: n,
        },
        labels: agree_lab,
        num_classes: a.num_classes,
    };
    (
        agree,
        PixelSet {
            indices: disagree,
            grid_size: n,
        },
    )
}

/// Splits two annotations into the pixels they agree on (with the shared
/// label) and the pixels they disagree on. The two sets partition the grid.
pub fn separate_agreement(a: &LabelMask, b: &LabelMask) -> Result<(SparseLabels, PixelSet)> {
    a.check_same_shape(b)?;
    Ok(equal_pixels(a, b))
}

/// Pixel-wise argmax over classes; ties go to the lowest class index.
pub fn argmax_mask(p: &ProbMap) -> LabelMask {
    let c = p.num_classes();
    let labels = p
        .probs()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for k in 1..c {
                if px[k] > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask {
        width: p.width(),
        height: p.height(),
        num_classes: c,
        labels,
    }
}

/// Pixels where two predicted masks coincide, labelled with the shared class.
pub fn consistency_set(pred_a: &LabelMask, pred_b: &LabelMask) -> Result<SparseLabels> {
    pred_a.check_same_shape(pred_b)?;
    Ok(equal_pixels(pred_a, pred_b).0)
}

/// Keeps the entries of `consistent` whose pixel lies in `disagree`.
pub fn restrict(consistent: &SparseLabels, disagree: &PixelSet) -> Result<SparseLabels> {
    if consistent.grid_size() != disagree.grid_size {
        return Err(Error::Shape(format!(
            "grid sizes {} and {}",
            consistent.grid_size(),
            disagree.grid_size
        )));
    }
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let (ci, di) = (&consistent.pixels.indices, &disagree.indices);
    let (mut a, mut b) = (0, 0);
    while a < ci.len() && b < di.len() {
        match ci[a].cmp(&di[b]) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                indices.push(ci[a]);
                labels.push(consistent.labels[a]);
                a += 1;
                b += 1;
            }
        }
    }
    Ok(SparseLabels {
        pixels: PixelSet {
            indices,
            grid_size: disagree.grid_size,
        },
        labels,
        num_classes: consistent.num_classes,
    })
}

/// Pixels on which every mask in `masks` carries the same label.
///
/// A single mask is trivially unanimous everywhere, so with two networks the
/// peer's whole prediction becomes the pseudo-label.
pub fn consensus_set(masks: &[&LabelMask]) -> Result<SparseLabels> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::Argument("consensus over an empty mask list".into()))?;
    for m in rest {
        first.check_same_shape(m)?;
    }
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in first.labels.iter().enumerate() {
        if rest.iter().all(|m| m.labels[i] == l) {
            indices.push(i);
            labels.push(l);
        }
    }
    Ok(SparseLabels {
        pixels: PixelSet {
            indices,
            grid_size: first.len(),
        },
        labels,
        num_classes: first.num_classes,
    })
}

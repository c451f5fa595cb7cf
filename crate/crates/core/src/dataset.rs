//! Sample types and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.tsv` plus `images/*.tns`,
//! `masks/*.pgm` and `gt/*.pgm`. Manifest columns are
//! `id split image masks gt k`, with `masks` a comma-separated list and `-`
//! for an absent field. Splits are `multi`, `unannotated`, `val`, `test`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{fuse_annotations, FusionStrategy};
use crate::io::{read_image, read_mask, write_image, write_mask};
use crate::mask::LabelMask;
use crate::model::ImageTensor;
use crate::synth::{derive_seed, generate_scene, simulate_annotator, AnnotatorProfile, SceneSpec, ShapeFamily};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "id\tsplit\timage\tmasks\tgt\tk";

#[derive(Debug, Clone, PartialEq)]
pub struct MultiAnnotatedSample {
    pub id: String,
    pub image: ImageTensor,
    pub annotations: Vec<LabelMask>,
    pub clean_gt: Option<LabelMask>,
}

impl MultiAnnotatedSample {
    pub fn new(id: impl Into<String>, image: ImageTensor, annotations: Vec<LabelMask>, clean_gt: Option<LabelMask>) -> Result<Self> {
        let id = id.into();
        let first = annotations
            .first()
            .ok_or_else(|| Error::Argument(format!("sample {id} has no annotations")))?;
        for m in annotations.iter().chain(clean_gt.iter()) {
            first.check_same_shape(m)?;
        }
        if (first.width(), first.height()) != (image.width(), image.height()) {
            return Err(Error::Shape(format!(
                "sample {id}: masks {}x{} vs image {}x{}",
                first.width(),
                first.height(),
                image.width(),
                image.height()
            )));
        }
        Ok(Self {
            id,
            image,
            annotations,
            clean_gt,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.annotations[0].num_classes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnannotatedSample {
    pub id: String,
    pub image: ImageTensor,
}

/// Test image with its clean reference.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: ImageTensor,
    pub gt: LabelMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Multi,
    Unannotated,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Multi => "multi",
            Split::Unannotated => "unannotated",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Split::Multi, Split::Unannotated, Split::Val, Split::Test]
            .into_iter()
            .find(|sp| sp.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub masks: Vec<String>,
    pub gt: Option<String>,
    pub k: usize,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        let masks = if e.masks.is_empty() { "-".to_string() } else { e.masks.join(",") };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.split.name(),
            e.image,
            masks,
            e.gt.as_deref().unwrap_or("-"),
            e.k
        );
    }
    out
}

pub fn parse_manifest(text: &str) -> std::result::Result<Vec<ManifestEntry>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(format!("first line must be {MANIFEST_HEADER:?}"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(format!("line {}: expected 6 fields, found {}", n + 2, f.len()));
            }
            let split = Split::parse(f[1]).ok_or_else(|| format!("line {}: unknown split {:?}", n + 2, f[1]))?;
            let masks: Vec<String> = if f[3] == "-" { Vec::new() } else { f[3].split(',').map(String::from).collect() };
            let k = f[5].parse::<usize>().map_err(|_| format!("line {}: bad k {:?}", n + 2, f[5]))?;
            if masks.len() != k {
                return Err(format!("line {}: k = {k} but {} masks listed", n + 2, masks.len()));
            }
            Ok(ManifestEntry {
                id: f[0].to_string(),
                split,
                image: f[2].to_string(),
                masks,
                gt: (f[4] != "-").then(|| f[4].to_string()),
                k,
            })
        })
        .collect()
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub shape: ShapeFamily,
    pub n_multi: usize,
    pub n_unann: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub profiles: Vec<AnnotatorProfile>,
    pub contrast: (f64, f64),
    pub noise: (f64, f64),
    pub blur: (f64, f64),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(n_multi: usize, n_unann: usize, n_val: usize, n_test: usize, k: usize, seed: u64) -> Self {
        Self {
            width: 64,
            height: 64,
            shape: ShapeFamily::Ellipse,
            n_multi,
            n_unann,
            n_val,
            n_test,
            profiles: AnnotatorProfile::default_set(k, seed),
            contrast: (0.25, 0.6),
            noise: (0.06, 0.12),
            blur: (1.0, 2.0),
            seed,
        }
    }

    pub fn k(&self) -> usize {
        self.profiles.len()
    }

    fn scene(&self, index: usize) -> SceneSpec {
        use rand::Rng;
        let seed = derive_seed(self.seed, index as u64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA11CE));
        let mut pick = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        SceneSpec {
            width: self.width,
            height: self.height,
            shape: self.shape,
            contrast: pick(self.contrast),
            noise: pick(self.noise),
            blur: pick(self.blur),
            seed,
        }
    }
}

/// In-memory dataset, either freshly generated or loaded from disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub multi: Vec<MultiAnnotatedSample>,
    pub unannotated: Vec<UnannotatedSample>,
    pub val: Vec<MultiAnnotatedSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    /// Generates every split in memory. Scene `i` (counted across splits in
    /// the order multi, unannotated, val, test) depends only on `seed` and `i`.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        if spec.k() == 0 && spec.n_multi + spec.n_val > 0 {
            return Err(Error::Argument("annotated splits need at least one annotator profile".into()));
        }
        let mut ds = Dataset::default();
        let mut index = 0usize;
        let mut next = |split: Split| -> Result<(String, ImageTensor, LabelMask, usize)> {
            let i = index;
            index += 1;
            let (img, gt) = generate_scene(&spec.scene(i))?;
            Ok((format!("{}{:04}", &split.name()[..1], i), img, gt, i))
        };
        let annotate = |gt: &LabelMask, i: usize| -> Vec<LabelMask> {
            spec.profiles
                .iter()
                .map(|p| simulate_annotator(gt, &p.for_sample(i as u64)))
                .collect()
        };
        for _ in 0..spec.n_multi {
            let (id, img, gt, i) = next(Split::Multi)?;
            let ann = annotate(&gt, i);
            ds.multi.push(MultiAnnotatedSample::new(id, img, ann, Some(gt))?);
        }
        for _ in 0..spec.n_unann {
            let (id, image, _, _) = next(Split::Unannotated)?;
            ds.unannotated.push(UnannotatedSample { id, image });
        }
        for _ in 0..spec.n_val {
            let (id, img, gt, i) = next(Split::Val)?;
            let ann = annotate(&gt, i);
            ds.val.push(MultiAnnotatedSample::new(id, img, ann, None)?);
        }
        for _ in 0..spec.n_test {
            let (id, image, gt, _) = next(Split::Test)?;
            ds.test.push(LabeledSample { id, image, gt });
        }
        Ok(ds)
    }

    /// Writes the dataset under `dir` and returns the manifest entries.
    pub fn write(&self, dir: &Path) -> Result<Vec<ManifestEntry>> {
        for sub in ["images", "masks", "gt"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::new();
        let annotated = |split: Split, s: &MultiAnnotatedSample, entries: &mut Vec<ManifestEntry>| -> Result<()> {
            let image = format!("images/{}.tns", s.id);
            write_image(&dir.join(&image), &s.image)?;
            let mut masks = Vec::new();
            for (k, m) in s.annotations.iter().enumerate() {
                let rel = format!("masks/{}_a{k}.pgm", s.id);
                write_mask(&dir.join(&rel), m)?;
                masks.push(rel);
            }
            let gt = match (&s.clean_gt, split) {
                (Some(g), Split::Multi) => {
                    let rel = format!("gt/{}.pgm", s.id);
                    write_mask(&dir.join(&rel), g)?;
                    Some(rel)
                }
                _ => None,
            };
            entries.push(ManifestEntry {
                id: s.id.clone(),
                split,
                image,
                k: masks.len(),
                masks,
                gt,
            });
            Ok(())
        };
        for s in &self.multi {
            annotated(Split::Multi, s, &mut entries)?;
        }
        for s in &self.unannotated {
            let image = format!("images/{}.tns", s.id);
            write_image(&dir.join(&image), &s.image)?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                split: Split::Unannotated,
                image,
                masks: Vec::new(),
                gt: None,
                k: 0,
            });
        }
        for s in &self.val {
            annotated(Split::Val, s, &mut entries)?;
        }
        for s in &self.test {
            let image = format!("images/{}.tns", s.id);
            let gt = format!("gt/{}.pgm", s.id);
            write_image(&dir.join(&image), &s.image)?;
            write_mask(&dir.join(&gt), &s.gt)?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                split: Split::Test,
                image,
                masks: Vec::new(),
                gt: Some(gt),
                k: 0,
            });
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, format_manifest(&entries)).map_err(|e| Error::io(&path, e))?;
        Ok(entries)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = parse_manifest(&text).map_err(|e| Error::format(&path, e))?;
        let mut ds = Dataset::default();
        let resolve = |rel: &str| -> PathBuf { dir.join(rel) };
        for e in entries {
            let image = read_image(&resolve(&e.image))?;
            let masks = e
                .masks
                .iter()
                .map(|m| read_mask(&resolve(m)))
                .collect::<Result<Vec<_>>>()?;
            let gt = e.gt.as_deref().map(|g| read_mask(&resolve(g))).transpose()?;
            let bad = |what: &str| Error::format(&path, format!("sample {} in split {}: {what}", e.id, e.split.name()));
            match e.split {
                Split::Multi | Split::Val => {
                    if masks.is_empty() {
                        return Err(bad("no annotation masks"));
                    }
                    let s = MultiAnnotatedSample::new(e.id.clone(), image, masks, gt)
                        .map_err(|err| bad(&err.to_string()))?;
                    if e.split == Split::Multi {
                        ds.multi.push(s);
                    } else {
                        ds.val.push(s);
                    }
                }
                Split::Unannotated => ds.unannotated.push(UnannotatedSample { id: e.id, image }),
                Split::Test => {
                    let gt = gt.ok_or_else(|| bad("test sample without ground truth"))?;
                    if (gt.width(), gt.height()) != (image.width(), image.height()) {
                        return Err(bad("ground truth does not match the image size"));
                    }
                    ds.test.push(LabeledSample { id: e.id, image, gt });
                }
            }
        }
        Ok(ds)
    }

    /// Copy with every annotated sample's masks collapsed to one by
    /// `strategy`. Sample `i` of a split draws from `derive_seed(seed, i)`,
    /// offset per split so the draws do not repeat.
    pub fn fused(&self, strategy: FusionStrategy, seed: u64) -> Result<Self> {
        let fuse_split = |split: &[MultiAnnotatedSample], stream: u64| -> Result<Vec<MultiAnnotatedSample>> {
            split
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, stream), i as u64));
                    let m = fuse_annotations(strategy, &s.annotations.iter().collect::<Vec<_>>(), &mut rng)?;
                    MultiAnnotatedSample::new(s.id.clone(), s.image.clone(), vec![m], s.clean_gt.clone())
                })
                .collect()
        };
        Ok(Self {
            multi: fuse_split(&self.multi, 0)?,
            unannotated: self.unannotated.clone(),
            val: fuse_split(&self.val, 1)?,
            test: self.test.clone(),
        })
    }

    /// Annotator count shared by the annotated splits, if consistent.
    pub fn k(&self) -> Option<usize> {
        let mut ks = self.multi.iter().chain(&self.val).map(|s| s.annotations.len());
        let first = ks.next()?;
        ks.all(|k| k == first).then_some(first)
    }
}

/// Generates and writes a dataset in one go.
pub fn build_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    Dataset::generate(spec)?.write(dir)
}

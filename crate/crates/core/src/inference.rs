//! Prediction with a trained ensemble: per-network probability maps, average
//! fusion, and scoring against reference masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{LabeledSample, MultiAnnotatedSample};
use crate::error::{Error, Result};
use crate::fusion::{average_fuse, fuse_annotations, FusionStrategy};
use crate::loss::ProbMap;
use crate::mask::{argmax_mask, LabelMask};
use crate::metrics::{agreement_fraction, EvalReport};
use crate::model::{ImageTensor, ModelParams, PixelClassifier};

/// Softmax output of every network on `image`.
pub fn network_probs<M: PixelClassifier>(model: &M, params: &[ModelParams], image: &ImageTensor) -> Result<Vec<ProbMap>> {
    if params.is_empty() {
        return Err(Error::Argument("no networks to predict with".into()));
    }
    params
        .iter()
        .map(|p| {
            let (logits, _) = model.forward(p, image)?;
            ProbMap::from_logits(image.width(), image.height(), model.arch().num_classes(), logits)
        })
        .collect()
}

/// Argmax of the averaged probability maps, plus each network's own mask.
pub fn predict<M: PixelClassifier>(
    model: &M,
    params: &[ModelParams],
    image: &ImageTensor,
) -> Result<(LabelMask, Vec<LabelMask>)> {
    let maps = network_probs(model, params, image)?;
    let fused = argmax_mask(&average_fuse(&maps.iter().collect::<Vec<_>>())?);
    Ok((fused, maps.iter().map(argmax_mask).collect()))
}

/// Fused and per-network reports over `(image, reference)` pairs.
pub fn evaluate_pairs<M: PixelClassifier>(
    model: &M,
    params: &[ModelParams],
    pairs: &[(&ImageTensor, &LabelMask)],
) -> Result<(EvalReport, Vec<EvalReport>)> {
    let mut fused = Vec::with_capacity(pairs.len());
    let mut single: Vec<Vec<LabelMask>> = vec![Vec::with_capacity(pairs.len()); params.len()];
    for (img, _) in pairs {
        let (f, nets) = predict(model, params, img)?;
        fused.push(f);
        for (k, m) in nets.into_iter().enumerate() {
            single[k].push(m);
        }
    }
    let refs: Vec<&LabelMask> = pairs.iter().map(|(_, r)| *r).collect();
    let fused_report = EvalReport::evaluate("fused", fused.iter().zip(refs.iter().copied()))?;
    let per_net = single
        .iter()
        .enumerate()
        .map(|(k, masks)| EvalReport::evaluate(format!("net{k}"), masks.iter().zip(refs.iter().copied())))
        .collect::<Result<Vec<_>>>()?;
    Ok((fused_report, per_net))
}

/// Scores on test samples against their clean ground truth.
pub fn evaluate_ensemble<M: PixelClassifier>(
    model: &M,
    params: &[ModelParams],
    samples: &[LabeledSample],
) -> Result<(EvalReport, Vec<EvalReport>)> {
    let pairs: Vec<_> = samples.iter().map(|s| (&s.image, &s.gt)).collect();
    evaluate_pairs(model, params, &pairs)
}

/// Validation references: the annotations of each sample fused with
/// `strategy` (majority vote by default in training).
pub fn validation_references(
    val: &[MultiAnnotatedSample],
    strategy: FusionStrategy,
    seed: u64,
) -> Result<Vec<LabelMask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    val.iter()
        .map(|s| fuse_annotations(strategy, &s.annotations.iter().collect::<Vec<_>>(), &mut rng))
        .collect()
}

/// Mean foreground Jaccard of the fused and of each network's prediction
/// against the given references.
pub fn validation_scores<M: PixelClassifier>(
    model: &M,
    params: &[ModelParams],
    val: &[MultiAnnotatedSample],
    refs: &[LabelMask],
) -> Result<(f64, Vec<f64>)> {
    if val.len() != refs.len() {
        return Err(Error::Argument(format!("{} validation samples, {} references", val.len(), refs.len())));
    }
    let pairs: Vec<_> = val.iter().zip(refs).map(|(s, r)| (&s.image, r)).collect();
    let (fused, nets) = evaluate_pairs(model, params, &pairs)?;
    Ok((fused.mean_jaccard(), nets.iter().map(|r| r.mean_jaccard()).collect()))
}

/// Mean pairwise agreement between the networks' predictions over `images`,
/// and for each network its mean agreement with the others.
pub fn ensemble_agreement<M: PixelClassifier>(
    model: &M,
    params: &[ModelParams],
    images: &[&ImageTensor],
) -> Result<(f64, Vec<f64>)> {
    let n = params.len();
    let mut pair_sum = vec![vec![0.0; n]; n];
    for img in images {
        let masks: Vec<LabelMask> = network_probs(model, params, img)?.iter().map(argmax_mask).collect();
        for a in 0..n {
            for b in a + 1..n {
                let f = agreement_fraction(&masks[a], &masks[b])?;
                pair_sum[a][b] += f;
                pair_sum[b][a] += f;
            }
        }
    }
    let m = images.len().max(1) as f64;
    let pairs = (n * (n - 1) / 2).max(1) as f64;
    let total: f64 = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).map(|(a, b)| pair_sum[a][b]).sum();
    let per_net = (0..n)
        .map(|k| {
            if n < 2 {
                1.0
            } else {
                pair_sum[k].iter().sum::<f64>() / ((n - 1) as f64 * m)
            }
        })
        .collect();
    let overall = if n < 2 || images.is_empty() { 1.0 } else { total / (pairs * m) };
    Ok((overall, per_net))
}

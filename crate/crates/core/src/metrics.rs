//! Jaccard and Dice scores and inter-mask agreement.

use std::fmt;

use crate::error::{Error, Result};
use crate::mask::LabelMask;

fn class_counts(pred: &LabelMask, reference: &LabelMask, cls: u8) -> Result<(usize, usize, usize)> {
    pred.check_same_shape(reference)?;
    if cls as usize >= pred.num_classes() {
        return Err(Error::Argument(format!(
            "class {cls} outside 0..{}",
            pred.num_classes()
        )));
    }
    let (mut inter, mut np, mut nr) = (0, 0, 0);
    for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
        let (ip, ir) = (p == cls, r == cls);
        np += ip as usize;
        nr += ir as usize;
        inter += (ip && ir) as usize;
    }
    Ok((inter, np, nr))
}

/// Intersection over union for one class; 1.0 when neither mask has it.
pub fn jaccard(pred: &LabelMask, reference: &LabelMask, cls: u8) -> Result<f64> {
    let (inter, np, nr) = class_counts(pred, reference, cls)?;
    let union = np + nr - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2 |A ∩ B| / (|A| + |B|)` for one class; 1.0 when neither mask has it.
pub fn dice(pred: &LabelMask, reference: &LabelMask, cls: u8) -> Result<f64> {
    let (inter, np, nr) = class_counts(pred, reference, cls)?;
    Ok(if np + nr == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nr) as f64
    })
}

/// Fraction of pixels on which the two masks carry the same label.
pub fn agreement_fraction(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Ok(1.0);
    }
    let same = a.labels().iter().zip(b.labels()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Mean pairwise agreement over all unordered pairs of masks.
pub fn mean_pairwise_agreement(masks: &[LabelMask]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            total += agreement_fraction(&masks[i], &masks[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 1.0 } else { total / pairs as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub jaccard: f64,
    pub dice: f64,
}

/// Per-class scores averaged over samples, with the per-sample values kept.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub num_classes: usize,
    pub per_class: Vec<ClassScore>,
    pub per_sample: Vec<Vec<ClassScore>>,
}

impl EvalReport {
    pub fn evaluate<'a, I>(label: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a LabelMask, &'a LabelMask)>,
    {
        let mut per_sample = Vec::new();
        let mut num_classes = None;
        for (pred, reference) in pairs {
            let c = pred.num_classes();
            if *num_classes.get_or_insert(c) != c {
                return Err(Error::Shape("samples with differing class counts".into()));
            }
            let scores = (0..c as u8)
                .map(|cls| {
                    Ok(ClassScore {
                        jaccard: jaccard(pred, reference, cls)?,
                        dice: dice(pred, reference, cls)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            per_sample.push(scores);
        }
        let num_classes = num_classes.ok_or_else(|| Error::Argument("no samples to evaluate".into()))?;
        let n = per_sample.len() as f64;
        let per_class = (0..num_classes)
            .map(|c| ClassScore {
                jaccard: per_sample.iter().map(|s| s[c].jaccard).sum::<f64>() / n,
                dice: per_sample.iter().map(|s| s[c].dice).sum::<f64>() / n,
            })
            .collect();
        Ok(Self {
            label: label.into(),
            num_classes,
            per_class,
            per_sample,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.per_sample.len()
    }

    /// Mean Jaccard over the foreground classes (class 0 excluded).
    pub fn mean_jaccard(&self) -> f64 {
        let fg = &self.per_class[1..];
        fg.iter().map(|s| s.jaccard).sum::<f64>() / fg.len() as f64
    }

    pub fn mean_dice(&self) -> f64 {
        let fg = &self.per_class[1..];
        fg.iter().map(|s| s.dice).sum::<f64>() / fg.len() as f64
    }

    pub const CSV_HEADER: &'static str = "model,class,jaccard,dice,samples";

    /// One row per foreground class plus a `mean` row, without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (c, s) in self.per_class.iter().enumerate().skip(1) {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                self.label,
                c,
                s.jaccard,
                s.dice,
                self.sample_count()
            ));
        }
        out.push_str(&format!(
            "{},mean,{:.6},{:.6},{}\n",
            self.label,
            self.mean_jaccard(),
            self.mean_dice(),
            self.sample_count()
        ));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>6} {:>9} {:>9}", "model", "class", "jaccard", "dice")?;
        for (c, s) in self.per_class.iter().enumerate().skip(1) {
            writeln!(f, "{:<12} {:>6} {:>9.4} {:>9.4}", self.label, c, s.jaccard, s.dice)?;
        }
        write!(
            f,
            "{:<12} {:>6} {:>9.4} {:>9.4}",
            self.label,
            "mean",
            self.mean_jaccard(),
            self.mean_dice()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::separate_agreement;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strip(cols: usize) -> LabelMask {
        // 4 x 2 strip, left `cols` columns foreground
        let labels = (0..8).map(|i| ((i % 4) < cols) as u8).collect();
        LabelMask::new(4, 2, 2, labels).unwrap()
    }

    #[test]
    fn half_vs_three_quarters() {
        let (p, r) = (strip(2), strip(3));
        // hand count: intersection 2 columns, union 3 columns
        assert!((jaccard(&p, &r, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((dice(&p, &r, 1).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn identical_disjoint_and_empty() {
        let a = strip(2);
        let b = LabelMask::new(4, 2, 2, a.labels().iter().map(|l| 1 - l).collect()).unwrap();
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        let empty = strip(0);
        assert_eq!(jaccard(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(agreement_fraction(&a, &a).unwrap(), 1.0);
        assert_eq!(agreement_fraction(&a, &b).unwrap(), 0.0);
        assert!(jaccard(&a, &a, 2).is_err());
        assert!(jaccard(&a, &LabelMask::new(2, 4, 2, vec![0; 8]).unwrap(), 1).is_err());
    }

    #[test]
    fn report_means_skip_background() {
        let (p, r) = (strip(2), strip(3));
        let rep = EvalReport::evaluate("fused", [(&p, &r), (&r, &r)]).unwrap();
        assert_eq!(rep.sample_count(), 2);
        assert!((rep.mean_jaccard() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        let csv = rep.csv_rows();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("fused,1,0.833333,"));
        assert!(rep.to_string().contains("mean"));
    }

    proptest! {
        #[test]
        fn dice_jaccard_identity(seed in any::<u64>(), density in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gen = |rng: &mut ChaCha8Rng| LabelMask::new(7, 5, 3,
                (0..35).map(|_| if rng.random_bool(density) { rng.random_range(1..3) } else { 0 }).collect()).unwrap();
            let (a, b) = (gen(&mut rng), gen(&mut rng));
            for c in 0..3 {
                let j = jaccard(&a, &b, c).unwrap();
                let d = dice(&a, &b, c).unwrap();
                prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
                prop_assert_eq!(j, jaccard(&b, &a, c).unwrap());
                prop_assert_eq!(d, dice(&b, &a, c).unwrap());
            }
            let frac = agreement_fraction(&a, &b).unwrap();
            let (agree, _) = separate_agreement(&a, &b).unwrap();
            prop_assert_eq!(frac, agree.len() as f64 / 35.0);
            prop_assert_eq!(frac == 1.0, a == b);
        }
    }
}

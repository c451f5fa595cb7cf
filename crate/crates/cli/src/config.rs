//! Run configuration: a flat TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use msenets::fusion::FusionStrategy;
use msenets::trainer::{Selection, TrainConfig};
use serde::{Deserialize, Serialize};

/// Every key a config file may set. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub w_max: Option<f64>,
    pub lr: Option<f64>,
    pub lr_decay_every: Option<usize>,
    pub lr_decay_factor: Option<f64>,
    pub annotated_per_iter: Option<usize>,
    pub unannotated_batch: Option<usize>,
    pub total_iters: Option<usize>,
    pub validation_every: Option<usize>,
    pub seed: Option<u64>,
    pub use_pc: Option<bool>,
    pub use_ps: Option<bool>,
    pub use_unannotated: Option<bool>,
    /// Negative or absent means every network uses its own annotator.
    pub single_annotator: Option<i64>,
    pub selection: Option<String>,
    pub val_reference: Option<String>,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Values set in `over` replace those in `self`.
    pub fn merge(self, over: RunConfigFile) -> Self {
        macro_rules! pick {
            ($($f:ident),*) => { Self { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            data,
            out,
            k,
            alpha,
            beta,
            w_max,
            lr,
            lr_decay_every,
            lr_decay_factor,
            annotated_per_iter,
            unannotated_batch,
            total_iters,
            validation_every,
            seed,
            use_pc,
            use_ps,
            use_unannotated,
            single_annotator,
            selection,
            val_reference
        )
    }
}

/// A fully resolved training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Fills unset keys from the desk preset and checks the result.
    pub fn resolve(f: RunConfigFile) -> Result<Self, String> {
        let data = f.data.ok_or("no dataset given (--data or `data` key)")?;
        let out = f.out.ok_or("no output directory given (--out or `out` key)")?;
        let d = TrainConfig::desk(f.k.unwrap_or(2));
        let selection = match f.selection.as_deref() {
            None => d.selection,
            Some(s) => Selection::parse(s).ok_or_else(|| format!("unknown selection {s:?} (fused, per-network)"))?,
        };
        let val_reference = match f.val_reference.as_deref() {
            None => d.val_reference,
            Some(s) => s.parse::<FusionStrategy>().map_err(|e| e.to_string())?,
        };
        let train = TrainConfig {
            k: d.k,
            alpha: f.alpha.unwrap_or(d.alpha),
            beta: f.beta.unwrap_or(d.beta),
            w_max: f.w_max.unwrap_or(d.w_max),
            lr: f.lr.unwrap_or(d.lr),
            lr_decay_every: f.lr_decay_every.unwrap_or(d.lr_decay_every),
            lr_decay_factor: f.lr_decay_factor.unwrap_or(d.lr_decay_factor),
            annotated_per_iter: f.annotated_per_iter.unwrap_or(d.annotated_per_iter),
            unannotated_batch: f.unannotated_batch.unwrap_or(d.unannotated_batch),
            total_iters: f.total_iters.unwrap_or(d.total_iters),
            validation_every: f.validation_every.unwrap_or(d.validation_every),
            seed: f.seed.unwrap_or(d.seed),
            use_pc: f.use_pc.unwrap_or(d.use_pc),
            use_ps: f.use_ps.unwrap_or(d.use_ps),
            use_unannotated: f.use_unannotated.unwrap_or(d.use_unannotated),
            single_annotator: f.single_annotator.filter(|&i| i >= 0).map(|i| i as usize),
            selection,
            val_reference,
        };
        train.validate().map_err(|e| e.to_string())?;
        Ok(Self { data, out, train })
    }

    /// Flat TOML with every key spelled out.
    pub fn to_file(&self) -> RunConfigFile {
        let t = &self.train;
        RunConfigFile {
            data: Some(self.data.clone()),
            out: Some(self.out.clone()),
            k: Some(t.k),
            alpha: Some(t.alpha),
            beta: Some(t.beta),
            w_max: Some(t.w_max),
            lr: Some(t.lr),
            lr_decay_every: Some(t.lr_decay_every),
            lr_decay_factor: Some(t.lr_decay_factor),
            annotated_per_iter: Some(t.annotated_per_iter),
            unannotated_batch: Some(t.unannotated_batch),
            total_iters: Some(t.total_iters),
            validation_every: Some(t.validation_every),
            seed: Some(t.seed),
            use_pc: Some(t.use_pc),
            use_ps: Some(t.use_ps),
            use_unannotated: Some(t.use_unannotated),
            single_annotator: Some(t.single_annotator.map_or(-1, |i| i as i64)),
            selection: Some(t.selection.name().to_string()),
            val_reference: Some(t.val_reference.name().to_string()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("flat config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfigFile::parse("lr = 0.1\nlearning_rate = 2").is_err());
        assert!(RunConfigFile::parse("k = \"two\"").is_err());
        let f = RunConfigFile::parse("lr = 0.1\nuse_pc = false\n").unwrap();
        assert_eq!(f.lr, Some(0.1));
        assert_eq!(f.use_pc, Some(false));
    }

    #[test]
    fn overrides_win_and_resolve_roundtrips() {
        let file = RunConfigFile::parse("data = \"d\"\nout = \"o\"\nlr = 0.1\ntotal_iters = 7\n").unwrap();
        let flags = RunConfigFile {
            lr: Some(0.5),
            ..Default::default()
        };
        let rc = RunConfig::resolve(file.merge(flags)).unwrap();
        assert_eq!(rc.train.lr, 0.5);
        assert_eq!(rc.train.total_iters, 7);
        let again = RunConfig::resolve(RunConfigFile::parse(&rc.to_toml()).unwrap()).unwrap();
        assert_eq!(again, rc);
    }

    #[test]
    fn resolve_errors() {
        assert!(RunConfig::resolve(RunConfigFile::default()).is_err());
        let base = RunConfigFile {
            data: Some("d".into()),
            out: Some("o".into()),
            ..Default::default()
        };
        assert!(RunConfig::resolve(RunConfigFile {
            k: Some(1),
            ..base.clone()
        })
        .is_err());
        assert!(RunConfig::resolve(RunConfigFile {
            selection: Some("best".into()),
            ..base.clone()
        })
        .is_err());
        assert!(RunConfig::resolve(base).is_ok());
    }
}

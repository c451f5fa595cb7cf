//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use msenets::dataset::{build_dataset, Dataset, DatasetSpec, MANIFEST_FILE};
use msenets::gradcheck::{run_grad_check, GradCheckConfig};
use msenets::inference::evaluate_ensemble;
use msenets::io::{read_checkpoint, write_checkpoint};
use msenets::metrics::EvalReport;
use msenets::model::{ConvNet, PixelClassifier};
use msenets::trainer::{run_training_logged, trace_csv, TrainData};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, RunConfigFile};
use crate::{CliError, EvalArgs, FuseArgs, GenDataArgs, GradCheckArgs, TrainArgs};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CHECKPOINT_MANIFEST: &str = "manifest.toml";

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn manifest_hash(data: &Path) -> Result<String, CliError> {
    let path = data.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.size < 8 {
        return Err(CliError::Usage(format!("--size {} is too small (minimum 8)", a.size)));
    }
    if a.k == 0 && a.n_multi + a.n_val > 0 {
        return Err(CliError::Usage("--k must be at least 1 when annotated splits are requested".into()));
    }
    let spec = DatasetSpec {
        width: a.size,
        height: a.size,
        shape: a.shape,
        ..DatasetSpec::new(a.n_multi, a.n_unann, a.n_val, a.n_test, a.k, a.seed)
    };
    let entries = build_dataset(&spec, &a.out)?;
    eprintln!("wrote {} samples to {}", entries.len(), a.out.display());
    Ok(())
}

/// Provenance of a run, written as `run.toml` next to the outputs.
#[derive(Debug, Serialize, Deserialize)]
struct RunInfo {
    version: String,
    config_sha256: String,
    data_manifest_sha256: String,
}

/// Describes the saved networks in a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: String,
    pub k: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub files: Vec<String>,
    pub seeds: Vec<u64>,
    pub best_iterations: Vec<usize>,
    pub best_scores: Vec<f64>,
    pub config_sha256: String,
    pub data_manifest_sha256: String,
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let file = match &a.config {
        Some(p) => RunConfigFile::load(p).map_err(CliError::Usage)?,
        None => RunConfigFile::default(),
    };
    let mut merged = file.merge(a.overrides());
    let data_dir = merged
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("no dataset given (--data or `data` key)".into()))?;
    if merged.out.is_none() {
        return Err(CliError::Usage("no output directory given (--out or `out` key)".into()));
    }
    let ds = Dataset::load(&data_dir)?;
    let k = ds
        .k()
        .ok_or_else(|| CliError::Runtime(format!("{}: no consistent annotator count", data_dir.display())))?;
    match merged.k {
        Some(want) if want != k => {
            return Err(CliError::Runtime(format!(
                "config asks for k = {want} but {} has {k} annotations per sample",
                data_dir.display()
            )))
        }
        _ => merged.k = Some(k),
    }
    let rc = RunConfig::resolve(merged).map_err(CliError::Usage)?;
    let first = ds.multi.first().ok_or_else(|| runtime("dataset has no multi-annotated samples"))?;
    let model = ConvNet::reference(first.image.channels(), first.num_classes())?;

    let out = &rc.out;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    mkdir(&ckpt_dir)?;
    let config_text = rc.to_toml();
    let config_sha256 = sha256_hex(config_text.as_bytes());
    let data_manifest_sha256 = manifest_hash(&data_dir)?;
    write(&out.join("config.toml"), &config_text)?;
    let info = RunInfo {
        version: VERSION.to_string(),
        config_sha256: config_sha256.clone(),
        data_manifest_sha256: data_manifest_sha256.clone(),
    };
    write(&out.join("run.toml"), toml::to_string(&info).map_err(runtime)?)?;

    let cfg = &rc.train;
    eprintln!(
        "training {} networks for {} iterations on {} ({} multi, {} unannotated, {} val)",
        cfg.k,
        cfg.total_iters,
        data_dir.display(),
        ds.multi.len(),
        ds.unannotated.len(),
        ds.val.len()
    );
    let data = TrainData {
        multi: &ds.multi,
        unannotated: &ds.unannotated,
        val: &ds.val,
    };
    let outcome = run_training_logged(&model, data, cfg, &mut |r| {
        eprintln!(
            "iter {:>6} total {:.6} l_ma {:.6} l_pc {:.6} l_ps {:.6} lambda {:.4} agreement {:.4} val_jaccard {:.4}",
            r.iter, r.losses.total, r.losses.l_ma, r.losses.l_pc, r.losses.l_ps, r.losses.lambda_t, r.agreement, r.val_jaccard
        )
    })?;
    write(&out.join("trace.csv"), trace_csv(&outcome.trace))?;
    write(&out.join("trace_networks.csv"), trace_csv(&outcome.network_trace))?;

    let best = &outcome.state.best;
    let mut files = Vec::new();
    for (k, p) in best.params.iter().enumerate() {
        let name = format!("net_{k}.msen");
        write_checkpoint(&ckpt_dir.join(&name), p)?;
        files.push(name);
    }
    let manifest = CheckpointManifest {
        version: VERSION.to_string(),
        k: cfg.k,
        in_channels: model.arch().in_channels(),
        num_classes: model.arch().num_classes(),
        files,
        seeds: best.params.iter().map(|p| p.seed()).collect(),
        best_iterations: best.iterations.clone(),
        best_scores: best.scores.clone(),
        config_sha256,
        data_manifest_sha256,
    };
    write(
        &ckpt_dir.join(CHECKPOINT_MANIFEST),
        toml::to_string(&manifest).map_err(runtime)?,
    )?;
    eprintln!(
        "kept iterations {:?} (validation scores {:?}); outputs in {}",
        best.iterations,
        best.scores,
        out.display()
    );
    Ok(())
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join(CHECKPOINT_DIR);
    if nested.join(CHECKPOINT_MANIFEST).is_file() {
        nested
    } else {
        p.to_path_buf()
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let dir = checkpoint_dir(&a.checkpoints);
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| CliError::Runtime(format!("{}: {e}", mpath.display())))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", mpath.display())))?;
    let mismatch = |what: String| CliError::Runtime(format!("checkpoint mismatch in {}: {what}", dir.display()));
    if manifest.files.len() != manifest.k || manifest.k == 0 {
        return Err(mismatch(format!("k = {} but {} files listed", manifest.k, manifest.files.len())));
    }
    let mut params = Vec::with_capacity(manifest.k);
    for f in &manifest.files {
        let p = read_checkpoint(&dir.join(f))?;
        let arch = p.arch();
        if (arch.in_channels(), arch.num_classes()) != (manifest.in_channels, manifest.num_classes) {
            return Err(mismatch(format!(
                "{f} maps {} channels to {} classes, manifest says {} to {}",
                arch.in_channels(),
                arch.num_classes(),
                manifest.in_channels,
                manifest.num_classes
            )));
        }
        params.push(p);
    }
    if params.iter().any(|p| p.arch() != params[0].arch()) {
        return Err(mismatch("networks have different architectures".into()));
    }
    let ds = Dataset::load(&a.data)?;
    if ds.test.is_empty() {
        return Err(runtime(format!("{}: no test samples", a.data.display())));
    }
    for s in &ds.test {
        if s.gt.num_classes() != manifest.num_classes || s.image.channels() != manifest.in_channels {
            return Err(mismatch(format!(
                "test sample {} has {} channels and {} classes",
                s.id,
                s.image.channels(),
                s.gt.num_classes(),
            )));
        }
    }
    let model = ConvNet::new(params[0].arch().clone());
    let (fused, nets) = evaluate_ensemble(&model, &params, &ds.test)?;
    let mut csv = format!("{}\n{}", EvalReport::CSV_HEADER, fused.csv_rows());
    if a.per_network {
        for r in &nets {
            csv.push_str(&r.csv_rows());
        }
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            mkdir(parent)?;
        }
        write(out, &csv)?;
    }
    Ok(())
}

pub fn fuse(a: &FuseArgs) -> Result<(), CliError> {
    let ds = Dataset::load(&a.data)?;
    let fused = ds.fused(a.strategy, a.seed)?;
    let entries = fused.write(&a.out)?;
    eprintln!(
        "fused {} annotated samples with {}; wrote {} entries to {}",
        fused.multi.len() + fused.val.len(),
        a.strategy,
        entries.len(),
        a.out.display()
    );
    Ok(())
}

pub fn grad_check(a: &GradCheckArgs) -> Result<(), CliError> {
    if a.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let report = run_grad_check(&GradCheckConfig {
        seed: a.seed,
        instances: a.instances,
        corrupt: a.corrupt,
        ..Default::default()
    })?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error()
        )))
    }
}

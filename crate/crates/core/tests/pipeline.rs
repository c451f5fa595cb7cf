use msenets::dataset::{build_dataset, Dataset, DatasetSpec, MANIFEST_FILE};
use msenets::fusion::FusionStrategy;
use msenets::inference::evaluate_ensemble;
use msenets::io::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
use msenets::synth::ShapeFamily;
use msenets::trainer::{run_training, TrainConfig, TrainData};
use msenets::{ConvNet, PixelClassifier};

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        width: 20,
        height: 20,
        ..DatasetSpec::new(4, 4, 2, 3, 2, seed)
    }
}

#[test]
fn dataset_survives_disk_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(3);
    let entries = build_dataset(&spec, dir.path()).unwrap();
    assert_eq!(entries.len(), 4 + 4 + 2 + 3);
    assert!(dir.path().join(MANIFEST_FILE).is_file());
    let loaded = Dataset::load(dir.path()).unwrap();
    let fresh = Dataset::generate(&spec).unwrap();
    // validation samples keep no clean mask on disk
    assert_eq!(loaded.multi, fresh.multi);
    assert_eq!(loaded.unannotated, fresh.unannotated);
    assert_eq!(loaded.test, fresh.test);
    for (a, b) in loaded.val.iter().zip(&fresh.val) {
        assert_eq!((&a.id, &a.image, &a.annotations), (&b.id, &b.image, &b.annotations));
        assert!(a.clean_gt.is_none());
    }
}

#[test]
fn nested_dataset_roundtrip_keeps_three_classes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        width: 32,
        height: 32,
        shape: ShapeFamily::Nested,
        ..DatasetSpec::new(2, 0, 1, 2, 3, 8)
    };
    build_dataset(&spec, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.k(), Some(3));
    assert!(ds.test.iter().all(|s| s.gt.num_classes() == 3 && s.gt.count(2) > 0));
}

#[test]
fn fused_dataset_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(&small_spec(4)).unwrap();
    let fused = ds.fused(FusionStrategy::Staple, 0).unwrap();
    fused.write(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap().multi, fused.multi);
}

#[test]
fn train_save_load_evaluate() {
    let ds = Dataset::generate(&small_spec(5)).unwrap();
    let model = ConvNet::reference(1, 2).unwrap();
    let cfg = TrainConfig {
        total_iters: 30,
        validation_every: 10,
        seed: 5,
        ..TrainConfig::desk(2)
    };
    let data = TrainData {
        multi: &ds.multi,
        unannotated: &ds.unannotated,
        val: &ds.val,
    };
    let out = run_training(&model, data, &cfg).unwrap();
    assert_eq!(out.trace.len(), 4);
    assert_eq!(out.network_trace.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    let mut loaded = Vec::new();
    for (k, p) in out.best_params().iter().enumerate() {
        let path = dir.path().join(format!("net_{k}.msen"));
        write_checkpoint(&path, p).unwrap();
        loaded.push(read_checkpoint(&path).unwrap());
        assert_eq!(decode_checkpoint(&encode_checkpoint(p)).unwrap(), *p);
    }
    assert_eq!(loaded.as_slice(), out.best_params());
    let (fused, nets) = evaluate_ensemble(&model, &loaded, &ds.test).unwrap();
    assert_eq!(fused.sample_count(), 3);
    assert_eq!(nets.len(), 2);
    let again = evaluate_ensemble(&model, out.best_params(), &ds.test).unwrap();
    assert_eq!(again.0, fused);
    assert!(loaded.iter().all(|p| p.arch() == model.arch()));
}

#[test]
fn three_network_training_runs() {
    let spec = DatasetSpec {
        width: 16,
        height: 16,
        ..DatasetSpec::new(3, 3, 2, 2, 3, 6)
    };
    let ds = Dataset::generate(&spec).unwrap();
    let model = ConvNet::reference(1, 2).unwrap();
    let cfg = TrainConfig {
        total_iters: 12,
        validation_every: 4,
        seed: 1,
        ..TrainConfig::desk(3)
    };
    let data = TrainData {
        multi: &ds.multi,
        unannotated: &ds.unannotated,
        val: &ds.val,
    };
    let out = run_training(&model, data, &cfg).unwrap();
    assert_eq!(out.state.k(), 3);
    assert_eq!(out.network_trace.len(), 4 * 3);
    assert!(out.trace.iter().all(|r| r.losses.total.is_finite()));
}

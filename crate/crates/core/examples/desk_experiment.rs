//! Compares the full ensemble against its ablations and the single-annotator
//! baselines on synthetic data. `area` is predicted over true foreground.
//!
//! cargo run --release --example desk_experiment -- [seeds] [iters]

use std::time::Instant;

use msenets::dataset::{Dataset, DatasetSpec};
use msenets::inference::evaluate_ensemble;
use msenets::{run_training, ConvNet, TrainConfig, TrainData};

fn main() -> msenets::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let model = ConvNet::reference(1, 2)?;
    let mut sums = std::collections::BTreeMap::<String, f64>::new();
    for seed in 0..seeds {
        let spec = DatasetSpec::new(20, 80, 10, 50, 2, seed);
        let ds = Dataset::generate(&spec)?;
        let data = TrainData {
            multi: &ds.multi,
            unannotated: &ds.unannotated,
            val: &ds.val,
        };
        let base = TrainConfig {
            total_iters: iters,
            seed,
            ..TrainConfig::desk(2)
        };
        let variants = [
            ("full", base.clone()),
            ("agree", TrainConfig { use_pc: false, use_ps: false, use_unannotated: false, ..base.clone() }),
            ("nops", TrainConfig { use_ps: false, use_unannotated: false, ..base.clone() }),
            ("nopc", TrainConfig { use_pc: false, ..base.clone() }),
            ("a0", TrainConfig { single_annotator: Some(0), use_unannotated: false, ..base.clone() }),
            ("a1", TrainConfig { single_annotator: Some(1), use_unannotated: false, ..base.clone() }),
        ];
        for (name, cfg) in variants {
            let start = Instant::now();
            let out = run_training(&model, data, &cfg)?;
            let (fused, nets) = evaluate_ensemble(&model, out.best_params(), &ds.test)?;
            let first = out.trace.first().map_or(f64::NAN, |r| r.agreement);
            let last = out.trace.last().map_or(f64::NAN, |r| r.agreement);
            *sums.entry(name.to_string()).or_default() += fused.mean_jaccard();
            let (mut pa, mut ga) = (0usize, 0usize);
            for s in &ds.test {
                let (m, _) = msenets::inference::predict(&model, out.best_params(), &s.image)?;
                pa += m.labels().iter().filter(|&&l| l > 0).count();
                ga += s.gt.labels().iter().filter(|&&l| l > 0).count();
            }
            println!(
                "seed {seed} {name:<6} fused {:.4} area {:.3} nets {} agreement {:.4} -> {:.4} best@{} {:.1}s",
                fused.mean_jaccard(),
                pa as f64 / ga as f64,
                nets.iter().map(|r| format!("{:.4}", r.mean_jaccard())).collect::<Vec<_>>().join("/"),
                first,
                last,
                out.state.best.iterations[0],
                start.elapsed().as_secs_f64()
            );
        }
    }
    for (k, v) in sums {
        println!("mean {k:<6} {:.4}", v / seeds as f64);
    }
    Ok(())
}

//! Trains the default desk model and prints seed quality for every stage.
//!
//! cargo run --release -p mctformer --example desk_run -- [epochs] [train_count] [variant] [head_mode]

use std::time::Instant;

use mctformer::data::{
    default_thresholds, forward_all, generate_dataset, ground_truth, k_sweep_records, localize_all, threshold_sweep,
    SceneGeometry,
};
use mctformer::maps::Stage;
use mctformer::model::ModelParameters;
use mctformer::model::{HeadMode, ModelConfig, Variant};
use mctformer::training::{derive_seed, train_from, RunParams};
use mctformer::Execution;

fn main() -> mctformer::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let train_count = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let variant: Variant = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(Variant::V2);
    let head_mode: HeadMode = args
        .get(4)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(HeadMode::AveragePool);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);

    let config = ModelConfig {
        variant,
        head_mode,
        ..ModelConfig::default()
    };
    let geo = SceneGeometry::from(&config);
    let train = generate_dataset(seed, train_count, &geo, Execution::Parallel)?;
    let test = generate_dataset(seed + 1_000_000, 50, &geo, Execution::Parallel)?;
    let run = RunParams {
        seed,
        epochs,
        ..RunParams::default()
    };

    let t0 = Instant::now();
    let init = ModelParameters::init(&config, derive_seed(run.seed, 1))?;
    let out = train_from(init, &train, &config, &run, |e, l| {
        eprintln!("epoch {e:3} loss {l:.4} ({:.1}s)", t0.elapsed().as_secs_f64())
    })?;
    eprintln!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let records = forward_all(&out.params, &config, &test, Execution::Parallel)?;
    let truths = ground_truth(&test);
    for stage in Stage::ALL {
        if variant == Variant::V1 && matches!(stage, Stage::AttnCam | Stage::Full) {
            continue;
        }
        let maps = localize_all(&records, &config, stage)?;
        let e = threshold_sweep(&maps, &truths, &default_thresholds())?;
        println!(
            "{stage:>14}: mIoU {:.4} FP {:.4} FN {:.4} thr {}",
            e.miou, e.fp, e.fn_rate, e.best_threshold
        );
    }
    let ks: Vec<usize> = (1..=config.num_layers).collect();
    for row in k_sweep_records(&records, &config, &truths, &ks)? {
        println!(
            "K={} FP {:.4} FN {:.4} mIoU {:.4} thr {}",
            row.k, row.fp, row.fn_rate, row.miou, row.threshold
        );
    }
    Ok(())
}

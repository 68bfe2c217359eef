use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mctformer::data::{
    default_thresholds, evaluation_csv, evaluation_summary, forward_all, generate_dataset, ground_truth, k_sweep_csv,
    k_sweep_records, localize_all, threshold_sweep, Dataset, SceneGeometry,
};
use mctformer::maps::{
    all_layers, build_affinity, grayscale_bytes, localize_with, maps_from_csv, maps_to_csv, write_affinity, write_pgm,
    Stage, AFFINITY_ROWS_RENORMALIZED,
};
use mctformer::model::{
    load_checkpoint, save_checkpoint, write_atomic, HeadMode, ModelConfig, ModelParameters, Variant,
};
use mctformer::training::{derive_seed, loss_trace_csv, train_from, RunParams, TrainOutcome};
use serde::Serialize;

use crate::args::{AblateArgs, Command, EvalArgs, GenerateArgs, InferArgs, ReplayArgs, Settings, TrainArgs};
use crate::manifest::RunManifest;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.mctckpt";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Replay(a) => replay(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_geometry(config: &ModelConfig, ds: &Dataset, path: &Path) -> Result<()> {
    let want = SceneGeometry::from(config);
    ensure!(
        ds.geometry == want,
        "dataset {} was generated for {:?}, the model expects {:?}",
        path.display(),
        ds.geometry,
        want
    );
    Ok(())
}

const INIT_STREAM: u64 = 1;

fn fit(
    dataset: &[mctformer::data::SyntheticSample],
    config: &ModelConfig,
    run: &RunParams,
    quiet: bool,
) -> Result<TrainOutcome> {
    let init = ModelParameters::init(config, derive_seed(run.seed, INIT_STREAM))?;
    let tag = format!("{} {}", config.variant, config.head_mode);
    let outcome = train_from(init, dataset, config, run, |epoch, loss| {
        if !quiet {
            eprintln!("[{tag}] epoch {:>3}/{} loss {loss:.5}", epoch + 1, run.epochs);
        }
    })?;
    Ok(outcome)
}

fn generate(args: GenerateArgs) -> Result<()> {
    let (model, run) = args.settings.resolve()?;
    let parent = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    ensure!(parent.is_dir(), "output directory {} does not exist", parent.display());

    let resolved = GenerateArgs {
        settings: Settings::resolved(&model, &run),
        ..args.clone()
    };
    let mut manifest = RunManifest::new(Command::Generate(resolved), args.out.clone());
    manifest.seed = Some(run.seed);
    manifest.config = Some(model.clone());
    let mut manifest_path = args.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    manifest.write(Path::new(&manifest_path))?;

    let geometry = SceneGeometry::from(&model);
    let samples = generate_dataset(run.seed, args.count as usize, &geometry, run.execution)?;
    let ds = Dataset {
        seed: run.seed,
        geometry,
        samples,
    };
    ds.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} samples to {}", ds.samples.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let (model, run) = args.settings.resolve()?;
    let ds = load_dataset(&args.data)?;
    check_geometry(&model, &ds, &args.data)?;
    prepare_dir(&args.out_dir)?;
    let checkpoint = args.out_dir.join(CHECKPOINT_FILE);

    let resolved = TrainArgs {
        settings: Settings::resolved(&model, &run),
        ..args.clone()
    };
    let mut manifest = RunManifest::new(Command::Train(resolved), args.out_dir.clone());
    manifest.seed = Some(run.seed);
    manifest.config = Some(model.clone());
    manifest.run = Some(run.clone());
    manifest.dataset = Some(args.data.clone());
    manifest.checkpoint = Some(checkpoint.clone());
    manifest.write(&args.out_dir.join(MANIFEST_FILE))?;

    let outcome = fit(&ds.samples, &model, &run, args.quiet)?;
    write_text(&args.out_dir.join("loss.csv"), &loss_trace_csv(&outcome.trace))?;
    save_checkpoint(&checkpoint, &model, &outcome.params)
        .with_context(|| format!("writing checkpoint {}", checkpoint.display()))?;
    println!("wrote {}", checkpoint.display());
    Ok(())
}

/// Rejects settings that contradict the checkpoint. `fuse_layers` only
/// affects map extraction, so it may be changed at inference time.
fn infer_config(stored: &ModelConfig, settings: &Settings) -> Result<ModelConfig> {
    let explicit = settings.explicit()?;
    let mut wanted = stored.clone();
    explicit.apply_model(&mut wanted);
    let mut comparable = wanted.clone();
    comparable.fuse_layers = stored.fuse_layers;
    if comparable != *stored {
        bail!(
            "checkpoint/config mismatch: checkpoint has {}, flags ask for {}",
            serde_json::to_string(stored)?,
            serde_json::to_string(&comparable)?
        );
    }
    wanted.validate()?;
    Ok(wanted)
}

#[derive(Serialize)]
struct InferMeta<'a> {
    stage: String,
    variant: String,
    fuse_layers: usize,
    num_samples: usize,
    num_classes: usize,
    grid_side: usize,
    extra_normalizations: &'a [&'static str],
    affinity_rows_renormalized: bool,
}

pub fn default_stage(variant: Variant) -> Stage {
    match variant {
        Variant::V1 => Stage::AttnAffinity,
        Variant::V2 => Stage::Full,
    }
}

fn infer(args: InferArgs) -> Result<()> {
    let (stored, params) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let config = infer_config(&stored, &args.settings)?;
    let exec = args.settings.execution.unwrap_or_default();
    let stage = args.stage.unwrap_or_else(|| default_stage(config.variant));
    let ds = load_dataset(&args.data)?;
    check_geometry(&config, &ds, &args.data)?;
    prepare_dir(&args.out_dir)?;

    let mut resolved = args.clone();
    resolved.stage = Some(stage);
    resolved.settings = Settings {
        fuse_layers: Some(config.fuse_layers),
        execution: Some(exec),
        ..Settings::default()
    };
    let mut manifest = RunManifest::new(Command::Infer(resolved), args.out_dir.clone());
    manifest.config = Some(config.clone());
    manifest.dataset = Some(args.data.clone());
    manifest.checkpoint = Some(args.checkpoint.clone());
    manifest.write(&args.out_dir.join(MANIFEST_FILE))?;

    let records = forward_all(&params, &config, &ds.samples, exec)?;
    let maps = records
        .iter()
        .map(|r| localize_with(r, &config, stage, config.fuse_layers, None))
        .collect::<mctformer::Result<Vec<_>>>()?;

    let image_dir = args.out_dir.join("maps");
    prepare_dir(&image_dir)?;
    for (i, m) in maps.iter().enumerate() {
        for c in 0..m.num_classes() {
            let path = image_dir.join(format!("s{i:05}_c{c}.pgm"));
            write_pgm(&path, m.grid_side(), &grayscale_bytes(m.class_map(c)))?;
        }
    }
    if args.export_affinity {
        let aff_dir = args.out_dir.join("affinity");
        prepare_dir(&aff_dir)?;
        for (i, r) in records.iter().enumerate() {
            let stack = &r.attention_stack;
            let aff = build_affinity(stack, config.num_classes, &all_layers(stack))?;
            write_affinity(&aff_dir.join(format!("s{i:05}.bin")), &aff)?;
        }
    }
    write_text(&args.out_dir.join("maps.csv"), &maps_to_csv(&maps))?;
    let meta = InferMeta {
        stage: stage.to_string(),
        variant: config.variant.to_string(),
        fuse_layers: config.fuse_layers,
        num_samples: maps.len(),
        num_classes: config.num_classes,
        grid_side: config.grid_side,
        extra_normalizations: maps.first().map_or(&[], |m| &m.extra_normalizations),
        affinity_rows_renormalized: AFFINITY_ROWS_RENORMALIZED,
    };
    write_text(
        &args.out_dir.join("meta.json"),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    println!("wrote {} map sets ({stage}) to {}", maps.len(), args.out_dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let text = fs::read_to_string(&args.maps).with_context(|| format!("reading {}", args.maps.display()))?;
    let maps = maps_from_csv(&text, ds.geometry.num_classes, ds.geometry.grid_side)
        .with_context(|| format!("parsing {}", args.maps.display()))?;
    ensure!(
        maps.len() == ds.samples.len(),
        "{} has maps for {} samples but {} has {}",
        args.maps.display(),
        maps.len(),
        args.data.display(),
        ds.samples.len()
    );
    prepare_dir(&args.out_dir)?;
    let thresholds = args.thresholds.clone().unwrap_or_else(default_thresholds);
    ensure!(
        thresholds.iter().all(|t| *t > 0.0 && *t < 1.0),
        "thresholds must lie in (0, 1)"
    );

    let mut resolved = args.clone();
    resolved.thresholds = Some(thresholds.clone());
    let mut manifest = RunManifest::new(Command::Eval(resolved), args.out_dir.clone());
    manifest.dataset = Some(args.data.clone());
    manifest.write(&args.out_dir.join(MANIFEST_FILE))?;

    let e = threshold_sweep(&maps, &ground_truth(&ds.samples), &thresholds)?;
    write_text(&args.out_dir.join("report.csv"), &evaluation_csv(&e))?;
    let summary = evaluation_summary(&e);
    write_text(&args.out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub const HEAD_CSV_HEADER: &str = "head_mode,miou,fp,fn,threshold";

fn ablate(args: AblateArgs) -> Result<()> {
    let (model, run) = args.settings.resolve()?;
    if matches!(args.stage, Stage::AttnCam | Stage::Full) && model.variant == Variant::V1 {
        bail!("stage {} needs the V2 variant", args.stage);
    }
    let train_set = load_dataset(&args.data)?;
    let test_set = load_dataset(&args.test)?;
    check_geometry(&model, &train_set, &args.data)?;
    check_geometry(&model, &test_set, &args.test)?;
    let ks: Vec<usize> = args.ks.clone().unwrap_or_else(|| (1..=model.num_layers).collect());
    ensure!(
        ks.iter().all(|&k| (1..=model.num_layers).contains(&k)),
        "every K must lie in 1..={}",
        model.num_layers
    );
    prepare_dir(&args.out_dir)?;

    let mut resolved = args.clone();
    resolved.ks = Some(ks.clone());
    resolved.settings = Settings::resolved(&model, &run);
    let mut manifest = RunManifest::new(Command::Ablate(resolved), args.out_dir.clone());
    manifest.seed = Some(run.seed);
    manifest.config = Some(model.clone());
    manifest.run = Some(run.clone());
    manifest.dataset = Some(args.data.clone());
    manifest.write(&args.out_dir.join(MANIFEST_FILE))?;

    let truths = ground_truth(&test_set.samples);
    let mut heads = String::from(HEAD_CSV_HEADER);
    heads.push('\n');
    let mut k_rows = None;
    for mode in HeadMode::ALL {
        let cfg = ModelConfig {
            head_mode: mode,
            ..model.clone()
        };
        let outcome = fit(&train_set.samples, &cfg, &run, args.quiet)?;
        let records = forward_all(&outcome.params, &cfg, &test_set.samples, run.execution)?;
        let maps = localize_all(&records, &cfg, args.stage)?;
        let e = threshold_sweep(&maps, &truths, &default_thresholds())?;
        writeln!(heads, "{mode},{},{},{},{}", e.miou, e.fp, e.fn_rate, e.best_threshold)?;
        if mode == model.head_mode {
            k_rows = Some(k_sweep_records(&records, &cfg, &truths, &ks)?);
        }
    }
    let k_rows = k_rows.expect("configured head mode is one of HeadMode::ALL");
    write_text(&args.out_dir.join("head_modes.csv"), &heads)?;
    write_text(&args.out_dir.join("k_sweep.csv"), &k_sweep_csv(&k_rows))?;
    print!("{heads}");
    print!("{}", k_sweep_csv(&k_rows));
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let manifest = RunManifest::read(&args.manifest)?;
    if let Command::Replay(_) = manifest.invocation {
        bail!("manifest {} records a replay, not a command", args.manifest.display());
    }
    eprintln!("replaying `{}` from {}", manifest.command, args.manifest.display());
    run(manifest.invocation)
}

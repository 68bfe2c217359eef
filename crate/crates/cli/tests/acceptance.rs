//! Exit criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any of them fails.
//!
//! Criteria 4 to 7 train the default desk model (several minutes each on a
//! single core). The trained runs are shared between criteria.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use mctformer::autodiff::{check_gradients, Graph, Tensor, Var, DEFAULT_STEP};
use mctformer::data::{
    confusion_matrix, default_thresholds, evaluate_seeds, forward_all, generate_dataset, ground_truth, k_sweep_records,
    localize_all, threshold_sweep, KSweepRow, SceneGeometry, SyntheticSample,
};
use mctformer::maps::{
    fuse_with_patch_cam, localization_pipeline, min_max_normalize, refine, slice_class_to_patch, slice_patch_to_patch,
    ClassLocalizationMaps, PairwiseAffinity, Stage,
};
use mctformer::model::{
    forward, forward_graph, patchify, ForwardRecord, HeadMode, ModelConfig, ModelParameters, Variant,
};
use mctformer::training::{loss_graph, train, LabelVector, RunParams};
use mctformer::{Execution, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// criterion 1
const GRAD_TOL: f64 = 1e-4;
// criterion 2
const REFINE_TOL: f64 = 1e-12;
const CONV_TOL: f64 = 1e-10;
// criteria 2 and 3
const SEEDS: u64 = 100;
// criterion 3
const ROW_SUM_TOL: f64 = 1e-6;
// criterion 4
const MIN_MIOU: f64 = 0.60;
const MAX_EPOCHS: usize = 40;
const TRAIN_COUNT: usize = 200;
const TEST_COUNT: usize = 50;
// criterion 5
const ABLATION_SLACK: f64 = -0.01;
// criterion 7
const K_SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

/// `Ok(detail)` passes, `Err(detail)` fails.
type Verdict = std::result::Result<String, String>;

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 gradient suite", gradient_suite),
        ("2 oracle equivalence", oracle_equivalence),
        ("3 structural invariants", structural_invariants),
        ("4 end-to-end learning", end_to_end_learning),
        ("5 stage ablation ordering", stage_ordering),
        ("6 average vs max pooling head", head_ordering),
        ("7 FP grows with fused layers", fp_trend),
        ("8 CLI determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.starts_with(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS criterion {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| d.sample(r)).collect()).unwrap()
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn row_stochastic(r: &mut ChaCha8Rng, m: usize) -> Tensor {
    let mut t = uniform(r, &[m, m]);
    for row in t.data_mut().chunks_mut(m) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

// ---------------------------------------------------------------------------
// 1

fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = normal(&mut rng(seed ^ 0xfeed), g.value(out).shape(), 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = rng(11);
    let a = normal(&mut r, &[3, 4], 1.0);
    let b = normal(&mut r, &[4, 2], 1.0);
    let c = normal(&mut r, &[3, 4], 1.0);
    let v4 = normal(&mut r, &[4], 1.0);
    let g4 = normal(&mut r, &[4], 1.0);
    let x = normal(&mut r, &[3, 3, 4], 1.0);
    let k = normal(&mut r, &[2, 3, 3, 4], 0.5);
    let kb = normal(&mut r, &[2], 0.5);
    let s = normal(&mut r, &[4], 2.0);
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $seed:expr, |$g:ident, $v:ident| $body:expr) => {
            (
                $name,
                vec![$($t.clone()),*],
                Box::new(move |$g: &mut Graph, $v: &[Var]| -> Result<Var> {
                    let o = $body;
                    probe($g, o, $seed)
                }) as Build,
            )
        };
    }
    vec![
        case!("matmul", [a, b], 1, |g, v| g.matmul(v[0], v[1])?),
        case!("transpose", [a], 2, |g, v| g.transpose(v[0])?),
        case!("add", [a, c], 3, |g, v| g.add(v[0], v[1])?),
        case!("add_bias", [a, v4], 4, |g, v| g.add_bias(v[0], v[1])?),
        case!("mul", [a, c], 5, |g, v| g.mul(v[0], v[1])?),
        case!("scale", [a], 6, |g, v| g.scale(v[0], -0.7)),
        case!("gelu", [a], 7, |g, v| g.gelu(v[0])),
        case!("softmax_rows", [a], 8, |g, v| g.softmax_rows(v[0])?),
        case!("layer_norm", [a, g4.map(|t| t + 1.0), v4], 9, |g, v| g
            .layer_norm(v[0], v[1], v[2], 1e-6)?),
        case!("slice_rows", [a], 10, |g, v| g.slice_rows(v[0], 1, 2)?),
        case!("concat_rows", [a, c], 11, |g, v| g.concat_rows(&[v[0], v[1]])?),
        case!("slice_cols", [a], 12, |g, v| g.slice_cols(v[0], 1, 2)?),
        case!("concat_cols", [a, c], 13, |g, v| g.concat_cols(&[v[0], v[1]])?),
        case!("reshape", [a], 14, |g, v| g.reshape(v[0], &[2, 6])?),
        case!("mean_cols", [a], 15, |g, v| g.mean_cols(v[0])?),
        case!("mean_rows", [a], 16, |g, v| g.mean_rows(v[0])?),
        case!("max_cols", [a], 17, |g, v| g.max_cols(v[0])?),
        case!("sum", [a], 18, |g, v| g.sum(v[0])),
        case!("conv3x3", [x, k, kb], 19, |g, v| g.conv3x3(v[0], v[1], v[2])?),
        (
            "soft_margin_loss",
            vec![s],
            Box::new(|g: &mut Graph, v: &[Var]| g.soft_margin_loss(v[0], &[1.0, 0.0, 1.0, 0.0])) as Build,
        ),
    ]
}

fn gradient_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        grid_side: 2,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        fuse_layers: 1,
        patch_size: 2,
        mlp_ratio: 2.0,
        variant,
        head_mode: HeadMode::AveragePool,
    }
}

fn full_loss_error(config: &ModelConfig, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let side = config.image_side();
    let image = uniform(&mut r, &[3, side, side]);
    let patches = patchify(&image, config)?;
    let labels = LabelVector::from_indices(config.num_classes, &[1])?;
    let template = ModelParameters::zeros(config);
    let params: Vec<(String, Tensor)> = ModelParameters::init(config, seed)?
        .named()
        .into_iter()
        .map(|(name, t)| {
            let mut v = normal(&mut r, t.shape(), 0.4);
            if name.ends_with("gamma") {
                v = v.map(|x| x + 1.0);
            }
            (name, v)
        })
        .collect();
    let report = check_gradients(
        &params,
        |g, vars| {
            let mut it = vars.iter();
            let p = template.map(|_, _| *it.next().expect("one var per parameter"));
            let x = g.constant(patches.clone());
            let fv = forward_graph(g, &p, config, x)?;
            Ok(loss_graph(g, &fv, &labels, config.variant)?.0)
        },
        DEFAULT_STEP,
        GRAD_TOL,
    )?;
    Ok(report.max_rel_error)
}

fn gradient_suite() -> Verdict {
    let mut worst: (f64, &str) = (0.0, "");
    let cases = op_cases();
    let n_ops = cases.len();
    for (name, inputs, build) in cases {
        let named: Vec<(String, Tensor)> = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("in{i}"), t))
            .collect();
        let report = check_gradients(&named, build, DEFAULT_STEP, GRAD_TOL).map_err(|e| format!("{name}: {e}"))?;
        if report.max_rel_error > worst.0 {
            worst = (report.max_rel_error, name);
        }
    }
    let v1 = full_loss_error(&gradient_config(Variant::V1), 7).map_err(|e| format!("V1 loss: {e}"))?;
    let v2 = full_loss_error(&gradient_config(Variant::V2), 8).map_err(|e| format!("V2 loss: {e}"))?;
    ensure(worst.0 < GRAD_TOL && v1 < GRAD_TOL && v2 < GRAD_TOL, || {
        format!(
            "max rel error ops {:.2e} ({}), V1 {v1:.2e}, V2 {v2:.2e}",
            worst.0, worst.1
        )
    })?;
    Ok(format!(
        "{n_ops} ops max rel {:.2e} ({}); V1 loss {v1:.2e}; V2 loss {v2:.2e}; tol {GRAD_TOL:e}",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------------------
// 2

fn refine_oracle(matrix: &Tensor, maps: &Tensor, c: usize, n: usize) -> Vec<f64> {
    let m = n * n;
    let mut out = vec![0.0; c * m];
    for ch in 0..c {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    for l in 0..n {
                        acc += matrix.data()[(i * n + j) * m + k * n + l] * maps.data()[(ch * n + k) * n + l];
                    }
                }
                out[(ch * n + i) * n + j] = acc;
            }
        }
    }
    out
}

fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[2]);
    let c = k.shape()[0];
    let mut out = vec![0.0; n * n * c];
    for y in 0..n {
        for xx in 0..n {
            for ch in 0..c {
                let mut acc = b.data()[ch];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= n as isize || sx >= n as isize {
                            continue;
                        }
                        for e in 0..d {
                            acc += k.data()[((ch * 3 + dy) * 3 + dx) * d + e]
                                * x.data()[((sy as usize) * n + sx as usize) * d + e];
                        }
                    }
                }
                out[(y * n + xx) * c + ch] = acc;
            }
        }
    }
    out
}

/// Per-label pixel counts, then IoU / FP / FN straight from the definitions.
fn metrics_oracle(preds: &[Vec<u8>], truths: &[Vec<u8>], c: usize) -> (f64, f64, f64) {
    let mut inter = vec![0u64; c + 1];
    let mut union = vec![0u64; c + 1];
    let (mut fp, mut fn_, mut fg) = (0u64, 0u64, 0u64);
    for (p, t) in preds.iter().zip(truths) {
        for (&a, &b) in p.iter().zip(t) {
            for label in 0..=c as u8 {
                let (in_p, in_t) = (a == label, b == label);
                if in_p && in_t {
                    inter[label as usize] += 1;
                }
                if in_p || in_t {
                    union[label as usize] += 1;
                }
            }
            fg += u64::from(b != 0);
            fp += u64::from(b == 0 && a != 0);
            fn_ += u64::from(b != 0 && a == 0);
        }
    }
    let ious: Vec<f64> = (0..=c)
        .filter(|&l| union[l] > 0)
        .map(|l| inter[l] as f64 / union[l] as f64)
        .collect();
    let denom = fg.max(1) as f64;
    (
        ious.iter().sum::<f64>() / ious.len() as f64,
        fp as f64 / denom,
        fn_ as f64 / denom,
    )
}

fn oracle_equivalence() -> Verdict {
    let mut refine_err: f64 = 0.0;
    let mut conv_err: f64 = 0.0;
    let mut metric_err: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let n = 2 + (seed % 3) as usize;
        let c = 1 + (seed % 4) as usize;
        let matrix = row_stochastic(&mut r, n * n);
        let maps = uniform(&mut r, &[c, n, n]);
        let got = refine(&maps, &PairwiseAffinity::from_matrix(matrix.clone()).unwrap()).unwrap();
        for (a, w) in got.data().iter().zip(refine_oracle(&matrix, &maps, c, n)) {
            refine_err = refine_err.max((a - w).abs());
        }

        let side = 1 + (seed % 6) as usize;
        let d = 1 + (seed % 5) as usize;
        let x = normal(&mut r, &[side, side, d], 1.0);
        let k = normal(&mut r, &[c, 3, 3, d], 1.0);
        let b = normal(&mut r, &[c], 1.0);
        let want = conv_oracle(&x, &k, &b);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x), g.constant(k), g.constant(b));
        let out = g.conv3x3(xv, kv, bv).unwrap();
        for (a, w) in g.value(out).data().iter().zip(&want) {
            conv_err = conv_err.max((a - w).abs() / (1.0 + w.abs()));
        }

        let samples = 1 + (seed % 5) as usize;
        let patches = n * n;
        let labels = |r: &mut ChaCha8Rng| -> Vec<Vec<u8>> {
            (0..samples)
                .map(|_| (0..patches).map(|_| r.random_range(0..=c as u8)).collect())
                .collect()
        };
        let preds = labels(&mut r);
        let truths = labels(&mut r);
        let e = evaluate_seeds(&preds, &truths, c).unwrap();
        let (miou, fp, fn_rate) = metrics_oracle(&preds, &truths, c);
        let cm = confusion_matrix(&preds, &truths, c).unwrap();
        let total: u64 = cm.iter().flatten().sum();
        ensure(total == (samples * patches) as u64, || {
            format!("seed {seed}: confusion total {total}")
        })?;
        metric_err = metric_err
            .max((e.miou - miou).abs())
            .max((e.fp - fp).abs())
            .max((e.fn_rate - fn_rate).abs());
    }
    ensure(
        refine_err <= REFINE_TOL && conv_err <= CONV_TOL && metric_err <= 1e-12,
        || format!("refine {refine_err:.2e}, conv {conv_err:.2e}, metrics {metric_err:.2e}"),
    )?;
    Ok(format!(
        "{SEEDS} seeds: refine max |err| {refine_err:.1e} (tol {REFINE_TOL:e}), conv {conv_err:.1e}, metrics {metric_err:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 3

fn random_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_classes: 1 + (seed % 3) as usize,
        grid_side: 2 + (seed % 2) as usize,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        fuse_layers: 1 + (seed % 2) as usize,
        patch_size: 2,
        mlp_ratio: 2.0,
        variant: if seed.is_multiple_of(2) {
            Variant::V1
        } else {
            Variant::V2
        },
        head_mode: HeadMode::AveragePool,
    }
}

fn wide_params(cfg: &ModelConfig, seed: u64) -> ModelParameters {
    let mut r = rng(seed);
    ModelParameters::init(cfg, seed)
        .unwrap()
        .map(|_, t| normal(&mut r, t.shape(), 0.8))
}

fn structural_invariants() -> Verdict {
    let mut row_err: f64 = 0.0;
    let mut lin_err: f64 = 0.0;
    let mut range_viol: f64 = 0.0;
    let mut hadamard_err: f64 = 0.0;
    for seed in 0..SEEDS {
        // attention rows
        let cfg = random_config(seed);
        let params = wide_params(&cfg, seed);
        let mut r = rng(seed + 1);
        let side = cfg.image_side();
        let image = uniform(&mut r, &[3, side, side]).map(|v| 4.0 * v - 2.0);
        let rec = forward(&params, &cfg, &image).unwrap();
        row_err = row_err.max(rec.attention_stack.max_row_sum_error());

        // slices tile the matrix
        let (c, n) = (1 + (seed % 4) as usize, 2 + (seed % 3) as usize);
        let m = n * n;
        let t = c + m;
        let a = uniform(&mut r, &[t, t]);
        let c2p = slice_class_to_patch(&a, c, m).unwrap();
        let p2p = slice_patch_to_patch(&a, c, m).unwrap();
        let mut owner = vec![0u8; t * t];
        let mut rebuilt = vec![f64::NAN; t * t];
        for i in 0..t {
            for j in 0..t {
                let v = match (i < c, j < c) {
                    (true, false) => Some(c2p.at2(i, j - c)),
                    (false, false) => Some(p2p.at2(i - c, j - c)),
                    _ => None,
                };
                if let Some(v) = v {
                    rebuilt[i * t + j] = v;
                    owner[i * t + j] += 1;
                }
                if j < c {
                    rebuilt[i * t + j] = a.at2(i, j);
                    owner[i * t + j] += 1;
                }
            }
        }
        ensure(owner.iter().all(|&o| o == 1) && rebuilt == a.data(), || {
            format!("seed {seed}: slices overlap or do not reassemble")
        })?;

        // refine: linear, range preserving
        let aff = PairwiseAffinity::from_matrix(row_stochastic(&mut r, m)).unwrap();
        let x = uniform(&mut r, &[c, n, n]).map(|v| 10.0 * v - 5.0);
        let y = uniform(&mut r, &[c, n, n]);
        let (alpha, beta) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let lhs = refine(&x.zip_map(&y, "combo", |p, q| alpha * p + beta * q).unwrap(), &aff).unwrap();
        let (rx, ry) = (refine(&x, &aff).unwrap(), refine(&y, &aff).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(rx.data()).zip(ry.data()) {
            lin_err = lin_err.max((l - (alpha * p + beta * q)).abs());
        }
        for ch in 0..c {
            let src = &x.data()[ch * m..(ch + 1) * m];
            let lo = src.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &v in &rx.data()[ch * m..(ch + 1) * m] {
                range_viol = range_viol.max(lo - v).max(v - hi);
            }
        }

        // normalization contract, including constant maps
        let mut raw = normal(&mut r, &[c, n, n], 5.0);
        if seed % 4 == 0 {
            raw.data_mut()[..m].fill(3.25);
        }
        let norm = min_max_normalize(&raw).unwrap();
        ensure(norm.satisfies_contract(), || {
            format!("seed {seed}: normalization contract broken")
        })?;
        if seed % 4 == 0 {
            ensure(norm.class_map(0).iter().all(|&v| v == 0.0), || {
                format!("seed {seed}: constant map not zeroed")
            })?;
        }
        let localized = localization_pipeline(&rec, &cfg).unwrap();
        ensure(localized.satisfies_contract(), || {
            format!("seed {seed}: pipeline output breaks contract")
        })?;

        // Hadamard fusion commutes
        let p = ClassLocalizationMaps::from_normalized(uniform(&mut r, &[c, n, n])).unwrap();
        let q = uniform(&mut r, &[c, n, n]);
        let pq = fuse_with_patch_cam(&p, &q).unwrap();
        let qp = fuse_with_patch_cam(&ClassLocalizationMaps::from_normalized(q.clone()).unwrap(), p.maps()).unwrap();
        for (u, v) in pq.data().iter().zip(qp.data()) {
            hadamard_err = hadamard_err.max((u - v).abs());
        }
    }
    ensure(
        row_err <= ROW_SUM_TOL && lin_err < 1e-12 && range_viol <= 1e-12 && hadamard_err == 0.0,
        || {
            format!(
                "row sums {row_err:.1e}, linearity {lin_err:.1e}, range {range_viol:.1e}, hadamard {hadamard_err:.1e}"
            )
        },
    )?;
    Ok(format!(
        "{SEEDS} seeds: row-sum err {row_err:.1e}, slices tile, linearity {lin_err:.1e}, range ok, contract ok, hadamard exact"
    ))
}

// ---------------------------------------------------------------------------
// 4 to 7: the trained desk model

fn desk_config(head_mode: HeadMode) -> ModelConfig {
    ModelConfig {
        head_mode,
        ..ModelConfig::default()
    }
}

struct DeskRun {
    config: ModelConfig,
    records: Vec<ForwardRecord>,
    truths: Vec<Vec<u8>>,
}

fn datasets(seed: u64, geo: &SceneGeometry) -> (Vec<SyntheticSample>, Vec<SyntheticSample>) {
    let train = generate_dataset(seed, TRAIN_COUNT, geo, Execution::default()).unwrap();
    let test = generate_dataset(seed + 1_000_000, TEST_COUNT, geo, Execution::default()).unwrap();
    (train, test)
}

fn desk_run(head_mode: HeadMode, seed: u64) -> &'static DeskRun {
    static RUNS: OnceLock<Mutex<HashMap<(HeadMode, u64), &'static DeskRun>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    if let Some(run) = runs.lock().unwrap().get(&(head_mode, seed)) {
        return run;
    }
    let config = desk_config(head_mode);
    let (train_set, test_set) = datasets(seed, &SceneGeometry::from(&config));
    let run = RunParams {
        seed,
        epochs: MAX_EPOCHS,
        ..RunParams::default()
    };
    let start = Instant::now();
    let outcome = train(&train_set, &config, &run).unwrap();
    eprintln!(
        "  trained {head_mode} seed {seed} in {:.0}s",
        start.elapsed().as_secs_f64()
    );
    let records = forward_all(&outcome.params, &config, &test_set, run.execution).unwrap();
    let leaked: &'static DeskRun = Box::leak(Box::new(DeskRun {
        config,
        records,
        truths: ground_truth(&test_set),
    }));
    runs.lock().unwrap().insert((head_mode, seed), leaked);
    leaked
}

fn stage_miou(run: &DeskRun, stage: Stage) -> f64 {
    let maps = localize_all(&run.records, &run.config, stage).unwrap();
    threshold_sweep(&maps, &run.truths, &default_thresholds()).unwrap().miou
}

fn end_to_end_learning() -> Verdict {
    let run = desk_run(HeadMode::AveragePool, 0);
    let maps: Vec<ClassLocalizationMaps> = run
        .records
        .iter()
        .map(|r| localization_pipeline(r, &run.config).unwrap())
        .collect();
    let e = threshold_sweep(&maps, &run.truths, &default_thresholds()).unwrap();
    let detail = format!(
        "V2 seed 0, {TRAIN_COUNT}/{TEST_COUNT} samples, {MAX_EPOCHS} epochs: mIoU {:.4} at threshold {} (FP {:.3}, FN {:.3}); need >= {MIN_MIOU}",
        e.miou, e.best_threshold, e.fp, e.fn_rate
    );
    ensure(e.miou >= MIN_MIOU, || detail.clone())?;
    Ok(detail)
}

fn stage_ordering() -> Verdict {
    let run = desk_run(HeadMode::AveragePool, 0);
    let [attn, aff, cam, full] = Stage::ALL.map(|s| stage_miou(run, s));
    let detail =
        format!("attn {attn:.4}, attn+affinity {aff:.4}, attn+cam {cam:.4}, full {full:.4} (slack {ABLATION_SLACK})");
    let ok = full - cam >= ABLATION_SLACK && cam - attn >= ABLATION_SLACK && aff - attn >= ABLATION_SLACK;
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn head_ordering() -> Verdict {
    let avg = stage_miou(desk_run(HeadMode::AveragePool, 0), Stage::Attn);
    let max = stage_miou(desk_run(HeadMode::MaxPool, 0), Stage::Attn);
    let detail = format!("attention-map mIoU average_pool {avg:.4} vs max_pool {max:.4}");
    ensure(avg > max, || detail.clone())?;
    Ok(detail)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn fp_trend() -> Verdict {
    let mut ks = Vec::new();
    let mut fps = Vec::new();
    let mut per_seed = Vec::new();
    for seed in K_SWEEP_SEEDS {
        let run = desk_run(HeadMode::AveragePool, seed);
        let all_k: Vec<usize> = (1..=run.config.num_layers).collect();
        let rows: Vec<KSweepRow> = k_sweep_records(&run.records, &run.config, &run.truths, &all_k).unwrap();
        let fp: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.fp)).collect();
        per_seed.push(format!("seed {seed} FP [{}]", fp.join(" ")));
        for row in rows {
            ks.push(row.k as f64);
            fps.push(row.fp);
        }
    }
    let rho = spearman(&ks, &fps);
    let detail = format!(
        "Spearman(K, FP) over seeds {K_SWEEP_SEEDS:?} = {rho:.3}, need > 0; {}",
        per_seed.join("; ")
    );
    ensure(rho > 0.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8

const SMALL_FLAGS: &[&str] = &[
    "--num-classes",
    "2",
    "--grid-side",
    "3",
    "--embed-dim",
    "8",
    "--num-layers",
    "2",
    "--num-heads",
    "2",
    "--fuse-layers",
    "1",
    "--patch-size",
    "2",
    "--variant",
    "v2",
];

fn mctformer(dir: &Path, args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mctformer"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn pipeline_run(dir: &Path) -> std::result::Result<(), String> {
    let with_small = |base: &[&'static str]| -> Vec<&'static str> { base.iter().chain(SMALL_FLAGS).copied().collect() };
    mctformer(
        dir,
        &with_small(&["generate", "--seed", "3", "--count", "24", "--out", "train.mctdata"]),
    )?;
    mctformer(
        dir,
        &with_small(&["generate", "--seed", "4", "--count", "8", "--out", "test.mctdata"]),
    )?;
    mctformer(
        dir,
        &with_small(&[
            "train",
            "--data",
            "train.mctdata",
            "--out-dir",
            "run",
            "--seed",
            "5",
            "--epochs",
            "3",
            "--batch-size",
            "8",
            "--quiet",
        ]),
    )?;
    mctformer(
        dir,
        &[
            "infer",
            "--checkpoint",
            "run/checkpoint.mctckpt",
            "--data",
            "test.mctdata",
            "--out-dir",
            "maps",
        ],
    )?;
    mctformer(
        dir,
        &[
            "eval",
            "--maps",
            "maps/maps.csv",
            "--data",
            "test.mctdata",
            "--out-dir",
            "report",
        ],
    )
}

fn manifest_invocation(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("timestamp_unix");
    obj.remove("argv");
    v
}

fn cli_determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        pipeline_run(d.path())?;
    }
    for m in ["run/manifest.json", "maps/manifest.json", "report/manifest.json"] {
        ensure(
            manifest_invocation(&dirs[0].path().join(m)) == manifest_invocation(&dirs[1].path().join(m)),
            || format!("{m} differs between runs"),
        )?;
    }
    let csvs = ["run/loss.csv", "maps/maps.csv", "report/report.csv"];
    let mut bytes = 0;
    for f in csvs {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs between runs"))?;
        bytes += a.len();
    }
    Ok(format!(
        "train+infer+eval twice: {} CSVs byte-identical ({bytes} bytes)",
        csvs.len()
    ))
}

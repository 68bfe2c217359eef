use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::synth::SyntheticSample;
use crate::error::{MctError, Result};
use crate::maps::{localize_with, ClassLocalizationMaps, Stage};
use crate::model::{forward, ForwardRecord, ModelConfig, ModelParameters};
use crate::parallel::Execution;

/// Seed quality against patch-level ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    /// Index 0 is background, `c + 1` is class `c`. `None` when the class
    /// occurs in neither predictions nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Background patches predicted as foreground, over ground-truth foreground patches.
    pub fp: f64,
    /// Foreground patches predicted as background, over ground-truth foreground patches.
    pub fn_rate: f64,
    pub best_threshold: f64,
}

/// Background unless the strongest class reaches `threshold`; ties go to the
/// lowest class index.
pub fn maps_to_mask(maps: &ClassLocalizationMaps, threshold: f64) -> Vec<u8> {
    let m = maps.grid_side() * maps.grid_side();
    (0..m)
        .map(|p| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..maps.num_classes() {
                let v = maps.class_map(c)[p];
                if v > best.1 {
                    best = (c, v);
                }
            }
            if best.1 >= threshold {
                (best.0 + 1) as u8
            } else {
                0
            }
        })
        .collect()
}

/// `(C+1)×(C+1)` confusion counts, `[truth][prediction]`.
pub fn confusion_matrix(predictions: &[Vec<u8>], truths: &[Vec<u8>], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.is_empty() {
        return Err(MctError::Empty("evaluate_seeds"));
    }
    if predictions.len() != truths.len() {
        return Err(MctError::shape("evaluate_seeds", &[predictions.len()], &[truths.len()]));
    }
    let k = num_classes + 1;
    let mut conf = vec![vec![0u64; k]; k];
    for (p, t) in predictions.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(MctError::shape("evaluate_seeds", &[p.len()], &[t.len()]));
        }
        for (&a, &b) in p.iter().zip(t) {
            if a as usize >= k || b as usize >= k {
                return Err(MctError::Config(format!(
                    "label out of range for {num_classes} classes"
                )));
            }
            conf[b as usize][a as usize] += 1;
        }
    }
    Ok(conf)
}

pub fn evaluate_seeds(predictions: &[Vec<u8>], truths: &[Vec<u8>], num_classes: usize) -> Result<SeedEvaluation> {
    let conf = confusion_matrix(predictions, truths, num_classes)?;
    let k = num_classes + 1;
    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = conf[c][c];
            let truth: u64 = conf[c].iter().sum();
            let pred: u64 = conf.iter().map(|row| row[c]).sum();
            let union = truth + pred - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = valid.iter().sum::<f64>() / valid.len() as f64;
    let fg_truth: u64 = conf[1..].iter().flatten().sum();
    let false_fg: u64 = conf[0][1..].iter().sum();
    let missed_fg: u64 = conf[1..].iter().map(|row| row[0]).sum();
    let denom = fg_truth.max(1) as f64;
    Ok(SeedEvaluation {
        per_class_iou,
        miou,
        fp: false_fg as f64 / denom,
        fn_rate: missed_fg as f64 / denom,
        best_threshold: f64::NAN,
    })
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Evaluation at the threshold with the best mIoU (lowest threshold on ties).
pub fn threshold_sweep(
    maps: &[ClassLocalizationMaps],
    truths: &[Vec<u8>],
    thresholds: &[f64],
) -> Result<SeedEvaluation> {
    let num_classes = maps.first().ok_or(MctError::Empty("threshold_sweep"))?.num_classes();
    if thresholds.is_empty() {
        return Err(MctError::Empty("threshold grid"));
    }
    let mut best: Option<SeedEvaluation> = None;
    for &t in thresholds {
        let preds: Vec<Vec<u8>> = maps.iter().map(|m| maps_to_mask(m, t)).collect();
        let mut e = evaluate_seeds(&preds, truths, num_classes)?;
        e.best_threshold = t;
        if best.as_ref().is_none_or(|b| e.miou > b.miou) {
            best = Some(e);
        }
    }
    Ok(best.expect("nonempty grid"))
}

/// Forward records for every sample, in order.
pub fn forward_all(
    params: &ModelParameters,
    config: &ModelConfig,
    samples: &[SyntheticSample],
    exec: Execution,
) -> Result<Vec<ForwardRecord>> {
    exec.map(samples, |s| forward(params, config, &s.image))
        .into_iter()
        .collect()
}

pub fn localize_all(
    records: &[ForwardRecord],
    config: &ModelConfig,
    stage: Stage,
) -> Result<Vec<ClassLocalizationMaps>> {
    records
        .iter()
        .map(|r| localize_with(r, config, stage, config.fuse_layers, None))
        .collect()
}

pub fn ground_truth(samples: &[SyntheticSample]) -> Vec<Vec<u8>> {
    samples.iter().map(|s| s.gt_mask.clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub fp: f64,
    pub fn_rate: f64,
    pub miou: f64,
    pub threshold: f64,
}

/// Attention-only maps fused over the last `k` layers, for each requested `k`.
pub fn k_sweep(
    params: &ModelParameters,
    config: &ModelConfig,
    samples: &[SyntheticSample],
    ks: &[usize],
    exec: Execution,
) -> Result<Vec<KSweepRow>> {
    let records = forward_all(params, config, samples, exec)?;
    k_sweep_records(&records, config, &ground_truth(samples), ks)
}

/// [`k_sweep`] over precomputed records.
pub fn k_sweep_records(
    records: &[ForwardRecord],
    config: &ModelConfig,
    truths: &[Vec<u8>],
    ks: &[usize],
) -> Result<Vec<KSweepRow>> {
    ks.iter()
        .map(|&k| {
            let maps = records
                .iter()
                .map(|r| localize_with(r, config, Stage::Attn, k, None))
                .collect::<Result<Vec<_>>>()?;
            let e = threshold_sweep(&maps, truths, &default_thresholds())?;
            Ok(KSweepRow {
                k,
                fp: e.fp,
                fn_rate: e.fn_rate,
                miou: e.miou,
                threshold: e.best_threshold,
            })
        })
        .collect()
}

/// `class,iou` rows (background first) followed by summary rows.
pub fn evaluation_csv(e: &SeedEvaluation) -> String {
    let mut out = String::from("class,iou\n");
    for (i, iou) in e.per_class_iou.iter().enumerate() {
        let name = if i == 0 {
            "background".to_string()
        } else {
            format!("class_{}", i - 1)
        };
        match iou {
            Some(v) => writeln!(out, "{name},{v}"),
            None => writeln!(out, "{name},"),
        }
        .expect("write to string");
    }
    out
}

pub fn evaluation_summary(e: &SeedEvaluation) -> String {
    let mut out = String::new();
    writeln!(out, "best_threshold: {}", e.best_threshold).unwrap();
    writeln!(out, "mIoU: {:.4}", e.miou).unwrap();
    writeln!(out, "FP: {:.4}", e.fp).unwrap();
    writeln!(out, "FN: {:.4}", e.fn_rate).unwrap();
    for (i, iou) in e.per_class_iou.iter().enumerate() {
        let name = if i == 0 {
            "background".to_string()
        } else {
            format!("class_{}", i - 1)
        };
        match iou {
            Some(v) => writeln!(out, "  IoU {name}: {v:.4}").unwrap(),
            None => writeln!(out, "  IoU {name}: n/a").unwrap(),
        }
    }
    out
}

pub fn k_sweep_csv(rows: &[KSweepRow]) -> String {
    let mut out = String::from("k,fp,fn,miou,threshold\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.k, r.fp, r.fn_rate, r.miou, r.threshold).unwrap();
    }
    out
}

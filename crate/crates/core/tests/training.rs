use mctformer::autodiff::Tensor;
use mctformer::data::{forward_all, generate_dataset, SceneGeometry, SyntheticSample};
use mctformer::model::{forward, HeadMode, ModelConfig, ModelParameters, Variant};
use mctformer::training::{
    batch_gradients, derive_seed, sample_gradients, total_loss, train, train_from, LabelVector, RunParams,
};
use mctformer::Execution;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        grid_side: 4,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        fuse_layers: 1,
        patch_size: 2,
        mlp_ratio: 2.0,
        variant,
        head_mode: HeadMode::AveragePool,
    }
}

fn dataset(cfg: &ModelConfig, seed: u64, count: usize) -> Vec<SyntheticSample> {
    generate_dataset(seed, count, &SceneGeometry::from(cfg), Execution::Sequential).unwrap()
}

#[test]
fn v2_loss_reaches_cam_kernels_and_class_tokens() {
    let cfg = small(Variant::V2);
    let params = ModelParameters::init(&cfg, 3).unwrap();
    let sample = &dataset(&cfg, 1, 1)[0];
    let (_, grads) = sample_gradients(&params, &cfg, sample).unwrap();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for wanted in ["cam_kernels", "cam_bias", "class_tokens", "patch_projection"] {
        let i = names.iter().position(|n| n == wanted).unwrap();
        assert!(grads[i].max_abs() > 0.0, "{wanted} gets no gradient");
    }
}

#[test]
fn total_loss_is_sum_for_v2_and_cls_only_for_v1() {
    let sample = &dataset(&small(Variant::V2), 2, 1)[0];
    for variant in [Variant::V1, Variant::V2] {
        let cfg = small(variant);
        let params = ModelParameters::init(&cfg, 5).unwrap();
        let rec = forward(&params, &cfg, &sample.image).unwrap();
        let parts = total_loss(&rec, &sample.labels, variant).unwrap();
        match variant {
            Variant::V1 => assert_eq!(parts.total, parts.cls),
            Variant::V2 => assert!((parts.total - parts.cls - parts.patch).abs() < 1e-15),
        }
    }
}

#[test]
fn v2_record_without_patch_scores_is_rejected() {
    let cfg = small(Variant::V1);
    let params = ModelParameters::init(&cfg, 5).unwrap();
    let sample = &dataset(&cfg, 2, 1)[0];
    let rec = forward(&params, &cfg, &sample.image).unwrap();
    assert!(total_loss(&rec, &sample.labels, Variant::V2).is_err());
}

#[test]
fn single_sample_overfits_within_twenty_steps() {
    let cfg = small(Variant::V2);
    let data = dataset(&cfg, 9, 1);
    let run = RunParams {
        epochs: 20,
        batch_size: 1,
        lr: 2e-3,
        ..RunParams::default()
    };
    let out = train(&data, &cfg, &run).unwrap();
    assert_eq!(out.trace.len(), 20);
    let first = out.trace[0].loss.total;
    let last = out.trace[19].loss.total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let cfg = small(Variant::V2);
    let params = ModelParameters::init(&cfg, 1).unwrap();
    let data = dataset(&cfg, 4, 3);
    let refs: Vec<&SyntheticSample> = data.iter().collect();
    let (loss, grads) = batch_gradients(&params, &cfg, &refs, Execution::Parallel).unwrap();
    let per: Vec<_> = data
        .iter()
        .map(|s| sample_gradients(&params, &cfg, s).unwrap())
        .collect();
    let mean_loss = per.iter().map(|(l, _)| l.total).sum::<f64>() / 3.0;
    assert!((loss.total - mean_loss).abs() < 1e-14);
    for (i, g) in grads.iter().enumerate() {
        let mut want = Tensor::zeros(g.shape());
        for (_, gs) in &per {
            want.add_assign(&gs[i]);
        }
        want.scale_in_place(1.0 / 3.0);
        for (a, b) in g.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn trained_scores_separate_present_from_absent_classes() {
    // 2×2 patches sit on a loss plateau for a long time; 4×4 ones get past it
    let cfg = ModelConfig {
        patch_size: 4,
        ..small(Variant::V1)
    };
    let train_set = dataset(&cfg, 10, 160);
    let test_set = dataset(&cfg, 11, 60);
    let run = RunParams {
        epochs: 40,
        lr: 2e-3,
        ..RunParams::default()
    };
    let init = ModelParameters::init(&cfg, derive_seed(run.seed, 1)).unwrap();
    let out = train_from(init, &train_set, &cfg, &run, |_, _| {}).unwrap();
    let recs = forward_all(&out.params, &cfg, &test_set, Execution::Parallel).unwrap();
    let separated = recs
        .iter()
        .zip(&test_set)
        .filter(|(r, s)| {
            let y = r.class_scores_cls.data();
            let lo_present = s.labels.present().map(|c| y[c]).fold(f64::INFINITY, f64::min);
            let hi_absent = (0..3)
                .filter(|&c| !s.labels.contains(c))
                .map(|c| y[c])
                .fold(f64::NEG_INFINITY, f64::max);
            lo_present > hi_absent
        })
        .count();
    assert!(
        separated as f64 >= 0.95 * test_set.len() as f64,
        "{separated}/{}",
        test_set.len()
    );
}

#[test]
fn labels_always_have_a_positive() {
    assert!(LabelVector::new(vec![false, false]).is_err());
    assert!(LabelVector::from_indices(2, &[1]).is_ok());
}

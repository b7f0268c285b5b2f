use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::network::{ModelConfig, NORM_EPS};
use crate::tensor::conv2d_forward;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv3(rng: &mut ChaCha8Rng, d: usize, c: usize) -> Conv {
    Conv {
        weight: rand_tensor(&[d, c, 3, 3], rng),
        bias: None,
        stride: 1,
        padding: 1,
    }
}

fn random_norm(rng: &mut ChaCha8Rng, d: usize) -> AffineNorm {
    AffineNorm {
        gamma: Tensor::from_fn(&[d], |_| rng.random_range(0.5..2.0)),
        beta: rand_tensor(&[d], rng),
        running_mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        running_var: (0..d).map(|_| rng.random_range(0.2..3.0)).collect(),
        eps: NORM_EPS,
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        image_height: 8,
        image_width: 8,
        widths: vec![4, 6],
        blocks_per_stage: vec![1, 2],
        embedding_dim: 5,
        num_classes: 3,
        with_compactors: true,
    }
}

/// A student with random norms, running stats and compactors.
fn perturbed_student(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::build(&small(), seed).unwrap();
    for b in &mut m.blocks {
        let d = b.inner_width();
        b.norm = Some(random_norm(&mut rng, d));
        let c = b.compactor.as_mut().unwrap();
        for v in c.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m.stem_norm = random_norm(&mut rng, 4);
    m
}

#[test]
fn identity_norm_fold_keeps_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = conv3(&mut rng, 3, 2);
    let mut norm = AffineNorm::new(3);
    norm.running_var = vec![1.0 - NORM_EPS; 3];
    let f = fold_norm(&conv, &norm).unwrap();
    assert!(f.weight.max_abs_diff(&conv.weight) < 1e-15);
    assert_eq!(f.bias.unwrap().data(), &[0.0; 3]);
}

#[test]
fn scale_only_fold_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let conv = conv3(&mut rng, 2, 2);
    let mut norm = AffineNorm::new(2);
    norm.gamma = Tensor::full(&[2], 2.0);
    norm.running_var = vec![1.0 - NORM_EPS; 2];
    let f = fold_norm(&conv, &norm).unwrap();
    let doubled = Tensor::from_fn(conv.weight.shape(), |i| 2.0 * conv.weight.data()[i]);
    assert!(f.weight.max_abs_diff(&doubled) < 1e-15);
}

#[test]
fn folded_forward_matches_conv_then_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let conv = conv3(&mut rng, 5, 3);
    let norm = random_norm(&mut rng, 5);
    let folded = fold_norm(&conv, &norm).unwrap();
    let x = rand_tensor(&[4, 3, 6, 6], &mut rng);
    let want = norm.forward(&conv.forward(&x).unwrap()).unwrap();
    assert!(folded.forward(&x).unwrap().max_abs_diff(&want) < 1e-10);
}

#[test]
fn fold_rejects_non_positive_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = conv3(&mut rng, 2, 2);
    let mut norm = AffineNorm::new(2);
    norm.running_var[1] = -1.0;
    assert!(fold_norm(&conv, &norm).is_err());
}

#[test]
fn identity_compactor_keeps_everything() {
    let p = prune_compactor(&Tensor::identity_kernel(5), 1e-5).unwrap();
    assert_eq!(p.kept, vec![0, 1, 2, 3, 4]);
    assert!(!p.forced);
}

#[test]
fn threshold_drops_small_row() {
    let c = Tensor::new(vec![2, 2, 1, 1], vec![1e-6, 0.0, 0.3, 0.4]).unwrap();
    let p = prune_compactor(&c, 1e-5).unwrap();
    assert_eq!(p.kept, vec![1]);
    assert_eq!(p.kernel.shape(), &[1, 2]);
    assert_eq!(p.kernel.data(), &[0.3, 0.4]);
}

#[test]
fn all_rows_below_threshold_keep_largest() {
    let c = Tensor::new(
        vec![3, 3, 1, 1],
        vec![1e-7, 0.0, 0.0, 0.0, 3e-7, 0.0, 0.0, 0.0, 2e-7],
    )
    .unwrap();
    let p = prune_compactor(&c, 1e-5).unwrap();
    assert_eq!(p.kept, vec![1]);
    assert!(p.forced);
}

#[test]
fn kept_set_matches_norm_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let d = 12;
        let mut c = rand_tensor(&[d, d, 1, 1], &mut rng);
        for i in 0..d {
            if rng.random_bool(0.5) {
                let s = 10f64.powf(rng.random_range(-9.0..-3.0));
                for v in c.row_mut(i) {
                    *v *= s;
                }
            }
        }
        let p = prune_compactor(&c, 1e-5).unwrap();
        let mut want = Vec::new();
        for i in 0..d {
            let mut sq = 0.0;
            for j in 0..d {
                sq += c.data()[i * d + j] * c.data()[i * d + j];
            }
            if sq.sqrt() >= 1e-5 {
                want.push(i);
            }
        }
        if want.is_empty() {
            assert!(p.forced);
        } else {
            assert_eq!(p.kept, want);
        }
    }
}

fn folded(rng: &mut ChaCha8Rng, d: usize, c: usize) -> Conv {
    let mut f = conv3(rng, d, c);
    f.bias = Some(rand_tensor(&[d], rng));
    f
}

#[test]
fn identity_merge_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = folded(&mut rng, 4, 3);
    let eye = Tensor::identity_kernel(4).reshape(&[4, 4]).unwrap();
    assert_eq!(merge(&f, &eye).unwrap(), f);
}

#[test]
fn two_to_one_merge_is_linear_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = folded(&mut rng, 2, 3);
    let (a, b) = (0.7, -1.3);
    let m = merge(&f, &Tensor::new(vec![1, 2], vec![a, b]).unwrap()).unwrap();
    for k in 0..27 {
        let want = a * f.weight.row(0)[k] + b * f.weight.row(1)[k];
        assert_eq!(m.weight.data()[k], want);
    }
    let fb = f.bias.as_ref().unwrap().data();
    assert_eq!(m.bias.unwrap().data()[0], a * fb[0] + b * fb[1]);
}

#[test]
fn merged_conv_matches_conv_then_compactor() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = folded(&mut rng, 8, 3);
    let slim = rand_tensor(&[3, 8], &mut rng);
    let m = merge(&f, &slim).unwrap();
    let kernel = slim.clone().reshape(&[3, 8, 1, 1]).unwrap();
    for _ in 0..50 {
        let x = rand_tensor(&[1, 3, 5, 5], &mut rng);
        let want = conv2d_forward(&f.forward(&x).unwrap(), &kernel, None, 1, 0).unwrap();
        assert!(m.forward(&x).unwrap().max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn merge_rejects_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = folded(&mut rng, 4, 3);
    assert!(merge(&f, &Tensor::zeros(&[2, 5])).is_err());
}

#[test]
fn thin_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = Conv {
        weight: rand_tensor(&[3, 2, 1, 1], &mut rng),
        bias: Some(rand_tensor(&[3], &mut rng)),
        stride: 1,
        padding: 0,
    };
    assert_eq!(thin_downstream(&c, &[0, 1]).unwrap(), c);
    let t = thin_downstream(&c, &[1]).unwrap();
    for o in 0..3 {
        assert_eq!(t.weight.row(o), &c.weight.row(o)[1..2]);
    }
    assert!(thin_downstream(&c, &[]).is_err());
    assert!(thin_downstream(&c, &[1, 0]).is_err());
}

#[test]
fn untrained_student_converts_to_backbone() {
    let teacher = Model::build(&small().teacher(), 11).unwrap();
    let student = Model::build(&small(), 11).unwrap();
    let conv = convert_model(&student, 1e-5).unwrap();
    assert_eq!(conv.report.pruned_channels(), 0);
    assert!(conv.report.deviation_vs_student < 1e-10);
    assert!(conv.report.deviation_vs_zeroed < 1e-10);
    let x = probe_batch(&student, 5, 1);
    let a = conv.slim.infer(&x).unwrap().embedding;
    let b = teacher.infer(&x).unwrap().embedding;
    assert!(a.max_abs_diff(&b) < 1e-10);
}

#[test]
fn zeroed_rows_are_pruned_exactly() {
    let mut student = perturbed_student(12);
    for (b, rows) in [(0, vec![1]), (1, vec![0, 2, 5]), (2, vec![3])] {
        let c = student.blocks[b].compactor.as_mut().unwrap();
        for r in rows {
            c.row_mut(r).fill(0.0);
        }
    }
    let conv = convert_model(&student, 1e-5).unwrap();
    assert_eq!(conv.report.pruned_channels(), 5);
    assert!(conv.report.deviation_vs_zeroed < 1e-10);
    assert!(conv.report.deviation_vs_student < 1e-10);
    assert!(conv.report.blocks.iter().all(|b| b.max_deviation < 1e-10));
    assert!(conv.report.params_slim < conv.report.params_backbone);
    assert!(conv.report.flops_slim < conv.report.flops_backbone);
    assert_eq!(conv.report.params_slim, conv.plan.projected_params);
    assert_eq!(conv.report.flops_slim, conv.plan.projected_flops);
}

#[test]
fn slim_block_matches_zero_forced_block() {
    let mut student = perturbed_student(13);
    let c = student.blocks[1].compactor.as_mut().unwrap();
    for r in [1, 4] {
        for v in c.row_mut(r) {
            *v *= 1e-7;
        }
    }
    let conv = convert_model(&student, 1e-5).unwrap();
    assert_eq!(conv.plan.blocks[1].kept, vec![0, 2, 3, 5]);
    let zeroed = zero_pruned(&student, &conv.plan);
    let x = probe_batch(&student, 4, 2);
    let a = conv.slim.infer(&x).unwrap();
    let b = zeroed.infer(&x).unwrap();
    assert!(a.embedding.max_abs_diff(&b.embedding) < 1e-10);
    // the tiny rows carried a little signal
    assert!(conv.report.deviation_vs_student > 0.0);
}

#[test]
fn model_without_compactors_rejected() {
    let teacher = Model::build(&small().teacher(), 0).unwrap();
    assert!(matches!(
        convert_model(&teacher, 1e-5),
        Err(Error::Compat(_))
    ));
}

#[test]
fn block_failure_names_block() {
    let mut student = perturbed_student(14);
    student.blocks[2].norm.as_mut().unwrap().running_var[0] = -5.0;
    match convert_model(&student, 1e-5) {
        Err(Error::Conversion { block, .. }) => assert_eq!(block, 2),
        other => panic!("unexpected {:?}", other.err()),
    }
}

#[test]
fn report_lists_channel_table() {
    let conv = convert_model(&perturbed_student(15), 1e-5).unwrap();
    let text = conv.report.to_string();
    assert!(text.contains("channels=4/4 6/6 6/6\n"));
    assert!(text.contains("params_reduction_pct="));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn raising_lambda_never_grows_width(seed in 0u64..1000, l1 in -9.0f64..-1.0, l2 in -9.0f64..-1.0) {
        let mut student = perturbed_student(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut student.blocks {
            let c = b.compactor.as_mut().unwrap();
            for i in 0..c.shape()[0] {
                let s = 10f64.powf(rng.random_range(-8.0..0.0));
                for v in c.row_mut(i) {
                    *v *= s;
                }
            }
        }
        let (lo, hi) = (10f64.powf(l1.min(l2)), 10f64.powf(l1.max(l2)));
        let a = convert_model(&student, lo).unwrap();
        let b = convert_model(&student, hi).unwrap();
        for (x, y) in a.plan.blocks.iter().zip(&b.plan.blocks) {
            prop_assert!(y.e <= x.e);
        }
        prop_assert_eq!(b.report.params_slim, b.plan.projected_params);
        prop_assert_eq!(b.report.flops_slim, b.plan.projected_flops);
    }
}

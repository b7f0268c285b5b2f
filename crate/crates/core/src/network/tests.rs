use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Tape, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        image_height: 8,
        image_width: 8,
        widths: vec![4, 6],
        blocks_per_stage: vec![1, 2],
        embedding_dim: 5,
        num_classes: 3,
        with_compactors: false,
    }
}

fn batch(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = cfg.input_shape();
    Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0))
}

fn run(model: &Model, x: &Tensor, mode: Mode) -> (Tape, ForwardResult) {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let input = tape.constant(x.clone());
    let out = model
        .forward_with_taps(&mut tape, &vars, input, mode)
        .unwrap();
    (tape, out)
}

#[test]
fn compactors_start_as_identity() {
    let m = Model::build(&small().student(), 1).unwrap();
    for b in &m.blocks {
        let d = b.inner_width();
        assert_eq!(b.compactor.as_ref().unwrap(), &Tensor::identity_kernel(d));
    }
}

#[test]
fn build_is_deterministic() {
    let a = Model::build(&small().student(), 7).unwrap();
    let b = Model::build(&small().student(), 7).unwrap();
    assert_eq!(a, b);
    let c = Model::build(&small().student(), 8).unwrap();
    assert_ne!(a.stem.weight, c.stem.weight);
}

#[test]
fn teacher_and_student_share_weights() {
    let t = Model::build(&small().teacher(), 3).unwrap();
    let s = Model::build(&small().student(), 3).unwrap();
    let tp: BTreeMap<_, _> = t.params().into_iter().collect();
    let mut compactors = 0;
    for (kind, tensor) in s.params() {
        match tp.get(&kind) {
            Some(w) => assert_eq!(*w, tensor, "{}", kind.name()),
            None => {
                assert!(matches!(kind, ParamKind::Compactor(_)));
                compactors += 1;
            }
        }
    }
    assert_eq!(compactors, s.num_blocks());
    assert_eq!(tp.len() + compactors, s.params().len());
}

#[test]
fn identity_student_taps_match_teacher() {
    let t = Model::build(&small().teacher(), 4).unwrap();
    let s = Model::build(&small().student(), 4).unwrap();
    let x = batch(3, &small(), 5);
    for mode in [Mode::Eval, Mode::Train] {
        let (tt, to) = run(&t, &x, mode);
        let (st, so) = run(&s, &x, mode);
        for (a, b) in to.block_features.iter().zip(&so.block_features) {
            assert!(tt.value(*a).max_abs_diff(st.value(*b)) < 1e-12);
        }
        assert!(tt.value(to.embedding).max_abs_diff(st.value(so.embedding)) < 1e-12);
    }
}

#[test]
fn single_sample_embedding_shape() {
    let m = Model::build(&small(), 0).unwrap();
    let (tape, out) = run(&m, &batch(1, &small(), 0), Mode::Eval);
    assert_eq!(tape.value(out.embedding).shape(), &[1, 5]);
    assert_eq!(tape.value(out.logits).shape(), &[1, 3]);
}

#[test]
fn taps_are_gap_of_stored_maps() {
    let m = Model::build(&small().student(), 9).unwrap();
    let (tape, out) = run(&m, &batch(2, &small(), 10), Mode::Train);
    for (f, map) in out.block_features.iter().zip(&out.block_maps) {
        let map = tape.value(*map);
        let s = map.shape();
        let hw = s[2] * s[3];
        let feat = tape.value(*f);
        for n in 0..s[0] {
            for c in 0..s[1] {
                let start = (n * s[1] + c) * hw;
                let mean = map.data()[start..start + hw].iter().sum::<f64>() / hw as f64;
                assert!((feat.data()[n * s[1] + c] - mean).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn tap_count_equals_block_count() {
    for blocks in [vec![1], vec![2, 1], vec![1, 1, 3]] {
        let cfg = ModelConfig {
            widths: vec![4; blocks.len()],
            blocks_per_stage: blocks.clone(),
            ..small()
        };
        let m = Model::build(&cfg, 0).unwrap();
        let (_, out) = run(&m, &batch(2, &cfg, 1), Mode::Eval);
        assert_eq!(out.block_features.len(), blocks.iter().sum::<usize>());
    }
}

#[test]
fn zero_width_rejected() {
    let cfg = ModelConfig {
        widths: vec![4, 0],
        ..small()
    };
    assert!(matches!(
        Model::build(&cfg, 0),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn wrong_input_shape_rejected() {
    let m = Model::build(&small(), 0).unwrap();
    let bad = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(matches!(m.infer(&bad), Err(crate::Error::Shape { .. })));
}

#[test]
fn infer_matches_taped_eval() {
    let m = Model::build(&small().student(), 2).unwrap();
    let x = batch(3, &small(), 3);
    let (tape, out) = run(&m, &x, Mode::Eval);
    let inf = m.infer(&x).unwrap();
    assert_eq!(&inf.embedding, tape.value(out.embedding));
    assert_eq!(&inf.block_features[2], tape.value(out.block_features[2]));
}

#[test]
fn named_tensors_round_trip() {
    let mut m = Model::build(&small().student(), 5).unwrap();
    m.blocks[1].norm.as_mut().unwrap().running_mean[0] = 0.25;
    let named: BTreeMap<_, _> = m.to_named_tensors().into_iter().collect();
    let back = Model::from_named_tensors(&small(), &named).unwrap();
    assert_eq!(back, m);
}

#[test]
fn missing_tensor_is_compat_error() {
    let m = Model::build(&small(), 5).unwrap();
    let mut named: BTreeMap<_, _> = m.to_named_tensors().into_iter().collect();
    named.remove("blocks.1.conv1.weight");
    let err = Model::from_named_tensors(&small(), &named).unwrap_err();
    assert!(err.to_string().contains("blocks.1.conv1.weight"));
}

#[test]
fn running_stats_move_toward_batch() {
    let mut m = Model::build(&small(), 0).unwrap();
    let (_, out) = run(&m, &batch(4, &small(), 1), Mode::Train);
    assert_eq!(out.norm_stats.len(), 1 + m.num_blocks());
    let want = 0.1 * out.norm_stats[0].mean[0];
    m.update_running_stats(&out.norm_stats);
    assert!((m.stem_norm.running_mean[0] - want).abs() < 1e-15);
}

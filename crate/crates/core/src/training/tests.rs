use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::DatasetSpec;
use crate::network::ModelConfig;
use crate::tensor::Var;

fn schedule() -> Schedule {
    Schedule {
        epochs: 10,
        batches_per_epoch: 4,
        identities_per_batch: 2,
        samples_per_identity: 2,
        base_lr: 1e-3,
        peak_lr: 1e-2,
        warmup_epochs: 2,
        momentum: 0.9,
        weight_decay: 5e-4,
    }
}

fn tiny_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.data = DatasetSpec {
        num_identities: 6,
        images_per_identity: 6,
        height: 8,
        width: 8,
        jitter: 0.5,
        ..DatasetSpec::default()
    };
    run.model.widths = vec![4, 6];
    run.model.blocks_per_stage = vec![1, 1];
    run.model.embedding_dim = 6;
    run.teacher = schedule();
    run.teacher.epochs = 3;
    run.distill.epochs = 3;
    run.distill.batches_per_epoch = 3;
    run.distill.warmup_epochs = 1;
    run.distill.identities_per_batch = 2;
    run.distill.samples_per_identity = 2;
    run.distill.rggr_activation_epoch = 1;
    run.distill.queue_capacity = 16;
    run
}

#[test]
fn lr_schedule_points() {
    let s = schedule();
    assert_eq!(lr_at(0, &s), 1e-3);
    assert!((lr_at(4, &s) - (1e-3 + 9e-3 / 2.0)).abs() < 1e-15);
    assert!((lr_at(8, &s) - 1e-2).abs() < 1e-15);
    // cosine phase spans epochs 2..10, midpoint at epoch 6 = step 24
    assert!((lr_at(24, &s) - 5e-3).abs() < 1e-15);
    assert!(lr_at(40, &s).abs() < 1e-18);
    assert!(lr_at(1000, &s).abs() < 1e-18);
}

#[test]
fn mode_names_round_trip() {
    for m in TrainMode::ALL {
        assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
    }
    assert!("cdd-rggr".parse::<TrainMode>().is_err());
}

fn one_param(v: Vec<f64>) -> (Tensor, OptimizerState) {
    let t = Tensor::new(vec![v.len()], v).unwrap();
    let state = OptimizerState {
        velocity: vec![(ParamKind::EmbedBias, Tensor::zeros(t.shape()))],
        step: 0,
    };
    (t, state)
}

#[test]
fn sgd_plain_step() {
    let (mut p, mut st) = one_param(vec![1.0, -2.0]);
    let g = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
    let hp = Sgd {
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    sgd_step(
        &mut [(ParamKind::EmbedBias, &mut p)],
        &[g],
        &mut st,
        hp,
        &BTreeMap::new(),
    )
    .unwrap();
    assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    let hp = Sgd {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let (mut q, mut st) = one_param(vec![3.0]);
    sgd_step(
        &mut [(ParamKind::EmbedBias, &mut q)],
        &[Tensor::zeros(&[1])],
        &mut st,
        hp,
        &BTreeMap::new(),
    )
    .unwrap();
    assert_eq!(q.data(), &[3.0]);
}

#[test]
fn sgd_momentum_matches_unrolled_recurrence() {
    let (mut p, mut st) = one_param(vec![1.0]);
    let (lr, m, wd) = (0.1, 0.9, 0.01);
    let gs = [0.5, -0.2, 0.3];
    for g in gs {
        let g = Tensor::new(vec![1], vec![g]).unwrap();
        let hp = Sgd {
            lr,
            momentum: m,
            weight_decay: wd,
        };
        sgd_step(
            &mut [(ParamKind::EmbedBias, &mut p)],
            &[g],
            &mut st,
            hp,
            &BTreeMap::new(),
        )
        .unwrap();
    }
    let p0 = 1.0;
    let v1 = gs[0] + wd * p0;
    let p1 = p0 - lr * v1;
    let v2 = m * v1 + gs[1] + wd * p1;
    let p2 = p1 - lr * v2;
    let v3 = m * v2 + gs[2] + wd * p2;
    let p3 = p2 - lr * v3;
    assert_eq!(p.data(), &[p3]);
    assert_eq!(st.step, 3);
}

#[test]
fn sgd_rejects_non_finite_without_mutation() {
    let (mut p, mut st) = one_param(vec![1.0, 2.0]);
    let g = Tensor::new(vec![2], vec![0.1, f64::NAN]).unwrap();
    let hp = Sgd {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let err = sgd_step(
        &mut [(ParamKind::EmbedBias, &mut p)],
        &[g],
        &mut st,
        hp,
        &BTreeMap::new(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref m) if m.contains("embed.bias")));
    assert_eq!(p.data(), &[1.0, 2.0]);
    assert_eq!(st.step, 0);
}

#[test]
fn masked_rows_skip_weight_decay() {
    let mut w = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
    let mut st = OptimizerState {
        velocity: vec![(ParamKind::Compactor(0), Tensor::zeros(&[2, 1, 1, 1]))],
        step: 0,
    };
    let mut masks = BTreeMap::new();
    masks.insert(
        ParamKind::Compactor(0),
        ChannelMask::from_unimportant(2, &[1]),
    );
    let hp = Sgd {
        lr: 0.5,
        momentum: 0.0,
        weight_decay: 0.1,
    };
    sgd_step(
        &mut [(ParamKind::Compactor(0), &mut w)],
        &[Tensor::zeros(&[2, 1, 1, 1])],
        &mut st,
        hp,
        &masks,
    )
    .unwrap();
    assert_eq!(w.data(), &[1.0 - 0.5 * 0.1, 1.0]);
}

#[test]
fn reset_gradient_examples() {
    let w = Tensor::new(vec![3, 2, 1, 1], vec![3.0, 4.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let g = Tensor::new(vec![3, 2, 1, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let alpha = 0.004;
    let mask = ChannelMask::from_unimportant(3, &[1, 2]);
    let mut out = g.clone();
    reset_gradients(&mut out, &w, &mask, alpha).unwrap();
    // row 0 kept: G + α·W/‖W‖
    assert_eq!(out.row(0), &[0.1 + alpha * 0.6, 0.2 + alpha * 0.8]);
    // row 1 masked with zero weight: nothing
    assert_eq!(out.row(1), &[0.0, 0.0]);
    // row 2 masked: penalty only
    assert_eq!(out.row(2), &[alpha, 0.0]);
    assert!(reset_gradients(&mut g.clone(), &w, &ChannelMask::ones(2), alpha).is_err());
}

#[test]
fn masked_row_decays_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut w = Tensor::from_fn(&[2, 2, 1, 1], |_| rng.random_range(-1.0..1.0));
    let mut st = OptimizerState {
        velocity: vec![(ParamKind::Compactor(0), Tensor::zeros(&[2, 2, 1, 1]))],
        step: 0,
    };
    let (lr, alpha) = (0.05, 0.5);
    let mask = ChannelMask::from_unimportant(2, &[0]);
    let mut masks = BTreeMap::new();
    masks.insert(ParamKind::Compactor(0), mask.clone());
    let hp = Sgd {
        lr,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let mut norm = losses::row_norms(&w)[0];
    while norm > lr * alpha {
        let mut g = Tensor::from_fn(&[2, 2, 1, 1], |_| rng.random_range(-1.0..1.0));
        reset_gradients(&mut g, &w, &mask, alpha).unwrap();
        sgd_step(
            &mut [(ParamKind::Compactor(0), &mut w)],
            &[g],
            &mut st,
            hp,
            &masks,
        )
        .unwrap();
        let next = losses::row_norms(&w)[0];
        assert!((norm - next - lr * alpha).abs() < 1e-12);
        norm = next;
    }
}

#[test]
fn reset_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Tensor::from_fn(&[4, 4, 1, 1], |_| rng.random_range(-1.0..1.0));
    let x = Tensor::from_fn(&[3, 4, 2, 2], |_| rng.random_range(-1.0..1.0));
    let t = Tensor::from_fn(&[3, 4, 2, 2], |_| rng.random_range(-1.0..1.0));
    let mask = ChannelMask::from_unimportant(4, &[1, 3]);
    let alpha = 0.3;
    // a retrieval-like loss of the kernel: squared distance to a target map
    let acc = |tape: &mut Tape, w: Var| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let tv = tape.constant(t.clone());
        let y = crate::tensor::conv2d(tape, xv, w, None, 1, 0)?;
        losses::mean_squared(tape, y, tv)
    };
    let mut tape = Tape::new();
    let wv = tape.param(w.clone());
    let l = acc(&mut tape, wv).unwrap();
    tape.backward(l).unwrap();
    let mut g = tape.grad_tensor(wv);
    reset_gradients(&mut g, &w, &mask, alpha).unwrap();

    // J(V) = L_acc(rows of V where M = 1, rows of W elsewhere) + α·Σ‖V_i‖
    let objective = |v: &Tensor| -> f64 {
        let mixed = Tensor::from_fn(v.shape(), |i| {
            if mask.get(i / 4) {
                v.data()[i]
            } else {
                w.data()[i]
            }
        });
        let mut tape = Tape::new();
        let mv = tape.constant(mixed);
        let a = acc(&mut tape, mv).unwrap();
        tape.value(a).item() + alpha * losses::row_norms(v).iter().sum::<f64>()
    };
    let h = 1e-6;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let a = g.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        assert!(rel < 1e-4, "element {i}: {a} vs {fd}");
    }
}

fn tiny_dataset(run: &RunConfig) -> Dataset {
    Dataset::generate(&run.data).unwrap()
}

#[test]
fn resume_reproduces_next_step() {
    let run = tiny_run();
    let ds = tiny_dataset(&run);
    let cfg = TrainConfig::from_run(&run, TrainMode::Teacher);
    let model = Model::build(&run.model_config(false), 3).unwrap();
    let mut full =
        Trainer::new_teacher(cfg.clone(), &ds, run.augment.clone(), model.clone()).unwrap();
    let mut sink = MemorySink::default();
    full.train_steps(6, &mut sink).unwrap();

    let mut first = Trainer::new_teacher(cfg.clone(), &ds, run.augment.clone(), model).unwrap();
    first.train_steps(5, &mut NullSink).unwrap();
    let named: BTreeMap<_, _> = first
        .model
        .to_named_tensors()
        .into_iter()
        .chain(first.opt.to_named_tensors())
        .collect();
    let restored = Model::from_named_tensors(&run.model_config(false), &named).unwrap();
    let mut resumed = Trainer::new_teacher(cfg, &ds, run.augment.clone(), restored).unwrap();
    resumed.opt =
        OptimizerState::from_named_tensors(&resumed.model, first.opt.step, &named).unwrap();
    let mut rs = MemorySink::default();
    resumed.train_steps(1, &mut rs).unwrap();
    assert_eq!(rs.steps[0], sink.steps[5]);
    assert_eq!(resumed.model, full.model);
}

#[test]
fn teacher_training_is_deterministic() {
    let run = tiny_run();
    let ds = tiny_dataset(&run);
    let cfg = TrainConfig::from_run(&run, TrainMode::Teacher);
    let model = Model::build(&run.model_config(false), 3).unwrap();
    let mut a = Trainer::new_teacher(cfg.clone(), &ds, run.augment.clone(), model.clone()).unwrap();
    let mut b = Trainer::new_teacher(cfg, &ds, run.augment.clone(), model).unwrap();
    let ra = a.train_steps(8, &mut NullSink).unwrap();
    let rb = b.train_steps(8, &mut NullSink).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 2);
}

#[test]
fn teacher_separates_two_classes() {
    let mut run = tiny_run();
    run.data.num_identities = 4;
    run.data.jitter = 0.2;
    run.teacher.epochs = 2;
    run.teacher.warmup_epochs = 0;
    run.teacher.batches_per_epoch = 30;
    run.teacher.peak_lr = 0.05;
    let ds = tiny_dataset(&run);
    assert_eq!(ds.counts.train_ids, 2);
    let model = Model::build(&run.model_config(false), 0).unwrap();
    let mut cfg = TrainConfig::from_run(&run, TrainMode::Teacher);
    cfg.schedule.epochs = 1;
    let mut tr = Trainer::new_teacher(cfg, &ds, AugmentOps::none(), model).unwrap();
    tr.run(&mut NullSink).unwrap();
    assert!(train_accuracy(&tr.model, &ds).unwrap() > 0.9);
}

fn distill_trainer<'a>(
    run: &RunConfig,
    ds: &'a Dataset,
    teacher: &'a Model,
    mode: TrainMode,
) -> Trainer<'a> {
    let student = initial_student(run, teacher, mode).unwrap();
    Trainer::new_distill(
        TrainConfig::from_run(run, mode),
        ds,
        run.augment.clone(),
        teacher,
        student,
    )
    .unwrap()
}

#[test]
fn copied_student_starts_with_zero_distillation_loss() {
    let mut run = tiny_run();
    run.distill.alpha = 0.0;
    let ds = tiny_dataset(&run);
    let teacher = Model::build(&run.model_config(false), 5).unwrap();
    let mut tr = distill_trainer(&run, &ds, &teacher, TrainMode::Cdd);
    // eval-mode student: identical function to the teacher
    let x = ds.train_batch(&[0, 1, 6, 7], &run.augment, 3).unwrap();
    let t = teacher.infer(&x).unwrap();
    let s = tr.model.infer(&x).unwrap();
    let mut tape = Tape::new();
    let tf: Vec<_> = t
        .block_features
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    let sf: Vec<_> = s
        .block_features
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    let dl = losses::loss_dl(&mut tape, &tf, &sf).unwrap();
    let (tl, sl) = (tape.constant(t.logits), tape.constant(s.logits));
    let kl = losses::loss_kl(&mut tape, sl, tl, 1.0).unwrap();
    assert_eq!(tape.value(dl).item(), 0.0);
    assert!(tape.value(kl).item().abs() < 1e-15);
    // the taped training step still runs
    tr.train_steps(1, &mut NullSink).unwrap();
}

#[test]
fn teacher_is_untouched_by_distillation() {
    let run = tiny_run();
    let ds = tiny_dataset(&run);
    let teacher = Model::build(&run.model_config(false), 5).unwrap();
    let before = teacher.clone();
    for mode in [TrainMode::Cdd, TrainMode::CddRggr, TrainMode::CddNoDgc] {
        let mut tr = distill_trainer(&run, &ds, &teacher, mode);
        tr.train_steps(4, &mut NullSink).unwrap();
        assert_ne!(tr.model.stem.weight, before.stem.weight);
    }
    assert_eq!(teacher, before);
}

#[test]
fn penalty_only_run_shrinks_lasso() {
    // no retrieval signal: every compactor row masked, penalty alone acts
    let mut run = tiny_run();
    run.distill.alpha = 0.01;
    let mut w = Tensor::identity_kernel(4);
    let mut st = OptimizerState {
        velocity: vec![(ParamKind::Compactor(0), Tensor::zeros(w.shape()))],
        step: 0,
    };
    let mut last = losses::row_norms(&w).iter().sum::<f64>();
    for step in 0..run.distill.batches_per_epoch as u64 {
        let mut g = Tensor::zeros(w.shape());
        reset_gradients(&mut g, &w, &ChannelMask::ones(4), run.distill.alpha).unwrap();
        let hp = Sgd {
            lr: lr_at(step, &run.distill.schedule()),
            momentum: run.distill.momentum,
            weight_decay: 0.0,
        };
        sgd_step(
            &mut [(ParamKind::Compactor(0), &mut w)],
            &[g],
            &mut st,
            hp,
            &BTreeMap::new(),
        )
        .unwrap();
        let now = losses::row_norms(&w).iter().sum::<f64>();
        assert!(now < last);
        last = now;
    }
}

#[test]
fn rggr_logs_masks_only_after_activation() {
    let run = tiny_run();
    let ds = tiny_dataset(&run);
    let teacher = Model::build(&run.model_config(false), 5).unwrap();
    let mut sink = MemorySink::default();
    distill_trainer(&run, &ds, &teacher, TrainMode::CddRggr)
        .run(&mut sink)
        .unwrap();
    for r in &sink.steps {
        assert_eq!(r.masks.is_some(), r.epoch >= 1, "step {}", r.step);
        assert_eq!(r.to_string().contains("mask.0.selected="), r.epoch >= 1);
    }
    let mut sink = MemorySink::default();
    distill_trainer(&run, &ds, &teacher, TrainMode::Cdd)
        .run(&mut sink)
        .unwrap();
    assert!(sink.steps.iter().all(|r| r.masks.is_none()));
    assert_eq!(sink.epochs.len(), 3);
    assert!(sink.steps.iter().all(|r| r.losses.l_np > 0.0));
}

#[test]
fn all_ones_masks_with_zero_alpha_match_plain_cdd() {
    let mut run = tiny_run();
    run.distill.alpha = 0.0;
    run.distill.p = 1e-9;
    let ds = tiny_dataset(&run);
    let teacher = Model::build(&run.model_config(false), 5).unwrap();
    let mut a = distill_trainer(&run, &ds, &teacher, TrainMode::Cdd);
    let mut b = distill_trainer(&run, &ds, &teacher, TrainMode::CddRggr);
    a.run(&mut NullSink).unwrap();
    let mut sink = MemorySink::default();
    b.run(&mut sink).unwrap();
    assert!(sink
        .steps
        .iter()
        .filter_map(|r| r.masks.as_ref())
        .flatten()
        .all(|m| m.selected == 0));
    assert_eq!(a.model, b.model);
}

#[test]
fn no_dgc_penalises_conv3() {
    let run = tiny_run();
    let teacher = Model::build(&run.model_config(false), 5).unwrap();
    let s = initial_student(&run, &teacher, TrainMode::CddNoDgc).unwrap();
    assert!(!s.has_compactors());
    assert_eq!(
        penalty_targets(&s, TrainMode::CddNoDgc),
        vec![ParamKind::Conv3Weight(0), ParamKind::Conv3Weight(1)]
    );
    let s = initial_student(&run, &teacher, TrainMode::Cdd).unwrap();
    assert_eq!(
        penalty_targets(&s, TrainMode::Cdd),
        vec![ParamKind::Compactor(0), ParamKind::Compactor(1)]
    );
}

#[test]
fn mismatched_student_rejected() {
    let run = tiny_run();
    let ds = tiny_dataset(&run);
    let teacher = Model::build(&run.model_config(false), 5).unwrap();
    let plain = initial_student(&run, &teacher, TrainMode::CddNoDgc).unwrap();
    let cfg = TrainConfig::from_run(&run, TrainMode::Cdd);
    assert!(matches!(
        Trainer::new_distill(cfg, &ds, AugmentOps::none(), &teacher, plain),
        Err(Error::Compat(_))
    ));
    let wide = ModelConfig {
        widths: vec![4, 8],
        ..run.model_config(true)
    };
    let other = Model::build(&wide, 0).unwrap();
    let cfg = TrainConfig::from_run(&run, TrainMode::Cdd);
    assert!(Trainer::new_distill(cfg, &ds, AugmentOps::none(), &teacher, other).is_err());
}

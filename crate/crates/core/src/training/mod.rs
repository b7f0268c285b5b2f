//! Teacher training, distillation with gradient resetting, SGD and the
//! learning-rate schedule.
//!
//! A distillation step backpropagates only the retrieval objective
//! `½·L_dl + L_id + L_tri + L_kl`, then adds the analytic lasso gradient
//! `α·W_i/‖W_i‖` to every row of the sparsified kernels. With resetting
//! active, the retrieval gradient of a row whose mask bit is 0 is dropped
//! first, so only the penalty acts on it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::config::{LossConfig, RunConfig, Schedule, StudentInit, DEFAULT_LAMBDA};
use crate::data::{derive_seed, pk_batches, AugmentOps, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossParts, LossVars};
use crate::metrics::{pct, EvalReport};
use crate::network::{Mode, Model, ParamKind};
use crate::rggr::{self, ChannelMask, GalleryQueue};
use crate::tensor::{Tape, Tensor};

/// Seed stream offset for per-step augmentation.
const AUGMENT_STREAM: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Teacher,
    Cdd,
    CddRggr,
    CddNoDgc,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Teacher,
        TrainMode::Cdd,
        TrainMode::CddRggr,
        TrainMode::CddNoDgc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Teacher => "teacher",
            TrainMode::Cdd => "cdd",
            TrainMode::CddRggr => "cdd_rggr",
            TrainMode::CddNoDgc => "cdd_no_dgc",
        }
    }

    /// Whether the trained network carries compactors.
    pub fn uses_compactors(self) -> bool {
        matches!(self, TrainMode::Cdd | TrainMode::CddRggr)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected teacher, cdd, cdd_rggr or cdd_no_dgc"
                ))
            })
    }
}

/// Everything a training loop needs besides data and models.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub rggr_activation_epoch: usize,
    pub alpha: f64,
    pub p: f64,
    pub top_k: usize,
    pub queue_capacity: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig, mode: TrainMode) -> Self {
        let d = &run.distill;
        Self {
            schedule: if mode == TrainMode::Teacher {
                run.teacher
            } else {
                d.schedule()
            },
            loss: run.loss,
            rggr_activation_epoch: d.rggr_activation_epoch,
            alpha: d.alpha,
            p: d.p,
            top_k: d.top_k,
            queue_capacity: d.queue_capacity,
            seed: run.seed,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate(self.mode.as_str())?;
        if self.rggr_activation_epoch > self.schedule.epochs {
            return Err(Error::Config(format!(
                "rggr_activation_epoch {} exceeds epochs {}",
                self.rggr_activation_epoch, self.schedule.epochs
            )));
        }
        Ok(())
    }
}

/// Linear warmup from `base_lr` to `peak_lr`, then cosine decay to 0 at the
/// final epoch. Epochs are fractional: `step / batches_per_epoch`.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    let epoch = step as f64 / s.batches_per_epoch as f64;
    let warm = s.warmup_epochs as f64;
    if epoch < warm {
        return s.base_lr + (s.peak_lr - s.base_lr) * epoch / warm;
    }
    let t = ((epoch - warm) / (s.epochs as f64 - warm)).clamp(0.0, 1.0);
    s.peak_lr * (1.0 + (PI * t).cos()) / 2.0
}

/// Momentum buffers aligned with [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<(ParamKind, Tensor)>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: model
                .params()
                .into_iter()
                .map(|(k, t)| (k, Tensor::zeros(t.shape())))
                .collect(),
            step: 0,
        }
    }

    /// Buffers named `opt.<parameter name>`.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        self.velocity
            .iter()
            .map(|(k, t)| (format!("opt.{}", k.name()), t.clone()))
            .collect()
    }

    pub fn from_named_tensors(
        model: &Model,
        step: u64,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let velocity = model
            .params()
            .into_iter()
            .map(|(k, p)| {
                let name = format!("opt.{}", k.name());
                match tensors.get(&name) {
                    Some(t) if t.shape() == p.shape() => Ok((k, t.clone())),
                    Some(t) => Err(Error::Compat(format!(
                        "{name} has shape {:?}, parameter has {:?}",
                        t.shape(),
                        p.shape()
                    ))),
                    None => Err(Error::Compat(format!("missing tensor {name}"))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { velocity, step })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← momentum·v + g + wd·θ; θ ← θ − lr·v`.
///
/// Rows (leading axis) whose bit in `decay_masks` is 0 receive no weight
/// decay. Any non-finite gradient aborts before a parameter changes.
pub fn sgd_step(
    params: &mut [(ParamKind, &mut Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    hp: Sgd,
    decay_masks: &BTreeMap<ParamKind, ChannelMask>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step got {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((kind, p), (g, (vk, v))) in params.iter().zip(grads.iter().zip(&state.velocity)) {
        if p.shape() != g.shape() || p.shape() != v.shape() || kind != vk {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", kind.name())));
        }
    }
    for ((kind, p), (g, (_, v))) in params.iter_mut().zip(grads.iter().zip(&mut state.velocity)) {
        let row = p.len() / p.shape()[0];
        let mask = decay_masks.get(kind);
        let (pd, vd) = (p.data_mut(), v.data_mut());
        for (i, (pv, (gv, vv))) in pd
            .iter_mut()
            .zip(g.data().iter().zip(vd.iter_mut()))
            .enumerate()
        {
            let decay = match mask {
                Some(m) if !m.get(i / row) => 0.0,
                _ => hp.weight_decay * *pv,
            };
            *vv = hp.momentum * *vv + gv + decay;
            *pv -= hp.lr * *vv;
        }
    }
    state.step += 1;
    Ok(())
}

/// `Ĝ_i = G_i·M_i + α·W_i/‖W_i‖` for each row `i` of `weight`, in place.
pub fn reset_gradients(
    grad: &mut Tensor,
    weight: &Tensor,
    mask: &ChannelMask,
    alpha: f64,
) -> Result<()> {
    let rows = weight.shape()[0];
    if mask.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "mask of length {} for {rows} rows",
            mask.len()
        )));
    }
    if grad.shape() != weight.shape() {
        return Err(Error::Shape {
            op: "reset_gradients",
            lhs: grad.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let lasso = losses::group_lasso_grad(weight);
    for i in 0..rows {
        let m = mask.value(i);
        for (g, l) in grad.row_mut(i).iter_mut().zip(lasso.row(i)) {
            *g = *g * m + alpha * l;
        }
    }
    Ok(())
}

/// Parameters carrying the sparsity penalty in `mode`.
pub fn penalty_targets(model: &Model, mode: TrainMode) -> Vec<ParamKind> {
    (0..model.num_blocks())
        .filter_map(|b| match mode {
            TrainMode::Cdd | TrainMode::CddRggr => model.blocks[b]
                .compactor
                .is_some()
                .then_some(ParamKind::Compactor(b)),
            TrainMode::CddNoDgc => Some(ParamKind::Conv3Weight(b)),
            TrainMode::Teacher => None,
        })
        .collect()
}

/// Mask statistics of one block at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskStat {
    pub selected: usize,
    pub empty: bool,
    pub ones: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub masks: Option<Vec<MaskStat>>,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.losses;
        write!(
            f,
            "step={} epoch={} lr={:.6e} l_dl={:.6e} l_id={:.6e} l_tri={:.6e} l_kl={:.6e} l_np={:.6e} l_total={:.6e}",
            self.step, self.epoch, self.lr, l.l_dl, l.l_id, l.l_tri, l.l_kl, l.l_np, l.l_total
        )?;
        if let Some(masks) = &self.masks {
            for (b, m) in masks.iter().enumerate() {
                write!(
                    f,
                    " mask.{b}.selected={} mask.{b}.empty={} mask.{b}.ones={}",
                    m.selected, m.empty as u8, m.ones
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Means over the epoch's steps.
    pub losses: LossBreakdown,
    pub eval: EvalReport,
    /// Per penalised kernel: rows with norm ≥ the default pruning threshold.
    pub live: Vec<usize>,
    /// Per penalised kernel: sum of row norms.
    pub norm_sum: Vec<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.losses;
        let live: Vec<String> = self.live.iter().map(|v| v.to_string()).collect();
        let norms: Vec<String> = self.norm_sum.iter().map(|v| format!("{v:.6e}")).collect();
        write!(
            f,
            "epoch={} steps={} lr={:.6e} l_dl={:.6e} l_id={:.6e} l_tri={:.6e} l_kl={:.6e} l_np={:.6e} l_total={:.6e} map_pct={} r1_pct={} live={} norm_sum={}",
            self.epoch,
            self.steps,
            self.lr,
            l.l_dl,
            l.l_id,
            l.l_tri,
            l.l_kl,
            l.l_np,
            l.l_total,
            pct(self.eval.map),
            pct(self.eval.r1),
            live.join(","),
            norms.join(",")
        )
    }
}

/// Receives progress from a training loop.
pub trait Sink {
    fn step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after each completed epoch with the trainer in a resumable state.
    fn epoch(&mut self, _record: &EpochRecord, _trainer: &Trainer<'_>) -> Result<()> {
        Ok(())
    }
}

/// Discards all progress.
pub struct NullSink;

impl Sink for NullSink {}

/// Keeps every record in memory.
#[derive(Default)]
pub struct MemorySink {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl Sink for MemorySink {
    fn step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }

    fn epoch(&mut self, record: &EpochRecord, _trainer: &Trainer<'_>) -> Result<()> {
        self.epochs.push(record.clone());
        Ok(())
    }
}

/// Query/gallery retrieval quality of `model` on the evaluation split.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    let q = dataset.indices(Split::Query);
    let g = dataset.indices(Split::Gallery);
    let qe = model.infer(&dataset.eval_batch(&q)?)?.embedding;
    let ge = model.infer(&dataset.eval_batch(&g)?)?.embedding;
    EvalReport::from_embeddings(
        model,
        &qe,
        &dataset.labels_of(&q),
        &ge,
        &dataset.labels_of(&g),
    )
}

/// Classification accuracy on the normalised training split.
pub fn train_accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    let idx = dataset.indices(Split::Train);
    let logits = model.infer(&dataset.eval_batch(&idx)?)?.logits;
    let hits = idx
        .iter()
        .enumerate()
        .filter(|(k, &i)| {
            let row = logits.row(*k);
            let arg = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            arg == dataset.labels[i]
        })
        .count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Student initialised from the teacher: same weights and statistics, with
/// identity compactors when `compactors` is set.
pub fn student_from_teacher(teacher: &Model, compactors: bool) -> Model {
    let mut s = teacher.clone();
    s.config.with_compactors = compactors;
    for b in &mut s.blocks {
        b.compactor = compactors.then(|| Tensor::identity_kernel(b.inner_width()));
    }
    s
}

/// Build the initial student for a distillation mode.
pub fn initial_student(run: &RunConfig, teacher: &Model, mode: TrainMode) -> Result<Model> {
    let compactors = mode.uses_compactors();
    match run.distill.student_init {
        StudentInit::Teacher => Ok(student_from_teacher(teacher, compactors)),
        StudentInit::Random => {
            Model::build(&run.model_config(compactors), derive_seed(run.seed, 7))
        }
    }
}

#[derive(Default)]
struct Accum {
    steps: usize,
    sums: [f64; 6],
}

impl Accum {
    fn add(&mut self, l: &LossBreakdown) {
        self.steps += 1;
        for (s, v) in self
            .sums
            .iter_mut()
            .zip([l.l_dl, l.l_id, l.l_tri, l.l_kl, l.l_np, l.l_total])
        {
            *s += v;
        }
    }

    fn mean(&self, alpha: f64) -> LossBreakdown {
        let n = self.steps.max(1) as f64;
        let m = self.sums.map(|s| s / n);
        LossBreakdown {
            l_dl: m[0],
            l_id: m[1],
            l_tri: m[2],
            l_kl: m[3],
            l_np: m[4],
            alpha,
            l_total: m[5],
        }
    }
}

/// One training run: a trained model, its optimiser state, and for
/// distillation a frozen teacher with per-block gallery queues.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub dataset: &'a Dataset,
    pub augment: AugmentOps,
    pub teacher: Option<&'a Model>,
    pub model: Model,
    pub opt: OptimizerState,
    pub queues: Vec<GalleryQueue>,
    accum: Accum,
}

impl<'a> Trainer<'a> {
    pub fn new_teacher(
        config: TrainConfig,
        dataset: &'a Dataset,
        augment: AugmentOps,
        model: Model,
    ) -> Result<Self> {
        if config.mode != TrainMode::Teacher {
            return Err(Error::Config(format!(
                "teacher training with mode {}",
                config.mode
            )));
        }
        Self::new(config, dataset, augment, None, model)
    }

    pub fn new_distill(
        config: TrainConfig,
        dataset: &'a Dataset,
        augment: AugmentOps,
        teacher: &'a Model,
        student: Model,
    ) -> Result<Self> {
        if config.mode == TrainMode::Teacher {
            return Err(Error::Config("distillation needs a student mode".into()));
        }
        if config.mode.uses_compactors() != student.has_compactors() {
            return Err(Error::Compat(format!(
                "mode {} {} compactors",
                config.mode,
                if config.mode.uses_compactors() {
                    "needs"
                } else {
                    "forbids"
                }
            )));
        }
        if teacher.num_blocks() != student.num_blocks()
            || teacher
                .blocks
                .iter()
                .zip(&student.blocks)
                .any(|(t, s)| t.inner_width() != s.inner_width())
        {
            return Err(Error::Compat(
                "teacher and student block widths differ".into(),
            ));
        }
        Self::new(config, dataset, augment, Some(teacher), student)
    }

    fn new(
        config: TrainConfig,
        dataset: &'a Dataset,
        augment: AugmentOps,
        teacher: Option<&'a Model>,
        model: Model,
    ) -> Result<Self> {
        config.validate()?;
        if model.config.num_classes != dataset.counts.train_ids {
            return Err(Error::Compat(format!(
                "classifier has {} classes, dataset has {} training identities",
                model.config.num_classes, dataset.counts.train_ids
            )));
        }
        let queues = match teacher {
            Some(t) => t
                .blocks
                .iter()
                .map(|b| GalleryQueue::new(config.queue_capacity, b.inner_width()))
                .collect(),
            None => Vec::new(),
        };
        let opt = OptimizerState::new(&model);
        Ok(Self {
            config,
            dataset,
            augment,
            teacher,
            model,
            opt,
            queues,
            accum: Accum::default(),
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.config.schedule.total_steps()
    }

    fn epoch_batches(&self, epoch: usize) -> Result<Vec<Vec<usize>>> {
        let s = &self.config.schedule;
        pk_batches(
            self.dataset,
            s.identities_per_batch,
            s.samples_per_identity,
            s.batches_per_epoch,
            derive_seed(self.config.seed, epoch as u64),
        )
    }

    fn rggr_active(&self, epoch: usize) -> bool {
        self.config.mode == TrainMode::CddRggr && epoch >= self.config.rggr_activation_epoch
    }

    /// One optimisation step on the given dataset indices.
    pub fn step(&mut self, indices: &[usize], epoch: usize) -> Result<StepRecord> {
        let step = self.opt.step;
        let cfg = self.config.clone();
        let lr = lr_at(step, &cfg.schedule);
        let x = self.dataset.train_batch(
            indices,
            &self.augment,
            derive_seed(cfg.seed, AUGMENT_STREAM + step),
        )?;
        let labels = self.dataset.labels_of(indices);
        let teacher_out = self.teacher.map(|t| t.infer(&x)).transpose()?;

        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let input = tape.constant(x);
        let out = self
            .model
            .forward_with_taps(&mut tape, &vars, input, Mode::Train)?;
        let id = losses::loss_id(&mut tape, out.logits, &labels, cfg.loss.smoothing)?;
        let tri = losses::loss_triplet(&mut tape, out.embedding, &labels, cfg.loss.margin)?;
        let zero = tape.constant(Tensor::scalar(0.0));
        let (dl, kl) = match &teacher_out {
            Some(t) => {
                let tf: Vec<_> = t
                    .block_features
                    .iter()
                    .map(|f| tape.constant(f.clone()))
                    .collect();
                let dl = losses::loss_dl(&mut tape, &tf, &out.block_features)?;
                let tl = tape.constant(t.logits.clone());
                (
                    dl,
                    losses::loss_kl(&mut tape, out.logits, tl, cfg.loss.temperature)?,
                )
            }
            None => (zero, zero),
        };
        let targets = penalty_targets(&self.model, cfg.mode);
        let np: f64 = targets
            .iter()
            .map(|&k| {
                losses::row_norms(self.model.param(k).expect("target exists"))
                    .iter()
                    .sum::<f64>()
            })
            .sum();
        let lv = LossVars {
            dl,
            id,
            tri,
            kl,
            np: zero,
        };
        let mut parts = LossParts::from_tape(&tape, &lv);
        parts.np = np;
        let alpha = if targets.is_empty() { 0.0 } else { cfg.alpha };
        let breakdown = losses::loss_total(parts, alpha)?;
        let acc = losses::combine_acc(&mut tape, &lv)?;
        tape.backward(acc)?;
        let mut grads = vars.grads(&tape);

        let mut masks: BTreeMap<ParamKind, ChannelMask> = BTreeMap::new();
        let mut mask_stats = None;
        if let Some(t) = &teacher_out {
            if self.rggr_active(epoch) {
                let sf: Vec<Tensor> = out
                    .block_features
                    .iter()
                    .map(|v| tape.value(*v).clone())
                    .collect();
                let bm = rggr::build_masks(
                    &t.block_features,
                    &sf,
                    &labels,
                    &mut self.queues,
                    cfg.p,
                    cfg.top_k,
                )?;
                mask_stats = Some(
                    bm.iter()
                        .map(|m| MaskStat {
                            selected: m.unimportant.len(),
                            empty: m.empty_intersection,
                            ones: m.mask.ones_count(),
                        })
                        .collect(),
                );
                for (b, m) in bm.into_iter().enumerate() {
                    masks.insert(ParamKind::Compactor(b), m.mask);
                }
            } else {
                for (q, f) in self.queues.iter_mut().zip(&t.block_features) {
                    q.update(f, &labels)?;
                }
            }
        }
        for &k in &targets {
            let i = vars
                .kinds()
                .iter()
                .position(|&v| v == k)
                .expect("bound parameter");
            let w = self.model.param(k).expect("target exists");
            let ones = ChannelMask::ones(w.shape()[0]);
            reset_gradients(&mut grads[i], w, masks.get(&k).unwrap_or(&ones), alpha)?;
        }
        let hp = Sgd {
            lr,
            momentum: cfg.schedule.momentum,
            weight_decay: cfg.schedule.weight_decay,
        };
        let mut params = self.model.params_mut();
        sgd_step(&mut params, &grads, &mut self.opt, hp, &masks)?;
        self.model.update_running_stats(&out.norm_stats);
        let record = StepRecord {
            step,
            epoch,
            lr,
            losses: breakdown,
            masks: mask_stats,
        };
        self.accum.add(&record.losses);
        Ok(record)
    }

    fn end_epoch(&mut self, epoch: usize, sink: &mut dyn Sink) -> Result<EpochRecord> {
        let targets = penalty_targets(&self.model, self.config.mode);
        let norms: Vec<Vec<f64>> = targets
            .iter()
            .map(|&k| losses::row_norms(self.model.param(k).expect("target exists")))
            .collect();
        let alpha = if targets.is_empty() {
            0.0
        } else {
            self.config.alpha
        };
        let record = EpochRecord {
            epoch,
            steps: self.accum.steps,
            lr: lr_at(self.opt.step.saturating_sub(1), &self.config.schedule),
            losses: self.accum.mean(alpha),
            eval: evaluate(&self.model, self.dataset)?,
            live: norms
                .iter()
                .map(|n| n.iter().filter(|&&v| v >= DEFAULT_LAMBDA).count())
                .collect(),
            norm_sum: norms.iter().map(|n| n.iter().sum()).collect(),
        };
        self.accum = Accum::default();
        sink.epoch(&record, self)?;
        Ok(record)
    }

    /// Run up to `max_steps` further steps, stopping at the end of training.
    /// Epoch records are emitted whenever a step completes an epoch.
    pub fn train_steps(&mut self, max_steps: u64, sink: &mut dyn Sink) -> Result<Vec<EpochRecord>> {
        let bpe = self.config.schedule.batches_per_epoch as u64;
        let end = self
            .total_steps()
            .min(self.opt.step.saturating_add(max_steps));
        let mut records = Vec::new();
        let mut cached: Option<(usize, Vec<Vec<usize>>)> = None;
        while self.opt.step < end {
            let epoch = (self.opt.step / bpe) as usize;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.epoch_batches(epoch)?));
            }
            let batch = cached.as_ref().expect("cached").1[(self.opt.step % bpe) as usize].clone();
            let record = self.step(&batch, epoch)?;
            sink.step(&record)?;
            if self.opt.step.is_multiple_of(bpe) {
                records.push(self.end_epoch(epoch, sink)?);
            }
        }
        Ok(records)
    }

    /// Train to the end of the schedule.
    pub fn run(&mut self, sink: &mut dyn Sink) -> Result<Vec<EpochRecord>> {
        self.train_steps(u64::MAX, sink)
    }
}

#[cfg(test)]
mod tests;

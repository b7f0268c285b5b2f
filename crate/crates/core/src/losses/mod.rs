//! Distillation, retrieval and sparsity objectives.
//!
//! Every loss records a fused node on the tape with a closed-form backward
//! rule. [`LossBreakdown`] combines the scalar values.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Backward, Tape, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 0.004;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_SMOOTHING: f64 = 0.1;
pub const DEFAULT_MARGIN: f64 = 0.3;
/// Row norms below this have a zero lasso gradient.
pub const LASSO_NORM_FLOOR: f64 = 1e-12;

struct MeanSquared;

impl Backward for MeanSquared {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let k = 2.0 * grad[0] / inputs[0].len() as f64;
        let da: Vec<f64> = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(a, b)| k * (a - b))
            .collect();
        let db = da.iter().map(|v| -v).collect();
        vec![Some(da), Some(db)]
    }
}

/// Mean over all elements of `(a − b)²`.
pub fn mean_squared(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (va, vb) = (tape.value(a), tape.value(b));
    if va.shape() != vb.shape() {
        return shape_err("mean_squared", va.shape(), vb.shape());
    }
    let s: f64 = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let v = s / va.len() as f64;
    Ok(tape.record(Tensor::scalar(v), vec![a, b], Box::new(MeanSquared)))
}

/// Block-wise feature alignment: the mean over blocks of the mean squared
/// difference between pooled teacher and student taps.
pub fn loss_dl(tape: &mut Tape, teacher: &[Var], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "loss_dl needs equally many non-zero taps, got {} teacher and {} student",
            teacher.len(),
            student.len()
        )));
    }
    let w = 1.0 / teacher.len() as f64;
    let mut terms = Vec::with_capacity(teacher.len());
    for (&t, &s) in teacher.iter().zip(student) {
        terms.push((mean_squared(tape, s, t)?, w));
    }
    tensor::weighted_sum(tape, &terms)
}

fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    row.iter().map(|v| (v - max) / temperature - lse).collect()
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {l} out of range for {k} classes"
        )));
    }
    Ok(())
}

struct CrossEntropy {
    /// `softmax − target`, per element, already divided by N.
    delta: Vec<f64>,
}

impl Backward for CrossEntropy {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.delta.iter().map(|d| d * grad[0]).collect())]
    }
}

/// Label-smoothed cross-entropy against `(1 − ε)·onehot + ε/K`, averaged
/// over the batch.
pub fn loss_id(tape: &mut Tape, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let v = tape.value(logits);
    let &[n, k] = v.shape() else {
        return Err(Error::InvalidArgument(format!(
            "logits must be 2-d, got {:?}",
            v.shape()
        )));
    };
    check_labels(labels, n, k)?;
    let mut loss = 0.0;
    let mut delta = vec![0.0; n * k];
    for (i, &label) in labels.iter().enumerate() {
        let ls = log_softmax(v.row(i), 1.0);
        for c in 0..k {
            let target = smoothing / k as f64 + if c == label { 1.0 - smoothing } else { 0.0 };
            loss -= target * ls[c];
            delta[i * k + c] = (ls[c].exp() - target) / n as f64;
        }
    }
    Ok(tape.record(
        Tensor::scalar(loss / n as f64),
        vec![logits],
        Box::new(CrossEntropy { delta }),
    ))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Hardest positive / negative selected for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

/// Batch-hard mining: for each anchor with at least one positive, the
/// farthest same-label sample and the nearest other-label sample. Ties go to
/// the lower index.
pub fn mine_hard(emb: &Tensor, labels: &[usize]) -> Result<Vec<Triplet>> {
    let n = emb.shape()[0];
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} embeddings",
            labels.len()
        )));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::InvalidArgument(
            "triplet loss needs at least two identities".into(),
        ));
    }
    let mut out = Vec::new();
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = euclidean(emb.row(a), emb.row(j));
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, d_ap)), Some((q, d_an))) = (pos, neg) {
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative: q,
                d_ap,
                d_an,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(
            "triplet loss needs an identity with two samples".into(),
        ));
    }
    Ok(out)
}

struct TripletLoss {
    active: Vec<Triplet>,
    count: usize,
}

impl Backward for TripletLoss {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let emb = inputs[0];
        let dim = emb.shape()[1];
        let mut g = vec![0.0; emb.len()];
        let k = grad[0] / self.count as f64;
        let mut push = |from: usize, to: usize, d: f64, sign: f64| {
            if d < 1e-12 {
                return;
            }
            for c in 0..dim {
                let u = (emb.row(from)[c] - emb.row(to)[c]) / d * sign * k;
                g[from * dim + c] += u;
                g[to * dim + c] -= u;
            }
        };
        for t in &self.active {
            push(t.anchor, t.positive, t.d_ap, 1.0);
            push(t.anchor, t.negative, t.d_an, -1.0);
        }
        vec![Some(g)]
    }
}

/// Batch-hard triplet loss `mean_a max(0, d_ap − d_an + margin)` on
/// Euclidean distances.
pub fn loss_triplet(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    let emb = tape.value(embeddings);
    if emb.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "embeddings must be 2-d, got {:?}",
            emb.shape()
        )));
    }
    let triplets = mine_hard(emb, labels)?;
    let count = triplets.len();
    let mut total = 0.0;
    let mut active = Vec::new();
    for t in triplets {
        let h = t.d_ap - t.d_an + margin;
        if h > 0.0 {
            total += h;
            active.push(t);
        }
    }
    Ok(tape.record(
        Tensor::scalar(total / count as f64),
        vec![embeddings],
        Box::new(TripletLoss { active, count }),
    ))
}

struct KlDiv {
    temperature: f64,
    p_s: Vec<f64>,
    p_t: Vec<f64>,
    /// Per-row `log p_t − log p_s`.
    log_ratio: Vec<f64>,
    row_kl: Vec<f64>,
    k: usize,
}

impl Backward for KlDiv {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.row_kl.len();
        let t = self.temperature;
        let scale = grad[0] * t / n as f64;
        let ds = self
            .p_s
            .iter()
            .zip(&self.p_t)
            .map(|(s, q)| scale * (s - q))
            .collect();
        let dt = (0..n * self.k)
            .map(|i| scale * self.p_t[i] * (self.log_ratio[i] - self.row_kl[i / self.k]))
            .collect();
        vec![Some(ds), Some(dt)]
    }
}

/// Softened logit distillation `T²·mean_n KL(softmax(t/T) ‖ softmax(s/T))`.
pub fn loss_kl(tape: &mut Tape, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (s, t) = (tape.value(student), tape.value(teacher));
    if s.shape() != t.shape() || s.shape().len() != 2 {
        return shape_err("loss_kl", s.shape(), t.shape());
    }
    let (n, k) = (s.shape()[0], s.shape()[1]);
    let mut p_s = Vec::with_capacity(n * k);
    let mut p_t = Vec::with_capacity(n * k);
    let mut log_ratio = Vec::with_capacity(n * k);
    let mut row_kl = Vec::with_capacity(n);
    for i in 0..n {
        let ls = log_softmax(s.row(i), temperature);
        let lt = log_softmax(t.row(i), temperature);
        let mut kl = 0.0;
        for c in 0..k {
            let r = lt[c] - ls[c];
            kl += lt[c].exp() * r;
            log_ratio.push(r);
            p_s.push(ls[c].exp());
            p_t.push(lt[c].exp());
        }
        row_kl.push(kl);
    }
    let value = temperature * temperature * row_kl.iter().sum::<f64>() / n as f64;
    Ok(tape.record(
        Tensor::scalar(value),
        vec![student, teacher],
        Box::new(KlDiv {
            temperature,
            p_s,
            p_t,
            log_ratio,
            row_kl,
            k,
        }),
    ))
}

/// L2 norm of each output-channel row (leading axis) of a kernel.
pub fn row_norms(w: &Tensor) -> Vec<f64> {
    (0..w.shape()[0])
        .map(|i| w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Gradient of `Σ_i ‖W_i‖`: `W_i/‖W_i‖`, or zero below [`LASSO_NORM_FLOOR`].
pub fn group_lasso_grad(w: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(w.shape());
    for (i, norm) in row_norms(w).into_iter().enumerate() {
        if norm >= LASSO_NORM_FLOOR {
            for (d, s) in g.row_mut(i).iter_mut().zip(w.row(i)) {
                *d = s / norm;
            }
        }
    }
    g
}

struct GroupLasso;

impl Backward for GroupLasso {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = group_lasso_grad(inputs[0]);
        vec![Some(g.data().iter().map(|v| v * grad[0]).collect())]
    }
}

/// Group lasso over the output-channel rows of one kernel.
pub fn group_lasso(tape: &mut Tape, w: Var) -> Var {
    let v: f64 = row_norms(tape.value(w)).iter().sum();
    tape.record(Tensor::scalar(v), vec![w], Box::new(GroupLasso))
}

/// Sparsity penalty summed over all compactor kernels.
pub fn loss_np(tape: &mut Tape, kernels: &[Var]) -> Result<Var> {
    let terms: Vec<(Var, f64)> = kernels
        .iter()
        .map(|&k| (group_lasso(tape, k), 1.0))
        .collect();
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tensor::weighted_sum(tape, &terms)
}

/// The five scalar loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub dl: f64,
    pub id: f64,
    pub tri: f64,
    pub kl: f64,
    pub np: f64,
}

impl LossParts {
    pub fn from_tape(tape: &Tape, vars: &LossVars) -> Self {
        Self {
            dl: tape.value(vars.dl).item(),
            id: tape.value(vars.id).item(),
            tri: tape.value(vars.tri).item(),
            kl: tape.value(vars.kl).item(),
            np: tape.value(vars.np).item(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_dl: f64,
    pub l_id: f64,
    pub l_tri: f64,
    pub l_kl: f64,
    pub l_np: f64,
    pub alpha: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// The retrieval part `L_total − α·L_np`.
    pub fn l_acc(&self) -> f64 {
        acc_weights()
            .iter()
            .zip([self.l_dl, self.l_id, self.l_tri, self.l_kl])
            .map(|(w, v)| w * v)
            .sum()
    }
}

fn acc_weights() -> [f64; 4] {
    [0.5, 1.0, 1.0, 1.0]
}

/// `½·L_dl + L_id + L_tri + L_kl + α·L_np`, summed in that order.
pub fn loss_total(parts: LossParts, alpha: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_dl", parts.dl),
        ("l_id", parts.id),
        ("l_tri", parts.tri),
        ("l_kl", parts.kl),
        ("l_np", parts.np),
        ("alpha", alpha),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let w = acc_weights();
    let total =
        w[0] * parts.dl + w[1] * parts.id + w[2] * parts.tri + w[3] * parts.kl + alpha * parts.np;
    Ok(LossBreakdown {
        l_dl: parts.dl,
        l_id: parts.id,
        l_tri: parts.tri,
        l_kl: parts.kl,
        l_np: parts.np,
        alpha,
        l_total: total,
    })
}

/// Loss term nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub dl: Var,
    pub id: Var,
    pub tri: Var,
    pub kl: Var,
    pub np: Var,
}

/// Record `½·L_dl + L_id + L_tri + L_kl` on the tape.
pub fn combine_acc(tape: &mut Tape, v: &LossVars) -> Result<Var> {
    let w = acc_weights();
    tensor::weighted_sum(
        tape,
        &[(v.dl, w[0]), (v.id, w[1]), (v.tri, w[2]), (v.kl, w[3])],
    )
}

/// Record the full objective including `α·L_np`.
pub fn combine_total(tape: &mut Tape, v: &LossVars, alpha: f64) -> Result<Var> {
    let w = acc_weights();
    tensor::weighted_sum(
        tape,
        &[
            (v.dl, w[0]),
            (v.id, w[1]),
            (v.tri, w[2]),
            (v.kl, w[3]),
            (v.np, alpha),
        ],
    )
}

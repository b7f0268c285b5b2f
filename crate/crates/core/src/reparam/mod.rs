//! Conversion of a trained student into a slim network.
//!
//! For every block the norm is folded into the 3×3 convolution, compactor
//! rows with L2 norm below λ are dropped, the surviving rows are merged into
//! the convolution (`W[e] = Σ_d Ŵᶜ[e,d]·W′[d]`, `B[e] = Σ_d Ŵᶜ[e,d]·B′[d]`),
//! and the following 1×1 convolution keeps only the matching input channels.
//! Shortcuts and block outputs are never touched.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::row_norms;
use crate::metrics::{count_flops, count_params, pct, FLOP_CONVENTION};
use crate::network::{AffineNorm, Block, Conv, Mode, Model};
use crate::tensor::{Tape, Tensor};

/// Probe images used to measure conversion deviation.
const PROBE_BATCH: usize = 8;
const PROBE_SEED: u64 = 0x5EED;

/// Fold an inference-mode norm into the preceding convolution.
pub fn fold_norm(conv: &Conv, norm: &AffineNorm) -> Result<Conv> {
    let d = conv.out_channels();
    if norm.channels() != d {
        return Err(Error::Shape {
            op: "fold_norm",
            lhs: conv.weight.shape().to_vec(),
            rhs: vec![norm.channels()],
        });
    }
    let mut weight = conv.weight.clone();
    let mut bias = vec![0.0; d];
    for c in 0..d {
        let v = norm.running_var[c] + norm.eps;
        if !(v > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "channel {c}: var + eps = {v} is not positive"
            )));
        }
        let scale = norm.gamma.data()[c] / v.sqrt();
        for w in weight.row_mut(c) {
            *w *= scale;
        }
        let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[c]);
        bias[c] = norm.beta.data()[c] + scale * (b - norm.running_mean[c]);
    }
    Ok(Conv {
        weight,
        bias: Some(Tensor::new(vec![d], bias)?),
        stride: conv.stride,
        padding: conv.padding,
    })
}

/// Surviving compactor rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedCompactor {
    /// `[E, D]`
    pub kernel: Tensor,
    /// Strictly increasing indices into `[0, D)`.
    pub kept: Vec<usize>,
    /// No row reached λ; the largest-norm row was kept anyway.
    pub forced: bool,
}

/// Keep rows with `‖W_i‖₂ ≥ λ`, or the single largest row if none qualify.
/// `λ = 0` keeps every row.
pub fn prune_compactor(compactor: &Tensor, lambda: f64) -> Result<PrunedCompactor> {
    let s = compactor.shape();
    if s.len() != 4 || s[0] != s[1] || s[2] != 1 || s[3] != 1 {
        return Err(Error::InvalidArgument(format!(
            "compactor must be [D, D, 1, 1], got {s:?}"
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pruning threshold {lambda} must be non-negative"
        )));
    }
    let norms = row_norms(compactor);
    let mut kept: Vec<usize> = (0..s[0]).filter(|&i| norms[i] >= lambda).collect();
    let forced = kept.is_empty();
    if forced {
        let best = (0..s[0]).fold(0, |b, i| if norms[i] > norms[b] { i } else { b });
        kept.push(best);
    }
    let kernel = compactor.select_rows(&kept).reshape(&[kept.len(), s[1]])?;
    Ok(PrunedCompactor {
        kernel,
        kept,
        forced,
    })
}

/// Collapse a folded convolution and a slim compactor `[E, D]` into one
/// convolution with `E` outputs.
pub fn merge(folded: &Conv, slim: &Tensor) -> Result<Conv> {
    let d = folded.out_channels();
    if slim.shape().len() != 2 || slim.shape()[1] != d {
        return Err(Error::Shape {
            op: "merge",
            lhs: folded.weight.shape().to_vec(),
            rhs: slim.shape().to_vec(),
        });
    }
    let bias = folded.bias.as_ref().ok_or_else(|| {
        Error::InvalidArgument("merge expects a folded convolution with bias".into())
    })?;
    let e = slim.shape()[0];
    let ws = folded.weight.shape();
    let mut weight = Tensor::zeros(&[e, ws[1], ws[2], ws[3]]);
    let mut b = vec![0.0; e];
    for i in 0..e {
        let coeffs = slim.row(i);
        let out = weight.row_mut(i);
        for (dd, &c) in coeffs.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(folded.weight.row(dd)) {
                *o += c * w;
            }
            b[i] += c * bias.data()[dd];
        }
    }
    Ok(Conv {
        weight,
        bias: Some(Tensor::new(vec![e], b)?),
        stride: folded.stride,
        padding: folded.padding,
    })
}

/// Keep only the given input channels of a convolution.
pub fn thin_downstream(conv: &Conv, kept: &[usize]) -> Result<Conv> {
    let s = conv.weight.shape();
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot thin a convolution to zero inputs".into(),
        ));
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) || kept[kept.len() - 1] >= s[1] {
        return Err(Error::InvalidArgument(format!(
            "kept indices {kept:?} are not increasing within [0, {})",
            s[1]
        )));
    }
    let k2 = s[2] * s[3];
    let mut data = Vec::with_capacity(s[0] * kept.len() * k2);
    for o in 0..s[0] {
        let row = conv.weight.row(o);
        for &c in kept {
            data.extend_from_slice(&row[c * k2..(c + 1) * k2]);
        }
    }
    Ok(Conv {
        weight: Tensor::new(vec![s[0], kept.len(), s[2], s[3]], data)?,
        bias: conv.bias.clone(),
        stride: conv.stride,
        padding: conv.padding,
    })
}

/// Slim form of one compactor-equipped block.
pub fn convert_block(block: &Block, lambda: f64) -> Result<(Block, PrunedCompactor)> {
    let norm = block
        .norm
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("block has no norm to fold".into()))?;
    let compactor = block
        .compactor
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("block has no compactor".into()))?;
    let folded = fold_norm(&block.conv3, norm)?;
    let pruned = prune_compactor(compactor, lambda)?;
    let conv3 = merge(&folded, &pruned.kernel)?;
    let conv1 = thin_downstream(&block.conv1, &pruned.kept)?;
    Ok((
        Block {
            downsample: block.downsample,
            conv3,
            norm: None,
            compactor: None,
            conv1,
            shortcut: block.shortcut.clone(),
        },
        pruned,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub block: usize,
    pub d: usize,
    pub e: usize,
    pub kept: Vec<usize>,
    pub forced: bool,
}

/// Channel selection with projected costs of the slim network.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunePlan {
    pub lambda: f64,
    pub blocks: Vec<BlockPlan>,
    pub projected_params: u64,
    pub projected_flops: u64,
}

/// The heavy student with its compactors removed.
pub fn backbone_of(student: &Model) -> Model {
    let mut m = student.clone();
    m.config.with_compactors = false;
    for b in &mut m.blocks {
        b.compactor = None;
    }
    m
}

/// Slim costs derived from the backbone's counts and the kept widths.
fn project(backbone: &Model, blocks: &[BlockPlan]) -> (u64, u64) {
    let mut params = count_params(backbone);
    let mut flops = count_flops(backbone, backbone.config.input_shape());
    let mut h = backbone.config.image_height;
    let mut w = backbone.config.image_width;
    for (b, plan) in backbone.blocks.iter().zip(blocks) {
        if b.downsample {
            h /= 2;
            w /= 2;
        }
        let hw = (h * w) as u64;
        let (c, d, e, o) = (
            b.in_channels() as u64,
            plan.d as u64,
            plan.e as u64,
            b.out_channels() as u64,
        );
        let dropped = d - e;
        // conv3 rows and conv1 columns vanish, the norm folds into an E-wide bias
        params -= dropped * c * 9 + dropped * o + 2 * d;
        params += e;
        flops -= 2 * hw * 9 * c * dropped + 2 * hw * o * dropped + d * hw + dropped * hw;
        flops += e * hw;
    }
    (params, flops)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub block: usize,
    pub d: usize,
    pub e: usize,
    pub kept: Vec<usize>,
    pub forced: bool,
    /// Tap map of the slim block vs the zero-forced student, kept channels.
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionReport {
    pub lambda: f64,
    pub blocks: Vec<BlockReport>,
    /// Embedding deviation vs the student with pruned rows set to zero.
    pub deviation_vs_zeroed: f64,
    /// Embedding deviation vs the unmodified heavy student.
    pub deviation_vs_student: f64,
    pub params_backbone: u64,
    pub params_student: u64,
    pub params_slim: u64,
    pub flops_backbone: u64,
    pub flops_student: u64,
    pub flops_slim: u64,
}

impl ConversionReport {
    pub fn params_reduction(&self) -> f64 {
        1.0 - self.params_slim as f64 / self.params_backbone as f64
    }

    pub fn flops_reduction(&self) -> f64 {
        1.0 - self.flops_slim as f64 / self.flops_backbone as f64
    }

    pub fn pruned_channels(&self) -> usize {
        self.blocks.iter().map(|b| b.d - b.e).sum()
    }
}

impl fmt::Display for ConversionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# flops: {FLOP_CONVENTION}")?;
        writeln!(f, "lambda={:e}", self.lambda)?;
        for b in &self.blocks {
            let kept: Vec<String> = b.kept.iter().map(|k| k.to_string()).collect();
            writeln!(
                f,
                "block={} d={} e={} forced={} max_deviation={:.3e} kept={}",
                b.block,
                b.d,
                b.e,
                b.forced as u8,
                b.max_deviation,
                kept.join(",")
            )?;
        }
        let widths: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}/{}", b.e, b.d))
            .collect();
        writeln!(f, "channels={}", widths.join(" "))?;
        writeln!(f, "pruned_channels={}", self.pruned_channels())?;
        writeln!(f, "deviation_vs_zeroed={:.3e}", self.deviation_vs_zeroed)?;
        writeln!(f, "deviation_vs_student={:.3e}", self.deviation_vs_student)?;
        writeln!(f, "params_backbone={}", self.params_backbone)?;
        writeln!(f, "params_student={}", self.params_student)?;
        writeln!(f, "params_slim={}", self.params_slim)?;
        writeln!(f, "flops_backbone={}", self.flops_backbone)?;
        writeln!(f, "flops_student={}", self.flops_student)?;
        writeln!(f, "flops_slim={}", self.flops_slim)?;
        writeln!(f, "params_reduction_pct={}", pct(self.params_reduction()))?;
        writeln!(f, "flops_reduction_pct={}", pct(self.flops_reduction()))
    }
}

pub struct Conversion {
    pub slim: Model,
    pub plan: PrunePlan,
    pub report: ConversionReport,
}

/// Copy of the student with every pruned compactor row set to zero.
pub fn zero_pruned(student: &Model, plan: &PrunePlan) -> Model {
    let mut m = student.clone();
    for (b, p) in m.blocks.iter_mut().zip(&plan.blocks) {
        if let Some(c) = &mut b.compactor {
            for i in (0..p.d).filter(|i| !p.kept.contains(i)) {
                c.row_mut(i).fill(0.0);
            }
        }
    }
    m
}

fn eval_maps(model: &Model, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let input = tape.constant(x.clone());
    let out = model.forward_with_taps(&mut tape, &vars, input, Mode::Eval)?;
    let maps = out
        .block_maps
        .iter()
        .map(|v| tape.value(*v).clone())
        .collect();
    Ok((tape.value(out.embedding).clone(), maps))
}

/// Largest deviation between a slim tap map and the kept channels of a
/// heavy tap map.
fn map_deviation(slim: &Tensor, heavy: &Tensor, kept: &[usize]) -> f64 {
    let s = heavy.shape();
    let hw = s[2] * s[3];
    let mut worst = 0.0f64;
    for n in 0..s[0] {
        for (e, &d) in kept.iter().enumerate() {
            let a = &slim.data()[(n * kept.len() + e) * hw..][..hw];
            let b = &heavy.data()[(n * s[1] + d) * hw..][..hw];
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

/// Seeded standard-normal-like probe batch for the model's input shape.
pub fn probe_batch(model: &Model, n: usize, seed: u64) -> Tensor {
    let [c, h, w] = model.config.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-2.0..2.0))
}

/// Convert every block, then measure deviations on a fixed probe batch.
pub fn convert_model(student: &Model, lambda: f64) -> Result<Conversion> {
    if !student.has_compactors() {
        return Err(Error::Compat("model has no compactors to convert".into()));
    }
    let mut slim = backbone_of(student);
    let mut plans = Vec::with_capacity(student.num_blocks());
    for (i, b) in student.blocks.iter().enumerate() {
        let (sb, pruned) = convert_block(b, lambda).map_err(|e| Error::Conversion {
            block: i,
            msg: e.to_string(),
        })?;
        plans.push(BlockPlan {
            block: i,
            d: b.inner_width(),
            e: pruned.kept.len(),
            kept: pruned.kept,
            forced: pruned.forced,
        });
        slim.blocks[i] = sb;
    }
    slim.check_consistency()?;
    let backbone = backbone_of(student);
    let (projected_params, projected_flops) = project(&backbone, &plans);
    let plan = PrunePlan {
        lambda,
        blocks: plans,
        projected_params,
        projected_flops,
    };

    let x = probe_batch(student, PROBE_BATCH, PROBE_SEED);
    let (slim_emb, slim_maps) = eval_maps(&slim, &x)?;
    let (zero_emb, zero_maps) = eval_maps(&zero_pruned(student, &plan), &x)?;
    let (heavy_emb, _) = eval_maps(student, &x)?;
    let blocks = plan
        .blocks
        .iter()
        .map(|p| BlockReport {
            block: p.block,
            d: p.d,
            e: p.e,
            kept: p.kept.clone(),
            forced: p.forced,
            max_deviation: map_deviation(&slim_maps[p.block], &zero_maps[p.block], &p.kept),
        })
        .collect();
    let shape = student.config.input_shape();
    let report = ConversionReport {
        lambda,
        blocks,
        deviation_vs_zeroed: slim_emb.max_abs_diff(&zero_emb),
        deviation_vs_student: slim_emb.max_abs_diff(&heavy_emb),
        params_backbone: count_params(&backbone),
        params_student: count_params(student),
        params_slim: count_params(&slim),
        flops_backbone: count_flops(&backbone, shape),
        flops_student: count_flops(student, shape),
        flops_slim: count_flops(&slim, shape),
    };
    Ok(Conversion { slim, plan, report })
}

#[cfg(test)]
mod tests;

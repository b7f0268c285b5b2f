//! Retrieval metrics and model cost accounting.
//!
//! FLOP convention: a multiply-accumulate is 2 FLOPs, so a convolution costs
//! `2·H_out·W_out·C_in·C_out·k²` plus `H_out·W_out·C_out` for its bias.
//! Norm, relu and residual additions cost 1 FLOP per output element, pooling
//! and GAP 1 FLOP per input element. A linear layer costs `2·in·out + out`.
//! Reduction percentages are insensitive to the convention.

use std::fmt;

use crate::error::{Error, Result};
use crate::network::{Conv, Model};
use crate::tensor::Tensor;

pub const FLOP_CONVENTION: &str =
    "multiply-accumulate = 2 FLOPs; norm, relu, add = 1 per output element; pool, gap = 1 per input element";

fn unit_rows(t: &Tensor, what: &str) -> Result<Vec<Vec<f64>>> {
    (0..t.shape()[0])
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{what} embedding {i} has norm {n}"
                )));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Gallery indices per query by descending cosine similarity, ties to the
/// lower gallery index.
pub fn rank_gallery(query: &Tensor, gallery: &Tensor) -> Result<Vec<Vec<usize>>> {
    if query.shape().len() != 2
        || gallery.shape().len() != 2
        || query.shape()[1] != gallery.shape()[1]
    {
        return Err(Error::Shape {
            op: "rank_gallery",
            lhs: query.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let q = unit_rows(query, "query")?;
    let g = unit_rows(gallery, "gallery")?;
    Ok(crate::exec::map_indexed(q.len(), |i| {
        let sims: Vec<f64> = g
            .iter()
            .map(|r| r.iter().zip(&q[i]).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        order
    }))
}

/// A metric averaged over the queries that have at least one positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

fn check_labels(rankings: &[Vec<usize>], ql: &[usize], gl: &[usize]) -> Result<()> {
    if rankings.len() != ql.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rankings for {} query labels",
            rankings.len(),
            ql.len()
        )));
    }
    if let Some(i) = rankings
        .iter()
        .position(|r| r.iter().any(|&g| g >= gl.len()))
    {
        return Err(Error::InvalidArgument(format!(
            "ranking {i} indexes past the gallery"
        )));
    }
    Ok(())
}

fn average(per_query: impl Iterator<Item = Option<f64>>) -> Result<Scored> {
    let (mut sum, mut evaluated, mut skipped) = (0.0, 0, 0);
    for v in per_query {
        match v {
            Some(v) => {
                sum += v;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(Error::InvalidArgument(
            "no query has a positive in the gallery".into(),
        ));
    }
    Ok(Scored {
        value: sum / evaluated as f64,
        evaluated,
        skipped,
    })
}

pub fn average_precision(ranking: &[usize], label: usize, gallery_labels: &[usize]) -> Option<f64> {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (k, &g) in ranking.iter().enumerate() {
        if gallery_labels[g] == label {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn compute_map(
    rankings: &[Vec<usize>],
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<Scored> {
    check_labels(rankings, query_labels, gallery_labels)?;
    average(
        rankings
            .iter()
            .zip(query_labels)
            .map(|(r, &l)| average_precision(r, l, gallery_labels)),
    )
}

pub fn compute_r1(
    rankings: &[Vec<usize>],
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<Scored> {
    check_labels(rankings, query_labels, gallery_labels)?;
    average(rankings.iter().zip(query_labels).map(|(r, &l)| {
        gallery_labels
            .contains(&l)
            .then(|| if gallery_labels[r[0]] == l { 1.0 } else { 0.0 })
    }))
}

pub fn conv_params(conv: &Conv) -> u64 {
    (conv.weight.len() + conv.bias.as_ref().map_or(0, |b| b.len())) as u64
}

/// Sum of trainable element counts.
pub fn count_params(model: &Model) -> u64 {
    model.params().iter().map(|(_, t)| t.len() as u64).sum()
}

/// FLOPs of one convolution at output extent `h×w`.
pub fn conv_flops(conv: &Conv, h: usize, w: usize) -> u64 {
    let s = conv.spec();
    let hw = (h * w) as u64;
    let mac = hw * (s.in_channels * s.out_channels * s.kernel * s.kernel) as u64;
    2 * mac
        + if s.has_bias {
            hw * s.out_channels as u64
        } else {
            0
        }
}

/// FLOPs of one image of shape `[C, H, W]` through the model.
pub fn count_flops(model: &Model, input_shape: [usize; 3]) -> u64 {
    let [_, mut h, mut w] = input_shape;
    let c0 = model.stem.out_channels() as u64;
    let mut total = conv_flops(&model.stem, h, w) + 2 * c0 * (h * w) as u64;
    let mut channels = c0;
    for b in &model.blocks {
        total += block_flops(b, channels as usize, h, w);
        if b.downsample {
            h /= 2;
            w /= 2;
        }
        channels = b.out_channels() as u64;
    }
    total += channels * (h * w) as u64;
    let lin = |l: &crate::network::Linear| {
        let s = l.weight.shape();
        (2 * s[0] * s[1] + s[0]) as u64
    };
    total + lin(&model.embed) + lin(&model.classifier)
}

/// FLOPs of one block given its input channels and input extent.
pub fn block_flops(b: &crate::network::Block, in_c: usize, h: usize, w: usize) -> u64 {
    let (mut h, mut w) = (h, w);
    let mut total = 0;
    if b.downsample {
        total += (in_c * h * w) as u64;
        h /= 2;
        w /= 2;
    }
    let hw = (h * w) as u64;
    let d = b.inner_width() as u64;
    let out = b.out_channels() as u64;
    total += conv_flops(&b.conv3, h, w);
    if b.norm.is_some() {
        total += d * hw;
    }
    if let Some(c) = &b.compactor {
        total += 2 * hw * (c.shape()[0] * c.shape()[1]) as u64;
    }
    total += d * hw;
    total += conv_flops(&b.conv1, h, w);
    if let Some(s) = &b.shortcut {
        total += conv_flops(s, h, w);
    }
    total + 2 * out * hw
}

/// Retrieval quality and cost of one model on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub r1: f64,
    pub params: u64,
    pub flops: u64,
    pub queries: usize,
    pub gallery: usize,
    pub skipped_queries: usize,
}

impl EvalReport {
    pub fn from_embeddings(
        model: &Model,
        query: &Tensor,
        query_labels: &[usize],
        gallery: &Tensor,
        gallery_labels: &[usize],
    ) -> Result<Self> {
        let ranks = rank_gallery(query, gallery)?;
        let map = compute_map(&ranks, query_labels, gallery_labels)?;
        let r1 = compute_r1(&ranks, query_labels, gallery_labels)?;
        Ok(Self {
            map: map.value,
            r1: r1.value,
            params: count_params(model),
            flops: count_flops(model, model.config.input_shape()),
            queries: query_labels.len(),
            gallery: gallery_labels.len(),
            skipped_queries: map.skipped,
        })
    }
}

/// Percentage with two decimals.
pub fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# flops: {FLOP_CONVENTION}")?;
        writeln!(f, "map_pct={}", pct(self.map))?;
        writeln!(f, "r1_pct={}", pct(self.r1))?;
        writeln!(f, "params={}", self.params)?;
        writeln!(f, "flops={}", self.flops)?;
        writeln!(f, "queries={}", self.queries)?;
        writeln!(f, "gallery={}", self.gallery)?;
        writeln!(f, "skipped_queries={}", self.skipped_queries)
    }
}

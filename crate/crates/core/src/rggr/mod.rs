//! Retrieval-guided gradient resetting.
//!
//! Each residual block keeps a FIFO gallery of pooled teacher features. The
//! current batch's teacher features query that gallery; for every query and
//! each of its top-K neighbours the student's channels are scored by
//! `|f_d · r_d|`, the lowest `floor(p·D)` are selected, and the selections are
//! intersected. Channels in the intersection get mask bit 0, meaning their
//! retrieval-loss gradient is dropped for this step.

use std::cmp::Ordering;
use std::collections::VecDeque;

use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_P: f64 = 0.5;

/// Fixed-capacity FIFO of feature vectors with identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryQueue {
    capacity: usize,
    dim: usize,
    feats: VecDeque<Vec<f64>>,
    labels: VecDeque<usize>,
}

impl GalleryQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "gallery capacity must be positive");
        Self {
            capacity,
            dim,
            feats: VecDeque::with_capacity(capacity),
            labels: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored vector `i`, oldest first.
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.feats[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Append every row of `feats: [N, D]`, evicting the oldest entries once
    /// full.
    pub fn update(&mut self, feats: &Tensor, labels: &[usize]) -> Result<()> {
        if feats.shape().len() != 2 || feats.shape()[1] != self.dim {
            return shape_err("gallery update", feats.shape(), &[0, self.dim]);
        }
        if labels.len() != feats.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} gallery features",
                labels.len(),
                feats.shape()[0]
            )));
        }
        for (i, &label) in labels.iter().enumerate() {
            if self.feats.len() == self.capacity {
                self.feats.pop_front();
                self.labels.pop_front();
            }
            self.feats.push_back(feats.row(i).to_vec());
            self.labels.push_back(label);
        }
        Ok(())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub(crate) fn order_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Ranking of the gallery for each query plus the retained top-K vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    /// Gallery indices per query, most similar first.
    pub order: Vec<Vec<usize>>,
    /// `top_k[i][j]` is the `j`-th nearest gallery vector of query `i`.
    pub top_k: Vec<Vec<Vec<f64>>>,
}

/// Rank the gallery by cosine similarity for every row of `queries`.
pub fn compute_rank(queue: &GalleryQueue, queries: &Tensor, k: usize) -> Result<RankResult> {
    if queue.is_empty() {
        return Err(Error::GalleryCold);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("top-K needs K >= 1".into()));
    }
    if queries.shape().len() != 2 || queries.shape()[1] != queue.dim() {
        return shape_err("compute_rank", queries.shape(), &[0, queue.dim()]);
    }
    let k = k.min(queue.len());
    let mut order = Vec::with_capacity(queries.shape()[0]);
    let mut top_k = Vec::with_capacity(queries.shape()[0]);
    for i in 0..queries.shape()[0] {
        let q = queries.row(i);
        let sims: Vec<f64> = (0..queue.len())
            .map(|g| cosine(q, queue.feature(g)))
            .collect();
        let o = order_descending(&sims);
        top_k.push(o[..k].iter().map(|&g| queue.feature(g).to_vec()).collect());
        order.push(o);
    }
    Ok(RankResult { order, top_k })
}

/// `A_d = |f_d · r_d|`: the magnitude of channel `d`'s term in `f · r`.
pub fn channel_importance(student: &[f64], retrieved: &[f64]) -> Vec<f64> {
    student
        .iter()
        .zip(retrieved)
        .map(|(f, r)| (f * r).abs())
        .collect()
}

/// Number of channels picked out of `dim` at ratio `p`.
pub fn selection_count(dim: usize, p: f64) -> usize {
    ((p * dim as f64) + 1e-9).floor() as usize
}

/// Indices of the `floor(p·D)` smallest scores (ties to the lower index),
/// returned in ascending index order.
pub fn select_unimportant(scores: &[f64], p: f64) -> Vec<usize> {
    assert!(p > 0.0 && p <= 1.0, "selection ratio must lie in (0, 1]");
    let count = selection_count(scores.len(), p);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked = idx[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// Exact intersection of index sets, ascending.
pub fn intersect_masks(sets: &[Vec<usize>]) -> Vec<usize> {
    let Some(first) = sets.first() else {
        return Vec::new();
    };
    let mut acc: Vec<usize> = first.clone();
    acc.sort_unstable();
    acc.dedup();
    for s in &sets[1..] {
        acc.retain(|i| s.contains(i));
    }
    acc
}

/// Per-compactor gradient mask: `true` keeps the retrieval gradient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    bits: Vec<bool>,
}

impl ChannelMask {
    pub fn ones(dim: usize) -> Self {
        Self {
            bits: vec![true; dim],
        }
    }

    /// Mask with zeros at `unimportant`.
    pub fn from_unimportant(dim: usize, unimportant: &[usize]) -> Self {
        let mut m = Self::ones(dim);
        for &i in unimportant {
            m.bits[i] = false;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.bits[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Mask for one block plus the statistics logged per step.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    pub mask: ChannelMask,
    pub unimportant: Vec<usize>,
    /// The intersection came out empty, so nothing is reset.
    pub empty_intersection: bool,
}

/// Mask for one block from its gallery, teacher queries and student features.
pub fn block_mask(
    queue: &GalleryQueue,
    teacher: &Tensor,
    student: &Tensor,
    p: f64,
    k: usize,
) -> Result<BlockMask> {
    if teacher.shape() != student.shape() {
        return shape_err("block_mask", teacher.shape(), student.shape());
    }
    let rank = compute_rank(queue, teacher, k)?;
    let dim = teacher.shape()[1];
    let mut sets = Vec::new();
    for (i, retrieved) in rank.top_k.iter().enumerate() {
        for r in retrieved {
            let scores = channel_importance(student.row(i), r);
            sets.push(select_unimportant(&scores, p));
        }
    }
    let unimportant = intersect_masks(&sets);
    Ok(BlockMask {
        mask: ChannelMask::from_unimportant(dim, &unimportant),
        empty_intersection: unimportant.is_empty(),
        unimportant,
    })
}

/// Update every block's gallery with the teacher features, then compute each
/// block's mask independently. Masks carry no state between calls.
pub fn build_masks(
    teacher: &[Tensor],
    student: &[Tensor],
    labels: &[usize],
    queues: &mut [GalleryQueue],
    p: f64,
    k: usize,
) -> Result<Vec<BlockMask>> {
    if teacher.len() != student.len() || teacher.len() != queues.len() {
        return Err(Error::InvalidArgument(format!(
            "build_masks got {} teacher taps, {} student taps, {} queues",
            teacher.len(),
            student.len(),
            queues.len()
        )));
    }
    for (q, t) in queues.iter_mut().zip(teacher) {
        q.update(t, labels)?;
    }
    let queues: &[GalleryQueue] = queues;
    exec::map_indexed(teacher.len(), |m| {
        block_mask(&queues[m], &teacher[m], &student[m], p, k)
    })
    .into_iter()
    .collect()
}

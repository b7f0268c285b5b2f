//! Seeded procedural identity dataset, augmentation and PK batch sampling.
//!
//! Every identity is a prototype image made of a background colour and a
//! few coloured shapes. Samples add a hue rotation, an integer translation
//! and Gaussian noise, all scaled by the jitter level. The first identities
//! form the training split; the remaining ones are shared by query and
//! gallery with disjoint images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Variance floor used by z-score normalisation.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Mix a base seed with a stream index (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Scales hue rotation, translation and noise; 0 reproduces prototypes.
    pub jitter: f64,
    pub seed: u64,
    /// Train, query and gallery fractions. Train is a fraction of
    /// identities, query/gallery divide the images of the other identities.
    pub split: [f64; 3],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_identities: 32,
            images_per_identity: 20,
            channels: 3,
            height: 32,
            width: 32,
            jitter: 1.0,
            seed: 0,
            split: [0.5, 0.25, 0.25],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// Resolved split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_ids: usize,
    pub eval_ids: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<SplitCounts> {
        let bad = |m: String| Err(Error::Config(m));
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions sum to {sum}, expected 1"));
        }
        if self.split.iter().any(|&f| !(f > 0.0)) {
            return bad("split fractions must be positive".into());
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("image extents must be positive".into());
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return bad(format!(
                "jitter {} must be finite and non-negative",
                self.jitter
            ));
        }
        let train_ids = (self.split[0] * self.num_identities as f64).round() as usize;
        let eval_ids = self.num_identities.saturating_sub(train_ids);
        let q = self.split[1] / (self.split[1] + self.split[2]);
        let query_per_id = (q * self.images_per_identity as f64).round() as usize;
        let gallery_per_id = self.images_per_identity.saturating_sub(query_per_id);
        if train_ids < 2 || eval_ids < 1 {
            return bad(format!(
                "{} identities give {train_ids} train and {eval_ids} eval identities",
                self.num_identities
            ));
        }
        if query_per_id == 0 || gallery_per_id == 0 {
            return bad(format!(
                "{} images per identity leave an empty query or gallery share",
                self.images_per_identity
            ));
        }
        Ok(SplitCounts {
            train_ids,
            eval_ids,
            query_per_id,
            gallery_per_id,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
    },
    Disk {
        cy: f64,
        cx: f64,
        r: f64,
    },
    Stripes {
        vertical: bool,
        period: f64,
        phase: f64,
    },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Stripes {
                vertical,
                period,
                phase,
            } => {
                let t = if vertical { x } else { y };
                ((t + phase) / period).floor() as i64 % 2 == 0
            }
        }
    }
}

struct Prototype {
    background: Vec<f64>,
    shapes: Vec<(Shape, Vec<f64>)>,
}

impl Prototype {
    fn random(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let colour = |rng: &mut ChaCha8Rng| {
            (0..channels)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>()
        };
        let background = colour(rng);
        let n = rng.random_range(2..=3);
        let shapes = (0..n)
            .map(|_| {
                let shape = match rng.random_range(0..3) {
                    0 => {
                        let (h, w) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6));
                        let (y0, x0) = (
                            rng.random_range(0.0..1.0 - h),
                            rng.random_range(0.0..1.0 - w),
                        );
                        Shape::Rect {
                            y0,
                            x0,
                            y1: y0 + h,
                            x1: x0 + w,
                        }
                    }
                    1 => Shape::Disk {
                        cy: rng.random_range(0.25..0.75),
                        cx: rng.random_range(0.25..0.75),
                        r: rng.random_range(0.12..0.3),
                    },
                    _ => Shape::Stripes {
                        vertical: rng.random_bool(0.5),
                        period: rng.random_range(0.08..0.25),
                        phase: rng.random_range(0.0..1.0),
                    },
                };
                (shape, colour(rng))
            })
            .collect();
        Self { background, shapes }
    }

    /// Render in relative coordinates with the given pixel offset.
    fn render(&self, shape: [usize; 3], dy: i64, dx: i64) -> Vec<f64> {
        let [c, h, w] = shape;
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as f64;
                let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as f64;
                let (ry, rx) = ((sy + 0.5) / h as f64, (sx + 0.5) / w as f64);
                let mut colour = &self.background;
                for (s, col) in &self.shapes {
                    if s.contains(ry, rx) {
                        colour = col;
                    }
                }
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = colour[ch];
                }
            }
        }
        out
    }
}

/// Rotate every pixel colour about the grey axis by `angle` radians.
/// Only the first three channels are affected.
fn hue_rotate(img: &mut [f64], shape: [usize; 3], angle: f64) {
    let [c, h, w] = shape;
    if c < 3 || angle == 0.0 {
        return;
    }
    let (s, co) = angle.sin_cos();
    let k = 1.0 / 3.0_f64.sqrt();
    // Rodrigues rotation about (1,1,1)/sqrt(3)
    let m = |i: usize, j: usize| {
        let cross = [[0.0, -k, k], [k, 0.0, -k], [-k, k, 0.0]];
        let id = if i == j { 1.0 } else { 0.0 };
        co * id + s * cross[i][j] + (1.0 - co) * k * k
    };
    let hw = h * w;
    for p in 0..hw {
        let v = [img[p], img[hw + p], img[2 * hw + p]];
        for i in 0..3 {
            img[i * hw + p] = (0..3).map(|j| m(i, j) * v[j]).sum();
        }
    }
}

pub struct Dataset {
    pub spec: DatasetSpec,
    pub counts: SplitCounts,
    /// `[N, C, H, W]`, identity-major.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let counts = spec.validate()?;
        let shape = spec.image_shape();
        let per = spec.images_per_identity;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let protos: Vec<Prototype> = (0..spec.num_identities)
            .map(|_| Prototype::random(&mut rng, spec.channels))
            .collect();
        let total = spec.num_identities * per;
        let j = spec.jitter;
        let max_shift = (2.0 * j).round() as i64;
        let noise = Normal::new(0.0, 0.1 * j.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let rendered = exec::map_indexed(total, |n| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, n as u64 + 1));
            let (dy, dx) = if max_shift > 0 {
                (
                    rng.random_range(-max_shift..=max_shift),
                    rng.random_range(-max_shift..=max_shift),
                )
            } else {
                (0, 0)
            };
            let mut img = protos[n / per].render(shape, dy, dx);
            if j > 0.0 {
                hue_rotate(&mut img, shape, rng.random_range(-0.25 * j..=0.25 * j));
                for v in &mut img {
                    *v += noise.sample(&mut rng);
                }
            }
            img
        });
        let data: Vec<f64> = rendered.into_iter().flatten().collect();
        let mut labels = Vec::with_capacity(total);
        let mut splits = Vec::with_capacity(total);
        for id in 0..spec.num_identities {
            for k in 0..per {
                labels.push(id);
                splits.push(if id < counts.train_ids {
                    Split::Train
                } else if k < counts.query_per_id {
                    Split::Query
                } else {
                    Split::Gallery
                });
            }
        }
        Ok(Self {
            spec: spec.clone(),
            counts,
            images: Tensor::new(vec![total, shape[0], shape[1], shape[2]], data)?,
            labels,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Normalised (eval pipeline) images of the given indices.
    pub fn eval_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self.spec.image_shape();
        let imgs = exec::map_indexed(indices.len(), |k| {
            let mut v = self.image(indices[k]).to_vec();
            zscore(&mut v);
            v
        });
        Tensor::new(
            vec![indices.len(), shape[0], shape[1], shape[2]],
            imgs.concat(),
        )
    }

    /// Augmented training images; image `k` uses `derive_seed(seed, k)`.
    pub fn train_batch(&self, indices: &[usize], ops: &AugmentOps, seed: u64) -> Result<Tensor> {
        let shape = self.spec.image_shape();
        let imgs = exec::map_indexed(indices.len(), |k| {
            augment(
                self.image(indices[k]),
                shape,
                ops,
                derive_seed(seed, k as u64),
            )
        });
        Tensor::new(
            vec![indices.len(), shape[0], shape[1], shape[2]],
            imgs.concat(),
        )
    }
}

/// Training-time augmentation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOps {
    pub zscore: bool,
    /// Zero padding before a random crop back to the original size.
    pub crop_padding: usize,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, sampled uniformly.
    pub erase_area: [f64; 2],
    pub flip_prob: f64,
}

impl Default for AugmentOps {
    fn default() -> Self {
        Self {
            zscore: true,
            crop_padding: 2,
            erase_prob: 0.5,
            erase_area: [0.02, 0.2],
            flip_prob: 0.5,
        }
    }
}

impl AugmentOps {
    pub fn none() -> Self {
        Self {
            zscore: false,
            crop_padding: 0,
            erase_prob: 0.0,
            erase_area: [0.0, 0.0],
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        let [lo, hi] = self.erase_area;
        if !p_ok(self.erase_prob) || !p_ok(self.flip_prob) || !(0.0 <= lo && lo <= hi && hi <= 1.0)
        {
            return Err(Error::Config(
                "augmentation probabilities and erase area must lie in [0, 1] with erase_area[0] <= erase_area[1]".into(),
            ));
        }
        Ok(())
    }
}

/// Whole-image z-score with variance floor [`ZSCORE_EPS`].
pub fn zscore(img: &mut [f64]) {
    let n = img.len() as f64;
    // shifted by the first pixel so a constant image has an exact mean
    let pivot = img[0];
    let mean = pivot + img.iter().map(|v| v - pivot).sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.max(ZSCORE_EPS).sqrt();
    for v in img {
        *v = (*v - mean) / std;
    }
}

pub fn flip_horizontal(img: &mut [f64], shape: [usize; 3]) {
    let [_, _, w] = shape;
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

fn crop(img: &[f64], shape: [usize; 3], pad: usize, oy: usize, ox: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy) as i64 - pad as i64;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as i64 - pad as i64;
                if sx >= 0 && sx < w as i64 {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Fill a rectangle covering `area` of the image with zeros.
pub fn erase(img: &mut [f64], shape: [usize; 3], area: f64, aspect: f64, cy: f64, cx: f64) {
    let [c, h, w] = shape;
    let eh = ((area * (h * w) as f64 * aspect).sqrt().round() as usize).min(h);
    let ew = ((area * (h * w) as f64 / aspect).sqrt().round() as usize).min(w);
    if eh == 0 || ew == 0 {
        return;
    }
    let y0 = ((cy * (h - eh + 1) as f64) as usize).min(h - eh);
    let x0 = ((cx * (w - ew + 1) as f64) as usize).min(w - ew);
    for ch in 0..c {
        for y in y0..y0 + eh {
            img[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + ew].fill(0.0);
        }
    }
}

/// Flip, pad-and-crop, z-score, then erase, each drawn from `seed`.
pub fn augment(image: &[f64], shape: [usize; 3], ops: &AugmentOps, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.to_vec();
    if ops.flip_prob > 0.0 && rng.random_bool(ops.flip_prob) {
        flip_horizontal(&mut img, shape);
    }
    if ops.crop_padding > 0 {
        let span = 2 * ops.crop_padding + 1;
        let (oy, ox) = (rng.random_range(0..span), rng.random_range(0..span));
        img = crop(&img, shape, ops.crop_padding, oy, ox);
    }
    if ops.zscore {
        zscore(&mut img);
    }
    if ops.erase_prob > 0.0 && rng.random_bool(ops.erase_prob) {
        let [lo, hi] = ops.erase_area;
        let area = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        let aspect = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
        let (cy, cx) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        erase(&mut img, shape, area, aspect, cy, cx);
    }
    img
}

/// `count` batches of `p` identities × `s` images from the training split.
///
/// Identities are drawn from successive shuffled passes, so the first
/// `ceil(ids / p)` batches cover every identity. Within a batch identities
/// are distinct and images are sampled without replacement.
pub fn pk_batches(
    dataset: &Dataset,
    p: usize,
    s: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let train = dataset.indices(Split::Train);
    let mut by_id: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in train {
        let l = dataset.labels[i];
        match by_id.last_mut() {
            Some((id, v)) if *id == l => v.push(i),
            _ => by_id.push((l, vec![i])),
        }
    }
    if p < 2 || s < 2 {
        return Err(Error::InvalidArgument(format!(
            "PK sampling needs P >= 2 and S >= 2, got {p}x{s}"
        )));
    }
    if by_id.len() < p {
        return Err(Error::InvalidArgument(format!(
            "{} training identities cannot fill P = {p}",
            by_id.len()
        )));
    }
    if let Some((id, v)) = by_id.iter().find(|(_, v)| v.len() < s) {
        return Err(Error::InvalidArgument(format!(
            "identity {id} has {} images, S = {s}",
            v.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = Vec::new();
    let mut batches = Vec::with_capacity(count);
    for _ in 0..count {
        let mut chosen: Vec<usize> = Vec::with_capacity(p);
        while chosen.len() < p {
            if pool.is_empty() {
                pool = (0..by_id.len()).collect();
                pool.shuffle(&mut rng);
                pool.reverse();
            }
            let pos = pool
                .iter()
                .rposition(|k| !chosen.contains(k))
                .expect("p <= identities");
            chosen.push(pool.remove(pos));
        }
        let mut batch = Vec::with_capacity(p * s);
        for k in chosen {
            let imgs = &by_id[k].1;
            batch.extend(
                rand::seq::index::sample(&mut rng, imgs.len(), s)
                    .into_iter()
                    .map(|j| imgs[j]),
            );
        }
        batches.push(batch);
    }
    Ok(batches)
}

use super::gemm::gemm;
use super::tape::{Backward, Tape, Var};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

struct Relu;

impl Backward for Relu {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(g)]
    }
}

/// Elementwise `max(0, x)`; the subgradient at 0 is 0.
pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let v = tape.value(x);
    let out = Tensor::new(
        v.shape().to_vec(),
        v.data()
            .iter()
            .map(|&a| if a > 0.0 { a } else { 0.0 })
            .collect(),
    )
    .expect("relu shape");
    tape.record(out, vec![x], Box::new(Relu))
}

struct Gap {
    spatial: usize,
}

impl Backward for Gap {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let inv = 1.0 / self.spatial as f64;
        let mut g = vec![0.0; inputs[0].len()];
        for (chunk, &gv) in g.chunks_mut(self.spatial).zip(grad) {
            chunk.iter_mut().for_each(|x| *x = gv * inv);
        }
        vec![Some(g)]
    }
}

/// Global average pool `[N, D, H, W] -> [N, D]`.
pub fn gap(tape: &mut Tape, x: Var) -> Result<Var> {
    let v = tape.value(x);
    let &[n, d, h, w] = v.shape() else {
        return Err(Error::InvalidArgument(format!(
            "gap expects a 4-d input, got {:?}",
            v.shape()
        )));
    };
    let spatial = h * w;
    let data = v
        .data()
        .chunks(spatial)
        .map(|c| c.iter().sum::<f64>() / spatial as f64)
        .collect();
    let out = Tensor::new(vec![n, d], data)?;
    Ok(tape.record(out, vec![x], Box::new(Gap { spatial })))
}

struct AvgPool2;

impl Backward for AvgPool2 {
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let &[n, c, h, w] = inputs[0].shape() else {
            unreachable!()
        };
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = 0.25 * grad[(plane * ho + oy) * wo + ox];
                    for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dx[(plane * h + 2 * oy + dy) * w + 2 * ox + dxx] = g;
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Non-overlapping 2×2 average pooling; spatial extents must be even.
pub fn avg_pool2(tape: &mut Tape, x: Var) -> Result<Var> {
    let v = tape.value(x);
    let &[n, c, h, w] = v.shape() else {
        return Err(Error::InvalidArgument(format!(
            "avg_pool2 expects a 4-d input, got {:?}",
            v.shape()
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "avg_pool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = v.data();
    let mut y = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let at = |dy: usize, dx: usize| src[(plane * h + 2 * oy + dy) * w + 2 * ox + dx];
                y[(plane * ho + oy) * wo + ox] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    let out = Tensor::new(vec![n, c, ho, wo], y)?;
    Ok(tape.record(out, vec![x], Box::new(AvgPool2)))
}

struct Add;

impl Backward for Add {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec()), Some(grad.to_vec())]
    }
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (va, vb) = (tape.value(a), tape.value(b));
    if va.shape() != vb.shape() {
        return shape_err("add", va.shape(), vb.shape());
    }
    let data = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(x, y)| x + y)
        .collect();
    let out = Tensor::new(va.shape().to_vec(), data)?;
    Ok(tape.record(out, vec![a, b], Box::new(Add)))
}

struct Sum;

impl Backward for Sum {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0]; inputs[0].len()])]
    }
}

pub fn sum(tape: &mut Tape, x: Var) -> Var {
    let s = tape.value(x).data().iter().sum();
    tape.record(Tensor::scalar(s), vec![x], Box::new(Sum))
}

struct Scale(f64);

impl Backward for Scale {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.0).collect())]
    }
}

pub fn scale(tape: &mut Tape, x: Var, c: f64) -> Var {
    let v = tape.value(x);
    let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())
        .expect("scale shape");
    tape.record(out, vec![x], Box::new(Scale(c)))
}

struct WeightedSum(Vec<f64>);

impl Backward for WeightedSum {
    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        self.0.iter().map(|w| Some(vec![grad[0] * w])).collect()
    }
}

/// `Σ wᵢ·xᵢ` over scalar vars, summed left to right.
pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut total = 0.0;
    for &(v, w) in terms {
        let t = tape.value(v);
        if !t.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "weighted_sum term has shape {:?}",
                t.shape()
            )));
        }
        total += w * t.item();
    }
    let inputs = terms.iter().map(|t| t.0).collect();
    let weights = terms.iter().map(|t| t.1).collect();
    Ok(tape.record(
        Tensor::scalar(total),
        inputs,
        Box::new(WeightedSum(weights)),
    ))
}

struct Linear {
    has_bias: bool,
}

impl Backward for Linear {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        // dx = g·W, dW = gᵀ·x
        let mut dx = vec![0.0; n * i];
        gemm(n, o, i, grad, false, w.data(), false, 0.0, &mut dx);
        let mut dw = vec![0.0; o * i];
        gemm(o, n, i, grad, true, x.data(), false, 0.0, &mut dw);
        let mut out = vec![Some(dx), Some(dw)];
        if self.has_bias {
            let mut db = vec![0.0; o];
            for row in grad.chunks(o) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            out.push(Some(db));
        }
        out
    }
}

/// `x·Wᵀ + b` with `x: [N, I]`, `W: [O, I]`, `b: [O]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(weight));
    if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
        return shape_err("linear", xv.shape(), wv.shape());
    }
    let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
    let mut y = vec![0.0; n * o];
    gemm(n, i, o, xv.data(), false, wv.data(), true, 0.0, &mut y);
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        let bv = tape.value(b);
        if bv.shape() != [o] {
            return shape_err("linear bias", bv.shape(), &[o]);
        }
        for row in y.chunks_mut(o) {
            for (a, bb) in row.iter_mut().zip(bv.data()) {
                *a += bb;
            }
        }
        inputs.push(b);
    }
    let out = Tensor::new(vec![n, o], y)?;
    Ok(tape.record(
        out,
        inputs,
        Box::new(Linear {
            has_bias: bias.is_some(),
        }),
    ))
}

/// Per-channel statistics of a batch-normalised activation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running estimates.
    pub var: Vec<f64>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::InvalidArgument(format!(
            "norm expects a 4-d input, got {shape:?}"
        ))),
    }
}

struct BatchNorm {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for BatchNorm {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, c, s) = channel_layout(inputs[0].shape()).expect("checked in forward");
        let gamma = inputs[1].data();
        let m = (n * s) as f64;
        let mut dx = vec![0.0; inputs[0].len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0, 0.0);
            for b in 0..n {
                let off = (b * c + ch) * s;
                for p in off..off + s {
                    sg += grad[p];
                    sgx += grad[p] * self.xhat[p];
                }
            }
            dgamma[ch] = sgx;
            dbeta[ch] = sg;
            let k = gamma[ch] * self.inv_std[ch] / m;
            for b in 0..n {
                let off = (b * c + ch) * s;
                for p in off..off + s {
                    dx[p] = k * (m * grad[p] - sg - self.xhat[p] * sgx);
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

/// Training-mode normalisation with batch statistics over `(N, H, W)`.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, NormStats)> {
    let xv = tape.value(x);
    let (n, c, s) = channel_layout(xv.shape())?;
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());
    if gv.len() != c || bv.len() != c {
        return shape_err("batch_norm", xv.shape(), tape.value(gamma).shape());
    }
    let m = n * s;
    let data = xv.data();
    let mut mean = vec![0.0; c];
    let mut var_b = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * s;
            acc += data[off..off + s].iter().sum::<f64>();
        }
        mean[ch] = acc / m as f64;
        let mut sq = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * s;
            sq += data[off..off + s]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
        var_b[ch] = sq / m as f64;
    }
    let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; data.len()];
    let mut y = vec![0.0; data.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for p in off..off + s {
                xhat[p] = (data[p] - mean[ch]) * inv_std[ch];
                y[p] = gv[ch] * xhat[p] + bv[ch];
            }
        }
    }
    let unbiased = if m > 1 {
        var_b
            .iter()
            .map(|v| v * m as f64 / (m - 1) as f64)
            .collect()
    } else {
        var_b.clone()
    };
    let out = Tensor::new(xv.shape().to_vec(), y)?;
    let v = tape.record(
        out,
        vec![x, gamma, beta],
        Box::new(BatchNorm { xhat, inv_std }),
    );
    Ok((
        v,
        NormStats {
            mean,
            var: unbiased,
        },
    ))
}

struct AffineNorm {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for AffineNorm {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, c, s) = channel_layout(inputs[0].shape()).expect("checked in forward");
        let x = inputs[0].data();
        let gamma = inputs[1].data();
        let mut dx = vec![0.0; x.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                let k = gamma[ch] * self.inv_std[ch];
                for p in off..off + s {
                    dx[p] = grad[p] * k;
                    dgamma[ch] += grad[p] * (x[p] - self.mean[ch]) * self.inv_std[ch];
                    dbeta[ch] += grad[p];
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

/// Inference-mode normalisation `γ·(x − mean)/sqrt(var + eps) + β` with
/// fixed statistics.
pub fn affine_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Var> {
    let xv = tape.value(x);
    let (n, c, s) = channel_layout(xv.shape())?;
    let (gv, bv) = (tape.value(gamma).data(), tape.value(beta).data());
    if gv.len() != c || bv.len() != c || mean.len() != c || var.len() != c {
        return shape_err("affine_norm", xv.shape(), tape.value(gamma).shape());
    }
    let mut inv_std = Vec::with_capacity(c);
    for &v in var {
        if !(v + eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "norm variance + eps must be positive, got {}",
                v + eps
            )));
        }
        inv_std.push(1.0 / (v + eps).sqrt());
    }
    let data = xv.data();
    let mut y = vec![0.0; data.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for p in off..off + s {
                y[p] = gv[ch] * (data[p] - mean[ch]) * inv_std[ch] + bv[ch];
            }
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), y)?;
    Ok(tape.record(
        out,
        vec![x, gamma, beta],
        Box::new(AffineNorm {
            mean: mean.to_vec(),
            inv_std,
        }),
    ))
}

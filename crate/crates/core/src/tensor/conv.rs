use super::gemm::gemm;
use super::tape::{Backward, Tape, Var};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::exec;

/// Output extent of a convolution along one axis, if it is a positive integer.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, w], &[d, kc, kh, kw]) = (input, kernel) else {
            return shape_err("conv2d", input, kernel);
        };
        if kc != c || kh != kw {
            return shape_err("conv2d", input, kernel);
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, kh, stride, padding),
            conv_out_extent(w, kw, stride, padding),
        ) else {
            return Err(Error::InvalidArgument(format!(
                "conv2d output extent of input {input:?} with kernel {kernel:?}, stride {stride}, padding {padding} is not a positive integer"
            )));
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            d,
            k: kh,
            stride,
            padding,
            ho,
            wo,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn in_plane(&self) -> usize {
        self.c * self.h * self.w
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut col = vec![0.0; self.patch() * p];
        for c in 0..self.c {
            for u in 0..self.k {
                for v in 0..self.k {
                    let row = &mut col[((c * self.k + u) * self.k + v) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + u) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + v) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                row[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut x = vec![0.0; self.in_plane()];
        for c in 0..self.c {
            for u in 0..self.k {
                for v in 0..self.k {
                    let row = &col[((c * self.k + u) * self.k + v) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + u) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + v) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn forward(g: &Geometry, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let p = g.positions();
    let plane = g.d * p;
    let mut out = vec![0.0; g.n * plane];
    exec::for_each_chunk_mut(&mut out, plane, |i, dst| {
        let x = &input[i * g.in_plane()..][..g.in_plane()];
        if g.pointwise() {
            gemm(g.d, g.patch(), p, kernel, false, x, false, 0.0, dst);
        } else {
            let col = g.im2col(x);
            gemm(g.d, g.patch(), p, kernel, false, &col, false, 0.0, dst);
        }
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_mut(p).zip(b) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Cross-correlation of `input: [N, C, H, W]` with `kernel: [D, C, k, k]`
/// without recording anything.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.d] {
            return shape_err("conv2d bias", b.shape(), &[g.d]);
        }
    }
    let out = forward(&g, input.data(), kernel.data(), bias.map(|b| b.data()));
    Tensor::new(vec![g.n, g.d, g.ho, g.wo], out)
}

struct Conv2d {
    geom: Geometry,
    has_bias: bool,
    need_input: bool,
}

impl Backward for Conv2d {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = &self.geom;
        let (x, kernel) = (inputs[0].data(), inputs[1].data());
        let p = g.positions();
        let plane = g.d * p;
        let per_sample = exec::map_indexed(g.n, |i| {
            let gout = &grad[i * plane..][..plane];
            let xi = &x[i * g.in_plane()..][..g.in_plane()];
            let col = if g.pointwise() {
                None
            } else {
                Some(g.im2col(xi))
            };
            let col_ref = col.as_deref().unwrap_or(xi);
            let mut dk = vec![0.0; g.d * g.patch()];
            gemm(g.d, p, g.patch(), gout, false, col_ref, true, 0.0, &mut dk);
            let dx = self.need_input.then(|| {
                let mut dcol = vec![0.0; g.patch() * p];
                gemm(g.patch(), g.d, p, kernel, true, gout, false, 0.0, &mut dcol);
                if g.pointwise() {
                    dcol
                } else {
                    g.col2im(&dcol)
                }
            });
            (dx, dk)
        });
        let mut dx_all = self.need_input.then(|| Vec::with_capacity(x.len()));
        let mut dks = Vec::with_capacity(g.n);
        for (dx, dk) in per_sample {
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend(dx);
            }
            dks.push(dk);
        }
        let dk = exec::sum_ordered(dks, g.d * g.patch());
        let mut out = vec![dx_all, Some(dk)];
        if self.has_bias {
            let mut db = vec![0.0; g.d];
            for sample in grad.chunks(plane) {
                for (d, row) in db.iter_mut().zip(sample.chunks(p)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            out.push(Some(db));
        }
        out
    }
}

/// Recorded convolution with exact backward rules for input, kernel and bias.
pub fn conv2d(
    tape: &mut Tape,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let out = conv2d_forward(
        tape.value(input),
        tape.value(kernel),
        bias.map(|b| tape.value(b)),
        stride,
        padding,
    )?;
    let geom = Geometry::new(
        tape.value(input).shape(),
        tape.value(kernel).shape(),
        stride,
        padding,
    )?;
    let mut inputs = vec![input, kernel];
    inputs.extend(bias);
    let rule = Conv2d {
        geom,
        has_bias: bias.is_some(),
        need_input: tape.requires_grad(input),
    };
    Ok(tape.record(out, inputs, Box::new(rule)))
}

//! Forward and backward kernels for the handful of layers the model zoo uses.
//!
//! Convolutions go through im2col and a dense GEMM; everything is `f64` so
//! that central finite differences can check the analytic gradients tightly.

use super::Batch;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// "Same"-padded 3×3 convolution with the given stride.
    pub fn k3(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: 3,
            stride,
            pad: 1,
            dilation: 1,
        }
    }

    pub fn k1(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.pad - span) / self.stride + 1;
        let ow = (w + 2 * self.pad - span) / self.stride + 1;
        (oh, ow)
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.patch_len()
    }
}

/// `c = beta·c + op(a)·op(b)` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe exactly the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], h: usize, w: usize, spec: &ConvSpec, col: &mut [f64]) {
    let (oh, ow) = spec.out_hw(h, w);
    let p = oh * ow;
    let kk = spec.kernel;
    for ci in 0..spec.in_ch {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kk {
            for kx in 0..kk {
                let row = (ci * kk + ky) * kk + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], h: usize, w: usize, spec: &ConvSpec, x: &mut [f64]) {
    let (oh, ow) = spec.out_hw(h, w);
    let p = oh * ow;
    let kk = spec.kernel;
    for ci in 0..spec.in_ch {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kk {
            for kx in 0..kk {
                let row = (ci * kk + ky) * kk + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Batch, weight: &[f64], bias: &[f64], spec: &ConvSpec) -> Batch {
    assert_eq!(x.c, spec.in_ch, "conv input channels");
    let (oh, ow) = spec.out_hw(x.h, x.w);
    let p = oh * ow;
    let mut out = Batch::zeros(x.n, spec.out_ch, oh, ow);
    let mut col = vec![0.0; if spec.is_pointwise() { 0 } else { spec.patch_len() * p }];
    for i in 0..x.n {
        let src = if spec.is_pointwise() {
            x.sample(i)
        } else {
            im2col(x.sample(i), x.h, x.w, spec, &mut col);
            &col
        };
        let dst = out.sample_mut(i);
        for (co, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        gemm(spec.out_ch, spec.patch_len(), p, weight, false, src, false, 1.0, dst);
    }
    out
}

/// Gradients of a convolution. Parameter gradients are accumulated into
/// `param_grads` when present; the input gradient is returned when asked for.
pub fn conv2d_backward(
    x: &Batch,
    weight: &[f64],
    spec: &ConvSpec,
    grad_out: &Batch,
    param_grads: Option<(&mut [f64], &mut [f64])>,
    want_input_grad: bool,
) -> Option<Batch> {
    let (oh, ow) = spec.out_hw(x.h, x.w);
    let p = oh * ow;
    let k = spec.patch_len();
    let pointwise = spec.is_pointwise();
    let mut col = vec![0.0; if pointwise { 0 } else { k * p }];
    let mut grad_col = vec![0.0; if pointwise { 0 } else { k * p }];
    let mut grad_x = want_input_grad.then(|| Batch::zeros(x.n, x.c, x.h, x.w));
    let mut param_grads = param_grads;
    for i in 0..x.n {
        let g = grad_out.sample(i);
        if let Some((gw, gb)) = param_grads.as_mut() {
            let src = if pointwise {
                x.sample(i)
            } else {
                im2col(x.sample(i), x.h, x.w, spec, &mut col);
                &col
            };
            gemm(spec.out_ch, p, k, g, false, src, true, 1.0, gw);
            for (co, row) in g.chunks(p).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(gx) = grad_x.as_mut() {
            if pointwise {
                gemm(k, spec.out_ch, p, weight, true, g, false, 0.0, gx.sample_mut(i));
            } else {
                gemm(k, spec.out_ch, p, weight, true, g, false, 0.0, &mut grad_col);
                col2im(&grad_col, x.h, x.w, spec, gx.sample_mut(i));
            }
        }
    }
    grad_x
}

pub fn relu_forward(x: &Batch) -> Batch {
    x.map(|v| v.max(0.0))
}

/// Backward through ReLU given the layer's *output*.
pub fn relu_backward(out: &Batch, grad_out: &Batch) -> Batch {
    let data = out
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(o, g)| if *o > 0.0 { *g } else { 0.0 })
        .collect();
    Batch { data, ..*out }
}

/// `y = x·Wᵀ + b` with `x: n×in`, `W: out×in`.
pub fn dense_forward(x: &[f64], n: usize, in_dim: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_dim = bias.len();
    let mut y = Vec::with_capacity(n * out_dim);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    gemm(n, in_dim, out_dim, x, false, weight, true, 1.0, &mut y);
    y
}

/// Returns the input gradient; accumulates parameter gradients when given.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    x: &[f64],
    n: usize,
    in_dim: usize,
    weight: &[f64],
    out_dim: usize,
    grad_out: &[f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    if let Some((gw, gb)) = param_grads {
        gemm(out_dim, n, in_dim, grad_out, true, x, false, 1.0, gw);
        for row in grad_out.chunks(out_dim) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
    }
    want_input_grad.then(|| {
        let mut gx = vec![0.0; n * in_dim];
        gemm(n, out_dim, in_dim, grad_out, false, weight, false, 0.0, &mut gx);
        gx
    })
}

/// Mean over spatial positions: `n×c×h×w → n×c`.
pub fn global_avg_pool(x: &Batch) -> Vec<f64> {
    let hw = x.h * x.w;
    x.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect()
}

pub fn global_avg_pool_backward(grad: &[f64], n: usize, c: usize, h: usize, w: usize) -> Batch {
    let hw = h * w;
    let mut out = Batch::zeros(n, c, h, w);
    for (plane, g) in out.data.chunks_mut(hw).zip(grad) {
        plane.fill(g / hw as f64);
    }
    out
}

pub fn upsample_nearest(x: &Batch, factor: usize) -> Batch {
    if factor == 1 {
        return x.clone();
    }
    let (h, w) = (x.h * factor, x.w * factor);
    let mut out = Batch::zeros(x.n, x.c, h, w);
    for (src, dst) in x.data.chunks(x.h * x.w).zip(out.data.chunks_mut(h * w)) {
        for y in 0..h {
            let srow = &src[(y / factor) * x.w..(y / factor + 1) * x.w];
            for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = srow[xx / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad: &Batch, factor: usize) -> Batch {
    if factor == 1 {
        return grad.clone();
    }
    let (h, w) = (grad.h / factor, grad.w / factor);
    let mut out = Batch::zeros(grad.n, grad.c, h, w);
    for (src, dst) in grad.data.chunks(grad.h * grad.w).zip(out.data.chunks_mut(h * w)) {
        for y in 0..grad.h {
            for x in 0..grad.w {
                dst[(y / factor) * w + x / factor] += src[y * grad.w + x];
            }
        }
    }
    out
}

/// Channel concatenation of batches sharing `n`, `h` and `w`.
pub fn concat_channels(parts: &[&Batch]) -> Batch {
    let first = parts[0];
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut out = Batch::zeros(first.n, c, first.h, first.w);
    for i in 0..first.n {
        let dst = out.sample_mut(i);
        let mut offset = 0;
        for p in parts {
            assert_eq!((p.n, p.h, p.w), (first.n, first.h, first.w), "concat geometry");
            let src = p.sample(i);
            dst[offset..offset + src.len()].copy_from_slice(src);
            offset += src.len();
        }
    }
    out
}

pub fn split_channels(x: &Batch, sizes: &[usize]) -> Vec<Batch> {
    let hw = x.h * x.w;
    let mut outs: Vec<Batch> = sizes.iter().map(|&c| Batch::zeros(x.n, c, x.h, x.w)).collect();
    for i in 0..x.n {
        let src = x.sample(i);
        let mut offset = 0;
        for out in outs.iter_mut() {
            let len = out.c * hw;
            out.sample_mut(i).copy_from_slice(&src[offset..offset + len]);
            offset += len;
        }
    }
    outs
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

//! Stride-1 2-d cross-correlation via im2col and a GEMM.

use super::Tensor;
use crate::error::{Error, Result};

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor, pad: usize) -> Result<Self> {
        let (n, c, h, w) = input.dims4("conv2d")?;
        let (f, kc, kh, kw) = kernel.dims4("conv2d")?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square, got {kh}x{kw}"),
            ));
        }
        if bias.shape() != [f] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {f} filters", bias.shape()),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input with padding {pad} is smaller than the {kh}x{kw} kernel"),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            k: kh,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: w + 2 * pad - kw + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one sample `[C,H,W]` into a `[P, C·k·k]` row-major matrix.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let kk = g.patch();
    for i in 0..g.ho {
        for j in 0..g.wo {
            let row = &mut cols[(i * g.wo + j) * kk..][..kk];
            let mut idx = 0;
            for c in 0..g.c {
                let plane = &x[c * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.k {
                    let ii = (i + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        row[idx..idx + g.k].fill(0.0);
                        idx += g.k;
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..][..g.w];
                    for kj in 0..g.k {
                        let jj = (j + kj) as isize - g.pad as isize;
                        row[idx] = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add a `[P, C·k·k]` matrix back onto one `[C,H,W]` sample.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let kk = g.patch();
    for i in 0..g.ho {
        for j in 0..g.wo {
            let row = &cols[(i * g.wo + j) * kk..][..kk];
            let mut idx = 0;
            for c in 0..g.c {
                let plane = &mut dx[c * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.k {
                    let ii = (i + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        idx += g.k;
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..][..g.w];
                    for kj in 0..g.k {
                        let jj = (j + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Direct shifted-row kernels: cheaper than im2col when channel counts are
/// small and planes are wide.
fn use_direct(g: &ConvGeom) -> bool {
    g.wo >= 16 && g.patch() * g.f <= 1024 && matches!(g.k, 1 | 3) && g.pad < g.k
}

/// Copy `[C,H,W]` into a zero-bordered `[C,H+2p,W+2p]` buffer.
fn pad_planes(x: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for i in 0..h {
            let src = &x[(ch * h + i) * w..][..w];
            out[(ch * hp + i + pad) * wp + pad..][..w].copy_from_slice(src);
        }
    }
    out
}

/// `out[f] += Σ_c xpad[c] ⋆ kernel[f,c]` on pre-padded planes.
fn direct_forward<const K: usize>(
    (c_in, f_out, ho, wo): (usize, usize, usize, usize),
    xpad: &[f64],
    kernel: &[f64],
    out: &mut [f64],
) {
    let wp = wo + K - 1;
    let plane_in = (ho + K - 1) * wp;
    for f in 0..f_out {
        let o = &mut out[f * ho * wo..][..ho * wo];
        for c in 0..c_in {
            let xin = &xpad[c * plane_in..][..plane_in];
            for ki in 0..K {
                let base = ((f * c_in + c) * K + ki) * K;
                let wrow: [f64; K] = kernel[base..base + K].try_into().unwrap();
                if wrow.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for i in 0..ho {
                    let src = &xin[(i + ki) * wp..][..wp];
                    let dst = &mut o[i * wo..][..wo];
                    for (kj, &wv) in wrow.iter().enumerate() {
                        for (d, s) in dst.iter_mut().zip(&src[kj..kj + wo]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `dw[f,c,ki,kj] += Σ_ij go[f,i,j]·xpad[c,i+ki,j+kj]`.
fn direct_kernel_grad<const K: usize>(
    (c_in, f_out, ho, wo): (usize, usize, usize, usize),
    xpad: &[f64],
    go: &[f64],
    dw: &mut [f64],
) {
    let wp = wo + K - 1;
    let plane_in = (ho + K - 1) * wp;
    for f in 0..f_out {
        let gp = &go[f * ho * wo..][..ho * wo];
        for c in 0..c_in {
            let xin = &xpad[c * plane_in..][..plane_in];
            for ki in 0..K {
                let base = ((f * c_in + c) * K + ki) * K;
                for i in 0..ho {
                    let src = &xin[(i + ki) * wp..][..wp];
                    let grow = &gp[i * wo..][..wo];
                    for kj in 0..K {
                        dw[base + kj] += dot(grow, &src[kj..kj + wo]);
                    }
                }
            }
        }
    }
}

/// `[F,C,k,k]` to `[C,F,k,k]` with both spatial axes reversed.
fn flip_transpose(kernel: &[f64], f_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; kernel.len()];
    for f in 0..f_out {
        for c in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    out[((c * f_out + f) * k + ki) * k + kj] =
                        kernel[((f * c_in + c) * k + (k - 1 - ki)) * k + (k - 1 - kj)];
                }
            }
        }
    }
    out
}

fn run_direct_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], out: &mut [f64]) {
    let xpad = pad_planes(x, g.c, g.h, g.w, g.pad);
    let dims = (g.c, g.f, g.ho, g.wo);
    match g.k {
        1 => direct_forward::<1>(dims, &xpad, kernel, out),
        3 => direct_forward::<3>(dims, &xpad, kernel, out),
        _ => unreachable!("direct path only handles 1x1 and 3x3"),
    }
}

fn run_direct_backward(g: &ConvGeom, x: &[f64], kernel: &[f64], go: &[f64], dx: &mut [f64], dw: &mut [f64]) {
    let xpad = pad_planes(x, g.c, g.h, g.w, g.pad);
    let dims = (g.c, g.f, g.ho, g.wo);
    // dx is the full correlation of go with the flipped, transposed kernel
    let back_pad = g.k - 1 - g.pad;
    let gpad = pad_planes(go, g.f, g.ho, g.wo, back_pad);
    let kt = flip_transpose(kernel, g.f, g.c, g.k);
    let back_dims = (g.f, g.c, g.h, g.w);
    match g.k {
        1 => {
            direct_kernel_grad::<1>(dims, &xpad, go, dw);
            direct_forward::<1>(back_dims, &gpad, &kt, dx);
        }
        3 => {
            direct_kernel_grad::<3>(dims, &xpad, go, dw);
            direct_forward::<3>(back_dims, &gpad, &kt, dx);
        }
        _ => unreachable!("direct path only handles 1x1 and 3x3"),
    }
}

/// `C = alpha·A·B + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    // SAFETY: every call site passes buffers whose extents cover the
    // (m, k, n) access pattern implied by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

/// Cross-correlation of `input [N,C,H,W]` with `kernel [F,C,k,k]` plus `bias [F]`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, bias, padding)?;
    let (kk, p) = (g.patch(), g.pixels());
    let mut out = vec![0.0; g.n * g.f * p];
    let x = input.data();
    if use_direct(&g) {
        for s in 0..g.n {
            let o = &mut out[s * g.f * p..][..g.f * p];
            for (f, plane) in o.chunks_mut(p).enumerate() {
                plane.fill(bias.data()[f]);
            }
            run_direct_forward(&g, &x[s * g.c * g.h * g.w..][..g.c * g.h * g.w], kernel.data(), o);
        }
        return Tensor::new(vec![g.n, g.f, g.ho, g.wo], out);
    }
    let mut cols = vec![0.0; p * kk];
    for s in 0..g.n {
        im2col(&g, &x[s * g.c * g.h * g.w..][..g.c * g.h * g.w], &mut cols);
        let o = &mut out[s * g.f * p..][..g.f * p];
        // outᵀ [P,F] = cols [P,K] · Wᵀ [K,F]
        gemm(
            p,
            kk,
            g.f,
            (&cols, kk as isize, 1),
            (kernel.data(), 1, kk as isize),
            0.0,
            (o, 1, p as isize),
        );
        for (f, plane) in o.chunks_mut(p).enumerate() {
            let b = bias.data()[f];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::new(vec![g.n, g.f, g.ho, g.wo], out)
}

/// Gradients of [`conv2d_forward`] w.r.t. (input, kernel, bias) given the
/// upstream gradient of its output.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, bias, padding)?;
    if grad_out.shape() != [g.n, g.f, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient shape {:?}", grad_out.shape()),
        ));
    }
    let (kk, p) = (g.patch(), g.pixels());
    let sample = g.c * g.h * g.w;
    let mut dx = vec![0.0; g.n * sample];
    let mut dw = vec![0.0; g.f * kk];
    let mut db = vec![0.0; g.f];
    let direct = use_direct(&g);
    let (mut cols, mut dcols) = if direct {
        (Vec::new(), Vec::new())
    } else {
        (vec![0.0; p * kk], vec![0.0; p * kk])
    };
    let x = input.data();
    for s in 0..g.n {
        let go = &grad_out.data()[s * g.f * p..][..g.f * p];
        for (f, plane) in go.chunks(p).enumerate() {
            db[f] += plane.iter().sum::<f64>();
        }
        if direct {
            run_direct_backward(
                &g,
                &x[s * sample..][..sample],
                kernel.data(),
                go,
                &mut dx[s * sample..][..sample],
                &mut dw,
            );
            continue;
        }
        im2col(&g, &x[s * sample..][..sample], &mut cols);
        // dWᵀ [K,F] += colsᵀ [K,P] · goᵀ [P,F]
        gemm(
            kk,
            p,
            g.f,
            (&cols, 1, kk as isize),
            (go, 1, p as isize),
            1.0,
            (&mut dw, 1, kk as isize),
        );
        // dcols [P,K] = goᵀ [P,F] · W [F,K]
        gemm(
            p,
            g.f,
            kk,
            (go, 1, p as isize),
            (kernel.data(), kk as isize, 1),
            0.0,
            (&mut dcols, kk as isize, 1),
        );
        col2im(&g, &dcols, &mut dx[s * sample..][..sample]);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dw)?,
        Tensor::new(vec![g.f], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_times_two() {
        let x = Tensor::ones([1, 1, 3, 3]);
        let k = Tensor::full([1, 1, 1, 1], 2.0);
        let b = Tensor::zeros([1]);
        let y = conv2d_forward(&x, &k, &b, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn full_window_sum() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::ones([1, 1, 2, 2]);
        let y = conv2d_forward(&x, &k, &Tensor::zeros([1]), 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::ones([1, 2, 4, 4]);
        let k = Tensor::ones([1, 3, 3, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros([1]), 1).unwrap_err();
        assert!(err.to_string().contains("input channels"));
    }
}

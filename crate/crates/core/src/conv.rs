//! Convolution kernels over NCHW buffers (im2col + GEMM).
//!
//! `conv2d` is a cross-correlation with kernel layout `[Co, Ci, k, k]`.
//! `conv_transpose2d` takes a kernel laid out `[Ci, Co, k, k]` and is the exact
//! linear adjoint of `conv2d` run with that same kernel buffer (which `conv2d`
//! reads as mapping `Co` channels to `Ci`). Bias is added after the scatter.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side.
    Same,
    Explicit(usize),
}

impl Padding {
    pub fn resolve(self, kernel: usize) -> usize {
        match self {
            Padding::Same => (kernel - 1) / 2,
            Padding::Explicit(p) => p,
        }
    }
}

/// Geometry of a forward cross-correlation `[B, ci, h, w] -> [B, co, ho, wo]`.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn out_extent(op: &'static str, axis: &str, n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("{axis}: padded extent {padded} smaller than kernel {k}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn kernel_dims(op: &'static str, kernel: &Tensor) -> Result<(usize, usize, usize)> {
    match *kernel.shape() {
        [a, b, kh, kw] if kh == kw => Ok((a, b, kh)),
        [_, _, kh, kw] => Err(Error::shape(op, format!("kernel not square: kH={kh} kW={kw}"))),
        _ => Err(Error::shape(
            op,
            format!("kernel must be 4-D, got {:?}", kernel.shape()),
        )),
    }
}

fn input_dims(op: &'static str, input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *input.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("input must be [B, C, H, W], got {:?}", input.shape()),
        )),
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(Error::shape(
                op,
                format!("bias length {} != output channels {channels}", b.numel()),
            ));
        }
    }
    Ok(())
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let (batch, ci, h, w) = input_dims(OP, input)?;
    let (co, kci, k) = kernel_dims(OP, kernel)?;
    if kci != ci {
        return Err(Error::shape(
            OP,
            format!("input channel axis C={ci} != kernel Ci axis {kci}"),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    let pad = padding.resolve(k);
    let ho = out_extent(OP, "height", h, k, stride, pad)?;
    let wo = out_extent(OP, "width", w, k, stride, pad)?;
    Ok(Geometry {
        batch,
        ci,
        h,
        w,
        co,
        k,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Geometry of the forward conv whose adjoint is the requested transposed conv.
fn transpose_geometry(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Geometry> {
    const OP: &str = "conv_transpose2d";
    let (batch, cin, h, w) = input_dims(OP, input)?;
    let (kci, cout, k) = kernel_dims(OP, kernel)?;
    if kci != cin {
        return Err(Error::shape(
            OP,
            format!("input channel axis C={cin} != kernel leading axis {kci}"),
        ));
    }
    let pad = padding.resolve(k);
    let grow = |n: usize, axis: &str| -> Result<usize> {
        let full = n + k - 1;
        if full <= 2 * pad {
            return Err(Error::shape(OP, format!("{axis}: output extent would be empty")));
        }
        Ok(full - 2 * pad)
    };
    let ho = grow(h, "height")?;
    let wo = grow(w, "width")?;
    // Forward conv: [cout, ho, wo] -> [cin, h, w].
    Ok(Geometry {
        batch,
        ci: cout,
        h: ho,
        w: wo,
        co: cin,
        k,
        stride: 1,
        pad,
        ho: h,
        wo: w,
    })
}

/// `c = alpha * a·b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller upholds:
    // each operand slice covers its full strided extent.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfold one `[ci, h, w]` sample into `[ci*k*k, ho*wo]` columns.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let plane = g.out_plane();
    let k = g.k;
    for c in 0..g.ci {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if hi > lo {
                            let start = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
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
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[ci, h, w]` sample.
fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let plane = g.out_plane();
    let k = g.k;
    for c in 0..g.ci {
        let xc = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..g.ho {
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
                        if hi > lo {
                            let start = lo + kx - g.pad;
                            for (d, s) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad(dy: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for (i, chunk) in dy.chunks_exact(plane).enumerate() {
        db[i % channels] += chunk.iter().sum::<f64>();
    }
    db
}

/// Few-channel stride-1 convolutions run faster as direct loops than through
/// im2col, whose unfolding and packing then cost more than the multiply.
fn use_direct(g: &Geometry) -> bool {
    g.stride == 1 && g.pad < g.k && (g.ci.min(g.co) <= 2 || g.ci * g.co <= 16)
}

/// Copy `[c, h, w]` into a zero-bordered `[c, h + 2p, w + 2p]` buffer.
fn pad_into(x: &[f64], c: usize, h: usize, w: usize, pad: usize, xp: &mut [f64]) {
    let wp = w + 2 * pad;
    let hp = h + 2 * pad;
    xp.fill(0.0);
    for ch in 0..c {
        for y in 0..h {
            xp[(ch * hp + y + pad) * wp + pad..][..w].copy_from_slice(&x[(ch * h + y) * w..][..w]);
        }
    }
}

/// Stride-1 cross-correlation `[B, ci, h, w] * [co, ci, k, k] -> [B, co, ho, wo]`.
#[allow(clippy::too_many_arguments)]
fn correlate(
    x: &[f64],
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (ho, wo) = (hp + 1 - k, wp + 1 - k);
    let mut out = vec![0.0; batch * co * ho * wo];
    let mut xp = vec![0.0; ci * hp * wp];
    for b in 0..batch {
        pad_into(&x[b * ci * h * w..][..ci * h * w], ci, h, w, pad, &mut xp);
        for o in 0..co {
            for oy in 0..ho {
                let acc = &mut out[((b * co + o) * ho + oy) * wo..][..wo];
                for c in 0..ci {
                    for ky in 0..k {
                        let row = &xp[(c * hp + oy + ky) * wp..][..wp];
                        let taps = &wt[((o * ci + c) * k + ky) * k..][..k];
                        if k == 3 {
                            let (t0, t1, t2) = (taps[0], taps[1], taps[2]);
                            let shifted = row[..wo].iter().zip(&row[1..wo + 1]).zip(&row[2..wo + 2]);
                            for (a, ((p, q), r)) in acc.iter_mut().zip(shifted) {
                                *a += t0 * p + t1 * q + t2 * r;
                            }
                        } else {
                            for (kx, &t) in taps.iter().enumerate() {
                                for (a, p) in acc.iter_mut().zip(&row[kx..kx + wo]) {
                                    *a += t * p;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[a, b, k, k]` -> `[b, a, k, k]` with both spatial axes reversed.
fn flip_swap(wt: &[f64], a: usize, b: usize, k: usize) -> Vec<f64> {
    let kk = k * k;
    let mut out = vec![0.0; wt.len()];
    for i in 0..a {
        for j in 0..b {
            for t in 0..kk {
                out[(j * a + i) * kk + (kk - 1 - t)] = wt[(i * b + j) * kk + t];
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `g` against `row` shifted by 0, 1 and 2, in one pass.
fn dot3(g: &[f64], row: &[f64]) -> [f64; 3] {
    let n = g.len();
    let (r0, r1, r2) = (&row[..n], &row[1..n + 1], &row[2..n + 2]);
    let mut acc = [[0.0; 4]; 3];
    let body = n - n % 4;
    for ((gc, (a, b)), c) in g[..body]
        .chunks_exact(4)
        .zip(r0[..body].chunks_exact(4).zip(r1[..body].chunks_exact(4)))
        .zip(r2[..body].chunks_exact(4))
    {
        for l in 0..4 {
            acc[0][l] += gc[l] * a[l];
            acc[1][l] += gc[l] * b[l];
            acc[2][l] += gc[l] * c[l];
        }
    }
    let mut out = acc.map(|v| (v[0] + v[1]) + (v[2] + v[3]));
    for i in body..n {
        out[0] += g[i] * r0[i];
        out[1] += g[i] * r1[i];
        out[2] += g[i] * r2[i];
    }
    out
}

/// Kernel gradient of [`correlate`]: `dw[o, c, ky, kx] += sum dy[o] * shifted x[c]`.
#[allow(clippy::too_many_arguments)]
fn correlate_kernel_grad(
    x: &[f64],
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    dy: &[f64],
    co: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (ho, wo) = (hp + 1 - k, wp + 1 - k);
    let mut dw = vec![0.0; co * ci * k * k];
    let mut xp = vec![0.0; ci * hp * wp];
    for b in 0..batch {
        pad_into(&x[b * ci * h * w..][..ci * h * w], ci, h, w, pad, &mut xp);
        for o in 0..co {
            let g = &dy[(b * co + o) * ho * wo..][..ho * wo];
            for c in 0..ci {
                let dst = &mut dw[(o * ci + c) * k * k..][..k * k];
                for oy in 0..ho {
                    let grow = &g[oy * wo..][..wo];
                    for ky in 0..k {
                        let row = &xp[(c * hp + oy + ky) * wp..][..wp];
                        if k == 3 {
                            let [a, b, c3] = dot3(grow, row);
                            dst[ky * 3] += a;
                            dst[ky * 3 + 1] += b;
                            dst[ky * 3 + 2] += c3;
                        } else {
                            for kx in 0..k {
                                dst[ky * k + kx] += dot(grow, &row[kx..kx + wo]);
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Output of a convolution backward pass. Fields are `None` when not requested.
#[derive(Debug, Default)]
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Which gradients a backward pass should produce.
#[derive(Clone, Copy, Debug)]
pub struct Wants {
    pub input: bool,
    pub kernel: bool,
    pub bias: bool,
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    check_bias("conv2d", bias, g.co)?;
    let kdim = g.col_rows();
    let plane = g.out_plane();
    if use_direct(&g) {
        let mut out = correlate(input.data(), g.batch, g.ci, g.h, g.w, kernel.data(), g.co, g.k, g.pad);
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), plane);
        }
        return Tensor::new([g.batch, g.co, g.ho, g.wo], out);
    }
    let mut out = vec![0.0; g.batch * g.co * plane];
    let mut cols = vec![0.0; kdim * plane];
    for b in 0..g.batch {
        let x = &input.data()[b * g.ci * g.in_plane()..][..g.ci * g.in_plane()];
        im2col(x, &g, &mut cols);
        let y = &mut out[b * g.co * plane..][..g.co * plane];
        gemm(
            g.co,
            kdim,
            plane,
            kernel.data(),
            (kdim, 1),
            &cols,
            (plane, 1),
            0.0,
            y,
            (plane, 1),
        );
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias.data(), plane);
    }
    Tensor::new([g.batch, g.co, g.ho, g.wo], out)
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &[f64],
    wants: Wants,
) -> Result<ConvGrads> {
    let g = conv_geometry(input, kernel, stride, padding)?;
    let kdim = g.col_rows();
    let plane = g.out_plane();
    let in_len = g.ci * g.in_plane();
    let mut grads = ConvGrads::default();
    if wants.bias {
        grads.bias = Some(bias_grad(grad_out, g.co, plane));
    }
    if use_direct(&g) {
        if wants.input {
            let flipped = flip_swap(kernel.data(), g.co, g.ci, g.k);
            let dx = correlate(
                grad_out,
                g.batch,
                g.co,
                g.ho,
                g.wo,
                &flipped,
                g.ci,
                g.k,
                g.k - 1 - g.pad,
            );
            grads.input = Some(dx);
        }
        if wants.kernel {
            grads.kernel = Some(correlate_kernel_grad(
                input.data(),
                g.batch,
                g.ci,
                g.h,
                g.w,
                grad_out,
                g.co,
                g.k,
                g.pad,
            ));
        }
        return Ok(grads);
    }
    let mut dx = wants.input.then(|| vec![0.0; g.batch * in_len]);
    let mut dw = wants.kernel.then(|| vec![0.0; g.co * kdim]);
    let mut cols = vec![0.0; kdim * plane];
    for b in 0..g.batch {
        let dy = &grad_out[b * g.co * plane..][..g.co * plane];
        if let Some(dw) = dw.as_mut() {
            im2col(&input.data()[b * in_len..][..in_len], &g, &mut cols);
            // dW[co, K] += dY[co, P] · cols[K, P]^T
            gemm(g.co, plane, kdim, dy, (plane, 1), &cols, (1, plane), 1.0, dw, (kdim, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[K, P] = W[co, K]^T · dY[co, P]
            gemm(
                kdim,
                g.co,
                plane,
                kernel.data(),
                (1, kdim),
                dy,
                (plane, 1),
                0.0,
                &mut cols,
                (plane, 1),
            );
            col2im(&cols, &g, &mut dx[b * in_len..][..in_len]);
        }
    }
    grads.input = dx;
    grads.kernel = dw;
    Ok(grads)
}

/// Transposed convolution with stride 1. `kernel` is `[Ci, Co, k, k]`.
pub fn conv_transpose2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: Padding) -> Result<Tensor> {
    let g = transpose_geometry(input, kernel, padding)?;
    // Here g maps out-space [g.ci] -> in-space [g.co]; our input lives in g's output space.
    check_bias("conv_transpose2d", bias, g.ci)?;
    let kdim = g.col_rows();
    let small = g.out_plane();
    let out_len = g.ci * g.in_plane();
    if use_direct(&g) {
        let flipped = flip_swap(kernel.data(), g.co, g.ci, g.k);
        let mut out = correlate(
            input.data(),
            g.batch,
            g.co,
            g.ho,
            g.wo,
            &flipped,
            g.ci,
            g.k,
            g.k - 1 - g.pad,
        );
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), g.in_plane());
        }
        return Tensor::new([g.batch, g.ci, g.h, g.w], out);
    }
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; kdim * small];
    for b in 0..g.batch {
        let x = &input.data()[b * g.co * small..][..g.co * small];
        // cols[K, P] = W[cin, K]^T · x[cin, P]
        gemm(
            kdim,
            g.co,
            small,
            kernel.data(),
            (1, kdim),
            x,
            (small, 1),
            0.0,
            &mut cols,
            (small, 1),
        );
        col2im(&cols, &g, &mut out[b * out_len..][..out_len]);
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias.data(), g.in_plane());
    }
    Tensor::new([g.batch, g.ci, g.h, g.w], out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    padding: Padding,
    grad_out: &[f64],
    wants: Wants,
) -> Result<ConvGrads> {
    let g = transpose_geometry(input, kernel, padding)?;
    let kdim = g.col_rows();
    let small = g.out_plane();
    let big = g.ci * g.in_plane();
    let in_len = g.co * small;
    let mut grads = ConvGrads::default();
    if wants.bias {
        grads.bias = Some(bias_grad(grad_out, g.ci, g.in_plane()));
    }
    if use_direct(&g) {
        if wants.input {
            grads.input = Some(correlate(
                grad_out,
                g.batch,
                g.ci,
                g.h,
                g.w,
                kernel.data(),
                g.co,
                g.k,
                g.pad,
            ));
        }
        if wants.kernel {
            grads.kernel = Some(correlate_kernel_grad(
                grad_out,
                g.batch,
                g.ci,
                g.h,
                g.w,
                input.data(),
                g.co,
                g.k,
                g.pad,
            ));
        }
        return Ok(grads);
    }
    let mut dx = wants.input.then(|| vec![0.0; g.batch * in_len]);
    let mut dw = wants.kernel.then(|| vec![0.0; g.co * kdim]);
    let mut cols = vec![0.0; kdim * small];
    if wants.input || wants.kernel {
        for b in 0..g.batch {
            im2col(&grad_out[b * big..][..big], &g, &mut cols);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[b * in_len..][..in_len];
                gemm(
                    g.co,
                    kdim,
                    small,
                    kernel.data(),
                    (kdim, 1),
                    &cols,
                    (small, 1),
                    0.0,
                    dst,
                    (small, 1),
                );
            }
            if let Some(dw) = dw.as_mut() {
                let x = &input.data()[b * in_len..][..in_len];
                gemm(g.co, small, kdim, x, (small, 1), &cols, (1, small), 1.0, dw, (kdim, 1));
            }
        }
    }
    grads.input = dx;
    grads.kernel = dw;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct four-loop cross-correlation, independent of im2col/GEMM.
    fn naive_conv(x: &Tensor, w: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Tensor {
        let [b, ci, h, wd] = x.shape().try_into().unwrap();
        let [co, _, k, _] = w.shape().try_into().unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([b, co, ho, wo]);
        for n in 0..b {
            for (o, &b0) in bias.iter().enumerate().take(co) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros([2, 3, 5, 5]);
        let w = Tensor::uniform([4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let y = conv2d(&x, &w, Some(&b), 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 5]);
        for (i, chunk) in y.data().chunks(25).enumerate() {
            assert!(chunk.iter().all(|&v| v == b.data()[i % 4]));
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform([1, 1, 6, 7], 1.0, &mut rng);
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, None, 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_on_3x3() {
        let x = Tensor::new([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, Padding::Same).unwrap();
        assert_eq!(y.data()[4], 45.0);
        let oracle = naive_conv(&x, &w, &[0.0], 1, 1);
        assert_eq!(y.data(), oracle.data());
        // Corners see a 2x2 window: 1+2+4+5 = 12.
        assert_eq!(y.data()[0], 12.0);
    }

    #[test]
    fn matches_naive_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad, k) in [(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1), (3, 2, 3)] {
            let x = Tensor::uniform([2, 3, 7, 6], 1.0, &mut rng);
            let w = Tensor::uniform([4, 3, k, k], 1.0, &mut rng);
            let bias = Tensor::uniform([4], 1.0, &mut rng);
            let y = conv2d(&x, &w, Some(&bias), stride, Padding::Explicit(pad)).unwrap();
            let oracle = naive_conv(&x, &w, bias.data(), stride, pad);
            assert_eq!(y.shape(), oracle.shape());
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([3, 5, 3, 3]);
        let err = conv2d(&x, &w, None, 1, Padding::Same).unwrap_err().to_string();
        assert!(err.contains("Ci"), "{err}");
    }

    #[test]
    fn transpose_single_pixel_scatters_kernel() {
        let x = Tensor::full([1, 1, 1, 1], 2.0);
        let w = Tensor::new([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = conv_transpose2d(&x, &w, None, Padding::Explicit(0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let expect: Vec<f64> = (1..=9).map(|v| 2.0 * v as f64).collect();
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn transpose_zero_input_is_bias() {
        let w = Tensor::full([3, 2, 3, 3], 1.0);
        let b = Tensor::from_vec(vec![1.5, -2.0]);
        let y = conv_transpose2d(&Tensor::zeros([1, 3, 4, 4]), &w, Some(&b), Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert!(y.data()[..16].iter().all(|&v| v == 1.5));
        assert!(y.data()[16..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn adjoint_identity_same_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for pad in [Padding::Same, Padding::Explicit(0), Padding::Explicit(2)] {
            let w = Tensor::uniform([5, 3, 3, 3], 1.0, &mut rng);
            let x = Tensor::uniform([2, 3, 6, 6], 1.0, &mut rng);
            let cx = conv2d(&x, &w, None, 1, pad).unwrap();
            let y = Tensor::uniform(cx.shape().to_vec(), 1.0, &mut rng);
            let ty = conv_transpose2d(&y, &w, None, pad).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&ty).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }
}

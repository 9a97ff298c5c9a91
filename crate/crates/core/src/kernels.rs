//! Numeric kernels: im2col convolution, transposed convolution and integer
//! powers, with the matching backward passes used by the autodiff graph.
//!
//! Every output element is accumulated in a fixed order, so results do not
//! depend on how work is scheduled.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output size `ceil(H / stride)`; odd padding puts the extra row/column
    /// at the bottom/right.
    Same,
    /// No padding; output size `(H - k) / stride + 1`.
    Valid,
}

/// Sliding-window geometry over one `C×H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    pub fn new(
        op: &'static str,
        (c, h, w): (usize, usize, usize),
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Geom> {
        if stride == 0 {
            return Err(Error::invalid("stride", "must be at least 1"));
        }
        if k == 0 {
            return Err(Error::invalid("kernel", "spatial size must be at least 1"));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + k).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + k).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if k > h || k > w {
                    return Err(Error::shape(
                        op,
                        format!("{k}×{k} kernel larger than {h}×{w} input"),
                    ));
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
        };
        Ok(Geom {
            c,
            h,
            w,
            k,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate of output index `o` under kernel offset `kk`, if it
    /// falls inside the image.
    #[inline]
    fn src(o: usize, kk: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * stride + kk).checked_sub(pad)?;
        (i < extent).then_some(i)
    }
}

/// Unfolds `image` (`C×H×W`) into a `(C·k·k) × (oh·ow)` matrix.
pub(crate) fn im2col(image: &[f32], g: &Geom, cols: &mut [f32]) {
    let plane = g.h * g.w;
    let p = g.cols();
    for c in 0..g.c {
        let src_plane = &image[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match Geom::src(oy, ki, g.stride, g.pad_top, g.h) {
                        None => dst_row.fill(0.0),
                        Some(iy) => {
                            let src_row = &src_plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                *d = match Geom::src(ox, kj, g.stride, g.pad_left, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters matrix entries back onto `image`,
/// summing overlaps.
pub(crate) fn col2im(cols: &[f32], g: &Geom, image: &mut [f32]) {
    let plane = g.h * g.w;
    let p = g.cols();
    for c in 0..g.c {
        let dst_plane = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = Geom::src(oy, ki, g.stride, g.pad_top, g.h) else {
                        continue;
                    };
                    let dst_row = &mut dst_plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.ow {
                        if let Some(ix) = Geom::src(ox, kj, g.stride, g.pad_left, g.w) {
                            dst_row[ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Eight-lane dot product with a fixed reduction tree.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let x = &a[c * LANES..(c + 1) * LANES];
        let y = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

/// Transposes a row-major `rows×cols` matrix.
pub(crate) fn transpose(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn check_square_kernel(op: &'static str, kernel: &Tensor) -> Result<[usize; 4]> {
    let dims = kernel.dims4(op)?;
    if dims[2] != dims[3] {
        return Err(Error::shape(
            op,
            format!("kernel must be square, got {:?}", kernel.shape()),
        ));
    }
    Ok(dims)
}

fn check_bias(op: &'static str, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.len() != channels || bias.ndim() != 1 {
        return Err(Error::shape(
            op,
            format!(
                "bias shape {:?} does not match {channels} output channels",
                bias.shape()
            ),
        ));
    }
    Ok(())
}

/// Per-channel sums of an `N×C×H×W` tensor, accumulated in `f64`.
fn channel_sums(t: &Tensor) -> Vec<f32> {
    let [n, c, h, w] = t.dims4("channel_sums").expect("4-d gradient");
    let plane = h * w;
    (0..c)
        .map(|ch| {
            let mut s = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                s += t.data()[base..base + plane]
                    .iter()
                    .map(|&x| x as f64)
                    .sum::<f64>();
            }
            s as f32
        })
        .collect()
}

/// Geometry of a convolution of `input` with `kernel` (`Cout×Cin×k×k`).
pub(crate) fn conv2d_geom(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Geom> {
    const OP: &str = "conv2d";
    let [_, cin, h, w] = input.dims4(OP)?;
    let [_, kcin, k, _] = check_square_kernel(OP, kernel)?;
    if kcin != cin {
        return Err(Error::shape(
            OP,
            format!(
                "input has {cin} channels but kernel {:?} expects {kcin}",
                kernel.shape()
            ),
        ));
    }
    Geom::new(OP, (cin, h, w), k, stride, padding)
}

/// 2-D cross-correlation: `out[n, co] = bias[co] + Σ_ci input[n, ci] ⋆ kernel[co, ci]`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = conv2d_geom(input, kernel, stride, padding)?;
    let [n, cin, h, w] = input.dims4("conv2d")?;
    let cout = kernel.shape()[0];
    check_bias("conv2d", bias, cout)?;

    let (rows, p) = (g.rows(), g.cols());
    let mut cols = vec![0.0; rows * p];
    let mut out = vec![0.0; n * cout * p];
    for b in 0..n {
        im2col(
            &input.data()[b * cin * h * w..(b + 1) * cin * h * w],
            &g,
            &mut cols,
        );
        let dst = &mut out[b * cout * p..(b + 1) * cout * p];
        for (co, &bv) in bias.data().iter().enumerate() {
            dst[co * p..(co + 1) * p].fill(bv);
        }
        gemm_nn(cout, rows, p, kernel.data(), &cols, dst);
    }
    Tensor::new(&[n, cout, g.oh, g.ow], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = conv2d_geom(input, kernel, stride, padding)?;
    let [n, cin, h, w] = input.dims4("conv2d")?;
    let cout = kernel.shape()[0];
    let (rows, p) = (g.rows(), g.cols());
    let image = cin * h * w;

    let mut cols = vec![0.0; rows * p];
    let mut dk = vec![0.0; cout * rows];
    let kt = need_input.then(|| transpose(cout, rows, kernel.data()));
    let mut dx = need_input.then(|| vec![0.0; n * image]);
    let mut dcols = vec![0.0; rows * p];
    for b in 0..n {
        let gout = &grad_out.data()[b * cout * p..(b + 1) * cout * p];
        im2col(&input.data()[b * image..(b + 1) * image], &g, &mut cols);
        gemm_nt(cout, p, rows, gout, &cols, &mut dk);
        if let (Some(kt), Some(dx)) = (&kt, &mut dx) {
            dcols.fill(0.0);
            gemm_nn(rows, cout, p, kt, gout, &mut dcols);
            col2im(&dcols, &g, &mut dx[b * image..(b + 1) * image]);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: Tensor::from_slice(&channel_sums(grad_out)),
    })
}

/// Geometry of the convolution whose input-gradient is the transposed
/// convolution of `input` with `kernel` (`Cin×Cout×k×k`).
pub(crate) fn conv2d_transpose_geom(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
) -> Result<Geom> {
    const OP: &str = "conv2d_transpose";
    let [_, cin, h, w] = input.dims4(OP)?;
    let [kcin, cout, k, _] = check_square_kernel(OP, kernel)?;
    if kcin != cin {
        return Err(Error::shape(
            OP,
            format!(
                "input has {cin} channels but kernel {:?} expects {kcin}",
                kernel.shape()
            ),
        ));
    }
    let g = Geom::new(OP, (cout, stride * h, stride * w), k, stride, Padding::Same)?;
    debug_assert_eq!((g.oh, g.ow), (h, w));
    Ok(g)
}

/// Transposed convolution with output size `stride·H × stride·W`.
///
/// Each input element scatters its value times the kernel into its output
/// window; overlapping contributions sum. This is exactly the adjoint of a
/// same-padded [`conv2d`] with the same stride.
pub fn conv2d_transpose(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let g = conv2d_transpose_geom(input, kernel, stride)?;
    let [n, cin, h, w] = input.dims4("conv2d_transpose")?;
    let cout = kernel.shape()[1];
    check_bias("conv2d_transpose", bias, cout)?;

    let (rows, p) = (g.rows(), g.cols());
    let kt = transpose(cin, rows, kernel.data());
    let plane_out = g.h * g.w;
    let mut out = vec![0.0; n * cout * plane_out];
    let mut cols = vec![0.0; rows * p];
    for b in 0..n {
        cols.fill(0.0);
        gemm_nn(
            rows,
            cin,
            p,
            &kt,
            &input.data()[b * cin * h * w..],
            &mut cols,
        );
        let dst = &mut out[b * cout * plane_out..(b + 1) * cout * plane_out];
        col2im(&cols, &g, dst);
        for (co, &bv) in bias.data().iter().enumerate() {
            for v in &mut dst[co * plane_out..(co + 1) * plane_out] {
                *v += bv;
            }
        }
    }
    Tensor::new(&[n, cout, g.h, g.w], out)
}

pub(crate) fn conv2d_transpose_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = conv2d_transpose_geom(input, kernel, stride)?;
    let [n, cin, h, w] = input.dims4("conv2d_transpose")?;
    let cout = kernel.shape()[1];
    let (rows, p) = (g.rows(), g.cols());
    let image = cin * h * w;
    let plane_out = g.h * g.w;

    let mut dcols = vec![0.0; rows * p];
    let mut dk = vec![0.0; cin * rows];
    let mut dx = need_input.then(|| vec![0.0; n * image]);
    for b in 0..n {
        im2col(
            &grad_out.data()[b * cout * plane_out..(b + 1) * cout * plane_out],
            &g,
            &mut dcols,
        );
        let x = &input.data()[b * image..(b + 1) * image];
        gemm_nt(cin, p, rows, x, &dcols, &mut dk);
        if let Some(dx) = &mut dx {
            gemm_nn(cin, rows, p, kernel.data(), &dcols, &mut dx[b * image..]);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: Tensor::from_slice(&channel_sums(grad_out)),
    })
}

#[inline]
fn powi(y: f32, q: u32) -> f32 {
    let mut acc = y;
    for _ in 1..q {
        acc *= y;
    }
    acc
}

/// Elementwise `y^q` for an integer `q ≥ 1`.
pub fn pow_int(input: &Tensor, q: u32) -> Result<Tensor> {
    if q == 0 {
        return Err(Error::invalid("q", "power must be at least 1"));
    }
    Ok(input.map(|y| powi(y, q)))
}

pub(crate) fn pow_int_backward(input: &Tensor, q: u32, grad_out: &Tensor) -> Tensor {
    input.zip_map(grad_out, |y, g| {
        if q == 1 {
            g
        } else {
            g * q as f32 * powi(y, q - 1)
        }
    })
}

/// Expands each channel `c` of `N×C×H×W` into channels `c·Q .. c·Q+Q-1`
/// holding `y, y², …, y^Q`.
pub fn power_expand(input: &Tensor, q: usize) -> Result<Tensor> {
    if q == 0 {
        return Err(Error::invalid("Q", "order must be at least 1"));
    }
    let [n, c, h, w] = input.dims4("power_expand")?;
    if q == 1 {
        return Ok(input.clone());
    }
    let plane = h * w;
    let mut out = vec![0.0; n * c * q * plane];
    for b in 0..n {
        for ch in 0..c {
            let src = &input.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let base = (b * c + ch) * q * plane;
            out[base..base + plane].copy_from_slice(src);
            for k in 1..q {
                let (prev, cur) =
                    out[base + (k - 1) * plane..base + (k + 1) * plane].split_at_mut(plane);
                for ((o, &p), &y) in cur.iter_mut().zip(prev.iter()).zip(src) {
                    *o = p * y;
                }
            }
        }
    }
    Tensor::new(&[n, c * q, h, w], out)
}

pub(crate) fn power_expand_backward(input: &Tensor, q: usize, grad_out: &Tensor) -> Tensor {
    if q == 1 {
        return grad_out.clone();
    }
    let [n, c, h, w] = input.dims4("power_expand").expect("validated in forward");
    let plane = h * w;
    let mut dx = vec![0.0; input.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let src = &input.data()[off..off + plane];
            let base = (b * c + ch) * q * plane;
            let dst = &mut dx[off..off + plane];
            for (i, d) in dst.iter_mut().enumerate() {
                let y = src[i];
                // Σ_q g_q · q · y^(q-1), Horner-free to keep the order fixed.
                let mut acc = grad_out.data()[base + i];
                let mut ypow = 1.0f32;
                for k in 1..q {
                    ypow *= y;
                    acc += grad_out.data()[base + k * plane + i] * (k + 1) as f32 * ypow;
                }
                *d = acc;
            }
        }
    }
    Tensor::new(input.shape(), dx).expect("same shape as input")
}

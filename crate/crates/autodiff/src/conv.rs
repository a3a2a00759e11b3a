//! 2-D convolutions lowered to patch extraction plus matrix products.
//!
//! `im2col` and `col2im` are adjoint linear maps, so each serves as the
//! other's backward pass and convolutions stay differentiable to any order.

use ndarray::{ArrayD, IxDyn};

use crate::var::Var;

/// Geometry of a square-kernel convolution over `[batch, channels, height, width]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel > 0 && stride > 0, "kernel and stride must be positive");
        Window { kernel, stride, padding }
    }

    /// Output extent of a convolution over an input of extent `size`.
    pub fn conv_out(&self, size: usize) -> usize {
        let padded = size + 2 * self.padding;
        assert!(padded >= self.kernel, "kernel larger than padded input");
        (padded - self.kernel) / self.stride + 1
    }

    /// Output extent of a transposed convolution over an input of extent `size`.
    pub fn transpose_out(&self, size: usize) -> usize {
        ((size - 1) * self.stride + self.kernel)
            .checked_sub(2 * self.padding)
            .expect("padding too large for transposed convolution")
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [batch, channels, height, width], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// In-bounds kernel taps `[lo, hi)` for output coordinate `o` along an axis of extent `size`.
fn tap_range(o: usize, size: usize, window: Window) -> (usize, usize) {
    let start = (o * window.stride) as isize - window.padding as isize;
    let lo = (-start).max(0) as usize;
    let hi = (size as isize - start).clamp(0, window.kernel as isize) as usize;
    (lo.min(hi), hi)
}

/// Calls `visit(patch_slice_start, image_slice_start, len)` for every contiguous run of taps.
///
/// Patch rows are ordered `(b, oy, ox)` and columns `(c, ky, kx)`.
fn for_each_run(image_shape: &[usize], window: Window, mut visit: impl FnMut(usize, usize, usize)) -> (usize, usize) {
    let (b, c, h, w) = dims4(image_shape);
    let (oh, ow) = (window.conv_out(h), window.conv_out(w));
    let k = window.kernel;
    let cols = c * k * k;
    let xs: Vec<(usize, usize)> = (0..ow).map(|x| tap_range(x, w, window)).collect();
    for bi in 0..b {
        for y in 0..oh {
            let (ky_lo, ky_hi) = tap_range(y, h, window);
            let iy0 = (y * window.stride) as isize - window.padding as isize;
            for (x, &(kx_lo, kx_hi)) in xs.iter().enumerate() {
                if kx_lo == kx_hi {
                    continue;
                }
                let ix0 = (x * window.stride) as isize - window.padding as isize;
                let row = ((bi * oh + y) * ow + x) * cols;
                for ci in 0..c {
                    let plane = (bi * c + ci) * h;
                    for ky in ky_lo..ky_hi {
                        let iy = (iy0 + ky as isize) as usize;
                        let dst = row + (ci * k + ky) * k + kx_lo;
                        let src = (plane + iy) * w + (ix0 + kx_lo as isize) as usize;
                        visit(dst, src, kx_hi - kx_lo);
                    }
                }
            }
        }
    }
    (b * oh * ow, cols)
}

impl Var {
    /// Extracts sliding patches: `[B, C, H, W]` to `[B*OH*OW, C*k*k]`.
    pub fn im2col(&self, window: Window) -> Var {
        let image_shape = self.shape().to_vec();
        let (b, c, h, w) = dims4(&image_shape);
        let (oh, ow) = (window.conv_out(h), window.conv_out(w));
        let k = window.kernel;
        let mut out = vec![0.0; b * oh * ow * c * k * k];
        let src = self.value().as_standard_layout();
        let src = src.as_slice().unwrap();
        let (rows, cols) = for_each_run(&image_shape, window, |dst, at, len| {
            out[dst..dst + len].copy_from_slice(&src[at..at + len])
        });
        let value = ArrayD::from_shape_vec(IxDyn(&[rows, cols]), out).unwrap();
        Var::from_op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.col2im(&image_shape, window))]
        })
    }

    /// Scatter-adds patches back into an image of `image_shape`; adjoint of [`Var::im2col`].
    pub fn col2im(&self, image_shape: &[usize], window: Window) -> Var {
        let image_shape = image_shape.to_vec();
        let mut out = vec![0.0; image_shape.iter().product()];
        let src = self.value().as_standard_layout();
        let src = src.as_slice().unwrap();
        let (rows, cols) = for_each_run(&image_shape, window, |patch, at, len| {
            for (o, v) in out[at..at + len].iter_mut().zip(&src[patch..patch + len]) {
                *o += v;
            }
        });
        assert_eq!(self.shape(), &[rows, cols], "col2im: patch matrix has the wrong shape");
        let value = ArrayD::from_shape_vec(IxDyn(&image_shape), out).unwrap();
        Var::from_op(value, vec![self.clone()], move |g, _, _| vec![Some(g.im2col(window))])
    }
}

/// Cross-correlation with weight `[C_out, C_in, k, k]` and bias `[C_out]`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, window: Window) -> Var {
    let (b, _, h, w) = dims4(x.shape());
    let (c_out, c_in, k, _) = dims4(weight.shape());
    assert_eq!(k, window.kernel, "kernel size mismatch");
    assert_eq!(x.shape()[1], c_in, "conv2d: channel mismatch");
    let (oh, ow) = (window.conv_out(h), window.conv_out(w));
    let cols = x.im2col(window);
    let mut y = cols.matmul(&weight.reshape(&[c_out, c_in * k * k]).t());
    if let Some(bias) = bias {
        y = y.add(bias);
    }
    y.reshape(&[b, oh, ow, c_out]).permute(&[0, 3, 1, 2])
}

/// Transposed convolution (the adjoint of [`conv2d`]) with weight `[C_in, C_out, k, k]`.
pub fn conv_transpose2d(x: &Var, weight: &Var, bias: Option<&Var>, window: Window) -> Var {
    let (b, c_in, h, w) = dims4(x.shape());
    let (w_in, c_out, k, _) = dims4(weight.shape());
    assert_eq!(w_in, c_in, "conv_transpose2d: channel mismatch");
    assert_eq!(k, window.kernel, "kernel size mismatch");
    let (oh, ow) = (window.transpose_out(h), window.transpose_out(w));
    let rows = x.permute(&[0, 2, 3, 1]).reshape(&[b * h * w, c_in]);
    let patches = rows.matmul(&weight.reshape(&[c_in, c_out * k * k]));
    let y = patches.col2im(&[b, c_out, oh, ow], window);
    match bias {
        Some(bias) => y.add(&bias.reshape(&[1, c_out, 1, 1])),
        None => y,
    }
}

/// Affine map `x W^T + b` with weight `[out, in]`.
pub fn linear(x: &Var, weight: &Var, bias: Option<&Var>) -> Var {
    let y = x.matmul(&weight.t());
    match bias {
        Some(bias) => y.add(bias),
        None => y,
    }
}

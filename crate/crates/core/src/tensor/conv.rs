//! 2-D convolution over `[H, W, C]` inputs with `[k, k, C, M]` kernel banks.
//!
//! Zero padding. "Same" padding keeps the spatial extent at stride 1 and
//! splits the total pad with the smaller half in front; "valid" slides the
//! kernel only over fully covered windows.

use super::{Padding, Tensor, TensorError};

pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub m: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn conv_geometry(
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry, TensorError> {
    let err = |message: String| TensorError::ShapeMismatch {
        node: usize::MAX,
        message,
    };
    if input_shape.len() != 3 {
        return Err(err(format!("conv input must be [H,W,C], got {input_shape:?}")));
    }
    if kernel_shape.len() != 4 || kernel_shape[0] != kernel_shape[1] {
        return Err(err(format!(
            "conv kernels must be [k,k,C,M], got {kernel_shape:?}"
        )));
    }
    if stride == 0 {
        return Err(TensorError::InvalidOp("conv stride must be positive".into()));
    }
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let (k, m) = (kernel_shape[0], kernel_shape[3]);
    if kernel_shape[2] != c {
        return Err(err(format!(
            "kernel channels {} do not match input channels {c}",
            kernel_shape[2]
        )));
    }
    let (out_h, out_w, pad_top, pad_left) = match padding {
        Padding::Valid => {
            if k > h || k > w {
                return Err(err(format!("kernel {k} larger than unpadded input {h}x{w}")));
            }
            ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let total_h = ((out_h - 1) * stride + k).saturating_sub(h);
            let total_w = ((out_w - 1) * stride + k).saturating_sub(w);
            (out_h, out_w, total_h / 2, total_w / 2)
        }
    };
    Ok(ConvGeometry {
        h,
        w,
        c,
        k,
        m,
        out_h,
        out_w,
        pad_top,
        pad_left,
    })
}

/// Convolves `input` (`[H, W, C]`) with a kernel bank (`[k, k, C, M]`),
/// producing an `[out_h, out_w, M]` map. Each output pixel is the weighted
/// sum of the k×k×C window of the zero-padded input centered at it.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor, TensorError> {
    let g = conv_geometry(input.shape(), kernels.shape(), stride, padding)?;
    let x = input.values();
    let kv = kernels.values();
    let mut out = vec![0.0; g.out_h * g.out_w * g.m];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for om in 0..g.m {
                let mut acc = 0.0;
                for ky in 0..g.k {
                    let iy = (oy * stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let x_base = (iy as usize * g.w + ix as usize) * g.c;
                        let k_base = ((ky * g.k + kx) * g.c) * g.m + om;
                        for ci in 0..g.c {
                            acc += x[x_base + ci] * kv[k_base + ci * g.m];
                        }
                    }
                }
                out[(oy * g.out_w + ox) * g.m + om] = acc;
            }
        }
    }
    Tensor::new(vec![g.out_h, g.out_w, g.m], out)
}

/// Gradients of a scalar loss through [`conv2d`]: given the cotangent on the
/// output map, returns `(d_input, d_kernels)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    let g = conv_geometry(input.shape(), kernels.shape(), stride, padding)?;
    debug_assert_eq!(grad_out.shape(), &[g.out_h, g.out_w, g.m]);
    let x = input.values();
    let kv = kernels.values();
    let go = grad_out.values();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kv.len()];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for om in 0..g.m {
                let gout = go[(oy * g.out_w + ox) * g.m + om];
                if gout == 0.0 {
                    continue;
                }
                for ky in 0..g.k {
                    let iy = (oy * stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let x_base = (iy as usize * g.w + ix as usize) * g.c;
                        let k_base = ((ky * g.k + kx) * g.c) * g.m + om;
                        for ci in 0..g.c {
                            dx[x_base + ci] += kv[k_base + ci * g.m] * gout;
                            dk[k_base + ci * g.m] += x[x_base + ci] * gout;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernels.shape().to_vec(), dk)?,
    ))
}

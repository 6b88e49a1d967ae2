//! Forward kernels and the matching backward helpers used by the tape.
//!
//! Everything here works on plain row-major buffers. Convolutions are lowered
//! to a matrix product over an unrolled patch matrix (`im2col`).

use super::Tensor;
use crate::error::{Error, Result};

/// `c[m×n] = a[m×k] · b[k×n]` (+ `c` when `accumulate`), with optional
/// transposition of either operand expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n extents described
    // by the strides above (checked by the debug assertions).
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
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: (usize, usize)) -> Result<Self> {
        if stride < 1 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        let [c_in, h, w] = *input else {
            return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {input:?}")));
        };
        let [c_out, k_in, kh, kw] = *kernels else {
            return Err(Error::shape(
                "conv2d",
                format!("kernels must be [C_out,C_in,kh,kw], got {kernels:?}"),
            ));
        };
        if k_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernels expect {k_in} input channels, input has {c_in}"),
            ));
        }
        let (ph, pw) = pad;
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} exceeds padded input {}×{}", h + 2 * ph, w + 2 * pw),
            ));
        }
        Ok(Self {
            in_channels: c_in,
            height: h,
            width: w,
            out_channels: c_out,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad_h: ph,
            pad_w: pw,
            out_h: (h + 2 * ph - kh) / stride + 1,
            out_w: (w + 2 * pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unrolls input patches into a `[C_in·kh·kw, H'·W']` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let positions = g.positions();
    let mut cols = vec![0.0; g.patch_len() * positions];
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for m in 0..g.kernel_h {
            for n in 0..g.kernel_w {
                let row = (c * g.kernel_h + m) * g.kernel_w + n;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for i in 0..g.out_h {
                    let y = (i * g.stride + m) as isize - g.pad_h as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for j in 0..g.out_w {
                        let x = (j * g.stride + n) as isize - g.pad_w as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[i * g.out_w + j] = src_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto an input-shaped buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let positions = g.positions();
    let mut out = vec![0.0; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for m in 0..g.kernel_h {
            for n in 0..g.kernel_w {
                let row = (c * g.kernel_h + m) * g.kernel_w + n;
                let src = &cols[row * positions..(row + 1) * positions];
                for i in 0..g.out_h {
                    let y = (i * g.stride + m) as isize - g.pad_h as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    for j in 0..g.out_w {
                        let x = (j * g.stride + n) as isize - g.pad_w as isize;
                        if x >= 0 && x < g.width as isize {
                            plane[y as usize * g.width + x as usize] += src[i * g.out_w + j];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(input: &[f64], kernels: &[f64], bias: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let positions = g.positions();
    let mut out = Vec::with_capacity(g.out_channels * positions);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, positions));
    }
    gemm(
        g.out_channels,
        g.patch_len(),
        positions,
        kernels,
        false,
        &cols,
        false,
        &mut out,
        true,
    );
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    cols: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads {
    let positions = g.positions();
    let mut grad_kernels = vec![0.0; g.out_channels * g.patch_len()];
    gemm(
        g.out_channels,
        positions,
        g.patch_len(),
        grad_out,
        false,
        cols,
        true,
        &mut grad_kernels,
        false,
    );
    let grad_bias = grad_out.chunks_exact(positions).map(|row| row.iter().sum()).collect();
    let grad_input = need_input.then(|| {
        let mut grad_cols = vec![0.0; g.patch_len() * positions];
        gemm(
            g.patch_len(),
            g.out_channels,
            positions,
            kernels,
            true,
            grad_out,
            false,
            &mut grad_cols,
            false,
        );
        col2im(&grad_cols, g)
    });
    ConvGrads {
        input: grad_input,
        kernels: grad_kernels,
        bias: grad_bias,
    }
}

/// Valid-mode 2-D convolution (no padding), summed over input channels plus bias.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    conv2d_padded(input, kernels, bias, stride, (0, 0))
}

/// 2-D convolution with symmetric zero padding `(pad_h, pad_w)` on each side.
pub fn conv2d_padded(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: (usize, usize),
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, pad)?;
    if bias.len() != g.out_channels {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries for {} kernels", bias.len(), g.out_channels),
        ));
    }
    let (out, _) = conv2d_forward(input.data(), kernels.data(), bias.data(), &g);
    let out = Tensor::new(&[g.out_channels, g.out_h, g.out_w], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Shape bookkeeping for one max-pooling layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    /// With `zero_pad` the output is `ceil(H/stride) × ceil(W/stride)` and the
    /// missing rows/columns are split as evenly as possible, extra on the far side.
    pub fn new(input: &[usize], window: (usize, usize), stride: usize, zero_pad: bool) -> Result<Self> {
        let [c, h, w] = *input else {
            return Err(Error::shape(
                "maxpool2d",
                format!("input must be [C,H,W], got {input:?}"),
            ));
        };
        let (ph, pw) = window;
        if stride < 1 || ph < 1 || pw < 1 {
            return Err(Error::invalid("maxpool2d", "window and stride must be positive"));
        }
        let axis = |len: usize, win: usize| -> Result<(usize, usize)> {
            if zero_pad {
                let out = len.div_ceil(stride);
                let needed = (out - 1) * stride + win;
                let total = needed.saturating_sub(len);
                if win > len + total {
                    return Err(Error::shape("maxpool2d", "window larger than padded input"));
                }
                Ok((out, total / 2))
            } else {
                if win > len {
                    return Err(Error::shape(
                        "maxpool2d",
                        format!("window {win} larger than input extent {len}"),
                    ));
                }
                Ok(((len - win) / stride + 1, 0))
            }
        };
        let (out_h, pad_top) = axis(h, ph)?;
        let (out_w, pad_left) = axis(w, pw)?;
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            window_h: ph,
            window_w: pw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }
}

/// Marks an output whose maximum came from the zero padding.
pub(crate) const PADDING: usize = usize::MAX;

pub(crate) fn maxpool_forward(input: &[f64], g: &PoolGeometry) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.channels * g.out_h * g.out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for c in 0..g.channels {
        let base = c * g.height * g.width;
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = PADDING;
                for m in 0..g.window_h {
                    for n in 0..g.window_w {
                        let y = (i * g.stride + m) as isize - g.pad_top as isize;
                        let x = (j * g.stride + n) as isize - g.pad_left as isize;
                        let (value, idx) = if y >= 0 && y < g.height as isize && x >= 0 && x < g.width as isize {
                            let idx = base + y as usize * g.width + x as usize;
                            (input[idx], idx)
                        } else {
                            (0.0, PADDING)
                        };
                        if value > best {
                            best = value;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

/// Max pooling; padded cells hold 0.
pub fn maxpool2d(input: &Tensor, window: (usize, usize), stride: usize, zero_pad: bool) -> Result<Tensor> {
    let g = PoolGeometry::new(input.shape(), window, stride, zero_pad)?;
    let (out, _) = maxpool_forward(input.data(), &g);
    Tensor::new(&[g.channels, g.out_h, g.out_w], out)
}

pub(crate) fn affine_forward(input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = input.len();
    weights
        .chunks_exact(n)
        .zip(bias)
        .map(|(row, b)| dot(row, input) + b)
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the loop vectorizes.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `weights · input + bias` for `weights: [M,N]`, `input: [N]`.
pub fn affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_affine(input, weights, bias)?;
    let out = Tensor::new(
        &[weights.shape()[0]],
        affine_forward(input.data(), weights.data(), bias.data()),
    )?;
    out.ensure_finite("affine")?;
    Ok(out)
}

pub(crate) fn check_affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<()> {
    match weights.shape() {
        [m, n] if *n == input.len() && *m == bias.len() => Ok(()),
        other => Err(Error::shape(
            "affine",
            format!(
                "weights {other:?}, input of length {}, bias of length {}",
                input.len(),
                bias.len()
            ),
        )),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

/// `(outer, axis_len, inner)` view of a tensor around `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            "softmax_axis",
            format!("axis {axis} out of range for rank {}", shape.len()),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_forward(data: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (data[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.ensure_finite("softmax_axis")?;
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    Tensor::new(x.shape(), softmax_forward(x.data(), outer, len, inner))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_shapes_for_capsule_stem() {
        let k = Tensor::zeros(&[64, 1, 5, 5]);
        let b = Tensor::zeros(&[64]);
        let out = conv2d(&Tensor::zeros(&[1, 32, 32]), &k, &b, 2).unwrap();
        assert_eq!(out.shape(), &[64, 14, 14]);
        let out = conv2d(&Tensor::zeros(&[1, 64, 32]), &k, &b, 2).unwrap();
        assert_eq!(out.shape(), &[64, 30, 14]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = random(&[1, 5, 7], 1);
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = random(&[1, 6, 6], 2);
        let k = random(&[1, 1, 3, 3], 3);
        let b = Tensor::new(&[1], vec![0.25]).unwrap();
        let out = conv2d(&x, &k, &b, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.25;
                for m in 0..3 {
                    for n in 0..3 {
                        s += x.data()[(i * 2 + m) * 6 + j * 2 + n] * k.data()[m * 3 + n];
                    }
                }
                assert!((out.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_arguments() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), &b, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 3]), &b, 1).is_err());
        assert!(matches!(
            conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &b, 0),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn same_padding_keeps_size() {
        let x = random(&[3, 8, 8], 4);
        let out = conv2d_padded(&x, &random(&[5, 3, 3, 3], 5), &Tensor::zeros(&[5]), 1, (1, 1)).unwrap();
        assert_eq!(out.shape(), &[5, 8, 8]);
    }

    #[test]
    fn pool_examples() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x, (2, 2), 2, false).unwrap().data(), &[4.0]);

        let y = maxpool2d(&Tensor::zeros(&[128, 8, 4]), (4, 2), 2, true).unwrap();
        assert_eq!(y.shape(), &[128, 4, 2]);

        let c = maxpool2d(&Tensor::filled(&[2, 6, 6], 0.7), (2, 2), 2, true).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn pool_window_too_large() {
        assert!(maxpool2d(&Tensor::zeros(&[1, 2, 2]), (3, 3), 1, false).is_err());
    }

    #[test]
    fn affine_examples() {
        let x = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let w = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(affine(&x, &w, &Tensor::zeros(&[1])).unwrap().data(), &[5.0]);

        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(affine(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);

        let x = random(&[4], 6);
        let w = random(&[3, 4], 7);
        let b = random(&[3], 8);
        let out = affine(&x, &w, &b).unwrap();
        for m in 0..3 {
            let mut s = b.data()[m];
            for n in 0..4 {
                s += w.data()[m * 4 + n] * x.data()[n];
            }
            assert!((out.data()[m] - s).abs() < 1e-12);
        }
        assert!(affine(&x, &random(&[3, 5], 9), &b).is_err());
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::new(&[2], vec![-2.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data(), &[0.5]);
        for v in [-30.0, -2.5, -0.1, 0.7, 4.0, 25.0] {
            let s = sigmoid_scalar(v) + sigmoid_scalar(-v);
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_examples() {
        let c = softmax_axis(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(c.data(), &[0.5, 0.5]);
        let c = softmax_axis(&Tensor::new(&[2], vec![2f64.ln(), 0.0]).unwrap(), 0).unwrap();
        assert!((c.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let b = random(&[4, 3], 10);
        let shifted = Tensor::from_fn(&[4, 3], |i| b.data()[i] + 17.5);
        let c1 = softmax_axis(&b, 1).unwrap();
        let c2 = softmax_axis(&shifted, 1).unwrap();
        assert!(c1.max_abs_diff(&c2) < 1e-15);
        for row in c1.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let c0 = softmax_axis(&b, 0).unwrap();
        for j in 0..3 {
            let s: f64 = (0..4).map(|i| c0.data()[i * 3 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(softmax_axis(&b, 2).is_err());
    }
}

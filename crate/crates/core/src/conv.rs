//! 2D convolution (cross-correlation) with analytic backward pass.
//!
//! Forward and backward are lowered to a single GEMM over an im2col buffer
//! that folds the whole batch into the GEMM's n dimension.

use crate::error::{Error, Result};
use crate::init::InitScheme;
use crate::optim::SgdConfig;
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// Convolution layer without bias. `trainable = false` freezes the kernel:
/// its bytes never change after construction.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
    kernel: Vec<f32>,
    trainable: bool,
    momentum_buf: Vec<f32>,
}

impl ConvLayer {
    pub fn new(c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize, trainable: bool) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd, got {k}");
        assert!(stride >= 1, "stride must be positive");
        let n = c_out * c_in * k * k;
        ConvLayer {
            c_out,
            c_in,
            k,
            stride,
            padding,
            kernel: vec![0.0; n],
            trainable,
            momentum_buf: vec![0.0; n],
        }
    }

    /// Freshly initialized layer drawing from `rng` under `scheme`.
    pub fn init(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        trainable: bool,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut layer = ConvLayer::new(c_out, c_in, k, stride, padding, trainable);
        let kernel = crate::init::init_kernel(c_out, c_in, k, scheme, rng)?;
        layer.kernel = kernel;
        Ok(layer)
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn kernel(&self) -> &[f32] {
        &self.kernel
    }

    pub fn set_kernel(&mut self, kernel: Vec<f32>) -> Result<()> {
        if kernel.len() != self.kernel.len() {
            return Err(Error::ShapeMismatch {
                op: "ConvLayer::set_kernel",
                detail: format!("got {} weights, need {}", kernel.len(), self.kernel.len()),
            });
        }
        self.kernel = kernel;
        Ok(())
    }

    /// Bit-exact snapshot of the kernel, for frozen-layer assertions.
    pub fn kernel_bits(&self) -> Vec<u32> {
        self.kernel.iter().map(|v| v.to_bits()).collect()
    }

    /// MACs for one input sample of the given spatial size.
    pub fn flops(&self, h_in: usize, w_in: usize) -> f64 {
        let (oh, ow) = match self.out_spatial(h_in, w_in) {
            Ok(d) => d,
            Err(_) => return 0.0,
        };
        (self.k * self.k * self.c_in * self.c_out * oh * ow) as f64
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let num_h = h + 2 * self.padding;
        let num_w = w + 2 * self.padding;
        if num_h < self.k || num_w < self.k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "input {h}x{w} with padding {} smaller than kernel {}",
                    self.padding, self.k
                ),
            });
        }
        Ok((
            (num_h - self.k) / self.stride + 1,
            (num_w - self.k) / self.stride + 1,
        ))
    }

    /// SGD-with-momentum update; no-op for frozen layers. The gradient is
    /// accepted either way so callers need not special-case frozen kernels.
    pub fn apply_grad(&mut self, grad: &[f32], cfg: &SgdConfig) {
        if !self.trainable {
            return;
        }
        debug_assert_eq!(grad.len(), self.kernel.len());
        crate::optim::sgd_update(&mut self.kernel, &mut self.momentum_buf, grad, cfg, cfg.lr);
    }

    pub fn apply_grad_with_lr(&mut self, grad: &[f32], cfg: &SgdConfig, lr: f32) {
        if !self.trainable {
            return;
        }
        crate::optim::sgd_update(&mut self.kernel, &mut self.momentum_buf, grad, cfg, lr);
    }
}

fn check_input(input: &Tensor4, layer: &ConvLayer) -> Result<(usize, usize)> {
    if input.channels() != layer.c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "input has {} channels, kernel expects {} (input dims {:?}, kernel {}x{}x{}x{})",
                input.channels(),
                layer.c_in,
                input.dims(),
                layer.c_out,
                layer.c_in,
                layer.k,
                layer.k
            ),
        });
    }
    layer.out_spatial(input.height(), input.width())
}

/// Unfold `input` into a (c_in*k*k) x (b*oh*ow) matrix.
fn im2col(input: &Tensor4, layer: &ConvLayer, oh: usize, ow: usize, cols: &mut [f32]) {
    let (bsz, _, h, w) = input.dims();
    let k = layer.k;
    let s = layer.stride;
    let p = layer.padding as isize;
    let n = bsz * oh * ow;
    for ci in 0..layer.c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for b in 0..bsz {
                    let src = input.plane(b, ci);
                    for oy in 0..oh {
                        let iy = (oy * s + kh) as isize - p;
                        let dst = &mut dst_row[(b * oh + oy) * ow..(b * oh + oy) * ow + ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * w..iy as usize * w + w];
                        let ix0 = kw as isize - p;
                        if s == 1 {
                            // ix = ox + ix0; valid ox span is a contiguous run
                            let lo = (-ix0).max(0) as usize;
                            let hi = ((w as isize - ix0).max(0) as usize).min(ow);
                            dst[..lo.min(ow)].fill(0.0);
                            if lo < hi {
                                dst[lo..hi]
                                    .copy_from_slice(&src_row[(lo as isize + ix0) as usize..(hi as isize + ix0) as usize]);
                            }
                            dst[hi.max(lo).min(ow)..].fill(0.0);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + ix0;
                                *d = if ix >= 0 && ix < w as isize {
                                    src_row[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into input layout; inverse of [`im2col`].
fn col2im(cols: &[f32], layer: &ConvLayer, oh: usize, ow: usize, grad_input: &mut Tensor4) {
    let (bsz, _, h, w) = grad_input.dims();
    let k = layer.k;
    let s = layer.stride;
    let p = layer.padding as isize;
    let n = bsz * oh * ow;
    let cc = grad_input.channels();
    let data = grad_input.data_mut();
    for ci in 0..layer.c_in {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src_row = &cols[row * n..(row + 1) * n];
                for b in 0..bsz {
                    let plane = &mut data[(b * cc + ci) * h * w..(b * cc + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * s + kh) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &src_row[(b * oh + oy) * ow..(b * oh + oy) * ow + ow];
                        let dst_row = &mut plane[iy as usize * w..iy as usize * w + w];
                        let ix0 = kw as isize - p;
                        if s == 1 {
                            let lo = (-ix0).max(0) as usize;
                            let hi = ((w as isize - ix0).max(0) as usize).min(ow);
                            for ox in lo..hi {
                                dst_row[(ox as isize + ix0) as usize] += src[ox];
                            }
                        } else {
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = (ox * s) as isize + ix0;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    kk: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            kk,
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

/// Cross-correlation with zero padding. Deterministic and pure.
pub fn conv2d_forward(input: &Tensor4, layer: &ConvLayer) -> Result<Tensor4> {
    let (oh, ow) = check_input(input, layer)?;
    let bsz = input.batch();
    let n = bsz * oh * ow;
    let cikk = layer.c_in * layer.k * layer.k;

    let mut cols = vec![0.0f32; cikk * n];
    im2col(input, layer, oh, ow, &mut cols);

    // out_mat[c_out][b*oh*ow]
    let mut out_mat = vec![0.0f32; layer.c_out * n];
    sgemm(
        layer.c_out,
        cikk,
        n,
        &layer.kernel,
        cikk as isize,
        1,
        &cols,
        n as isize,
        1,
        0.0,
        &mut out_mat,
    );

    // Reorder [c_out][b][oh*ow] -> [b][c_out][oh*ow].
    let hw = oh * ow;
    let mut out = Tensor4::zeros(bsz, layer.c_out, oh, ow);
    let data = out.data_mut();
    for co in 0..layer.c_out {
        for b in 0..bsz {
            let src = &out_mat[(co * bsz + b) * hw..(co * bsz + b + 1) * hw];
            data[(b * layer.c_out + co) * hw..(b * layer.c_out + co + 1) * hw].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Analytic gradients of [`conv2d_forward`] with respect to input and kernel.
/// The kernel gradient is produced even for frozen layers; the optimizer
/// discards it there.
pub fn conv2d_backward(
    input: &Tensor4,
    layer: &ConvLayer,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f32>)> {
    let (oh, ow) = check_input(input, layer)?;
    let bsz = input.batch();
    if grad_out.dims() != (bsz, layer.c_out, oh, ow) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            detail: format!(
                "grad_out dims {:?} do not match forward output ({bsz}, {}, {oh}, {ow})",
                grad_out.dims(),
                layer.c_out
            ),
        });
    }
    let n = bsz * oh * ow;
    let cikk = layer.c_in * layer.k * layer.k;
    let hw = oh * ow;

    // grad_out_mat[c_out][b*oh*ow]
    let mut go_mat = vec![0.0f32; layer.c_out * n];
    for b in 0..bsz {
        for co in 0..layer.c_out {
            let src = grad_out.plane(b, co);
            go_mat[(co * bsz + b) * hw..(co * bsz + b + 1) * hw].copy_from_slice(src);
        }
    }

    let mut cols = vec![0.0f32; cikk * n];
    im2col(input, layer, oh, ow, &mut cols);

    // grad_kernel = grad_out_mat x cols^T  -> [c_out][cikk]
    let mut grad_kernel = vec![0.0f32; layer.c_out * cikk];
    unsafe {
        matrixmultiply::sgemm(
            layer.c_out,
            n,
            cikk,
            1.0,
            go_mat.as_ptr(),
            n as isize,
            1,
            cols.as_ptr(),
            1,
            n as isize,
            0.0,
            grad_kernel.as_mut_ptr(),
            cikk as isize,
            1,
        );
    }

    // grad_cols = kernel^T x grad_out_mat  -> [cikk][b*oh*ow]
    let mut grad_cols = vec![0.0f32; cikk * n];
    sgemm(
        cikk,
        layer.c_out,
        n,
        &layer.kernel,
        1,
        cikk as isize,
        &go_mat,
        n as isize,
        1,
        0.0,
        &mut grad_cols,
    );

    let mut grad_input = Tensor4::zeros(bsz, layer.c_in, input.height(), input.width());
    col2im(&grad_cols, layer, oh, ow, &mut grad_input);
    Ok((grad_input, grad_kernel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(b: usize, c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor4 {
        let data = (0..b * c * h * w).map(f).collect();
        Tensor4::from_vec(b, c, h, w, data).unwrap()
    }

    #[test]
    fn identity_1x1_kernel_preserves_input() {
        let input = filled(2, 3, 4, 4, |i| i as f32 * 0.25 - 3.0);
        let mut layer = ConvLayer::new(3, 3, 1, 1, 0, true);
        let mut kernel = vec![0.0; 9];
        for c in 0..3 {
            kernel[c * 3 + c] = 1.0; // channel identity
        }
        layer.set_kernel(kernel).unwrap();
        let out = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(out, input.clone());
    }

    #[test]
    fn ones_kernel_center_sums_window() {
        // constant-1 input (1,1,3,3), 3x3 all-ones kernel, padding 1:
        // center output = 9, corners = 4, edges = 6.
        let input = filled(1, 1, 3, 3, |_| 1.0);
        let mut layer = ConvLayer::new(1, 1, 3, 1, 1, true);
        layer.set_kernel(vec![1.0; 9]).unwrap();
        let out = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let input = filled(1, 2, 5, 5, |i| (i as f32).sin());
        let layer = ConvLayer::new(4, 2, 3, 1, 1, true);
        let out = conv2d_forward(&input, &layer).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_descriptive() {
        let input = filled(1, 2, 5, 5, |_| 0.0);
        let layer = ConvLayer::new(4, 3, 3, 1, 1, true);
        let err = conv2d_forward(&input, &layer).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 channels") && msg.contains("expects 3"), "{msg}");
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = filled(1, 2, 5, 5, |i| i as f32 * 0.01);
        let mut rng = Rng::new(3);
        let layer = ConvLayer::init(3, 2, 3, 1, 1, true, InitScheme::KaimingGaussian, &mut rng).unwrap();
        let go = Tensor4::zeros(1, 3, 5, 5);
        let (gi, gk) = conv2d_backward(&input, &layer, &go).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gk.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_grad_out() {
        let mut rng = Rng::new(9);
        let input = filled(1, 2, 5, 5, |_| rng.gaussian_f32());
        let layer = ConvLayer::init(3, 2, 3, 2, 1, true, InitScheme::KaimingGaussian, &mut rng).unwrap();
        let (oh, ow) = layer.out_spatial(5, 5).unwrap();
        let go = {
            let mut r2 = Rng::new(11);
            filled(1, 3, oh, ow, |_| r2.gaussian_f32())
        };
        let go2 = go.map(|v| 2.0 * v);
        let (gi1, gk1) = conv2d_backward(&input, &layer, &go).unwrap();
        let (gi2, gk2) = conv2d_backward(&input, &layer, &go2).unwrap();
        for (a, b) in gi1.data().iter().zip(gi2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        for (a, b) in gk1.iter().zip(&gk2) {
            assert!((2.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = Rng::new(21);
        let input = filled(2, 3, 8, 8, |_| rng.gaussian_f32());
        let layer = ConvLayer::init(5, 3, 3, 2, 1, true, InitScheme::XavierUniform, &mut rng).unwrap();
        let a = conv2d_forward(&input, &layer).unwrap();
        let b = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strided_conv_shrinks_output() {
        let input = filled(1, 1, 32, 32, |i| i as f32 * 1e-3);
        let layer = ConvLayer::new(1, 1, 3, 2, 1, true);
        let out = conv2d_forward(&input, &layer).unwrap();
        assert_eq!(out.dims(), (1, 1, 16, 16));
    }
}

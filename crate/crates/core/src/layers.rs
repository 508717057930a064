//! Pointwise and pooling layers plus the classification head used by the
//! benchmark trainer.

use crate::error::{Error, Result};
use crate::optim::SgdConfig;
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// max(x, 0). Subgradient at 0 is 0.
pub fn relu_forward(input: &Tensor4) -> Tensor4 {
    input.map(|v| v.max(0.0))
}

/// Gradient of ReLU: passes grad where the forward input was > 0.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    debug_assert!(input.same_dims(grad_out));
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// 3x3 average pooling, stride 1, padding 1; the divisor is always 9
/// (zero-padded positions count).
pub fn avgpool3x3_forward(input: &Tensor4) -> Tensor4 {
    let (bsz, c, h, w) = input.dims();
    let mut out = Tensor4::zeros(bsz, c, h, w);
    for b in 0..bsz {
        for ch in 0..c {
            let src = input.plane(b, ch);
            for i in 0..h {
                for j in 0..w {
                    let mut sum = 0.0f32;
                    for di in -1i32..=1 {
                        let y = i as i32 + di;
                        if y < 0 || y >= h as i32 {
                            continue;
                        }
                        for dj in -1i32..=1 {
                            let x = j as i32 + dj;
                            if x >= 0 && x < w as i32 {
                                sum += src[y as usize * w + x as usize];
                            }
                        }
                    }
                    *out.at_mut(b, ch, i, j) = sum / 9.0;
                }
            }
        }
    }
    out
}

pub fn avgpool3x3_backward(grad_out: &Tensor4) -> Tensor4 {
    let (bsz, c, h, w) = grad_out.dims();
    let mut grad_in = Tensor4::zeros(bsz, c, h, w);
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let g = grad_out.at(b, ch, i, j) / 9.0;
                    for di in -1i32..=1 {
                        let y = i as i32 + di;
                        if y < 0 || y >= h as i32 {
                            continue;
                        }
                        for dj in -1i32..=1 {
                            let x = j as i32 + dj;
                            if x >= 0 && x < w as i32 {
                                *grad_in.at_mut(b, ch, y as usize, x as usize) += g;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Global average pool to (b, c) row-major.
pub fn global_avg_pool(input: &Tensor4) -> Vec<f32> {
    let (bsz, c, h, w) = input.dims();
    let inv = 1.0 / (h * w) as f32;
    let mut out = vec![0.0f32; bsz * c];
    for b in 0..bsz {
        for ch in 0..c {
            out[b * c + ch] = input.plane(b, ch).iter().sum::<f32>() * inv;
        }
    }
    out
}

/// Scatter (b, c) gradients back over the pooled spatial positions.
pub fn global_avg_pool_backward(grad_pooled: &[f32], dims: (usize, usize, usize, usize)) -> Tensor4 {
    let (bsz, c, h, w) = dims;
    debug_assert_eq!(grad_pooled.len(), bsz * c);
    let inv = 1.0 / (h * w) as f32;
    let mut grad = Tensor4::zeros(bsz, c, h, w);
    let data = grad.data_mut();
    for b in 0..bsz {
        for ch in 0..c {
            let g = grad_pooled[b * c + ch] * inv;
            data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].fill(g);
        }
    }
    grad
}

/// Fully connected classification head with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    in_features: usize,
    out_features: usize,
    weight: Vec<f32>, // [out][in]
    bias: Vec<f32>,
    w_momentum: Vec<f32>,
    b_momentum: Vec<f32>,
}

impl Linear {
    pub fn init(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / in_features as f64).sqrt() as f32;
        Linear {
            in_features,
            out_features,
            weight: (0..in_features * out_features)
                .map(|_| rng.uniform(-bound, bound))
                .collect(),
            bias: vec![0.0; out_features],
            w_momentum: vec![0.0; in_features * out_features],
            b_momentum: vec![0.0; out_features],
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn set_params(&mut self, weight: Vec<f32>, bias: Vec<f32>) -> Result<()> {
        if weight.len() != self.weight.len() || bias.len() != self.bias.len() {
            return Err(Error::ShapeMismatch {
                op: "Linear::set_params",
                detail: format!(
                    "weight {} (need {}), bias {} (need {})",
                    weight.len(),
                    self.weight.len(),
                    bias.len(),
                    self.bias.len()
                ),
            });
        }
        self.weight = weight;
        self.bias = bias;
        Ok(())
    }

    /// logits[b][out] = W x[b] + bias
    pub fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), batch * self.in_features);
        let mut out = vec![0.0f32; batch * self.out_features];
        for b in 0..batch {
            let xb = &x[b * self.in_features..(b + 1) * self.in_features];
            let ob = &mut out[b * self.out_features..(b + 1) * self.out_features];
            for (o, dst) in ob.iter_mut().enumerate() {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let mut acc = self.bias[o];
                for (wv, xv) in row.iter().zip(xb) {
                    acc += wv * xv;
                }
                *dst = acc;
            }
        }
        out
    }

    /// Returns (grad_x, grad_weight, grad_bias).
    pub fn backward(&self, x: &[f32], batch: usize, grad_out: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut gx = vec![0.0f32; batch * self.in_features];
        let mut gw = vec![0.0f32; self.weight.len()];
        let mut gb = vec![0.0f32; self.bias.len()];
        for b in 0..batch {
            let xb = &x[b * self.in_features..(b + 1) * self.in_features];
            let gob = &grad_out[b * self.out_features..(b + 1) * self.out_features];
            let gxb = &mut gx[b * self.in_features..(b + 1) * self.in_features];
            for (o, &g) in gob.iter().enumerate() {
                gb[o] += g;
                let wrow = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let gwrow = &mut gw[o * self.in_features..(o + 1) * self.in_features];
                for i in 0..self.in_features {
                    gxb[i] += g * wrow[i];
                    gwrow[i] += g * xb[i];
                }
            }
        }
        (gx, gw, gb)
    }

    pub fn apply_grads(&mut self, gw: &[f32], gb: &[f32], cfg: &SgdConfig, lr: f32) {
        crate::optim::sgd_update(&mut self.weight, &mut self.w_momentum, gw, cfg, lr);
        crate::optim::sgd_update(&mut self.bias, &mut self.b_momentum, gb, cfg, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_passes_nonnegative_input() {
        let t = Tensor4::from_vec(1, 1, 1, 4, vec![0.0, 1.0, 2.5, 0.1]).unwrap();
        assert_eq!(relu_forward(&t), t);
    }

    #[test]
    fn relu_kills_negative() {
        let t = Tensor4::from_vec(1, 1, 1, 1, vec![-1.0]).unwrap();
        let out = relu_forward(&t);
        assert_eq!(out.data(), &[0.0]);
        let g = relu_backward(&t, &Tensor4::from_vec(1, 1, 1, 1, vec![1.0]).unwrap());
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn avgpool_constant_interior() {
        let t = Tensor4::from_vec(1, 1, 4, 4, vec![1.0; 16]).unwrap();
        let out = avgpool3x3_forward(&t);
        // interior cell sees all 9 neighbors; corner sees 4 of 9.
        assert!((out.at(0, 0, 1, 1) - 1.0).abs() < 1e-6);
        assert!((out.at(0, 0, 0, 0) - 4.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn gap_means_each_plane() {
        let t = Tensor4::from_vec(1, 2, 1, 2, vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        assert_eq!(global_avg_pool(&t), vec![2.0, 15.0]);
    }

    #[test]
    fn linear_forward_matches_hand_computation() {
        let mut l = Linear::init(2, 2, &mut Rng::new(1));
        l.set_params(vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5]).unwrap();
        let out = l.forward(&[1.0, 1.0], 1);
        assert_eq!(out, vec![3.5, 6.5]);
    }
}

//! Convolution via im2col + sgemm, with the matching backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Row-major `out_channels x (in_channels * kernel * kernel)`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| *v == 0.0)
    }
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self::with_std(rng, in_channels, out_channels, kernel, stride, padding, (2.0 / fan_in as f64).sqrt())
    }

    pub fn with_std<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = (0..out_channels * fan_in)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Unfolds a `C x H x W` input into `(C*k*k) x (Ho*Wo)` columns.
    pub fn im2col(&self, input: &[f32], h: usize, w: usize, cols: &mut Vec<f32>) {
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let n = ho * wo;
        cols.clear();
        cols.resize(self.patch_len() * n, 0.0);
        for c in 0..self.in_channels {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates column gradients back onto a `C x H x W` input gradient.
    pub fn col2im(&self, dcols: &[f32], h: usize, w: usize, grad_in: &mut [f32]) {
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let n = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut grad_in[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &dcols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out = W * cols + b`, `out` is `out_channels x n`.
    pub fn forward_cols(&self, cols: &[f32], n: usize, out: &mut Vec<f32>) {
        let m = self.out_channels;
        let k = self.patch_len();
        out.clear();
        out.resize(m * n, 0.0);
        for (row, b) in out.chunks_exact_mut(n).zip(&self.bias) {
            row.fill(*b);
        }
        // SAFETY: slices are sized m*k, k*n and m*n with row-major strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                self.weight.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// Accumulates parameter gradients from `grad_out` (`out_channels x n`).
    pub fn backward_params(&self, cols: &[f32], grad_out: &[f32], n: usize, grad: &mut ConvGrad) {
        let m = self.out_channels;
        let k = self.patch_len();
        // SAFETY: grad_out is m*n, cols is k*n (read transposed), weight grad m*k.
        unsafe {
            matrixmultiply::sgemm(
                m,
                n,
                k,
                1.0,
                grad_out.as_ptr(),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                1.0,
                grad.weight.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        for (gb, row) in grad.bias.iter_mut().zip(grad_out.chunks_exact(n)) {
            *gb += row.iter().sum::<f32>();
        }
    }

    /// `dcols += W^T * grad_out`.
    pub fn backward_cols(&self, grad_out: &[f32], n: usize, dcols: &mut [f32]) {
        let m = self.out_channels;
        let k = self.patch_len();
        // SAFETY: weight is m*k (read transposed), grad_out m*n, dcols k*n.
        unsafe {
            matrixmultiply::sgemm(
                k,
                m,
                n,
                1.0,
                self.weight.as_ptr(),
                1,
                k as isize,
                grad_out.as_ptr(),
                n as isize,
                1,
                1.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

pub fn relu_in_place(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose activation was clipped by ReLU.
pub fn relu_backward(activation: &[f32], grad: &mut [f32]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

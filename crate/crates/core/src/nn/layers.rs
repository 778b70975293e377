use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Mat};
use super::params::{Init, ParamBuilder, Slot};

/// `y = x W + b`, `W` stored `input x output`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, input: usize, output: usize, init: Init) -> Self {
        let w = pb.alloc(input * output, init, true);
        let b = pb.alloc(output, Init::Zeros, false);
        Self { w, b, input, output }
    }

    pub fn forward(&self, p: &[f32], x: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.input);
        let b = self.b.of(p);
        let mut y = Vec::with_capacity(rows * self.output);
        for _ in 0..rows {
            y.extend_from_slice(b);
        }
        gemm(
            1.0,
            Mat::new(x, rows, self.input),
            Mat::new(self.w.of(p), self.input, self.output),
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients into `g`; returns `dx` when asked.
    pub fn backward(&self, p: &[f32], x: &[f32], dy: &[f32], rows: usize, g: &mut [f32], need_dx: bool) -> Option<Vec<f32>> {
        gemm(
            1.0,
            Mat::new(x, rows, self.input).t(),
            Mat::new(dy, rows, self.output),
            1.0,
            self.w.of_mut(g),
        );
        let gb = self.b.of_mut(g);
        for row in dy.chunks_exact(self.output) {
            for (a, d) in gb.iter_mut().zip(row) {
                *a += d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; rows * self.input];
            gemm(
                1.0,
                Mat::new(dy, rows, self.output),
                Mat::new(self.w.of(p), self.input, self.output).t(),
                0.0,
                &mut dx,
            );
            dx
        })
    }
}

pub fn relu(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` where the post-activation output was not positive.
pub fn relu_backward(out: &[f32], dy: &mut [f32]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward(x: &[f32], dy: &mut [f32]) {
    for (d, &v) in dy.iter_mut().zip(x) {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Slot,
    pub beta: Slot,
    pub dim: usize,
}

pub struct LayerNormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

const LN_EPS: f32 = 1e-5;

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        Self {
            gamma: pb.alloc(dim, Init::Ones, false),
            beta: pb.alloc(dim, Init::Zeros, false),
            dim,
        }
    }

    pub fn forward(&self, p: &[f32], x: &[f32]) -> (Vec<f32>, LayerNormCache) {
        let (g, b) = (self.gamma.of(p), self.beta.of(p));
        let rows = x.len() / self.dim;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for ((xr, yr), hr) in x
            .chunks_exact(self.dim)
            .zip(y.chunks_exact_mut(self.dim))
            .zip(xhat.chunks_exact_mut(self.dim))
        {
            let mean = xr.iter().sum::<f32>() / self.dim as f32;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / self.dim as f32;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for i in 0..self.dim {
                hr[i] = (xr[i] - mean) * is;
                yr[i] = hr[i] * g[i] + b[i];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f32], cache: &LayerNormCache, dy: &[f32], g: &mut [f32]) -> Vec<f32> {
        let gamma = self.gamma.of(p);
        let n = self.dim as f32;
        let mut dx = vec![0.0; dy.len()];
        for (r, ((dyr, hr), dxr)) in dy
            .chunks_exact(self.dim)
            .zip(cache.xhat.chunks_exact(self.dim))
            .zip(dx.chunks_exact_mut(self.dim))
            .enumerate()
        {
            let gg = self.gamma.of_mut(g);
            for i in 0..self.dim {
                gg[i] += dyr[i] * hr[i];
            }
            let gb = self.beta.of_mut(g);
            for i in 0..self.dim {
                gb[i] += dyr[i];
            }
            let mut sum_d = 0.0;
            let mut sum_dh = 0.0;
            for i in 0..self.dim {
                let d = dyr[i] * gamma[i];
                sum_d += d;
                sum_dh += d * hr[i];
            }
            let is = cache.inv_std[r];
            for i in 0..self.dim {
                let d = dyr[i] * gamma[i];
                dxr[i] = is * (d - sum_d / n - hr[i] * sum_dh / n);
            }
        }
        dx
    }
}

/// 3x3 (or `k x k`) same-padding, stride-1 convolution on channels-last images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: Slot,
    pub b: Slot,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            w: pb.alloc(fan_in * out_ch, Init::He(fan_in), true),
            b: pb.alloc(out_ch, Init::Zeros, false),
            in_ch,
            out_ch,
            kernel,
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    /// `x`: `n` images of `h x w x in_ch`. Returns `(y, col)`.
    pub fn forward(&self, p: &[f32], x: &[f32], n: usize, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
        let col = self.im2col(x, n, h, w);
        let rows = n * h * w;
        let b = self.b.of(p);
        let mut y = Vec::with_capacity(rows * self.out_ch);
        for _ in 0..rows {
            y.extend_from_slice(b);
        }
        gemm(
            1.0,
            Mat::new(&col, rows, self.patch_len()),
            Mat::new(self.w.of(p), self.patch_len(), self.out_ch),
            1.0,
            &mut y,
        );
        (y, col)
    }

    pub fn backward(&self, p: &[f32], col: &[f32], dy: &[f32], n: usize, h: usize, w: usize, g: &mut [f32], need_dx: bool) -> Option<Vec<f32>> {
        let rows = n * h * w;
        gemm(
            1.0,
            Mat::new(col, rows, self.patch_len()).t(),
            Mat::new(dy, rows, self.out_ch),
            1.0,
            self.w.of_mut(g),
        );
        let gb = self.b.of_mut(g);
        for row in dy.chunks_exact(self.out_ch) {
            for (a, d) in gb.iter_mut().zip(row) {
                *a += d;
            }
        }
        need_dx.then(|| {
            let mut dcol = vec![0.0; rows * self.patch_len()];
            gemm(
                1.0,
                Mat::new(dy, rows, self.out_ch),
                Mat::new(self.w.of(p), self.patch_len(), self.out_ch).t(),
                0.0,
                &mut dcol,
            );
            self.col2im(&dcol, n, h, w)
        })
    }

    fn im2col(&self, x: &[f32], n: usize, h: usize, w: usize) -> Vec<f32> {
        let (k, c) = (self.kernel, self.in_ch);
        let pad = (k / 2) as isize;
        let pl = self.patch_len();
        let mut col = vec![0.0; n * h * w * pl];
        for img in 0..n {
            let xi = &x[img * h * w * c..(img + 1) * h * w * c];
            for oy in 0..h {
                for ox in 0..w {
                    let row = &mut col[((img * h + oy) * w + ox) * pl..][..pl];
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((iy as usize) * w + ix as usize) * c;
                            row[(ky * k + kx) * c..][..c].copy_from_slice(&xi[src..src + c]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[f32], n: usize, h: usize, w: usize) -> Vec<f32> {
        let (k, c) = (self.kernel, self.in_ch);
        let pad = (k / 2) as isize;
        let pl = self.patch_len();
        let mut dx = vec![0.0; n * h * w * c];
        for img in 0..n {
            let di = &mut dx[img * h * w * c..(img + 1) * h * w * c];
            for oy in 0..h {
                for ox in 0..w {
                    let row = &dcol[((img * h + oy) * w + ox) * pl..][..pl];
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((iy as usize) * w + ix as usize) * c;
                            for (a, b) in di[dst..dst + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2x2 stride-2 max pooling on channels-last images. Returns the output and
/// the flat input index of each selected maximum.
pub fn maxpool2(x: &[f32], n: usize, h: usize, w: usize, c: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; n * oh * ow * c];
    let mut idx = vec![0u32; y.len()];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ((img * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                bi = i;
                            }
                        }
                    }
                    let o = ((img * oh + oy) * ow + ox) * c + ch;
                    y[o] = best;
                    idx[o] = bi as u32;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(dy: &[f32], idx: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0; input_len];
    for (d, &i) in dy.iter().zip(idx) {
        dx[i as usize] += d;
    }
    dx
}

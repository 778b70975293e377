use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::params::{Init, ParamBuilder};

/// Multi-head self-attention over independent groups of `t` tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub dim: usize,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Vec<f32>,
    qkv: Vec<f32>,
    probs: Vec<f32>,
    ctx: Vec<f32>,
}

impl SelfAttention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide into heads");
        Self {
            qkv: Linear::new(pb, dim, 3 * dim, Init::Xavier(dim, dim)),
            proj: Linear::new(pb, dim, dim, Init::Xavier(dim, dim)),
            dim,
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, p: &[f32], x: &[f32], n: usize, t: usize) -> (Vec<f32>, AttentionCache) {
        let d = self.dim;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = self.qkv.forward(p, x, n * t);
        let mut probs = vec![0.0f32; n * self.heads * t * t];
        let mut ctx = vec![0.0f32; n * t * d];
        let mut row = vec![0.0f32; t];
        for b in 0..n {
            for h in 0..self.heads {
                let pr = &mut probs[(b * self.heads + h) * t * t..][..t * t];
                for i in 0..t {
                    let q = &qkv[(b * t + i) * 3 * d + h * dh..][..dh];
                    let mut max = f32::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let k = &qkv[(b * t + j) * 3 * d + d + h * dh..][..dh];
                        *r = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                        max = max.max(*r);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    let out = &mut ctx[(b * t + i) * d + h * dh..][..dh];
                    for (j, r) in row.iter().enumerate() {
                        let a = r / sum;
                        pr[i * t + j] = a;
                        let v = &qkv[(b * t + j) * 3 * d + 2 * d + h * dh..][..dh];
                        for (o, vv) in out.iter_mut().zip(v) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }
        let y = self.proj.forward(p, &ctx, n * t);
        (
            y,
            AttentionCache {
                x: x.to_vec(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(&self, p: &[f32], c: &AttentionCache, dy: &[f32], n: usize, t: usize, g: &mut [f32]) -> Vec<f32> {
        let d = self.dim;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let dctx = self
            .proj
            .backward(p, &c.ctx, dy, n * t, g, true)
            .expect("dx requested");
        let mut dqkv = vec![0.0f32; n * t * 3 * d];
        let mut da = vec![0.0f32; t];
        for b in 0..n {
            for h in 0..self.heads {
                let pr = &c.probs[(b * self.heads + h) * t * t..][..t * t];
                for i in 0..t {
                    let dout = &dctx[(b * t + i) * d + h * dh..][..dh];
                    // dA_ij = dout_i . v_j ; dV_j += A_ij dout_i
                    for j in 0..t {
                        let v = &c.qkv[(b * t + j) * 3 * d + 2 * d + h * dh..][..dh];
                        da[j] = dout.iter().zip(v).map(|(a, b)| a * b).sum();
                        let a = pr[i * t + j];
                        let dv = &mut dqkv[(b * t + j) * 3 * d + 2 * d + h * dh..][..dh];
                        for (x, o) in dv.iter_mut().zip(dout) {
                            *x += a * o;
                        }
                    }
                    let dot: f32 = (0..t).map(|j| da[j] * pr[i * t + j]).sum();
                    for j in 0..t {
                        let ds = pr[i * t + j] * (da[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        // dQ_i += ds K_j ; dK_j += ds Q_i
                        for e in 0..dh {
                            let kj = c.qkv[(b * t + j) * 3 * d + d + h * dh + e];
                            let qi = c.qkv[(b * t + i) * 3 * d + h * dh + e];
                            dqkv[(b * t + i) * 3 * d + h * dh + e] += ds * kj;
                            dqkv[(b * t + j) * 3 * d + d + h * dh + e] += ds * qi;
                        }
                    }
                }
            }
        }
        self.qkv
            .backward(p, &c.x, &dqkv, n * t, g, true)
            .expect("dx requested")
    }
}

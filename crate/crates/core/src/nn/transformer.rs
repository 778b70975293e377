use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, SelfAttention};
use super::layers::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear};
use super::params::{Init, ParamBuilder};

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Vec<f32>,
    pre_gelu: Vec<f32>,
    act: Vec<f32>,
}

impl Block {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, mlp_hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(pb, dim),
            attn: SelfAttention::new(pb, dim, heads),
            ln2: LayerNorm::new(pb, dim),
            fc1: Linear::new(pb, dim, mlp_hidden, Init::Xavier(dim, mlp_hidden)),
            fc2: Linear::new(pb, mlp_hidden, dim, Init::Xavier(mlp_hidden, dim)),
        }
    }

    pub fn forward(&self, p: &[f32], x: &[f32], n: usize, t: usize) -> (Vec<f32>, BlockCache) {
        let rows = n * t;
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = self.attn.forward(p, &h1, n, t);
        let x2: Vec<f32> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let (h2, ln2) = self.ln2.forward(p, &x2);
        let pre_gelu = self.fc1.forward(p, &h2, rows);
        let act = gelu(&pre_gelu);
        let m = self.fc2.forward(p, &act, rows);
        let y = x2.iter().zip(&m).map(|(u, v)| u + v).collect();
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                pre_gelu,
                act,
            },
        )
    }

    pub fn backward(&self, p: &[f32], c: &BlockCache, dy: &[f32], n: usize, t: usize, g: &mut [f32]) -> Vec<f32> {
        let rows = n * t;
        let mut dact = self.fc2.backward(p, &c.act, dy, rows, g, true).expect("dx");
        gelu_backward(&c.pre_gelu, &mut dact);
        let dh2 = self.fc1.backward(p, &c.h2, &dact, rows, g, true).expect("dx");
        let dx2_mlp = self.ln2.backward(p, &c.ln2, &dh2, g);
        let dx2: Vec<f32> = dy.iter().zip(&dx2_mlp).map(|(a, b)| a + b).collect();
        let dh1 = self.attn.backward(p, &c.attn, &dx2, n, t, g);
        let dx_attn = self.ln1.backward(p, &c.ln1, &dh1, g);
        dx2.iter().zip(&dx_attn).map(|(a, b)| a + b).collect()
    }
}

/// Fixed 2D sine-cosine position embeddings for a `grid x grid` patch layout.
pub fn sincos_2d(dim: usize, grid_h: usize, grid_w: usize) -> Vec<f32> {
    assert_eq!(dim % 4, 0, "embedding dim must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f32> = (0..quarter)
        .map(|i| 1.0 / 10000f32.powf(i as f32 / quarter as f32))
        .collect();
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for y in 0..grid_h {
        for x in 0..grid_w {
            for pos in [x as f32, y as f32] {
                out.extend(omega.iter().map(|o| (pos * o).sin()));
                out.extend(omega.iter().map(|o| (pos * o).cos()));
            }
        }
    }
    out
}

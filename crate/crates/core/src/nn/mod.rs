//! A small CPU neural-network toolkit: flat parameter vectors, hand-written
//! forward/backward passes, and optimizers.
//!
//! Activations are row-major matrices (`rows x features`). Image activations
//! use channels-last layout (`pixel x channel`) so convolutions reduce to a
//! single matrix product after im2col.

pub mod attention;
pub mod gemm;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod transformer;

pub use params::{Init, ParamBuilder, Slot};

#[cfg(test)]
mod gradcheck {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::attention::SelfAttention;
    use super::layers::{Conv2d, LayerNorm, Linear};
    use super::transformer::Block;
    use super::{Init, ParamBuilder};

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    /// Compares analytic gradients of `loss = <f(p, x), r>` with central
    /// differences on a sample of coordinates of both `p` and `x`.
    fn check<F, B>(p: &[f32], x: &[f32], out_len: usize, f: F, b: B)
    where
        F: Fn(&[f32], &[f32]) -> Vec<f32>,
        B: Fn(&[f32], &[f32], &[f32], &mut [f32]) -> Vec<f32>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = randv(&mut rng, out_len);
        let mut g = vec![0.0; p.len()];
        let dx = b(p, x, &r, &mut g);
        let eps = 1e-2f32;
        let close = |a: f64, n: f64, what: &str, i: usize| {
            assert!((a - n).abs() <= 2e-2 * a.abs().max(n.abs()) + 2e-3, "{what}[{i}]: analytic {a} numeric {n}");
        };
        for _ in 0..40 {
            let i = rng.gen_range(0..p.len());
            let (mut hi, mut lo) = (p.to_vec(), p.to_vec());
            hi[i] += eps;
            lo[i] -= eps;
            let num = (dot(&f(&hi, x), &r) - dot(&f(&lo, x), &r)) / (2.0 * eps as f64);
            close(g[i] as f64, num, "param", i);
            let j = rng.gen_range(0..x.len());
            let (mut hi, mut lo) = (x.to_vec(), x.to_vec());
            hi[j] += eps;
            lo[j] -= eps;
            let num = (dot(&f(p, &hi), &r) - dot(&f(p, &lo), &r)) / (2.0 * eps as f64);
            close(dx[j] as f64, num, "input", j);
        }
    }

    #[test]
    fn linear() {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(1));
        let l = Linear::new(&mut pb, 5, 3, Init::Normal(0.5));
        let p = pb.finish();
        let x = randv(&mut ChaCha8Rng::seed_from_u64(2), 4 * 5);
        check(&p, &x, 12, |p, x| l.forward(p, x, 4), |p, x, dy, g| l.backward(p, x, dy, 4, g, true).unwrap());
    }

    #[test]
    fn layer_norm() {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(1));
        let ln = LayerNorm::new(&mut pb, 8);
        let mut p = pb.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let x = randv(&mut rng, 3 * 8);
        check(&p, &x, 24, |p, x| ln.forward(p, x).0, |p, x, dy, g| {
            let (_, c) = ln.forward(p, x);
            ln.backward(p, &c, dy, g)
        });
    }

    #[test]
    fn conv() {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(1));
        let c = Conv2d::new(&mut pb, 2, 3, 3);
        let p = pb.finish();
        let (n, h, w) = (2, 4, 5);
        let x = randv(&mut ChaCha8Rng::seed_from_u64(4), n * h * w * 2);
        check(&p, &x, n * h * w * 3, |p, x| c.forward(p, x, n, h, w).0, |p, x, dy, g| {
            let (_, col) = c.forward(p, x, n, h, w);
            c.backward(p, &col, dy, n, h, w, g, true).unwrap()
        });
    }

    #[test]
    fn attention() {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(1));
        let a = SelfAttention::new(&mut pb, 8, 2);
        let p = pb.finish();
        let (n, t) = (2, 3);
        let x = randv(&mut ChaCha8Rng::seed_from_u64(5), n * t * 8);
        check(&p, &x, n * t * 8, |p, x| a.forward(p, x, n, t).0, |p, x, dy, g| {
            let (_, c) = a.forward(p, x, n, t);
            a.backward(p, &c, dy, n, t, g)
        });
    }

    #[test]
    fn block() {
        let mut pb = ParamBuilder::new(ChaCha8Rng::seed_from_u64(1));
        let b = Block::new(&mut pb, 8, 2, 16);
        let p = pb.finish();
        let (n, t) = (2, 3);
        let x = randv(&mut ChaCha8Rng::seed_from_u64(6), n * t * 8);
        check(&p, &x, n * t * 8, |p, x| b.forward(p, x, n, t).0, |p, x, dy, g| {
            let (_, c) = b.forward(p, x, n, t);
            b.backward(p, &c, dy, n, t, g)
        });
    }
}

//! Loss functions and their gradients. Generic over the float type so the
//! same code runs in f32 training and in f64 finite-difference checks.
//!
//! Every loss takes `denom`, the number of rows in the full minibatch, and
//! returns `sum over rows / denom`; chunked gradient computation therefore
//! sums chunk results without rescaling.

use num_traits::Float;

pub fn softmax<F: Float>(z: &[F]) -> Vec<F> {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = z.iter().map(|v| (*v - max).exp()).collect();
    let s = e.iter().copied().fold(F::zero(), |a, b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("representable")
}

/// Row-wise softmax backward: `dz = p * (dp - <p, dp>)`.
pub fn softmax_backward<F: Float>(p: &[F], dp: &[F]) -> Vec<F> {
    let dot = p.iter().zip(dp).fold(F::zero(), |a, (x, y)| a + *x * *y);
    p.iter().zip(dp).map(|(x, y)| *x * (*y - dot)).collect()
}

/// Squared error summed over pixels, divided by the pixel count of one
/// sample and by `denom`. `mask` selects the pixels that contribute.
pub fn masked_mse<F: Float>(target: &[F], pred: &[F], mask: &[bool], pixels_per_sample: usize, denom: F) -> (F, Vec<F>) {
    let norm = cast::<F>(pixels_per_sample as f64) * denom;
    let two = cast::<F>(2.0);
    let mut loss = F::zero();
    let grad = target
        .iter()
        .zip(pred)
        .zip(mask)
        .map(|((t, p), m)| {
            if *m {
                let d = *p - *t;
                loss = loss + d * d;
                two * d / norm
            } else {
                F::zero()
            }
        })
        .collect();
    (loss / norm, grad)
}

/// Mean over classes of `(softmax(z) - target)^2`, summed over rows / `denom`;
/// gradient with respect to the logits `z`.
pub fn soft_target_mse<F: Float>(targets: &[F], logits: &[F], classes: usize, denom: F) -> (F, Vec<F>) {
    let c = cast::<F>(classes as f64);
    let two = cast::<F>(2.0);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (t, z) in targets.chunks_exact(classes).zip(logits.chunks_exact(classes)) {
        let p = softmax(z);
        let dp: Vec<F> = p
            .iter()
            .zip(t)
            .map(|(a, b)| {
                loss = loss + (*a - *b) * (*a - *b);
                two * (*a - *b) / (c * denom)
            })
            .collect();
        grad.extend(softmax_backward(&p, &dp));
    }
    (loss / (c * denom), grad)
}

pub fn cross_entropy<F: Float>(labels: &[usize], logits: &[F], classes: usize, denom: F) -> (F, Vec<F>) {
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (y, z) in labels.iter().zip(logits.chunks_exact(classes)) {
        let p = softmax(z);
        loss = loss - p[*y].max(cast(1e-30)).ln();
        grad.extend(p.iter().enumerate().map(|(k, v)| {
            let one = if k == *y { F::one() } else { F::zero() };
            (*v - one) / denom
        }));
    }
    (loss / denom, grad)
}

/// Cross-entropy against the uniform distribution.
pub fn uniform_cross_entropy<F: Float>(logits: &[F], classes: usize, denom: F) -> (F, Vec<F>) {
    let u = F::one() / cast(classes as f64);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for z in logits.chunks_exact(classes) {
        let p = softmax(z);
        for v in &p {
            loss = loss - u * v.max(cast(1e-30)).ln();
        }
        grad.extend(p.iter().map(|v| (*v - u) / denom));
    }
    (loss / denom, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f32, 1000.0, -5.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let z = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4];
        let (_, g) = cross_entropy(&[2, 0], &z, 3, 2.0);
        for i in 0..z.len() {
            let fd = central_diff(|x| cross_entropy(&[2, 0], x, 3, 2.0).0, &z, i, 1e-6);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
        let (_, g) = uniform_cross_entropy(&z, 3, 2.0);
        for i in 0..z.len() {
            let fd = central_diff(|x| uniform_cross_entropy(x, 3, 2.0).0, &z, i, 1e-6);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}

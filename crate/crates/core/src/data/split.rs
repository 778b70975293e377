use rand::seq::SliceRandom;

use super::tensor::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::RngHandle;

/// Shuffles once with `rng`, then cuts consecutive blocks of
/// `floor(fraction * n)` samples; the last block takes the remainder.
pub fn split_dataset(d: &LabeledDataset, fractions: &[f64], rng: &RngHandle) -> Result<Vec<LabeledDataset>> {
    if d.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::invalid("fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("fractions sum to {total}, not 1")));
    }
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng.rng());

    let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let assigned: usize = sizes[..sizes.len() - 1].iter().sum();
    let last = sizes.len() - 1;
    sizes[last] = n - assigned;
    if let Some(i) = fractions.iter().position(|f| f * (n as f64) < 1.0).or_else(|| sizes.iter().position(|s| *s == 0)) {
        return Err(Error::invalid(format!(
            "fraction {} of {n} samples yields an empty split",
            fractions[i]
        )));
    }

    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (i, s) in sizes.into_iter().enumerate() {
        out.push(d.select(format!("{}[{i}]", d.name), &order[start..start + s]));
        start += s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageTensor, Shape};
    use proptest::prelude::*;

    fn indexed(n: usize) -> LabeledDataset {
        let s = Shape::new(1, 1, 1);
        let samples = (0..n)
            .map(|i| ImageTensor::new(s, vec![i as f32 / n as f32]).unwrap())
            .collect();
        LabeledDataset::new("idx", 3, samples, (0..n).map(|i| i % 3).collect()).unwrap()
    }

    #[test]
    fn eighty_twenty() {
        let parts = split_dataset(&indexed(100), &[0.8, 0.2], &RngHandle::new(3, "s")).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 20);
    }

    #[test]
    fn deterministic() {
        let r = RngHandle::new(3, "s");
        let a = split_dataset(&indexed(50), &[0.5, 0.5], &r).unwrap();
        let b = split_dataset(&indexed(50), &[0.5, 0.5], &r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let r = RngHandle::new(3, "s");
        assert!(split_dataset(&indexed(100), &[0.5, 0.6], &r).is_err());
        assert!(split_dataset(&indexed(10), &[0.95, 0.05], &r).is_err());
        let empty = LabeledDataset::new("e", 1, vec![], vec![]).unwrap();
        assert!(split_dataset(&empty, &[1.0], &r).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_exact(n in 4usize..200, a in 1u32..9, seed in any::<u64>()) {
            let f = a as f64 / 10.0;
            let d = indexed(n);
            let Ok(parts) = split_dataset(&d, &[f, 1.0 - f], &RngHandle::new(seed, "p")) else {
                return Ok(());
            };
            let mut seen: Vec<u32> = parts
                .iter()
                .flat_map(|p| p.samples().iter().map(|s| (s.pixels()[0] * n as f32).round() as u32))
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n as u32).collect::<Vec<_>>());
        }
    }
}

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.channels, self.height, self.width)
    }
}

/// A single image, channel-major (`c`, then `h`, then `w`), values in `[0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    shape: Shape,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(shape: Shape, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                pixels.len(),
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { shape, pixels })
    }

    /// Builds a tensor by clamping every value into `[0,1]` (NaN becomes 0).
    pub fn from_clamped(shape: Shape, mut pixels: Vec<f32>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(shape, pixels)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            pixels: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// SHA-256 of shape and little-endian pixel bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in [self.shape.channels, self.shape.height, self.shape.width] {
            h.update((d as u32).to_le_bytes());
        }
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    num_classes: usize,
    shape: Shape,
    samples: Vec<ImageTensor>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        samples: Vec<ImageTensor>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if samples.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {l} outside [0, {num_classes})"
            )));
        }
        let shape = samples.first().map(|s| s.shape()).unwrap_or(Shape::new(0, 0, 0));
        if let Some(s) = samples.iter().find(|s| s.shape() != shape) {
            return Err(Error::shape(shape, s.shape()));
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            shape,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn samples(&self) -> &[ImageTensor] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&ImageTensor, usize) {
        (&self.samples[i], self.labels[i])
    }

    /// New dataset holding the given indices, in the given order.
    pub fn select(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self {
            name: name.into(),
            num_classes: self.num_classes,
            shape: self.shape,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, name: impl Into<String>, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(name, &idx)
    }

    pub fn with_samples(&self, name: impl Into<String>, samples: Vec<ImageTensor>) -> Result<Self> {
        Self::new(name, self.num_classes, samples, self.labels.clone())
    }

    /// Flat channel-major pixel buffer of samples `range`.
    pub fn flat_pixels(&self, range: std::ops::Range<usize>) -> Vec<f32> {
        let mut out = Vec::with_capacity(range.len() * self.shape.len());
        for s in &self.samples[range] {
            out.extend_from_slice(s.pixels());
        }
        out
    }

    /// Hex SHA-256 over name-independent content: shape, classes, pixels, labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in [
            self.shape.channels,
            self.shape.height,
            self.shape.width,
            self.num_classes,
            self.len(),
        ] {
            h.update((d as u64).to_le_bytes());
        }
        for (s, l) in self.samples.iter().zip(&self.labels) {
            for v in s.pixels() {
                h.update(v.to_le_bytes());
            }
            h.update((*l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        let s = Shape::new(1, 1, 2);
        assert!(ImageTensor::new(s, vec![0.0, 1.5]).is_err());
        assert!(ImageTensor::new(s, vec![0.0, f32::NAN]).is_err());
        assert!(ImageTensor::new(s, vec![0.0]).is_err());
        assert!(ImageTensor::new(s, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn rejects_bad_labels() {
        let s = Shape::new(1, 1, 1);
        let x = ImageTensor::zeros(s);
        assert!(LabeledDataset::new("d", 2, vec![x.clone()], vec![2]).is_err());
        assert!(LabeledDataset::new("d", 2, vec![x.clone()], vec![]).is_err());
        assert!(LabeledDataset::new("d", 2, vec![x], vec![1]).is_ok());
    }

    #[test]
    fn fingerprint_ignores_name() {
        let s = Shape::new(1, 1, 1);
        let a = LabeledDataset::new("a", 2, vec![ImageTensor::zeros(s)], vec![1]).unwrap();
        let mut b = a.clone();
        b.name = "b".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}

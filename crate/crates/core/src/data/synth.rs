//! Procedural corpora standing in for MNIST-class datasets.
//!
//! `Digits` plays the role of the victim's in-distribution data; `Letters`,
//! `Garments` and `ShiftedDigits` are disjoint proxy / outlier sets; `Noise`
//! is i.i.d. uniform pixels.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::glyphs::{self, Glyph, Pt};
use super::tensor::{ImageTensor, LabeledDataset, Shape};
use crate::error::{Error, Result};
use crate::rng::RngHandle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CorpusKind {
    Noise,
    Digits,
    Letters,
    Garments,
    /// Digits under large translations and rotations.
    ShiftedDigits,
}

impl CorpusKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorpusKind::Noise => "noise",
            CorpusKind::Digits => "digits",
            CorpusKind::Letters => "letters",
            CorpusKind::Garments => "garments",
            CorpusKind::ShiftedDigits => "shifted-digits",
        }
    }
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "noise" => CorpusKind::Noise,
            "digits" => CorpusKind::Digits,
            "letters" => CorpusKind::Letters,
            "garments" => CorpusKind::Garments,
            "shifted-digits" => CorpusKind::ShiftedDigits,
            other => return Err(Error::invalid(format!("unsupported corpus kind `{other}`"))),
        })
    }
}

impl TryFrom<String> for CorpusKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CorpusKind> for String {
    fn from(k: CorpusKind) -> String {
        k.as_str().to_string()
    }
}

impl std::fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn make_synthetic_corpus(kind: &CorpusKind, count: usize, shape: Shape, rng: &RngHandle) -> Result<LabeledDataset> {
    if count == 0 {
        return Err(Error::invalid("corpus count must be positive"));
    }
    if shape.is_empty() {
        return Err(Error::invalid(format!("empty shape {shape}")));
    }
    if *kind != CorpusKind::Noise && (shape.height < 8 || shape.width < 8) {
        return Err(Error::invalid(format!("{kind} needs at least 8x8 images, got {shape}")));
    }
    let mut r = rng.rng();
    let name = kind.as_str();
    match kind {
        CorpusKind::Noise => {
            let samples = (0..count)
                .map(|_| ImageTensor::new(shape, (0..shape.len()).map(|_| r.gen::<f32>()).collect()))
                .collect::<Result<Vec<_>>>()?;
            LabeledDataset::new(name, 1, samples, vec![0; count])
        }
        CorpusKind::Digits | CorpusKind::Letters | CorpusKind::Garments => {
            let mut samples = Vec::with_capacity(count);
            let mut labels = Vec::with_capacity(count);
            for i in 0..count {
                // balanced labels, shuffled order via the rng
                let label = (i + r.gen_range(0..10)) % 10;
                let g = match kind {
                    CorpusKind::Digits => glyphs::digit(label),
                    CorpusKind::Letters => glyphs::letter(label),
                    _ => glyphs::garment(label),
                };
                let filled = *kind == CorpusKind::Garments;
                samples.push(render(&g, shape, filled, &mut r));
                labels.push(label);
            }
            LabeledDataset::new(name, 10, samples, labels)
        }
        CorpusKind::ShiftedDigits => {
            let base = make_synthetic_corpus(&CorpusKind::Digits, count, shape, &rng.derive("source"))?;
            let mut out = shift_dataset(&base, &rng.derive("shift"))?;
            out.name = name.into();
            Ok(out)
        }
    }
}

/// Applies a large random translation (3-6 px per axis) and rotation
/// (15-35 degrees, random sign) to every sample, bilinear resampling.
pub fn shift_dataset(src: &LabeledDataset, rng: &RngHandle) -> Result<LabeledDataset> {
    let mut r = rng.rng();
    let shape = src.shape();
    let mut samples = Vec::with_capacity(src.len());
    for s in src.samples() {
        let sign = |r: &mut rand_chacha::ChaCha8Rng| if r.gen::<bool>() { 1.0f32 } else { -1.0 };
        let tx = sign(&mut r) * r.gen_range(3.0..6.0f32);
        let ty = sign(&mut r) * r.gen_range(3.0..6.0f32);
        let th = sign(&mut r) * r.gen_range(15.0..35.0f32).to_radians();
        samples.push(warp(s, tx, ty, th));
    }
    let mut out = src.with_samples(format!("{}-shifted", src.name), samples)?;
    out.name = format!("{}-shifted", src.name);
    let _ = shape;
    Ok(out)
}

fn warp(img: &ImageTensor, tx: f32, ty: f32, theta: f32) -> ImageTensor {
    let shape = img.shape();
    let (h, w) = (shape.height, shape.width);
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let (sin, cos) = theta.sin_cos();
    let src = img.pixels();
    let mut out = vec![0.0f32; shape.len()];
    for c in 0..shape.channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                // inverse map: output pixel -> source coordinate
                let dx = x as f32 + 0.5 - cx - tx;
                let dy = y as f32 + 0.5 - cy - ty;
                let sx = cos * dx + sin * dy + cx - 0.5;
                let sy = -sin * dx + cos * dy + cy - 0.5;
                out[c * h * w + y * w + x] = bilinear(plane, w, h, sx, sy);
            }
        }
    }
    ImageTensor::from_clamped(shape, out).expect("warp preserves shape")
}

fn bilinear(plane: &[f32], w: usize, h: usize, x: f32, y: f32) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f32, yi: f32| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f32 || yi >= h as f32 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

struct Affine {
    m: [f32; 4],
    t: (f32, f32),
}

impl Affine {
    fn apply(&self, (u, v): Pt) -> Pt {
        let (x, y) = (u - 0.5, v - 0.5);
        (
            self.m[0] * x + self.m[1] * y + self.t.0,
            self.m[2] * x + self.m[3] * y + self.t.1,
        )
    }
}

fn render(g: &Glyph, shape: Shape, filled: bool, r: &mut impl Rng) -> ImageTensor {
    let (h, w) = (shape.height, shape.width);
    let box_px = 20.0 / 28.0 * h.min(w) as f32;
    let theta: f32 = r.gen_range(-0.25..0.25);
    let scale: f32 = r.gen_range(0.85..1.1) * box_px;
    let aspect: f32 = r.gen_range(0.8..1.15);
    let shear: f32 = r.gen_range(-0.25..0.25);
    let (sin, cos) = theta.sin_cos();
    // rotation * shear * scale
    let (a, b, c, d) = (scale * aspect, shear * scale, 0.0, scale);
    let m = [cos * a - sin * c, cos * b - sin * d, sin * a + cos * c, sin * b + cos * d];
    let t = (
        w as f32 / 2.0 + r.gen_range(-1.5..1.5),
        h as f32 / 2.0 + r.gen_range(-1.5..1.5),
    );
    let tf = Affine { m, t };
    let jitter = Normal::new(0.0f32, 0.022).expect("valid std");
    let place = |pts: &[Pt], r: &mut dyn rand::RngCore| -> Vec<Pt> {
        pts.iter()
            .map(|&(u, v)| tf.apply((u + jitter.sample(r), v + jitter.sample(r))))
            .collect()
    };

    let mut plane = vec![0.0f32; h * w];
    let ink: f32 = r.gen_range(0.85..1.0);

    if filled {
        let base: f32 = r.gen_range(0.35..0.9);
        let freq: f32 = r.gen_range(0.6..1.8);
        let phase: f32 = r.gen_range(0.0..6.28);
        let dir: f32 = r.gen_range(0.0..3.14);
        let (ds, dc) = dir.sin_cos();
        let amp: f32 = r.gen_range(0.0..0.2);
        let polys: Vec<Vec<Pt>> = g.fills.iter().map(|p| place(p, r)).collect();
        for y in 0..h {
            for x in 0..w {
                let p = (x as f32 + 0.5, y as f32 + 0.5);
                let cov = polys.iter().map(|poly| polygon_coverage(poly, p)).fold(0.0f32, f32::max);
                if cov > 0.0 {
                    let tex = base * (1.0 + amp * (freq * (p.0 * dc + p.1 * ds) + phase).sin())
                        + r.gen_range(-0.06..0.06);
                    plane[y * w + x] = cov * tex.clamp(0.05, 1.0);
                }
            }
        }
    }

    let width: f32 = if filled { r.gen_range(1.4..2.2) } else { r.gen_range(1.8..3.2) };
    let mut strokes: Vec<Vec<Pt>> = g.strokes.iter().map(|s| place(s, r)).collect();
    if !filled {
        normalize_extent(&mut strokes, box_px - width, (w as f32 / 2.0, h as f32 / 2.0));
    }
    for pts in &strokes {
        stroke(&mut plane, w, h, pts, width / 2.0, ink, false);
    }
    for s in &g.seams {
        let pts = place(s, r);
        stroke(&mut plane, w, h, &pts, 0.6, 0.8, true);
    }
    if !filled {
        plane = center_of_mass_shift(&plane, w, h);
    }

    let mut pixels = Vec::with_capacity(shape.len());
    for _ in 0..shape.channels {
        pixels.extend_from_slice(&plane);
    }
    ImageTensor::from_clamped(shape, pixels).expect("render preserves shape")
}

/// Rescales stroke glyphs so the longer side of their bounding box spans
/// `side` pixels, centred on `center`, like the digit normalization of the
/// classic handwritten corpora.
fn normalize_extent(strokes: &mut [Vec<Pt>], side: f32, center: Pt) {
    let all = strokes.iter().flatten();
    let (mut x0, mut y0, mut x1, mut y1) = (f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let extent = (x1 - x0).max(y1 - y0);
    if !(extent > 1e-3) {
        return;
    }
    let k = side / extent;
    let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    for p in strokes.iter_mut().flatten() {
        *p = ((p.0 - mx) * k + center.0, (p.1 - my) * k + center.1);
    }
}

/// Integer shift that moves the intensity centre of mass to the frame centre.
fn center_of_mass_shift(plane: &[f32], w: usize, h: usize) -> Vec<f32> {
    let (mut m, mut sx, mut sy) = (0.0f32, 0.0f32, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            m += v;
            sx += v * x as f32;
            sy += v * y as f32;
        }
    }
    if m <= 0.0 {
        return plane.to_vec();
    }
    let dx = ((w as f32 - 1.0) / 2.0 - sx / m).round() as isize;
    let dy = ((h as f32 - 1.0) / 2.0 - sy / m).round() as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                out[y as usize * w + x as usize] = plane[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

fn seg_dist((px, py): Pt, (ax, ay): Pt, (bx, by): Pt) -> f32 {
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - ax - t * vx, py - ay - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Round-brush polyline with a one-pixel anti-aliasing ramp. `erase` darkens.
fn stroke(plane: &mut [f32], w: usize, h: usize, pts: &[Pt], radius: f32, ink: f32, erase: bool) {
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let pad = radius + 1.0;
        let x0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(w);
        let y0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = seg_dist((x as f32 + 0.5, y as f32 + 0.5), a, b);
                let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let v = &mut plane[y * w + x];
                    if erase {
                        *v *= 1.0 - ink * cov;
                    } else {
                        *v = v.max(cov * ink);
                    }
                }
            }
        }
    }
}

fn polygon_coverage(poly: &[Pt], p: Pt) -> f32 {
    let n = poly.len();
    let mut inside = false;
    let mut dist = f32::INFINITY;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        dist = dist.min(seg_dist(p, a, b));
    }
    if inside {
        (0.5 + dist).min(1.0)
    } else {
        (0.5 - dist).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MNIST: Shape = Shape::new(1, 28, 28);

    #[test]
    fn noise_in_range() {
        let d = make_synthetic_corpus(&CorpusKind::Noise, 10, MNIST, &RngHandle::new(0, "n")).unwrap();
        assert_eq!(d.len(), 10);
        assert!(d.samples().iter().all(|s| s.pixels().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn deterministic_corpora() {
        for kind in [CorpusKind::Noise, CorpusKind::Digits, CorpusKind::Garments, CorpusKind::ShiftedDigits] {
            let a = make_synthetic_corpus(&kind, 5, MNIST, &RngHandle::new(4, "c")).unwrap();
            let b = make_synthetic_corpus(&kind, 5, MNIST, &RngHandle::new(4, "c")).unwrap();
            assert_eq!(a.fingerprint(), b.fingerprint(), "{kind}");
        }
    }

    #[test]
    fn zero_count_and_unknown_kind_error() {
        assert!(make_synthetic_corpus(&CorpusKind::Noise, 0, MNIST, &RngHandle::new(0, "n")).is_err());
        assert!("fractals".parse::<CorpusKind>().is_err());
        assert_eq!("shifted-digits".parse::<CorpusKind>().unwrap(), CorpusKind::ShiftedDigits);
    }

    #[test]
    fn glyphs_have_ink_and_background() {
        for kind in [CorpusKind::Digits, CorpusKind::Letters, CorpusKind::Garments] {
            let d = make_synthetic_corpus(&kind, 40, MNIST, &RngHandle::new(9, "g")).unwrap();
            for s in d.samples() {
                let ink = s.pixels().iter().filter(|v| **v > 0.2).count();
                let bg = s.pixels().iter().filter(|v| **v == 0.0).count();
                assert!(ink > 20, "{kind}: too little ink ({ink})");
                assert!(bg > 150, "{kind}: too little background ({bg})");
            }
            let mut counts = [0usize; 10];
            d.labels().iter().for_each(|l| counts[*l] += 1);
            assert!(counts.iter().all(|c| *c > 0));
        }
    }
}

#[cfg(test)]
mod preview {
    use super::*;

    #[test]
    #[ignore]
    fn ascii_preview() {
        for kind in [CorpusKind::Digits, CorpusKind::Letters, CorpusKind::Garments, CorpusKind::ShiftedDigits] {
            let d = make_synthetic_corpus(&kind, 6, Shape::new(1, 28, 28), &RngHandle::new(2, "p")).unwrap();
            for (s, l) in d.samples().iter().zip(d.labels()) {
                println!("{kind} label {l}");
                for row in s.pixels().chunks(28) {
                    println!("{}", row.iter().map(|v| match (v * 4.0) as u32 { 0 => ' ', 1 => '.', 2 => ':', 3 => '+', _ => '#' }).collect::<String>());
                }
            }
        }
    }
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{ImageTensor, LabeledDataset, Shape};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(b))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file and its label file. Pixels are scaled by 1/255.
///
/// Labels are assumed to index `0..=max(label)`; the class count is
/// `max(label) + 1`.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut img = open(images_path)?;
    let magic = read_u32_be(&mut img, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x}",
            images_path.display()
        )));
    }
    let count = read_u32_be(&mut img, images_path)? as usize;
    let rows = read_u32_be(&mut img, images_path)? as usize;
    let cols = read_u32_be(&mut img, images_path)? as usize;

    let mut lab = open(labels_path)?;
    let magic = read_u32_be(&mut lab, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic:#010x}",
            labels_path.display()
        )));
    }
    let label_count = read_u32_be(&mut lab, labels_path)? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let shape = Shape::new(1, rows, cols);
    let mut bytes = vec![0u8; count * shape.len()];
    img.read_exact(&mut bytes)
        .map_err(|e| Error::io(images_path, e))?;
    let mut labels = vec![0u8; count];
    lab.read_exact(&mut labels)
        .map_err(|e| Error::io(labels_path, e))?;

    let samples = bytes
        .chunks_exact(shape.len().max(1))
        .take(count)
        .map(|c| ImageTensor::new(shape, c.iter().map(|&b| f32::from(b) / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(name, num_classes, samples, labels)
}

/// Writes images as IDX bytes, quantizing with `round(v * 255)`.
pub fn write_idx_images(path: &Path, data: &LabeledDataset) -> Result<()> {
    let shape = data.shape();
    if shape.channels != 1 {
        return Err(Error::invalid("IDX export supports single-channel images"));
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut buf = Vec::with_capacity(16 + data.len() * shape.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, shape.height as u32, shape.width as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    for s in data.samples() {
        buf.extend(s.pixels().iter().map(|v| (v * 255.0).round() as u8));
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, data: &LabeledDataset) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + data.len());
    buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &l in data.labels() {
        let b = u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} exceeds a byte")))?;
        buf.push(b);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

//! Datasets: image tensors, IDX import, the internal archive format,
//! deterministic splitting and procedural corpora.

mod archive;
mod glyphs;
mod idx;
mod split;
mod synth;
mod tensor;

pub use archive::{load_archive, save_archive, ArchiveManifest, ARCHIVE_VERSION};
pub use idx::{load_idx_dataset, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use split::split_dataset;
pub use synth::{make_synthetic_corpus, shift_dataset, CorpusKind};
pub use tensor::{ImageTensor, LabeledDataset, Shape};

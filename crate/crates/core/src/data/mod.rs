//! Dataset manifests, stratified splits, image decoding and synthesis.

mod image;
mod manifest;
mod synth;

use std::collections::BTreeMap;

pub use image::{decode_image, encode_ppm, resize_bilinear, NormStats};
pub use manifest::{
    load_manifest, stratified_split, AuditRow, DatasetSplit, Manifest, Record, IMAGE_EXTENSIONS, MANIFEST_FILE,
};
pub use synth::{
    class_contrast, class_frequency, class_name, frequency_statistic, synth_generate, synth_image, SynthConfig,
    DEFAULT_OVERLAP,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded, resized image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub label: usize,
    pub tensor: Tensor,
    pub original_size: (usize, usize),
}

/// Decodes and resizes the records named by `ids`, in the given order.
pub fn load_images(manifest: &Manifest, ids: &[String], size: usize) -> Result<Vec<ImageRecord>> {
    let index = manifest.index();
    ids.iter()
        .map(|id| {
            let rec = index
                .get(id.as_str())
                .ok_or_else(|| Error::Config(format!("id {id:?} not found in manifest")))?;
            let raw = decode_image(&manifest.path_of(rec))?;
            let original_size = (raw.shape()[1], raw.shape()[2]);
            Ok(ImageRecord {
                id: id.clone(),
                label: rec.label,
                tensor: resize_bilinear(&raw, (size, size))?,
                original_size,
            })
        })
        .collect()
}

/// Normalizes every record in place.
pub fn normalize_all(records: &mut [ImageRecord], stats: &NormStats) -> Result<()> {
    for r in records {
        r.tensor = stats.apply(&r.tensor)?;
    }
    Ok(())
}

/// Statistics from a labeled-train pool.
pub fn pool_stats(records: &[ImageRecord]) -> Result<NormStats> {
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    NormStats::compute(&ids, records.iter().map(|r| &r.tensor))
}

/// Stacks `[C, H, W]` tensors into a `[B, C, H, W]` batch.
pub fn batch<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let items: Vec<&Tensor> = images.into_iter().collect();
    Tensor::stack(&items)
}

/// Per-class counts of a pool, keyed by class index.
pub fn label_histogram(records: &[ImageRecord]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for r in records {
        *h.entry(r.label).or_insert(0) += 1;
    }
    h
}

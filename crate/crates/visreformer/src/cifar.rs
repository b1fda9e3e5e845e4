//! CIFAR-10 binary batches from disk.

use std::path::Path;

use anyhow::{Context, Result};
use visreformer_core::data::{cifar_set, decode_cifar_records, CifarRecords, LabeledImageSet, Split, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use visreformer_core::Error;

/// Reads one batch file. A missing or unreadable file is an ingestion error
/// at offset 0; a truncated one reports the offset of the short record.
pub fn read_batch(path: &Path) -> Result<CifarRecords> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Ingestion { offset: 0, reason: format!("cannot read {}: {e}", path.display()) })?;
    decode_cifar_records(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn concat(parts: Vec<CifarRecords>) -> CifarRecords {
    let mut out = CifarRecords { pixels: Vec::new(), labels: Vec::new() };
    for p in parts {
        out.pixels.extend(p.pixels);
        out.labels.extend(p.labels);
    }
    out
}

/// The five training batches and the test batch under `dir`, scaled to
/// `[0, 1]`. `subset_per_class` keeps the first that many records of each
/// class in file order, in both splits.
pub fn load_cifar10(dir: &Path, subset_per_class: Option<usize>) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let train = CIFAR_TRAIN_FILES.iter().map(|f| read_batch(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    let val = read_batch(&dir.join(CIFAR_TEST_FILE))?;
    Ok((cifar_set(concat(train), Split::Train, subset_per_class)?, cifar_set(val, Split::Val, subset_per_class)?))
}

//! CIFAR-10 binary format: each record is one label byte followed by 3072
//! pixel bytes (1024 red, 1024 green, 1024 blue; row-major within a channel).

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const TEST_FILE: &str = "test_batch.bin";

fn decode(bytes: &[u8], what: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Data(format!(
            "{what}: {} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        if rec[0] > 9 {
            return Err(Error::Data(format!("{what}: label byte {} outside 0..=9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Reads one binary batch file.
pub fn read_cifar_batch(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (pixels, labels) = decode(&bytes, &path.display().to_string())?;
    Dataset::new(Tensor4::new([labels.len(), 3, 32, 32], pixels)?, labels, split, 10)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
///
/// The test split is normalized with the training split's channel statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in TRAIN_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (p, l) = decode(&bytes, name)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let train = Dataset::new(Tensor4::new([labels.len(), 3, 32, 32], pixels)?, labels, Split::Train, 10)?;
    let test = read_cifar_batch(&dir.join(TEST_FILE), Split::Test)?.with_stats(train.stats.clone());
    Ok((train, test))
}

/// Writes `ds` (3 x 32 x 32, labels < 256) in the binary batch layout.
pub fn write_cifar_batch(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.images.dims()[1..] != [3, 32, 32] {
        return Err(Error::Shape(format!("CIFAR layout needs 3x32x32 images, got {:?}", ds.images.dims())));
    }
    let mut bytes = Vec::with_capacity(ds.len() * CIFAR_RECORD_LEN);
    for i in 0..ds.len() {
        let label = u8::try_from(ds.labels[i]).map_err(|_| Error::Data(format!("label {} does not fit a byte", ds.labels[i])))?;
        bytes.push(label);
        bytes.extend(ds.images.sample(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD_LEN];
        r[0] = label;
        r
    }

    #[test]
    fn decodes_label_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut bytes = record(7, 255);
        bytes.extend(record(2, 0));
        fs::write(&p, bytes).unwrap();
        let ds = read_cifar_batch(&p, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![7, 2]);
        assert!(ds.images.sample(0).iter().all(|&v| v == 1.0));
        assert!(ds.images.sample(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_major_layout() {
        let mut r = record(0, 0);
        r[1 + 1024 + 33] = 51; // green, row 1, col 1
        let (px, _) = decode(&r, "r").unwrap();
        let t = Tensor4::new([1, 3, 32, 32], px).unwrap();
        assert_eq!(t.at(0, 1, 1, 1), 51.0 / 255.0);
    }

    #[test]
    fn rejects_truncated_and_bad_labels() {
        assert!(decode(&record(1, 0)[..100], "t").is_err());
        assert!(decode(&record(10, 0), "t").is_err());
        assert!(decode(&[], "t").is_err());
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        match load_cifar10(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("data_batch_1.bin")),
            other => panic!("unexpected {other:?}"),
        }
    }
}

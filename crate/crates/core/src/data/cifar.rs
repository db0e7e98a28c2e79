//! CIFAR-10 binary batches: each record is one label byte followed by the
//! red, green and blue 32x32 planes.

use std::path::Path;

use super::{Dataset, ImageSet};
use crate::error::{Error, Result};

const SIDE: usize = 32;
const RECORD: usize = 1 + 3 * SIDE * SIDE;
const TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST: &str = "test_batch.bin";

fn read_batch(path: &Path, pixels: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::BadData {
            path: path.to_path_buf(),
            message: format!(
                "{} bytes is not a whole number of {RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

pub fn load_cifar10(dir: impl AsRef<Path>, merge_train_test: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut files: Vec<&str> = TRAIN.to_vec();
    if merge_train_test {
        files.push(TEST);
    }
    for f in files {
        read_batch(&dir.join(f), &mut pixels, &mut labels)?;
    }
    Ok(Dataset {
        images: ImageSet::from_bytes(3, SIDE, SIDE, pixels),
        labels: Some(labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_planes_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        for (k, name) in TRAIN.iter().chain([TEST].iter()).enumerate() {
            let mut rec = vec![k as u8];
            rec.extend((0..3 * SIDE * SIDE).map(|i| (i % 251) as u8));
            std::fs::write(dir.path().join(name), rec).unwrap();
        }
        let ds = load_cifar10(dir.path(), true).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels.as_deref(), Some(&[0, 1, 2, 3, 4, 5][..]));
        assert_eq!(ds.images.channels(), 3);
        let img = ds.images.image(0);
        assert_eq!(img.data[0], -1.0);
        assert_eq!(load_cifar10(dir.path(), false).unwrap().len(), 5);
    }

    #[test]
    fn rejects_partial_records() {
        let dir = tempfile::tempdir().unwrap();
        for name in TRAIN {
            std::fs::write(dir.path().join(name), vec![0u8; RECORD + 3]).unwrap();
        }
        assert!(load_cifar10(dir.path(), false).is_err());
    }
}

//! IDX files (MNIST / Fashion-MNIST distribution format), optionally gzipped.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{Dataset, ImageSet};
use crate::error::{Error, Result};

/// Unsigned-byte, three-dimensional.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte, one-dimensional.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const SPLITS: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// `base` itself or `base.gz`, whichever exists.
fn locate(dir: &Path, base: &str) -> Result<PathBuf> {
    for name in [base.to_string(), format!("{base}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(base),
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "IDX file not found (also tried .gz)",
        ),
    ))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::BadData {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < 16 {
        return Err(bad(path, "truncated header"));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(bad(
            path,
            format!("bad magic number {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    let need = n * rows * cols;
    if bytes.len() - 16 != need {
        return Err(bad(
            path,
            format!(
                "header promises {need} pixel bytes, file has {}",
                bytes.len() - 16
            ),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < 8 {
        return Err(bad(path, "truncated header"));
    }
    let magic = be_u32(&bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(bad(
            path,
            format!("bad magic number {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() - 8 != n {
        return Err(bad(
            path,
            format!("header promises {n} labels, file has {}", bytes.len() - 8),
        ));
    }
    Ok(bytes[8..].to_vec())
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let ipath = locate(dir, images)?;
    let lpath = locate(dir, labels)?;
    let (n, rows, cols, pixels) = read_idx_images(&ipath)?;
    let lab = read_idx_labels(&lpath)?;
    if lab.len() != n {
        return Err(bad(
            &lpath,
            format!("{} labels for {n} images in {}", lab.len(), ipath.display()),
        ));
    }
    Ok(Dataset {
        images: ImageSet::from_bytes(1, rows, cols, pixels),
        labels: Some(lab.into_iter().map(usize::from).collect()),
    })
}

/// Loads the training split, and the test split appended after it when
/// `merge_train_test` is set.
pub fn load_idx_dataset(dir: impl AsRef<Path>, merge_train_test: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (ti, tl) = SPLITS[0];
    let mut ds = load_split(dir, ti, tl)?;
    if merge_train_test {
        let (ei, el) = SPLITS[1];
        let test = load_split(dir, ei, el)?;
        ds.images = ds.images.concat(&test.images)?;
        let mut labels = ds.labels.take().unwrap_or_default();
        labels.extend(test.labels.unwrap_or_default());
        ds.labels = Some(labels);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use std::io::Write;

    fn write_images(path: &Path, n: u32, rows: u32, cols: u32, magic: u32, gz: bool) -> Vec<u8> {
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (i * 7 % 256) as u8).collect();
        let mut bytes = Vec::new();
        for v in [magic, n, rows, cols] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&pixels);
        if gz {
            let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
            enc.write_all(&bytes).unwrap();
            bytes = enc.finish().unwrap();
        }
        std::fs::write(path, bytes).unwrap();
        pixels
    }

    fn write_labels(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn merges_train_and_test_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let train = write_images(
            &d.join("train-images-idx3-ubyte"),
            3,
            2,
            2,
            IDX_IMAGES_MAGIC,
            false,
        );
        write_labels(&d.join("train-labels-idx1-ubyte"), &[0, 1, 2]);
        write_images(
            &d.join("t10k-images-idx3-ubyte.gz"),
            2,
            2,
            2,
            IDX_IMAGES_MAGIC,
            true,
        );
        write_labels(&d.join("t10k-labels-idx1-ubyte"), &[3, 4]);
        let ds = load_idx_dataset(d, true).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.labels.as_deref(), Some(&[0, 1, 2, 3, 4][..]));
        assert_eq!(&ds.images.bytes().unwrap()[..12], &train[..]);
        let only_train = load_idx_dataset(d, false).unwrap();
        assert_eq!(only_train.len(), 3);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        write_images(&p, 1, 2, 2, 0x0000_0802, false);
        let err = read_idx_images(&p).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write_images(
            &d.join("train-images-idx3-ubyte"),
            3,
            2,
            2,
            IDX_IMAGES_MAGIC,
            false,
        );
        write_labels(&d.join("train-labels-idx1-ubyte"), &[0, 1]);
        let err = load_idx_dataset(d, false).unwrap_err();
        assert!(err.to_string().contains("2 labels for 3 images"), "{err}");
    }

    #[test]
    fn rejects_truncated_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        write_images(&p, 2, 2, 2, IDX_IMAGES_MAGIC, false);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(read_idx_images(&p).is_err());
    }
}

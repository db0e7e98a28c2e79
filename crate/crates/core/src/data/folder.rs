//! `root/<class>/<file>` image trees. Classes are numbered in sorted
//! directory-name order.

use std::path::Path;

use image::imageops::FilterType;

use super::{Dataset, ImageSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FolderReport {
    pub loaded: usize,
    pub skipped: usize,
    pub classes: Vec<String>,
}

/// Decodes every readable image, resizes to `image_size` (height, width) and
/// keeps RGB. Unreadable files are skipped with a warning and counted.
pub fn load_image_folder(
    root: impl AsRef<Path>,
    image_size: (usize, usize),
) -> Result<(Dataset, FolderReport)> {
    let root = root.as_ref();
    let (h, w) = image_size;
    let mut classes: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    classes.sort_by_key(|e| e.file_name());
    let mut report = FolderReport::default();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        report
            .classes
            .push(class.file_name().to_string_lossy().into_owned());
        let mut files: Vec<_> = std::fs::read_dir(class.path())
            .map_err(|e| Error::io(class.path(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = match image::open(&file) {
                Ok(img) => img,
                Err(err) => {
                    log::warn!("skipping {}: {err}", file.display());
                    report.skipped += 1;
                    continue;
                }
            };
            let rgb = img
                .resize_exact(w as u32, h as u32, FilterType::Triangle)
                .to_rgb8();
            for c in 0..3 {
                pixels.extend(rgb.pixels().map(|p| p.0[c]));
            }
            labels.push(label);
            report.loaded += 1;
        }
    }
    Ok((
        Dataset {
            images: ImageSet::from_bytes(3, h, w, pixels),
            labels: Some(labels),
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_classes_resizes_and_skips_garbage() {
        let dir = tempfile::tempdir().unwrap();
        for (class, color) in [("a_red", [255u8, 0, 0]), ("b_gray", [128, 128, 128])] {
            let d = dir.path().join(class);
            std::fs::create_dir(&d).unwrap();
            for k in 0..2 {
                let img = image::RgbImage::from_pixel(7, 5, image::Rgb(color));
                img.save(d.join(format!("{k}.png"))).unwrap();
            }
        }
        std::fs::write(dir.path().join("a_red/broken.png"), b"not an image").unwrap();
        let (ds, report) = load_image_folder(dir.path(), (4, 4)).unwrap();
        assert_eq!(report.loaded, 4);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.classes, vec!["a_red", "b_gray"]);
        assert_eq!(ds.labels.as_deref(), Some(&[0, 0, 1, 1][..]));
        assert_eq!(ds.images.size(), (4, 4));
        let red = ds.images.image(0).to_gray();
        // 0.299 in [0, 1] intensity is 2 * 0.299 - 1 in [-1, 1]
        assert!((red.data[0] as f64 - (2.0 * 0.299 - 1.0)).abs() < 1e-5);
        let gray = ds.images.image(2);
        let g = gray.to_gray();
        assert!((g.data[5] - gray.data[5]).abs() < 1e-6);
    }
}

//! Two-class block images used as a desk-scale end-to-end fixture.

use rand_distr::{Distribution, Normal};

use super::{Dataset, ImageSet};
use crate::rng::{stream, Stream};

/// Class 0: bright centred square on a dark ground. Class 1: the negative.
/// The square spans half of each side.
pub fn synthetic_prototypes(image_size: (usize, usize)) -> [Vec<f32>; 2] {
    let (h, w) = image_size;
    let (sh, sw) = (h / 2, w / 2);
    let (top, left) = ((h - sh) / 2, (w - sw) / 2);
    let mut bright = vec![-1.0f32; h * w];
    for y in top..top + sh {
        for x in left..left + sw {
            bright[y * w + x] = 1.0;
        }
    }
    let dark = bright.iter().map(|v| -v).collect();
    [bright, dark]
}

/// `n_per_class` noisy copies of each prototype (class 0 first), with
/// Gaussian pixel noise of `noise_std` clipped to `[-1, 1]`.
pub fn make_synthetic_blocks(
    n_per_class: usize,
    image_size: (usize, usize),
    noise_std: f64,
    seed: u64,
) -> Dataset {
    let protos = synthetic_prototypes(image_size);
    let mut rng = stream(seed, Stream::Data);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("valid std");
    let mut values = Vec::with_capacity(2 * n_per_class * protos[0].len());
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for (label, proto) in protos.iter().enumerate() {
        for _ in 0..n_per_class {
            for &p in proto {
                let v = if noise_std > 0.0 {
                    p + noise.sample(&mut rng) as f32
                } else {
                    p
                };
                values.push(v);
            }
            labels.push(label);
        }
    }
    Dataset {
        images: ImageSet::from_floats(1, image_size.0, image_size.1, values),
        labels: Some(labels),
    }
}

//! Latent dumps and 2-D scatter plots for inspecting cluster structure.
//!
//! The dump is a CSV with a single header line:
//!
//! ```text
//! index,assignment,label,config_hash,zc_0,..,zc_{K-1},zs_0,..,zs_{d_s-1}
//! ```
//!
//! `label` is empty when ground truth is unknown.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{argmax_rows, latents};
use crate::nets::Encoder;
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub config_hash: String,
    pub num_clusters: usize,
    pub style_dim: usize,
    /// Row-major `N x (K + d_s)`.
    pub latents: Vec<f32>,
    pub assignments: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

impl EmbeddingDump {
    pub fn from_encoder(encoder: &Encoder<f32>, data: &Dataset, grayscale: bool, config_hash: &str) -> Self {
        let z = latents(encoder, &data.images, grayscale);
        let k = encoder.spec.num_clusters;
        Self {
            config_hash: config_hash.to_string(),
            num_clusters: k,
            style_dim: encoder.spec.style_dim,
            assignments: argmax_rows(&z, k),
            latents: z.into_vec(),
            labels: data.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.num_clusters + self.style_dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.latent_dim();
        &self.latents[i * d..(i + 1) * d]
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["index", "assignment", "label", "config_hash"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..self.num_clusters).map(|j| format!("zc_{j}")));
        h.extend((0..self.style_dim).map(|j| format!("zs_{j}")));
        h
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(self.header()).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec = vec![
                i.to_string(),
                self.assignments[i].to_string(),
                self.labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default(),
                self.config_hash.clone(),
            ];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |m: String| Error::BadData {
            path: path.to_path_buf(),
            message: m,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let k = header.iter().filter(|h| h.starts_with("zc_")).count();
        let ds = header.iter().filter(|h| h.starts_with("zs_")).count();
        if header.len() != 4 + k + ds {
            return Err(bad(format!("unexpected header {:?}", header)));
        }
        let mut out = Self {
            config_hash: String::new(),
            num_clusters: k,
            style_dim: ds,
            latents: Vec::new(),
            assignments: Vec::new(),
            labels: Some(Vec::new()),
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| bad(format!("field {i}: {e}")))
            };
            out.assignments.push(num(1)? as usize);
            if rec[2].is_empty() {
                out.labels = None;
            } else if let Some(l) = out.labels.as_mut() {
                l.push(num(2)? as usize);
            }
            out.config_hash = rec[3].to_string();
            for i in 4..rec.len() {
                out.latents.push(num(i)? as f32);
            }
        }
        Ok(out)
    }
}

/// Upper bound on points fed to t-SNE; larger dumps are subsampled.
pub const TSNE_MAX_POINTS: usize = 3000;

/// Seeded Barnes-Hut t-SNE of rows `idx` of `dump`. Returns `[x, y]` per row.
pub fn tsne_2d(dump: &EmbeddingDump, idx: &[usize], seed: u64) -> Vec<[f32; 2]> {
    let n = idx.len();
    if n < 4 {
        return idx.iter().map(|&i| [dump.row(i)[0], 0.0]).collect();
    }
    let rows: Vec<&[f32]> = idx.iter().map(|&i| dump.row(i)).collect();
    let mut rng = stream(seed, Stream::Eval);
    let init = Normal::new(0.0f32, 1e-4).expect("valid std");
    let start: Vec<f32> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let perplexity = 30.0f32.min((n as f32 - 1.0) / 3.0);
    let emb = bhtsne::tSNE::<f32, &[f32], 2>::new(&rows)
        .perplexity(perplexity)
        .epochs(1000)
        .initial_embedding(start)
        .barnes_hut(0.5, |a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f32>()
                .sqrt()
        })
        .embedding();
    emb.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Rows to plot: all of them, or a seeded subsample of [`TSNE_MAX_POINTS`].
pub fn plot_indices(n: usize, seed: u64) -> Vec<usize> {
    if n <= TSNE_MAX_POINTS {
        return (0..n).collect();
    }
    let mut rng = stream(seed, Stream::Subset);
    let mut idx = sample(&mut rng, n, TSNE_MAX_POINTS).into_vec();
    idx.sort_unstable();
    idx
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

fn colour(c: usize) -> Rgb<u8> {
    let base = PALETTE[c % PALETTE.len()];
    // darken on wrap-around so >10 groups stay distinguishable
    let f = 1.0 / (1 + c / PALETTE.len()) as f32;
    Rgb(base.map(|v| (v as f32 * f) as u8))
}

const PANEL: u32 = 600;
const MARGIN: u32 = 12;

fn draw_panel(img: &mut RgbImage, x0: u32, points: &[[f32; 2]], groups: &[usize]) {
    let (mut lo, mut hi) = ([f32::INFINITY; 2], [f32::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (0..2).map(|a| (hi[a] - lo[a]).max(1e-12)).collect::<Vec<_>>();
    let inner = (PANEL - 2 * MARGIN) as f32;
    for (p, &g) in points.iter().zip(groups) {
        let px = x0 + MARGIN + ((p[0] - lo[0]) / span[0] * inner) as u32;
        let py = MARGIN + ((p[1] - lo[1]) / span[1] * inner) as u32;
        for dx in 0..3 {
            for dy in 0..3 {
                let (x, y) = ((px + dx).saturating_sub(1), (py + dy).saturating_sub(1));
                if x < img.width() && y < img.height() {
                    img.put_pixel(x, y, colour(g));
                }
            }
        }
    }
}

/// Scatter of `points` coloured by assignment (left) and, when given, by
/// true label (right).
pub fn scatter_png(
    path: impl AsRef<Path>,
    points: &[[f32; 2]],
    assignments: &[usize],
    labels: Option<&[usize]>,
) -> Result<()> {
    let panels = if labels.is_some() { 2 } else { 1 };
    let mut img = RgbImage::from_pixel(PANEL * panels, PANEL, Rgb([255, 255, 255]));
    draw_panel(&mut img, 0, points, assignments);
    if let Some(l) = labels {
        for y in 0..PANEL {
            img.put_pixel(PANEL, y, Rgb([0, 0, 0]));
        }
        draw_panel(&mut img, PANEL, points, l);
    }
    let path = path.as_ref();
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// t-SNE of (a subsample of) the dump written as a PNG scatter.
pub fn plot_dump(dump: &EmbeddingDump, path: impl AsRef<Path>, seed: u64) -> Result<()> {
    let idx = plot_indices(dump.len(), seed);
    let pts = tsne_2d(dump, &idx, seed);
    let assign: Vec<usize> = idx.iter().map(|&i| dump.assignments[i]).collect();
    let labels: Option<Vec<usize>> = dump.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
    scatter_png(path, &pts, &assign, labels.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump(n: usize, labels: bool) -> EmbeddingDump {
        let mut latents = Vec::new();
        for i in 0..n {
            let c = i % 2;
            latents.extend([
                if c == 0 { 0.9 } else { 0.1 },
                if c == 0 { 0.1 } else { 0.9 },
                (i as f32 * 0.37).sin() * 0.1,
            ]);
        }
        EmbeddingDump {
            config_hash: "abc123".into(),
            num_clusters: 2,
            style_dim: 1,
            latents,
            assignments: (0..n).map(|i| i % 2).collect(),
            labels: labels.then(|| (0..n).map(|i| (i + 1) % 2).collect()),
        }
    }

    #[test]
    fn csv_round_trip_keeps_every_field() {
        let dir = tempfile::tempdir().unwrap();
        for labels in [true, false] {
            let d = dump(7, labels);
            let p = dir.path().join("z.csv");
            d.write_csv(&p).unwrap();
            let text = std::fs::read_to_string(&p).unwrap();
            assert_eq!(
                text.lines().next().unwrap(),
                "index,assignment,label,config_hash,zc_0,zc_1,zs_0"
            );
            assert_eq!(text.lines().count(), 8);
            assert_eq!(EmbeddingDump::read_csv(&p).unwrap(), d);
        }
    }

    #[test]
    fn plot_is_a_nonempty_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.png");
        plot_dump(&dump(60, true), &p, 3).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (2 * PANEL, PANEL));
        assert!(img.pixels().any(|px| px.0 != [255, 255, 255]));
    }

    #[test]
    fn tsne_is_seeded() {
        let d = dump(40, false);
        let idx: Vec<usize> = (0..40).collect();
        assert_eq!(tsne_2d(&d, &idx, 5), tsne_2d(&d, &idx, 5));
    }

    #[test]
    fn large_dumps_are_subsampled_deterministically() {
        let a = plot_indices(10_000, 1);
        assert_eq!(a.len(), TSNE_MAX_POINTS);
        assert_eq!(a, plot_indices(10_000, 1));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(plot_indices(5, 1), vec![0, 1, 2, 3, 4]);
    }
}

//! Clustering metrics and the evaluation pass.
//!
//! NMI uses the geometric mean of the two entropies. When both partitions
//! are a single cluster NMI is 1; when exactly one is, it is 0.

use std::path::Path;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::nets::{encode, Encoder};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::{Element, Tensor};

pub const KMEANS_RESTARTS: usize = 20;
pub const KMEANS_MAX_ITER: usize = 300;

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "label vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Counts `table[pred][true]`, sized by the largest label on each side.
pub fn confusion(y_true: &[usize], y_pred: &[usize]) -> Result<Vec<Vec<u64>>> {
    check_lengths(y_true, y_pred)?;
    let rows = y_pred.iter().max().map_or(0, |m| m + 1);
    let cols = y_true.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0u64; cols]; rows];
    for (&t_i, &p_i) in y_true.iter().zip(y_pred) {
        t[p_i][t_i] += 1;
    }
    Ok(t)
}

/// Best accuracy over one-to-one cluster-to-label maps, and that map as
/// `(cluster, label)` pairs for every non-empty cluster.
pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<(f64, Vec<(usize, usize)>)> {
    check_lengths(y_true, y_pred)?;
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("accuracy of zero samples".into()));
    }
    let table = confusion(y_true, y_pred)?;
    let n = table.len().max(table[0].len());
    let mut weights = Matrix::new(n, n, 0i64);
    for (r, row) in table.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            weights[(r, c)] = v as i64;
        }
    }
    let (total, assign) = kuhn_munkres(&weights);
    let mapping = assign
        .iter()
        .enumerate()
        .filter(|&(r, &c)| r < table.len() && c < table[0].len() && table[r].iter().any(|&v| v > 0))
        .map(|(r, &c)| (r, c))
        .collect();
    Ok((total as f64 / y_true.len() as f64, mapping))
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = confusion(y_true, y_pred)?;
    if y_true.is_empty() {
        return Err(Error::InvalidArgument("NMI of zero samples".into()));
    }
    let n = y_true.len() as f64;
    let row_sums: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c]).sum())
        .collect();
    let h_pred = entropy(row_sums.iter().copied(), n);
    let h_true = entropy(col_sums.iter().copied(), n);
    if h_pred == 0.0 && h_true == 0.0 {
        return Ok(1.0);
    }
    if h_pred == 0.0 || h_true == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v > 0 {
                let v = v as f64;
                mi += v / n * (v * n / (row_sums[r] as f64 * col_sums[c] as f64)).ln();
            }
        }
    }
    Ok((mi / (h_pred * h_true).sqrt()).clamp(0.0, 1.0))
}

fn pairs(c: u64) -> u128 {
    let c = c as u128;
    c * c.saturating_sub(1) / 2
}

/// Adjusted Rand index from exact pair counts. Returns 1 when the
/// adjustment is undefined (both partitions trivial and equal).
pub fn ari(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = confusion(y_true, y_pred)?;
    if y_true.len() < 2 {
        return Err(Error::InvalidArgument("ARI needs at least two samples".into()));
    }
    let index: u128 = table.iter().flatten().map(|&v| pairs(v)).sum();
    let a: u128 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let b: u128 = (0..table[0].len())
        .map(|c| pairs(table.iter().map(|r| r[c]).sum()))
        .sum();
    let total = pairs(y_true.len() as u64);
    let expected = a as f64 * b as f64 / total as f64;
    let max = (a as f64 + b as f64) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index as f64 - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

fn lloyd(points: &[&[f64]], mut centers: Vec<Vec<f64>>) -> KMeansResult {
    let (n, d, k) = (points.len(), points[0].len(), centers.len());
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let dist = sq_dist(p, center);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the point farthest from its centre
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(points[b], &centers[labels[b]]))
                    })
                    .unwrap();
                centers[c] = points[far].to_vec();
                labels[far] = c;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    KMeansResult { labels, inertia }
}

/// Lloyd iterations from k-means++ seeds, best inertia of
/// [`KMEANS_RESTARTS`] runs. `data` is row-major `n x d`.
pub fn kmeans(data: &[f64], d: usize, k: usize, seed: u64) -> Result<KMeansResult> {
    if d == 0 || !data.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "{} values do not form rows of width {d}",
            data.len()
        )));
    }
    let points: Vec<&[f64]> = data.chunks_exact(d).collect();
    if k == 0 || points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means with k = {k} needs at least k points, got {}",
            points.len()
        )));
    }
    let mut rng = stream(seed, Stream::Eval);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(&points, kmeans_pp(&points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Index of the largest entry among the first `k` columns of each row;
/// ties go to the lowest index.
pub fn argmax_rows<T: Element>(z: &Tensor<T>, k: usize) -> Vec<usize> {
    (0..z.dim(0))
        .map(|i| {
            let row = &z.row(i)[..k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Evaluation-mode latents of a whole image set, `[N, K + d_s]`.
pub fn latents(encoder: &Encoder<f32>, images: &ImageSet, grayscale: bool) -> Tensor<f32> {
    let n = images.len();
    let chunk = crate::nets::EVAL_CHUNK;
    let mut parts = Vec::with_capacity(n.div_ceil(chunk));
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let (z, _) = encode(encoder, &images.batch_tensor(&idx, grayscale, None));
        parts.push(z);
    }
    Tensor::cat_rows(&parts)
}

/// Cluster of every image: argmax of its category probabilities.
pub fn assign_clusters(encoder: &Encoder<f32>, images: &ImageSet, grayscale: bool) -> Vec<usize> {
    argmax_rows(&latents(encoder, images, grayscale), encoder.spec.num_clusters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// How the assignment was produced, e.g. `argmax` or `kmeans_z_c`.
    pub method: String,
    pub n: usize,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    /// `confusion[cluster][label]`
    pub confusion: Vec<Vec<u64>>,
    /// `(cluster, label)` pairs used for the accuracy.
    pub mapping: Vec<(usize, usize)>,
}

impl MetricsReport {
    pub fn compute(method: &str, y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        let (acc, mapping) = accuracy(y_true, y_pred)?;
        Ok(Self {
            method: method.to_string(),
            n: y_true.len(),
            acc,
            nmi: nmi(y_true, y_pred)?,
            ari: ari(y_true, y_pred)?,
            confusion: confusion(y_true, y_pred)?,
            mapping,
        })
    }

    pub fn confusion_csv(&self) -> String {
        let cols = self.confusion.first().map_or(0, |r| r.len());
        let mut out = String::from("cluster");
        for c in 0..cols {
            out.push_str(&format!(",label_{c}"));
        }
        out.push('\n');
        for (r, row) in self.confusion.iter().enumerate() {
            out.push_str(&r.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Metrics of the argmax assignment and optionally of k-means on the full
/// latent, the category block and the style block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config_hash: String,
    pub reports: Vec<MetricsReport>,
    #[serde(skip)]
    pub assignments: Vec<usize>,
}

impl Evaluation {
    pub fn argmax(&self) -> &MetricsReport {
        &self.reports[0]
    }

    pub fn get(&self, method: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.method == method)
    }

    /// Writes `metrics.json` and one `confusion_<method>.csv` per report.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("serializable report");
        let p = dir.join("metrics.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        for r in &self.reports {
            let p = dir.join(format!("confusion_{}.csv", r.method));
            std::fs::write(&p, r.confusion_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub const KMEANS_SLICES: [&str; 3] = ["kmeans_z", "kmeans_z_c", "kmeans_z_s"];

/// Scores cluster assignments derived from `z` (`[N, K + d_s]`).
pub fn evaluate_latents(
    z: &Tensor<f32>,
    num_clusters: usize,
    labels: &[usize],
    with_kmeans: bool,
    seed: u64,
    config_hash: &str,
) -> Result<Evaluation> {
    let assignments = argmax_rows(z, num_clusters);
    let mut reports = vec![MetricsReport::compute("argmax", labels, &assignments)?];
    if with_kmeans {
        let width = z.dim(1);
        for (name, (start, end)) in
            KMEANS_SLICES
                .iter()
                .zip([(0, width), (0, num_clusters), (num_clusters, width)])
        {
            if end == start {
                continue;
            }
            let data: Vec<f64> = (0..z.dim(0))
                .flat_map(|i| z.row(i)[start..end].iter().map(|&v| v as f64))
                .collect();
            let km = kmeans(&data, end - start, num_clusters, seed)?;
            reports.push(MetricsReport::compute(name, labels, &km.labels)?);
        }
    }
    Ok(Evaluation {
        config_hash: config_hash.to_string(),
        reports,
        assignments,
    })
}

pub fn evaluate(
    encoder: &Encoder<f32>,
    images: &ImageSet,
    labels: &[usize],
    grayscale: bool,
    with_kmeans: bool,
    seed: u64,
    config_hash: &str,
) -> Result<Evaluation> {
    if labels.len() != images.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let z = latents(encoder, images, grayscale);
    evaluate_latents(
        &z,
        encoder.spec.num_clusters,
        labels,
        with_kmeans,
        seed,
        config_hash,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_reference_cases() {
        assert_eq!(accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap().0, 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().0, 0.5);
        assert_eq!(accuracy(&[2, 0, 1], &[2, 0, 1]).unwrap().0, 1.0);
        // more clusters than labels: one cluster stays unmatched
        let (acc, map) = accuracy(&[0, 0, 1, 1], &[0, 1, 2, 2]).unwrap();
        assert_eq!(acc, 0.75);
        assert_eq!(map.len(), 2);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn nmi_reference_cases() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[1, 1, 0, 0, 2]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
        // H(true) = ln 2, H(pred) = H(1/4, 3/4), I = ln 2 - 3/4 ln 3 + ... by hand:
        let h_t = 2f64.ln();
        let h_p = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let i = 0.25 * (0.25f64 / (0.25 * 0.5)).ln()
            + 0.25 * (0.25f64 / (0.75 * 0.5)).ln()
            + 0.5 * (0.5f64 / (0.75 * 0.5)).ln();
        let want = i / (h_t * h_p).sqrt();
        assert!((nmi(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ari_reference_cases() {
        assert_eq!(ari(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        assert!((ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(ari(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_blobs_deterministically() {
        let mut data = Vec::new();
        let mut truth = Vec::new();
        let mut rng = stream(1, Stream::Data);
        for i in 0..60 {
            let c = i % 2;
            let centre = if c == 0 { -10.0 } else { 10.0 };
            data.push(centre + rng.random::<f64>() - 0.5);
            data.push(rng.random::<f64>() - 0.5);
            truth.push(c);
        }
        let km = kmeans(&data, 2, 2, 4).unwrap();
        assert_eq!(accuracy(&truth, &km.labels).unwrap().0, 1.0);
        assert_eq!(km, kmeans(&data, 2, 2, 4).unwrap());
    }

    #[test]
    fn kmeans_with_one_cluster_per_point_has_zero_inertia() {
        let data = [0.0, 1.0, 5.0, 2.0, -3.0, 4.0];
        let km = kmeans(&data, 2, 3, 0).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut l = km.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2]);
        assert!(kmeans(&data, 2, 4, 0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let z = Tensor::from_vec(vec![2, 4], vec![0.1f32, 0.7, 0.2, 9.0, 0.5, 0.5, 0.0, 9.0]);
        assert_eq!(argmax_rows(&z, 3), vec![1, 0]);
    }

    #[test]
    fn confusion_csv_layout() {
        let r = MetricsReport::compute("argmax", &[0, 1, 1], &[1, 0, 0]).unwrap();
        assert_eq!(r.confusion_csv(), "cluster,label_0,label_1\n0,0,2\n1,1,0\n");
        assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 3);
    }
}

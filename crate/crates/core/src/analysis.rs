//! Environment analysis in descriptor space: similarity maps, uniqueness
//! scores and place clustering. Similarity is reported as raw L2 distance, so
//! smaller means more alike.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::sq_distance;
use crate::retrieval::DescriptorIndex;

/// Distances from one reference place to every other indexed place.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub reference: String,
    pub entries: Vec<(String, f64)>,
}

impl SimilarityMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,distance\n");
        for (id, d) in &self.entries {
            out.push_str(&format!("{id},{d}\n"));
        }
        out
    }
}

pub fn similarity_map(index: &DescriptorIndex, id: &str) -> Result<SimilarityMap> {
    let r = index
        .position_of(id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown id {id:?}")))?;
    let reference = &index.descriptors()[r];
    let entries = index
        .ids()
        .iter()
        .zip(index.descriptors())
        .enumerate()
        .filter(|(i, _)| *i != r)
        .map(|(_, (other, d))| (other.clone(), reference.distance(d)))
        .collect();
    Ok(SimilarityMap {
        reference: id.to_string(),
        entries,
    })
}

/// Per-place uniqueness in `[0, 1]`; higher is more distinctive.
#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessScore {
    pub id: String,
    pub raw: f64,
    pub score: f64,
}

pub fn uniqueness_csv(scores: &[UniquenessScore]) -> String {
    let mut out = String::from("id,score\n");
    for s in scores {
        out.push_str(&format!("{},{}\n", s.id, s.score));
    }
    out
}

/// Sum of distances to every other place, min-max normalized. When all raw
/// sums are equal every score is 0.
pub fn uniqueness(index: &DescriptorIndex) -> Result<Vec<UniquenessScore>> {
    if index.len() < 2 {
        return Err(Error::Insufficient(format!(
            "uniqueness needs at least 2 places, index has {}",
            index.len()
        )));
    }
    let d = index.descriptors();
    let raw: Vec<f64> = (0..d.len())
        .map(|p| (0..d.len()).filter(|&q| q != p).map(|q| d[p].distance(&d[q])).sum())
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(index
        .ids()
        .iter()
        .zip(&raw)
        .map(|(id, &r)| UniquenessScore {
            id: id.clone(),
            raw: r,
            score: if hi > lo { (r - lo) / (hi - lo) } else { 0.0 },
        })
        .collect())
}

/// Result of [`kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after initialization and after every
    /// refinement iteration.
    pub wcss_history: Vec<f64>,
}

impl Clustering {
    pub fn wcss(&self) -> f64 {
        *self.wcss_history.last().unwrap_or(&0.0)
    }
}

pub const KMEANS_MAX_ITER: usize = 100;

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_distance(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from a seeded farthest-point start: a random first
/// centroid, then repeatedly the point farthest from all chosen centroids
/// (lowest index on ties). Stops when labels settle or after `max_iter`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cluster count {k} outside 1..={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for (i, d) in dist.iter().enumerate() {
            if *d > dist[far] {
                far = i;
            }
        }
        centroids.push(points[far].clone());
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(sq_distance(p, &centroids[centroids.len() - 1]));
        }
    }
    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (c, d) = nearest(p, centroids);
                total += d;
                c
            })
            .collect();
        (labels, total)
    };
    let (mut labels, wcss) = assign(&centroids);
    let mut history = vec![wcss];
    let dim = points[0].len();
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (next, wcss) = assign(&centroids);
        history.push(wcss);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(Clustering {
        labels,
        centroids,
        wcss_history: history,
    })
}

/// Clusters the indexed descriptors into `k` groups.
pub fn cluster_descriptors(index: &DescriptorIndex, k: usize, seed: u64) -> Result<Clustering> {
    let points: Vec<Vec<f64>> = index.descriptors().iter().map(|d| d.values().to_vec()).collect();
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty index".into()));
    }
    kmeans(&points, k, seed, KMEANS_MAX_ITER)
}

pub fn cluster_csv(index: &DescriptorIndex, c: &Clustering) -> String {
    let mut out = String::from("id,label\n");
    for (id, l) in index.ids().iter().zip(&c.labels) {
        out.push_str(&format!("{id},{l}\n"));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

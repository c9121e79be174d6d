//! Adaptive per-point geometric features.
//!
//! Every point gets a neighborhood made of itself plus its `k` nearest other
//! points, with `k` picked from a grid so the eigen-entropy of the local
//! structure tensor is minimal. Ten descriptors of that neighborhood form the
//! point's feature vector.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::spatial::{KdTree, DEFAULT_LEAF_SIZE};

pub const NUM_FEATURES: usize = 10;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] =
    ["C", "O", "L", "A", "D", "S2D", "L2D", "V", "dZmax", "sZvar"];

/// Eigenvalues below zero by at most this much are rounding noise.
const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-12;
const DENSITY_VOLUME_FLOOR: f64 = 1e-12;

/// Eigenvalues of a 3×3 covariance, `l1 >= l2 >= l3 >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenTriple {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl EigenTriple {
    pub fn sum(&self) -> f64 {
        self.l1 + self.l2 + self.l3
    }

    pub fn product(&self) -> f64 {
        self.l1 * self.l2 * self.l3
    }

    /// Linearity, planarity and scattering; they sum to one.
    pub fn dimensionality(&self) -> Option<(f64, f64, f64)> {
        (self.l1 > 0.0).then(|| {
            (
                (self.l1 - self.l2) / self.l1,
                (self.l2 - self.l3) / self.l1,
                self.l3 / self.l1,
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveNeighborhoodConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub k_step: usize,
}

impl Default for AdaptiveNeighborhoodConfig {
    fn default() -> Self {
        Self {
            k_min: 10,
            k_max: 100,
            k_step: 10,
        }
    }
}

impl AdaptiveNeighborhoodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min < 3 || self.k_min > self.k_max || self.k_step == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid neighborhood grid k_min={} k_max={} k_step={}",
                self.k_min, self.k_max, self.k_step
            )));
        }
        Ok(())
    }

    pub fn candidates(&self) -> impl Iterator<Item = usize> {
        (self.k_min..=self.k_max).step_by(self.k_step.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalFeatureVector {
    pub change_of_curvature: f64,
    pub omnivariance: f64,
    pub linearity: f64,
    pub eigen_entropy: f64,
    pub density: f64,
    pub scattering_2d: f64,
    pub linearity_2d: f64,
    pub verticality: f64,
    pub max_height_diff: f64,
    pub height_variance: f64,
}

impl LocalFeatureVector {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.change_of_curvature,
            self.omnivariance,
            self.linearity,
            self.eigen_entropy,
            self.density,
            self.scattering_2d,
            self.linearity_2d,
            self.verticality,
            self.max_height_diff,
            self.height_variance,
        ]
    }
}

/// Per-point features together with the neighborhood size chosen for each.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatures {
    pub rows: Vec<LocalFeatureVector>,
    pub k_opt: Vec<usize>,
}

impl LocalFeatures {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row-major `N × 10` matrix.
    pub fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.to_array()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index");
        for name in FEATURE_NAMES {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in r.to_array() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as the columns of the second value.
pub fn symmetric_eigen<const N: usize>(m: [[f64; N]; N]) -> ([f64; N], [[f64; N]; N]) {
    let mut a = m;
    let mut v = [[0.0; N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum();
    for _sweep in 0..64 {
        let off: f64 = (0..N)
            .flat_map(|p| ((p + 1)..N).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        if off <= 1e-40 * scale {
            break;
        }
        for p in 0..N {
            for q in (p + 1)..N {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..N {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: [usize; N] = std::array::from_fn(|i| i);
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.map(|i| a[i][i]);
    let mut vectors = [[0.0; N]; N];
    for (col, &src) in order.iter().enumerate() {
        for (r, row) in vectors.iter_mut().enumerate() {
            row[col] = v[r][src];
        }
    }
    (values, vectors)
}

/// Coordinates relative to the first point, so coincident points cancel exactly.
fn shifted(points: &[Point3]) -> Vec<[f64; 3]> {
    let o = points[0];
    points
        .iter()
        .map(|p| [p.x - o.x, p.y - o.y, p.z - o.z])
        .collect()
}

fn covariance<const D: usize>(rows: &[[f64; 3]], axes: [usize; D]) -> [[f64; D]; D] {
    let n = rows.len() as f64;
    let mut mean = [0.0; D];
    for r in rows {
        for (m, &a) in mean.iter_mut().zip(&axes) {
            *m += r[a];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut c = [[0.0; D]; D];
    for r in rows {
        let d: [f64; D] = std::array::from_fn(|k| r[axes[k]] - mean[k]);
        for i in 0..D {
            for j in i..D {
                c[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..D {
        for j in i..D {
            c[i][j] /= n;
            c[j][i] = c[i][j];
        }
    }
    c
}

fn clamp_eigen(v: f64) -> f64 {
    if v < 0.0 && v >= -NEGATIVE_EIGEN_TOLERANCE {
        0.0
    } else {
        v.max(0.0)
    }
}

fn eigen_of(points: &[Point3]) -> (EigenTriple, [[f64; 3]; 3]) {
    let (vals, vecs) = symmetric_eigen(covariance(&shifted(points), [0, 1, 2]));
    let e = EigenTriple {
        l1: clamp_eigen(vals[0]),
        l2: clamp_eigen(vals[1]),
        l3: clamp_eigen(vals[2]),
    };
    (e, vecs)
}

/// Eigenvalues of the biased covariance of `neighborhood`.
pub fn covariance_eigen(neighborhood: &[Point3]) -> Result<EigenTriple> {
    if neighborhood.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 3 points, got {}",
            neighborhood.len()
        )));
    }
    Ok(eigen_of(neighborhood).0)
}

fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Shannon entropy of the linearity / planarity / scattering split.
pub fn shannon_entropy(e: &EigenTriple) -> Result<f64> {
    let (l, p, s) = e.dimensionality().ok_or_else(|| {
        Error::InvalidArgument("entropy undefined for a zero-extent neighborhood".into())
    })?;
    Ok((-xlnx(l) - xlnx(p) - xlnx(s)).max(0.0))
}

/// Shared kNN state for one cloud.
struct Neighborhoods<'a> {
    cloud: &'a PointCloud,
    tree: &'a KdTree,
    cfg: AdaptiveNeighborhoodConfig,
}

impl Neighborhoods<'_> {
    /// The point itself followed by its `k_max` nearest others.
    fn ordered(&self, i: usize) -> Result<Vec<Point3>> {
        let q = self.cloud.points[i].to_array();
        let nn = self.tree.knn(&q, self.cfg.k_max, Some(i))?;
        let mut pts = Vec::with_capacity(nn.len() + 1);
        pts.push(self.cloud.points[i]);
        pts.extend(nn.indices.iter().map(|&j| self.cloud.points[j]));
        Ok(pts)
    }

    fn optimal_k(&self, i: usize, ordered: &[Point3]) -> Result<usize> {
        let mut best: Option<(f64, usize)> = None;
        for k in self.cfg.candidates() {
            let (e, _) = eigen_of(&ordered[..=k]);
            let Ok(entropy) = shannon_entropy(&e) else {
                continue;
            };
            if best.is_none_or(|(b, _)| entropy < b) {
                best = Some((entropy, k));
            }
        }
        best.map(|(_, k)| k)
            .ok_or(Error::DegenerateNeighborhood { index: i })
    }
}

fn check_inputs(cloud: &PointCloud, tree: &KdTree, cfg: &AdaptiveNeighborhoodConfig) -> Result<()> {
    cfg.validate()?;
    if cloud.len() <= cfg.k_max {
        return Err(Error::InvalidArgument(format!(
            "cloud of {} points cannot supply {} neighbors",
            cloud.len(),
            cfg.k_max
        )));
    }
    if tree.len() != cloud.len() || tree.dim() != 3 {
        return Err(Error::Shape("kd-tree was not built over this cloud".into()));
    }
    Ok(())
}

/// Entropy-minimizing neighborhood size for one point.
pub fn optimal_k(
    point_index: usize,
    tree: &KdTree,
    cloud: &PointCloud,
    cfg: &AdaptiveNeighborhoodConfig,
) -> Result<usize> {
    check_inputs(cloud, tree, cfg)?;
    if point_index >= cloud.len() {
        return Err(Error::InvalidArgument(format!("no point {point_index}")));
    }
    let nb = Neighborhoods {
        cloud,
        tree,
        cfg: *cfg,
    };
    nb.optimal_k(point_index, &nb.ordered(point_index)?)
}

/// The ten descriptors of one neighborhood (query point first).
pub fn neighborhood_features(neighborhood: &[Point3], k_opt: usize) -> Result<LocalFeatureVector> {
    if neighborhood.len() < 3 {
        return Err(Error::InvalidArgument("neighborhood too small".into()));
    }
    let (e, vecs) = eigen_of(neighborhood);
    if e.l1 <= 0.0 {
        return Err(Error::InvalidArgument("zero-extent neighborhood".into()));
    }
    let sum = e.sum();
    let product = e.product();
    let norm = [e.l1 / sum, e.l2 / sum, e.l3 / sum];

    let rows = shifted(neighborhood);
    let (l2d, _) = symmetric_eigen(covariance(&rows, [0, 1]));
    let (a2, b2) = (clamp_eigen(l2d[0]), clamp_eigen(l2d[1]));

    let n = rows.len() as f64;
    let zs = rows.iter().map(|r| r[2]);
    let z_max = zs.clone().fold(f64::NEG_INFINITY, f64::max);
    let z_min = zs.clone().fold(f64::INFINITY, f64::min);
    let z_mean = zs.clone().sum::<f64>() / n;
    let z_var = zs.map(|z| (z - z_mean) * (z - z_mean)).sum::<f64>() / n;

    Ok(LocalFeatureVector {
        change_of_curvature: e.l3 / sum,
        omnivariance: product.cbrt() / sum,
        linearity: (e.l1 - e.l2) / e.l1,
        eigen_entropy: -norm.iter().map(|&x| xlnx(x)).sum::<f64>(),
        density: k_opt as f64 / (4.0 / 3.0 * product.max(DENSITY_VOLUME_FLOOR)),
        scattering_2d: a2 + b2,
        linearity_2d: if a2 > 0.0 { b2 / a2 } else { 0.0 },
        verticality: vecs[2][2].abs(),
        max_height_diff: z_max - z_min,
        height_variance: z_var,
    })
}

/// Features for every point, evaluated in parallel with order-stable output.
pub fn compute_local_features(
    cloud: &PointCloud,
    cfg: &AdaptiveNeighborhoodConfig,
) -> Result<LocalFeatures> {
    let tree = KdTree::build(&cloud.coords(), DEFAULT_LEAF_SIZE)?;
    check_inputs(cloud, &tree, cfg)?;
    let nb = Neighborhoods {
        cloud,
        tree: &tree,
        cfg: *cfg,
    };
    let per_point: Vec<(LocalFeatureVector, usize)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let ordered = nb.ordered(i)?;
            let k = nb.optimal_k(i, &ordered)?;
            let f = neighborhood_features(&ordered[..=k], k)
                .map_err(|_| Error::DegenerateNeighborhood { index: i })?;
            Ok((f, k))
        })
        .collect::<Result<_>>()?;
    let (rows, k_opt) = per_point.into_iter().unzip();
    Ok(LocalFeatures { rows, k_opt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::generate_synthetic_place;

    fn pts(v: &[[f64; 3]]) -> Vec<Point3> {
        v.iter().copied().map(Point3::from).collect()
    }

    #[test]
    fn eigen_collinear_and_square() {
        let e = covariance_eigen(&pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])).unwrap();
        assert!((e.l1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((e.l2, e.l3), (0.0, 0.0));

        let sq = [[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]];
        let e = covariance_eigen(&pts(&sq)).unwrap();
        assert_eq!((e.l1, e.l2, e.l3), (1.0, 1.0, 0.0));

        assert!(covariance_eigen(&pts(&sq[..2])).is_err());
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let m = [[4.0, 1.0, -2.0], [1.0, 3.0, 0.5], [-2.0, 0.5, 1.0]];
        let (vals, vecs) = symmetric_eigen(m);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for r in 0..3 {
            for c in 0..3 {
                let rebuilt: f64 = (0..3).map(|k| vecs[r][k] * vals[k] * vecs[c][k]).sum();
                assert!((rebuilt - m[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let line = EigenTriple { l1: 2.0 / 3.0, l2: 0.0, l3: 0.0 };
        assert_eq!(shannon_entropy(&line).unwrap(), 0.0);
        let plane = EigenTriple { l1: 1.0, l2: 1.0, l3: 0.0 };
        assert_eq!(shannon_entropy(&plane).unwrap(), 0.0);
        // -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 1.5 ln 2
        let mixed = EigenTriple { l1: 4.0, l2: 2.0, l3: 1.0 };
        let h = shannon_entropy(&mixed).unwrap();
        assert!((h - 1.039_720_770_839_917_9).abs() < 1e-12, "{h}");
        assert!(shannon_entropy(&EigenTriple { l1: 0.0, l2: 0.0, l3: 0.0 }).is_err());
    }

    #[test]
    fn horizontal_plane_features() {
        let mut grid = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                grid.push([i as f64 * 0.1, j as f64 * 0.1, 0.25]);
            }
        }
        let f = neighborhood_features(&pts(&grid), 35).unwrap();
        assert!(f.linearity < 1e-9, "{}", f.linearity);
        assert_eq!(f.verticality, 1.0);
        assert_eq!(f.max_height_diff, 0.0);
        assert_eq!(f.height_variance, 0.0);
        assert_eq!(f.change_of_curvature, 0.0);
    }

    #[test]
    fn vertical_line_features() {
        let line: Vec<[f64; 3]> = (0..12).map(|i| [0.3, -0.2, i as f64 * 0.05]).collect();
        let f = neighborhood_features(&pts(&line), 11).unwrap();
        assert_eq!(f.linearity, 1.0);
        assert_eq!(f.verticality, 0.0);
        assert_eq!(f.linearity_2d, 0.0);
        assert_eq!(f.scattering_2d, 0.0);
        assert!((f.max_height_diff - 0.55).abs() < 1e-12);
    }

    #[test]
    fn collinear_cloud_picks_k_min() {
        let c = PointCloud::new(pts(&(0..40).map(|i| [i as f64 * 0.02 - 0.4, 0.0, 0.0]).collect::<Vec<_>>()))
            .unwrap();
        let cfg = AdaptiveNeighborhoodConfig { k_min: 5, k_max: 30, k_step: 5 };
        let tree = KdTree::build(&c.coords(), 4).unwrap();
        for i in [0, 17, 39] {
            assert_eq!(optimal_k(i, &tree, &c, &cfg).unwrap(), 5);
        }
    }

    #[test]
    fn fully_degenerate_cloud_errors() {
        let c = PointCloud::new(vec![Point3::new(0.1, 0.1, 0.1); 20]).unwrap();
        let cfg = AdaptiveNeighborhoodConfig { k_min: 3, k_max: 9, k_step: 3 };
        let tree = KdTree::build(&c.coords(), 4).unwrap();
        assert!(matches!(
            optimal_k(4, &tree, &c, &cfg),
            Err(Error::DegenerateNeighborhood { index: 4 })
        ));
        assert!(matches!(
            compute_local_features(&c, &cfg),
            Err(Error::DegenerateNeighborhood { .. })
        ));
    }

    #[test]
    fn config_validation() {
        for (a, b, s) in [(2, 10, 1), (10, 5, 1), (5, 10, 0)] {
            assert!(AdaptiveNeighborhoodConfig { k_min: a, k_max: b, k_step: s }.validate().is_err());
        }
        let c = generate_synthetic_place(1, 1, 64, 0.0, 0.0).unwrap();
        assert!(compute_local_features(&c, &AdaptiveNeighborhoodConfig::default()).is_err());
    }

    #[test]
    fn ranges_on_synthetic_scene() {
        let c = generate_synthetic_place(21, 2, 256, 0.0, 0.0).unwrap();
        let cfg = AdaptiveNeighborhoodConfig::default();
        let f = compute_local_features(&c, &cfg).unwrap();
        assert_eq!(f.len(), 256);
        for (r, k) in f.rows.iter().zip(&f.k_opt) {
            assert!((10..=100).contains(k) && k % 10 == 0);
            let a = r.to_array();
            assert!(a.iter().all(|v| v.is_finite()));
            assert!((0.0..=1.0 / 3.0 + 1e-15).contains(&r.change_of_curvature));
            assert!((0.0..=1.0).contains(&r.linearity));
            assert!((0.0..=1.0).contains(&r.linearity_2d));
            assert!((0.0..=1.0).contains(&r.verticality));
            assert!((0.0..=3f64.ln() + 1e-12).contains(&r.eigen_entropy));
            assert!(r.max_height_diff >= 0.0 && r.height_variance >= 0.0);
        }
    }

    #[test]
    fn permutation_keeps_features_with_their_points() {
        let c = generate_synthetic_place(8, 1, 200, 0.0, 0.0).unwrap();
        let cfg = AdaptiveNeighborhoodConfig { k_min: 10, k_max: 40, k_step: 10 };
        let base = compute_local_features(&c, &cfg).unwrap();
        let perm: Vec<usize> = (0..200).map(|i| (i * 73 + 11) % 200).collect();
        let shuffled = PointCloud {
            points: perm.iter().map(|&i| c.points[i]).collect(),
            normalized: true,
        };
        let f = compute_local_features(&shuffled, &cfg).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(f.k_opt[new], base.k_opt[old]);
            for (a, b) in f.rows[new].to_array().iter().zip(base.rows[old].to_array()) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn csv_layout() {
        let c = generate_synthetic_place(2, 2, 128, 0.0, 0.0).unwrap();
        let cfg = AdaptiveNeighborhoodConfig { k_min: 10, k_max: 30, k_step: 10 };
        let csv = compute_local_features(&c, &cfg).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("index,C,O,L,A,D,S2D,L2D,V,dZmax,sZvar"));
        assert_eq!(lines.count(), 128);
    }
}

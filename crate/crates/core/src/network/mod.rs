//! The place-description network: input transform, feature network, graph
//! aggregation in feature and Cartesian space, per-point lifting and a NetVLAD
//! head producing a unit-norm global descriptor.
//!
//! Point order never matters: clouds are sorted into a canonical order before
//! anything else runs, so permuted inputs give bitwise-identical descriptors.

mod config;

pub use config::{AggregationVariant, NetworkConfig, RelationVariant};

use std::sync::Arc;

use rayon::prelude::*;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{kmeans, KMEANS_MAX_ITER};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::features::{compute_local_features, NUM_FEATURES};
use crate::spatial::{KdTree, DEFAULT_LEAF_SIZE};
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, Var};

/// Unit-norm place signature.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor(Vec<f64>);

impl GlobalDescriptor {
    /// Normalizes `values`; fails on the zero vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NonFinite("descriptor has no direction".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit-norm.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "descriptor norm {norm} is not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn sq_distance(&self, other: &GlobalDescriptor) -> f64 {
        sq_distance(&self.0, &other.0)
    }

    pub fn distance(&self, other: &GlobalDescriptor) -> f64 {
        self.sq_distance(other).sqrt()
    }
}

pub(crate) fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const DENSITY_COLUMN: usize = 4;
const BIAS_INIT: f64 = 0.01;
const VLAD_INIT_SAMPLES: usize = 20_000;
const SUBSET_SEED: u64 = 0x5eed;

/// Network inputs for one cloud, in canonical point order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    /// `N × 3` normalized coordinates.
    pub coords: Tensor,
    /// `N × 10` local features, density as `ln(1 + D)` (zeros when disabled).
    pub features: Tensor,
}

/// Local features as the network sees them before standardization:
/// density spans many decades, so it enters as `ln(1 + D)`.
fn network_features(raw: &[f64]) -> Vec<f64> {
    let mut flat = raw.to_vec();
    for row in flat.chunks_mut(NUM_FEATURES) {
        row[DENSITY_COLUMN] = row[DENSITY_COLUMN].ln_1p();
    }
    flat
}

/// Root mean per-axis variance of all coordinates.
fn coordinate_spread(clouds: &[PointCloud]) -> f64 {
    let n: usize = clouds.iter().map(PointCloud::len).sum();
    let mut mean = [0.0; 3];
    for p in clouds.iter().flat_map(|c| &c.points) {
        mean[0] += p.x / n as f64;
        mean[1] += p.y / n as f64;
        mean[2] += p.z / n as f64;
    }
    let mut var = 0.0;
    for p in clouds.iter().flat_map(|c| &c.points) {
        var += (p.x - mean[0]).powi(2) + (p.y - mean[1]).powi(2) + (p.z - mean[2]).powi(2);
    }
    (var / (3 * n) as f64).sqrt()
}

/// Sets the feature standardization so every feature has zero mean over all
/// points of `clouds` and the same spread as the coordinates, which keeps
/// either input from swamping the other. Constant features keep scale 1.
pub fn fit_feature_standardization(cfg: &mut NetworkConfig, clouds: &[PointCloud]) -> Result<()> {
    let rows = clouds
        .par_iter()
        .map(|c| compute_local_features(c, &cfg.neighborhood).map(|f| network_features(&f.to_flat())))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = rows.iter().map(|r| r.len() / NUM_FEATURES).sum();
    if total == 0 {
        return Err(Error::EmptyCloud);
    }
    let mut mean = [0.0; NUM_FEATURES];
    for r in &rows {
        for row in r.chunks(NUM_FEATURES) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut var = [0.0; NUM_FEATURES];
    for r in &rows {
        for row in r.chunks(NUM_FEATURES) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let coord_sd = coordinate_spread(clouds);
    cfg.feature_shift = mean.to_vec();
    cfg.feature_scale = var
        .iter()
        .map(|s| {
            let sd = (s / total as f64).sqrt();
            if sd > 1e-12 { coord_sd / sd } else { 1.0 }
        })
        .collect();
    Ok(())
}

/// Sorts points lexicographically and computes their local features.
/// Denser clouds keep their features from the full cloud, then a fixed
/// seeded subset of `n_points` points becomes the network input.
pub fn prepare_cloud(cloud: &PointCloud, cfg: &NetworkConfig) -> Result<PreparedCloud> {
    if !cloud.normalized {
        return Err(Error::InvalidArgument("network input must be normalized".into()));
    }
    if cloud.len() < cfg.n_points {
        return Err(Error::InvalidArgument(format!(
            "network expects {} points, cloud has {}",
            cfg.n_points,
            cloud.len()
        )));
    }
    let mut canonical = cloud.clone();
    canonical.points.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    let feats = if cfg.use_local_features {
        let f = compute_local_features(&canonical, &cfg.neighborhood).map_err(|e| e.in_stage("local features"))?;
        Some(network_features(&f.to_flat()))
    } else {
        None
    };
    // Sorted indices into the sorted cloud keep the subset in canonical order.
    let keep: Vec<usize> = if canonical.len() == cfg.n_points {
        (0..canonical.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(SUBSET_SEED);
        let mut idx = sample(&mut rng, canonical.len(), cfg.n_points).into_vec();
        idx.sort_unstable();
        idx
    };
    let coords = Tensor::from_rows(&keep.iter().map(|&i| canonical.points[i].to_array()).collect::<Vec<_>>())?;
    let features = match feats {
        Some(flat) => {
            let mut out = Vec::with_capacity(keep.len() * NUM_FEATURES);
            for &i in &keep {
                let row = &flat[i * NUM_FEATURES..(i + 1) * NUM_FEATURES];
                out.extend(row.iter().enumerate().map(|(c, v)| (v - cfg.feature_shift[c]) * cfg.feature_scale[c]));
            }
            Tensor::matrix(keep.len(), NUM_FEATURES, out)?
        }
        None => Tensor::zeros(&[keep.len(), NUM_FEATURES]),
    };
    Ok(PreparedCloud { coords, features })
}

/// For every row, the indices of its `k` nearest other rows, row-major `N·k`.
pub fn knn_graph(rows: &Tensor, k: usize) -> Result<Arc<Vec<usize>>> {
    let n = rows.rows();
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "graph needs k < N, got k={k} with N={n}"
        )));
    }
    let pts: Vec<&[f64]> = (0..n).map(|i| rows.row(i)).collect();
    let tree = KdTree::build(&pts, DEFAULT_LEAF_SIZE)?;
    let mut out = Vec::with_capacity(n * k);
    for (i, p) in pts.iter().enumerate() {
        out.extend(tree.knn(p, k, Some(i))?.indices);
    }
    Ok(Arc::new(out))
}

fn repeat_index(n: usize, k: usize) -> Arc<Vec<usize>> {
    Arc::new((0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect())
}

/// Outputs of the feature network.
#[derive(Debug, Clone)]
pub struct FeatureNetOutput {
    /// Per-point features passed on to aggregation.
    pub features: Var,
    /// Features whose kNN differences form the relation vectors.
    pub relation_source: Var,
    /// Feature-space neighbors over `relation_source`, `N·Kf` row-major.
    pub neighbors: Arc<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct LpdNet {
    cfg: NetworkConfig,
}

impl LpdNet {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Glorot weights and a small positive bias, so a point whose inputs
    /// all fall below zero still produces a nonzero row.
    fn insert_dense(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        store.insert_glorot(&format!("{prefix}.w"), fan_in, fan_out)?;
        store.insert(&format!("{prefix}.b"), Tensor::matrix(1, fan_out, vec![BIAS_INIT; fan_out])?)
    }

    fn insert_mlp(store: &mut ParamStore, prefix: &str, mut fan_in: usize, widths: &[usize]) -> Result<usize> {
        for (i, &w) in widths.iter().enumerate() {
            Self::insert_dense(store, &format!("{prefix}.mlp{i}"), fan_in, w)?;
            fan_in = w;
        }
        Ok(fan_in)
    }

    fn insert_tnet(&self, store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
        let mut fan_in = Self::insert_mlp(store, prefix, dim, &self.cfg.tnet_mlp)?;
        for (i, &w) in self.cfg.tnet_fc.iter().enumerate() {
            Self::insert_dense(store, &format!("{prefix}.fc{i}"), fan_in, w)?;
            fan_in = w;
        }
        // Zero weights and an identity bias: the initial prediction is exactly I.
        store.insert_zeros(&format!("{prefix}.out.w"), &[fan_in, dim * dim])?;
        let eye = Tensor::identity(dim).reshape(vec![1, dim * dim])?;
        store.insert(&format!("{prefix}.out.b"), eye)
    }

    /// Freshly initialized parameters for this configuration.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.cfg;
        let mut s = ParamStore::new(seed);
        self.insert_tnet(&mut s, "tnet3", 3)?;
        let fw = Self::insert_mlp(&mut s, "fn", 3 + NUM_FEATURES, &c.feature_mlp)?;
        if c.relation != RelationVariant::Original {
            self.insert_tnet(&mut s, "tnetf", fw)?;
        }
        let gw = c.graph_width();
        let mut width = fw;
        for it in 0..c.feature_iterations {
            width = Self::insert_mlp(&mut s, &format!("graph.f{it}"), 2 * width, &c.graph_mlp)?;
        }
        let cart_in = match c.aggregation {
            AggregationVariant::SeriesFc => gw,
            _ => fw,
        };
        let mut agg = Self::insert_mlp(&mut s, "graph.c", 2 * cart_in, &c.graph_mlp)?;
        match c.aggregation {
            AggregationVariant::ParallelConcat => {
                Self::insert_dense(&mut s, "merge", 2 * gw, c.merge_width)?;
                agg = c.merge_width;
            }
            AggregationVariant::ParallelMax | AggregationVariant::SeriesFc => {}
        }
        let lw = Self::insert_mlp(&mut s, "lift", agg, &c.fc)?;
        s.insert_glorot("vlad.assign.w", lw, c.vlad_clusters)?;
        s.insert_zeros("vlad.assign.b", &[1, c.vlad_clusters])?;
        s.insert_glorot("vlad.centers", c.vlad_clusters, lw)?;
        s.insert_glorot("vlad.proj.w", c.vlad_clusters * lw, c.output_dim)?;
        Ok(s)
    }

    fn mlp(&self, g: &mut Graph, mut x: Var, prefix: &str, layers: usize) -> Result<Var> {
        for i in 0..layers {
            x = g.dense(x, &format!("{prefix}.mlp{i}"), true)?;
        }
        Ok(x)
    }

    /// Predicts a `dim × dim` matrix from a point set.
    fn transform_net(&self, g: &mut Graph, x: Var, prefix: &str, dim: usize) -> Result<Var> {
        let h = self.mlp(g, x, prefix, self.cfg.tnet_mlp.len())?;
        let mut h = g.maxpool_points(h)?;
        for i in 0..self.cfg.tnet_fc.len() {
            h = g.dense(h, &format!("{prefix}.fc{i}"), true)?;
        }
        let m = g.dense(h, &format!("{prefix}.out"), false)?;
        g.reshape(m, vec![dim, dim])
    }

    /// Right-multiplies the coordinates by a learned 3×3 matrix.
    pub fn input_transform(&self, g: &mut Graph, coords: Var) -> Result<Var> {
        let m = self.transform_net(g, coords, "tnet3", 3)?;
        g.matmul(coords, m)
    }

    pub fn feature_network(&self, g: &mut Graph, coords: Var, local: Var) -> Result<FeatureNetOutput> {
        let x = g.concat(&[coords, local])?;
        let f = self.mlp(g, x, "fn", self.cfg.feature_mlp.len())?;
        let transformed = match self.cfg.relation {
            RelationVariant::Original => f,
            RelationVariant::Series | RelationVariant::Parallel => {
                let m = self.transform_net(g, f, "tnetf", self.cfg.feature_width())?;
                g.matmul(f, m)?
            }
        };
        let (features, relation_source) = match self.cfg.relation {
            RelationVariant::Original => (f, f),
            RelationVariant::Series => (transformed, transformed),
            RelationVariant::Parallel => (f, transformed),
        };
        let neighbors = knn_graph(g.value(relation_source), self.cfg.kf)?;
        Ok(FeatureNetOutput {
            features,
            relation_source,
            neighbors,
        })
    }

    /// Relation vectors `r_i − r_j` for every point and feature-space neighbor,
    /// shaped `N × Kf × C`.
    pub fn relations(&self, g: &Graph, out: &FeatureNetOutput) -> Tensor {
        let src = g.value(out.relation_source);
        let (n, c, k) = (src.rows(), src.cols(), self.cfg.kf);
        let mut data = Vec::with_capacity(n * k * c);
        for i in 0..n {
            for &j in &out.neighbors[i * k..(i + 1) * k] {
                data.extend(src.row(i).iter().zip(src.row(j)).map(|(a, b)| a - b));
            }
        }
        Tensor::new(vec![n, k, c], data).unwrap()
    }

    /// Edge convolution: `[center_i ; rel_i − rel_j]` through the edge MLP,
    /// max-pooled over the `k` neighbors of each point.
    pub fn graph_block(
        &self,
        g: &mut Graph,
        center: Var,
        relation: Var,
        neighbors: Arc<Vec<usize>>,
        prefix: &str,
    ) -> Result<Var> {
        let n = g.value(center).rows();
        if neighbors.is_empty() || neighbors.len() % n != 0 {
            return Err(Error::Shape(format!(
                "{} neighbor entries for {n} points",
                neighbors.len()
            )));
        }
        let k = neighbors.len() / n;
        let own = repeat_index(n, k);
        let centers = g.gather(center, own.clone())?;
        let rel_self = g.gather(relation, own)?;
        let rel_other = g.gather(relation, neighbors)?;
        let diff = g.sub(rel_self, rel_other)?;
        let edges = g.concat(&[centers, diff])?;
        let h = self.mlp(g, edges, prefix, self.cfg.graph_mlp.len())?;
        g.group_max(h, k)
    }

    fn feature_branch(&self, g: &mut Graph, fnet: &FeatureNetOutput) -> Result<Var> {
        let mut x = self.graph_block(
            g,
            fnet.features,
            fnet.relation_source,
            fnet.neighbors.clone(),
            "graph.f0",
        )?;
        for it in 1..self.cfg.feature_iterations {
            // Dynamic graph: neighbors recomputed in the current feature space.
            let nb = knn_graph(g.value(x), self.cfg.kf)?;
            x = self.graph_block(g, x, x, nb, &format!("graph.f{it}"))?;
        }
        Ok(x)
    }

    pub fn aggregate(&self, g: &mut Graph, fnet: &FeatureNetOutput, cartesian: Arc<Vec<usize>>) -> Result<Var> {
        let fb = self.feature_branch(g, fnet)?;
        match self.cfg.aggregation {
            AggregationVariant::SeriesFc => self.graph_block(g, fb, fb, cartesian, "graph.c"),
            AggregationVariant::ParallelMax => {
                let cb = self.graph_block(g, fnet.features, fnet.features, cartesian, "graph.c")?;
                g.maximum(fb, cb)
            }
            AggregationVariant::ParallelConcat => {
                let cb = self.graph_block(g, fnet.features, fnet.features, cartesian, "graph.c")?;
                let both = g.concat(&[fb, cb])?;
                g.dense(both, "merge", true)
            }
        }
    }

    /// Soft-assignment VLAD pooling, intra-normalization, projection to the
    /// output size and final L2 normalization. Returns a `1 × D` row.
    pub fn netvlad(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let logits = g.dense(x, "vlad.assign", false)?;
        let assign = g.softmax_rows(logits)?;
        let centers = g.param("vlad.centers")?;
        let v = g.vlad_residual(assign, x, centers)?;
        let v = g.l2_normalize_rows(v)?;
        let (k, f) = (g.value(v).rows(), g.value(v).cols());
        let flat = g.reshape(v, vec![1, k * f])?;
        let proj = g.param("vlad.proj.w")?;
        let d = g.matmul(flat, proj)?;
        g.l2_normalize_rows(d)
    }

    /// Everything up to the pooling input: unit-norm per-point features.
    pub fn point_features(&self, g: &mut Graph, input: &PreparedCloud) -> Result<Var> {
        let coords = g.input(input.coords.clone())?;
        let local = g.input(input.features.clone())?;
        let xyz = self
            .input_transform(g, coords)
            .map_err(|e| e.in_stage("input transform"))?;
        let fnet = self
            .feature_network(g, xyz, local)
            .map_err(|e| e.in_stage("feature network"))?;
        let cartesian = knn_graph(&input.coords, self.cfg.kc)?;
        let mut h = self
            .aggregate(g, &fnet, cartesian)
            .map_err(|e| e.in_stage("aggregation"))?;
        for i in 0..self.cfg.fc.len() {
            // The last lift feeds the L2 normalization directly.
            let relu = i + 1 < self.cfg.fc.len();
            h = g
                .dense(h, &format!("lift.mlp{i}"), relu)
                .map_err(|e| e.in_stage("lift"))?;
        }
        g.l2_normalize_rows(h)
    }

    /// Full forward pass; returns the `1 × D` descriptor node.
    pub fn forward(&self, g: &mut Graph, input: &PreparedCloud) -> Result<Var> {
        let h = self.point_features(g, input)?;
        self.netvlad(g, h).map_err(|e| e.in_stage("netvlad"))
    }

    /// Re-initializes the NetVLAD centers and soft assignment from k-means
    /// over per-point features of `clouds`: centers are the centroids, and the
    /// assignment logits become `−α‖x − c_k‖²` up to a per-point constant,
    /// with `α` chosen so the nearest center outweighs the second by 100×
    /// on average.
    pub fn init_vlad_from_data(&self, params: &mut ParamStore, clouds: &[PreparedCloud], seed: u64) -> Result<()> {
        let k = self.cfg.vlad_clusters;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for c in clouds {
            let mut g = Graph::new(params);
            let x = self.point_features(&mut g, c)?;
            let t = g.value(x);
            rows.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        if rows.len() > VLAD_INIT_SAMPLES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = rand::seq::index::sample(&mut rng, rows.len(), VLAD_INIT_SAMPLES).into_vec();
            keep.sort_unstable();
            rows = keep.into_iter().map(|i| std::mem::take(&mut rows[i])).collect();
        }
        let clusters = kmeans(&rows, k, seed, KMEANS_MAX_ITER)?;
        let c = &clusters.centroids;
        let mut gap = 0.0;
        if k > 1 {
            for r in &rows {
                let mut d: Vec<f64> = c.iter().map(|cc| sq_distance(r, cc)).collect();
                d.sort_by(f64::total_cmp);
                gap += d[1] - d[0];
            }
            gap /= rows.len() as f64;
        }
        let alpha = if gap > 0.0 { 100f64.ln() / gap } else { 1.0 };
        let f = c[0].len();
        let mut w = vec![0.0; f * k];
        for (j, cc) in c.iter().enumerate() {
            for (i, v) in cc.iter().enumerate() {
                w[i * k + j] = 2.0 * alpha * v;
            }
        }
        let b = c.iter().map(|cc| -alpha * cc.iter().map(|v| v * v).sum::<f64>()).collect();
        *params.get_mut("vlad.centers")? = Tensor::matrix(k, f, c.concat())?;
        *params.get_mut("vlad.assign.w")? = Tensor::matrix(f, k, w)?;
        *params.get_mut("vlad.assign.b")? = Tensor::matrix(1, k, b)?;
        Ok(())
    }

    pub fn describe_prepared(&self, params: &ParamStore, input: &PreparedCloud) -> Result<GlobalDescriptor> {
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, input)?;
        Ok(GlobalDescriptor(g.value(out).data().to_vec()))
    }

    /// Descriptor for a raw normalized cloud.
    pub fn forward_full(&self, params: &ParamStore, cloud: &PointCloud) -> Result<GlobalDescriptor> {
        let input = prepare_cloud(cloud, &self.cfg)?;
        self.describe_prepared(params, &input)
    }

    /// Forward then backward with `d_descriptor` as the upstream gradient.
    pub fn backward_full(
        &self,
        params: &ParamStore,
        input: &PreparedCloud,
        d_descriptor: &[f64],
    ) -> Result<(GlobalDescriptor, Gradients)> {
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, input)?;
        let desc = GlobalDescriptor(g.value(out).data().to_vec());
        let seed = Tensor::row_vector(d_descriptor.to_vec());
        Ok((desc, g.backward(out, &seed)?))
    }
}

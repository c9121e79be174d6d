//! Quadruplet sampling, the lazy quadruplet loss and the optimization loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::{downsample_random, generate_observation, DatasetManifest, PointCloud, SceneOptions};
use crate::error::{Error, Result};
use crate::features::AdaptiveNeighborhoodConfig;
use crate::network::{prepare_cloud, LpdNet, NetworkConfig, PreparedCloud};
use crate::tensor::{
    finite_difference_check, save_checkpoint, GradCheckOptions, GradCheckReport, Gradients, Graph, ParamStore,
    Tensor,
};

/// Hinge margins of the lazy quadruplet loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss margins must be positive, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Loss value with its subgradient with respect to each input distance.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
    pub d_other: Vec<f64>,
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `max_j [α + min(d_pos) − d_neg_j]_+ + max_j [β + min(d_pos) − d_other_j]_+`
/// together with its subgradient. Ties go to the first index.
pub fn lazy_quadruplet_loss_grad(
    d_pos: &[f64],
    d_neg: &[f64],
    d_other: &[f64],
    cfg: &LossConfig,
) -> Result<LossGrad> {
    if d_pos.is_empty() || d_neg.is_empty() || d_other.is_empty() {
        return Err(Error::InvalidArgument("loss needs non-empty distance lists".into()));
    }
    if d_pos.iter().chain(d_neg).chain(d_other).any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::NonFinite("loss distances must be finite and >= 0".into()));
    }
    let p = argmin(d_pos);
    let best = d_pos[p];
    let hinge_neg: Vec<f64> = d_neg.iter().map(|d| cfg.alpha + best - d).collect();
    let hinge_other: Vec<f64> = d_other.iter().map(|d| cfg.beta + best - d).collect();
    let (n, o) = (argmax(&hinge_neg), argmax(&hinge_other));
    let mut g = LossGrad {
        loss: hinge_neg[n].max(0.0) + hinge_other[o].max(0.0),
        d_pos: vec![0.0; d_pos.len()],
        d_neg: vec![0.0; d_neg.len()],
        d_other: vec![0.0; d_other.len()],
    };
    if hinge_neg[n] > 0.0 {
        g.d_pos[p] += 1.0;
        g.d_neg[n] -= 1.0;
    }
    if hinge_other[o] > 0.0 {
        g.d_pos[p] += 1.0;
        g.d_other[o] -= 1.0;
    }
    Ok(g)
}

pub fn lazy_quadruplet_loss(d_pos: &[f64], d_neg: &[f64], d_other: &[f64], cfg: &LossConfig) -> Result<f64> {
    lazy_quadruplet_loss_grad(d_pos, d_neg, d_other, cfg).map(|g| g.loss)
}

/// Indices into a [`CloudRegistry`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quadruplet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub other_negative: usize,
}

/// Which clouds show the same place.
#[derive(Debug, Clone, PartialEq)]
pub enum CloudRegistry {
    /// One place label per cloud; equal labels are positives.
    Places(Vec<u64>),
    /// Map positions; clouds within `radius` meters are positives.
    Positions { positions: Vec<[f64; 2]>, radius: f64 },
}

impl CloudRegistry {
    pub fn from_manifest(m: &DatasetManifest) -> Self {
        Self::Positions {
            positions: m.records.iter().map(|r| [r.northing, r.easting]).collect(),
            radius: m.positive_radius,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Places(p) => p.len(),
            Self::Positions { positions, .. } => positions.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when `i` and `j` are the same place (a cloud is its own place).
    pub fn same_place(&self, i: usize, j: usize) -> bool {
        match self {
            Self::Places(p) => p[i] == p[j],
            Self::Positions { positions, radius } => {
                let (a, b) = (positions[i], positions[j]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() <= *radius
            }
        }
    }

    /// Restricted to `clouds`, in the order given.
    pub fn subset(&self, clouds: &[usize]) -> Self {
        match self {
            Self::Places(p) => Self::Places(clouds.iter().map(|&i| p[i]).collect()),
            Self::Positions { positions, radius } => Self::Positions {
                positions: clouds.iter().map(|&i| positions[i]).collect(),
                radius: *radius,
            },
        }
    }
}

/// Sizes of each quadruplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadrupletShape {
    pub p_pos: usize,
    pub p_neg: usize,
}

impl Default for QuadrupletShape {
    fn default() -> Self {
        Self { p_pos: 2, p_neg: 18 }
    }
}

/// Builds one quadruplet for `anchor`, drawing only from `pool`.
pub fn sample_quadruplet_for(
    registry: &CloudRegistry,
    anchor: usize,
    pool: &[usize],
    shape: QuadrupletShape,
    rng: &mut ChaCha8Rng,
) -> Result<Quadruplet> {
    let positives: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&j| j != anchor && registry.same_place(anchor, j))
        .collect();
    if positives.len() < shape.p_pos {
        return Err(Error::Insufficient(format!(
            "insufficient observations: cloud {anchor} has {} positives, need {}",
            positives.len(),
            shape.p_pos
        )));
    }
    let positives: Vec<usize> = positives
        .choose_multiple(rng, shape.p_pos)
        .copied()
        .collect();

    let mut candidates: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&j| !registry.same_place(anchor, j))
        .collect();
    candidates.shuffle(rng);
    let mut negatives: Vec<usize> = Vec::with_capacity(shape.p_neg);
    for &c in &candidates {
        if negatives.len() == shape.p_neg {
            break;
        }
        if negatives.iter().all(|&n| !registry.same_place(n, c)) {
            negatives.push(c);
        }
    }
    if negatives.len() < shape.p_neg {
        return Err(Error::Insufficient(format!(
            "insufficient negatives: found {} distinct places, need {}",
            negatives.len(),
            shape.p_neg
        )));
    }
    let used: Vec<usize> = std::iter::once(anchor)
        .chain(positives.iter().copied())
        .chain(negatives.iter().copied())
        .collect();
    let others: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&c| used.iter().all(|&u| !registry.same_place(u, c)))
        .collect();
    let other_negative = *others.choose(rng).ok_or_else(|| {
        Error::Insufficient("insufficient places: no place left for the other negative".into())
    })?;
    Ok(Quadruplet {
        anchor,
        positives,
        negatives,
        other_negative,
    })
}

/// `batch` quadruplets with anchors drawn uniformly (with replacement) from
/// clouds that have enough positives.
pub fn sample_quadruplets(
    registry: &CloudRegistry,
    batch: usize,
    shape: QuadrupletShape,
    seed: u64,
) -> Result<Vec<Quadruplet>> {
    let n = registry.len();
    let pool: Vec<usize> = (0..n).collect();
    let anchors: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&a| (0..n).filter(|&j| j != a && registry.same_place(a, j)).count() >= shape.p_pos)
        .collect();
    if anchors.is_empty() {
        return Err(Error::Insufficient(format!(
            "insufficient places: no cloud has {} positives",
            shape.p_pos
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let a = anchors[rng.gen_range(0..anchors.len())];
            sample_quadruplet_for(registry, a, &pool, shape, &mut rng)
        })
        .collect()
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Places (synthetic) or clouds (manifest) per optimization step; every
    /// cloud in the step serves as an anchor once.
    pub places_per_batch: usize,
    pub shape: QuadrupletShape,
    pub loss: LossConfig,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Writes `epoch_{e}.ckpt` here after every epoch when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Parameters whose names start with any of these prefixes are not updated.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            places_per_batch: 25,
            shape: QuadrupletShape::default(),
            loss: LossConfig::default(),
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_dir: None,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} must be >= 0", self.lr)));
        }
        if self.epochs == 0 || self.places_per_batch == 0 {
            return Err(Error::InvalidArgument("epochs and places_per_batch must be >= 1".into()));
        }
        if self.shape.p_pos == 0 || self.shape.p_neg == 0 {
            return Err(Error::InvalidArgument("quadruplets need at least one positive and one negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidArgument("invalid optimizer constants".into()));
        }
        Ok(())
    }
}

/// Adaptive moment estimation over a [`ParamStore`]'s gradient buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    frozen: Vec<String>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            moments: Vec::new(),
            frozen: cfg.frozen.clone(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, v, _)| (vec![0.0; v.len()], vec![0.0; v.len()]))
                .collect();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((name, value, grad), (m, v)) in params.iter_mut().zip(&mut self.moments) {
            if self.frozen.iter().any(|f| name.starts_with(f.as_str())) {
                continue;
            }
            for (((p, g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                if update != 0.0 {
                    *p -= update;
                }
            }
        }
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

pub fn write_loss_trace(path: impl AsRef<Path>, trace: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,batch,loss\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.batch, r.loss));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean loss per epoch, in epoch order.
pub fn epoch_means(trace: &[LossRecord]) -> Vec<f64> {
    let epochs = trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = trace.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

/// Prepared network inputs with their place relations.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub registry: CloudRegistry,
    pub clouds: Vec<PreparedCloud>,
}

impl TrainingSet {
    pub fn new(registry: CloudRegistry, clouds: Vec<PreparedCloud>) -> Result<Self> {
        if registry.len() != clouds.len() {
            return Err(Error::InvalidArgument(format!(
                "{} registry entries for {} clouds",
                registry.len(),
                clouds.len()
            )));
        }
        Ok(Self { registry, clouds })
    }

    /// Prepares raw clouds in parallel; output order follows input order.
    pub fn prepare(registry: CloudRegistry, clouds: &[PointCloud], net: &LpdNet) -> Result<Self> {
        let prepared = clouds
            .par_iter()
            .map(|c| prepare_cloud(c, net.config()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(registry, prepared)
    }

    /// Groups of clouds forming one optimization step each. A trailing group
    /// smaller than `min_group` joins the one before it.
    fn batches(&self, per_batch: usize, min_group: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        fn chunk<T: Clone>(items: &[T], per_batch: usize, min_group: usize) -> Vec<Vec<T>> {
            let mut groups: Vec<Vec<T>> = items.chunks(per_batch).map(<[T]>::to_vec).collect();
            if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < min_group) {
                let tail = groups.pop().unwrap();
                groups.last_mut().unwrap().extend(tail);
            }
            groups
        }
        match &self.registry {
            CloudRegistry::Places(labels) => {
                let mut places: Vec<u64> = labels.clone();
                places.sort_unstable();
                places.dedup();
                places.shuffle(rng);
                chunk(&places, per_batch, min_group)
                    .into_iter()
                    .map(|group| (0..labels.len()).filter(|&i| group.contains(&labels[i])).collect())
                    .collect()
            }
            CloudRegistry::Positions { .. } => {
                let mut ids: Vec<usize> = (0..self.clouds.len()).collect();
                ids.shuffle(rng);
                chunk(&ids, per_batch, min_group)
            }
        }
    }
}

/// Trained parameters with the per-step loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub trace: Vec<LossRecord>,
}

/// Mean loss of `quads` over the descriptors of the clouds they index.
pub fn batch_loss(
    net: &LpdNet,
    params: &ParamStore,
    clouds: &[PreparedCloud],
    quads: &[Quadruplet],
    loss: &LossConfig,
) -> Result<f64> {
    let desc = clouds
        .iter()
        .map(|c| net.describe_prepared(params, c).map(|d| d.values().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    step_loss(quads, &desc, loss).map(|(l, _)| l)
}

/// Loss of one step and its gradient with respect to every cloud descriptor.
fn step_loss(
    quads: &[Quadruplet],
    desc: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let dist = |a: usize, b: usize| crate::network::sq_distance(&desc[a], &desc[b]);
    let mut grads = vec![vec![0.0; desc[0].len()]; desc.len()];
    // d‖a−b‖²: +2(a−b) on a and −2(a−b) on b, scaled by the loss weight.
    let mut push = |a: usize, b: usize, w: f64| {
        if w == 0.0 {
            return;
        }
        for k in 0..desc[a].len() {
            let d = 2.0 * w * (desc[a][k] - desc[b][k]);
            grads[a][k] += d;
            grads[b][k] -= d;
        }
    };
    let scale = 1.0 / quads.len() as f64;
    let mut total = 0.0;
    for q in quads {
        let d_pos: Vec<f64> = q.positives.iter().map(|&p| dist(q.anchor, p)).collect();
        let d_neg: Vec<f64> = q.negatives.iter().map(|&n| dist(q.anchor, n)).collect();
        let d_other: Vec<f64> = q.negatives.iter().map(|&n| dist(q.other_negative, n)).collect();
        let g = lazy_quadruplet_loss_grad(&d_pos, &d_neg, &d_other, cfg)?;
        total += g.loss * scale;
        for (i, &p) in q.positives.iter().enumerate() {
            push(q.anchor, p, g.d_pos[i] * scale);
        }
        for (i, &n) in q.negatives.iter().enumerate() {
            push(q.anchor, n, g.d_neg[i] * scale);
            push(q.other_negative, n, g.d_other[i] * scale);
        }
    }
    Ok((total, grads))
}

/// Computes one step's mean loss and accumulates its parameter gradient.
/// Returns the loss; gradients are summed in cloud order.
pub fn accumulate_step(
    net: &LpdNet,
    params: &mut ParamStore,
    set: &TrainingSet,
    clouds: &[usize],
    quads: &[Quadruplet],
    loss: &LossConfig,
) -> Result<f64> {
    let frozen: &ParamStore = params;
    // Quadruplets index into `clouds`, i.e. local positions within the step.
    let graphs = clouds
        .par_iter()
        .map(|&c| {
            let mut g = Graph::new(frozen);
            let out = net.forward(&mut g, &set.clouds[c])?;
            Ok((g, out))
        })
        .collect::<Result<Vec<_>>>()?;
    let desc: Vec<Vec<f64>> = graphs.iter().map(|(g, out)| g.value(*out).data().to_vec()).collect();
    let (value, d_desc) = step_loss(quads, &desc, loss)?;
    let grads = graphs
        .par_iter()
        .zip(&d_desc)
        .map(|((g, out), d)| {
            if d.iter().all(|v| *v == 0.0) {
                return Ok(None);
            }
            g.backward(*out, &Tensor::row_vector(d.clone())).map(Some)
        })
        .collect::<Result<Vec<Option<Gradients>>>>()?;
    drop(graphs);
    params.zero_grad();
    for g in grads.iter().flatten() {
        params.accumulate(g)?;
    }
    Ok(value)
}

/// Optimizes `params` in place over `set`.
///
/// Each epoch shuffles places into groups of `places_per_batch`; every cloud
/// of a group is an anchor once, with positives and negatives drawn from the
/// same group. A final group too small to supply negatives joins the previous one.
pub fn train(net: &LpdNet, mut params: ParamStore, set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        // An anchor's place, p_neg negative places and one more for the other negative.
        let batches = set.batches(cfg.places_per_batch, cfg.shape.p_neg + 2, &mut rng);
        for (b, clouds) in batches.iter().enumerate() {
            let local = set.registry.subset(clouds);
            let pool: Vec<usize> = (0..clouds.len()).collect();
            let quads = pool
                .iter()
                .map(|&a| sample_quadruplet_for(&local, a, &pool, cfg.shape, &mut rng))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("sampling"))?;
            let loss = accumulate_step(net, &mut params, set, clouds, &quads, &cfg.loss).map_err(|e| {
                if e.is_numeric() {
                    Error::NonFinite(format!("epoch {epoch} batch {b}: {e}"))
                } else {
                    e
                }
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss is {loss} at epoch {epoch} batch {b}")));
            }
            log::debug!("epoch {epoch} batch {b} loss {loss:.6}");
            trace.push(LossRecord { epoch, batch: b, loss });
            adam.step(&mut params);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(dir.join(format!("epoch_{epoch:03}.ckpt")), &params)?;
        }
    }
    Ok(TrainOutcome { params, trace })
}

/// A seeded set of synthetic places observed several times each.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPlaces {
    pub places: usize,
    pub observations: usize,
    pub n_points: usize,
    /// Each observation is rotated about z by a uniform angle in `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    pub noise_frac: f64,
    pub scene: SceneOptions,
    pub seed: u64,
}

impl Default for SyntheticPlaces {
    fn default() -> Self {
        Self {
            places: 50,
            observations: 5,
            n_points: 256,
            max_rotation_deg: 10.0,
            noise_frac: 0.0,
            scene: SceneOptions::default(),
            seed: 42,
        }
    }
}

/// One generated observation.
#[derive(Debug, Clone)]
pub struct PlaceObservation {
    pub place: usize,
    pub observation: usize,
    pub cloud: PointCloud,
}

impl SyntheticPlaces {
    pub fn place_seed(&self, place: usize) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(place as u64)
    }

    pub fn observation_seed(&self, place: usize, observation: usize) -> u64 {
        self.place_seed(place)
            .wrapping_mul(0x0100_0000_01b3)
            .wrapping_add(observation as u64 + 1)
    }

    /// The rotation applied to an observation.
    pub fn rotation_deg(&self, place: usize, observation: usize) -> f64 {
        if self.max_rotation_deg == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.observation_seed(place, observation));
        rng.set_stream(2);
        rng.gen_range(-self.max_rotation_deg..=self.max_rotation_deg)
    }

    /// Observation `observation` of `place`, with an explicit rotation and noise.
    pub fn observe(&self, place: usize, observation: usize, rotation_deg: f64, noise_frac: f64) -> Result<PointCloud> {
        generate_observation(
            self.place_seed(place),
            self.observation_seed(place, observation),
            self.n_points,
            rotation_deg,
            noise_frac,
            &self.scene,
        )
        .map(|o| o.cloud)
    }

    /// Observations `obs` of every place, place-major.
    pub fn generate(&self, obs: std::ops::Range<usize>) -> Result<Vec<PlaceObservation>> {
        if obs.end > self.observations {
            return Err(Error::InvalidArgument(format!(
                "observation {} out of range (have {})",
                obs.end, self.observations
            )));
        }
        let jobs: Vec<(usize, usize)> = (0..self.places)
            .flat_map(|p| obs.clone().map(move |o| (p, o)))
            .collect();
        jobs.par_iter()
            .map(|&(p, o)| {
                Ok(PlaceObservation {
                    place: p,
                    observation: o,
                    cloud: self.observe(p, o, self.rotation_deg(p, o), self.noise_frac)?,
                })
            })
            .collect()
    }
}

/// Place labels of a generated observation list.
pub fn place_registry(obs: &[PlaceObservation]) -> CloudRegistry {
    CloudRegistry::Places(obs.iter().map(|o| o.place as u64).collect())
}


/// The smallest network the loss gradient check runs on: 32 points, widths
/// scaled by 1/16, three clusters, eight output dimensions.
pub fn gradcheck_config() -> NetworkConfig {
    NetworkConfig {
        n_points: 32,
        neighborhood: AdaptiveNeighborhoodConfig { k_min: 4, k_max: 8, k_step: 2 },
        kf: 4,
        kc: 4,
        vlad_clusters: 3,
        output_dim: 8,
        ..NetworkConfig::default().scaled(1.0 / 16.0)
    }
}

/// A loss-bearing toy problem for `cfg`: four synthetic places seen three
/// times, with three quadruplets of two positives and two negatives.
pub fn gradcheck_problem(cfg: NetworkConfig, seed: u64) -> Result<(LpdNet, ParamStore, TrainingSet, Vec<Quadruplet>)> {
    let n = cfg.n_points;
    let net = LpdNet::new(cfg)?;
    let params = net.init_params(seed)?;
    let places = SyntheticPlaces {
        places: 4,
        observations: 3,
        n_points: n.max(64),
        seed,
        ..Default::default()
    };
    let obs = places.generate(0..3)?;
    let clouds = obs
        .iter()
        .enumerate()
        .map(|(i, o)| downsample_random(&o.cloud, n, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let set = TrainingSet::prepare(place_registry(&obs), &clouds, &net)?;
    let shape = QuadrupletShape { p_pos: 2, p_neg: 2 };
    let quads = sample_quadruplets(&set.registry, 3, shape, seed)?;
    Ok((net, params, set, quads))
}

/// Finite-difference check of the full descriptor pipeline under the lazy
/// quadruplet loss, on [`gradcheck_problem`].
pub fn loss_gradcheck(cfg: NetworkConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (net, mut params, set, quads) = gradcheck_problem(cfg, seed)?;
    let all: Vec<usize> = (0..set.clouds.len()).collect();
    let loss = LossConfig::default();
    let value = accumulate_step(&net, &mut params, &set, &all, &quads, &loss)?;
    if !(value > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "toy loss is {value}; the check would only see zero gradients"
        )));
    }
    finite_difference_check(|p| batch_loss(&net, p, &set.clouds, &quads, &loss), &params, opts)
}

/// Preparation steps wrapped around [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecipe {
    pub train: TrainConfig,
    /// Fit the local-feature standardization on the training clouds.
    pub standardize: bool,
    /// Initialize NetVLAD from k-means over this many training clouds (0 = off).
    pub vlad_init_clouds: usize,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            standardize: true,
            vlad_init_clouds: 30,
            init_seed: 42,
        }
    }
}

/// A trained network: its final configuration (including any fitted
/// standardization), parameters and loss trace.
#[derive(Debug, Clone)]
pub struct FittedNetwork {
    pub net: LpdNet,
    pub params: ParamStore,
    pub trace: Vec<LossRecord>,
}

/// Standardizes, initializes and trains a network on `clouds`.
pub fn fit_network(
    mut cfg: NetworkConfig,
    clouds: &[PointCloud],
    registry: CloudRegistry,
    recipe: &TrainRecipe,
) -> Result<FittedNetwork> {
    if recipe.standardize && cfg.use_local_features {
        crate::network::fit_feature_standardization(&mut cfg, clouds)?;
    }
    let net = LpdNet::new(cfg)?;
    let set = TrainingSet::prepare(registry, clouds, &net)?;
    let mut params = net.init_params(recipe.init_seed)?;
    if recipe.vlad_init_clouds > 0 {
        let n = recipe.vlad_init_clouds.min(set.clouds.len());
        net.init_vlad_from_data(&mut params, &set.clouds[..n], recipe.init_seed)?;
    }
    let out = train(&net, params, &set, &recipe.train)?;
    Ok(FittedNetwork {
        net,
        params: out.params,
        trace: out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, proptest, prop_assert, prop_assert_eq};

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn loss_hand_cases() {
        assert_eq!(lazy_quadruplet_loss(&[0.1, 0.1], &[2.0; 18], &[2.0; 18], &cfg()).unwrap(), 0.0);
        let l = lazy_quadruplet_loss(&[0.5, 0.8], &[0.6, 1.2], &[0.7, 0.9], &cfg()).unwrap();
        assert!((l - 0.4).abs() < 1e-15, "{l}");
        assert!(lazy_quadruplet_loss(&[], &[1.0], &[1.0], &cfg()).is_err());
        assert!(lazy_quadruplet_loss(&[-1.0], &[1.0], &[1.0], &cfg()).is_err());
    }

    #[test]
    fn loss_subgradient_matches_finite_differences() {
        let d_pos = [0.5, 0.8];
        let d_neg = [0.6, 1.2, 0.7];
        let d_other = [0.5, 0.9, 0.4];
        let g = lazy_quadruplet_loss_grad(&d_pos, &d_neg, &d_other, &cfg()).unwrap();
        let h = 1e-7;
        let lists = [&d_pos[..], &d_neg[..], &d_other[..]];
        let analytic = [&g.d_pos, &g.d_neg, &g.d_other];
        for which in 0..3 {
            for i in 0..lists[which].len() {
                let mut plus: Vec<Vec<f64>> = lists.iter().map(|l| l.to_vec()).collect();
                let mut minus = plus.clone();
                plus[which][i] += h;
                minus[which][i] -= h;
                let f = |v: &Vec<Vec<f64>>| lazy_quadruplet_loss(&v[0], &v[1], &v[2], &cfg()).unwrap();
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!((num - analytic[which][i]).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_order_free(
            pos in prop::collection::vec(0.0f64..4.0, 2),
            neg in prop::collection::vec(0.0f64..4.0, 18),
            other in prop::collection::vec(0.0f64..4.0, 18),
            shift in 0.0f64..1.0,
        ) {
            let l = lazy_quadruplet_loss(&pos, &neg, &other, &cfg()).unwrap();
            prop_assert!(l >= 0.0);
            let (mut rp, mut rn, mut ro) = (pos.clone(), neg.clone(), other.clone());
            rp.reverse();
            rn.reverse();
            ro.rotate_left(5);
            prop_assert_eq!(l, lazy_quadruplet_loss(&rp, &rn, &ro, &cfg()).unwrap());
            // Moving every negative closer can only increase the loss.
            let closer: Vec<f64> = neg.iter().map(|d| (d - shift).max(0.0)).collect();
            prop_assert!(lazy_quadruplet_loss(&pos, &closer, &other, &cfg()).unwrap() >= l);
        }
    }

    fn synthetic_registry(places: u64, obs: u64) -> CloudRegistry {
        CloudRegistry::Places((0..places).flat_map(|p| std::iter::repeat_n(p, obs as usize)).collect())
    }

    #[test]
    fn sampling_errors() {
        let two = synthetic_registry(2, 5);
        let e = sample_quadruplets(&two, 1, QuadrupletShape::default(), 1).unwrap_err();
        assert!(e.to_string().contains("insufficient negatives"), "{e}");
        let sparse = synthetic_registry(30, 2);
        let e = sample_quadruplets(&sparse, 1, QuadrupletShape::default(), 1).unwrap_err();
        assert!(e.to_string().contains("insufficient places"), "{e}");
        // Exactly 19 places leaves nothing for the other negative.
        let tight = synthetic_registry(19, 3);
        assert!(sample_quadruplets(&tight, 1, QuadrupletShape::default(), 1).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_disjoint() {
        let reg = synthetic_registry(50, 5);
        let a = sample_quadruplets(&reg, 1000, QuadrupletShape::default(), 9).unwrap();
        assert_eq!(a, sample_quadruplets(&reg, 1000, QuadrupletShape::default(), 9).unwrap());
        let place = |i: usize| i / 5;
        for q in &a {
            assert_eq!(q.positives.len(), 2);
            assert_eq!(q.negatives.len(), 18);
            assert!(q.positives.iter().all(|&p| p != q.anchor && place(p) == place(q.anchor)));
            let mut neg_places: Vec<usize> = q.negatives.iter().map(|&n| place(n)).collect();
            assert!(!neg_places.contains(&place(q.anchor)));
            neg_places.sort_unstable();
            neg_places.dedup();
            assert_eq!(neg_places.len(), 18);
            let o = place(q.other_negative);
            assert!(o != place(q.anchor) && !neg_places.contains(&o));
        }
    }

    #[test]
    fn position_registry_uses_radius() {
        let reg = CloudRegistry::Positions {
            positions: vec![[0.0, 0.0], [0.0, 20.0], [0.0, 30.0]],
            radius: 25.0,
        };
        assert!(reg.same_place(0, 1));
        assert!(!reg.same_place(0, 2));
        assert!(reg.same_place(1, 2));
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op() {
        let mut p = ParamStore::new(3);
        p.insert_glorot("w", 3, 2).unwrap();
        let before = p.clone();
        p.grad_mut("w").unwrap().data_mut().iter_mut().for_each(|g| *g = 0.5);
        let mut adam = Adam::new(&TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        });
        adam.step(&mut p);
        assert_eq!(p.get("w").unwrap(), before.get("w").unwrap());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new(3);
        p.insert_zeros("w", &[1, 2]).unwrap();
        p.grad_mut("w").unwrap().data_mut().copy_from_slice(&[2.0, -3.0]);
        let mut adam = Adam::new(&TrainConfig::default());
        adam.step(&mut p);
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 1e-3).abs() < 1e-9 && (w[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn epoch_means_average_batches() {
        let t = [
            LossRecord { epoch: 0, batch: 0, loss: 1.0 },
            LossRecord { epoch: 0, batch: 1, loss: 3.0 },
            LossRecord { epoch: 1, batch: 0, loss: 0.5 },
        ];
        assert_eq!(epoch_means(&t), vec![2.0, 0.5]);
    }

    mod network_loss {
        use super::super::*;

        pub(super) fn toy() -> (LpdNet, ParamStore, TrainingSet, Vec<Quadruplet>) {
            gradcheck_problem(gradcheck_config(), 5).unwrap()
        }

        #[test]
        fn loss_gradient_matches_finite_differences() {
            let opts = GradCheckOptions { max_entries_per_param: Some(3), floor: 1e-5, ..Default::default() };
            let report = loss_gradcheck(gradcheck_config(), 5, &opts).unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }

        #[test]
        fn small_step_reduces_frozen_batch_loss() {
            let (net, mut params, set, quads) = toy();
            let all: Vec<usize> = (0..set.clouds.len()).collect();
            let cfg = LossConfig::default();
            let before = accumulate_step(&net, &mut params, &set, &all, &quads, &cfg).unwrap();
            let grads: Vec<(String, Tensor)> = params.iter().map(|(n, _, g)| (n.to_string(), g.clone())).collect();
            for (name, g) in grads {
                let v = params.get_mut(&name).unwrap();
                for (p, d) in v.data_mut().iter_mut().zip(g.data()) {
                    *p -= 1e-5 * d;
                }
            }
            let after = batch_loss(&net, &params, &set.clouds, &quads, &cfg).unwrap();
            assert!(after < before, "{after} !< {before}");
        }
    }

    #[test]
    fn short_trailing_batch_is_merged() {
        let labels: Vec<u64> = (0..6).flat_map(|p| [p, p]).collect();
        let set = TrainingSet {
            registry: CloudRegistry::Places(labels),
            clouds: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let groups = set.batches(4, 4, &mut rng);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0], (0..12).collect::<Vec<_>>());
        let groups = set.batches(4, 2, &mut rng);
        assert_eq!(groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 4]);
        let groups = set.batches(3, 3, &mut rng);
        assert_eq!(groups.len(), 2);
    }

    #[test]
    fn synthetic_places_are_reproducible() {
        let s = SyntheticPlaces {
            places: 3,
            observations: 2,
            n_points: 64,
            ..Default::default()
        };
        let a = s.generate(0..2).unwrap();
        let b = s.generate(0..2).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.cloud, y.cloud);
            assert!(x.cloud.normalized);
        }
        assert!(s.rotation_deg(1, 1).abs() <= 10.0);
        assert_ne!(a[0].cloud, a[1].cloud);
        assert!(s.generate(0..3).is_err());
    }
}

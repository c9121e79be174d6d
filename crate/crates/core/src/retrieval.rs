//! Exact L2 descriptor retrieval, recall metrics and the rotation + noise
//! robustness protocol.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{put_string, ByteReader};
use crate::cloud::replace_with_noise;
use crate::error::{Error, Result};
use crate::network::{GlobalDescriptor, LpdNet};
use crate::tensor::ParamStore;
use crate::training::SyntheticPlaces;

const INDEX_MAGIC: &[u8; 8] = b"LPDINDEX";
const INDEX_VERSION: u32 = 1;
const FLAG_POSITIONS: u32 = 1;
const FLAG_PLACES: u32 = 2;

/// Descriptors with their ids and optional ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    descriptors: Vec<GlobalDescriptor>,
    positions: Option<Vec<[f64; 2]>>,
    places: Option<Vec<u64>>,
}

/// One retrieval result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub distance: f64,
}

impl DescriptorIndex {
    pub fn new(ids: Vec<String>, descriptors: Vec<GlobalDescriptor>) -> Result<Self> {
        if ids.len() != descriptors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} descriptors",
                ids.len(),
                descriptors.len()
            )));
        }
        if let Some(d) = descriptors.first() {
            if descriptors.iter().any(|x| x.dim() != d.dim()) {
                return Err(Error::Shape("descriptors differ in dimension".into()));
            }
        }
        Ok(Self {
            ids,
            descriptors,
            positions: None,
            places: None,
        })
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() != self.len() {
            return Err(Error::InvalidArgument("one position per descriptor required".into()));
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn with_places(mut self, places: Vec<u64>) -> Result<Self> {
        if places.len() != self.len() {
            return Err(Error::InvalidArgument("one place label per descriptor required".into()));
        }
        self.places = Some(places);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.first().map_or(0, GlobalDescriptor::dim)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn descriptors(&self) -> &[GlobalDescriptor] {
        &self.descriptors
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    pub fn places(&self) -> Option<&[u64]> {
        self.places.as_deref()
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// All entries ranked by ascending L2 distance, ties by id.
    pub fn rank(&self, q: &GlobalDescriptor) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty index".into()));
        }
        if q.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "query has dimension {}, index has {}",
                q.dim(),
                self.dim()
            )));
        }
        let mut hits: Vec<Hit> = self
            .descriptors
            .iter()
            .enumerate()
            .map(|(i, d)| Hit {
                index: i,
                id: self.ids[i].clone(),
                distance: d.distance(q),
            })
            .collect();
        hits.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.id.cmp(&b.id))
                .then(a.index.cmp(&b.index))
        });
        Ok(hits)
    }

    /// The `n` closest entries, ascending.
    pub fn query_topn(&self, q: &GlobalDescriptor, n: usize) -> Result<Vec<Hit>> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "asked for {n} results from an index of {}",
                self.len()
            )));
        }
        let mut hits = self.rank(q)?;
        hits.truncate(n);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        let flags = if self.positions.is_some() { FLAG_POSITIONS } else { 0 }
            | if self.places.is_some() { FLAG_PLACES } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for id in &self.ids {
            put_string(&mut out, id);
        }
        if let Some(pos) = &self.positions {
            for p in pos {
                out.extend_from_slice(&p[0].to_le_bytes());
                out.extend_from_slice(&p[1].to_le_bytes());
            }
        }
        if let Some(places) = &self.places {
            for p in places {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        for d in &self.descriptors {
            for v in d.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != INDEX_MAGIC {
            return Err(Error::Format("not a descriptor index".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let flags = r.u32()?;
        if flags & !(FLAG_POSITIONS | FLAG_PLACES) != 0 {
            return Err(Error::Format(format!("unknown index flags {flags:#x}")));
        }
        let count = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let ids = (0..count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let positions = if flags & FLAG_POSITIONS != 0 {
            Some(
                (0..count)
                    .map(|_| Ok([r.f64()?, r.f64()?]))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let places = if flags & FLAG_PLACES != 0 {
            Some((0..count).map(|_| r.u64()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let descriptors = (0..count)
            .map(|_| {
                let v = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                GlobalDescriptor::from_unit(v).map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        let mut index = Self::new(ids, descriptors)?;
        index.positions = positions;
        index.places = places;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Ground truth of a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truth {
    /// Positives share this place label.
    Place(u64),
    /// Positives lie within the positive radius of this position.
    Position([f64; 2]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub id: String,
    pub descriptor: GlobalDescriptor,
    pub truth: Truth,
}

/// What to do when a query's id is also in the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelfMatch {
    /// Refuse to evaluate.
    #[default]
    Reject,
    /// Drop the index entry with the query's id from its ranking.
    Exclude,
    /// Keep it.
    Allow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    /// Recall at N for N = 1..=max_n.
    pub recall_at: BTreeMap<usize, f64>,
    pub recall_at_1pct: f64,
    /// The N used for the one-percent recall.
    pub one_percent_n: usize,
    pub num_queries: usize,
}

impl RecallReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,recall\n");
        for (n, r) in &self.recall_at {
            out.push_str(&format!("{n},{r}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        format!(
            "queries={} recall@1={:.4} recall@1%={:.4} (N={})",
            self.num_queries,
            self.recall_at.get(&1).copied().unwrap_or(0.0),
            self.recall_at_1pct,
            self.one_percent_n
        )
    }
}

fn is_true_positive(index: &DescriptorIndex, entry: usize, truth: Truth, radius: f64) -> Result<bool> {
    match truth {
        Truth::Place(p) => index
            .places
            .as_ref()
            .map(|pl| pl[entry] == p)
            .ok_or_else(|| Error::InvalidArgument("index has no place labels".into())),
        Truth::Position(q) => index
            .positions
            .as_ref()
            .map(|pos| {
                let e = pos[entry];
                ((e[0] - q[0]).powi(2) + (e[1] - q[1]).powi(2)).sqrt() <= radius
            })
            .ok_or_else(|| Error::InvalidArgument("index has no positions".into())),
    }
}

/// Recall@1..=`max_n` and recall@1% over `queries`. A query succeeds at N
/// when any of its first N results is a true positive.
pub fn recall_at_n(
    queries: &[RetrievalQuery],
    index: &DescriptorIndex,
    max_n: usize,
    positive_radius: f64,
    self_match: SelfMatch,
) -> Result<RecallReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    if index.is_empty() {
        return Err(Error::InvalidArgument("empty index".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max N must be >= 1".into()));
    }
    let one_percent_n = index.len().div_ceil(100);
    let first_hits = queries
        .par_iter()
        .map(|q| {
            let own = index.position_of(&q.id);
            if own.is_some() && self_match == SelfMatch::Reject {
                return Err(Error::InvalidArgument(format!(
                    "query {:?} is in the index; exclude or allow self-matches explicitly",
                    q.id
                )));
            }
            let mut rank = 0;
            for h in index.rank(&q.descriptor)? {
                if self_match == SelfMatch::Exclude && Some(h.index) == own {
                    continue;
                }
                rank += 1;
                if is_true_positive(index, h.index, q.truth, positive_radius)? {
                    return Ok(Some(rank));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<Option<usize>>>>()?;
    let frac = |n: usize| {
        first_hits.iter().filter(|r| r.is_some_and(|r| r <= n)).count() as f64 / queries.len() as f64
    };
    Ok(RecallReport {
        recall_at: (1..=max_n).map(|n| (n, frac(n))).collect(),
        recall_at_1pct: frac(one_percent_n),
        one_percent_n,
        num_queries: queries.len(),
    })
}

/// Protocol settings for [`robustness_eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessConfig {
    pub angles_deg: Vec<f64>,
    pub noise_frac: f64,
    pub repeats: usize,
    /// Which observation of each place is indexed and perturbed.
    pub observation: usize,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            angles_deg: vec![1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 20.0, 30.0],
            noise_frac: 0.1,
            repeats: 8,
            observation: 0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessRow {
    pub angle_deg: f64,
    pub mean_mistakes: f64,
    pub max_mistakes: usize,
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("angle_deg,mean_mistakes,max_mistakes\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.angle_deg, r.mean_mistakes, r.max_mistakes));
    }
    out
}

/// Descriptors of one observation of every place, labelled by place.
pub fn place_index(net: &LpdNet, params: &ParamStore, places: &SyntheticPlaces, observation: usize) -> Result<DescriptorIndex> {
    let obs = places.generate(observation..observation + 1)?;
    let desc = obs
        .par_iter()
        .map(|o| net.forward_full(params, &o.cloud))
        .collect::<Result<Vec<_>>>()?;
    let ids = obs.iter().map(|o| format!("p{}_o{}", o.place, o.observation)).collect();
    DescriptorIndex::new(ids, desc)?.with_places(obs.iter().map(|o| o.place as u64).collect())
}

/// Re-observes every indexed place rotated by each angle, replaces a fraction
/// of its points with noise and counts top-1 retrieval mistakes. Each repeat
/// draws fresh noise.
pub fn robustness_eval(
    net: &LpdNet,
    params: &ParamStore,
    places: &SyntheticPlaces,
    index: &DescriptorIndex,
    cfg: &RobustnessConfig,
) -> Result<Vec<RobustnessRow>> {
    if cfg.repeats == 0 || cfg.angles_deg.is_empty() {
        return Err(Error::InvalidArgument("robustness needs angles and repeats >= 1".into()));
    }
    let labels = index
        .places()
        .ok_or_else(|| Error::InvalidArgument("robustness index needs place labels".into()))?;
    let o = cfg.observation;
    let mut rows = Vec::with_capacity(cfg.angles_deg.len());
    for (ai, &angle) in cfg.angles_deg.iter().enumerate() {
        let mut counts = Vec::with_capacity(cfg.repeats);
        for rep in 0..cfg.repeats {
            let jobs: Vec<usize> = (0..places.places).collect();
            let mistakes = jobs
                .par_iter()
                .map(|&p| {
                    let base = places.rotation_deg(p, o);
                    let mut cloud = places.observe(p, o, base + angle, 0.0)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(((rep as u64) << 40) | ((ai as u64) << 20) | p as u64);
                    replace_with_noise(&mut cloud, cfg.noise_frac, &mut rng)?;
                    let d = net.forward_full(params, &cloud)?;
                    let top = index.query_topn(&d, 1)?;
                    Ok(usize::from(labels[top[0].index] != p as u64))
                })
                .collect::<Result<Vec<usize>>>()?;
            counts.push(mistakes.iter().sum::<usize>());
        }
        rows.push(RobustnessRow {
            angle_deg: angle,
            mean_mistakes: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
            max_mistakes: counts.iter().copied().max().unwrap_or(0),
        });
    }
    Ok(rows)
}

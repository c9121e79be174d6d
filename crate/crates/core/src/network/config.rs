use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{AdaptiveNeighborhoodConfig, NUM_FEATURES};
use crate::kv::{join_list, KvConfig};

/// Where the feature network takes its kNN relations from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationVariant {
    /// Features and relations both from the untransformed features.
    Original,
    /// Features and relations both from the transformed features.
    Series,
    /// Untransformed features, relations from the transformed ones.
    Parallel,
}

/// How the feature-space and Cartesian-space graph branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationVariant {
    /// Both branches in parallel, concatenated and merged by an MLP.
    ParallelConcat,
    /// Both branches in parallel, merged by elementwise max.
    ParallelMax,
    /// Feature-space branch feeding the Cartesian-space branch.
    SeriesFc,
}

impl FromStr for RelationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "O" | "o" => Ok(Self::Original),
            "S" | "s" => Ok(Self::Series),
            "P" | "p" => Ok(Self::Parallel),
            _ => Err(Error::InvalidArgument(format!("unknown relation variant {s:?}"))),
        }
    }
}

impl fmt::Display for RelationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Original => "O",
            Self::Series => "S",
            Self::Parallel => "P",
        })
    }
}

impl FromStr for AggregationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PC" => Ok(Self::ParallelConcat),
            "PM" => Ok(Self::ParallelMax),
            "SF" => Ok(Self::SeriesFc),
            _ => Err(Error::InvalidArgument(format!("unknown aggregation variant {s:?}"))),
        }
    }
}

impl fmt::Display for AggregationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ParallelConcat => "PC",
            Self::ParallelMax => "PM",
            Self::SeriesFc => "SF",
        })
    }
}

/// Layer widths and graph settings. `Default` gives the full-size network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub n_points: usize,
    /// Size of the cloud local features are computed on when it is denser
    /// than the network input; `None` means `n_points`.
    pub feature_points: Option<usize>,
    /// Shared MLP widths inside both transform nets.
    pub tnet_mlp: Vec<usize>,
    /// Fully connected widths after the transform-net pooling.
    pub tnet_fc: Vec<usize>,
    /// Feature network MLP; its last width is the per-point feature width.
    pub feature_mlp: Vec<usize>,
    /// Edge MLP of every graph block; the edge feature itself is twice the input width.
    pub graph_mlp: Vec<usize>,
    /// Width of the merge MLP used by the concatenating aggregation.
    pub merge_width: usize,
    /// Per-point layers lifting aggregated features before pooling.
    pub fc: Vec<usize>,
    pub kf: usize,
    pub kc: usize,
    /// Number of feature-space graph iterations.
    pub feature_iterations: usize,
    pub relation: RelationVariant,
    pub aggregation: AggregationVariant,
    pub vlad_clusters: usize,
    pub output_dim: usize,
    /// When false the ten local features are replaced by zeros.
    pub use_local_features: bool,
    pub neighborhood: AdaptiveNeighborhoodConfig,
    /// Per-feature affine map `(f − shift) · scale` applied to the network's
    /// local-feature input (density already log-compressed).
    pub feature_shift: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_points: 4096,
            feature_points: None,
            tnet_mlp: vec![64, 128, 1024],
            tnet_fc: vec![512, 256],
            feature_mlp: vec![64, 64],
            graph_mlp: vec![64, 64],
            merge_width: 64,
            fc: vec![64, 128, 1024],
            kf: 20,
            kc: 20,
            feature_iterations: 1,
            relation: RelationVariant::Parallel,
            aggregation: AggregationVariant::SeriesFc,
            vlad_clusters: 64,
            output_dim: 256,
            use_local_features: true,
            neighborhood: AdaptiveNeighborhoodConfig::default(),
            feature_shift: vec![0.0; NUM_FEATURES],
            feature_scale: vec![1.0; NUM_FEATURES],
        }
    }
}

fn scale_widths(v: &[usize], s: f64) -> Vec<usize> {
    v.iter()
        .map(|&w| ((w as f64 * s).round() as usize).max(1))
        .collect()
}

impl NetworkConfig {
    /// Every layer width multiplied by `factor` (at least 1). Graph sizes,
    /// cluster count and output size are left alone.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.tnet_mlp = scale_widths(&self.tnet_mlp, factor);
        self.tnet_fc = scale_widths(&self.tnet_fc, factor);
        self.feature_mlp = scale_widths(&self.feature_mlp, factor);
        self.graph_mlp = scale_widths(&self.graph_mlp, factor);
        self.merge_width = scale_widths(&[self.merge_width], factor)[0];
        self.fc = scale_widths(&self.fc, factor);
        self
    }

    pub fn source_points(&self) -> usize {
        self.feature_points.unwrap_or(self.n_points)
    }

    pub fn feature_width(&self) -> usize {
        *self.feature_mlp.last().unwrap_or(&0)
    }

    pub fn graph_width(&self) -> usize {
        *self.graph_mlp.last().unwrap_or(&0)
    }

    pub fn local_width(&self) -> usize {
        *self.fc.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("tnet_mlp", &self.tnet_mlp),
            ("tnet_fc", &self.tnet_fc),
            ("feature_mlp", &self.feature_mlp),
            ("graph_mlp", &self.graph_mlp),
            ("fc", &self.fc),
        ];
        for (name, v) in lists {
            if v.is_empty() || v.contains(&0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} needs at least one width, all >= 1"
                )));
            }
        }
        let scalars = [
            ("merge_width", self.merge_width),
            ("kf", self.kf),
            ("kc", self.kc),
            ("feature_iterations", self.feature_iterations),
            ("vlad_clusters", self.vlad_clusters),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in scalars {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.kf >= self.n_points || self.kc >= self.n_points {
            return Err(Error::InvalidArgument(format!(
                "graph neighbor counts kf={} kc={} must be below n_points={}",
                self.kf, self.kc, self.n_points
            )));
        }
        if self.source_points() < self.n_points {
            return Err(Error::InvalidArgument(format!(
                "feature_points={} must be at least n_points={}",
                self.source_points(),
                self.n_points
            )));
        }
        if self.feature_shift.len() != NUM_FEATURES || self.feature_scale.len() != NUM_FEATURES {
            return Err(Error::InvalidArgument(format!(
                "feature_shift and feature_scale need {NUM_FEATURES} entries"
            )));
        }
        if self
            .feature_shift
            .iter()
            .chain(&self.feature_scale)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument("feature standardization must be finite".into()));
        }
        if self.use_local_features && self.neighborhood.k_max >= self.n_points {
            return Err(Error::InvalidArgument(format!(
                "k_max={} must be below n_points={}",
                self.neighborhood.k_max, self.n_points
            )));
        }
        self.neighborhood.validate()
    }

    /// Reads network keys out of `kv`; unknown keys are left for the caller.
    /// `width_scale` applies to the defaults before any explicit width list.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(s) = kv.take::<f64>("width_scale")? {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument("width_scale must be > 0".into()));
            }
            cfg = cfg.scaled(s);
        }
        macro_rules! scalar {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = kv.take($key)? { $field = v; })*
            };
        }
        macro_rules! list {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = kv.take_list($key)? { $field = v; })*
            };
        }
        scalar! {
            "n_points" => cfg.n_points,
            "merge_width" => cfg.merge_width,
            "kf" => cfg.kf,
            "kc" => cfg.kc,
            "feature_iterations" => cfg.feature_iterations,
            "relation" => cfg.relation,
            "aggregation" => cfg.aggregation,
            "vlad_clusters" => cfg.vlad_clusters,
            "output_dim" => cfg.output_dim,
            "use_local_features" => cfg.use_local_features,
            "k_min" => cfg.neighborhood.k_min,
            "k_max" => cfg.neighborhood.k_max,
            "k_step" => cfg.neighborhood.k_step,
        }
        if let Some(v) = kv.take("feature_points")? {
            cfg.feature_points = Some(v);
        }
        list! {
            "tnet_mlp" => cfg.tnet_mlp,
            "tnet_fc" => cfg.tnet_fc,
            "feature_mlp" => cfg.feature_mlp,
            "graph_mlp" => cfg.graph_mlp,
            "fc" => cfg.fc,
            "feature_shift" => cfg.feature_shift,
            "feature_scale" => cfg.feature_scale,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("n_points", self.n_points);
        if let Some(n) = self.feature_points {
            kv.set("feature_points", n);
        }
        kv.set("tnet_mlp", join_list(&self.tnet_mlp));
        kv.set("tnet_fc", join_list(&self.tnet_fc));
        kv.set("feature_mlp", join_list(&self.feature_mlp));
        kv.set("graph_mlp", join_list(&self.graph_mlp));
        kv.set("merge_width", self.merge_width);
        kv.set("fc", join_list(&self.fc));
        kv.set("kf", self.kf);
        kv.set("kc", self.kc);
        kv.set("feature_iterations", self.feature_iterations);
        kv.set("relation", self.relation);
        kv.set("aggregation", self.aggregation);
        kv.set("vlad_clusters", self.vlad_clusters);
        kv.set("output_dim", self.output_dim);
        kv.set("use_local_features", self.use_local_features);
        kv.set("k_min", self.neighborhood.k_min);
        kv.set("k_max", self.neighborhood.k_max);
        kv.set("k_step", self.neighborhood.k_step);
        kv.set("feature_shift", join_list(&self.feature_shift));
        kv.set("feature_scale", join_list(&self.feature_scale));
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_layout() {
        let c = NetworkConfig::default();
        assert_eq!((c.vlad_clusters, c.output_dim), (64, 256));
        assert_eq!((c.kf, c.kc), (20, 20));
        assert_eq!(c.fc, vec![64, 128, 1024]);
        assert_eq!(c.relation, RelationVariant::Parallel);
        assert_eq!(c.aggregation, AggregationVariant::SeriesFc);
        c.validate().unwrap();
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = NetworkConfig::default().scaled(0.125);
        c.n_points = 256;
        c.feature_points = Some(1024);
        c.aggregation = AggregationVariant::ParallelConcat;
        c.use_local_features = false;
        c.feature_shift[4] = 17.25;
        c.feature_scale[0] = 1.0 / 3.0;
        let mut kv = KvConfig::parse(&c.to_kv().to_text()).unwrap();
        let back = NetworkConfig::from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn width_scale_then_override() {
        let mut kv = KvConfig::parse("width_scale = 0.25\nfc = 8,8,32\nn_points = 512\n").unwrap();
        let c = NetworkConfig::from_kv(&mut kv).unwrap();
        assert_eq!(c.feature_mlp, vec![16, 16]);
        assert_eq!(c.fc, vec![8, 8, 32]);
    }

    #[test]
    fn validation_errors() {
        let mut kv = KvConfig::parse("n_points = 16\n").unwrap();
        assert!(NetworkConfig::from_kv(&mut kv).is_err());
        let mut kv = KvConfig::parse("relation = Q\n").unwrap();
        assert!(NetworkConfig::from_kv(&mut kv).is_err());
        let mut c = NetworkConfig::default();
        c.graph_mlp.clear();
        assert!(c.validate().is_err());
    }
}

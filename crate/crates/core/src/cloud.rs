//! Point clouds: binary I/O, normalization, random downsampling, synthetic
//! scenes and dataset manifests.
//!
//! Cloud files are headerless little-endian `f64` triples (`x, y, z`), 24 bytes
//! per point. Manifests are CSV files with header `id,northing,easting,cloud_path`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const RECORD_BYTES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// An ordered set of points. `normalized` is set once the cloud has been
/// centered and scaled into `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub normalized: bool,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        Ok(Self {
            points,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.to_array()).collect()
    }

    /// Rotate every point about the z axis through the origin.
    pub fn rotated_z(&self, degrees: f64) -> Self {
        let (s, c) = (degrees * PI / 180.0).sin_cos();
        let points = self
            .points
            .iter()
            .map(|p| Point3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z))
            .collect();
        Self {
            points,
            normalized: false,
        }
    }
}

pub fn load_cloud(path: impl AsRef<Path>, expected_n: Option<usize>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let cloud = decode_cloud(&bytes)?;
    if let Some(n) = expected_n {
        if cloud.len() != n {
            return Err(Error::Format(format!(
                "{}: expected {n} points, found {}",
                path.display(),
                cloud.len()
            )));
        }
    }
    Ok(cloud)
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "cloud payload of {} bytes is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let mut c = [0.0; 3];
        for (k, v) in c.iter_mut().enumerate() {
            let raw: [u8; 8] = rec[k * 8..k * 8 + 8].try_into().unwrap();
            *v = f64::from_le_bytes(raw);
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("non-finite coordinate in record {i}")));
        }
        points.push(Point3::from(c));
    }
    Ok(PointCloud {
        points,
        normalized: false,
    })
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in p.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cloud(cloud)).map_err(|e| Error::io(path, e))
}

/// Center on the centroid and divide by the largest absolute coordinate.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &cloud.points {
        centroid[0] += p.x;
        centroid[1] += p.y;
        centroid[2] += p.z;
    }
    for c in &mut centroid {
        *c /= n;
    }
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p.x - centroid[0], p.y - centroid[1], p.z - centroid[2]])
        .collect();
    let max_abs = centered
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let points = centered
        .into_iter()
        .map(|c| {
            // Division can round a hair past the unit bound.
            let f = |v: f64| (v / scale).clamp(-1.0, 1.0);
            Point3::new(f(c[0]), f(c[1]), f(c[2]))
        })
        .collect();
    Ok(PointCloud {
        points,
        normalized: true,
    })
}

/// Sample `target_n` points without replacement, keeping input order.
pub fn downsample_random(cloud: &PointCloud, target_n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.len() < target_n {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {} points to {target_n}",
            cloud.len()
        )));
    }
    if cloud.len() == target_n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, cloud.len(), target_n).into_vec();
    idx.sort_unstable();
    Ok(PointCloud {
        points: idx.into_iter().map(|i| cloud.points[i]).collect(),
        normalized: cloud.normalized,
    })
}

/// Relative share of points drawn from each primitive family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneMix {
    pub planes: f64,
    pub lines: f64,
    pub blobs: f64,
}

impl Default for SceneMix {
    fn default() -> Self {
        Self {
            planes: 0.5,
            lines: 0.25,
            blobs: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub mix: SceneMix,
    /// Half-width of the uniform per-point jitter, in scene meters.
    pub jitter: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            mix: SceneMix::default(),
            jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    /// Rectangle spanned by two orthogonal half-axes around a center.
    Plane {
        center: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
    },
    Line {
        from: [f64; 3],
        to: [f64; 3],
    },
    Blob {
        center: [f64; 3],
        radius: f64,
    },
}

impl Primitive {
    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match *self {
            Primitive::Plane { center, u, v } => {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                std::array::from_fn(|k| center[k] + a * u[k] + b * v[k])
            }
            Primitive::Line { from, to } => {
                let t: f64 = rng.gen_range(0.0..1.0);
                std::array::from_fn(|k| from[k] + t * (to[k] - from[k]))
            }
            Primitive::Blob { center, radius } => loop {
                let d: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                if d.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    break std::array::from_fn(|k| center[k] + radius * d[k]);
                }
            },
        }
    }
}

/// The fixed geometry of one synthetic place, derived from its seed.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    planes: Vec<Primitive>,
    lines: Vec<Primitive>,
    blobs: Vec<Primitive>,
}

impl SyntheticScene {
    pub fn from_seed(place_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(place_seed);
        let extent = 10.0;

        // A ground patch plus vertical walls and the odd tilted slab.
        let mut planes = vec![Primitive::Plane {
            center: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), -2.0],
            u: [extent * rng.gen_range(0.6..1.0), 0.0, 0.0],
            v: [0.0, extent * rng.gen_range(0.6..1.0), 0.0],
        }];
        for _ in 0..rng.gen_range(2..=4) {
            let yaw: f64 = rng.gen_range(0.0..PI);
            let tilt: f64 = if rng.gen_bool(0.25) {
                rng.gen_range(0.2..1.2)
            } else {
                0.0
            };
            let half_len = rng.gen_range(2.0..7.0);
            let half_h = rng.gen_range(1.0..4.0);
            let u = [half_len * yaw.cos(), half_len * yaw.sin(), 0.0];
            let v = [
                -half_h * tilt.sin() * yaw.sin(),
                half_h * tilt.sin() * yaw.cos(),
                half_h * tilt.cos(),
            ];
            planes.push(Primitive::Plane {
                center: [
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-8.0..8.0),
                    -2.0 + half_h * tilt.cos(),
                ],
                u,
                v,
            });
        }

        // Poles and overhead wires.
        let lines = (0..rng.gen_range(2..=5))
            .map(|_| {
                let base = [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), -2.0];
                if rng.gen_bool(0.7) {
                    let h = rng.gen_range(3.0..8.0);
                    Primitive::Line {
                        from: base,
                        to: [base[0], base[1], base[2] + h],
                    }
                } else {
                    let z = rng.gen_range(2.0..5.0);
                    Primitive::Line {
                        from: [base[0], base[1], z],
                        to: [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), z],
                    }
                }
            })
            .collect();

        // Vegetation-like clumps.
        let blobs = (0..rng.gen_range(1..=3))
            .map(|_| Primitive::Blob {
                center: [
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-1.0..2.0),
                ],
                radius: rng.gen_range(0.8..2.5),
            })
            .collect();

        Self {
            planes,
            lines,
            blobs,
        }
    }

    /// Draw `n` surface points; the split between families follows `mix`.
    fn sample_points(&self, n: usize, mix: SceneMix, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        let total = mix.planes + mix.lines + mix.blobs;
        let n_planes = ((mix.planes / total) * n as f64).round() as usize;
        let n_lines = (((mix.lines / total) * n as f64).round() as usize).min(n - n_planes);
        let n_blobs = n - n_planes - n_lines;
        let mut out = Vec::with_capacity(n);
        for (family, count) in [
            (&self.planes, n_planes),
            (&self.lines, n_lines),
            (&self.blobs, n_blobs),
        ] {
            for _ in 0..count {
                let prim = &family[rng.gen_range(0..family.len())];
                out.push(prim.sample(rng));
            }
        }
        out
    }
}

/// A generated observation together with the indices overwritten by noise.
#[derive(Debug, Clone)]
pub struct SyntheticObservation {
    pub cloud: PointCloud,
    pub noise_indices: Vec<usize>,
}

/// Observe the scene of `place_seed`: sample its surfaces, rotate about z,
/// jitter, normalize, then overwrite `⌊noise_frac·n⌋` points with uniform
/// noise in `[-1, 1]³`.
pub fn generate_observation(
    place_seed: u64,
    observation_seed: u64,
    n_points: usize,
    rotation_deg: f64,
    noise_frac: f64,
    opts: &SceneOptions,
) -> Result<SyntheticObservation> {
    if n_points < 64 {
        return Err(Error::InvalidArgument(format!(
            "synthetic clouds need at least 64 points, got {n_points}"
        )));
    }
    if !(0.0..=1.0).contains(&noise_frac) {
        return Err(Error::InvalidArgument(format!(
            "noise fraction {noise_frac} outside [0, 1]"
        )));
    }
    if !rotation_deg.is_finite() {
        return Err(Error::InvalidArgument("rotation must be finite".into()));
    }
    let scene = SyntheticScene::from_seed(place_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(observation_seed);
    let raw = scene.sample_points(n_points, opts.mix, &mut rng);
    let jitter = opts.jitter;
    let points = raw
        .into_iter()
        .map(|c| {
            let mut p = Point3::from(c);
            if jitter > 0.0 {
                p.x += rng.gen_range(-jitter..=jitter);
                p.y += rng.gen_range(-jitter..=jitter);
                p.z += rng.gen_range(-jitter..=jitter);
            }
            p
        })
        .collect();
    let cloud = PointCloud::new(points)?.rotated_z(rotation_deg);
    let mut cloud = normalize_cloud(&cloud)?;

    // Separate stream so the structured points do not depend on noise_frac.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(observation_seed);
    noise_rng.set_stream(1);
    let noise_indices = replace_with_noise(&mut cloud, noise_frac, &mut noise_rng)?;
    Ok(SyntheticObservation {
        cloud,
        noise_indices,
    })
}

/// Overwrites `⌊noise_frac·n⌋` randomly chosen points with uniform noise in
/// `[-1, 1]³`; returns their sorted indices.
pub fn replace_with_noise<R: Rng>(cloud: &mut PointCloud, noise_frac: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&noise_frac) {
        return Err(Error::InvalidArgument(format!(
            "noise fraction {noise_frac} outside [0, 1]"
        )));
    }
    let n = cloud.len();
    let n_noise = (noise_frac * n as f64).floor() as usize;
    let mut idx = sample(rng, n, n_noise).into_vec();
    idx.sort_unstable();
    for &i in &idx {
        cloud.points[i] = Point3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
    }
    Ok(idx)
}

/// [`generate_observation`] with default scene options, returning only the cloud.
pub fn generate_synthetic_place(
    place_seed: u64,
    observation_seed: u64,
    n_points: usize,
    rotation_deg: f64,
    noise_frac: f64,
) -> Result<PointCloud> {
    generate_observation(
        place_seed,
        observation_seed,
        n_points,
        rotation_deg,
        noise_frac,
        &SceneOptions::default(),
    )
    .map(|o| o.cloud)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmapRecord {
    pub id: String,
    pub northing: f64,
    pub easting: f64,
    pub cloud_path: PathBuf,
}

impl SubmapRecord {
    pub fn distance_to(&self, other: &SubmapRecord) -> f64 {
        (self.northing - other.northing).hypot(self.easting - other.easting)
    }
}

pub const DEFAULT_POSITIVE_RADIUS: f64 = 25.0;
const MANIFEST_HEADER: [&str; 4] = ["id", "northing", "easting", "cloud_path"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SubmapRecord>,
    /// Submaps closer than this many meters show the same place.
    pub positive_radius: f64,
    /// Directory that relative `cloud_path`s are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &SubmapRecord) -> PathBuf {
        if record.cloud_path.is_absolute() {
            record.cloud_path.clone()
        } else {
            self.base_dir.join(&record.cloud_path)
        }
    }

    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "positive radius must be > 0, got {radius}"
            )));
        }
        self.positive_radius = radius;
        Ok(self)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = parse_manifest(&text)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("manifest header: {e}")))?;
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(Error::Format(format!(
            "manifest header must be \"{}\"",
            MANIFEST_HEADER.join(",")
        )));
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Format(format!("manifest line {line}: {e}")))?;
        if rec.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {line}: expected 4 fields, found {}",
                rec.len()
            )));
        }
        let number = |k: usize| -> Result<f64> {
            let s = rec[k].trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("manifest line {line}: bad number {s:?}")))
        };
        let id = rec[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Format(format!("duplicate submap id {id:?}")));
        }
        records.push(SubmapRecord {
            id,
            northing: number(1)?,
            easting: number(2)?,
            cloud_path: PathBuf::from(rec[3].trim()),
        });
    }
    Ok(DatasetManifest {
        records,
        positive_radius: DEFAULT_POSITIVE_RADIUS,
        base_dir: PathBuf::new(),
    })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SubmapRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("id,northing,easting,cloud_path\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.id,
            r.northing,
            r.easting,
            r.cloud_path.display()
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, proptest, prop_assert};

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().copied().map(Point3::from).collect()).unwrap()
    }

    #[test]
    fn single_record_roundtrip() {
        let bytes: Vec<u8> = [1.0f64, 2.0, 3.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        fs::write(&path, &bytes).unwrap();
        let c = load_cloud(&path, Some(1)).unwrap();
        assert_eq!(c.points, vec![Point3::new(1.0, 2.0, 3.0)]);
        assert!(!c.normalized);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.bin");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(load_cloud(&empty, None), Err(Error::EmptyCloud)));
        assert_eq!(load_cloud(&empty, None).unwrap_err().to_string(), "empty cloud");

        let odd = dir.path().join("odd.bin");
        fs::write(&odd, [0u8; 25]).unwrap();
        assert!(matches!(load_cloud(&odd, None), Err(Error::Format(_))));

        let nan = dir.path().join("nan.bin");
        let bytes: Vec<u8> = [0.0f64, f64::NAN, 1.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&nan, bytes).unwrap();
        assert!(matches!(load_cloud(&nan, None), Err(Error::Format(_))));

        assert!(matches!(
            load_cloud(dir.path().join("missing.bin"), None),
            Err(Error::Io { .. })
        ));

        let ok = dir.path().join("ok.bin");
        save_cloud(&ok, &cloud(&[[0.0; 3], [1.0; 3]])).unwrap();
        assert!(matches!(load_cloud(&ok, Some(3)), Err(Error::Format(_))));
    }

    #[test]
    fn full_size_file() {
        let c = generate_synthetic_place(3, 4, 4096, 0.0, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_cloud(&path, &c).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 4096 * 24);
        let back = load_cloud(&path, Some(4096)).unwrap();
        assert_eq!(back.points, c.points);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_cloud(&cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])).unwrap();
        assert_eq!(
            n.points,
            vec![Point3::new(-1.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]
        );
        assert!(n.normalized);

        let one = normalize_cloud(&cloud(&[[7.0, -3.0, 2.0]])).unwrap();
        assert_eq!(one.points, vec![Point3::new(0.0, 0.0, 0.0)]);
    }

    #[test]
    fn normalize_random_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<[f64; 3]> = (0..100)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-50.0..80.0)))
            .collect();
        let n = normalize_cloud(&cloud(&raw)).unwrap();
        let mut centroid = [0.0; 3];
        let mut max_abs: f64 = 0.0;
        for p in &n.points {
            for (k, v) in p.to_array().into_iter().enumerate() {
                assert!((-1.0..=1.0).contains(&v));
                centroid[k] += v / 100.0;
                max_abs = max_abs.max(v.abs());
            }
        }
        assert!(centroid.iter().all(|c| c.abs() < 1e-12), "{centroid:?}");
        assert!((max_abs - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_translation_invariant_on_integer_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<[f64; 3]> = (0..64)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-100i32..100) as f64))
            .collect();
        let shifted: Vec<[f64; 3]> = raw
            .iter()
            .map(|p| [p[0] + 1024.0, p[1] - 37.0, p[2] + 5.0])
            .collect();
        assert_eq!(
            normalize_cloud(&cloud(&raw)).unwrap(),
            normalize_cloud(&cloud(&shifted)).unwrap()
        );
    }

    #[test]
    fn downsample_examples() {
        let c = generate_synthetic_place(1, 1, 4096, 0.0, 0.0).unwrap();
        assert_eq!(downsample_random(&c, 4096, 7).unwrap(), c);

        let big = generate_synthetic_place(1, 2, 5000, 0.0, 0.0).unwrap();
        let d = downsample_random(&big, 4096, 1).unwrap();
        assert_eq!(d.len(), 4096);
        let bits = |p: &Point3| p.to_array().map(f64::to_bits);
        let input: HashSet<_> = big.points.iter().map(bits).collect();
        let out: HashSet<_> = d.points.iter().map(bits).collect();
        assert_eq!(out.len(), 4096, "duplicates in output");
        assert!(out.is_subset(&input));

        let small = generate_synthetic_place(1, 2, 100, 0.0, 0.0).unwrap();
        assert!(downsample_random(&small, 4096, 1).is_err());
    }

    #[test]
    fn downsample_seeds() {
        let big = generate_synthetic_place(5, 5, 2000, 0.0, 0.0).unwrap();
        let a = downsample_random(&big, 500, 11).unwrap();
        assert_eq!(a, downsample_random(&big, 500, 11).unwrap());
        assert_ne!(a, downsample_random(&big, 500, 12).unwrap());
    }

    #[test]
    fn synthetic_determinism_and_separation() {
        let a = generate_synthetic_place(10, 3, 512, 0.0, 0.0).unwrap();
        let b = generate_synthetic_place(10, 3, 512, 0.0, 0.0).unwrap();
        let bits = |c: &PointCloud| -> Vec<u64> {
            c.points.iter().flat_map(|p| p.to_array().map(f64::to_bits)).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let other = generate_synthetic_place(11, 3, 512, 0.0, 0.0).unwrap();
        assert_ne!(a, other);
        assert!(a.normalized);
        assert!(a.points.iter().all(|p| p.to_array().iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn synthetic_noise_count() {
        let n = 500;
        let clean = generate_observation(4, 8, n, 15.0, 0.0, &SceneOptions::default()).unwrap();
        let noisy = generate_observation(4, 8, n, 15.0, 0.1, &SceneOptions::default()).unwrap();
        assert!(clean.noise_indices.is_empty());
        // Oracle: points that differ from the noiseless observation.
        let changed: Vec<usize> = (0..n)
            .filter(|&i| clean.cloud.points[i] != noisy.cloud.points[i])
            .collect();
        assert_eq!(changed.len(), 50);
        assert_eq!(changed, noisy.noise_indices);
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        assert!(generate_synthetic_place(1, 1, 63, 0.0, 0.0).is_err());
        assert!(generate_synthetic_place(1, 1, 64, 0.0, 1.5).is_err());
        assert!(generate_synthetic_place(1, 1, 64, 0.0, -0.1).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("id,northing,easting,cloud_path\na,1.5,2,a.bin\nb,-3,4e1,sub/b.bin\n")
            .unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].easting, 40.0);
        assert_eq!(m.positive_radius, DEFAULT_POSITIVE_RADIUS);

        let dup = parse_manifest("id,northing,easting,cloud_path\nx,1,2,a\nx,3,4,b\n").unwrap_err();
        assert!(dup.to_string().contains("\"x\""), "{dup}");

        let empty = parse_manifest("id,northing,easting,cloud_path\n").unwrap();
        assert!(empty.records.is_empty());

        assert!(parse_manifest("id,northing,easting,cloud_path\nx,abc,2,a\n").is_err());
        assert!(parse_manifest("id,northing,easting,cloud_path\nx,1,2\n").is_err());
        assert!(parse_manifest("name,n,e,p\n").is_err());
    }

    #[test]
    fn manifest_roundtrip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let recs = vec![SubmapRecord {
            id: "p0".into(),
            northing: 0.0,
            easting: 100.0,
            cloud_path: "clouds/p0.bin".into(),
        }];
        write_manifest(&path, &recs).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records, recs);
        assert_eq!(m.resolve(&m.records[0]), dir.path().join("clouds/p0.bin"));
        assert!(m.clone().with_radius(0.0).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(pts in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 1..50)) {
            let once = normalize_cloud(&cloud(&pts)).unwrap();
            let twice = normalize_cloud(&once).unwrap();
            for (a, b) in once.points.iter().zip(&twice.points) {
                for (x, y) in a.to_array().iter().zip(b.to_array()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}

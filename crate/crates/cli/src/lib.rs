//! The `lpdnet` command line: feature extraction, synthetic data, training,
//! indexing, querying, evaluation, robustness and descriptor analysis.
//!
//! [`run`] is the whole program; `main` only forwards the process arguments
//! and exit code.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use rayon::prelude::*;

use lpdnet::analysis::{cluster_csv, cluster_descriptors, similarity_map, uniqueness, uniqueness_csv};
use lpdnet::cloud::{
    downsample_random, load_cloud, load_manifest, normalize_cloud, save_cloud, write_manifest, DatasetManifest,
    PointCloud, SubmapRecord, DEFAULT_POSITIVE_RADIUS,
};
use lpdnet::features::{compute_local_features, AdaptiveNeighborhoodConfig};
use lpdnet::kv::KvConfig;
use lpdnet::network::{LpdNet, NetworkConfig};
use lpdnet::retrieval::{
    place_index, recall_at_n, robustness_csv, robustness_eval, DescriptorIndex, RetrievalQuery, RobustnessConfig,
    SelfMatch, Truth,
};
use lpdnet::tensor::{load_checkpoint, primitive_suite, save_checkpoint, GradCheckOptions, ParamStore};
use lpdnet::training::{
    fit_network, gradcheck_config, loss_gradcheck, place_registry, write_loss_trace, CloudRegistry, LossConfig,
    QuadrupletShape, SyntheticPlaces, TrainRecipe,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "LPD_SEED";

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "lpdnet", version, about = "Point-cloud place recognition with local features")]
pub struct Cli {
    /// Seed for every random choice; falls back to $LPD_SEED, then 42.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump the ten local features of every point as CSV.
    Extract(ExtractArgs),
    /// Write a synthetic dataset: cloud files plus a manifest.
    Synth(SynthArgs),
    /// Train a network and write its checkpoint.
    Train(TrainArgs),
    /// Describe every cloud of a manifest into a descriptor index.
    Index(IndexArgs),
    /// Rank an index against one cloud.
    Query(QueryArgs),
    /// Recall@N of a manifest against itself or against a query manifest.
    Eval(EvalArgs),
    /// Top-1 mistakes under rotation and noise on synthetic places.
    Robustness(RobustnessArgs),
    /// Similarity, uniqueness or clustering of indexed descriptors.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every primitive and of the training loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Normalize the cloud to [-1, 1] first.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 10)]
    pub k_min: usize,
    #[arg(long, default_value_t = 100)]
    pub k_max: usize,
    #[arg(long, default_value_t = 10)]
    pub k_step: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; receives `manifest.csv` and `clouds/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub places: usize,
    #[arg(long, default_value_t = 5)]
    pub obs: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    /// Observations are rotated by a uniform angle within ± this many degrees.
    #[arg(long, default_value_t = 10.0)]
    pub max_rotation: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Northing gap between consecutive places in the manifest, in meters.
    #[arg(long, default_value_t = 100.0)]
    pub spacing: f64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("data").required(true).args(["synthetic", "manifest"])))]
pub struct TrainArgs {
    /// Train on generated places, e.g. `--synthetic places=50 obs=5`. Keys:
    /// places, obs, train_obs, points, max_rotation, noise.
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    pub synthetic: Option<Vec<String>>,
    /// Train on the clouds of a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// key=value file with network and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write; its settings go to `<out>.cfg`.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also write a checkpoint after every epoch into this directory.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Index file to write; `<out>.meta` records the checkpoint used.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Checkpoint to describe the query with (default: the one the index was built with).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Database manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Recall CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Query manifest (default: every database entry, leaving itself out).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    pub max_n: usize,
    /// Entries within this many meters of a query show the same place.
    #[arg(long, default_value_t = DEFAULT_POSITIVE_RADIUS)]
    pub radius: f64,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,10,20,30")]
    pub angles: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 8)]
    pub repeats: usize,
    /// Observation of each place that is indexed and perturbed.
    #[arg(long, default_value_t = 0)]
    pub observation: usize,
    /// Number of places (default: as trained, else 50).
    #[arg(long)]
    pub places: Option<usize>,
    /// CSV to write (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("kind").required(true).args(["similarity", "uniqueness", "clusters"])))]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Distances from this indexed id to every entry.
    #[arg(long, value_name = "ID")]
    pub similarity: Option<String>,
    /// Normalized sum of distances to all other entries.
    #[arg(long)]
    pub uniqueness: bool,
    /// Partition the descriptors into this many clusters.
    #[arg(long, value_name = "K")]
    pub clusters: Option<usize>,
    /// CSV to write (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// key=value network file (default: a 32-point, 1/16-width network).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parameter entries checked per tensor.
    #[arg(long, default_value_t = 3)]
    pub entries: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
}

/// Misuse of the command line found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<lpdnet::Error>() {
            return if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", one_line(&e));
            exit_code(&e)
        }
    }
}

/// The error and its causes on one line; causes whose text the message
/// already carries are skipped.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

/// `--seed`, else `$LPD_SEED`, else 42.
pub fn resolve_seed(flag: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let seed = resolve_seed(cli.seed)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("starting worker threads")?;
    // Commands write into a buffer so the output sink need not cross threads.
    let mut buf: Vec<u8> = Vec::new();
    let result = pool.install(|| {
        let out = &mut buf;
        match cli.command {
            Command::Extract(a) => extract(a, out),
            Command::Synth(a) => synth(a, seed, out),
            Command::Train(a) => train(a, seed, out),
            Command::Index(a) => index(a, seed, out),
            Command::Query(a) => query(a, seed, out),
            Command::Eval(a) => eval(a, seed, out),
            Command::Robustness(a) => robustness(a, seed, out),
            Command::Analyze(a) => analyze(a, seed, out),
            Command::Gradcheck(a) => gradcheck(a, seed, out),
        }
    });
    out.write_all(&buf).context("writing output")?;
    result
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| lpdnet::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> anyhow::Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => out.write_all(text.as_bytes()).context("writing output"),
    }
}

fn extract(a: ExtractArgs, out: &mut Vec<u8>) -> anyhow::Result<()> {
    let mut cloud = load_cloud(&a.cloud, None)?;
    if a.normalize {
        cloud = normalize_cloud(&cloud)?;
    }
    let cfg = AdaptiveNeighborhoodConfig {
        k_min: a.k_min,
        k_max: a.k_max,
        k_step: a.k_step,
    };
    let features = compute_local_features(&cloud, &cfg)?;
    features.write_csv(&a.out)?;
    writeln!(out, "{} points -> {}", features.len(), a.out.display())?;
    Ok(())
}

fn synth(a: SynthArgs, seed: u64, out: &mut Vec<u8>) -> anyhow::Result<()> {
    if !(a.spacing > 0.0) {
        return Err(usage("--spacing must be > 0"));
    }
    let places = SyntheticPlaces {
        places: a.places,
        observations: a.obs,
        n_points: a.points,
        max_rotation_deg: a.max_rotation,
        noise_frac: a.noise,
        seed,
        ..Default::default()
    };
    let obs = places.generate(0..a.obs)?;
    let dir = a.out.join("clouds");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut records = Vec::with_capacity(obs.len());
    for o in &obs {
        let name = format!("p{:03}_o{}.bin", o.place, o.observation);
        save_cloud(dir.join(&name), &o.cloud)?;
        records.push(SubmapRecord {
            id: format!("p{}_o{}", o.place, o.observation),
            northing: o.place as f64 * a.spacing,
            easting: 0.0,
            cloud_path: Path::new("clouds").join(name),
        });
    }
    let manifest = a.out.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    writeln!(out, "{} clouds -> {}", records.len(), manifest.display())?;
    Ok(())
}

/// Synthetic training data described by `KEY=VALUE` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub places: SyntheticPlaces,
    /// The first `train_obs` observations of each place are trained on.
    pub train_obs: usize,
}

impl SyntheticSpec {
    pub fn parse(tokens: &[String], seed: u64) -> anyhow::Result<Self> {
        let mut spec = Self {
            places: SyntheticPlaces {
                seed,
                ..Default::default()
            },
            train_obs: 3,
        };
        let mut obs_given = false;
        let mut train_given = false;
        for t in tokens {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| usage(format!("--synthetic expects KEY=VALUE, got {t:?}")))?;
            let bad = || usage(format!("--synthetic {k}: bad value {v:?}"));
            match k.trim() {
                "places" => spec.places.places = v.parse().map_err(|_| bad())?,
                "obs" => {
                    spec.places.observations = v.parse().map_err(|_| bad())?;
                    obs_given = true;
                }
                "train_obs" => {
                    spec.train_obs = v.parse().map_err(|_| bad())?;
                    train_given = true;
                }
                "points" => spec.places.n_points = v.parse().map_err(|_| bad())?,
                "max_rotation" => spec.places.max_rotation_deg = v.parse().map_err(|_| bad())?,
                "noise" => spec.places.noise_frac = v.parse().map_err(|_| bad())?,
                other => return Err(usage(format!("--synthetic: unknown key {other:?}"))),
            }
        }
        if obs_given && !train_given {
            spec.train_obs = spec.train_obs.min(spec.places.observations);
        }
        if spec.train_obs == 0 || spec.train_obs > spec.places.observations {
            return Err(usage(format!(
                "--synthetic train_obs={} must lie in 1..={}",
                spec.train_obs, spec.places.observations
            )));
        }
        Ok(spec)
    }

    fn write_kv(&self, kv: &mut KvConfig) {
        let p = &self.places;
        kv.set("synthetic_places", p.places);
        kv.set("synthetic_observations", p.observations);
        kv.set("synthetic_train_observations", self.train_obs);
        kv.set("synthetic_points", p.n_points);
        kv.set("synthetic_max_rotation", p.max_rotation_deg);
        kv.set("synthetic_noise", p.noise_frac);
        kv.set("synthetic_seed", p.seed);
    }

    fn take_kv(kv: &mut KvConfig) -> anyhow::Result<Option<Self>> {
        let Some(places) = kv.take::<usize>("synthetic_places")? else {
            return Ok(None);
        };
        let mut need = |k: &str| -> anyhow::Result<String> {
            kv.take::<String>(k)?.ok_or_else(|| anyhow!("checkpoint settings lack {k:?}"))
        };
        let num = |k: &str, v: String| -> anyhow::Result<f64> {
            v.parse().map_err(|_| anyhow!("checkpoint setting {k:?}: bad value {v:?}"))
        };
        let observations = num("synthetic_observations", need("synthetic_observations")?)? as usize;
        let train_obs = num("synthetic_train_observations", need("synthetic_train_observations")?)? as usize;
        let n_points = num("synthetic_points", need("synthetic_points")?)? as usize;
        let max_rotation_deg = num("synthetic_max_rotation", need("synthetic_max_rotation")?)?;
        let noise_frac = num("synthetic_noise", need("synthetic_noise")?)?;
        let seed_text = need("synthetic_seed")?;
        let seed = seed_text
            .parse()
            .map_err(|_| anyhow!("checkpoint setting \"synthetic_seed\": bad value {seed_text:?}"))?;
        Ok(Some(Self {
            places: SyntheticPlaces {
                places,
                observations,
                n_points,
                max_rotation_deg,
                noise_frac,
                seed,
                ..Default::default()
            },
            train_obs,
        }))
    }
}

/// Training settings read from a key=value file. Network keys are those of
/// [`NetworkConfig::from_kv`]; the rest are listed in [`RECIPE_KEYS`].
pub const RECIPE_KEYS: &[&str] = &[
    "lr",
    "epochs",
    "places_per_batch",
    "p_pos",
    "p_neg",
    "alpha",
    "beta",
    "standardize",
    "vlad_init_clouds",
    "frozen",
];

/// Splits a training config into the network and the recipe. Without a
/// file, the network is the full-size default with `n_points` set by the caller.
pub fn read_train_config(path: Option<&Path>, seed: u64) -> anyhow::Result<(NetworkConfig, TrainRecipe, bool)> {
    let mut kv = match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let mut recipe = TrainRecipe {
        init_seed: seed,
        ..Default::default()
    };
    let t = &mut recipe.train;
    t.seed = seed;
    if let Some(v) = kv.take("lr")? {
        t.lr = v;
    }
    if let Some(v) = kv.take("epochs")? {
        t.epochs = v;
    }
    if let Some(v) = kv.take("places_per_batch")? {
        t.places_per_batch = v;
    }
    let mut shape = QuadrupletShape::default();
    if let Some(v) = kv.take("p_pos")? {
        shape.p_pos = v;
    }
    if let Some(v) = kv.take("p_neg")? {
        shape.p_neg = v;
    }
    t.shape = shape;
    let mut loss = LossConfig::default();
    if let Some(v) = kv.take("alpha")? {
        loss.alpha = v;
    }
    if let Some(v) = kv.take("beta")? {
        loss.beta = v;
    }
    t.loss = loss;
    if let Some(v) = kv.take_list::<String>("frozen")? {
        t.frozen = v.into_iter().filter(|s| !s.is_empty()).collect();
    }
    if let Some(v) = kv.take("standardize")? {
        recipe.standardize = v;
    }
    if let Some(v) = kv.take("vlad_init_clouds")? {
        recipe.vlad_init_clouds = v;
    }
    let n_points_given = kv.contains("n_points");
    let net = NetworkConfig::from_kv(&mut kv)?;
    kv.finish()?;
    recipe.train.validate()?;
    Ok((net, recipe, n_points_given))
}

/// Loads a cloud file and turns it into a network input: seeded downsampling
/// to `n` points (the feature source size) when larger, then normalization.
pub fn load_network_input(path: &Path, n: usize, seed: u64) -> anyhow::Result<PointCloud> {
    let cloud = load_cloud(path, None)?;
    if cloud.len() < n {
        return Err(lpdnet::Error::Format(format!(
            "{}: network needs {n} points, cloud has {}",
            path.display(),
            cloud.len()
        ))
        .into());
    }
    let cloud = downsample_random(&cloud, n, seed)?;
    Ok(normalize_cloud(&cloud)?)
}

fn load_manifest_clouds(m: &DatasetManifest, n: usize, seed: u64) -> anyhow::Result<Vec<PointCloud>> {
    m.records
        .par_iter()
        .enumerate()
        .map(|(i, r)| load_network_input(&m.resolve(r), n, seed.wrapping_add(i as u64)))
        .collect()
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// A checkpoint with the network it belongs to.
pub struct Model {
    pub net: LpdNet,
    pub params: ParamStore,
    pub synthetic: Option<SyntheticSpec>,
}

/// Writes `ckpt` and its `<ckpt>.cfg` settings file.
pub fn save_model(ckpt: &Path, net: &LpdNet, params: &ParamStore, synthetic: Option<&SyntheticSpec>) -> anyhow::Result<()> {
    save_checkpoint(ckpt, params)?;
    let mut kv = net.config().to_kv();
    if let Some(s) = synthetic {
        s.write_kv(&mut kv);
    }
    write_file(&sidecar(ckpt, ".cfg"), &kv.to_text())
}

pub fn load_model(ckpt: &Path) -> anyhow::Result<Model> {
    let cfg_path = sidecar(ckpt, ".cfg");
    let mut kv = KvConfig::load(&cfg_path)?;
    let synthetic = SyntheticSpec::take_kv(&mut kv)?;
    let cfg = NetworkConfig::from_kv(&mut kv).with_context(|| format!("{}", cfg_path.display()))?;
    kv.finish()?;
    let net = LpdNet::new(cfg)?;
    let params = load_checkpoint(ckpt)?;
    let expected = net.init_params(0)?;
    for name in expected.names() {
        let want = expected.get(name)?.shape();
        let got = params
            .get(name)
            .map_err(|_| lpdnet::Error::Format(format!("checkpoint lacks parameter {name:?}")))?
            .shape();
        if want != got {
            return Err(lpdnet::Error::Format(format!("parameter {name:?} has shape {got:?}, network expects {want:?}")).into());
        }
    }
    if params.len() != expected.len() {
        return Err(lpdnet::Error::Format("checkpoint has parameters the network does not use".into()).into());
    }
    Ok(Model { net, params, synthetic })
}

fn train(a: TrainArgs, seed: u64, out: &mut Vec<u8>) -> anyhow::Result<()> {
    let (mut cfg, mut recipe, n_points_given) = read_train_config(a.config.as_deref(), seed)?;
    recipe.train.checkpoint_dir = a.checkpoint_dir.clone();
    let (clouds, registry, spec) = if let Some(tokens) = &a.synthetic {
        let spec = SyntheticSpec::parse(tokens, seed)?;
        // Observations denser than the network input become the feature source.
        let points = spec.places.n_points;
        if !n_points_given {
            cfg.n_points = points;
        }
        if cfg.feature_points.is_some_and(|f| f != points) || cfg.n_points > points {
            return Err(usage(format!(
                "--synthetic points={points} does not fit n_points={} feature_points={:?}",
                cfg.n_points, cfg.feature_points
            )));
        }
        cfg.feature_points = (points > cfg.n_points).then_some(points);
        cfg.validate()?;
        let obs = spec.places.generate(0..spec.train_obs)?;
        let registry = place_registry(&obs);
        (obs.into_iter().map(|o| o.cloud).collect(), registry, Some(spec))
    } else {
        let path = a.manifest.as_ref().expect("clap enforces a data source");
        let m = load_manifest(path)?;
        let clouds = load_manifest_clouds(&m, cfg.source_points(), seed)?;
        (clouds, CloudRegistry::from_manifest(&m), None)
    };
    let fitted = fit_network(cfg, &clouds, registry, &recipe)?;
    save_model(&a.out, &fitted.net, &fitted.params, spec.as_ref())?;
    if let Some(t) = &a.trace {
        write_loss_trace(t, &fitted.trace)?;
    }
    let last = lpdnet::training::epoch_means(&fitted.trace).last().copied().unwrap_or(f64::NAN);
    writeln!(
        out,
        "trained {} parameters on {} clouds for {} epochs, final mean loss {last:.6} -> {}",
        fitted.params.num_scalars(),
        clouds.len(),
        recipe.train.epochs,
        a.out.display()
    )?;
    Ok(())
}

fn describe_all(model: &Model, clouds: &[PointCloud]) -> anyhow::Result<Vec<lpdnet::network::GlobalDescriptor>> {
    Ok(clouds
        .par_iter()
        .map(|c| model.net.forward_full(&model.params, c))
        .collect::<lpdnet::Result<Vec<_>>>()?)
}

fn build_index(model: &Model, m: &DatasetManifest, seed: u64) -> anyhow::Result<DescriptorIndex> {
    let clouds = load_manifest_clouds(m, model.net.config().source_points(), seed)?;
    let desc = describe_all(model, &clouds)?;
    let ids = m.records.iter().map(|r| r.id.clone()).collect();
    let positions = m.records.iter().map(|r| [r.northing, r.easting]).collect();
    Ok(DescriptorIndex::new(ids, desc)?.with_positions(positions)?)
}

fn index(a: IndexArgs, seed: u64, out: &mut Vec<u8>) -> anyhow::Result<()> {
    let model = load_model(&a.ckpt)?;
    let m = load_manifest(&a.manifest)?;
    let idx = build_index(&model, &m, seed)?;
    idx.save(&a.out)?;
    let ckpt = fs::canonicalize(&a.ckpt).unwrap_or(a.ckpt.clone());
    let mut meta = KvConfig::default();
    meta.set("checkpoint", ckpt.display());
    meta.set("seed", seed);
    write_file(&sidecar(&a.out, ".meta"), &meta.to_text())?;
    writeln!(out, "indexed {} clouds -> {}", idx.len(), a.out.display())?;
    Ok(())
}

fn query(a: QueryArgs, seed: u64, out: &mut Vec<u8>) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    let idx = DescriptorIndex::load(&a.index)?;
    let ckpt = match a.ckpt {
        Some(c) => c,
        None => {
            let meta_path = sidecar(&a.index, ".meta");
            let mut meta = KvConfig::load(&meta_path)?;
            meta.take::<PathBuf>("checkpoint")?
                .ok_or_else(|| lpdnet::Error::Format(format!("{} names no checkpoint", meta_path.display())))?
        }
    };
    let model = load_model(&ckpt)?;
    let cloud = load_network_input(&a.cloud, model.net.config().source_points(), seed)?;
    let d = model.net.forward_full(&model.params, &cloud)?;
    let mut text = String::from("rank,id,distance\n");
    for (r, h) in idx.query_topn(&d, a.n)?.iter().enumerate() {
        text.push_str(&format!("{},{},{}\n", r + 1, h.id, h.distance));
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn eval(a: EvalArgs, seed: u64, out: &mut Vec<u8>) -> anyhow::Result<()> {
    let model = load_model(&a.ckpt)?;
    let db = load_manifest(&a.manifest)?.with_radius(a.radius)?;
    let idx = build_index(&model, &db, seed)?;
    let (qm, self_match, descriptors) = match &a.queries {
        Some(q) => {
            let qm = load_manifest(q)?;
            let clouds = load_manifest_clouds(&qm, model.net.config().source_points(), seed)?;
            let d = describe_all(&model, &clouds)?;
            (qm, SelfMatch::Reject, d)
        }
        None => (db.clone(), SelfMatch::Exclude, idx.descriptors().to_vec()),
    };
    let queries: Vec<RetrievalQuery> = qm
        .records
        .iter()
        .zip(descriptors)
        .map(|(r, d)| RetrievalQuery {
            id: r.id.clone(),
            descriptor: d,
            truth: Truth::Position([r.northing, r.easting]),
        })
        .collect();
    let report = recall_at_n(&queries, &idx, a.max_n, a.radius, self_match)?;
    report.write_csv(&a.out)?;
    writeln!(out, "{}", report.summary())?;
    Ok(())
}

fn robustness(a: RobustnessArgs, seed: u64, out: &mut Vec<u8>) -> anyhow::Result<()> {
    let model = load_model(&a.ckpt)?;
    let mut places = match &model.synthetic {
        Some(s) => s.places.clone(),
        None => SyntheticPlaces {
            n_points: model.net.config().source_points(),
            seed,
            ..Default::default()
        },
    };
    if let Some(p) = a.places {
        places.places = p;
    }
    if a.observation >= places.observations {
        return Err(usage(format!(
            "--observation {} out of range (places have {})",
            a.observation, places.observations
        )));
    }
    let cfg = RobustnessConfig {
        angles_deg: a.angles.clone(),
        noise_frac: a.noise,
        repeats: a.repeats,
        observation: a.observation,
        seed,
    };
    let idx = place_index(&model.net, &model.params, &places, a.observation)?;
    let rows = robustness_eval(&model.net, &model.params, &places, &idx, &cfg)?;
    emit(a.out.as_deref(), &robustness_csv(&rows), out)
}

fn analyze(a: AnalyzeArgs, seed: u64, out: &mut Vec<u8>) -> anyhow::Result<()> {
    let idx = DescriptorIndex::load(&a.index)?;
    let text = if let Some(id) = &a.similarity {
        similarity_map(&idx, id)?.to_csv()
    } else if a.uniqueness {
        uniqueness_csv(&uniqueness(&idx)?)
    } else {
        let k = a.clusters.expect("clap enforces one analysis");
        cluster_csv(&idx, &cluster_descriptors(&idx, k, seed)?)
    };
    emit(a.out.as_deref(), &text, out)
}

fn gradcheck(a: GradcheckArgs, seed: u64, out: &mut Vec<u8>) -> anyhow::Result<()> {
    if a.entries == 0 {
        return Err(usage("--entries must be >= 1"));
    }
    let cfg = match &a.config {
        Some(p) => {
            let mut kv = KvConfig::load(p)?;
            let cfg = NetworkConfig::from_kv(&mut kv)?;
            kv.finish()?;
            cfg
        }
        None => gradcheck_config(),
    };
    let mut worst_primitive = 0.0f64;
    for (name, r) in primitive_suite(seed)? {
        writeln!(out, "primitive {name}: max rel. err {:.3e}", r.max_rel_error)?;
        worst_primitive = worst_primitive.max(r.max_rel_error);
    }
    let opts = GradCheckOptions {
        eps: a.eps,
        floor: 1e-5,
        max_entries_per_param: Some(a.entries),
        seed,
    };
    let r = loss_gradcheck(cfg, seed, &opts)?;
    writeln!(
        out,
        "network+loss: {} entries, worst {}[{}] analytic {:.6e} numeric {:.6e}",
        r.checked, r.worst_param, r.worst_index, r.worst_analytic, r.worst_numeric
    )?;
    let worst = worst_primitive.max(r.max_rel_error);
    writeln!(out, "max rel. err {worst:.3e}")?;
    if worst >= GRADCHECK_TOLERANCE {
        bail!(lpdnet::Error::NonFinite(format!(
            "gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

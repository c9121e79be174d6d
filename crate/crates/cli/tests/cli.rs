use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::CommandFactory;
use lpdnet_cli::{run, Cli, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

const TINY: &str = "\
width_scale = 0.0625
kf = 4
kc = 4
vlad_clusters = 3
output_dim = 8
k_min = 4
k_max = 8
k_step = 2
epochs = 2
lr = 0.0001
places_per_batch = 4
p_pos = 1
p_neg = 2
vlad_init_clouds = 4
";

struct Outcome {
    code: u8,
    stdout: String,
    stderr: String,
}

fn lpd(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("lpdnet").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let o = lpd(args);
    assert_eq!(o.code, EXIT_OK, "{args:?}: {}", o.stderr);
    o.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a small dataset and trains on it; returns (dir, manifest, ckpt).
fn pipeline(root: &Path, threads: &str) -> (PathBuf, PathBuf) {
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--places", "6", "--obs", "3", "--points", "64", "--threads", threads]);
    let ckpt = root.join("model.ckpt");
    ok(&[
        "train",
        "--synthetic",
        "places=6",
        "obs=3",
        "train_obs=2",
        "points=64",
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
        "--trace",
        s(&root.join("loss.csv")),
        "--threads",
        threads,
    ]);
    (data.join("manifest.csv"), ckpt)
}

#[test]
fn missing_flags_are_usage_errors() {
    let o = lpd(&["eval"]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.stderr.starts_with("error:"), "{}", o.stderr);
    assert!(o.stderr.contains("Usage"), "{}", o.stderr);
    assert_eq!(lpd(&["query", "--index", "x", "--cloud", "y", "--bogus"]).code, EXIT_USAGE);
    assert_eq!(lpd(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(lpd(&["train", "--out", "x"]).code, EXIT_USAGE);
}

#[test]
fn help_documents_every_flag() {
    let cmd = Cli::command();
    for sub in cmd.get_subcommands() {
        let name = sub.get_name();
        if name == "help" {
            continue;
        }
        let o = lpd(&[name, "--help"]);
        assert_eq!(o.code, EXIT_OK, "{name}");
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(o.stdout.contains(&format!("--{long}")), "{name} help lacks --{long}");
            }
        }
        assert!(o.stdout.contains("--seed") && o.stdout.contains("--threads"), "{name}");
    }
    assert_eq!(lpd(&["--help"]).code, EXIT_OK);
}

#[test]
fn gradcheck_passes_on_the_toy_network() {
    let out = ok(&["gradcheck"]);
    let last = out.lines().last().unwrap();
    let err: f64 = last.trim_start_matches("max rel. err ").parse().unwrap();
    assert!(err < 1e-4, "{out}");
    assert!(out.contains("primitive vlad_residual"));
}

#[test]
fn gradcheck_with_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    fs::write(
        &cfg,
        "n_points = 32\nwidth_scale = 0.0625\nkf = 4\nkc = 4\nvlad_clusters = 3\noutput_dim = 8\n\
         k_min = 4\nk_max = 8\nk_step = 2\naggregation = PC\n",
    )
    .unwrap();
    ok(&["gradcheck", "--config", s(&cfg)]);
}

#[test]
fn failed_gradcheck_is_a_numeric_failure() {
    // A huge step makes the central difference useless.
    let o = lpd(&["gradcheck", "--eps", "0.5"]);
    assert_eq!(o.code, EXIT_NUMERIC, "{}{}", o.stdout, o.stderr);
    assert!(o.stderr.starts_with("error:"));
}

#[test]
fn data_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let o = lpd(&["extract", "--cloud", s(&missing), "--out", s(&dir.path().join("f.csv"))]);
    assert_eq!(o.code, EXIT_DATA);
    assert_eq!(o.stderr.lines().count(), 1);
    assert!(o.stderr.starts_with("error:"));
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(lpd(&["gradcheck", "--config", s(&bad)]).code, EXIT_DATA);
}

#[test]
fn extract_writes_ten_features_per_point() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", s(dir.path()), "--places", "1", "--obs", "1", "--points", "128"]);
    let out = dir.path().join("f.csv");
    ok(&["extract", "--cloud", s(&dir.path().join("clouds/p000_o0.bin")), "--out", s(&out), "--k-max", "40"]);
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 129);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 11));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (manifest, ckpt) = pipeline(root, "1");
    assert!(root.join("model.ckpt.cfg").exists());
    assert!(fs::read_to_string(root.join("loss.csv")).unwrap().starts_with("epoch,batch,loss\n"));

    let index = root.join("db.idx");
    ok(&["index", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&index)]);
    assert!(root.join("db.idx.meta").exists());

    let q = ok(&["query", "--index", s(&index), "--cloud", s(&root.join("data/clouds/p002_o1.bin")), "--n", "5"]);
    let rows: Vec<&str> = q.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let dists: Vec<f64> = rows.iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(dists.windows(2).all(|w| w[0] <= w[1]), "{q}");
    // The query cloud itself is indexed.
    assert!(rows[0].contains("p2_o1") && dists[0] < 1e-6, "{q}");

    let report = root.join("recall.csv");
    let summary = ok(&["eval", "--manifest", s(&manifest), "--ckpt", s(&ckpt), "--out", s(&report), "--max-n", "3"]);
    assert!(summary.contains("recall@1="));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().next(), Some("N,recall"));
    assert_eq!(text.lines().count(), 4);

    let rob = ok(&["robustness", "--ckpt", s(&ckpt), "--angles", "1,30", "--repeats", "2"]);
    assert_eq!(rob.lines().next(), Some("angle_deg,mean_mistakes,max_mistakes"));
    assert_eq!(rob.lines().count(), 3);

    let uniq = ok(&["analyze", "--index", s(&index), "--uniqueness"]);
    assert_eq!(uniq.lines().count(), 19);
    let clusters = ok(&["analyze", "--index", s(&index), "--clusters", "3"]);
    assert_eq!(clusters.lines().next(), Some("id,label"));
    let sim = ok(&["analyze", "--index", s(&index), "--similarity", "p0_o0"]);
    assert_eq!(sim.lines().next(), Some("id,distance"));
    assert_eq!(lpd(&["analyze", "--index", s(&index), "--similarity", "nope"]).code, EXIT_DATA);
    assert_eq!(lpd(&["analyze", "--index", s(&index)]).code, EXIT_USAGE);
}

#[test]
fn denser_observations_become_the_feature_source() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, format!("{TINY}n_points = 48\n")).unwrap();
    let ckpt = root.join("m.ckpt");
    let train = |points: &str| {
        lpd(&[
            "train", "--synthetic", "places=6", "obs=3", "train_obs=2", &format!("points={points}"),
            "--config", s(&cfg), "--out", s(&ckpt),
        ])
    };
    assert_eq!(train("32").code, EXIT_USAGE);
    assert_eq!(train("64").code, EXIT_OK);
    let saved = fs::read_to_string(root.join("m.ckpt.cfg")).unwrap();
    assert!(saved.contains("n_points = 48") && saved.contains("feature_points = 64"), "{saved}");
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--places", "6", "--obs", "3", "--points", "64"]);
    let index = root.join("db.idx");
    ok(&["index", "--ckpt", s(&ckpt), "--manifest", s(&data.join("manifest.csv")), "--out", s(&index)]);
    let q = ok(&["query", "--index", s(&index), "--cloud", s(&data.join("clouds/p004_o2.bin")), "--n", "1"]);
    assert!(q.lines().nth(1).unwrap().contains("p4_o2"), "{q}");
}

#[test]
fn outputs_are_independent_of_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ma, ca) = pipeline(a.path(), "1");
    let (mb, cb) = pipeline(b.path(), "3");
    assert_eq!(fs::read(&ca).unwrap(), fs::read(&cb).unwrap());
    assert_eq!(
        fs::read(a.path().join("loss.csv")).unwrap(),
        fs::read(b.path().join("loss.csv")).unwrap()
    );
    let ia = a.path().join("i.idx");
    let ib = b.path().join("i.idx");
    ok(&["index", "--ckpt", s(&ca), "--manifest", s(&ma), "--out", s(&ia), "--threads", "1"]);
    ok(&["index", "--ckpt", s(&cb), "--manifest", s(&mb), "--out", s(&ib), "--threads", "2"]);
    assert_eq!(fs::read(&ia).unwrap(), fs::read(&ib).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let bin = env!("CARGO_BIN_EXE_lpdnet");
    let dir = tempfile::tempdir().unwrap();
    let synth = |sub: &str, seed_flag: Option<&str>, env: Option<&str>| {
        let out = dir.path().join(sub);
        let mut cmd = Command::new(bin);
        cmd.args(["synth", "--out", s(&out), "--places", "2", "--obs", "1", "--points", "64"]);
        if let Some(f) = seed_flag {
            cmd.args(["--seed", f]);
        }
        cmd.env_remove("LPD_SEED");
        if let Some(e) = env {
            cmd.env("LPD_SEED", e);
        }
        let run = cmd.output().unwrap();
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        fs::read(out.join("clouds/p001_o0.bin")).unwrap()
    };
    let flag = synth("flag", Some("7"), None);
    let env = synth("env", None, Some("7"));
    let both = synth("both", Some("7"), Some("9"));
    let default = synth("default", None, None);
    assert_eq!(flag, env);
    assert_eq!(flag, both);
    assert_ne!(flag, default);
    let status = Command::new(bin)
        .args(["synth", "--out", s(&dir.path().join("x"))])
        .env("LPD_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&status.stderr).starts_with("error:"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crackscan::PipelineConfig;
use crackscan_core::pipeline::evaluate_layers;
use crackscan_core::synthgen::{max_widths, parse_manifest};
use crackscan_core::read_ply;
use tempfile::TempDir;

const TINY: &str = "\
seed = 3
surfaces = 3
cracks_per_surface = 3
extent_x = 1.5
extent_y = 1.5
density = 6000
length_max = 0.6
separation = 0.3
d = 0.25
n = 128
s = 0.125
augment_copies = 1
max_offset = 0.125
epochs = 2
hidden = 16,16,8
delta_h = 0.4
delta_r = 0.05
delta_n = 5
";

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
        Run { dir }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn run_dir(&self) -> PathBuf {
        self.root().join("run")
    }

    fn cmd(&self, args: &[&str]) -> Output {
        let conf = self.root().join("tiny.conf");
        let run_dir = self.run_dir();
        Command::new(env!("CARGO_BIN_EXE_crackscan"))
            .args(args)
            .arg("--config")
            .arg(&conf)
            .arg("--run_dir")
            .arg(&run_dir)
            .env("RUST_LOG", "warn")
            .env_remove("CRACKSCAN_RUN_DIR")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn bare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackscan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(bare(&["--help"]).status.code(), Some(0));
    assert_eq!(bare(&["synth", "--help"]).status.code(), Some(0));
    assert_eq!(bare(&["synth", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(bare(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bare(&["synth", "--set", "bogus=1"]).status.code(), Some(1));
    assert_eq!(bare(&["synth", "--density", "lots"]).status.code(), Some(1));
}

#[test]
fn invalid_extent_is_rejected_without_output() {
    let run = Run::new();
    let out = run.cmd(&["synth", "--extent_x", "-1"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.run_dir().join("synth").exists());
}

#[test]
fn missing_inputs_are_data_errors() {
    let run = Run::new();
    assert_eq!(run.cmd(&["prepare"]).status.code(), Some(2));
    assert_eq!(run.cmd(&["detect"]).status.code(), Some(2));
    assert_eq!(run.cmd(&["evaluate"]).status.code(), Some(2));
}

#[test]
fn print_config_reflects_overrides() {
    let run = Run::new();
    let out = run.cmd(&["train", "--print-config", "--set", "gamma=2", "--epochs", "7"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let config = PipelineConfig::parse(&text).unwrap();
    assert_eq!(config.gamma, 2.0);
    assert_eq!(config.epochs, 7);
    assert_eq!(config.surfaces, 3);
    assert!(!run.run_dir().exists());
}

#[test]
fn synth_is_reproducible_and_honors_the_env_run_dir() {
    let root = tempfile::tempdir().unwrap();
    let conf = root.path().join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let synth = |dir: &Path| {
        let out = Command::new(env!("CARGO_BIN_EXE_crackscan"))
            .arg("synth")
            .arg("--config")
            .arg(&conf)
            .env("CRACKSCAN_RUN_DIR", dir)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        read_dir_bytes(&dir.join("synth"))
    };
    let a = synth(&root.path().join("a"));
    let b = synth(&root.path().join("b"));
    assert_eq!(a.len(), 4, "three clouds and the manifest");
    assert_eq!(a, b);
}

#[test]
fn pipeline_metrics_match_the_library() {
    let run = Run::new();
    for args in [
        &["synth"][..],
        &["prepare"],
        &["train"],
        &["detect", "--split", "val"],
        &["detect"],
        &["evaluate"],
        &["export-viz"],
    ] {
        run.ok(args);
    }
    let rd = run.run_dir();
    let mut stages: Vec<String> = fs::read_dir(&rd)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    stages.sort();
    assert_eq!(stages, ["detect", "evaluate", "prepare", "synth", "train", "viz"]);

    let config = PipelineConfig::parse(TINY).unwrap();
    let mut clouds = Vec::new();
    let mut layers = Vec::new();
    let mut paths: Vec<_> = fs::read_dir(rd.join("detect/test"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    paths.sort();
    for p in paths {
        let c = read_ply(&p).unwrap();
        layers.push(c.annotations.unwrap());
        clouds.push(c.cloud);
    }
    let widths = max_widths(&parse_manifest(&fs::read_to_string(rd.join("synth/cracks.tsv")).unwrap()).unwrap());
    let report = evaluate_layers(&clouds, &layers, &config.clustering(), config.match_alpha, Some(&widths)).unwrap();
    let written = fs::read_to_string(rd.join("evaluate/test/metrics.txt")).unwrap();
    assert_eq!(written, report.to_text());
    assert_eq!(
        read_dir_bytes(&rd.join("viz/test")).len(),
        clouds.len(),
        "one colored cloud per test cloud"
    );
}

#[test]
fn sweep_trains_every_cell_and_divergence_exits_3() {
    let run = Run::new();
    run.ok(&["synth"]);
    run.ok(&["prepare"]);
    run.ok(&["train", "--sweep", "true", "--epochs", "1"]);
    let sweep = run.run_dir().join("train/sweep");
    let cells: Vec<_> = fs::read_dir(&sweep).unwrap().collect();
    assert_eq!(cells.len(), 20);
    for cell in cells {
        assert!(cell.unwrap().path().join("history.tsv").is_file());
    }
    let table = fs::read_to_string(run.run_dir().join("train/sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 21);

    let before = fs::read(run.run_dir().join("train/model.bin")).unwrap();
    let out = run.cmd(&["train", "--learning_rate", "1e308", "--epochs", "3"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(run.run_dir().join("train/model.bin")).unwrap(), before);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clustr::clustering::ClusterModel;
use clustr::datasets::{load_csv, save_csv, LabeledDataset};
use clustr::metric::MagnetConfig;
use clustr::nn::{Activation, Dense, DenseNet};
use clustr::seed::{derive, stage};
use clustr::train::{ArchConfig, Pipeline, TrainConfig, TrainedArtifact};

const SMALL: &str = r#"
seed = 3

[data]
dataset = "moons"
n = 200
noise = 0.1

[train]
pipeline = "clustr"
warm_epochs = 5
finetune_epochs = 5
"#;

fn clustr(args: &[&str]) -> Output {
    clustr_env(args, None)
}

fn clustr_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clustr"));
    cmd.args(args).env_remove("CLUSTR_SEED");
    if let Some(s) = seed {
        cmd.env("CLUSTR_SEED", s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_small(dir: &Path, name: &str) -> PathBuf {
    let cfg = write(dir, &format!("{name}.toml"), SMALL);
    let out = dir.join(name);
    let o = clustr(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn missing_pipeline_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[data]\ndataset = \"moons\"\n\n[train]\nwarm_epochs = 1\n");
    let o = clustr(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pipeline"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &SMALL.replace("[train]\n", "[train]\nlearnig_rate = 1\n"));
    let o = clustr(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));
}

#[test]
fn magnet_with_zero_epochs_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "seed = 9\n[data]\ndataset = \"circles\"\nn = 100\n[train]\npipeline = \"magnet\"\nfinetune_epochs = 0\n",
    );
    let out = dir.path().join("o");
    let o = clustr(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = TrainedArtifact::load(out.join("artifact.json")).unwrap();
    let init = DenseNet::init(&ArchConfig::default().dims(2), derive(9, stage::INIT, &[])).unwrap();
    assert_eq!(a.net, init);
    let net: DenseNet = serde_json::from_str(&fs::read_to_string(out.join("network.json")).unwrap()).unwrap();
    assert_eq!(net, init);
    let _: ClusterModel = serde_json::from_str(&fs::read_to_string(out.join("clusters.json")).unwrap()).unwrap();
    assert!(csv_rows(&out.join("history.csv")).is_empty());
}

#[test]
fn train_writes_everything_and_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), "a");
    for f in ["artifact.json", "network.json", "clusters.json", "history.csv", "train.csv", "test.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["train"]["samples_per_cluster"], 8);
    assert!(manifest["results"]["test_accuracy"].as_f64().is_some());
    assert_eq!(csv_rows(&out.join("history.csv")).len(), 10);

    let again = dir.path().join("again");
    let o = clustr(&["train", "--config", s(&out.join("manifest.json")), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["artifact.json", "network.json", "clusters.json", "history.csv", "train.csv", "test.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_env_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("o");
    let o = clustr_env(&["train", "--config", s(&cfg), "--out", s(&out)], Some("42"));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(TrainedArtifact::load(out.join("artifact.json")).unwrap().seed, 42);

    let bad = clustr_env(&["train", "--config", s(&cfg), "--out", s(&out)], Some("forty-two"));
    assert_eq!(code(&bad), 2);
}

#[test]
fn certify_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), "a");
    let (art, test) = (out.join("artifact.json"), out.join("test.csv"));

    let o = clustr(&["certify", "--artifact", s(&art), "--data", s(&test), "--grid", "", "--out", s(&dir.path().join("e"))]);
    assert_eq!(code(&o), 2);

    let c = dir.path().join("c");
    let o = clustr(&["certify", "--artifact", s(&art), "--data", s(&test), "--grid", "0", "--out", s(&c)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let curve = csv_rows(&c.join("curve.csv"));
    assert_eq!(curve.len(), 1);
    let certs = csv_rows(&c.join("certificates.csv"));
    let positive = certs.iter().filter(|r| r[3] == "true" && r[4].parse::<f64>().unwrap() > 0.0).count();
    assert_eq!(curve[0][1].parse::<f64>().unwrap(), positive as f64 / certs.len() as f64);

    let o = clustr(&["certify", "--artifact", s(&art), "--data", s(&test), "--grid", "0:0.1:11", "--out", s(&c)]);
    assert_eq!(code(&o), 0);
    let acc: Vec<f64> = csv_rows(&c.join("curve.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(acc.len(), 11);
    assert!(acc.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn attack_emits_every_objective() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), "a");
    let cfg = write(
        dir.path(),
        "atk.toml",
        "norm = \"linf\"\nepsilons = [0.05, 0.0]\neta = 0.01\niterations = [5]\nrestarts = 2\nobjectives = [\"all\"]\n",
    );
    let a = dir.path().join("atk");
    let o = clustr(&[
        "attack", "--artifact", s(&out.join("artifact.json")), "--data", s(&out.join("test.csv")),
        "--config", s(&cfg), "--out", s(&a),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&a.join("attack.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().any(|r| r[4] == "ce_vs_label") && rows.iter().any(|r| r[4] == "magnet_loss"));
    let artifact = TrainedArtifact::load(out.join("artifact.json")).unwrap();
    let clean = artifact.accuracy(&load_csv(out.join("test.csv"), Some(2)).unwrap()).unwrap();
    for r in rows.iter().filter(|r| r[1] == "0.0") {
        assert_eq!(r[5].parse::<f64>().unwrap(), clean);
    }

    let bad = write(dir.path(), "bad.toml", "norm = \"linf\"\nepsilons = [-0.1]\neta = 0.01\niterations = [5]\n");
    let o = clustr(&[
        "attack", "--artifact", s(&out.join("artifact.json")), "--data", s(&out.join("test.csv")),
        "--config", s(&bad), "--out", s(&a),
    ]);
    assert_eq!(code(&o), 2);
}

/// A 1-D linear feature map whose spectral bound is its exact Lipschitz
/// constant, so halving it must produce falsifiable certificates.
fn linear_artifact(dir: &Path) -> (PathBuf, PathBuf) {
    let w = 3.0;
    let net = DenseNet::new(vec![Dense::from_rows(vec![vec![w]], vec![0.0], Activation::Identity).unwrap()]).unwrap();
    let model = ClusterModel::new(vec![vec![vec![w * 0.2]], vec![vec![w * 0.8]]], Vec::new(), 0.1).unwrap();
    let mut config = TrainConfig::new(Pipeline::Magnet);
    config.warm_epochs = 0;
    let a = TrainedArtifact {
        net,
        cluster_model: Some(model),
        magnet: MagnetConfig::default(),
        history: Vec::new(),
        arch: ArchConfig { hidden: Vec::new(), feature_dim: 1 },
        config,
        seed: 0,
    };
    let art = dir.join("linear.json");
    a.save(&art).unwrap();
    let xs = [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9];
    let data = LabeledDataset::new(xs.iter().map(|&x| vec![x]).collect(), xs.iter().map(|&x| usize::from(x > 0.5)).collect(), 2)
        .unwrap();
    let csv = dir.join("linear.csv");
    save_csv(&data, &csv).unwrap();
    (art, csv)
}

#[test]
fn falsify_passes_when_sound_and_catches_a_halved_constant() {
    let dir = tempfile::tempdir().unwrap();
    let (art, data) = linear_artifact(dir.path());
    let args = |out: &Path, extra: &[&str]| {
        let mut v = vec!["falsify".to_string(), "--artifact".into(), s(&art).into(), "--data".into(), s(&data).into()];
        v.extend(["--iterations", "20", "--restarts", "3", "--out", s(out)].map(String::from));
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    let sound = dir.path().join("sound");
    let v = args(&sound, &[]);
    let o = clustr(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(sound.join("falsify.json")).unwrap()).unwrap();
    assert_eq!(rep["violations"], 0);
    assert_eq!(rep["tested"], 8);

    let broken = dir.path().join("broken");
    let v = args(&broken, &["--lipschitz-scale", "0.5"]);
    let o = clustr(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 3);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(broken.join("falsify.json")).unwrap()).unwrap();
    assert!(rep["violations"].as_u64().unwrap() > 0);
}

#[test]
fn falsify_on_a_trained_model_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), "a");
    let f = dir.path().join("f");
    let o = clustr(&[
        "falsify", "--artifact", s(&out.join("artifact.json")), "--data", s(&out.join("test.csv")),
        "--iterations", "20", "--restarts", "5", "--out", s(&f),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn ablation_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "n.toml", &SMALL.replace("\"clustr\"", "\"nominal\""));
    let ab = dir.path().join("ab");
    let o = clustr(&["ablate-ce", "--config", s(&cfg), "--out", s(&ab)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    assert!(rep["ce_accuracy"].as_f64().is_some() && rep["cluster_accuracy"].as_f64().is_some());

    let tr = train_small(dir.path(), "t");
    let md = dir.path().join("report.md");
    let o = clustr(&["report", s(&ab), s(&tr), "--out", s(&md)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(md).unwrap();
    assert!(text.contains("| ablate-ce |") && text.contains("| train |"));
}

#[test]
fn missing_files_are_other_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = clustr(&[
        "certify", "--artifact", s(&dir.path().join("none.json")), "--data", s(&dir.path().join("none.csv")),
        "--out", s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(!stderr(&o).is_empty());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in fs::read_dir(&root).unwrap() {
        let p = entry.unwrap().path();
        let text = fs::read_to_string(&p).unwrap();
        if p.file_name().unwrap() == "attack.toml" {
            let _: clustr::cli::AttackFile = toml::from_str(&text).unwrap();
        } else {
            clustr::cli::RunConfig::load(&p).unwrap();
        }
    }
}

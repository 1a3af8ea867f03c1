use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairconf::conformal::read_prediction_sets;
use fairconf::pipeline::SynthManifest;
use fairconf::seed;

const CONFIG: &str = r#"
seed = 11
alpha = 0.2
report_axes = ["all", "sex", "sex+age_band"]
output_dir = "out"

[synth]
n_classes = 2
embedding_dim = 8
class_counts = [150, 60]
class_separation = 2.5
noise_sigma = 1.0
class_names = ["benign", "malignant"]

[split]
train = 0.6
validation = 0.15
test = 0.15
calibration = 0.1

[train]
epochs = 6
batch_size = 32

[sampler]
update_period = 2
"#;

fn fairconf(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairconf"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(body: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipeline.toml");
    fs::write(&cfg, body).unwrap();
    (dir, cfg)
}

#[test]
fn synth_writes_files_and_manifest() {
    let (dir, cfg) = setup(CONFIG);
    ok(fairconf(&["synth"], &cfg));
    let out = dir.path().join("out");
    for f in ["embeddings.jsonl", "labels.csv", "metadata.csv", "synth_manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let first = fs::read(out.join("embeddings.jsonl")).unwrap();
    let manifest: SynthManifest = serde_json::from_slice(&fs::read(out.join("synth_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.synth_seed, seed::stream_seed(11, seed::SYNTH));
    assert_eq!(manifest.config.seed, manifest.synth_seed);
    assert_eq!(manifest.n_samples, 210);

    ok(fairconf(&["synth"], &cfg));
    assert_eq!(fs::read(out.join("embeddings.jsonl")).unwrap(), first);
}

#[test]
fn full_pipeline_and_overrides() {
    let (dir, cfg) = setup(CONFIG);
    let out = dir.path().join("out");
    ok(fairconf(&["train"], &cfg));
    let ckpt = fs::read(out.join("model.ckpt")).unwrap();
    let history: serde_json::Value = serde_json::from_slice(&fs::read(out.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["epoch_loss"].as_array().unwrap().len(), 6);

    ok(fairconf(&["train"], &cfg));
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), ckpt);

    let printed = ok(fairconf(&["audit"], &cfg));
    // 21 calibration samples: band [0.8, 0.8 + 1/22].
    assert!(printed.contains("n_calibration 21"), "{printed}");
    assert!(printed.contains("guaranteed band [0.8000, 0.8455]"), "{printed}");
    let sets = read_prediction_sets(&out.join("prediction_sets.jsonl")).unwrap();
    // 22 + 9 test samples from the stratified split.
    assert_eq!(sets.len(), 31);
    let report = out.join("report");
    for f in [
        "fairness_report.json",
        "set_size_by_sex.csv",
        "a2_by_sex_by_age_band_class.csv",
        "truth_confidence_malignant.csv",
        "toptwo_confidence_benign.csv",
        "site_ranking_malignant.csv",
    ] {
        assert!(report.join(f).is_file(), "{f}");
    }

    // `report` rebuilds byte-identical tables from the set file.
    let before = fs::read(report.join("fairness_report.json")).unwrap();
    fs::remove_dir_all(&report).unwrap();
    ok(fairconf(&["report"], &cfg));
    assert_eq!(fs::read(report.join("fairness_report.json")).unwrap(), before);

    let alt = dir.path().join("alt");
    let printed = ok(fairconf(
        &["audit", "--alpha", "0.1", "--out", alt.to_str().unwrap(), "--checkpoint", out.join("model.ckpt").to_str().unwrap()],
        &cfg,
    ));
    assert!(printed.contains("alpha 0.1"), "{printed}");

    let reseeded = dir.path().join("reseeded");
    ok(fairconf(&["train", "--seed", "12", "--out", reseeded.to_str().unwrap()], &cfg));
    assert_ne!(fs::read(reseeded.join("model.ckpt")).unwrap(), ckpt);
}

#[test]
fn unsampled_flag_changes_training() {
    let (dir, cfg) = setup(CONFIG);
    let out = dir.path().join("out");
    ok(fairconf(&["train"], &cfg));
    let sampled = fs::read(out.join("history.json")).unwrap();
    ok(fairconf(&["train", "--unsampled"], &cfg));
    let unsampled = fs::read(out.join("history.json")).unwrap();
    assert_ne!(sampled, unsampled);
    let h: serde_json::Value = serde_json::from_slice(&unsampled).unwrap();
    assert!(h["sampler_weights"].as_array().unwrap().iter().all(|w| w.is_null()));
}

#[test]
fn exit_codes() {
    let (_dir, cfg) = setup("seed = 1\nalpha = 0.2\n");
    assert_eq!(fairconf(&["synth"], &cfg).status.code(), Some(2));

    let (_dir, cfg) = setup(CONFIG);
    assert_eq!(fairconf(&["audit", "--alpha", "1.5"], &cfg).status.code(), Some(2));
    // No checkpoint has been trained yet.
    let missing = fairconf(&["audit"], &cfg);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("model.ckpt"));

    let (_dir, cfg) = setup("seed = 1\nalpha = 0.2\n\n[data]\nembeddings = \"none.jsonl\"\nlabels = \"none.csv\"\n");
    assert_eq!(fairconf(&["train"], &cfg).status.code(), Some(3));
}

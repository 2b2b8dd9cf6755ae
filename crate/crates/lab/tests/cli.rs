//! End-to-end exercises of the `fewshot` binary: a miniature pipeline from
//! data generation through figures, plus failure and determinism checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fewshot_lab::manifest;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fewshot")
}

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--output-root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary should spawn")
}

/// Runs a command that must succeed and returns its run directory.
fn run_ok(root: &Path, args: &[&str]) -> PathBuf {
    let out = run(root, args);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    let dir = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory line in:\n{stdout}"))
        .to_string();
    PathBuf::from(dir)
}

fn s(path: &Path) -> String {
    path.to_str().expect("utf-8 path").to_string()
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // Data: 9 tiny classes split 4/3/2 (validation episodes below are 3-way).
    let gen = run_ok(
        &root.join("gen"),
        &[
            "gen-data", "--n-classes", "9", "--samples-per-class", "12",
            "--channels", "1", "--height", "8", "--width", "8",
            "--train-classes", "4", "--val-classes", "3", "--test-classes", "2",
            "--data-seed", "7",
        ],
    );
    let train_data = gen.join("data/train.fsa");
    let val_data = gen.join("data/val.fsa");
    let test_data = gen.join("data/test.fsa");

    // A small relation-head classifier.
    let trained = run_ok(
        &root.join("train"),
        &[
            "train-model",
            "--train-data", &s(&train_data), "--val-data", &s(&val_data),
            "--head", "relation", "--base-channels", "6", "--init-seed", "5",
            "--epochs", "2", "--episodes-per-epoch", "8",
            "--ways", "3", "--shots", "3", "--queries-total", "9",
            "--learning-rate", "3e-3", "--val-episodes", "4", "--train-seed", "5",
        ],
    );
    let model = trained.join("checkpoints/model.fsa");
    assert!(trained.join("training_history.csv").is_file());

    // The preservation-trained autoencoder filter.
    let ae_run = run_ok(
        &root.join("ae"),
        &[
            "train-ae",
            "--train-data", &s(&train_data), "--val-data", &s(&val_data),
            "--model", &s(&model), "--variant", "fpa",
            "--epochs-standard", "1", "--epochs-finetune", "2",
            "--learning-rate", "1e-3", "--batch-size", "8",
            "--reference-ways", "3", "--reference-shots", "3", "--ae-seed", "0",
        ],
    );
    let autoencoder = ae_run.join("checkpoints/autoencoder.fsa");

    // Attack configuration comes from a YAML file; the seed from a flag.
    let cfg_path = root.join("attack.yaml");
    fs::write(&cfg_path, "attack:\n  kind: pgd\n  epsilon: 12/255\n  iterations: 4\n").unwrap();
    let attacked = run_ok(
        &root.join("atk"),
        &[
            "--config", &s(&cfg_path),
            "attack",
            "--model", &s(&model), "--data", &s(&test_data),
            "--ways", "2", "--shots", "3", "--queries-per-episode", "4",
            "--sets-per-class", "1", "--attack-seed", "3",
        ],
    );
    let records = attacked.join("perturbations");
    let rec_files: Vec<_> = fs::read_dir(&records).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(rec_files.len(), 2, "one record per test class");
    let atk_manifest = manifest::read_manifest(&attacked).unwrap();
    assert_eq!(atk_manifest.provenance["attack.epsilon"], "file");
    assert_eq!(atk_manifest.provenance["attack.seed"], "flag");
    assert_eq!(
        atk_manifest.config["epsilon"].as_f64().unwrap(),
        12.0 / 255.0,
        "fraction syntax must resolve exactly"
    );

    // Detection scores with the default filter bank plus the autoencoder.
    let detect_args = [
        "detect",
        "--model", &s(&model), "--data", &s(&test_data),
        "--records", &s(&records), "--autoencoders", &s(&autoencoder),
        "--clean-sets-per-class", "2", "--detect-seed", "0",
    ];
    let detected = run_ok(&root.join("det"), &detect_args);
    let scores = detected.join("scores/detection_scores.csv");
    let score_text = fs::read_to_string(&scores).unwrap();
    // 6 support sets (2 classes x 2 clean + 2 attacked), 4 filters, 2 statistics.
    assert_eq!(score_text.lines().count(), 2 + 48, "plan line + header + rows");
    assert!(score_text.contains("fpa"), "autoencoder filter missing from scores");

    // Same inputs, fresh run: detection must reproduce byte-identically.
    let detected_again = run_ok(&root.join("det2"), &detect_args);
    assert_eq!(
        fs::read(&scores).unwrap(),
        fs::read(detected_again.join("scores/detection_scores.csv")).unwrap(),
        "detection scores are not deterministic"
    );

    // Tables: baseline accuracy, ASR with controls, detection AUROC.
    let evaluated = run_ok(
        &root.join("eval"),
        &[
            "evaluate",
            "--model", &s(&model), "--data", &s(&test_data),
            "--records", &s(&records), "--scores", &s(&scores),
            "--n-eval-episodes", "4", "--ways", "2", "--shots", "3",
            "--queries-total", "4", "--eval-seed", "1",
        ],
    );
    let tables = evaluated.join("tables");
    for table in ["baseline.csv", "transferability.csv", "detection_auroc.csv"] {
        assert!(tables.join(table).is_file(), "missing table {table}");
    }
    let asr = fs::read_to_string(tables.join("transferability.csv")).unwrap();
    assert!(asr.contains("pgd"), "attack rows missing:\n{asr}");
    assert!(asr.contains("none"), "zero-perturbation control rows missing:\n{asr}");
    assert!(asr.contains("fixed_supports") && asr.contains("new_supports"), "{asr}");

    // Figures next to their numbers.
    let reported = run_ok(&root.join("rep"), &["report", "--tables", &s(&tables)]);
    for figure in ["accuracy_by_model", "asr_by_attack", "detection_auroc"] {
        let svg = reported.join(format!("figures/{figure}.svg"));
        let csv = reported.join(format!("figures/{figure}.csv"));
        assert!(svg.is_file(), "missing {figure}.svg");
        assert!(csv.is_file(), "missing {figure}.csv");
        assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    }
    let rep_manifest = manifest::read_manifest(&reported).unwrap();
    assert!(!rep_manifest.incomplete);
    assert_eq!(rep_manifest.artifacts.len(), 6);
}

#[test]
fn report_on_an_empty_tables_dir_fails_with_a_clear_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("tables");
    fs::create_dir(&empty).unwrap();
    let out = run(tmp.path(), &["report", "--tables", &s(&empty)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no result tables"), "stderr was:\n{stderr}");
}

#[test]
fn config_errors_name_the_offending_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &["attack", "--model", "m", "--data", "d", "--epsilon", "-0.5"],
    );
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2), "config errors exit with 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("attack.epsilon"), "stderr was:\n{stderr}");

    let bad = tmp.path().join("bad.yaml");
    fs::write(&bad, "attack:\n  epsilonn: 0.1\n").unwrap();
    let out = run(tmp.path(), &["--config", &s(&bad), "attack", "--model", "m", "--data", "d"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("epsilonn"), "stderr was:\n{stderr}");
}

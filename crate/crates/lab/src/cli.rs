//! Command execution: wires resolved configs to the numerics crate and the
//! on-disk run layout.
//!
//! Every command runs inside a fresh run directory (see [`crate::manifest`])
//! and finishes by writing a manifest there. A failed command still writes
//! its manifest, marked incomplete, so partial runs are inspectable.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fewshot_core::attacks::{run_cw_sgd, run_pgd, AttackConfig, AttackKind, PerturbationRecord, Scenario};
use fewshot_core::episodes::{generate_synthetic, Split, SyntheticSpec};
use fewshot_core::filters::{train_autoencoder, AeHyperparams, FilterFunction, FilterKind};
use fewshot_core::models::{evaluate_accuracy, train_episodic, FewShotModel, ModelConfig, TrainConfig};
use fewshot_core::tensor::{ImageShape, Tensor};

use crate::config::{
    AttackCmdConfig, CommandConfig, DetectConfig, EvaluateConfig, GenDataConfig, ReportConfig,
    ResolvedRun, TrainAeConfig, TrainModelConfig,
};
use crate::error::{IoContext, LabError, Result};
use crate::experiments::{
    aggregate_accuracy, aggregate_asr, aggregate_detection, derive_seed, draw_clean_supports,
    score_cases, write_result_rows, SupportSetCase,
};
use crate::manifest::{self, Manifest};
use crate::scores::{
    read_scores, write_accuracy_rows, write_asr_rows, write_scores, AccuracyRow, AsrRow,
};
use crate::{checkpoints, data, records, report};

/// A finished run: where it lives and the manifest that was written there.
#[derive(Debug)]
pub struct ExecOutcome {
    pub run_dir: PathBuf,
    pub manifest: Manifest,
}

/// Executes a resolved command in a fresh run directory and writes the
/// manifest. On failure the manifest is still written, flagged incomplete.
pub fn execute(run: ResolvedRun) -> Result<ExecOutcome> {
    let plan_hash = manifest::plan_hash(&run.command)?;
    let run_dir = manifest::create_run_dir(&run.output_root, &plan_hash)?;
    let config = serde_json::to_value(&run.command)
        .map_err(|e| LabError::run(format!("config not encodable: {e}")))?;
    let mut m = Manifest {
        command: run.command.name().to_string(),
        plan_hash,
        config,
        provenance: run.provenance,
        artifacts: Vec::new(),
        timings_ms: BTreeMap::new(),
        warnings: Vec::new(),
        incomplete: false,
    };
    let started = Instant::now();
    let result = dispatch(&run.command, &run_dir, &mut m);
    m.timings_ms.insert(String::from("total"), started.elapsed().as_millis() as u64);
    match result {
        Ok(()) => {
            m.artifacts = manifest::collect_artifacts(&run_dir)?;
            manifest::write_manifest(&run_dir, &m)?;
            Ok(ExecOutcome { run_dir, manifest: m })
        }
        Err(e) => {
            m.incomplete = true;
            m.warnings.push(format!("run failed: {e}"));
            if let Ok(arts) = manifest::collect_artifacts(&run_dir) {
                m.artifacts = arts;
            }
            let _ = manifest::write_manifest(&run_dir, &m);
            Err(e)
        }
    }
}

fn dispatch(cmd: &CommandConfig, run_dir: &Path, m: &mut Manifest) -> Result<()> {
    match cmd {
        CommandConfig::GenData(cfg) => exec_gen_data(cfg, run_dir, m),
        CommandConfig::TrainModel(cfg) => exec_train_model(cfg, run_dir, m),
        CommandConfig::TrainAe(cfg) => exec_train_ae(cfg, run_dir, m),
        CommandConfig::Attack(cfg) => exec_attack(cfg, run_dir, m),
        CommandConfig::Detect(cfg) => exec_detect(cfg, run_dir, m),
        CommandConfig::Evaluate(cfg) => exec_evaluate(cfg, run_dir, m),
        CommandConfig::Report(cfg) => exec_report(cfg, run_dir, m),
    }
}

fn time_phase(m: &mut Manifest, phase: &str, t: Instant) {
    m.timings_ms.insert(phase.to_string(), t.elapsed().as_millis() as u64);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn exec_gen_data(cfg: &GenDataConfig, run_dir: &Path, m: &mut Manifest) -> Result<()> {
    let t = Instant::now();
    let (train, val, test) = if let Some(root) = &cfg.image_root {
        let spec_path = cfg.split_spec.as_ref().expect("checked during resolution");
        let spec = data::load_split_spec(spec_path)?;
        (
            data::load_image_folder(root, Split::Train, spec.classes_of(Split::Train), cfg.resize)?,
            data::load_image_folder(root, Split::Val, spec.classes_of(Split::Val), cfg.resize)?,
            data::load_image_folder(root, Split::Test, spec.classes_of(Split::Test), cfg.resize)?,
        )
    } else {
        let spec = SyntheticSpec {
            n_classes: cfg.n_classes,
            samples_per_class: cfg.samples_per_class,
            image_shape: ImageShape::new(cfg.channels, cfg.height, cfg.width),
            class_signal_strength: cfg.signal,
            noise_std: cfg.noise_std,
            seed: cfg.seed,
        };
        generate_synthetic(&spec)?.partition_classes(
            cfg.train_classes,
            cfg.val_classes,
            cfg.test_classes,
        )?
    };
    let dir = run_dir.join("data");
    fs::create_dir_all(&dir).at(&dir)?;
    for ds in [&train, &val, &test] {
        data::save_dataset(&dir.join(format!("{}.fsa", ds.split())), ds)?;
        println!(
            "{}: {} classes, {} images, {}",
            ds.split(),
            ds.n_classes(),
            ds.iter_classes().map(|(_, v)| v.len()).sum::<usize>(),
            ds.image_shape()
        );
    }
    time_phase(m, "generate", t);
    Ok(())
}

// ---------------------------------------------------------------------------
// train-model
// ---------------------------------------------------------------------------

fn exec_train_model(cfg: &TrainModelConfig, run_dir: &Path, m: &mut Manifest) -> Result<()> {
    let train_ds = data::load_dataset(&cfg.train_data)?;
    let val_ds = data::load_dataset(&cfg.val_data)?;
    let model_cfg = ModelConfig {
        head_kind: cfg.head,
        input_shape: train_ds.image_shape(),
        base_channels: cfg.base_channels,
        relation_hidden: cfg.relation_hidden,
        init_seed: cfg.init_seed,
    };
    let model = FewShotModel::new(model_cfg)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        episodes_per_epoch: cfg.episodes_per_epoch,
        ways: cfg.ways,
        shots: cfg.shots,
        queries_total: cfg.queries_total,
        learning_rate: cfg.learning_rate,
        val_episodes: cfg.val_episodes,
        seed: cfg.seed,
    };
    let t = Instant::now();
    let (trained, history) = train_episodic(model, &train_ds, &val_ds, &tc)?;
    time_phase(m, "train", t);
    for e in &history {
        println!(
            "epoch {:>3}: train loss {:.4}, val accuracy {:.3}",
            e.epoch, e.train_loss, e.val_accuracy
        );
    }
    if let Some(last) = history.last() {
        println!("best val accuracy {:.3}", last.best_val_accuracy);
    }
    let dir = run_dir.join("checkpoints");
    fs::create_dir_all(&dir).at(&dir)?;
    checkpoints::save_model(&dir.join("model.fsa"), &trained, Some(&tc), &history)?;
    crate::scores::write_rows(&run_dir.join("training_history.csv"), &m.plan_hash, &history)?;
    println!("model fingerprint {:016x}", trained.fingerprint());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-ae
// ---------------------------------------------------------------------------

fn exec_train_ae(cfg: &TrainAeConfig, run_dir: &Path, m: &mut Manifest) -> Result<()> {
    let train_ds = data::load_dataset(&cfg.train_data)?;
    let val_ds = data::load_dataset(&cfg.val_data)?;
    let paired = match &cfg.model {
        Some(path) => Some(checkpoints::load_model(path)?.0),
        None => None,
    };
    let hp = AeHyperparams {
        epochs_standard: cfg.epochs_standard,
        epochs_finetune: cfg.epochs_finetune,
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        lr_step_epochs: cfg.lr_step_epochs,
        lr_gamma: cfg.lr_gamma,
        batch_size: cfg.batch_size,
        reference_ways: cfg.reference_ways,
        reference_shots: cfg.reference_shots,
        augment: cfg.augment,
        denoise_max_std: cfg.denoise_max_std,
        seed: cfg.seed,
    };
    let t = Instant::now();
    let (ae, history) = train_autoencoder(&train_ds, &val_ds, paired.as_ref(), cfg.variant, &hp)?;
    time_phase(m, "train", t);
    for e in &history {
        println!(
            "{:?} epoch {:>3}: train loss {:.5}, val loss {:.5}",
            e.stage, e.epoch, e.train_loss, e.val_loss
        );
    }
    let dir = run_dir.join("checkpoints");
    fs::create_dir_all(&dir).at(&dir)?;
    checkpoints::save_autoencoder(&dir.join("autoencoder.fsa"), &ae, Some(&hp), &history)?;
    crate::scores::write_rows(&run_dir.join("training_history.csv"), &m.plan_hash, &history)?;
    println!("autoencoder fingerprint {:016x} ({})", ae.fingerprint(), ae.variant());
    Ok(())
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

fn exec_attack(cfg: &AttackCmdConfig, run_dir: &Path, m: &mut Manifest) -> Result<()> {
    let (model, _) = checkpoints::load_model(&cfg.model)?;
    let ds = data::load_dataset(&cfg.data)?;
    let targets: Vec<String> = if cfg.targets.is_empty() {
        ds.classes().to_vec()
    } else {
        for class in &cfg.targets {
            ds.class_samples(class)?;
        }
        cfg.targets.clone()
    };
    let dir = run_dir.join("perturbations");
    fs::create_dir_all(&dir).at(&dir)?;
    let t = Instant::now();
    for class in &targets {
        for set in 0..cfg.sets_per_class {
            let acfg = AttackConfig {
                kind: cfg.kind,
                epsilon: cfg.epsilon,
                eta: cfg.eta,
                iterations: cfg.iterations,
                kappa: cfg.kappa,
                const_weight: cfg.const_weight,
                seed: derive_seed(cfg.seed, class, set as u64),
            };
            let outcome = match cfg.kind {
                AttackKind::Pgd => run_pgd(
                    &model, &ds, class, cfg.ways, cfg.shots, cfg.queries_per_episode, &acfg,
                )?,
                AttackKind::CwSgd => run_cw_sgd(
                    &model, &ds, class, cfg.ways, cfg.shots, cfg.queries_per_episode, &acfg,
                )?,
            };
            for w in &outcome.warnings {
                m.warnings.push(format!("{class} set {set}: {w}"));
            }
            let name = format!("{class}__{}__{set:03}.fsa", cfg.kind);
            records::save_record(&dir.join(&name), &outcome.record)?;
            println!(
                "{name}: final loss {:.4}, linf {:.4}, l2 {:.4}",
                outcome.record.loss_trace.last().copied().unwrap_or(f64::NAN),
                outcome.record.linf(),
                outcome.record.l2(),
            );
        }
    }
    time_phase(m, "attack", t);
    Ok(())
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

fn verify_sha256(path: &Path, expected: Option<&String>) -> Result<()> {
    if let Some(expected) = expected {
        let got = manifest::sha256_file(path)?;
        if &got != expected {
            return Err(LabError::run(format!(
                "checksum mismatch for {}: expected {expected}, got {got}",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Loads every `.fsa` under `dir` in file-name order.
fn load_records_dir(dir: &Path) -> Result<Vec<(String, PerturbationRecord)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .at(dir)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "fsa"));
    paths.sort();
    if paths.is_empty() {
        return Err(LabError::run(format!(
            "no perturbation records (*.fsa) under {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((stem, records::load_record(&path)?));
    }
    Ok(out)
}

/// Builds the filter bank: the parameter-free trio plus loaded autoencoders
/// by default, or exactly the kinds asked for.
fn build_filters(cfg: &DetectConfig, model: &FewShotModel) -> Result<Vec<FilterFunction>> {
    let mut aes = Vec::new();
    for path in &cfg.autoencoders {
        let (ae, _) = checkpoints::load_autoencoder(path)?;
        ae.usable_as_filter()
            .map_err(|e| LabError::run(format!("{}: {e}", path.display())))?;
        let f = FilterFunction::Fpa(ae);
        f.check_compatible(model)
            .map_err(|e| LabError::run(format!("{}: {e}", path.display())))?;
        aes.push(f);
    }
    if cfg.filters.is_empty() {
        let mut kinds_seen = Vec::new();
        for f in &aes {
            if kinds_seen.contains(&f.kind()) {
                return Err(LabError::config(
                    "detect.autoencoders",
                    format!("two autoencoders map to the {} filter; list `filters` explicitly", f.kind()),
                ));
            }
            kinds_seen.push(f.kind());
        }
        let mut filters = vec![
            FilterFunction::Identity,
            FilterFunction::Noise,
            FilterFunction::Median2x2,
        ];
        filters.extend(aes);
        return Ok(filters);
    }
    let mut filters = Vec::with_capacity(cfg.filters.len());
    for kind in &cfg.filters {
        let f = match kind {
            FilterKind::Identity => FilterFunction::Identity,
            FilterKind::Noise => FilterFunction::Noise,
            FilterKind::Median2x2 => FilterFunction::Median2x2,
            FilterKind::Fpa | FilterKind::FpaPrime => {
                let pos = aes.iter().position(|f| f.kind() == *kind).ok_or_else(|| {
                    LabError::config(
                        "detect.filters",
                        format!("{kind} requested but no matching autoencoder was loaded"),
                    )
                })?;
                aes.remove(pos)
            }
        };
        filters.push(f);
    }
    Ok(filters)
}

fn exec_detect(cfg: &DetectConfig, run_dir: &Path, m: &mut Manifest) -> Result<()> {
    verify_sha256(&cfg.model, cfg.model_sha256.as_ref())?;
    verify_sha256(&cfg.data, cfg.data_sha256.as_ref())?;
    let (model, _) = checkpoints::load_model(&cfg.model)?;
    let ds = data::load_dataset(&cfg.data)?;
    let recs = load_records_dir(&cfg.records)?;
    for (name, rec) in &recs {
        rec.check_model(&model)
            .map_err(|e| LabError::run(format!("record {name}: {e}")))?;
    }
    let filters = build_filters(cfg, &model)?;

    // Clean draws mirror the attacked sets: same per-class geometry, count
    // defaulting to the largest attacked-set count of any class.
    let mut per_class: BTreeMap<&str, (usize, &PerturbationRecord)> = BTreeMap::new();
    for (_, rec) in &recs {
        let entry = per_class.entry(rec.target_class.as_str()).or_insert((0, rec));
        entry.0 += 1;
    }
    let clean_count = cfg
        .clean_sets_per_class
        .unwrap_or_else(|| per_class.values().map(|(n, _)| *n).max().unwrap_or(1));

    let mut cases = Vec::new();
    for (ci, (class, (_, rec))) in per_class.iter().enumerate() {
        let draws = draw_clean_supports(
            &ds,
            class,
            rec.shots,
            clean_count,
            derive_seed(cfg.seed, "clean", ci as u64),
        )?;
        if clean_count * rec.shots > ds.class_samples(class)?.len() {
            m.warnings.push(format!(
                "class {class}: {clean_count} clean sets of {} shots exceed the pool; later draws reuse images",
                rec.shots
            ));
        }
        for images in draws {
            cases.push(SupportSetCase::clean(class, rec.ways, images));
        }
    }
    for (_, rec) in &recs {
        cases.push(SupportSetCase::from_record(rec));
    }

    let t = Instant::now();
    let rows = score_cases(&model, &ds, &filters, &cases, derive_seed(cfg.seed, "detect", 0))?;
    time_phase(m, "score", t);
    let dir = run_dir.join("scores");
    fs::create_dir_all(&dir).at(&dir)?;
    write_scores(&dir.join("detection_scores.csv"), &m.plan_hash, &rows)?;
    println!(
        "scored {} support sets ({} attacked, {} filters): {} rows",
        cases.len(),
        recs.len(),
        filters.len(),
        rows.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn model_label(model: &FewShotModel) -> String {
    format!("{}-{:08x}", model.config().head_kind, model.fingerprint() as u32)
}

fn dataset_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| String::from("data"))
}

fn exec_evaluate(cfg: &EvaluateConfig, run_dir: &Path, m: &mut Manifest) -> Result<()> {
    verify_sha256(&cfg.model, cfg.model_sha256.as_ref())?;
    verify_sha256(&cfg.data, cfg.data_sha256.as_ref())?;
    let (model, _) = checkpoints::load_model(&cfg.model)?;
    let ds = data::load_dataset(&cfg.data)?;
    let mlabel = model_label(&model);
    let dlabel = dataset_label(&cfg.data);
    let scores_dir = run_dir.join("scores");
    let tables_dir = run_dir.join("tables");
    fs::create_dir_all(&scores_dir).at(&scores_dir)?;
    fs::create_dir_all(&tables_dir).at(&tables_dir)?;

    let t = Instant::now();
    let est = evaluate_accuracy(
        &model,
        &ds,
        cfg.ways,
        cfg.shots,
        cfg.queries_total,
        cfg.n_eval_episodes,
        derive_seed(cfg.seed, "accuracy", 0),
    )?;
    let acc_rows: Vec<AccuracyRow> = est
        .per_episode
        .iter()
        .enumerate()
        .map(|(i, &accuracy)| AccuracyRow { model: mlabel.clone(), episode: i, accuracy })
        .collect();
    write_accuracy_rows(&scores_dir.join("accuracy_raw.csv"), &m.plan_hash, &acc_rows)?;
    write_result_rows(
        &tables_dir.join("baseline.csv"),
        &m.plan_hash,
        &aggregate_accuracy(&dlabel, &acc_rows),
    )?;
    println!(
        "baseline accuracy {:.3} (+/- {:.3}, {} episodes)",
        est.mean, est.half_width_95, cfg.n_eval_episodes
    );
    time_phase(m, "accuracy", t);

    if let Some(records_dir) = &cfg.records {
        let t = Instant::now();
        let recs = load_records_dir(records_dir)?;
        let mut asr_rows = Vec::new();
        let mut set_counter: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (i, (name, rec)) in recs.iter().enumerate() {
            rec.check_model(&model)
                .map_err(|e| LabError::run(format!("record {name}: {e}")))?;
            let key = (rec.target_class.clone(), rec.config.kind.to_string());
            let set_index = *set_counter
                .entry(key)
                .and_modify(|n| *n += 1)
                .or_insert(0);
            for (si, scenario) in [Scenario::FixedSupports, Scenario::NewSupports]
                .into_iter()
                .enumerate()
            {
                let est = fewshot_core::attacks::evaluate_asr(
                    &model,
                    rec,
                    &ds,
                    scenario,
                    cfg.n_eval_episodes,
                    derive_seed(cfg.seed, "asr", (i * 2 + si) as u64),
                )?;
                asr_rows.push(AsrRow {
                    attack: rec.config.kind.to_string(),
                    scenario: scenario.to_string(),
                    class: rec.target_class.clone(),
                    set_index,
                    n_episodes: cfg.n_eval_episodes,
                    asr: est.mean,
                    asr_std: est.std,
                });
            }
        }
        // Zero-perturbation controls: the same protocol on unmodified
        // supports, so the tables carry the clean error the attacks beat.
        let mut seen = BTreeSet::new();
        for (ci, (_, rec)) in recs.iter().enumerate() {
            if !seen.insert(rec.target_class.clone()) {
                continue;
            }
            let mut control = rec.clone();
            for d in &mut control.deltas {
                *d = Tensor::zeros(d.shape());
            }
            for (si, scenario) in [Scenario::FixedSupports, Scenario::NewSupports]
                .into_iter()
                .enumerate()
            {
                let est = fewshot_core::attacks::evaluate_asr(
                    &model,
                    &control,
                    &ds,
                    scenario,
                    cfg.n_eval_episodes,
                    derive_seed(cfg.seed, "control", (ci * 2 + si) as u64),
                )?;
                asr_rows.push(AsrRow {
                    attack: String::from("none"),
                    scenario: scenario.to_string(),
                    class: control.target_class.clone(),
                    set_index: 0,
                    n_episodes: cfg.n_eval_episodes,
                    asr: est.mean,
                    asr_std: est.std,
                });
            }
        }
        write_asr_rows(&scores_dir.join("asr_raw.csv"), &m.plan_hash, &asr_rows)?;
        let table = aggregate_asr(&mlabel, &dlabel, &asr_rows);
        for row in &table {
            println!(
                "{} / {}: asr {:.3} (std {:.3}, {} sets)",
                row.attack, row.scenario, row.mean, row.dispersion, row.n
            );
        }
        write_result_rows(&tables_dir.join("transferability.csv"), &m.plan_hash, &table)?;
        time_phase(m, "asr", t);
    }

    if let Some(scores_path) = &cfg.scores {
        let t = Instant::now();
        let (_, score_rows) = read_scores(scores_path)?;
        if score_rows.is_empty() {
            return Err(LabError::format(scores_path, "score file has no rows"));
        }
        let table = aggregate_detection(&mlabel, &dlabel, &score_rows)?;
        for row in &table {
            println!(
                "{} / {} vs {}: auroc {:.3} ({} sets)",
                row.filter, row.statistic, row.attack, row.mean, row.n
            );
        }
        write_result_rows(&tables_dir.join("detection_auroc.csv"), &m.plan_hash, &table)?;
        time_phase(m, "detection", t);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn exec_report(cfg: &ReportConfig, run_dir: &Path, m: &mut Manifest) -> Result<()> {
    let t = Instant::now();
    let written = report::render_report(&cfg.tables, &run_dir.join("figures"))?;
    time_phase(m, "render", t);
    for name in &written {
        println!("figures/{name}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Cli, FileConfig};
    use clap::Parser;

    fn run_cli(args: &[&str], root: &Path) -> Result<ExecOutcome> {
        let mut full = vec!["fewshot", "--output-root"];
        let root_str = root.to_str().unwrap();
        full.push(root_str);
        full.extend_from_slice(args);
        let cli = Cli::try_parse_from(&full).unwrap();
        let run = crate::config::resolve_with(cli, FileConfig::default(), None)?;
        execute(run)
    }

    #[test]
    fn gen_data_writes_three_splits_and_a_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let out = run_cli(
            &[
                "gen-data", "--n-classes", "6", "--samples-per-class", "8",
                "--channels", "1", "--height", "8", "--width", "8",
                "--train-classes", "2", "--val-classes", "2", "--test-classes", "2",
            ],
            tmp.path(),
        )
        .unwrap();
        let paths: Vec<&str> = out.manifest.artifacts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, ["data/test.fsa", "data/train.fsa", "data/val.fsa"]);
        assert!(!out.manifest.incomplete);
        let ds = data::load_dataset(&out.run_dir.join("data/test.fsa")).unwrap();
        assert_eq!(ds.n_classes(), 2);
        let m = manifest::read_manifest(&out.run_dir).unwrap();
        assert_eq!(m.plan_hash, out.manifest.plan_hash);
        assert_eq!(m.provenance["gen_data.n_classes"], "flag");
        assert_eq!(m.provenance["gen_data.signal"], "default");
    }

    #[test]
    fn failed_runs_leave_an_incomplete_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let err = run_cli(
            &["train-model", "--train-data", "missing.fsa", "--val-data", "missing.fsa"],
            tmp.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("missing.fsa"), "{err}");
        let runs: Vec<_> = fs::read_dir(tmp.path().join("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert_eq!(runs.len(), 1);
        let m = manifest::read_manifest(&runs[0]).unwrap();
        assert!(m.incomplete);
        assert!(m.warnings.iter().any(|w| w.contains("missing.fsa")));
    }
}

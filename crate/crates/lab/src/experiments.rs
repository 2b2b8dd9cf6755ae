//! Orchestration shared by the subcommands: seed derivation, clean support
//! draws, batch detection scoring, and aggregation into result tables.
//!
//! Aggregation functions are pure over the raw rows, so a table can always
//! be reproduced exactly from the raw CSVs it was derived from.

use std::collections::BTreeMap;
use std::path::Path;

use fewshot_core::attacks::PerturbationRecord;
use fewshot_core::detection::{
    auroc, score_support_set, ContextSampler, Label, SplitMode, StatisticKind,
};
use fewshot_core::episodes::Dataset;
use fewshot_core::filters::FilterFunction;
use fewshot_core::fnv1a64;
use fewshot_core::models::FewShotModel;
use fewshot_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::scores::{read_rows, write_rows, AccuracyRow, AsrRow, ScoreRow};

/// Placeholder for a dimension that does not apply to a row.
pub const NONE_LABEL: &str = "-";

/// Derives a child seed from a base seed, a role tag, and an index. Stable
/// across platforms, so reruns reproduce every drawn episode and filter.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(tag.len() + 17);
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    bytes.push(0xff);
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}

/// Draws `count` support sets of `shots` images from one class. Each round
/// shuffles the class pool once and carves it into disjoint chunks; draws
/// only repeat images once a round is exhausted.
pub fn draw_clean_supports(
    ds: &Dataset,
    class: &str,
    shots: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    let pool = ds.class_samples(class)?;
    if shots == 0 || count == 0 {
        return Err(LabError::run("clean draws need positive shots and count"));
    }
    if pool.len() < shots {
        return Err(LabError::run(format!(
            "class {class} has {} samples, fewer than {shots} shots",
            pool.len()
        )));
    }
    let per_round = pool.len() / shots;
    let mut sets = Vec::with_capacity(count);
    let mut round = 0u64;
    while sets.len() < count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class, round));
        let order = rand::seq::index::sample(&mut rng, pool.len(), pool.len());
        for chunk in 0..per_round {
            if sets.len() == count {
                break;
            }
            let images = (0..shots)
                .map(|i| pool[order.index(chunk * shots + i)].clone())
                .collect();
            sets.push(images);
        }
        round += 1;
    }
    Ok(sets)
}

// ---------------------------------------------------------------------------
// Batch scoring
// ---------------------------------------------------------------------------

/// One support set queued for detection scoring.
pub struct SupportSetCase {
    pub class: String,
    /// [`NONE_LABEL`] for clean sets, otherwise the attack label.
    pub attack: String,
    /// Ways of the episodes the set would be used in (sets the context size).
    pub ways: usize,
    pub images: Vec<Tensor>,
    pub ground_truth: Label,
}

impl SupportSetCase {
    pub fn clean(class: &str, ways: usize, images: Vec<Tensor>) -> Self {
        SupportSetCase {
            class: class.to_string(),
            attack: NONE_LABEL.to_string(),
            ways,
            images,
            ground_truth: Label::Clean,
        }
    }

    pub fn from_record(record: &PerturbationRecord) -> Self {
        SupportSetCase {
            class: record.target_class.clone(),
            attack: record.config.kind.to_string(),
            ways: record.ways,
            images: record.adversarial_support(),
            ground_truth: Label::Adversarial,
        }
    }
}

/// The two statistic configurations every detection run scores: the cheap
/// logit-distance variant and the label-flip variant averaged over splits.
pub const STATISTIC_VARIANTS: [(StatisticKind, SplitMode); 2] = [
    (StatisticKind::LogitsL1, SplitMode::SingleRandom),
    (StatisticKind::HardLabel, SplitMode::AllSplitsMean),
];

/// Table label for a (statistic, split) combination.
pub fn statistic_label(stat: StatisticKind, mode: SplitMode) -> String {
    match (stat, mode) {
        (StatisticKind::LogitsL1, SplitMode::SingleRandom) => String::from("u_adv"),
        (StatisticKind::HardLabel, SplitMode::AllSplitsMean) => String::from("u_adv_prime"),
        (s, m) => format!("{s}+{m}"),
    }
}

/// Scores every case with every filter and both statistic variants. Context
/// episodes exclude the evaluated class and use one shot fewer than the set
/// being scored, matching the held-out-sample split size.
pub fn score_cases(
    model: &FewShotModel,
    data: &Dataset,
    filters: &[FilterFunction],
    cases: &[SupportSetCase],
    seed: u64,
) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::with_capacity(cases.len() * filters.len() * STATISTIC_VARIANTS.len());
    for (case_idx, case) in cases.iter().enumerate() {
        if case.images.len() < 2 {
            return Err(LabError::run(format!(
                "support set for class {} has {} image(s); scoring needs at least 2",
                case.class,
                case.images.len()
            )));
        }
        let sampler = ContextSampler::new(
            data,
            case.ways,
            case.images.len() - 1,
            Some(case.class.clone()),
        )?;
        let case_seed = derive_seed(
            seed,
            &format!("{}|{}", case.class, case.attack),
            case_idx as u64,
        );
        for (fi, filter) in filters.iter().enumerate() {
            for (vi, (stat, mode)) in STATISTIC_VARIANTS.iter().enumerate() {
                let s = derive_seed(
                    case_seed,
                    "score",
                    (fi * STATISTIC_VARIANTS.len() + vi) as u64,
                );
                let score = score_support_set(
                    model,
                    filter,
                    &case.images,
                    &sampler,
                    *stat,
                    *mode,
                    case.ground_truth,
                    s,
                )?;
                rows.push(ScoreRow {
                    class: case.class.clone(),
                    attack: case.attack.clone(),
                    seed: s,
                    filter_kind: score.filter_kind,
                    statistic_kind: score.statistic_kind,
                    split_mode: score.split_mode,
                    value: score.value,
                    ground_truth: score.ground_truth,
                });
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Result tables
// ---------------------------------------------------------------------------

/// One aggregated table row; inapplicable dimensions hold [`NONE_LABEL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub dataset: String,
    pub attack: String,
    pub filter: String,
    pub statistic: String,
    pub scenario: String,
    pub metric: String,
    pub mean: f64,
    pub dispersion: f64,
    pub n: usize,
}

pub fn write_result_rows(path: &Path, plan_hash: &str, rows: &[ResultRow]) -> Result<()> {
    write_rows(path, plan_hash, rows)
}

pub fn read_result_rows(path: &Path) -> Result<(String, Vec<ResultRow>)> {
    read_rows(path)
}

fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-model episodic accuracy with a 95% confidence half-width.
pub fn aggregate_accuracy(dataset: &str, rows: &[AccuracyRow]) -> Vec<ResultRow> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.model.as_str()).or_default().push(r.accuracy);
    }
    groups
        .into_iter()
        .map(|(model, vals)| {
            let (mean, hw) = mean_and_half_width(&vals);
            ResultRow {
                model: model.to_string(),
                dataset: dataset.to_string(),
                attack: NONE_LABEL.to_string(),
                filter: NONE_LABEL.to_string(),
                statistic: NONE_LABEL.to_string(),
                scenario: NONE_LABEL.to_string(),
                metric: String::from("accuracy"),
                mean,
                dispersion: hw,
                n: vals.len(),
            }
        })
        .collect()
}

/// Attack success per (attack, scenario), averaged over perturbation sets
/// with the spread across sets as dispersion.
pub fn aggregate_asr(model: &str, dataset: &str, rows: &[AsrRow]) -> Vec<ResultRow> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.attack.as_str(), r.scenario.as_str()))
            .or_default()
            .push(r.asr);
    }
    groups
        .into_iter()
        .map(|((attack, scenario), vals)| {
            let (mean, std) = mean_and_std(&vals);
            ResultRow {
                model: model.to_string(),
                dataset: dataset.to_string(),
                attack: attack.to_string(),
                filter: NONE_LABEL.to_string(),
                statistic: NONE_LABEL.to_string(),
                scenario: scenario.to_string(),
                metric: String::from("asr"),
                mean,
                dispersion: std,
                n: vals.len(),
            }
        })
        .collect()
}

/// AUROC of adversarial against clean scores per (filter, statistic,
/// attack). Clean rows are shared across attacks within a filter/statistic
/// group; a group without clean rows is an error.
pub fn aggregate_detection(model: &str, dataset: &str, rows: &[ScoreRow]) -> Result<Vec<ResultRow>> {
    let mut clean: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut adv: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let filter = r.filter_kind.to_string();
        let statistic = statistic_label(r.statistic_kind, r.split_mode);
        match r.ground_truth {
            Label::Clean => clean.entry((filter, statistic)).or_default().push(r.value),
            Label::Adversarial => adv
                .entry((filter, statistic, r.attack.clone()))
                .or_default()
                .push(r.value),
        }
    }
    let mut out = Vec::with_capacity(adv.len());
    for ((filter, statistic, attack), adv_vals) in adv {
        let clean_vals = clean.get(&(filter.clone(), statistic.clone())).ok_or_else(|| {
            LabError::run(format!(
                "no clean scores for filter {filter}, statistic {statistic}; cannot compute AUROC"
            ))
        })?;
        let value = auroc(clean_vals, &adv_vals)?;
        out.push(ResultRow {
            model: model.to_string(),
            dataset: dataset.to_string(),
            attack,
            filter,
            statistic,
            scenario: NONE_LABEL.to_string(),
            metric: String::from("auroc"),
            mean: value,
            dispersion: 0.0,
            n: clean_vals.len() + adv_vals.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fewshot_core::episodes::{generate_synthetic, SyntheticSpec};
    use fewshot_core::fnv1a64_f64;
    use fewshot_core::tensor::ImageShape;

    fn tiny_dataset() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n_classes: 4,
            samples_per_class: 10,
            image_shape: ImageShape::new(1, 4, 4),
            class_signal_strength: 1.0,
            noise_std: 0.05,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn derived_seeds_separate_roles_and_indices() {
        let a = derive_seed(7, "attack", 0);
        assert_eq!(a, derive_seed(7, "attack", 0));
        assert_ne!(a, derive_seed(7, "attack", 1));
        assert_ne!(a, derive_seed(7, "detect", 0));
        assert_ne!(a, derive_seed(8, "attack", 0));
    }

    #[test]
    fn clean_draws_are_disjoint_within_a_round() {
        let ds = tiny_dataset();
        let sets = draw_clean_supports(&ds, "c000", 3, 3, 11).unwrap();
        assert_eq!(sets.len(), 3);
        let mut hashes: Vec<u64> = sets
            .iter()
            .flat_map(|s| s.iter().map(|t| fnv1a64_f64(0, t.data())))
            .collect();
        hashes.sort_unstable();
        hashes.dedup();
        assert_eq!(hashes.len(), 9, "images repeated within the first round");
    }

    #[test]
    fn clean_draws_wrap_to_new_rounds_when_the_pool_runs_out() {
        let ds = tiny_dataset();
        let sets = draw_clean_supports(&ds, "c000", 3, 7, 11).unwrap();
        assert_eq!(sets.len(), 7);
        assert!(draw_clean_supports(&ds, "c000", 11, 1, 0).is_err());
    }

    #[test]
    fn statistic_labels_name_the_two_headline_variants() {
        assert_eq!(
            statistic_label(StatisticKind::LogitsL1, SplitMode::SingleRandom),
            "u_adv"
        );
        assert_eq!(
            statistic_label(StatisticKind::HardLabel, SplitMode::AllSplitsMean),
            "u_adv_prime"
        );
        assert_eq!(
            statistic_label(StatisticKind::LogitsL1, SplitMode::AllSplitsMean),
            "logits_l1+all_splits_mean"
        );
    }

    fn score_row(attack: &str, value: f64, truth: Label) -> ScoreRow {
        ScoreRow {
            class: "c000".into(),
            attack: attack.into(),
            seed: 0,
            filter_kind: fewshot_core::filters::FilterKind::Noise,
            statistic_kind: StatisticKind::LogitsL1,
            split_mode: SplitMode::SingleRandom,
            value,
            ground_truth: truth,
        }
    }

    #[test]
    fn detection_aggregation_shares_clean_rows_across_attacks() {
        let rows = vec![
            score_row(NONE_LABEL, 0.1, Label::Clean),
            score_row(NONE_LABEL, 0.2, Label::Clean),
            score_row("pgd", 0.9, Label::Adversarial),
            score_row("pgd", 0.8, Label::Adversarial),
            score_row("cw_sgd", 0.15, Label::Adversarial),
        ];
        let table = aggregate_detection("m", "d", &rows).unwrap();
        assert_eq!(table.len(), 2);
        let pgd = table.iter().find(|r| r.attack == "pgd").unwrap();
        assert_eq!(pgd.mean, 1.0);
        assert_eq!(pgd.n, 4);
        assert_eq!(pgd.statistic, "u_adv");
        let cw = table.iter().find(|r| r.attack == "cw_sgd").unwrap();
        assert_eq!(cw.mean, 0.5);
    }

    #[test]
    fn detection_aggregation_without_clean_rows_is_an_error() {
        let rows = vec![score_row("pgd", 0.9, Label::Adversarial)];
        let err = aggregate_detection("m", "d", &rows).unwrap_err();
        assert!(err.to_string().contains("no clean scores"), "{err}");
    }

    #[test]
    fn asr_aggregation_groups_by_attack_and_scenario() {
        let rows = vec![
            AsrRow {
                attack: "pgd".into(),
                scenario: "fixed_supports".into(),
                class: "c000".into(),
                set_index: 0,
                n_episodes: 10,
                asr: 1.0,
                asr_std: 0.0,
            },
            AsrRow {
                attack: "pgd".into(),
                scenario: "fixed_supports".into(),
                class: "c001".into(),
                set_index: 0,
                n_episodes: 10,
                asr: 0.5,
                asr_std: 0.0,
            },
            AsrRow {
                attack: "pgd".into(),
                scenario: "new_supports".into(),
                class: "c000".into(),
                set_index: 0,
                n_episodes: 10,
                asr: 0.25,
                asr_std: 0.0,
            },
        ];
        let table = aggregate_asr("m", "d", &rows);
        assert_eq!(table.len(), 2);
        let fixed = table.iter().find(|r| r.scenario == "fixed_supports").unwrap();
        assert_eq!(fixed.mean, 0.75);
        assert_eq!(fixed.n, 2);
        let new = table.iter().find(|r| r.scenario == "new_supports").unwrap();
        assert_eq!(new.mean, 0.25);
        assert_eq!(new.dispersion, 0.0);
    }

    #[test]
    fn tables_rebuild_exactly_from_raw_rows() {
        let rows = vec![
            score_row(NONE_LABEL, 0.1, Label::Clean),
            score_row("pgd", 0.9, Label::Adversarial),
        ];
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("scores.csv");
        crate::scores::write_scores(&path, "h", &rows).unwrap();
        let (_, back) = crate::scores::read_scores(&path).unwrap();
        let once = aggregate_detection("m", "d", &rows).unwrap();
        let again = aggregate_detection("m", "d", &back).unwrap();
        assert_eq!(once, again);
    }
}

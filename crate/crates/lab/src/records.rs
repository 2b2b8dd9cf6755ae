//! Perturbation-record archives: the durable product of an attack run.
//!
//! Deltas and base supports are stored as raw `f64` blobs so a reloaded
//! record is bit-identical to the one the attack produced — ASR evaluations
//! and detection scores computed later reproduce exactly.

use std::path::Path;

use fewshot_core::attacks::{AttackConfig, PerturbationRecord};
use fewshot_core::{ImageShape, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{LabError, Result};

const KIND: &str = "perturbation-record";

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    target_class: String,
    ways: usize,
    shots: usize,
    queries_per_episode: usize,
    config: AttackConfig,
    model_fingerprint: u64,
    channels: usize,
    height: usize,
    width: usize,
    n_supports: usize,
}

pub fn save_record(path: &Path, record: &PerturbationRecord) -> Result<()> {
    record.validate()?;
    let shape = record.base_support[0].shape();
    let meta = RecordMeta {
        target_class: record.target_class.clone(),
        ways: record.ways,
        shots: record.shots,
        queries_per_episode: record.queries_per_episode,
        config: record.config.clone(),
        model_fingerprint: record.model_fingerprint,
        channels: shape.channels,
        height: shape.height,
        width: shape.width,
        n_supports: record.base_support.len(),
    };
    let mut ar = Archive::new(KIND, &meta)?;
    ar.add_blob("base_support", concat(&record.base_support))?;
    ar.add_blob("deltas", concat(&record.deltas))?;
    ar.add_blob("loss_trace", record.loss_trace.clone())?;
    ar.write(path)
}

pub fn load_record(path: &Path) -> Result<PerturbationRecord> {
    let ar = Archive::read(path)?;
    ar.expect_kind(KIND, path)?;
    let meta: RecordMeta = ar.meta_as()?;
    let shape = ImageShape::new(meta.channels, meta.height, meta.width);
    let record = PerturbationRecord {
        target_class: meta.target_class,
        ways: meta.ways,
        shots: meta.shots,
        queries_per_episode: meta.queries_per_episode,
        base_support: split(path, ar.blob("base_support")?, shape, meta.n_supports)?,
        deltas: split(path, ar.blob("deltas")?, shape, meta.n_supports)?,
        config: meta.config,
        model_fingerprint: meta.model_fingerprint,
        loss_trace: ar.blob("loss_trace")?.to_vec(),
    };
    record.validate()?;
    Ok(record)
}

fn concat(images: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(images.iter().map(Tensor::len).sum());
    for img in images {
        out.extend_from_slice(img.data());
    }
    out
}

fn split(path: &Path, data: &[f64], shape: ImageShape, n: usize) -> Result<Vec<Tensor>> {
    if data.len() != n * shape.len() {
        return Err(LabError::format(
            path,
            format!("expected {n} images of {} values, blob holds {}", shape.len(), data.len()),
        ));
    }
    data.chunks_exact(shape.len())
        .map(|c| Ok(Tensor::from_vec(shape, c.to_vec())?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use fewshot_core::attacks::run_pgd;
    use fewshot_core::episodes::{generate_synthetic, SyntheticSpec};
    use fewshot_core::models::{FewShotModel, HeadKind, ModelConfig};

    #[test]
    fn record_archive_roundtrips_exactly() {
        let ds = generate_synthetic(&SyntheticSpec {
            n_classes: 4,
            samples_per_class: 8,
            image_shape: ImageShape::new(3, 8, 8),
            class_signal_strength: 1.0,
            noise_std: 0.1,
            seed: 5,
        })
        .unwrap();
        let mut config = ModelConfig::new(HeadKind::Relation, ImageShape::new(3, 8, 8));
        config.base_channels = 4;
        let model = FewShotModel::new(config).unwrap();
        let cfg = AttackConfig {
            iterations: 3,
            seed: 9,
            ..AttackConfig::pgd()
        };
        let target = ds.classes()[0].clone();
        let out = run_pgd(&model, &ds, &target, 3, 4, 6, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.fsa");
        save_record(&path, &out.record).unwrap();
        let back = load_record(&path).unwrap();
        assert_eq!(back, out.record);
    }
}

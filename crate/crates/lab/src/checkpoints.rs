//! Checkpoint archives for classifiers and autoencoders.
//!
//! Both formats are self-describing: the header carries the full
//! architecture config, a content fingerprint of the weights, and the
//! training recipe that produced them, so a loaded checkpoint can be
//! validated before any computation trusts it.

use std::path::Path;

use fewshot_core::filters::{AeEpochStats, AeHyperparams, FpaModel, LossVariant};
use fewshot_core::models::{EpochStats, FewShotModel, ModelConfig, TrainConfig};
use fewshot_core::{fnv1a64, ImageShape};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{LabError, Result};

const MODEL_KIND: &str = "few-shot-model";
const AE_KIND: &str = "autoencoder";

/// Everything a model checkpoint records besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpointMeta {
    pub config: ModelConfig,
    /// Fingerprint of config + weights at save time; verified on load.
    pub fingerprint: u64,
    pub train_config: Option<TrainConfig>,
    /// FNV-1a over the canonical JSON of `train_config`, hex-encoded.
    pub train_config_hash: String,
    pub history: Vec<EpochStats>,
}

/// Stable hash of a training recipe (used to tie checkpoints to configs).
pub fn train_config_hash(cfg: &TrainConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)
        .map_err(|e| LabError::run(format!("train config does not serialize: {e}")))?;
    Ok(format!("{:016x}", fnv1a64(&json)))
}

pub fn save_model(
    path: &Path,
    model: &FewShotModel,
    train_config: Option<&TrainConfig>,
    history: &[EpochStats],
) -> Result<()> {
    let meta = ModelCheckpointMeta {
        config: model.config().clone(),
        fingerprint: model.fingerprint(),
        train_config: train_config.cloned(),
        train_config_hash: match train_config {
            Some(cfg) => train_config_hash(cfg)?,
            None => String::from("untrained"),
        },
        history: history.to_vec(),
    };
    let mut ar = Archive::new(MODEL_KIND, &meta)?;
    ar.add_blob("params", model.params().to_vec())?;
    ar.write(path)
}

pub fn load_model(path: &Path) -> Result<(FewShotModel, ModelCheckpointMeta)> {
    let ar = Archive::read(path)?;
    ar.expect_kind(MODEL_KIND, path)?;
    let meta: ModelCheckpointMeta = ar.meta_as()?;
    let model = FewShotModel::from_params(meta.config.clone(), ar.blob("params")?.to_vec())?;
    if model.fingerprint() != meta.fingerprint {
        return Err(LabError::format(
            path,
            format!(
                "weight fingerprint {:016x} does not match the recorded {:016x}",
                model.fingerprint(),
                meta.fingerprint
            ),
        ));
    }
    Ok((model, meta))
}

/// Everything an autoencoder checkpoint records besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeCheckpointMeta {
    pub input_shape: ImageShape,
    pub variant: LossVariant,
    pub trained: bool,
    /// Fingerprint of the classifier the preservation loss was trained
    /// against; filters refuse to run against a different model.
    pub paired_model_fingerprint: Option<u64>,
    pub fingerprint: u64,
    pub hyperparams: Option<AeHyperparams>,
    pub history: Vec<AeEpochStats>,
}

pub fn save_autoencoder(
    path: &Path,
    ae: &FpaModel,
    hyperparams: Option<&AeHyperparams>,
    history: &[AeEpochStats],
) -> Result<()> {
    let meta = AeCheckpointMeta {
        input_shape: ae.input_shape(),
        variant: ae.variant(),
        trained: ae.is_trained(),
        paired_model_fingerprint: ae.paired_model_fingerprint(),
        fingerprint: ae.fingerprint(),
        hyperparams: hyperparams.cloned(),
        history: history.to_vec(),
    };
    let mut ar = Archive::new(AE_KIND, &meta)?;
    ar.add_blob("params", ae.params().to_vec())?;
    ar.write(path)
}

pub fn load_autoencoder(path: &Path) -> Result<(FpaModel, AeCheckpointMeta)> {
    let ar = Archive::read(path)?;
    ar.expect_kind(AE_KIND, path)?;
    let meta: AeCheckpointMeta = ar.meta_as()?;
    let ae = FpaModel::from_parts(
        meta.input_shape,
        meta.variant,
        meta.trained,
        meta.paired_model_fingerprint,
        ar.blob("params")?.to_vec(),
    )?;
    if ae.fingerprint() != meta.fingerprint {
        return Err(LabError::format(
            path,
            format!(
                "weight fingerprint {:016x} does not match the recorded {:016x}",
                ae.fingerprint(),
                meta.fingerprint
            ),
        ));
    }
    Ok((ae, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fewshot_core::models::HeadKind;

    #[test]
    fn model_checkpoint_roundtrips_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fsa");
        let mut config = ModelConfig::new(HeadKind::Relation, ImageShape::new(3, 8, 8));
        config.base_channels = 4;
        let model = FewShotModel::new(config).unwrap();
        let train = TrainConfig::default();
        save_model(&path, &model, Some(&train), &[]).unwrap();

        let (back, meta) = load_model(&path).unwrap();
        assert_eq!(back.fingerprint(), model.fingerprint());
        assert_eq!(meta.config, *model.config());
        assert_eq!(meta.train_config, Some(train.clone()));
        assert_eq!(meta.train_config_hash, train_config_hash(&train).unwrap());
    }

    #[test]
    fn tampered_weights_are_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fsa");
        let mut config = ModelConfig::new(HeadKind::CrossAttention, ImageShape::new(3, 8, 8));
        config.base_channels = 4;
        let model = FewShotModel::new(config).unwrap();
        save_model(&path, &model, None, &[]).unwrap();

        // Flip one weight by rewriting the archive with the same header.
        let ar = Archive::read(&path).unwrap();
        let mut params = ar.blob("params").unwrap().to_vec();
        params[7] += 1.0;
        let meta: ModelCheckpointMeta = ar.meta_as().unwrap();
        let mut forged = Archive::new("few-shot-model", &meta).unwrap();
        forged.add_blob("params", params).unwrap();
        forged.write(&path).unwrap();

        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");
    }

    #[test]
    fn autoencoder_checkpoint_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.fsa");
        let ae = FpaModel::new(ImageShape::new(3, 8, 8), 11).unwrap();
        save_autoencoder(&path, &ae, Some(&AeHyperparams::default()), &[]).unwrap();
        let (back, meta) = load_autoencoder(&path).unwrap();
        assert_eq!(back.fingerprint(), ae.fingerprint());
        assert_eq!(meta.variant, ae.variant());
        assert!(!meta.trained);
    }

    #[test]
    fn wrong_kind_is_rejected_before_parsing_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fsa");
        let ae = FpaModel::new(ImageShape::new(3, 8, 8), 0).unwrap();
        save_autoencoder(&path, &ae, None, &[]).unwrap();
        assert!(load_model(&path).is_err());
    }
}

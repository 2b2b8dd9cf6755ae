//! Support-set filters: functions mapping a support set onto its own space
//! (same shapes, pixel range [0,1]). Detection compares a classifier's
//! behavior on filtered vs unfiltered supports, so each filter is either
//! fully deterministic or deterministic given a seed.
//!
//! Kinds: identity (the null filter), per-channel Gaussian noise, 2×2 median
//! smoothing, and reconstruction through an autoencoder trained to preserve
//! the paired classifier's feature space (optionally its logits too).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::episodes::{sample_episode, Dataset};
use crate::error::{CoreError, Result};
use crate::models::FewShotModel;
use crate::nn::{
    relu, relu_backward, sigmoid, sigmoid_backward, upsample2, upsample2_backward, Adam, Conv2d,
    ParamLayout,
};
use crate::tensor::{ImageShape, Tensor};
use crate::{fnv1a64, fnv1a64_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FilterKind {
    Identity,
    Noise,
    #[cfg_attr(feature = "serde", serde(rename = "median_2x2"))]
    Median2x2,
    Fpa,
    FpaPrime,
}

impl core::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            FilterKind::Identity => "identity",
            FilterKind::Noise => "noise",
            FilterKind::Median2x2 => "median_2x2",
            FilterKind::Fpa => "fpa",
            FilterKind::FpaPrime => "fpa_prime",
        };
        write!(f, "{s}")
    }
}

/// Which objective an autoencoder was (last) trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossVariant {
    /// Plain image MSE — the pretraining stage, not usable as a filter.
    StandardAe,
    /// Image term plus feature-preservation term.
    Fpa,
    /// FPA plus a logits-preservation term against a reference episode.
    FpaPrime,
}

impl core::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            LossVariant::StandardAe => "standard_ae",
            LossVariant::Fpa => "fpa",
            LossVariant::FpaPrime => "fpa_prime",
        };
        write!(f, "{s}")
    }
}

// ---------------------------------------------------------------------------
// Losses (pure)
// ---------------------------------------------------------------------------

fn sq_diff_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Feature-preserving reconstruction loss for one sample:
/// `0.01·‖x−x̂‖² / √dim(x) + ‖f−f̂‖² / √dim(f)`.
pub fn fpa_sample_loss(x: &Tensor, x_hat: &Tensor, f: &[f64], f_hat: &[f64]) -> Result<f64> {
    x.check_same_shape(x_hat, "image and reconstruction")?;
    if f.len() != f_hat.len() || f.is_empty() {
        return Err(CoreError::shape(
            format!("{} feature values", f.len().max(1)),
            f_hat.len(),
        ));
    }
    let img_term = 0.01 * sq_diff_sum(x.data(), x_hat.data()) / libm::sqrt(x.len() as f64);
    let feat_term = sq_diff_sum(f, f_hat) / libm::sqrt(f.len() as f64);
    Ok(img_term + feat_term)
}

/// [`fpa_sample_loss`] plus a logits-preservation term `‖z−ẑ‖² / √dim(z)`.
pub fn fpa_prime_sample_loss(
    x: &Tensor,
    x_hat: &Tensor,
    f: &[f64],
    f_hat: &[f64],
    z: &[f64],
    z_hat: &[f64],
) -> Result<f64> {
    if z.len() != z_hat.len() || z.is_empty() {
        return Err(CoreError::shape(
            format!("{} logit values", z.len().max(1)),
            z_hat.len(),
        ));
    }
    Ok(fpa_sample_loss(x, x_hat, f, f_hat)? + sq_diff_sum(z, z_hat) / libm::sqrt(z.len() as f64))
}

// ---------------------------------------------------------------------------
// Median filter
// ---------------------------------------------------------------------------

/// 2×2 sliding-window median per channel. The window anchored at (i, j)
/// covers rows {i, i+1} and columns {j, j+1} with symmetric reflection at
/// the bottom/right border (the edge sample repeats). The median of four
/// values is the mean of the two middle ones.
pub fn median_filter_2x2(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.height < 2 || s.width < 2 {
        return Err(CoreError::invalid(format!(
            "median filter needs at least 2x2 pixels, got {s}"
        )));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 1 - i };
    let mut out = Tensor::zeros(s);
    for c in 0..s.channels {
        for i in 0..s.height {
            for j in 0..s.width {
                let mut w = [
                    image.at(c, i, j),
                    image.at(c, i, reflect(j + 1, s.width)),
                    image.at(c, reflect(i + 1, s.height), j),
                    image.at(
                        c,
                        reflect(i + 1, s.height),
                        reflect(j + 1, s.width),
                    ),
                ];
                w.sort_by(|a, b| a.partial_cmp(b).expect("pixel values are ordered"));
                *out.at_mut(c, i, j) = 0.5 * (w[1] + w[2]);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

const AE_ENC_WIDTHS: [usize; 3] = [24, 48, 48];
/// A single downsampling stage: the latent stays overcomplete, so fidelity
/// is limited by training rather than by an information bottleneck. The
/// denoising objective keeps the map from collapsing into a plain identity.
const AE_ENC_STRIDES: [usize; 3] = [2, 1, 1];
/// Decoder stages that double the spatial size before convolving (mirrors
/// the encoder strides in reverse).
const AE_DEC_UPSAMPLE: [bool; 3] = [false, true, false];

#[derive(Debug, Clone)]
struct AeLayers {
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

fn build_ae(layout: &mut ParamLayout, shape: ImageShape) -> AeLayers {
    let mut enc = Vec::with_capacity(3);
    let mut in_ch = shape.channels;
    for (&w, &s) in AE_ENC_WIDTHS.iter().zip(&AE_ENC_STRIDES) {
        enc.push(Conv2d::new(layout, in_ch, w, 3, s, 1));
        in_ch = w;
    }
    let dec_widths = [48, 24, shape.channels];
    let mut dec = Vec::with_capacity(3);
    for &w in &dec_widths {
        dec.push(Conv2d::new(layout, in_ch, w, 3, 1, 1));
        in_ch = w;
    }
    AeLayers { enc, dec }
}

struct AeTape {
    enc_in: Vec<Tensor>,
    enc_out: Vec<Tensor>,
    dec_in: Vec<Tensor>,
    dec_out: Vec<Tensor>,
    output: Tensor,
}

/// A small convolutional autoencoder (two stride-2 and one stride-1 encoder
/// convolutions, mirrored upsample+convolution decoder stages, sigmoid
/// output) paired with a frozen few-shot classifier whose features it
/// learns to preserve.
#[derive(Debug, Clone)]
pub struct FpaModel {
    input_shape: ImageShape,
    layers: AeLayers,
    params: Vec<f64>,
    variant: LossVariant,
    trained: bool,
    paired_model_fingerprint: Option<u64>,
}

impl FpaModel {
    /// A freshly initialized (untrained) autoencoder.
    pub fn new(input_shape: ImageShape, init_seed: u64) -> Result<Self> {
        let down: usize = AE_ENC_STRIDES.iter().product();
        if input_shape.channels == 0
            || input_shape.height < 4
            || input_shape.width < 4
            || input_shape.height % down != 0
            || input_shape.width % down != 0
        {
            return Err(CoreError::invalid(format!(
                "autoencoder needs height and width >= 4 and divisible by {down}, got {input_shape}"
            )));
        }
        let mut layout = ParamLayout::new();
        let layers = build_ae(&mut layout, input_shape);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        for c in layers.enc.iter().chain(&layers.dec) {
            c.init(&mut params, &mut rng);
        }
        Ok(FpaModel {
            input_shape,
            layers,
            params,
            variant: LossVariant::StandardAe,
            trained: false,
            paired_model_fingerprint: None,
        })
    }

    /// Rebuilds a checkpointed autoencoder.
    pub fn from_parts(
        input_shape: ImageShape,
        variant: LossVariant,
        trained: bool,
        paired_model_fingerprint: Option<u64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut model = FpaModel::new(input_shape, 0)?;
        if params.len() != model.params.len() {
            return Err(CoreError::shape(
                format!("{} parameters", model.params.len()),
                params.len(),
            ));
        }
        model.params = params;
        model.variant = variant;
        model.trained = trained;
        model.paired_model_fingerprint = paired_model_fingerprint;
        Ok(model)
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn variant(&self) -> LossVariant {
        self.variant
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn paired_model_fingerprint(&self) -> Option<u64> {
        self.paired_model_fingerprint
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Content fingerprint over architecture, variant, and weights.
    pub fn fingerprint(&self) -> u64 {
        let desc = format!(
            "{}|{}|{}|{:?}",
            self.input_shape, self.variant, self.trained, self.paired_model_fingerprint
        );
        fnv1a64_f64(fnv1a64(desc.as_bytes()), &self.params)
    }

    /// Errors unless this autoencoder is trained with a filter-grade
    /// objective (feature- or logits-preserving).
    pub fn usable_as_filter(&self) -> Result<()> {
        if !self.trained {
            return Err(CoreError::NotUsable(
                "autoencoder weights are untrained".into(),
            ));
        }
        if self.variant == LossVariant::StandardAe {
            return Err(CoreError::NotUsable(
                "autoencoder was only pretrained on image reconstruction; fine-tune it before filtering".into(),
            ));
        }
        Ok(())
    }

    fn forward_tape(&self, x: &Tensor) -> AeTape {
        let p = &self.params;
        let mut enc_in = Vec::with_capacity(3);
        let mut enc_out = Vec::with_capacity(3);
        let mut cur = x.clone();
        for conv in &self.layers.enc {
            let pre = conv.forward(p, &cur);
            enc_in.push(cur);
            cur = relu(&pre);
            enc_out.push(pre);
        }
        let mut dec_in = Vec::with_capacity(3);
        let mut dec_out = Vec::with_capacity(3);
        for (li, conv) in self.layers.dec.iter().enumerate() {
            let up = if AE_DEC_UPSAMPLE[li] {
                upsample2(&cur)
            } else {
                cur.clone()
            };
            let pre = conv.forward(p, &up);
            dec_in.push(up);
            cur = if li + 1 < self.layers.dec.len() {
                relu(&pre)
            } else {
                sigmoid(&pre)
            };
            dec_out.push(pre);
        }
        AeTape {
            enc_in,
            enc_out,
            dec_in,
            dec_out,
            output: cur,
        }
    }

    /// Accumulates parameter gradients of `<g_out, reconstruct(x)>`.
    fn backward(&self, tape: &AeTape, g_out: &Tensor, gparams: &mut [f64]) {
        let p = &self.params;
        let last = self.layers.dec.len() - 1;
        let mut g = sigmoid_backward(&tape.output, g_out);
        for li in (0..self.layers.dec.len()).rev() {
            if li != last {
                g = relu_backward(&tape.dec_out[li], &g);
            }
            let g_up = self.layers.dec[li]
                .backward(p, &tape.dec_in[li], &g, Some(gparams), true)
                .expect("decoder input gradient");
            if AE_DEC_UPSAMPLE[li] {
                let up_shape = tape.dec_in[li].shape();
                let pre_shape =
                    ImageShape::new(up_shape.channels, up_shape.height / 2, up_shape.width / 2);
                g = upsample2_backward(pre_shape, &g_up);
            } else {
                g = g_up;
            }
        }
        for li in (0..self.layers.enc.len()).rev() {
            g = relu_backward(&tape.enc_out[li], &g);
            match self.layers.enc[li].backward(
                p,
                &tape.enc_in[li],
                &g,
                Some(gparams),
                li > 0,
            ) {
                Some(gx) => g = gx,
                None => break,
            }
        }
    }

    /// Reconstructs one image; output pixels are sigmoid-squashed into (0,1).
    pub fn reconstruct(&self, img: &Tensor) -> Result<Tensor> {
        if img.shape() != self.input_shape {
            return Err(CoreError::shape(self.input_shape, img.shape()));
        }
        Ok(self.forward_tape(img).output)
    }
}

// ---------------------------------------------------------------------------
// Autoencoder training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AeHyperparams {
    /// Image-MSE pretraining epochs (may be 0 to skip pretraining).
    pub epochs_standard: usize,
    /// Fine-tuning epochs with the feature/logits-preserving loss.
    pub epochs_finetune: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_gamma` every `lr_step_epochs`
    /// epochs, per stage.
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub batch_size: usize,
    /// Reference episode geometry for the logits-preservation term.
    pub reference_ways: usize,
    pub reference_shots: usize,
    /// Enrich the training stream with flips, cross-image mixing, and
    /// brightness/contrast jitter so the autoencoder learns an image prior
    /// instead of memorizing the (few) training images.
    pub augment: bool,
    /// Upper bound of the per-sample noise amplitude injected into inputs
    /// while the target stays clean (denoising objective). Only used when
    /// `augment` is set; 0 disables the noise while keeping the other
    /// augmentations.
    pub denoise_max_std: f64,
    pub seed: u64,
}

impl Default for AeHyperparams {
    fn default() -> Self {
        AeHyperparams {
            epochs_standard: 10,
            epochs_finetune: 10,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lr_step_epochs: 10,
            lr_gamma: 0.1,
            batch_size: 16,
            reference_ways: 5,
            reference_shots: 5,
            augment: true,
            denoise_max_std: 0.1,
            seed: 0,
        }
    }
}

impl AeHyperparams {
    pub fn validate(&self, variant: LossVariant) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::invalid("learning_rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CoreError::invalid("weight_decay must be >= 0"));
        }
        if self.lr_step_epochs == 0 || !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(CoreError::invalid(
                "lr schedule needs step >= 1 and gamma in (0, 1]",
            ));
        }
        if self.batch_size == 0 {
            return Err(CoreError::invalid("batch_size must be positive"));
        }
        if !(self.denoise_max_std >= 0.0) {
            return Err(CoreError::invalid("denoise_max_std must be >= 0"));
        }
        match variant {
            LossVariant::StandardAe if self.epochs_standard == 0 => Err(CoreError::invalid(
                "standard_ae training needs epochs_standard >= 1",
            )),
            LossVariant::Fpa | LossVariant::FpaPrime if self.epochs_finetune == 0 => Err(
                CoreError::invalid("fine-tuned variants need epochs_finetune >= 1"),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AeStage {
    Standard,
    FineTune,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AeEpochStats {
    pub stage: AeStage,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub learning_rate: f64,
}

fn pooled_images(ds: &Dataset) -> Vec<&Tensor> {
    ds.iter_classes()
        .flat_map(|(_, imgs)| imgs.iter())
        .collect()
}

/// Per-sample loss context for one fine-tune batch: the reference episode's
/// class features (logits term only).
struct FineTuneContext {
    class_feats: Option<Vec<Tensor>>,
}

struct SampleLoss {
    loss: f64,
    g_recon: Tensor,
}

/// Loss of one reconstruction against its target image (usually the input
/// itself; under denoising augmentation the clean image behind a noisy
/// input), with the gradient w.r.t. the reconstruction.
fn stage_loss(
    ae: &FpaModel,
    few_shot: Option<&FewShotModel>,
    stage: AeStage,
    variant: LossVariant,
    ctx: &FineTuneContext,
    target: &Tensor,
    tape: &AeTape,
) -> Result<SampleLoss> {
    let y = &tape.output;
    let dim_x = target.len() as f64;
    let mut g = Tensor::zeros(ae.input_shape);
    let loss = match (stage, variant) {
        (AeStage::Standard, _) => {
            // Plain image MSE.
            for (i, gv) in g.data_mut().iter_mut().enumerate() {
                *gv = 2.0 * (y.data()[i] - target.data()[i]) / dim_x;
            }
            sq_diff_sum(target.data(), y.data()) / dim_x
        }
        (AeStage::FineTune, variant) => {
            let model = few_shot.expect("fine-tuning requires the paired classifier");
            let f = model.encode(target)?;
            let (f_hat, enc_tape) = model.encode_cached(y)?;
            let sqrt_dim_x = libm::sqrt(dim_x);
            for (i, gv) in g.data_mut().iter_mut().enumerate() {
                *gv = 0.01 * 2.0 * (y.data()[i] - target.data()[i]) / sqrt_dim_x;
            }
            let sqrt_dim_f = libm::sqrt(f.len() as f64);
            let mut g_feat = Tensor::zeros(f.shape());
            for (i, gv) in g_feat.data_mut().iter_mut().enumerate() {
                *gv = 2.0 * (f_hat.data()[i] - f.data()[i]) / sqrt_dim_f;
            }
            g.add_scaled(&model.encode_backward(&enc_tape, &g_feat)?, 1.0);
            let mut loss = fpa_sample_loss(target, y, f.data(), f_hat.data())?;
            if variant == LossVariant::FpaPrime {
                let feats = ctx
                    .class_feats
                    .as_ref()
                    .expect("logits term requires a reference episode");
                let z = model.score_features(feats, &f)?;
                let (z_hat, q_tape) = model.score_query_cached(feats, y)?;
                let sqrt_dim_z = libm::sqrt(z.len() as f64);
                let dlogits: Vec<f64> = z_hat
                    .iter()
                    .zip(&z)
                    .map(|(zh, zv)| 2.0 * (zh - zv) / sqrt_dim_z)
                    .collect();
                g.add_scaled(&model.score_query_backward(&q_tape, &dlogits)?, 1.0);
                loss += sq_diff_sum(&z, &z_hat) / sqrt_dim_z;
            }
            loss
        }
    };
    Ok(SampleLoss { loss, g_recon: g })
}

fn flip_horizontal(img: &mut Tensor) {
    let ImageShape {
        channels,
        height,
        width,
    } = img.shape();
    let data = img.data_mut();
    for c in 0..channels {
        for r in 0..height {
            let row = (c * height + r) * width;
            data[row..row + width].reverse();
        }
    }
}

fn flip_vertical(img: &mut Tensor) {
    let ImageShape {
        channels,
        height,
        width,
    } = img.shape();
    let data = img.data_mut();
    for c in 0..channels {
        for r in 0..height / 2 {
            let a = (c * height + r) * width;
            let b = (c * height + (height - 1 - r)) * width;
            for k in 0..width {
                data.swap(a + k, b + k);
            }
        }
    }
}

fn transpose_square(img: &mut Tensor) {
    let ImageShape {
        channels,
        height,
        width,
    } = img.shape();
    let data = img.data_mut();
    for c in 0..channels {
        let base = c * height * width;
        for r in 0..height {
            for k in (r + 1)..width {
                data.swap(base + r * width + k, base + k * width + r);
            }
        }
    }
}

/// One augmented training draw: a possibly noisy input plus the clean target
/// its reconstruction is scored against. Mixing, flips, and gain/bias jitter
/// spread the handful of training images into a whole family; the input
/// noise (Gaussian or constant-magnitude sign noise) teaches the autoencoder
/// to project perturbed images back onto that family rather than reproduce
/// them verbatim.
fn augment_sample(
    pool: &[&Tensor],
    idx: usize,
    hp: &AeHyperparams,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let mut img = pool[idx].clone();
    if rng.random_bool(0.5) {
        let other = pool[rng.random_range(0..pool.len())];
        let lam = rng.random_range(0.3..0.7);
        for (v, o) in img.data_mut().iter_mut().zip(other.data()) {
            *v = lam * *v + (1.0 - lam) * o;
        }
    }
    if rng.random_bool(0.5) {
        flip_horizontal(&mut img);
    }
    if rng.random_bool(0.5) {
        flip_vertical(&mut img);
    }
    let shape = img.shape();
    if shape.height == shape.width && rng.random_bool(0.5) {
        transpose_square(&mut img);
    }
    let gain = rng.random_range(0.7..1.3);
    let bias = rng.random_range(-0.15..0.15);
    for v in img.data_mut() {
        *v = (gain * *v + bias).clamp(0.0, 1.0);
    }
    let target = img.clone();
    if hp.denoise_max_std > 0.0 {
        let amp = rng.random_range(0.0..hp.denoise_max_std);
        let sign_noise = rng.random_bool(0.5);
        for v in img.data_mut() {
            let n = if sign_noise {
                if rng.random_bool(0.5) {
                    amp
                } else {
                    -amp
                }
            } else {
                let z: f64 = StandardNormal.sample(rng);
                amp * z
            };
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }
    (img, target)
}

/// Draws the class features of a fresh reference episode for the logits
/// term. Only the supports matter; queries come from the sample itself.
fn reference_class_feats(
    ds: &Dataset,
    model: &FewShotModel,
    hp: &AeHyperparams,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let ep = sample_episode(ds, hp.reference_ways, hp.reference_shots, hp.reference_ways, seed)?;
    ep.support.iter().map(|c| model.encode_mean(c)).collect()
}

/// Two-stage autoencoder training: image-MSE pretraining, then fine-tuning
/// with the requested preservation loss against the frozen classifier.
/// Returns the weights of the best validation epoch of the final stage.
pub fn train_autoencoder(
    ds_train: &Dataset,
    ds_val: &Dataset,
    few_shot: Option<&FewShotModel>,
    variant: LossVariant,
    hp: &AeHyperparams,
) -> Result<(FpaModel, Vec<AeEpochStats>)> {
    hp.validate(variant)?;
    if variant != LossVariant::StandardAe && few_shot.is_none() {
        return Err(CoreError::invalid(
            "feature-preserving variants need the paired classifier",
        ));
    }
    if let Some(m) = few_shot {
        if m.config().input_shape != ds_train.image_shape() {
            return Err(CoreError::shape(
                m.config().input_shape,
                ds_train.image_shape(),
            ));
        }
    }
    let mut ae = FpaModel::new(ds_train.image_shape(), hp.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    rng.set_stream(1);
    let mut history = Vec::new();

    let train_imgs = pooled_images(ds_train);
    let val_imgs = pooled_images(ds_val);
    if train_imgs.is_empty() || val_imgs.is_empty() {
        return Err(CoreError::invalid("autoencoder needs train and val images"));
    }

    // Fixed reference episode for validation-loss comparability across epochs.
    let val_ref = if variant == LossVariant::FpaPrime {
        FineTuneContext {
            class_feats: Some(reference_class_feats(
                ds_train,
                few_shot.unwrap(),
                hp,
                rng.random(),
            )?),
        }
    } else {
        FineTuneContext { class_feats: None }
    };

    let stages: &[(AeStage, LossVariant, usize)] = &[
        (AeStage::Standard, LossVariant::StandardAe, hp.epochs_standard),
        (AeStage::FineTune, variant, hp.epochs_finetune),
    ];
    for &(stage, stage_variant, epochs) in stages {
        if epochs == 0 || (stage == AeStage::FineTune && variant == LossVariant::StandardAe) {
            continue;
        }
        let mut adam = Adam::new(ae.params.len(), hp.weight_decay);
        let mut grads = vec![0.0; ae.params.len()];
        let mut best_val = f64::INFINITY;
        let mut best_params = ae.params.clone();
        for epoch in 0..epochs {
            let lr = hp.learning_rate
                * libm::pow(hp.lr_gamma, (epoch / hp.lr_step_epochs) as f64);
            let mut order: Vec<usize> = (0..train_imgs.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let mut train_loss = 0.0;
            for batch in order.chunks(hp.batch_size) {
                let ctx = if stage == AeStage::FineTune && variant == LossVariant::FpaPrime {
                    FineTuneContext {
                        class_feats: Some(reference_class_feats(
                            ds_train,
                            few_shot.unwrap(),
                            hp,
                            rng.random(),
                        )?),
                    }
                } else {
                    FineTuneContext { class_feats: None }
                };
                grads.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / batch.len() as f64;
                let mut batch_loss = 0.0;
                for &idx in batch {
                    let aug = hp
                        .augment
                        .then(|| augment_sample(&train_imgs, idx, hp, &mut rng));
                    let (input, target): (&Tensor, &Tensor) = match &aug {
                        Some((input, target)) => (input, target),
                        None => (train_imgs[idx], train_imgs[idx]),
                    };
                    let tape = ae.forward_tape(input);
                    let sample =
                        stage_loss(&ae, few_shot, stage, stage_variant, &ctx, target, &tape)?;
                    if !sample.loss.is_finite() {
                        return Err(CoreError::Divergence(format!(
                            "autoencoder {stage:?} loss became non-finite in epoch {epoch}"
                        )));
                    }
                    batch_loss += sample.loss * scale;
                    let mut g = sample.g_recon;
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                    ae.backward(&tape, &g, &mut grads);
                }
                adam.step(&mut ae.params, &grads, lr);
                train_loss += batch_loss * batch.len() as f64;
            }
            train_loss /= train_imgs.len() as f64;

            let mut val_loss = 0.0;
            for x in &val_imgs {
                let tape = ae.forward_tape(x);
                val_loss +=
                    stage_loss(&ae, few_shot, stage, stage_variant, &val_ref, x, &tape)?.loss;
            }
            val_loss /= val_imgs.len() as f64;
            if !val_loss.is_finite() {
                return Err(CoreError::Divergence(format!(
                    "autoencoder validation loss became non-finite in epoch {epoch}"
                )));
            }
            if val_loss < best_val {
                best_val = val_loss;
                best_params.copy_from_slice(&ae.params);
            }
            history.push(AeEpochStats {
                stage,
                epoch,
                train_loss,
                val_loss,
                best_val_loss: best_val,
                learning_rate: lr,
            });
        }
        ae.params = best_params;
    }

    ae.variant = variant;
    ae.trained = true;
    ae.paired_model_fingerprint = if variant == LossVariant::StandardAe {
        None
    } else {
        few_shot.map(FewShotModel::fingerprint)
    };
    Ok((ae, history))
}

// ---------------------------------------------------------------------------
// Filter functions
// ---------------------------------------------------------------------------

/// A support-set filter. Applying it preserves shapes and the [0,1] range.
#[derive(Debug, Clone)]
pub enum FilterFunction {
    Identity,
    /// Adds zero-mean Gaussian noise with per-channel variance estimated
    /// over the given support set.
    Noise,
    Median2x2,
    /// Reconstruction through a trained feature-preserving autoencoder.
    Fpa(FpaModel),
}

impl FilterFunction {
    pub fn kind(&self) -> FilterKind {
        match self {
            FilterFunction::Identity => FilterKind::Identity,
            FilterFunction::Noise => FilterKind::Noise,
            FilterFunction::Median2x2 => FilterKind::Median2x2,
            FilterFunction::Fpa(m) => match m.variant() {
                LossVariant::FpaPrime => FilterKind::FpaPrime,
                _ => FilterKind::Fpa,
            },
        }
    }

    /// Errors when the filter embeds an autoencoder paired with a different
    /// classifier than the one about to consume the filtered supports.
    pub fn check_compatible(&self, model: &FewShotModel) -> Result<()> {
        if let FilterFunction::Fpa(ae) = self {
            if let Some(expected) = ae.paired_model_fingerprint() {
                let got = model.fingerprint();
                if got != expected {
                    return Err(CoreError::ModelMismatch { expected, got });
                }
            }
        }
        Ok(())
    }

    /// Filters a support subset. `seed` only matters for the noise filter;
    /// every kind is deterministic given (input, seed).
    pub fn apply(&self, images: &[Tensor], seed: u64) -> Result<Vec<Tensor>> {
        if images.is_empty() {
            return Err(CoreError::invalid("cannot filter an empty support set"));
        }
        match self {
            FilterFunction::Identity => Ok(images.to_vec()),
            FilterFunction::Noise => {
                let shape = images[0].shape();
                for img in images {
                    images[0].check_same_shape(img, "support images")?;
                }
                let hw = shape.height * shape.width;
                let n = (images.len() * hw) as f64;
                let mut out: Vec<Tensor> = images.to_vec();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for c in 0..shape.channels {
                    // A constant channel has zero variance; leave its bits
                    // alone rather than add rounding-noise-scaled samples.
                    let anchor = images[0].data()[c * hw];
                    let constant = images
                        .iter()
                        .all(|img| img.data()[c * hw..(c + 1) * hw].iter().all(|&v| v == anchor));
                    if constant {
                        continue;
                    }
                    let mut mean = 0.0;
                    for img in images {
                        mean += img.data()[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                    mean /= n;
                    let mut var = 0.0;
                    for img in images {
                        var += img.data()[c * hw..(c + 1) * hw]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    var /= n;
                    let std = libm::sqrt(var);
                    for img in &mut out {
                        for v in &mut img.data_mut()[c * hw..(c + 1) * hw] {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v = (*v + std * z).clamp(0.0, 1.0);
                        }
                    }
                }
                Ok(out)
            }
            FilterFunction::Median2x2 => images.iter().map(median_filter_2x2).collect(),
            FilterFunction::Fpa(ae) => {
                ae.usable_as_filter()?;
                images.iter().map(|img| ae.reconstruct(img)).collect()
            }
        }
    }
}

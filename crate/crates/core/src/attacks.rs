//! White-box support-set poisoning. Both attacks perturb only the target
//! class's support images; every optimization step re-draws the rest of the
//! episode (other classes' supports and the target queries) so the
//! perturbation must work against fresh context, not one fixed episode.
//!
//! - PGD: gradient-sign ascent on query cross-entropy inside an ℓ∞ ball
//!   around the clean supports, pixels kept in [0,1] throughout.
//! - CW-SGD: plain gradient descent on `‖δ‖₂ + const · margin`, unbounded
//!   during optimization, final images clipped to [0,1] only at the end.
//!
//! Model parameters are read-only here: only input gradients of the target
//! supports are ever used.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episodes::{sample_episode_with_fixed_target, Dataset, Episode};
use crate::error::{CoreError, Result};
use crate::models::{FewShotModel, InputGradRequest};
use crate::nn::{argmax, softmax_cross_entropy};
use crate::tensor::{fabs, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttackKind {
    Pgd,
    CwSgd,
}

impl core::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            AttackKind::Pgd => write!(f, "pgd"),
            AttackKind::CwSgd => write!(f, "cw_sgd"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ radius in pixel units. Bounds PGD iterates; for CW-SGD it only
    /// scales the initialization noise.
    pub epsilon: f64,
    /// Step size (PGD) or SGD learning rate (CW).
    pub eta: f64,
    pub iterations: usize,
    /// Confidence floor of the CW margin.
    pub kappa: f64,
    /// Weight of the margin term in the CW objective.
    pub const_weight: f64,
    pub seed: u64,
}

impl AttackConfig {
    /// PGD with the reference pixel budget 12/255 and step 0.05.
    pub fn pgd() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: 12.0 / 255.0,
            eta: 0.05,
            iterations: 100,
            kappa: 0.0,
            const_weight: 0.0,
            seed: 0,
        }
    }

    /// CW-SGD with the reference settings κ=0.1 and η=50.
    pub fn cw_sgd() -> Self {
        AttackConfig {
            kind: AttackKind::CwSgd,
            epsilon: 12.0 / 255.0,
            eta: 50.0,
            iterations: 100,
            kappa: 0.1,
            const_weight: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(CoreError::invalid(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(CoreError::invalid(format!(
                "eta must be finite and >= 0, got {}",
                self.eta
            )));
        }
        if self.iterations == 0 {
            return Err(CoreError::invalid("iterations must be at least 1"));
        }
        if !(self.kappa >= 0.0) {
            return Err(CoreError::invalid(format!(
                "kappa must be >= 0, got {}",
                self.kappa
            )));
        }
        if !(self.const_weight >= 0.0) {
            return Err(CoreError::invalid(format!(
                "const weight must be >= 0, got {}",
                self.const_weight
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Margins
// ---------------------------------------------------------------------------

/// Hinge margin `max(-kappa, max_{i!=t} h_i - h_t)`: negative (down to
/// -kappa) when class `t` dominates by at least kappa.
pub fn cw_margin(logits: &[f64], t: usize, kappa: f64) -> f64 {
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != t)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (best_other - logits[t]).max(-kappa)
}

/// Hinge margin `max(-kappa, h_c - max_{i!=c} h_i)`: positive while class
/// `c` still wins, floored at -kappa once it loses by kappa. Driving this
/// down destroys classification of `c`; the floor stops the push once the
/// misclassification is confident enough.
pub fn destruction_margin(logits: &[f64], c: usize, kappa: f64) -> f64 {
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != c)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (logits[c] - best_other).max(-kappa)
}

fn best_other_index(logits: &[f64], c: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if i != c && v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Attack loss
// ---------------------------------------------------------------------------

/// The per-episode objective seen by one optimization step, with gradients
/// w.r.t. the adversarial supports only (no other input or parameter
/// gradients are computed).
///
/// - PGD: mean cross-entropy of the target-class queries — the attacker
///   ascends it.
/// - CW-SGD: mean [`destruction_margin`] of the target-class queries — the
///   attacker descends it; the δ-norm term lives in [`run_cw_sgd`].
pub fn attack_loss(
    model: &FewShotModel,
    cfg: &AttackConfig,
    target_class: &str,
    adv_support: &[Tensor],
    episode: &Episode,
) -> Result<(f64, Vec<Tensor>)> {
    let way = episode
        .way_of(target_class)
        .ok_or_else(|| CoreError::ClassNotFound(target_class.to_string()))?;
    if adv_support.is_empty() {
        return Err(CoreError::invalid("adversarial support is empty"));
    }
    let mut support: Vec<&[Tensor]> = episode.support.iter().map(|v| v.as_slice()).collect();
    support[way] = adv_support;
    let queries: Vec<&Tensor> = episode
        .query
        .iter()
        .filter(|(_, w)| *w == way)
        .map(|(img, _)| img)
        .collect();
    if queries.is_empty() {
        return Err(CoreError::invalid(format!(
            "episode has no queries for target class {target_class}"
        )));
    }
    let (logits, cache) = model.episode_forward(&support, &queries)?;
    let scale = 1.0 / logits.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = vec![vec![0.0; support.len()]; logits.len()];
    match cfg.kind {
        AttackKind::Pgd => {
            for (q, row) in logits.iter().enumerate() {
                let (l, g) = softmax_cross_entropy(row, way);
                loss += l * scale;
                for (k, v) in g.iter().enumerate() {
                    dlogits[q][k] = v * scale;
                }
            }
        }
        AttackKind::CwSgd => {
            for (q, row) in logits.iter().enumerate() {
                let m = destruction_margin(row, way, cfg.kappa);
                loss += m * scale;
                // Below the floor the hinge is flat and contributes nothing.
                if m > -cfg.kappa {
                    dlogits[q][way] += scale;
                    dlogits[q][best_other_index(row, way)] -= scale;
                }
            }
        }
    }
    let grads = model
        .episode_backward(&cache, &dlogits, None, InputGradRequest::SupportWay(way))?
        .support_way
        .expect("support gradients requested");
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// The durable product of one attack run: clean supports, additive
/// perturbations, and everything needed to re-evaluate them later.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRecord {
    pub target_class: String,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_episode: usize,
    pub base_support: Vec<Tensor>,
    /// Additive perturbations, one per support image of the target class.
    pub deltas: Vec<Tensor>,
    pub config: AttackConfig,
    pub model_fingerprint: u64,
    /// Per-iteration objective: cross-entropy for PGD (rises as the attack
    /// strengthens), `‖δ‖₂ + const·margin` for CW-SGD (falls).
    pub loss_trace: Vec<f64>,
}

impl PerturbationRecord {
    /// The poisoned support set: base + delta, clipped to pixel range.
    pub fn adversarial_support(&self) -> Vec<Tensor> {
        apply_deltas(&self.base_support, &self.deltas).expect("record shapes validated")
    }

    /// Largest absolute pixel perturbation across all support images.
    pub fn linf(&self) -> f64 {
        self.deltas
            .iter()
            .flat_map(|d| d.data().iter())
            .fold(0.0, |m, &v| m.max(fabs(v)))
    }

    /// Joint Euclidean norm of all perturbations.
    pub fn l2(&self) -> f64 {
        libm::sqrt(self.deltas.iter().map(Tensor::squared_l2_norm).sum())
    }

    /// Structural invariants: aligned shapes, finite values, and (for the
    /// ball-constrained attack) every delta within epsilon. Run after
    /// deserializing a record from disk.
    pub fn validate(&self) -> Result<()> {
        if self.base_support.len() != self.shots || self.deltas.len() != self.shots {
            return Err(CoreError::shape(
                format!("{} support images and deltas", self.shots),
                format!(
                    "{} images, {} deltas",
                    self.base_support.len(),
                    self.deltas.len()
                ),
            ));
        }
        for (b, d) in self.base_support.iter().zip(&self.deltas) {
            b.check_same_shape(d, "support image and delta")?;
            if !b.is_finite() || !d.is_finite() {
                return Err(CoreError::invalid("record contains non-finite values"));
            }
        }
        if self.config.kind == AttackKind::Pgd && self.linf() > self.config.epsilon {
            return Err(CoreError::invalid(format!(
                "delta magnitude {} exceeds the epsilon bound {}",
                self.linf(),
                self.config.epsilon
            )));
        }
        Ok(())
    }

    /// Errors unless `model` is the one this record was crafted against.
    pub fn check_model(&self, model: &FewShotModel) -> Result<()> {
        let got = model.fingerprint();
        if got != self.model_fingerprint {
            return Err(CoreError::ModelMismatch {
                expected: self.model_fingerprint,
                got,
            });
        }
        Ok(())
    }
}

/// Adds stored perturbations to a support set and clips to pixel range.
/// This is the one canonical way perturbations are re-applied, for both the
/// original supports and freshly drawn ones.
pub fn apply_deltas(base: &[Tensor], deltas: &[Tensor]) -> Result<Vec<Tensor>> {
    if base.len() != deltas.len() {
        return Err(CoreError::shape(
            format!("{} deltas", base.len()),
            deltas.len(),
        ));
    }
    base.iter()
        .zip(deltas)
        .map(|(b, d)| {
            b.check_same_shape(d, "support image and delta")?;
            let mut out = b.clone();
            out.add_scaled(d, 1.0);
            out.clamp_in_place(0.0, 1.0);
            Ok(out)
        })
        .collect()
}

/// A completed attack plus anything worth surfacing about how it went.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub record: PerturbationRecord,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// PGD
// ---------------------------------------------------------------------------

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves `base + delta` into the ℓ∞ ball and the pixel box so that the
/// *measured* distance `|v - base|` respects the bound bitwise. Float
/// rounding can push the clipped sum one ulp past the boundary; the loop
/// pulls it back (at most a step or two).
fn bound_pixel(base: f64, delta: f64, eps: f64) -> f64 {
    let mut v = (base + delta.clamp(-eps, eps)).clamp(0.0, 1.0);
    while fabs(v - base) > eps {
        v = libm::nextafter(v, base);
    }
    v
}

fn assert_ball(adv: &[Tensor], base: &[Tensor], eps: f64) {
    for (a, b) in adv.iter().zip(base) {
        assert!(
            a.linf_distance(b) <= eps,
            "iterate left the epsilon ball: {} > {eps}",
            a.linf_distance(b)
        );
        assert!(
            a.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "iterate left the pixel box"
        );
    }
}

fn draw_base_support(
    ds: &Dataset,
    target_class: &str,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    let pool = ds.class_samples(target_class)?;
    if pool.len() < shots {
        return Err(CoreError::InsufficientSamples {
            class: target_class.to_string(),
            needed: shots,
            available: pool.len(),
        });
    }
    let idx = rand::seq::index::sample(rng, pool.len(), shots);
    Ok(idx.iter().map(|i| pool[i].clone()).collect())
}

/// Non-target class identities seen per iteration; the redraw contract says
/// these should not be frozen. Checked when the dataset is rich enough for
/// a repeat to be overwhelmingly unlikely.
fn assert_context_resampled(ds: &Dataset, ways: usize, contexts: &[BTreeSet<String>]) {
    let spare_classes = ds.n_classes().saturating_sub(1);
    if spare_classes >= 6 && spare_classes > ways - 1 && contexts.len() >= 10 {
        let first = &contexts[0];
        assert!(
            contexts[..10].iter().any(|c| c != first),
            "episode context never changed across 10 iterations"
        );
    }
}

/// PGD over the target class's supports. `observer` sees every iterate:
/// once at index 0 right after initialization (no episode yet), then after
/// each step with the episode that produced it.
#[allow(clippy::too_many_arguments)]
pub fn run_pgd_observed(
    model: &FewShotModel,
    ds: &Dataset,
    target_class: &str,
    ways: usize,
    shots: usize,
    queries_per_episode: usize,
    cfg: &AttackConfig,
    mut observer: impl FnMut(usize, &[Tensor], Option<&Episode>),
) -> Result<AttackOutcome> {
    if cfg.kind != AttackKind::Pgd {
        return Err(CoreError::invalid(format!(
            "expected a pgd config, got {}",
            cfg.kind
        )));
    }
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.epsilon == 0.0 {
        warnings.push(String::from(
            "epsilon is 0: initialization noise and every update clip to nothing, deltas are identically zero",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = draw_base_support(ds, target_class, shots, &mut rng)?;
    let mut adv: Vec<Tensor> = base
        .iter()
        .map(|b| {
            let mut img = b.clone();
            for v in img.data_mut() {
                let noise = rng.random_range(-cfg.epsilon..=cfg.epsilon);
                *v = bound_pixel(*v, noise, cfg.epsilon);
            }
            img
        })
        .collect();
    assert_ball(&adv, &base, cfg.epsilon);
    observer(0, &adv, None);

    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    let mut contexts: Vec<BTreeSet<String>> = Vec::with_capacity(cfg.iterations.min(10));
    for iter in 0..cfg.iterations {
        let ep = sample_episode_with_fixed_target(
            ds,
            ways,
            shots,
            queries_per_episode,
            target_class,
            Some(&adv),
            rng.random(),
        )?;
        if contexts.len() < 10 {
            contexts.push(
                ep.class_ids
                    .iter()
                    .filter(|c| c.as_str() != target_class)
                    .cloned()
                    .collect(),
            );
        }
        let (loss, grads) = attack_loss(model, cfg, target_class, &adv, &ep)?;
        if !loss.is_finite() {
            return Err(CoreError::Divergence(format!(
                "attack objective became non-finite at iteration {iter}"
            )));
        }
        loss_trace.push(loss);
        for (img, (b, g)) in adv.iter_mut().zip(base.iter().zip(&grads)) {
            let data = img.data_mut();
            for p in 0..data.len() {
                let d = (data[p] - b.data()[p]) + cfg.eta * sign(g.data()[p]);
                data[p] = bound_pixel(b.data()[p], d, cfg.epsilon);
            }
        }
        assert_ball(&adv, &base, cfg.epsilon);
        observer(iter + 1, &adv, Some(&ep));
    }
    assert_context_resampled(ds, ways, &contexts);

    let deltas: Vec<Tensor> = adv
        .iter()
        .zip(&base)
        .map(|(a, b)| {
            let mut d = a.clone();
            d.add_scaled(b, -1.0);
            d
        })
        .collect();
    let record = PerturbationRecord {
        target_class: target_class.to_string(),
        ways,
        shots,
        queries_per_episode,
        base_support: base,
        deltas,
        config: cfg.clone(),
        model_fingerprint: model.fingerprint(),
        loss_trace,
    };
    record.validate()?;
    Ok(AttackOutcome { record, warnings })
}

/// [`run_pgd_observed`] without the inspection hook.
pub fn run_pgd(
    model: &FewShotModel,
    ds: &Dataset,
    target_class: &str,
    ways: usize,
    shots: usize,
    queries_per_episode: usize,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    run_pgd_observed(
        model,
        ds,
        target_class,
        ways,
        shots,
        queries_per_episode,
        cfg,
        |_, _, _| {},
    )
}

// ---------------------------------------------------------------------------
// CW-SGD
// ---------------------------------------------------------------------------

/// CW-style attack: plain SGD on `‖δ‖₂ + const · margin` with per-iteration
/// episode redraws. No ball and no per-step clipping — the final images are
/// clipped to [0,1] once at the end.
pub fn run_cw_sgd(
    model: &FewShotModel,
    ds: &Dataset,
    target_class: &str,
    ways: usize,
    shots: usize,
    queries_per_episode: usize,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    if cfg.kind != AttackKind::CwSgd {
        return Err(CoreError::invalid(format!(
            "expected a cw_sgd config, got {}",
            cfg.kind
        )));
    }
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.epsilon == 0.0 {
        warnings.push(String::from(
            "epsilon is 0: the attack starts exactly at the clean support (no initialization noise)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = draw_base_support(ds, target_class, shots, &mut rng)?;
    let mut deltas: Vec<Tensor> = base
        .iter()
        .map(|b| {
            let mut d = Tensor::zeros(b.shape());
            for v in d.data_mut() {
                *v = rng.random_range(-cfg.epsilon..=cfg.epsilon);
            }
            d
        })
        .collect();

    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    let mut contexts: Vec<BTreeSet<String>> = Vec::with_capacity(cfg.iterations.min(10));
    for iter in 0..cfg.iterations {
        // Unclipped iterate: the norm term is what keeps δ reasonable.
        let adv: Vec<Tensor> = base
            .iter()
            .zip(&deltas)
            .map(|(b, d)| {
                let mut img = b.clone();
                img.add_scaled(d, 1.0);
                img
            })
            .collect();
        let ep = sample_episode_with_fixed_target(
            ds,
            ways,
            shots,
            queries_per_episode,
            target_class,
            Some(&adv),
            rng.random(),
        )?;
        if contexts.len() < 10 {
            contexts.push(
                ep.class_ids
                    .iter()
                    .filter(|c| c.as_str() != target_class)
                    .cloned()
                    .collect(),
            );
        }
        let (margin, margin_grads) = attack_loss(model, cfg, target_class, &adv, &ep)?;
        let norm = libm::sqrt(deltas.iter().map(Tensor::squared_l2_norm).sum());
        let objective = norm + cfg.const_weight * margin;
        if !objective.is_finite() {
            return Err(CoreError::Divergence(format!(
                "attack objective became non-finite at iteration {iter}"
            )));
        }
        loss_trace.push(objective);
        for (d, g) in deltas.iter_mut().zip(&margin_grads) {
            let data = d.data_mut();
            for p in 0..data.len() {
                // Subgradient of the joint norm; flat at the origin.
                let norm_term = if norm > 1e-12 { data[p] / norm } else { 0.0 };
                data[p] -= cfg.eta * (norm_term + cfg.const_weight * g.data()[p]);
            }
        }
    }
    assert_context_resampled(ds, ways, &contexts);

    // Clip the final images to pixel range; stored deltas absorb the clip.
    let final_deltas: Vec<Tensor> = base
        .iter()
        .zip(&deltas)
        .map(|(b, d)| {
            let mut img = b.clone();
            img.add_scaled(d, 1.0);
            img.clamp_in_place(0.0, 1.0);
            img.add_scaled(b, -1.0);
            img
        })
        .collect();
    let record = PerturbationRecord {
        target_class: target_class.to_string(),
        ways,
        shots,
        queries_per_episode,
        base_support: base,
        deltas: final_deltas,
        config: cfg.clone(),
        model_fingerprint: model.fingerprint(),
        loss_trace,
    };
    record.validate()?;
    Ok(AttackOutcome { record, warnings })
}

// ---------------------------------------------------------------------------
// Attack success rate
// ---------------------------------------------------------------------------

/// How stored perturbations are re-applied when measuring success.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scenario {
    /// The exact supports the attack was crafted on, reused every episode.
    FixedSupports,
    /// Freshly drawn target supports with the stored deltas added.
    NewSupports,
}

impl core::fmt::Display for Scenario {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Scenario::FixedSupports => write!(f, "fixed_supports"),
            Scenario::NewSupports => write!(f, "new_supports"),
        }
    }
}

/// Mean and spread of a per-episode fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrEstimate {
    pub mean: f64,
    pub std: f64,
    pub per_episode: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

fn misclassified_fraction(model: &FewShotModel, ep: &Episode, target_way: usize) -> Result<f64> {
    let class_feats: Vec<Tensor> = ep
        .support
        .iter()
        .map(|c| model.encode_mean(c))
        .collect::<Result<_>>()?;
    let mut misses = 0usize;
    for (img, way) in &ep.query {
        debug_assert_eq!(*way, target_way);
        let qf = model.encode(img)?;
        let logits = model.score_features(&class_feats, &qf)?;
        if argmax(&logits) != *way {
            misses += 1;
        }
    }
    Ok(misses as f64 / ep.query.len() as f64)
}

enum TargetSupports<'a> {
    Clean,
    Fixed(Vec<Tensor>),
    Shifted(&'a [Tensor]),
}

#[allow(clippy::too_many_arguments)]
fn run_target_error(
    model: &FewShotModel,
    ds: &Dataset,
    target_class: &str,
    ways: usize,
    shots: usize,
    queries_per_episode: usize,
    source: TargetSupports<'_>,
    n_episodes: usize,
    seed: u64,
) -> Result<AsrEstimate> {
    if n_episodes == 0 {
        return Err(CoreError::invalid("n_episodes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_episode = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let ep_seed: u64 = rng.random();
        let ep = match &source {
            TargetSupports::Fixed(adv) => sample_episode_with_fixed_target(
                ds,
                ways,
                shots,
                queries_per_episode,
                target_class,
                Some(adv),
                ep_seed,
            )?,
            TargetSupports::Clean | TargetSupports::Shifted(_) => {
                let mut ep = sample_episode_with_fixed_target(
                    ds,
                    ways,
                    shots,
                    queries_per_episode,
                    target_class,
                    None,
                    ep_seed,
                )?;
                if let TargetSupports::Shifted(deltas) = &source {
                    let way = ep.way_of(target_class).expect("target way present");
                    ep.support[way] = apply_deltas(&ep.support[way], deltas)?;
                }
                ep
            }
        };
        let way = ep.way_of(target_class).expect("target way present");
        per_episode.push(misclassified_fraction(model, &ep, way)?);
    }
    let (mean, std) = mean_std(&per_episode);
    Ok(AsrEstimate {
        mean,
        std,
        per_episode,
    })
}

/// Attack success rate: the fraction of target-class queries misclassified
/// when the target way carries the poisoned supports, averaged over fresh
/// episodes.
pub fn evaluate_asr(
    model: &FewShotModel,
    record: &PerturbationRecord,
    ds: &Dataset,
    scenario: Scenario,
    n_episodes: usize,
    seed: u64,
) -> Result<AsrEstimate> {
    record.check_model(model)?;
    record.validate()?;
    let source = match scenario {
        Scenario::FixedSupports => TargetSupports::Fixed(record.adversarial_support()),
        Scenario::NewSupports => TargetSupports::Shifted(&record.deltas),
    };
    run_target_error(
        model,
        ds,
        &record.target_class,
        record.ways,
        record.shots,
        record.queries_per_episode,
        source,
        n_episodes,
        seed,
    )
}

/// The same measurement with clean supports: the target class's baseline
/// error rate, i.e. what the attack must beat.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_clean_error(
    model: &FewShotModel,
    ds: &Dataset,
    target_class: &str,
    ways: usize,
    shots: usize,
    queries_per_episode: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<AsrEstimate> {
    run_target_error(
        model,
        ds,
        target_class,
        ways,
        shots,
        queries_per_episode,
        TargetSupports::Clean,
        n_episodes,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_synthetic, SyntheticSpec};
    use crate::models::{FewShotModel, HeadKind, ModelConfig};
    use crate::tensor::ImageShape;

    fn dataset() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n_classes: 8,
            samples_per_class: 10,
            image_shape: ImageShape::new(3, 8, 8),
            class_signal_strength: 1.0,
            noise_std: 0.15,
            seed: 40,
        })
        .unwrap()
    }

    fn model() -> FewShotModel {
        let mut cfg = ModelConfig::new(HeadKind::Relation, ImageShape::new(3, 8, 8));
        cfg.base_channels = 4;
        cfg.init_seed = 7;
        FewShotModel::new(cfg).unwrap()
    }

    fn short_pgd(iterations: usize) -> AttackConfig {
        AttackConfig {
            iterations,
            seed: 9,
            ..AttackConfig::pgd()
        }
    }

    #[test]
    fn margins_match_hand_computed_examples() {
        // Dominant class 0: the hinge floors at -kappa.
        assert_eq!(cw_margin(&[2.0, 0.5, 1.0], 0, 0.1), -0.1);
        // Same logits seen as a destruction margin: class 0 still wins by 1.
        assert_eq!(destruction_margin(&[2.0, 0.5, 1.0], 0, 0.1), 1.0);
        // Already misclassified by more than kappa: floored.
        assert_eq!(destruction_margin(&[0.2, 0.9, 0.1], 0, 0.1), -0.1);
        // Losing by less than kappa: the raw difference comes through.
        let m = destruction_margin(&[0.85, 0.9, 0.1], 0, 0.1);
        assert!((m - (-0.05)).abs() < 1e-12);
    }

    #[test]
    fn attack_loss_is_finite_and_scoped_to_target_supports() {
        let ds = dataset();
        let model = model();
        let cfg = short_pgd(1);
        let ep =
            sample_episode_with_fixed_target(&ds, 4, 3, 5, "c002", None, 11).unwrap();
        let way = ep.way_of("c002").unwrap();
        let adv = ep.support[way].clone();
        let (loss, grads) = attack_loss(&model, &cfg, "c002", &adv, &ep).unwrap();
        assert!(loss.is_finite());
        // One gradient per target support image and nothing else.
        assert_eq!(grads.len(), 3);
        assert!(grads.iter().all(|g| g.is_finite()));
        assert!(grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn attack_loss_rejects_missing_target_class() {
        let ds = dataset();
        let model = model();
        let cfg = short_pgd(1);
        let ep = sample_episode_with_fixed_target(&ds, 4, 3, 5, "c001", None, 3).unwrap();
        let adv = ep.support[0].clone();
        let absent = "no-such-class";
        assert!(matches!(
            attack_loss(&model, &cfg, absent, &adv, &ep),
            Err(CoreError::ClassNotFound(_))
        ));
    }

    #[test]
    fn floored_margins_zero_the_attack_gradients() {
        let ds = dataset();
        let model = model();
        // Scan for an episode the untrained model misclassifies on every
        // target query, then pick a floor the whole episode sits below:
        // every hinge is flat there.
        let raw_margins = |ep: &Episode, way: usize| -> Vec<f64> {
            let support: Vec<&[Tensor]> = ep.support.iter().map(|v| v.as_slice()).collect();
            let queries: Vec<&Tensor> = ep
                .query
                .iter()
                .filter(|(_, w)| *w == way)
                .map(|(img, _)| img)
                .collect();
            let (logits, _) = model.episode_forward(&support, &queries).unwrap();
            logits
                .iter()
                .map(|row| destruction_margin(row, way, f64::INFINITY))
                .collect()
        };
        let (ep, raw_max) = (0..50)
            .find_map(|seed| {
                let ep =
                    sample_episode_with_fixed_target(&ds, 4, 2, 4, "c003", None, seed).unwrap();
                let way = ep.way_of("c003").unwrap();
                let worst = raw_margins(&ep, way)
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max);
                (worst < 0.0).then_some((ep, worst))
            })
            .expect("some episode misclassifies every target query");
        let way = ep.way_of("c003").unwrap();
        let adv = ep.support[way].clone();
        let kappa = -raw_max / 2.0;
        let cfg = AttackConfig {
            kappa,
            ..AttackConfig::cw_sgd()
        };
        let (loss, grads) = attack_loss(&model, &cfg, "c003", &adv, &ep).unwrap();
        assert!((loss + kappa).abs() < 1e-12, "loss {loss} vs floor {kappa}");
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn pgd_single_step_with_zero_eta_keeps_only_init_noise() {
        let ds = dataset();
        let model = model();
        let cfg = AttackConfig {
            eta: 0.0,
            iterations: 1,
            ..short_pgd(1)
        };
        let mut init: Option<Vec<Tensor>> = None;
        let out = run_pgd_observed(&model, &ds, "c001", 4, 2, 4, &cfg, |i, adv, _| {
            if i == 0 {
                init = Some(adv.to_vec());
            }
        })
        .unwrap();
        let init = init.unwrap();
        for (img, (b, d)) in init
            .iter()
            .zip(out.record.base_support.iter().zip(&out.record.deltas))
        {
            // Final delta is exactly the initialization noise.
            let mut reconstructed = b.clone();
            reconstructed.add_scaled(d, 1.0);
            assert_eq!(img.data(), reconstructed.data());
        }
        assert!(out.record.linf() <= cfg.epsilon);
        assert!(out.record.linf() > 0.0, "noise should be nonzero");
    }

    #[test]
    fn pgd_with_zero_epsilon_warns_and_produces_zero_deltas() {
        let ds = dataset();
        let model = model();
        let cfg = AttackConfig {
            epsilon: 0.0,
            iterations: 3,
            ..short_pgd(3)
        };
        let out = run_pgd(&model, &ds, "c001", 4, 2, 4, &cfg).unwrap();
        assert!(!out.warnings.is_empty());
        assert!(out
            .record
            .deltas
            .iter()
            .all(|d| d.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn pgd_is_deterministic() {
        let ds = dataset();
        let model = model();
        let cfg = short_pgd(5);
        let a = run_pgd(&model, &ds, "c004", 4, 2, 4, &cfg).unwrap();
        let b = run_pgd(&model, &ds, "c004", 4, 2, 4, &cfg).unwrap();
        assert_eq!(a.record, b.record);
        let c = run_pgd(
            &model,
            &ds,
            "c004",
            4,
            2,
            4,
            &AttackConfig {
                seed: 10,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a.record.deltas, c.record.deltas);
    }

    #[test]
    fn pgd_iterates_respect_ball_and_pixel_box() {
        let ds = dataset();
        let model = model();
        let cfg = short_pgd(12);
        let mut base: Option<Vec<Tensor>> = None;
        let mut iterates = 0usize;
        let out = run_pgd_observed(&model, &ds, "c005", 4, 2, 4, &cfg, |i, adv, _| {
            if i == 0 {
                // Recover the clean images from the record afterwards; here
                // just count and range-check.
                base = Some(adv.to_vec());
            }
            for img in adv {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            iterates += 1;
        })
        .unwrap();
        assert_eq!(iterates, cfg.iterations + 1);
        for d in &out.record.deltas {
            assert!(d.data().iter().all(|&v| fabs(v) <= cfg.epsilon));
        }
    }

    #[test]
    fn pgd_redraws_episode_context_across_iterations() {
        let ds = dataset(); // 8 classes, 7 spare: repeats are unlikely
        let model = model();
        let cfg = short_pgd(10);
        let mut contexts: Vec<BTreeSet<String>> = Vec::new();
        run_pgd_observed(&model, &ds, "c000", 4, 2, 4, &cfg, |_, _, ep| {
            if let Some(ep) = ep {
                contexts.push(
                    ep.class_ids
                        .iter()
                        .filter(|c| c.as_str() != "c000")
                        .cloned()
                        .collect(),
                );
            }
        })
        .unwrap();
        assert_eq!(contexts.len(), 10);
        let first = &contexts[0];
        assert!(contexts.iter().any(|c| c != first));
    }

    #[test]
    fn cw_with_zero_const_shrinks_the_perturbation_norm() {
        let ds = dataset();
        let model = model();
        let cfg = AttackConfig {
            epsilon: 0.05,
            eta: 0.01,
            iterations: 20,
            const_weight: 0.0,
            seed: 2,
            ..AttackConfig::cw_sgd()
        };
        let out = run_cw_sgd(&model, &ds, "c002", 4, 2, 4, &cfg).unwrap();
        let trace = &out.record.loss_trace;
        assert!(
            trace.last().unwrap() < trace.first().unwrap(),
            "norm objective should shrink: {trace:?}"
        );
    }

    #[test]
    fn cw_reference_settings_produce_a_valid_clipped_record() {
        let ds = dataset();
        let model = model();
        let cfg = AttackConfig {
            iterations: 5,
            seed: 21,
            ..AttackConfig::cw_sgd()
        };
        let out = run_cw_sgd(&model, &ds, "c006", 4, 2, 4, &cfg).unwrap();
        out.record.validate().unwrap();
        for img in out.record.adversarial_support() {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let rerun = run_cw_sgd(&model, &ds, "c006", 4, 2, 4, &cfg).unwrap();
        assert_eq!(out.record, rerun.record);
    }

    #[test]
    fn asr_checks_model_identity_and_delta_shapes() {
        let ds = dataset();
        let model = model();
        let cfg = AttackConfig {
            eta: 0.0,
            ..short_pgd(1)
        };
        let mut record = run_pgd(&model, &ds, "c001", 4, 2, 4, &cfg).unwrap().record;

        let mut other_cfg = ModelConfig::new(HeadKind::Relation, ImageShape::new(3, 8, 8));
        other_cfg.base_channels = 4;
        other_cfg.init_seed = 99;
        let other = FewShotModel::new(other_cfg).unwrap();
        assert!(matches!(
            evaluate_asr(&other, &record, &ds, Scenario::FixedSupports, 2, 0),
            Err(CoreError::ModelMismatch { .. })
        ));

        record.deltas[0] = Tensor::zeros(ImageShape::new(3, 4, 4));
        assert!(evaluate_asr(&model, &record, &ds, Scenario::NewSupports, 2, 0).is_err());
    }

    #[test]
    fn asr_estimates_are_fractions_over_the_requested_episodes() {
        let ds = dataset();
        let model = model();
        let cfg = short_pgd(2);
        let record = run_pgd(&model, &ds, "c003", 4, 2, 4, &cfg).unwrap().record;
        for scenario in [Scenario::FixedSupports, Scenario::NewSupports] {
            let est = evaluate_asr(&model, &record, &ds, scenario, 6, 5).unwrap();
            assert_eq!(est.per_episode.len(), 6);
            assert!(est.per_episode.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((0.0..=1.0).contains(&est.mean));
            assert!(est.std >= 0.0);
        }
    }

    #[test]
    fn clean_error_of_an_untrained_model_sits_near_chance() {
        let ds = dataset();
        let model = model();
        let est = evaluate_clean_error(&model, &ds, "c002", 4, 2, 6, 40, 13).unwrap();
        // Untrained 4-way: expect roughly 3/4 misclassified.
        assert!(
            (est.mean - 0.75).abs() < 0.2,
            "clean error {} should be near 0.75",
            est.mean
        );
    }
}

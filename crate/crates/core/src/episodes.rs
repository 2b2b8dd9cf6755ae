//! Datasets of labeled images and the episodic sampling on top of them.
//!
//! A few-shot episode consists of `K` classes ("ways"), `N` support images per
//! class ("shots"), and a set of query images labeled by way index. Train,
//! validation, and test datasets hold *disjoint class sets*; episodes never
//! mix splits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::tensor::{ImageShape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Val,
    Test,
}

impl core::fmt::Display for Split {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Immutable collection of images grouped by class, all one shape, all with
/// pixel values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    split: Split,
    image_shape: ImageShape,
    classes: Vec<String>,
    samples: BTreeMap<String, Vec<Tensor>>,
}

impl Dataset {
    /// Builds a dataset, validating that every class has at least one image
    /// and all images share one shape. Class order is lexicographic, which
    /// keeps everything downstream deterministic.
    pub fn new(split: Split, samples: BTreeMap<String, Vec<Tensor>>) -> Result<Self> {
        let mut shape: Option<ImageShape> = None;
        if samples.is_empty() {
            return Err(CoreError::invalid("dataset has no classes"));
        }
        for (class, images) in &samples {
            if images.is_empty() {
                return Err(CoreError::invalid(format!("class {class} has no samples")));
            }
            for img in images {
                match shape {
                    None => shape = Some(img.shape()),
                    Some(s) => {
                        if img.shape() != s {
                            return Err(CoreError::shape(
                                format!("all images of shape {s}"),
                                format!("{} in class {class}", img.shape()),
                            ));
                        }
                    }
                }
            }
        }
        let classes = samples.keys().cloned().collect();
        Ok(Dataset {
            split,
            image_shape: shape.expect("non-empty dataset"),
            classes,
            samples,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image_shape
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_samples(&self, class: &str) -> Result<&[Tensor]> {
        self.samples
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| CoreError::ClassNotFound(class.to_string()))
    }

    pub fn min_samples_per_class(&self) -> usize {
        self.samples.values().map(Vec::len).min().unwrap_or(0)
    }

    pub fn iter_classes(&self) -> impl Iterator<Item = (&String, &Vec<Tensor>)> {
        self.samples.iter()
    }

    /// Splits the class set into train/val/test datasets (in lexicographic
    /// class order). The three counts must sum to the number of classes, so
    /// the splits are pairwise disjoint and exhaustive by construction.
    pub fn partition_classes(
        &self,
        n_train: usize,
        n_val: usize,
        n_test: usize,
    ) -> Result<(Dataset, Dataset, Dataset)> {
        if n_train + n_val + n_test != self.n_classes() {
            return Err(CoreError::invalid(format!(
                "split {n_train}/{n_val}/{n_test} does not cover {} classes",
                self.n_classes()
            )));
        }
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(CoreError::invalid("every split needs at least one class"));
        }
        let mut parts: Vec<BTreeMap<String, Vec<Tensor>>> = vec![BTreeMap::new(); 3];
        for (i, class) in self.classes.iter().enumerate() {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            parts[part].insert(class.clone(), self.samples[class].clone());
        }
        let mut it = parts.into_iter();
        Ok((
            Dataset::new(Split::Train, it.next().unwrap())?,
            Dataset::new(Split::Val, it.next().unwrap())?,
            Dataset::new(Split::Test, it.next().unwrap())?,
        ))
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Recipe for a synthetic dataset: each class is a fixed seeded low-frequency
/// template; each sample is the template plus Gaussian pixel noise, clipped to
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_shape: ImageShape,
    /// Scales the template's contribution around mid-gray.
    pub class_signal_strength: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return Err(CoreError::invalid("need at least one class and one sample"));
        }
        if self.image_shape.is_empty() {
            return Err(CoreError::invalid("image shape has a zero dimension"));
        }
        if !(self.class_signal_strength >= 0.0) {
            return Err(CoreError::invalid(format!(
                "class_signal_strength must be >= 0, got {}",
                self.class_signal_strength
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CoreError::invalid(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Bilinear upsampling of a coarse grid to (h, w), corners aligned. The
/// result is the smooth "low-frequency" class template.
fn upsample_grid(grid: &[f64], g: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let scale = |i: usize, n: usize| -> f64 {
        if n <= 1 {
            0.0
        } else {
            i as f64 * (g - 1) as f64 / (n - 1) as f64
        }
    };
    for y in 0..h {
        let fy = scale(y, h);
        let y0 = fy as usize;
        let y1 = (y0 + 1).min(g - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = scale(x, w);
            let x0 = fx as usize;
            let x1 = (x0 + 1).min(g - 1);
            let tx = fx - x0 as f64;
            let a = grid[y0 * g + x0];
            let b = grid[y0 * g + x1];
            let c = grid[y1 * g + x0];
            let d = grid[y1 * g + x1];
            out[y * w + x] = a * (1.0 - ty) * (1.0 - tx)
                + b * (1.0 - ty) * tx
                + c * ty * (1.0 - tx)
                + d * ty * tx;
        }
    }
    out
}

const TEMPLATE_GRID: usize = 4;

/// Generates the full synthetic dataset described by `spec` (labeled as the
/// train split; use [`Dataset::partition_classes`] to carve out val/test).
/// Identical specs produce bit-identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = spec.image_shape;
    let mut samples = BTreeMap::new();
    for class_idx in 0..spec.n_classes {
        let name = format!("c{class_idx:03}");
        // Template: per-channel coarse random grid, upsampled to a smooth map
        // in [-1, 1].
        let mut template = Tensor::zeros(shape);
        for c in 0..shape.channels {
            let grid: Vec<f64> = (0..TEMPLATE_GRID * TEMPLATE_GRID)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let plane = upsample_grid(&grid, TEMPLATE_GRID, shape.height, shape.width);
            let base = c * shape.height * shape.width;
            template.data_mut()[base..base + plane.len()].copy_from_slice(&plane);
        }
        let mut images = Vec::with_capacity(spec.samples_per_class);
        for _ in 0..spec.samples_per_class {
            let mut img = Tensor::zeros(shape);
            for (v, t) in img.data_mut().iter_mut().zip(template.data().iter()) {
                let z: f64 = rng.sample(StandardNormal);
                *v = (0.5 + 0.5 * spec.class_signal_strength * t + spec.noise_std * z)
                    .clamp(0.0, 1.0);
            }
            images.push(img);
        }
        samples.insert(name, images);
    }
    Dataset::new(Split::Train, samples)
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// One few-shot task: `K` ways with `N` support images each, plus query
/// images labeled by way index.
#[derive(Debug, Clone)]
pub struct Episode {
    pub class_ids: Vec<String>,
    pub shots: usize,
    /// `support[way][shot]`.
    pub support: Vec<Vec<Tensor>>,
    /// `(image, way index)` pairs.
    pub query: Vec<(Tensor, usize)>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_ids.len()
    }

    pub fn way_of(&self, class: &str) -> Option<usize> {
        self.class_ids.iter().position(|c| c == class)
    }
}

fn check_episode_args(ds: &Dataset, ways: usize, shots: usize) -> Result<()> {
    if ways == 0 || shots == 0 {
        return Err(CoreError::invalid("ways and shots must be positive"));
    }
    if ways > ds.n_classes() {
        return Err(CoreError::invalid(format!(
            "episode needs {ways} classes, {} split has {}",
            ds.split(),
            ds.n_classes()
        )));
    }
    Ok(())
}

fn draw_class_samples(
    ds: &Dataset,
    class: &str,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    let pool = ds.class_samples(class)?;
    if pool.len() < count {
        return Err(CoreError::InsufficientSamples {
            class: class.to_string(),
            needed: count,
            available: pool.len(),
        });
    }
    let picks = rand::seq::index::sample(rng, pool.len(), count);
    Ok(picks.iter().map(|i| pool[i].clone()).collect())
}

/// Samples a standard episode: `ways` distinct classes, `shots` support
/// images each, and `queries_total` query images balanced across classes
/// (`queries_total` must divide evenly). Support and query sets are disjoint
/// within each class. Identical `(dataset, arguments, seed)` give an
/// identical episode.
pub fn sample_episode(
    ds: &Dataset,
    ways: usize,
    shots: usize,
    queries_total: usize,
    seed: u64,
) -> Result<Episode> {
    check_episode_args(ds, ways, shots)?;
    if queries_total == 0 || queries_total % ways != 0 {
        return Err(CoreError::invalid(format!(
            "queries_total ({queries_total}) must be a positive multiple of ways ({ways})"
        )));
    }
    let q_per_class = queries_total / ways;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_picks = rand::seq::index::sample(&mut rng, ds.n_classes(), ways);
    let class_ids: Vec<String> = class_picks
        .iter()
        .map(|i| ds.classes()[i].clone())
        .collect();
    let mut support = Vec::with_capacity(ways);
    let mut query = Vec::new();
    for (way, class) in class_ids.iter().enumerate() {
        let mut drawn = draw_class_samples(ds, class, shots + q_per_class, &mut rng)?;
        let queries = drawn.split_off(shots);
        support.push(drawn);
        query.extend(queries.into_iter().map(|img| (img, way)));
    }
    Ok(Episode {
        class_ids,
        shots,
        support,
        query,
    })
}

/// Samples an episode around a fixed target class, optionally substituting
/// externally supplied support images for it (as attacks do). Queries are
/// drawn for the target class only — the callers of this sampler (attack
/// losses, attack-success evaluation) consume exactly those.
///
/// When `target_support` is `None`, the target's support and queries are
/// drawn disjointly; when given, queries come from the class's full pool
/// (the substituted support lives outside the dataset anyway).
pub fn sample_episode_with_fixed_target(
    ds: &Dataset,
    ways: usize,
    shots: usize,
    target_queries: usize,
    target_class: &str,
    target_support: Option<&[Tensor]>,
    seed: u64,
) -> Result<Episode> {
    check_episode_args(ds, ways, shots)?;
    if target_queries == 0 {
        return Err(CoreError::invalid("target_queries must be positive"));
    }
    let target_pool_idx = ds
        .classes()
        .iter()
        .position(|c| c == target_class)
        .ok_or_else(|| CoreError::ClassNotFound(target_class.to_string()))?;
    if let Some(sup) = target_support {
        if sup.len() != shots {
            return Err(CoreError::invalid(format!(
                "fixed target support has {} images, episode uses {shots} shots",
                sup.len()
            )));
        }
        for img in sup {
            if img.shape() != ds.image_shape() {
                return Err(CoreError::shape(ds.image_shape(), img.shape()));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Choose the K-1 other classes from the dataset minus the target.
    let others = rand::seq::index::sample(&mut rng, ds.n_classes() - 1, ways - 1);
    let target_way = rng.random_range(0..ways);
    let mut class_ids = Vec::with_capacity(ways);
    for idx in others.iter() {
        let idx = if idx >= target_pool_idx { idx + 1 } else { idx };
        class_ids.push(ds.classes()[idx].clone());
    }
    class_ids.insert(target_way, target_class.to_string());

    let mut support = Vec::with_capacity(ways);
    let mut query = Vec::new();
    for (way, class) in class_ids.iter().enumerate() {
        if way == target_way {
            match target_support {
                Some(sup) => {
                    support.push(sup.to_vec());
                    let qs = draw_class_samples(ds, class, target_queries, &mut rng)?;
                    query.extend(qs.into_iter().map(|img| (img, way)));
                }
                None => {
                    let mut drawn =
                        draw_class_samples(ds, class, shots + target_queries, &mut rng)?;
                    let qs = drawn.split_off(shots);
                    support.push(drawn);
                    query.extend(qs.into_iter().map(|img| (img, way)));
                }
            }
        } else {
            support.push(draw_class_samples(ds, class, shots, &mut rng)?);
        }
    }
    Ok(Episode {
        class_ids,
        shots,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 8,
            samples_per_class: 10,
            image_shape: ImageShape::new(3, 8, 8),
            class_signal_strength: 1.0,
            noise_std: 0.1,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let a = generate_synthetic(&tiny_spec()).unwrap();
        let b = generate_synthetic(&tiny_spec()).unwrap();
        for (ca, cb) in a.iter_classes().zip(b.iter_classes()) {
            assert_eq!(ca.0, cb.0);
            for (ia, ib) in ca.1.iter().zip(cb.1.iter()) {
                assert_eq!(ia.data(), ib.data());
            }
        }
    }

    #[test]
    fn synthetic_values_live_in_unit_interval() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        for (_, images) in ds.iter_classes() {
            for img in images {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn zero_noise_makes_samples_identical_within_class() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            ..tiny_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for (_, images) in ds.iter_classes() {
            for img in images {
                assert_eq!(img.data(), images[0].data());
            }
        }
    }

    #[test]
    fn strong_signal_separates_class_means() {
        // Signal at 5x the noise level: the gap between class mean images
        // should exceed the within-class spread.
        let spec = SyntheticSpec {
            class_signal_strength: 1.0,
            noise_std: 0.2,
            ..tiny_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let classes: Vec<_> = ds.iter_classes().collect();
        let dim = spec.image_shape.len() as f64;
        let mean_img = |images: &Vec<Tensor>| -> Vec<f64> {
            let mut m = vec![0.0; spec.image_shape.len()];
            for img in images {
                for (a, b) in m.iter_mut().zip(img.data()) {
                    *a += b / images.len() as f64;
                }
            }
            m
        };
        let m0 = mean_img(classes[0].1);
        let m1 = mean_img(classes[1].1);
        let between = libm::sqrt(
            m0.iter()
                .zip(&m1)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / dim,
        );
        // Within-class RMS distance from the class mean.
        let within = {
            let mut acc = 0.0;
            for img in classes[0].1 {
                acc += img
                    .data()
                    .iter()
                    .zip(&m0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / dim;
            }
            libm::sqrt(acc / classes[0].1.len() as f64)
        };
        assert!(
            between > within,
            "between {between} should exceed within {within}"
        );
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let (tr, va, te) = ds.partition_classes(4, 2, 2).unwrap();
        assert_eq!(tr.split(), Split::Train);
        assert_eq!(va.split(), Split::Val);
        assert_eq!(te.split(), Split::Test);
        let mut all: Vec<&String> = tr
            .classes()
            .iter()
            .chain(va.classes())
            .chain(te.classes())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);
        assert!(ds.partition_classes(4, 2, 1).is_err());
        assert!(ds.partition_classes(8, 0, 0).is_err());
    }

    #[test]
    fn episode_has_requested_counts_and_disjoint_support_query() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let ep = sample_episode(&ds, 5, 3, 10, 42).unwrap();
        assert_eq!(ep.ways(), 5);
        assert_eq!(ep.support.len(), 5);
        assert!(ep.support.iter().all(|s| s.len() == 3));
        assert_eq!(ep.query.len(), 10);
        // Distinct ways.
        let mut ids = ep.class_ids.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 5);
        // No query image equals a support image of its way.
        for (img, way) in &ep.query {
            assert!(ep.support[*way].iter().all(|s| s.data() != img.data()));
        }
    }

    #[test]
    fn episode_sampling_is_deterministic_and_seed_sensitive() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let a = sample_episode(&ds, 4, 2, 8, 1).unwrap();
        let b = sample_episode(&ds, 4, 2, 8, 1).unwrap();
        let c = sample_episode(&ds, 4, 2, 8, 2).unwrap();
        assert_eq!(a.class_ids, b.class_ids);
        assert!(a
            .support
            .iter()
            .flatten()
            .zip(b.support.iter().flatten())
            .all(|(x, y)| x.data() == y.data()));
        assert!(a.class_ids != c.class_ids || {
            a.support
                .iter()
                .flatten()
                .zip(c.support.iter().flatten())
                .any(|(x, y)| x.data() != y.data())
        });
    }

    #[test]
    fn episode_rejects_impossible_requests() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        assert!(matches!(
            sample_episode(&ds, 9, 1, 9, 0),
            Err(CoreError::InvalidArgument(_))
        ));
        assert!(matches!(
            sample_episode(&ds, 4, 8, 12, 0),
            Err(CoreError::InsufficientSamples { .. })
        ));
        assert!(sample_episode(&ds, 4, 2, 7, 0).is_err()); // not divisible
    }

    #[test]
    fn fixed_target_episode_places_given_support_verbatim() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let target = ds.classes()[2].clone();
        let sup: Vec<Tensor> = ds.class_samples(&target).unwrap()[..3].to_vec();
        let ep =
            sample_episode_with_fixed_target(&ds, 5, 3, 6, &target, Some(&sup), 9).unwrap();
        let way = ep.way_of(&target).expect("target present");
        for (a, b) in ep.support[way].iter().zip(&sup) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(ep.query.len(), 6);
        assert!(ep.query.iter().all(|(_, w)| *w == way));
        // Other ways are distinct classes and never the target.
        for (w, class) in ep.class_ids.iter().enumerate() {
            if w != way {
                assert_ne!(class, &target);
            }
        }
    }

    #[test]
    fn fixed_target_episode_validates_inputs() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let target = ds.classes()[0].clone();
        assert!(matches!(
            sample_episode_with_fixed_target(&ds, 5, 3, 6, "nope", None, 0),
            Err(CoreError::ClassNotFound(_))
        ));
        let wrong_count: Vec<Tensor> = ds.class_samples(&target).unwrap()[..2].to_vec();
        assert!(sample_episode_with_fixed_target(&ds, 5, 3, 6, &target, Some(&wrong_count), 0)
            .is_err());
        let wrong_shape = vec![Tensor::zeros(ImageShape::new(1, 2, 2)); 3];
        assert!(matches!(
            sample_episode_with_fixed_target(&ds, 5, 3, 6, &target, Some(&wrong_shape), 0),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fixed_target_resamples_other_classes_across_seeds() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let target = ds.classes()[0].clone();
        let mut saw_change = false;
        let mut prev: Option<Vec<String>> = None;
        for seed in 0..10 {
            let ep =
                sample_episode_with_fixed_target(&ds, 4, 2, 4, &target, None, seed).unwrap();
            let mut others: Vec<String> = ep
                .class_ids
                .iter()
                .filter(|c| *c != &target)
                .cloned()
                .collect();
            others.sort();
            if let Some(p) = &prev {
                if p != &others {
                    saw_change = true;
                }
            }
            prev = Some(others);
        }
        assert!(saw_change, "non-target classes never changed in 10 draws");
    }

    #[test]
    fn uniform_class_coverage_over_many_episodes() {
        let ds = generate_synthetic(&tiny_spec()).unwrap();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for seed in 0..500 {
            let ep = sample_episode(&ds, 2, 1, 2, seed).unwrap();
            for c in &ep.class_ids {
                *counts.entry(c.clone()).or_default() += 1;
            }
        }
        // 500 episodes x 2 ways over 8 classes: expect 125 picks per class.
        for (class, n) in counts {
            assert!(
                (60..=190).contains(&n),
                "class {class} drawn {n} times, expected near 125"
            );
        }
    }
}

//! Few-shot classifiers: a shared convolutional encoder with two metric
//! heads — pairwise relation scoring and cross-attention with cosine
//! similarity.
//!
//! Class representations are the element-wise mean of the encoded support
//! images, so every head accepts any number of shots per class. Logits are
//! raw scores relative to the episode's support classes: permuting the ways
//! permutes the logits.
//!
//! There is no train/eval mode switch: the network is stateless (instance
//! norm instead of batch statistics), so the differentiable path used for
//! training is also the attack-facing evaluation path.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episodes::{sample_episode, Dataset, Episode};
use crate::error::{CoreError, Result};
use crate::nn::{
    argmax, max_pool2, max_pool2_backward, relu, relu_backward, softmax_cross_entropy, Adam,
    Conv2d, InstanceNorm, Linear, ParamLayout,
};
use crate::tensor::{ImageShape, Tensor};
use crate::{fnv1a64, fnv1a64_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HeadKind {
    Relation,
    CrossAttention,
}

impl core::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HeadKind::Relation => write!(f, "relation"),
            HeadKind::CrossAttention => write!(f, "cross_attention"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub head_kind: HeadKind,
    pub input_shape: ImageShape,
    /// Width of the first encoder block; later blocks use twice this.
    pub base_channels: usize,
    /// Hidden width of the relation head's scorer.
    pub relation_hidden: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(head_kind: HeadKind, input_shape: ImageShape) -> Self {
        ModelConfig {
            head_kind,
            input_shape,
            base_channels: 16,
            relation_hidden: 8,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_shape;
        if s.channels == 0 || s.height < 2 || s.width < 2 {
            return Err(CoreError::invalid(format!(
                "input shape {s} too small (need at least 2x2 pixels)"
            )));
        }
        if s.height > 64 || s.width > 64 {
            return Err(CoreError::invalid(format!(
                "input shape {s} exceeds the 64x64 design limit"
            )));
        }
        if self.base_channels == 0 || self.relation_hidden == 0 {
            return Err(CoreError::invalid("channel and hidden widths must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// conv3x3 -> instance norm -> ReLU -> optional 2x2 max pool.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: InstanceNorm,
    pool: bool,
}

struct BlockCache {
    x: Tensor,
    conv_out: Tensor,
    norm_out: Tensor,
    pool_arg: Option<Vec<u32>>,
}

impl ConvBlock {
    fn new(layout: &mut ParamLayout, in_ch: usize, out_ch: usize, pool: bool) -> Self {
        ConvBlock {
            conv: Conv2d::new(layout, in_ch, out_ch, 3, 1, 1),
            norm: InstanceNorm::new(layout, out_ch),
            pool,
        }
    }

    fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        self.conv.init(params, rng);
        self.norm.init(params);
    }

    fn out_shape(&self, input: ImageShape) -> ImageShape {
        let s = self.conv.out_shape(input);
        if self.pool {
            ImageShape::new(s.channels, s.height / 2, s.width / 2)
        } else {
            s
        }
    }

    fn forward_eval(&self, params: &[f64], x: &Tensor) -> Tensor {
        let act = relu(&self.norm.forward(params, &self.conv.forward(params, x)));
        if self.pool {
            max_pool2(&act).0
        } else {
            act
        }
    }

    fn forward_cached(&self, params: &[f64], x: &Tensor) -> (Tensor, BlockCache) {
        let conv_out = self.conv.forward(params, x);
        let norm_out = self.norm.forward(params, &conv_out);
        let act = relu(&norm_out);
        let (out, pool_arg) = if self.pool {
            let (p, arg) = max_pool2(&act);
            (p, Some(arg))
        } else {
            (act, None)
        };
        (
            out,
            BlockCache {
                x: x.clone(),
                conv_out,
                norm_out,
                pool_arg,
            },
        )
    }

    fn backward(
        &self,
        params: &[f64],
        cache: &BlockCache,
        gout: &Tensor,
        mut gparams: Option<&mut [f64]>,
        want_gx: bool,
    ) -> Option<Tensor> {
        let g_act = match &cache.pool_arg {
            Some(arg) => max_pool2_backward(cache.norm_out.shape(), arg, gout),
            None => gout.clone(),
        };
        let g_norm_out = relu_backward(&cache.norm_out, &g_act);
        let g_conv_out = self
            .norm
            .backward(
                params,
                &cache.conv_out,
                &g_norm_out,
                gparams.as_deref_mut(),
                true,
            )
            .expect("norm input gradient requested");
        self.conv
            .backward(params, &cache.x, &g_conv_out, gparams, want_gx)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    blocks: Vec<ConvBlock>,
    feature_shape: ImageShape,
}

type EncoderCache = Vec<BlockCache>;

impl Encoder {
    fn build(layout: &mut ParamLayout, input: ImageShape, base: usize) -> Encoder {
        let widths = [base, 2 * base, 2 * base, 2 * base];
        let mut blocks = Vec::with_capacity(4);
        let mut shape = input;
        let mut in_ch = input.channels;
        for &out_ch in &widths {
            // Pool while the map is big enough to halve meaningfully.
            let pool = shape.height >= 4 && shape.width >= 4;
            let block = ConvBlock::new(layout, in_ch, out_ch, pool);
            shape = block.out_shape(shape);
            in_ch = out_ch;
            blocks.push(block);
        }
        Encoder {
            blocks,
            feature_shape: shape,
        }
    }

    fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for b in &self.blocks {
            b.init(params, rng);
        }
    }

    fn forward_eval(&self, params: &[f64], x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward_eval(params, &cur);
        }
        cur
    }

    fn forward_cached(&self, params: &[f64], x: &Tensor) -> (Tensor, EncoderCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            let (next, cache) = b.forward_cached(params, &cur);
            caches.push(cache);
            cur = next;
        }
        (cur, caches)
    }

    fn backward(
        &self,
        params: &[f64],
        cache: &EncoderCache,
        gfeat: &Tensor,
        mut gparams: Option<&mut [f64]>,
        want_gx: bool,
    ) -> Option<Tensor> {
        let mut g = gfeat.clone();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let need_input = i > 0 || want_gx;
            match b.backward(params, &cache[i], &g, gparams.as_deref_mut(), need_input) {
                Some(gx) => g = gx,
                None => return None, // only possible at block 0 with want_gx=false
            }
        }
        Some(g)
    }
}

// ---------------------------------------------------------------------------
// Relation head
// ---------------------------------------------------------------------------

/// Scores a (class feature, query feature) pair by concatenating them along
/// channels (class first), applying two conv blocks, and passing the
/// flattened map through a two-layer scorer emitting one scalar.
#[derive(Debug, Clone)]
struct RelationHead {
    block1: ConvBlock,
    block2: ConvBlock,
    fc1: Linear,
    fc2: Linear,
    feature_shape: ImageShape,
}

struct RelationCache {
    b1: BlockCache,
    b2: BlockCache,
    flat: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
}

impl RelationHead {
    fn new(layout: &mut ParamLayout, feature_shape: ImageShape, hidden: usize) -> Self {
        let d = feature_shape.channels;
        let block1 = ConvBlock::new(layout, 2 * d, d, false);
        let block2 = ConvBlock::new(layout, d, d, false);
        let flat_dim = feature_shape.len();
        RelationHead {
            block1,
            block2,
            fc1: Linear::new(layout, flat_dim, hidden),
            fc2: Linear::new(layout, hidden, 1),
            feature_shape,
        }
    }

    fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        self.block1.init(params, rng);
        self.block2.init(params, rng);
        self.fc1.init(params, rng);
        self.fc2.init(params, rng);
    }

    fn concat(&self, class_feat: &Tensor, query_feat: &Tensor) -> Tensor {
        let s = self.feature_shape;
        let mut out = Tensor::zeros(ImageShape::new(2 * s.channels, s.height, s.width));
        let half = s.len();
        out.data_mut()[..half].copy_from_slice(class_feat.data());
        out.data_mut()[half..].copy_from_slice(query_feat.data());
        out
    }

    fn forward_cached(
        &self,
        params: &[f64],
        class_feat: &Tensor,
        query_feat: &Tensor,
    ) -> (f64, RelationCache) {
        let concat = self.concat(class_feat, query_feat);
        let (m1, b1) = self.block1.forward_cached(params, &concat);
        let (m2, b2) = self.block2.forward_cached(params, &m1);
        let flat = m2.data().to_vec();
        let h1 = self.fc1.forward(params, &flat);
        let a1: Vec<f64> = h1.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let logit = self.fc2.forward(params, &a1)[0];
        (
            logit,
            RelationCache {
                b1,
                b2,
                flat,
                h1,
                a1,
            },
        )
    }

    fn forward_eval(&self, params: &[f64], class_feat: &Tensor, query_feat: &Tensor) -> f64 {
        let concat = self.concat(class_feat, query_feat);
        let m1 = self.block1.forward_eval(params, &concat);
        let m2 = self.block2.forward_eval(params, &m1);
        let h1 = self.fc1.forward(params, m2.data());
        let a1: Vec<f64> = h1.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.fc2.forward(params, &a1)[0]
    }

    /// Adds this pair's contribution to the feature gradients and (when
    /// given) the parameter gradients.
    fn backward(
        &self,
        params: &[f64],
        cache: &RelationCache,
        dlogit: f64,
        mut gparams: Option<&mut [f64]>,
        g_class: &mut Tensor,
        g_query: &mut Tensor,
    ) {
        let g_a1 = self
            .fc2
            .backward(params, &cache.a1, &[dlogit], gparams.as_deref_mut(), true)
            .expect("fc2 input gradient");
        let g_h1: Vec<f64> = g_a1
            .iter()
            .zip(cache.h1.iter())
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let g_flat = self
            .fc1
            .backward(params, &cache.flat, &g_h1, gparams.as_deref_mut(), true)
            .expect("fc1 input gradient");
        let s = self.feature_shape;
        let g_m2 = Tensor::from_vec(s, g_flat).expect("flat gradient shape");
        let g_m1 = self
            .block2
            .backward(params, &cache.b2, &g_m2, gparams.as_deref_mut(), true)
            .expect("block2 input gradient");
        let g_concat = self
            .block1
            .backward(params, &cache.b1, &g_m1, gparams, true)
            .expect("block1 input gradient");
        let half = s.len();
        for i in 0..half {
            g_class.data_mut()[i] += g_concat.data()[i];
            g_query.data_mut()[i] += g_concat.data()[half + i];
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-attention head
// ---------------------------------------------------------------------------

const NORM_GUARD: f64 = 1e-12;

/// Cross-attention scoring: every query position attends over the class
/// feature's positions (softmax over the cosine correlation matrix), and the
/// attended class vector is compared to the query vector by cosine
/// similarity. The per-position similarities are averaged and scaled by a
/// learnable temperature.
#[derive(Debug, Clone)]
struct CanHead {
    temperature: crate::nn::ParamRange,
    feature_shape: ImageShape,
}

struct CanCache {
    class_cols: Vec<Vec<f64>>,
    query_cols: Vec<Vec<f64>>,
    ns: Vec<f64>,
    nq: Vec<f64>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// attention weights, `attn[i * m + j]` = weight of class position i for
    /// query position j (columns sum to one).
    attn: Vec<f64>,
    att_cols: Vec<Vec<f64>>,
    natt: Vec<f64>,
    sims: Vec<f64>,
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    let m = s.height * s.width;
    let mut cols = vec![vec![0.0; s.channels]; m];
    for c in 0..s.channels {
        for p in 0..m {
            cols[p][c] = t.data()[c * m + p];
        }
    }
    cols
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_guarded(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a)).max(NORM_GUARD)
}

impl CanHead {
    const TEMPERATURE_INIT: f64 = 10.0;

    fn new(layout: &mut ParamLayout, feature_shape: ImageShape) -> Self {
        CanHead {
            temperature: layout.alloc(1),
            feature_shape,
        }
    }

    fn init(&self, params: &mut [f64]) {
        params[self.temperature.offset] = Self::TEMPERATURE_INIT;
    }

    fn forward_cached(
        &self,
        params: &[f64],
        class_feat: &Tensor,
        query_feat: &Tensor,
    ) -> (f64, CanCache) {
        let s = self.feature_shape;
        let m = s.height * s.width;
        let class_cols = columns(class_feat);
        let query_cols = columns(query_feat);
        let ns: Vec<f64> = class_cols.iter().map(|c| norm_guarded(c)).collect();
        let nq: Vec<f64> = query_cols.iter().map(|c| norm_guarded(c)).collect();
        let u: Vec<Vec<f64>> = class_cols
            .iter()
            .zip(&ns)
            .map(|(c, n)| c.iter().map(|x| x / n).collect())
            .collect();
        let v: Vec<Vec<f64>> = query_cols
            .iter()
            .zip(&nq)
            .map(|(c, n)| c.iter().map(|x| x / n).collect())
            .collect();
        // Correlation and per-query-position softmax over class positions.
        let mut attn = vec![0.0; m * m];
        for j in 0..m {
            let mut col: Vec<f64> = (0..m).map(|i| dot(&u[i], &v[j])).collect();
            crate::nn::softmax_in_place(&mut col);
            for i in 0..m {
                attn[i * m + j] = col[i];
            }
        }
        let mut att_cols = vec![vec![0.0; s.channels]; m];
        for j in 0..m {
            for i in 0..m {
                let a = attn[i * m + j];
                for c in 0..s.channels {
                    att_cols[j][c] += a * class_cols[i][c];
                }
            }
        }
        let natt: Vec<f64> = att_cols.iter().map(|c| norm_guarded(c)).collect();
        let sims: Vec<f64> = (0..m)
            .map(|j| dot(&att_cols[j], &query_cols[j]) / (natt[j] * nq[j]))
            .collect();
        let mean_sim = sims.iter().sum::<f64>() / m as f64;
        let logit = params[self.temperature.offset] * mean_sim;
        (
            logit,
            CanCache {
                class_cols,
                query_cols,
                ns,
                nq,
                u,
                v,
                attn,
                att_cols,
                natt,
                sims,
            },
        )
    }

    fn forward_eval(&self, params: &[f64], class_feat: &Tensor, query_feat: &Tensor) -> f64 {
        self.forward_cached(params, class_feat, query_feat).0
    }

    fn backward(
        &self,
        params: &[f64],
        cache: &CanCache,
        dlogit: f64,
        mut gparams: Option<&mut [f64]>,
        g_class: &mut Tensor,
        g_query: &mut Tensor,
    ) {
        let s = self.feature_shape;
        let m = s.height * s.width;
        let d = s.channels;
        let temp = params[self.temperature.offset];
        let mean_sim = cache.sims.iter().sum::<f64>() / m as f64;
        if let Some(gp) = gparams.as_deref_mut() {
            gp[self.temperature.offset] += dlogit * mean_sim;
        }
        let dsim = dlogit * temp / m as f64;

        let mut d_class = vec![vec![0.0; d]; m]; // w.r.t. raw class columns
        let mut d_query = vec![vec![0.0; d]; m];
        let mut d_u = vec![vec![0.0; d]; m];
        let mut d_v = vec![vec![0.0; d]; m];

        for j in 0..m {
            // Cosine similarity backward for (att_j, q_j).
            let a = &cache.att_cols[j];
            let b = &cache.query_cols[j];
            let (na, nb) = (cache.natt[j], cache.nq[j]);
            let cosv = cache.sims[j];
            let mut d_att = vec![0.0; d];
            for c in 0..d {
                d_att[c] = dsim * (b[c] / (na * nb) - cosv * a[c] / (na * na));
                d_query[j][c] += dsim * (a[c] / (na * nb) - cosv * b[c] / (nb * nb));
            }
            // att_j = sum_i attn[i][j] * class_i
            let mut d_attn_col = vec![0.0; m];
            for i in 0..m {
                let w = cache.attn[i * m + j];
                let cls = &cache.class_cols[i];
                d_attn_col[i] = dot(&d_att, cls);
                for c in 0..d {
                    d_class[i][c] += w * d_att[c];
                }
            }
            // Softmax backward over the column.
            let col: Vec<f64> = (0..m).map(|i| cache.attn[i * m + j]).collect();
            let inner: f64 = col.iter().zip(&d_attn_col).map(|(a, g)| a * g).sum();
            for i in 0..m {
                let d_r = col[i] * (d_attn_col[i] - inner);
                // R[i][j] = u_i . v_j
                for c in 0..d {
                    d_u[i][c] += d_r * cache.v[j][c];
                    d_v[j][c] += d_r * cache.u[i][c];
                }
            }
        }
        // Normalization backward: u = s / ||s||  =>  ds = (du - u (u.du)) / ||s||.
        for i in 0..m {
            let proj = dot(&cache.u[i], &d_u[i]);
            for c in 0..d {
                d_class[i][c] += (d_u[i][c] - cache.u[i][c] * proj) / cache.ns[i];
            }
        }
        for j in 0..m {
            let proj = dot(&cache.v[j], &d_v[j]);
            for c in 0..d {
                d_query[j][c] += (d_v[j][c] - cache.v[j][c] * proj) / cache.nq[j];
            }
        }
        // Columns back into CHW layout.
        for c in 0..d {
            for p in 0..m {
                g_class.data_mut()[c * m + p] += d_class[p][c];
                g_query.data_mut()[c * m + p] += d_query[p][c];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Head {
    Relation(RelationHead),
    Can(CanHead),
}

enum HeadCache {
    Relation(RelationCache),
    Can(CanCache),
}

impl Head {
    fn forward_cached(
        &self,
        params: &[f64],
        class_feat: &Tensor,
        query_feat: &Tensor,
    ) -> (f64, HeadCache) {
        match self {
            Head::Relation(h) => {
                let (l, c) = h.forward_cached(params, class_feat, query_feat);
                (l, HeadCache::Relation(c))
            }
            Head::Can(h) => {
                let (l, c) = h.forward_cached(params, class_feat, query_feat);
                (l, HeadCache::Can(c))
            }
        }
    }

    fn forward_eval(&self, params: &[f64], class_feat: &Tensor, query_feat: &Tensor) -> f64 {
        match self {
            Head::Relation(h) => h.forward_eval(params, class_feat, query_feat),
            Head::Can(h) => h.forward_eval(params, class_feat, query_feat),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &[f64],
        cache: &HeadCache,
        dlogit: f64,
        gparams: Option<&mut [f64]>,
        g_class: &mut Tensor,
        g_query: &mut Tensor,
    ) {
        match (self, cache) {
            (Head::Relation(h), HeadCache::Relation(c)) => {
                h.backward(params, c, dlogit, gparams, g_class, g_query)
            }
            (Head::Can(h), HeadCache::Can(c)) => {
                h.backward(params, c, dlogit, gparams, g_class, g_query)
            }
            _ => unreachable!("head/cache kind mismatch"),
        }
    }
}

/// Which input gradients [`FewShotModel::episode_backward`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputGradRequest {
    None,
    /// Gradients w.r.t. the support images of one way. Gradients for other
    /// ways' supports are not computed at all.
    SupportWay(usize),
    /// Gradients w.r.t. every query image.
    Queries,
}

#[derive(Debug, Default)]
pub struct InputGrads {
    pub support_way: Option<Vec<Tensor>>,
    pub queries: Option<Vec<Tensor>>,
}

/// Tape from [`FewShotModel::encode_cached`].
pub struct EncodeTape {
    cache: EncoderCache,
}

/// Tape from [`FewShotModel::score_query_cached`].
pub struct QueryScoreTape {
    enc_cache: EncoderCache,
    head_caches: Vec<HeadCache>,
}

/// Caches from [`FewShotModel::episode_forward`] needed for the backward pass.
pub struct EpisodeCache {
    support_caches: Vec<Vec<EncoderCache>>,
    query_caches: Vec<EncoderCache>,
    class_feats: Vec<Tensor>,
    query_feats: Vec<Tensor>,
    head_caches: Vec<Vec<HeadCache>>,
}

/// A trained (or freshly initialized) few-shot classifier. Immutable during
/// inference; all methods taking `&self` are safe to call concurrently.
#[derive(Debug, Clone)]
pub struct FewShotModel {
    config: ModelConfig,
    encoder: Encoder,
    head: Head,
    params: Vec<f64>,
}

impl FewShotModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let encoder = Encoder::build(&mut layout, config.input_shape, config.base_channels);
        let head = match config.head_kind {
            HeadKind::Relation => Head::Relation(RelationHead::new(
                &mut layout,
                encoder.feature_shape,
                config.relation_hidden,
            )),
            HeadKind::CrossAttention => {
                Head::Can(CanHead::new(&mut layout, encoder.feature_shape))
            }
        };
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        encoder.init(&mut params, &mut rng);
        match &head {
            Head::Relation(h) => h.init(&mut params, &mut rng),
            Head::Can(h) => h.init(&mut params),
        }
        Ok(FewShotModel {
            config,
            encoder,
            head,
            params,
        })
    }

    /// Rebuilds a model from a config and a parameter vector (checkpoint
    /// loading). The vector length must match the architecture exactly.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = FewShotModel::new(config)?;
        if params.len() != model.params.len() {
            return Err(CoreError::shape(
                format!("{} parameters", model.params.len()),
                params.len(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn feature_shape(&self) -> ImageShape {
        self.encoder.feature_shape
    }

    /// Content fingerprint over architecture and weights; stable across
    /// platforms and runs. Artifacts derived from a model carry it so that
    /// downstream commands can refuse mismatched inputs.
    pub fn fingerprint(&self) -> u64 {
        let desc = format!(
            "{}|{}|{}|{}",
            self.config.head_kind,
            self.config.input_shape,
            self.config.base_channels,
            self.config.relation_hidden
        );
        fnv1a64_f64(fnv1a64(desc.as_bytes()), &self.params)
    }

    fn check_input(&self, img: &Tensor) -> Result<()> {
        if img.shape() != self.config.input_shape {
            return Err(CoreError::shape(self.config.input_shape, img.shape()));
        }
        Ok(())
    }

    /// Encodes one image to its feature map (evaluation path).
    pub fn encode(&self, img: &Tensor) -> Result<Tensor> {
        self.check_input(img)?;
        Ok(self.encoder.forward_eval(&self.params, img))
    }

    /// Encodes one image keeping the tape needed to pull gradients back to
    /// the input with [`Self::encode_backward`].
    pub fn encode_cached(&self, img: &Tensor) -> Result<(Tensor, EncodeTape)> {
        self.check_input(img)?;
        let (feat, cache) = self.encoder.forward_cached(&self.params, img);
        Ok((feat, EncodeTape { cache }))
    }

    /// Gradient of `<gfeat, encode(x)>` w.r.t. the input image.
    pub fn encode_backward(&self, tape: &EncodeTape, gfeat: &Tensor) -> Result<Tensor> {
        gfeat.check_same_shape(
            &Tensor::zeros(self.encoder.feature_shape),
            "feature gradient",
        )?;
        Ok(self
            .encoder
            .backward(&self.params, &tape.cache, gfeat, None, true)
            .expect("input gradient requested"))
    }

    /// Logits of one query against precomputed class features, with the tape
    /// for pulling logit gradients back to the query image.
    pub fn score_query_cached(
        &self,
        class_feats: &[Tensor],
        query: &Tensor,
    ) -> Result<(Vec<f64>, QueryScoreTape)> {
        if class_feats.is_empty() {
            return Err(CoreError::invalid("no class features supplied"));
        }
        self.check_input(query)?;
        let (qf, enc_cache) = self.encoder.forward_cached(&self.params, query);
        let mut logits = Vec::with_capacity(class_feats.len());
        let mut head_caches = Vec::with_capacity(class_feats.len());
        for cf in class_feats {
            let (l, c) = self.head.forward_cached(&self.params, cf, &qf);
            logits.push(l);
            head_caches.push(c);
        }
        Ok((
            logits,
            QueryScoreTape {
                enc_cache,
                head_caches,
            },
        ))
    }

    /// Gradient of `<dlogits, score_query(query)>` w.r.t. the query image.
    pub fn score_query_backward(&self, tape: &QueryScoreTape, dlogits: &[f64]) -> Result<Tensor> {
        if dlogits.len() != tape.head_caches.len() {
            return Err(CoreError::shape(
                format!("{} logit gradients", tape.head_caches.len()),
                dlogits.len(),
            ));
        }
        let fs = self.encoder.feature_shape;
        let mut g_class_sink = Tensor::zeros(fs);
        let mut g_query = Tensor::zeros(fs);
        for (cache, &d) in tape.head_caches.iter().zip(dlogits) {
            if d == 0.0 {
                continue;
            }
            self.head
                .backward(&self.params, cache, d, None, &mut g_class_sink, &mut g_query);
        }
        Ok(self
            .encoder
            .backward(&self.params, &tape.enc_cache, &g_query, None, true)
            .expect("input gradient requested"))
    }

    /// Mean feature of a class's support images.
    pub fn encode_mean(&self, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(CoreError::invalid("class has no support images"));
        }
        let mut acc = Tensor::zeros(self.encoder.feature_shape);
        for img in images {
            let f = self.encode(img)?;
            acc.add_scaled(&f, 1.0);
        }
        let n = images.len() as f64;
        for v in acc.data_mut() {
            *v /= n;
        }
        Ok(acc)
    }

    /// Head scores of one query feature against precomputed class features.
    pub fn score_features(&self, class_feats: &[Tensor], query_feat: &Tensor) -> Result<Vec<f64>> {
        if class_feats.is_empty() {
            return Err(CoreError::invalid("no class features supplied"));
        }
        Ok(class_feats
            .iter()
            .map(|cf| self.head.forward_eval(&self.params, cf, query_feat))
            .collect())
    }

    /// Raw (pre-softmax) logits of `query` against the support set, one per
    /// way. Class representations are mean support features, so ways may have
    /// any (nonzero) number of shots.
    pub fn classify(&self, support: &[Vec<Tensor>], query: &Tensor) -> Result<Vec<f64>> {
        let class_feats: Vec<Tensor> = support
            .iter()
            .map(|imgs| self.encode_mean(imgs))
            .collect::<Result<_>>()?;
        let qf = self.encode(query)?;
        self.score_features(&class_feats, &qf)
    }

    /// Differentiable episode pass: logits for every query against every way,
    /// plus the caches needed by [`Self::episode_backward`].
    pub fn episode_forward(
        &self,
        support: &[&[Tensor]],
        queries: &[&Tensor],
    ) -> Result<(Vec<Vec<f64>>, EpisodeCache)> {
        if support.is_empty() || queries.is_empty() {
            return Err(CoreError::invalid("episode needs support classes and queries"));
        }
        let mut support_caches = Vec::with_capacity(support.len());
        let mut class_feats = Vec::with_capacity(support.len());
        for class in support {
            if class.is_empty() {
                return Err(CoreError::invalid("a way has no support images"));
            }
            let mut caches = Vec::with_capacity(class.len());
            let mut acc = Tensor::zeros(self.encoder.feature_shape);
            for img in *class {
                self.check_input(img)?;
                let (f, cache) = self.encoder.forward_cached(&self.params, img);
                acc.add_scaled(&f, 1.0);
                caches.push(cache);
            }
            let n = class.len() as f64;
            for v in acc.data_mut() {
                *v /= n;
            }
            class_feats.push(acc);
            support_caches.push(caches);
        }
        let mut query_caches = Vec::with_capacity(queries.len());
        let mut query_feats = Vec::with_capacity(queries.len());
        for q in queries {
            self.check_input(q)?;
            let (f, cache) = self.encoder.forward_cached(&self.params, q);
            query_feats.push(f);
            query_caches.push(cache);
        }
        let mut logits = Vec::with_capacity(queries.len());
        let mut head_caches = Vec::with_capacity(queries.len());
        for qf in &query_feats {
            let mut row = Vec::with_capacity(support.len());
            let mut row_caches = Vec::with_capacity(support.len());
            for cf in &class_feats {
                let (l, c) = self.head.forward_cached(&self.params, cf, qf);
                row.push(l);
                row_caches.push(c);
            }
            logits.push(row);
            head_caches.push(row_caches);
        }
        Ok((
            logits,
            EpisodeCache {
                support_caches,
                query_caches,
                class_feats,
                query_feats,
                head_caches,
            },
        ))
    }

    /// Backward pass through an episode. `dlogits[q][k]` is dL/dlogit of
    /// query `q` against way `k`. Parameter gradients accumulate into
    /// `gparams` when given; input gradients are produced per `request`.
    /// Encoder work is skipped for images whose gradients nobody asked for.
    pub fn episode_backward(
        &self,
        cache: &EpisodeCache,
        dlogits: &[Vec<f64>],
        mut gparams: Option<&mut [f64]>,
        request: InputGradRequest,
    ) -> Result<InputGrads> {
        let k_ways = cache.class_feats.len();
        let n_queries = cache.query_feats.len();
        if dlogits.len() != n_queries || dlogits.iter().any(|r| r.len() != k_ways) {
            return Err(CoreError::shape(
                format!("{n_queries}x{k_ways} logit gradients"),
                format!("{}x{}", dlogits.len(), dlogits.first().map_or(0, Vec::len)),
            ));
        }
        if let InputGradRequest::SupportWay(w) = request {
            if w >= k_ways {
                return Err(CoreError::invalid(format!(
                    "support way {w} out of range (episode has {k_ways})"
                )));
            }
        }
        let fs = self.encoder.feature_shape;
        let mut g_class = vec![Tensor::zeros(fs); k_ways];
        let mut g_query = vec![Tensor::zeros(fs); n_queries];
        for q in 0..n_queries {
            for k in 0..k_ways {
                let d = dlogits[q][k];
                if d == 0.0 {
                    continue;
                }
                self.head.backward(
                    &self.params,
                    &cache.head_caches[q][k],
                    d,
                    gparams.as_deref_mut(),
                    &mut g_class[k],
                    &mut g_query[q],
                );
            }
        }
        let mut out = InputGrads::default();
        // Query encoders.
        let want_query_grads = request == InputGradRequest::Queries;
        if gparams.is_some() || want_query_grads {
            let mut grads = Vec::new();
            for q in 0..n_queries {
                let gx = self.encoder.backward(
                    &self.params,
                    &cache.query_caches[q],
                    &g_query[q],
                    gparams.as_deref_mut(),
                    want_query_grads,
                );
                if want_query_grads {
                    grads.push(gx.expect("query input gradient"));
                }
            }
            if want_query_grads {
                out.queries = Some(grads);
            }
        }
        // Support encoders: the class feature is a mean, so each shot gets
        // 1/N of the class-feature gradient.
        for k in 0..k_ways {
            let want_sup_grads = request == InputGradRequest::SupportWay(k);
            if gparams.is_none() && !want_sup_grads {
                continue;
            }
            let n = cache.support_caches[k].len();
            let mut per_shot = g_class[k].clone();
            for v in per_shot.data_mut() {
                *v /= n as f64;
            }
            let mut grads = Vec::new();
            for cache_n in &cache.support_caches[k] {
                let gx = self.encoder.backward(
                    &self.params,
                    cache_n,
                    &per_shot,
                    gparams.as_deref_mut(),
                    want_sup_grads,
                );
                if want_sup_grads {
                    grads.push(gx.expect("support input gradient"));
                }
            }
            if want_sup_grads {
                out.support_way = Some(grads);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub ways: usize,
    pub shots: usize,
    /// Queries per episode, balanced across ways.
    pub queries_total: usize,
    pub learning_rate: f64,
    /// Fixed validation episodes scored after every epoch.
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            episodes_per_epoch: 50,
            ways: 5,
            shots: 5,
            queries_total: 75,
            learning_rate: 1e-3,
            val_episodes: 40,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_epoch == 0 && self.epochs > 0 {
            return Err(CoreError::invalid("episodes_per_epoch must be positive"));
        }
        if self.ways == 0 || self.shots == 0 || self.queries_total == 0 || self.val_episodes == 0 {
            return Err(CoreError::invalid(
                "ways, shots, queries_total, and val_episodes must be positive",
            ));
        }
        if self.queries_total % self.ways != 0 {
            return Err(CoreError::invalid(format!(
                "queries_total ({}) must be a multiple of ways ({})",
                self.queries_total, self.ways
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub best_val_accuracy: f64,
}

/// Mean accuracy over evaluation episodes with a 95% confidence half-width.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AccuracyEstimate {
    pub mean: f64,
    pub half_width_95: f64,
    pub per_episode: Vec<f64>,
}

fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * libm::sqrt(var / n))
}

/// Fraction of episode queries whose top logit matches their way.
pub fn episode_accuracy(model: &FewShotModel, ep: &Episode) -> Result<f64> {
    let class_feats: Vec<Tensor> = ep
        .support
        .iter()
        .map(|c| model.encode_mean(c))
        .collect::<Result<_>>()?;
    let mut hits = 0usize;
    for (img, way) in &ep.query {
        let qf = model.encode(img)?;
        let logits = model.score_features(&class_feats, &qf)?;
        if argmax(&logits) == *way {
            hits += 1;
        }
    }
    Ok(hits as f64 / ep.query.len() as f64)
}

/// Accuracy over freshly sampled episodes (the standard few-shot protocol:
/// report mean and a 95% interval across episodes).
pub fn evaluate_accuracy(
    model: &FewShotModel,
    ds: &Dataset,
    ways: usize,
    shots: usize,
    queries_total: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<AccuracyEstimate> {
    if n_episodes == 0 {
        return Err(CoreError::invalid("n_episodes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_episode = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let ep = sample_episode(ds, ways, shots, queries_total, rng.random())?;
        per_episode.push(episode_accuracy(model, &ep)?);
    }
    let (mean, half_width_95) = mean_and_half_width(&per_episode);
    Ok(AccuracyEstimate {
        mean,
        half_width_95,
        per_episode,
    })
}

/// Episodic training with cross-entropy on query logits and Adam. After each
/// epoch the model is scored on a fixed set of validation episodes; the
/// parameters returned are those of the best validation epoch. With zero
/// epochs the model comes back unchanged and the history is empty.
pub fn train_episodic(
    model: FewShotModel,
    ds_train: &Dataset,
    ds_val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(FewShotModel, Vec<EpochStats>)> {
    cfg.validate()?;
    let mut model = model;
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let mut episode_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(1);
    let val_seeds: Vec<u64> = (0..cfg.val_episodes).map(|_| val_rng.random()).collect();

    let mut adam = Adam::new(model.params.len(), 0.0);
    let mut grads = vec![0.0; model.params.len()];
    let mut best_params = model.params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(
                ds_train,
                cfg.ways,
                cfg.shots,
                cfg.queries_total,
                episode_rng.random(),
            )?;
            let support: Vec<&[Tensor]> = ep.support.iter().map(|v| v.as_slice()).collect();
            let queries: Vec<&Tensor> = ep.query.iter().map(|(img, _)| img).collect();
            let (logits, cache) = model.episode_forward(&support, &queries)?;
            let scale = 1.0 / queries.len() as f64;
            let mut loss = 0.0;
            let mut dlogits = Vec::with_capacity(logits.len());
            for (row, (_, way)) in logits.iter().zip(&ep.query) {
                let (l, mut g) = softmax_cross_entropy(row, *way);
                loss += l * scale;
                for v in &mut g {
                    *v *= scale;
                }
                dlogits.push(g);
            }
            if !loss.is_finite() {
                return Err(CoreError::Divergence(format!(
                    "training loss became non-finite in epoch {epoch}"
                )));
            }
            grads.iter_mut().for_each(|g| *g = 0.0);
            model.episode_backward(&cache, &dlogits, Some(&mut grads), InputGradRequest::None)?;
            adam.step(&mut model.params, &grads, cfg.learning_rate);
            loss_sum += loss;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(CoreError::Divergence(format!(
                "parameters became non-finite in epoch {epoch}"
            )));
        }
        let mut val_acc = 0.0;
        for &s in &val_seeds {
            let ep = sample_episode(ds_val, cfg.ways, cfg.shots, cfg.queries_total, s)?;
            val_acc += episode_accuracy(&model, &ep)?;
        }
        val_acc /= val_seeds.len() as f64;
        if val_acc > best_val {
            best_val = val_acc;
            best_params.copy_from_slice(&model.params);
        }
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / cfg.episodes_per_epoch as f64,
            val_accuracy: val_acc,
            best_val_accuracy: best_val,
        });
    }
    model.params = best_params;
    Ok((model, history))
}

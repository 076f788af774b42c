//! Redundant-group sample selection.
//!
//! Each group pairs k candidate image feature matrices with one text
//! feature matrix; only one image actually matches the text. Two scorers
//! rank the candidates:
//!
//! * feature scoring — a channel-weighted average of the token-pooled
//!   image features; cheap, text-free, usable at inference;
//! * attention scoring — text-conditioned cross-attention relevance,
//!   used at training time to produce pseudo-labels.
//!
//! Distillation pushes the normalized feature scores toward the
//! normalized attention scores via a cross-entropy loss, updating only
//! the channel weights. Attention scores are gradient-detached.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{cross_entropy, dot, log_sum_exp, softmax, Matrix};
use crate::seeding;

/// k candidate images plus the shared text, with an optional planted
/// ground-truth index for benchmark measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundantGroup {
    pub group_id: String,
    pub image_features: Vec<Matrix>,
    pub text_features: Matrix,
    pub planted_valid_index: Option<usize>,
}

impl RedundantGroup {
    pub fn new(
        group_id: String,
        image_features: Vec<Matrix>,
        text_features: Matrix,
        planted_valid_index: Option<usize>,
    ) -> Result<Self> {
        if image_features.len() < 2 {
            return Err(Error::Domain(format!(
                "group {group_id} needs at least 2 images, got {}",
                image_features.len()
            )));
        }
        let shape = image_features[0].shape();
        for (i, m) in image_features.iter().enumerate() {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "group {group_id}: image {i} is {}x{} but image 0 is {}x{}",
                    m.rows(),
                    m.cols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        if text_features.cols() != shape.1 {
            return Err(Error::Shape(format!(
                "group {group_id}: text has {} channels but images have {}",
                text_features.cols(),
                shape.1
            )));
        }
        if let Some(idx) = planted_valid_index {
            if idx >= image_features.len() {
                return Err(Error::Domain(format!(
                    "group {group_id}: planted index {idx} out of range for k = {}",
                    image_features.len()
                )));
            }
        }
        Ok(RedundantGroup { group_id, image_features, text_features, planted_valid_index })
    }

    pub fn k(&self) -> usize {
        self.image_features.len()
    }

    pub fn channels(&self) -> usize {
        self.image_features[0].cols()
    }
}

/// One cross-attention layer: text rows project to queries, image rows to
/// keys, sharing a key width `d_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayerParams {
    pub query_weight: Matrix,
    pub key_weight: Matrix,
}

impl AttentionLayerParams {
    pub fn d(&self) -> usize {
        self.query_weight.rows()
    }

    pub fn d_k(&self) -> usize {
        self.query_weight.cols()
    }
}

/// Stack of cross-attention layers ending in a log-sum-exp relevance
/// readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionScorerParams {
    pub layers: Vec<AttentionLayerParams>,
    pub trainable: bool,
}

impl AttentionScorerParams {
    pub fn new(layers: Vec<AttentionLayerParams>, trainable: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Domain("attention scorer needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.query_weight.shape() != layer.key_weight.shape() {
                return Err(Error::Shape(format!(
                    "layer {i}: query weight {}x{} differs from key weight {}x{}",
                    layer.query_weight.rows(),
                    layer.query_weight.cols(),
                    layer.key_weight.rows(),
                    layer.key_weight.cols()
                )));
            }
        }
        Ok(AttentionScorerParams { layers, trainable })
    }

    /// Identity projections (`d_k = d`); exact scaled dot products.
    pub fn identity(d: usize, n_layers: usize) -> Result<Self> {
        let layer = AttentionLayerParams {
            query_weight: Matrix::identity(d),
            key_weight: Matrix::identity(d),
        };
        Self::new(vec![layer.clone(); n_layers.max(1)], false)
    }

    /// Shared random projection with orthonormal columns per layer.
    ///
    /// Queries and keys use the same matrix, so scaled dot products
    /// approximate true feature alignment under a random rank-`d_k`
    /// projection; with independent random weights the scorer would not
    /// preferentially rank aligned pairs at initialization.
    pub fn shared_random(d: usize, d_k: usize, n_layers: usize, seed: u64) -> Result<Self> {
        if d_k == 0 || d == 0 {
            return Err(Error::Domain(format!("invalid attention dims d={d}, d_k={d_k}")));
        }
        let mut layers = Vec::with_capacity(n_layers.max(1));
        for layer_idx in 0..n_layers.max(1) {
            let mut rng = seeding::rng(seed, "attention-init", layer_idx as u64);
            let w = orthonormal_columns(d, d_k, &mut rng);
            layers.push(AttentionLayerParams { query_weight: w.clone(), key_weight: w });
        }
        Self::new(layers, false)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Gram-Schmidt over Gaussian draws; for `d_k > d` the extra columns stay
/// plain Gaussian.
fn orthonormal_columns(d: usize, d_k: usize, rng: &mut impl Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d_k);
    while cols.len() < d_k {
        let mut v: Vec<f64> = (0..d)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        if cols.len() < d {
            for prev in &cols {
                let proj = dot(&v, prev);
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm < 1e-9 {
                continue;
            }
            for x in &mut v {
                *x /= norm;
            }
        }
        cols.push(v);
    }
    let mut m = Matrix::zeros(d, d_k);
    for (c, col) in cols.iter().enumerate() {
        for (r, &val) in col.iter().enumerate() {
            m.set(r, c, val);
        }
    }
    m
}

/// Channel weights for feature scoring plus the attention scorer that
/// supplies distillation targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub w: Vec<f64>,
    pub attention: AttentionScorerParams,
}

impl ScorerParams {
    /// Channel weights start at zero: distillation alone determines them,
    /// and the untrained scorer has a well-defined chance-level baseline
    /// through the lowest-index tie rule.
    pub fn new(d: usize, attention: AttentionScorerParams) -> Result<Self> {
        if attention.layers[0].d() != d {
            return Err(Error::Shape(format!(
                "attention expects {} channels but w has length {d}",
                attention.layers[0].d()
            )));
        }
        Ok(ScorerParams { w: vec![0.0; d], attention })
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.is_empty() {
            return Err(Error::Domain("scorer has no channel weights".into()));
        }
        if self.attention.layers[0].d() != self.w.len() {
            return Err(Error::Shape(format!(
                "w has length {} but attention expects {} channels",
                self.w.len(),
                self.attention.layers[0].d()
            )));
        }
        Ok(())
    }
}

/// Raw per-image scores, optionally with their normalized form attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub raw: Vec<f64>,
    pub normalized: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Feature,
    Attention,
}

/// Channel-weighted average of the token-pooled features:
/// `sum_j w_j * mean_tokens(h)_j`.
pub fn feature_score(h_v: &Matrix, w: &[f64]) -> Result<f64> {
    if h_v.cols() != w.len() {
        return Err(Error::Shape(format!(
            "feature_score: {} channels vs weight length {}",
            h_v.cols(),
            w.len()
        )));
    }
    Ok(dot(&h_v.mean_over_rows(), w))
}

/// Cross-attention relevance of an image to the text.
///
/// Per layer, `Q = h_t Wq` and `K = h_v Wk`. Intermediate layers replace
/// the text rows by attention-weighted averages of the image rows; the
/// final layer reads out `mean_t log sum_v exp(Q_t . K_v / sqrt(d_k))`.
pub fn attention_score(h_v: &Matrix, h_t: &Matrix, params: &AttentionScorerParams) -> Result<f64> {
    if h_v.cols() != h_t.cols() {
        return Err(Error::Shape(format!(
            "attention_score: image has {} channels but text has {}",
            h_v.cols(),
            h_t.cols()
        )));
    }
    if params.layers[0].d() != h_v.cols() {
        return Err(Error::Shape(format!(
            "attention_score: features have {} channels but weights expect {}",
            h_v.cols(),
            params.layers[0].d()
        )));
    }
    let mut text = h_t.clone();
    let last = params.layers.len() - 1;
    for (idx, layer) in params.layers.iter().enumerate() {
        let q = text.matmul(&layer.query_weight)?;
        let k = h_v.matmul(&layer.key_weight)?;
        let scale = 1.0 / (layer.d_k() as f64).sqrt();
        let mut scaled_rows: Vec<Vec<f64>> = Vec::with_capacity(q.rows());
        for t in 0..q.rows() {
            let row: Vec<f64> =
                (0..k.rows()).map(|v| dot(q.row(t), k.row(v)) * scale).collect();
            scaled_rows.push(row);
        }
        if idx == last {
            let total: f64 = scaled_rows.iter().map(|row| log_sum_exp(row)).sum();
            return Ok(total / scaled_rows.len() as f64);
        }
        let mut mixed = Matrix::zeros(text.rows(), h_v.cols());
        for (t, row) in scaled_rows.iter().enumerate() {
            let weights = softmax(row, 1.0)?;
            for (v, &wv) in weights.iter().enumerate() {
                for c in 0..h_v.cols() {
                    mixed.set(t, c, mixed.get(t, c) + wv * h_v.get(v, c));
                }
            }
        }
        text = mixed;
    }
    unreachable!("layer loop always returns at the last layer")
}

/// Applies the chosen scorer to every image in the group.
pub fn score_group(
    group: &RedundantGroup,
    params: &ScorerParams,
    which: ScoreKind,
) -> Result<ScoreVector> {
    let mut raw = Vec::with_capacity(group.k());
    for h_v in &group.image_features {
        let s = match which {
            ScoreKind::Feature => feature_score(h_v, &params.w)?,
            ScoreKind::Attention => {
                attention_score(h_v, &group.text_features, &params.attention)?
            }
        };
        raw.push(s);
    }
    Ok(ScoreVector { raw, normalized: None })
}

/// Temperature softmax over k >= 2 raw scores.
pub fn normalize_scores(raw: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::Domain(format!(
            "normalize_scores needs k >= 2 scores, got {}",
            raw.len()
        )));
    }
    softmax(raw, temperature)
}

/// Distillation loss: cross-entropy from normalized attention scores
/// (pseudo-labels, gradient-detached) to normalized feature scores.
pub fn adr_loss(s_attn_raw: &[f64], s_fea_raw: &[f64], temperature: f64) -> Result<f64> {
    if s_attn_raw.len() != s_fea_raw.len() {
        return Err(Error::Shape(format!(
            "adr_loss length mismatch: {} vs {}",
            s_attn_raw.len(),
            s_fea_raw.len()
        )));
    }
    let p = normalize_scores(s_attn_raw, temperature)?;
    let q = normalize_scores(s_fea_raw, temperature)?;
    cross_entropy(&p, &q)
}

/// Highest raw score wins; exact ties go to the lowest index.
pub fn select_valid(scores: &ScoreVector) -> Result<usize> {
    if scores.raw.len() < 2 {
        return Err(Error::Domain(format!(
            "select_valid needs k >= 2 scores, got {}",
            scores.raw.len()
        )));
    }
    let mut best = 0;
    for (i, &s) in scores.raw.iter().enumerate() {
        if s > scores.raw[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Distillation target for one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillTarget {
    /// Normalized attention scores (the default pseudo-labels).
    AttentionScores,
    /// Planted one-hot labels; groups without a planted index are skipped.
    PlantedOneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub temperature: f64,
    pub batch: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { lr: 1e-3, steps: 500, temperature: 1.0, batch: 32 }
    }
}

struct PreparedGroup {
    pooled: Vec<Vec<f64>>,
    target: Vec<f64>,
}

fn prepare_groups(
    groups: &[RedundantGroup],
    params: &ScorerParams,
    temperature: f64,
    target: DistillTarget,
) -> Result<Vec<PreparedGroup>> {
    let mut prepared = Vec::with_capacity(groups.len());
    for group in groups {
        let target_dist = match target {
            DistillTarget::AttentionScores => {
                let scores = score_group(group, params, ScoreKind::Attention)?;
                normalize_scores(&scores.raw, temperature)?
            }
            DistillTarget::PlantedOneHot => match group.planted_valid_index {
                Some(idx) => {
                    let mut one_hot = vec![0.0; group.k()];
                    one_hot[idx] = 1.0;
                    one_hot
                }
                None => continue,
            },
        };
        let pooled = group.image_features.iter().map(|m| m.mean_over_rows()).collect();
        prepared.push(PreparedGroup { pooled, target: target_dist });
    }
    Ok(prepared)
}

/// Gradient descent on the mean distillation loss, updating only the
/// channel weights `w`. Attention parameters act purely as pseudo-label
/// producers and are never updated here.
///
/// Returns the trained parameters and the per-step batch loss history.
pub fn train_sampler(
    groups: &[RedundantGroup],
    params: &ScorerParams,
    hyper: &TrainHyper,
) -> Result<(ScorerParams, Vec<f64>)> {
    train_sampler_with_targets(groups, params, hyper, DistillTarget::AttentionScores)
}

/// [`train_sampler`] with an explicit target mode; `PlantedOneHot`
/// realizes the feature-scoring-only ablation.
pub fn train_sampler_with_targets(
    groups: &[RedundantGroup],
    params: &ScorerParams,
    hyper: &TrainHyper,
    target: DistillTarget,
) -> Result<(ScorerParams, Vec<f64>)> {
    if groups.is_empty() {
        return Err(Error::Domain("train_sampler called with no groups".into()));
    }
    if !(hyper.lr > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {}", hyper.lr)));
    }
    if hyper.batch == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    params.validate()?;

    let prepared = prepare_groups(groups, params, hyper.temperature, target)?;
    if prepared.is_empty() {
        return Err(Error::Domain(
            "no usable groups: one-hot targets require planted labels".into(),
        ));
    }

    let d = params.w.len();
    let mut w = params.w.clone();
    let mut history = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut loss_sum = 0.0;
        let mut grad = vec![0.0; d];
        for j in 0..hyper.batch {
            let g = &prepared[(step * hyper.batch + j) % prepared.len()];
            let raw: Vec<f64> = g.pooled.iter().map(|h| dot(h, &w)).collect();
            let step_context = |e: Error| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("training halted at step {step}: {msg}"))
                }
                other => other,
            };
            let q = softmax(&raw, hyper.temperature).map_err(step_context)?;
            loss_sum += cross_entropy(&g.target, &q).map_err(step_context)?;
            for (i, h) in g.pooled.iter().enumerate() {
                let coeff = (q[i] - g.target[i]) / hyper.temperature;
                for (gd, &hv) in grad.iter_mut().zip(h) {
                    *gd += coeff * hv;
                }
            }
        }
        let scale = 1.0 / hyper.batch as f64;
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training halted at step {step}: loss is not finite"
            )));
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= hyper.lr * g * scale;
        }
        history.push(loss);
    }

    let trained = ScorerParams { w, attention: params.attention.clone() };
    Ok((trained, history))
}

/// Mean distillation loss of the current weights over whole groups,
/// against attention pseudo-labels.
pub fn mean_adr_loss(
    groups: &[RedundantGroup],
    params: &ScorerParams,
    temperature: f64,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Domain("mean_adr_loss over no groups".into()));
    }
    let mut total = 0.0;
    for group in groups {
        let attn = score_group(group, params, ScoreKind::Attention)?;
        let fea = score_group(group, params, ScoreKind::Feature)?;
        total += adr_loss(&attn.raw, &fea.raw, temperature)?;
    }
    Ok(total / groups.len() as f64)
}

/// Mean entropy of the normalized attention distributions; the
/// information-theoretic floor of the distillation loss.
pub fn mean_attention_entropy(
    groups: &[RedundantGroup],
    params: &ScorerParams,
    temperature: f64,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Domain("mean_attention_entropy over no groups".into()));
    }
    let mut total = 0.0;
    for group in groups {
        let attn = score_group(group, params, ScoreKind::Attention)?;
        let p = normalize_scores(&attn.raw, temperature)?;
        total += cross_entropy(&p, &p)?;
    }
    Ok(total / groups.len() as f64)
}

/// Fraction of labeled groups where the scorer's argmax hits the planted
/// index. Errors if no group carries a label.
pub fn selection_accuracy<F>(groups: &[RedundantGroup], mut score: F) -> Result<f64>
where
    F: FnMut(&RedundantGroup) -> Result<ScoreVector>,
{
    let mut labeled = 0usize;
    let mut hits = 0usize;
    for group in groups {
        let Some(planted) = group.planted_valid_index else { continue };
        labeled += 1;
        if select_valid(&score(group)?)? == planted {
            hits += 1;
        }
    }
    if labeled == 0 {
        return Err(Error::Domain("selection_accuracy: no planted labels present".into()));
    }
    Ok(hits as f64 / labeled as f64)
}

/// JSONL wire form of one group (see the module-level formats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRecord {
    pub group_id: String,
    pub text_features: Matrix,
    pub images: Vec<crate::fusion::FeatureRecord>,
    pub valid_index: Option<usize>,
}

impl GroupRecord {
    pub fn to_group(&self) -> Result<RedundantGroup> {
        RedundantGroup::new(
            self.group_id.clone(),
            self.images.iter().map(|i| i.features.clone()).collect(),
            self.text_features.clone(),
            self.valid_index,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: usize,
}

/// Persisted scorer: `{"w": [...], "attention": {...}, "meta": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerCheckpoint {
    pub w: Vec<f64>,
    pub attention: AttentionScorerParams,
    pub meta: CheckpointMeta,
}

impl SamplerCheckpoint {
    pub fn from_params(params: &ScorerParams, seed: u64, steps: usize) -> Self {
        SamplerCheckpoint {
            w: params.w.clone(),
            attention: params.attention.clone(),
            meta: CheckpointMeta { seed, steps },
        }
    }

    pub fn to_params(&self) -> Result<ScorerParams> {
        let params = ScorerParams { w: self.w.clone(), attention: self.attention.clone() };
        params.validate()?;
        Ok(params)
    }
}

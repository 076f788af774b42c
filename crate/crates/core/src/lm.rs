//! Minimal conditional language head.
//!
//! Realizes the autoregressive factorization over answer tokens given a
//! pooled visual context and instruction tokens: the visual context is
//! projected and prepended to the embedded token sequence, one causal
//! attention mixing block runs over the window, and a linear head emits
//! the next-token distribution. Named parameters can be frozen, and any
//! matrix-shaped weight can carry a low-rank adapter.
//!
//! Every gradient here is analytic and audited against central
//! differences; there is no autodiff tape.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ProjectionParams;
use crate::num::{dot, outer, softmax, Matrix};
use crate::sampler::AttentionLayerParams;
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence { ids }
    }

    pub fn empty() -> Self {
        TokenSequence { ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Additive low-rank weight delta `scale * (a b)` with `rank = a.cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowRankAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

impl LowRankAdapter {
    pub fn new(a: Matrix, b: Matrix, scale: f64) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::Shape(format!(
                "adapter factors do not compose: a is {}x{}, b is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let rank = a.cols();
        if rank >= a.rows().min(b.cols()) {
            return Err(Error::Domain(format!(
                "adapter rank {rank} must be below min({}, {})",
                a.rows(),
                b.cols()
            )));
        }
        if !scale.is_finite() {
            return Err(Error::Numeric(format!("non-finite adapter scale {scale}")));
        }
        Ok(LowRankAdapter { a, b, scale })
    }

    pub fn zeros(d_in: usize, d_out: usize, rank: usize, scale: f64) -> Result<Self> {
        Self::new(Matrix::zeros(d_in, rank), Matrix::zeros(rank, d_out), scale)
    }

    /// Gaussian `a`, zero `b`: the delta starts at zero, the usual
    /// adapter initialization.
    pub fn seeded(d_in: usize, d_out: usize, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = seeding::rng(seed, "adapter-init", 0);
        let data: Vec<f64> = (0..d_in * rank)
            .map(|_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    / (d_in as f64).sqrt()
            })
            .collect();
        Self::new(Matrix::from_vec(d_in, rank, data)?, Matrix::zeros(rank, d_out), scale)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

/// `w + scale * (a b)`; `w` itself is untouched.
pub fn apply_low_rank_adapter(w: &Matrix, adapter: &LowRankAdapter) -> Result<Matrix> {
    if adapter.a.rows() != w.rows() || adapter.b.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "adapter delta is {}x{} but base weight is {}x{}",
            adapter.a.rows(),
            adapter.b.cols(),
            w.rows(),
            w.cols()
        )));
    }
    w.add(&adapter.a.matmul(&adapter.b)?.scale(adapter.scale)?)
}

/// Matrix-shaped parameters that may carry adapters.
pub const ADAPTER_BASES: &[&str] = &[
    "token_embedding",
    "context_projection.weight",
    "cross_attention.query_weight",
    "cross_attention.key_weight",
    "output_weight",
];

/// Parameters of the toy conditional language head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLmParams {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// vocab x embed
    pub token_embedding: Matrix,
    /// pooled visual vector -> embed space
    pub context_projection: ProjectionParams,
    /// single mixing block over the window
    pub cross_attention: AttentionLayerParams,
    /// embed x vocab
    pub output_weight: Matrix,
    /// adapter per named base weight
    pub adapters: BTreeMap<String, LowRankAdapter>,
    /// names excluded from training
    pub freeze_spec: BTreeSet<String>,
}

impl ToyLmParams {
    pub fn init(
        vocab_size: usize,
        embed_dim: usize,
        d_k: usize,
        visual_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size < 2 || embed_dim == 0 || d_k == 0 || visual_dim == 0 {
            return Err(Error::Config(format!(
                "invalid model dims: vocab={vocab_size}, embed={embed_dim}, d_k={d_k}, visual={visual_dim}"
            )));
        }
        let mut rng = seeding::rng(seed, "lm-init", 0);
        let mut gauss_matrix = |rows: usize, cols: usize, scale: f64| -> Matrix {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                        * scale
                })
                .collect();
            Matrix::from_vec(rows, cols, data).expect("finite init")
        };
        let embed_scale = 1.0 / (embed_dim as f64).sqrt();
        let params = ToyLmParams {
            vocab_size,
            embed_dim,
            token_embedding: gauss_matrix(vocab_size, embed_dim, embed_scale),
            context_projection: ProjectionParams::new(
                gauss_matrix(visual_dim, embed_dim, 1.0 / (visual_dim as f64).sqrt()),
                vec![0.0; embed_dim],
            )?,
            cross_attention: AttentionLayerParams {
                query_weight: gauss_matrix(embed_dim, d_k, embed_scale),
                key_weight: gauss_matrix(embed_dim, d_k, embed_scale),
            },
            output_weight: gauss_matrix(embed_dim, vocab_size, embed_scale),
            adapters: BTreeMap::new(),
            freeze_spec: BTreeSet::new(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn visual_dim(&self) -> usize {
        self.context_projection.d_in()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if self.token_embedding.shape() != (self.vocab_size, d) {
            return Err(Error::Shape(format!(
                "token_embedding is {}x{}, expected {}x{d}",
                self.token_embedding.rows(),
                self.token_embedding.cols(),
                self.vocab_size
            )));
        }
        if self.context_projection.d_out() != d {
            return Err(Error::Shape(format!(
                "context_projection maps to {} dims, expected {d}",
                self.context_projection.d_out()
            )));
        }
        let attn = &self.cross_attention;
        if attn.query_weight.shape() != attn.key_weight.shape() || attn.query_weight.rows() != d {
            return Err(Error::Shape(format!(
                "cross_attention weights are {}x{} / {}x{}, expected {d} rows each",
                attn.query_weight.rows(),
                attn.query_weight.cols(),
                attn.key_weight.rows(),
                attn.key_weight.cols()
            )));
        }
        if self.output_weight.shape() != (d, self.vocab_size) {
            return Err(Error::Shape(format!(
                "output_weight is {}x{}, expected {d}x{}",
                self.output_weight.rows(),
                self.output_weight.cols(),
                self.vocab_size
            )));
        }
        for (base, adapter) in &self.adapters {
            if !ADAPTER_BASES.contains(&base.as_str()) {
                return Err(Error::Config(format!("adapter attached to unknown weight {base}")));
            }
            let (rows, cols) = self.base_shape(base)?;
            if adapter.a.rows() != rows || adapter.b.cols() != cols {
                return Err(Error::Shape(format!(
                    "adapter for {base} spans {}x{}, weight is {rows}x{cols}",
                    adapter.a.rows(),
                    adapter.b.cols()
                )));
            }
        }
        let known = self.parameter_names();
        for name in &self.freeze_spec {
            if !known.contains(name) {
                return Err(Error::Config(format!("freeze_spec names unknown parameter {name}")));
            }
        }
        Ok(())
    }

    fn base_shape(&self, base: &str) -> Result<(usize, usize)> {
        let m = match base {
            "token_embedding" => &self.token_embedding,
            "context_projection.weight" => &self.context_projection.weight,
            "cross_attention.query_weight" => &self.cross_attention.query_weight,
            "cross_attention.key_weight" => &self.cross_attention.key_weight,
            "output_weight" => &self.output_weight,
            other => return Err(Error::Config(format!("unknown weight {other}"))),
        };
        Ok(m.shape())
    }

    /// Canonical names of every parameter tensor, adapters included.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = vec![
            "token_embedding".to_string(),
            "context_projection.weight".to_string(),
            "context_projection.bias".to_string(),
            "cross_attention.query_weight".to_string(),
            "cross_attention.key_weight".to_string(),
            "output_weight".to_string(),
        ];
        for base in self.adapters.keys() {
            names.push(format!("adapters.{base}.a"));
            names.push(format!("adapters.{base}.b"));
        }
        names
    }

    /// All parameter names minus the freeze spec.
    pub fn trainable_parameters(&self) -> Result<Vec<String>> {
        self.validate()?;
        Ok(self
            .parameter_names()
            .into_iter()
            .filter(|n| !self.freeze_spec.contains(n))
            .collect())
    }

    pub fn param_slice(&self, name: &str) -> Result<&[f64]> {
        let slice = match name {
            "token_embedding" => self.token_embedding.data(),
            "context_projection.weight" => self.context_projection.weight.data(),
            "context_projection.bias" => return Ok(&self.context_projection.bias),
            "cross_attention.query_weight" => self.cross_attention.query_weight.data(),
            "cross_attention.key_weight" => self.cross_attention.key_weight.data(),
            "output_weight" => self.output_weight.data(),
            other => {
                if let Some(rest) = other.strip_prefix("adapters.") {
                    let (base, which) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| Error::Config(format!("unknown parameter {other}")))?;
                    let adapter = self
                        .adapters
                        .get(base)
                        .ok_or_else(|| Error::Config(format!("no adapter on {base}")))?;
                    return Ok(match which {
                        "a" => adapter.a.data(),
                        "b" => adapter.b.data(),
                        _ => return Err(Error::Config(format!("unknown parameter {other}"))),
                    });
                }
                return Err(Error::Config(format!("unknown parameter {other}")));
            }
        };
        Ok(slice)
    }

    pub(crate) fn param_slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let slice = match name {
            "token_embedding" => self.token_embedding.data_mut(),
            "context_projection.weight" => self.context_projection.weight.data_mut(),
            "context_projection.bias" => return Ok(&mut self.context_projection.bias),
            "cross_attention.query_weight" => self.cross_attention.query_weight.data_mut(),
            "cross_attention.key_weight" => self.cross_attention.key_weight.data_mut(),
            "output_weight" => self.output_weight.data_mut(),
            other => {
                if let Some(rest) = other.strip_prefix("adapters.") {
                    let (base, which) = rest
                        .rsplit_once('.')
                        .ok_or_else(|| Error::Config(format!("unknown parameter {other}")))?;
                    let adapter = self
                        .adapters
                        .get_mut(base)
                        .ok_or_else(|| Error::Config(format!("no adapter on {base}")))?;
                    return Ok(match which {
                        "a" => adapter.a.data_mut(),
                        "b" => adapter.b.data_mut(),
                        _ => return Err(Error::Config(format!("unknown parameter {other}"))),
                    });
                }
                return Err(Error::Config(format!("unknown parameter {other}")));
            }
        };
        Ok(slice)
    }
}

/// One training example: visual features, instruction tokens, answer.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub visual: Matrix,
    pub instruction: TokenSequence,
    pub answer: TokenSequence,
}

/// Effective (adapter-applied) weights used by forward and backward.
struct EffectiveWeights {
    embedding: Matrix,
    context_weight: Matrix,
    query_weight: Matrix,
    key_weight: Matrix,
    output_weight: Matrix,
}

fn effective(params: &ToyLmParams) -> Result<EffectiveWeights> {
    let apply = |base: &Matrix, name: &str| -> Result<Matrix> {
        match params.adapters.get(name) {
            Some(adapter) => apply_low_rank_adapter(base, adapter),
            None => Ok(base.clone()),
        }
    };
    Ok(EffectiveWeights {
        embedding: apply(&params.token_embedding, "token_embedding")?,
        context_weight: apply(&params.context_projection.weight, "context_projection.weight")?,
        query_weight: apply(&params.cross_attention.query_weight, "cross_attention.query_weight")?,
        key_weight: apply(&params.cross_attention.key_weight, "cross_attention.key_weight")?,
        output_weight: apply(&params.output_weight, "output_weight")?,
    })
}

struct ForwardCache {
    pooled: Vec<f64>,
    /// window rows: projected context then token embeddings
    x: Matrix,
    q: Matrix,
    k: Matrix,
    /// causal attention rows; row i has i+1 entries
    attn: Vec<Vec<f64>>,
    y: Matrix,
    /// token id at each window position >= 1
    token_ids: Vec<usize>,
}

fn check_tokens(ids: &[usize], vocab: usize) -> Result<()> {
    for &id in ids {
        if id >= vocab {
            return Err(Error::Domain(format!(
                "token id {id} outside vocabulary of size {vocab}"
            )));
        }
    }
    Ok(())
}

fn forward_window(
    params: &ToyLmParams,
    eff: &EffectiveWeights,
    visual: &Matrix,
    tokens: &[usize],
) -> Result<ForwardCache> {
    if visual.cols() != params.visual_dim() {
        return Err(Error::Shape(format!(
            "visual features have {} channels, context projection expects {}",
            visual.cols(),
            params.visual_dim()
        )));
    }
    check_tokens(tokens, params.vocab_size)?;

    let d = params.embed_dim;
    let pooled = visual.mean_over_rows();
    let mut ctx: Vec<f64> = params.context_projection.bias.clone();
    for (j, c) in ctx.iter_mut().enumerate() {
        for (i, &p) in pooled.iter().enumerate() {
            *c += p * eff.context_weight.get(i, j);
        }
    }

    let window_len = 1 + tokens.len();
    let mut x_data = Vec::with_capacity(window_len * d);
    x_data.extend_from_slice(&ctx);
    for &id in tokens {
        x_data.extend_from_slice(eff.embedding.row(id));
    }
    let x = Matrix::from_vec(window_len, d, x_data)?;

    let q = x.matmul(&eff.query_weight)?;
    let k = x.matmul(&eff.key_weight)?;
    let scale = 1.0 / (eff.query_weight.cols() as f64).sqrt();

    let mut attn = Vec::with_capacity(window_len);
    let mut y = x.clone();
    for i in 0..window_len {
        let scores: Vec<f64> = (0..=i).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
        let weights = softmax(&scores, 1.0)?;
        for (j, &w) in weights.iter().enumerate() {
            for c in 0..d {
                y.set(i, c, y.get(i, c) + w * x.get(j, c));
            }
        }
        attn.push(weights);
    }

    Ok(ForwardCache { pooled, x, q, k, attn, y, token_ids: tokens.to_vec() })
}

fn position_dist(eff: &EffectiveWeights, cache: &ForwardCache, pos: usize) -> Result<Vec<f64>> {
    let vocab = eff.output_weight.cols();
    let mut logits = vec![0.0; vocab];
    for (c, logit) in logits.iter_mut().enumerate() {
        let mut acc = 0.0;
        for r in 0..eff.output_weight.rows() {
            acc += cache.y.get(pos, r) * eff.output_weight.get(r, c);
        }
        *logit = acc;
    }
    softmax(&logits, 1.0)
}

/// Next-token distribution given the visual context, instruction, and an
/// answer prefix. Sums to 1 within 1e-9 by the softmax contract.
pub fn next_token_dist(
    params: &ToyLmParams,
    visual: &Matrix,
    instruction: &TokenSequence,
    prefix: &TokenSequence,
) -> Result<Vec<f64>> {
    params.validate()?;
    let eff = effective(params)?;
    let mut tokens = instruction.ids.clone();
    tokens.extend_from_slice(&prefix.ids);
    let cache = forward_window(params, &eff, visual, &tokens)?;
    position_dist(&eff, &cache, cache.x.rows() - 1)
}

/// Log-probability of the full answer under the autoregressive
/// factorization; always <= 0.
pub fn sequence_log_prob(
    params: &ToyLmParams,
    visual: &Matrix,
    instruction: &TokenSequence,
    answer: &TokenSequence,
) -> Result<f64> {
    params.validate()?;
    if answer.is_empty() {
        return Err(Error::Domain("answer must contain at least one token".into()));
    }
    check_tokens(&answer.ids, params.vocab_size)?;
    let eff = effective(params)?;

    // One causal pass scores every answer position: attention at position
    // i only sees j <= i, so the distribution at each readout position
    // equals the one next_token_dist computes for that prefix.
    let mut tokens = instruction.ids.clone();
    tokens.extend_from_slice(&answer.ids[..answer.len() - 1]);
    let cache = forward_window(params, &eff, visual, &tokens)?;

    let base = instruction.len(); // window position predicting answer[0]
    let mut log_prob = 0.0;
    for (l, &target) in answer.ids.iter().enumerate() {
        let p = position_dist(&eff, &cache, base + l)?;
        log_prob += p[target].max(f64::MIN_POSITIVE).ln();
    }
    Ok(log_prob)
}

/// Mean per-token cross-entropy over the batch:
/// `mean_b(-log p(answer_b) / L_b)`.
pub fn teacher_forced_loss(params: &ToyLmParams, batch: &[LmExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("teacher_forced_loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let lp = sequence_log_prob(params, &ex.visual, &ex.instruction, &ex.answer)?;
        total += -lp / ex.answer.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

pub type GradMap = BTreeMap<String, Vec<f64>>;

fn zero_grads(params: &ToyLmParams) -> GradMap {
    let mut grads = GradMap::new();
    for name in params.parameter_names() {
        let len = params.param_slice(&name).expect("known name").len();
        grads.insert(name, vec![0.0; len]);
    }
    grads
}

/// Teacher-forced loss and analytic gradients for every parameter
/// (adapters included) over a batch.
pub fn loss_and_gradients(params: &ToyLmParams, batch: &[LmExample]) -> Result<(f64, GradMap)> {
    if batch.is_empty() {
        return Err(Error::Domain("loss_and_gradients over an empty batch".into()));
    }
    params.validate()?;
    let eff = effective(params)?;
    let d = params.embed_dim;
    let vocab = params.vocab_size;
    let d_k = eff.query_weight.cols();
    let scale = 1.0 / (d_k as f64).sqrt();

    let mut grads = zero_grads(params);
    // gradients w.r.t. effective weights, mapped to bases/adapters at the end
    let mut g_emb = Matrix::zeros(vocab, d);
    let mut g_ctx_w = Matrix::zeros(params.visual_dim(), d);
    let mut g_ctx_b = vec![0.0; d];
    let mut g_q = Matrix::zeros(d, d_k);
    let mut g_k = Matrix::zeros(d, d_k);
    let mut g_out = Matrix::zeros(d, vocab);
    let mut total_loss = 0.0;

    for ex in batch {
        if ex.answer.is_empty() {
            return Err(Error::Domain("answer must contain at least one token".into()));
        }
        check_tokens(&ex.answer.ids, vocab)?;
        let mut tokens = ex.instruction.ids.clone();
        tokens.extend_from_slice(&ex.answer.ids[..ex.answer.len() - 1]);
        let cache = forward_window(params, &eff, &ex.visual, &tokens)?;
        let n = cache.x.rows();
        let weight = 1.0 / (batch.len() as f64 * ex.answer.len() as f64);

        // output head: d_logits = p - onehot at each readout position
        let base_pos = ex.instruction.len();
        let mut d_y = Matrix::zeros(n, d);
        for (l, &target) in ex.answer.ids.iter().enumerate() {
            let pos = base_pos + l;
            let p = position_dist(&eff, &cache, pos)?;
            total_loss += -p[target].max(f64::MIN_POSITIVE).ln() * weight;
            for c in 0..vocab {
                let dl = (p[c] - if c == target { 1.0 } else { 0.0 }) * weight;
                if dl == 0.0 {
                    continue;
                }
                for r in 0..d {
                    g_out.set(r, c, g_out.get(r, c) + cache.y.get(pos, r) * dl);
                    d_y.set(pos, r, d_y.get(pos, r) + eff.output_weight.get(r, c) * dl);
                }
            }
        }

        // attention block backward (residual: y = x + attn(x))
        let mut d_x = d_y.clone();
        let mut d_q = Matrix::zeros(n, d_k);
        let mut d_k_mat = Matrix::zeros(n, d_k);
        for i in 0..n {
            let weights = &cache.attn[i];
            // dA_ij = d_y_i . x_j, then softmax backward over j <= i
            let d_a: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|c| d_y.get(i, c) * cache.x.get(j, c)).sum())
                .collect();
            let inner: f64 = weights.iter().zip(&d_a).map(|(w, da)| w * da).sum();
            for j in 0..=i {
                // value path
                for c in 0..d {
                    d_x.set(j, c, d_x.get(j, c) + weights[j] * d_y.get(i, c));
                }
                let d_s = weights[j] * (d_a[j] - inner) * scale;
                if d_s == 0.0 {
                    continue;
                }
                for c in 0..d_k {
                    d_q.set(i, c, d_q.get(i, c) + d_s * cache.k.get(j, c));
                    d_k_mat.set(j, c, d_k_mat.get(j, c) + d_s * cache.q.get(i, c));
                }
            }
        }
        // projection weights and their input contributions
        let gq = cache.x.transpose().matmul(&d_q)?;
        let gk = cache.x.transpose().matmul(&d_k_mat)?;
        g_q = g_q.add(&gq)?;
        g_k = g_k.add(&gk)?;
        let dx_from_q = d_q.matmul(&eff.query_weight.transpose())?;
        let dx_from_k = d_k_mat.matmul(&eff.key_weight.transpose())?;
        d_x = d_x.add(&dx_from_q)?.add(&dx_from_k)?;

        // embeddings and visual context
        for (pos, &id) in cache.token_ids.iter().enumerate() {
            for c in 0..d {
                g_emb.set(id, c, g_emb.get(id, c) + d_x.get(pos + 1, c));
            }
        }
        let d_ctx: Vec<f64> = (0..d).map(|c| d_x.get(0, c)).collect();
        g_ctx_w = g_ctx_w.add(&outer(&cache.pooled, &d_ctx))?;
        for (acc, v) in g_ctx_b.iter_mut().zip(&d_ctx) {
            *acc += v;
        }
    }

    // route effective-weight gradients into bases and adapter factors
    let assign = |name: &str, eff_grad: &Matrix, grads: &mut GradMap| -> Result<()> {
        grads.get_mut(name).expect("known name").copy_from_slice(eff_grad.data());
        if let Some(adapter) = params.adapters.get(name) {
            let ga = eff_grad.matmul(&adapter.b.transpose())?.scale(adapter.scale)?;
            let gb = adapter.a.transpose().matmul(eff_grad)?.scale(adapter.scale)?;
            grads
                .get_mut(&format!("adapters.{name}.a"))
                .expect("known name")
                .copy_from_slice(ga.data());
            grads
                .get_mut(&format!("adapters.{name}.b"))
                .expect("known name")
                .copy_from_slice(gb.data());
        }
        Ok(())
    };
    assign("token_embedding", &g_emb, &mut grads)?;
    assign("context_projection.weight", &g_ctx_w, &mut grads)?;
    assign("cross_attention.query_weight", &g_q, &mut grads)?;
    assign("cross_attention.key_weight", &g_k, &mut grads)?;
    assign("output_weight", &g_out, &mut grads)?;
    grads.get_mut("context_projection.bias").expect("known name").copy_from_slice(&g_ctx_b);

    Ok((total_loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmHyper {
    pub lr: f64,
    pub batch: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub optimizer: OptimizerKind,
}

impl Default for LmHyper {
    fn default() -> Self {
        LmHyper {
            lr: 1e-3,
            batch: 8,
            steps_stage1: 500,
            steps_stage2: 500,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStep {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    m: GradMap,
    v: GradMap,
    t: usize,
}

fn run_stage(
    stage: u8,
    data: &[LmExample],
    params: &mut ToyLmParams,
    hyper: &LmHyper,
    steps: usize,
    trainable: &[String],
    history: &mut Vec<StageStep>,
) -> Result<()> {
    if steps == 0 || data.is_empty() {
        return Ok(());
    }
    let mut adam = AdamState { m: GradMap::new(), v: GradMap::new(), t: 0 };
    if hyper.optimizer == OptimizerKind::Adam {
        for name in trainable {
            let len = params.param_slice(name)?.len();
            adam.m.insert(name.clone(), vec![0.0; len]);
            adam.v.insert(name.clone(), vec![0.0; len]);
        }
    }
    for step in 0..steps {
        let batch: Vec<LmExample> = (0..hyper.batch.max(1))
            .map(|j| data[(step * hyper.batch.max(1) + j) % data.len()].clone())
            .collect();
        let (loss, grads) = loss_and_gradients(params, &batch).map_err(|e| match e {
            Error::Numeric(msg) => {
                Error::Numeric(format!("stage {stage} halted at step {step}: {msg}"))
            }
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "stage {stage} halted at step {step}: loss is not finite"
            )));
        }
        match hyper.optimizer {
            OptimizerKind::Sgd => {
                for name in trainable {
                    let g = &grads[name];
                    let p = params.param_slice_mut(name)?;
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= hyper.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                adam.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(adam.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(adam.t as i32);
                for name in trainable {
                    let g = &grads[name];
                    let m = adam.m.get_mut(name).expect("state");
                    let v = adam.v.get_mut(name).expect("state");
                    let p = params.param_slice_mut(name)?;
                    for ((pv, gv), (mv, vv)) in
                        p.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= hyper.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        history.push(StageStep { stage, step, loss });
    }
    Ok(())
}

/// Two-stage tuning: stage 1 on concept-alignment records, stage 2
/// continuing from the stage-1 parameters on diverse records. Frozen
/// parameters are never written, so they stay bit-identical.
pub fn train_two_stage(
    stage1: &[LmExample],
    stage2: &[LmExample],
    params: &ToyLmParams,
    hyper: &LmHyper,
) -> Result<(ToyLmParams, Vec<StageStep>)> {
    if stage1.is_empty() && stage2.is_empty() {
        return Err(Error::Domain("both training stages are empty".into()));
    }
    let trainable = params.trainable_parameters()?;
    let mut trained = params.clone();
    let mut history = Vec::new();
    run_stage(1, stage1, &mut trained, hyper, hyper.steps_stage1, &trainable, &mut history)?;
    run_stage(2, stage2, &mut trained, hyper, hyper.steps_stage2, &trainable, &mut history)?;
    Ok((trained, history))
}

pub fn save_checkpoint(params: &ToyLmParams, path: &std::path::Path) -> Result<()> {
    let json = serde_json::to_string_pretty(params)
        .map_err(|e| Error::Io(format!("serializing checkpoint: {e}")))?;
    std::fs::write(path, json)
        .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ToyLmParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    let params: ToyLmParams = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    params.validate()?;
    Ok(params)
}

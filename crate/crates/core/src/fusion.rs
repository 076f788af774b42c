//! Dual-stream feature fusion: two encoder feature streams are projected
//! into a shared space and blended by a learnable scalar gate.
//!
//! The gate is parameterized through a logistic so the blend is always a
//! strict convex combination; every output entry lies between the
//! corresponding projected-stream entries.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::num::{outer, sigmoid, Matrix};
use crate::seeding;

/// Affine projection: `H = F W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectionParams {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Shape(format!(
                "bias length {} does not match weight columns {}",
                bias.len(),
                weight.cols()
            )));
        }
        if let Some(v) = bias.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite bias entry {v}")));
        }
        Ok(ProjectionParams { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        ProjectionParams { weight: Matrix::identity(dim), bias: vec![0.0; dim] }
    }

    /// Gaussian init scaled by `1/sqrt(d_in)`, zero bias.
    pub fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let data: Vec<f64> = (0..d_in * d_out)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale)
            .collect();
        ProjectionParams {
            weight: Matrix::from_vec(d_in, d_out, data).expect("finite init"),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Gate and projection parameters for two-stream fusion.
///
/// The blend weight is `alpha = sigmoid(alpha_logit)`, kept strictly
/// inside (0, 1) even where the logistic saturates in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub alpha_logit: f64,
    pub projection_1: ProjectionParams,
    pub projection_2: ProjectionParams,
}

impl FusionParams {
    pub fn new(
        alpha_logit: f64,
        projection_1: ProjectionParams,
        projection_2: ProjectionParams,
    ) -> Result<Self> {
        if !alpha_logit.is_finite() {
            return Err(Error::Numeric(format!("non-finite alpha_logit {alpha_logit}")));
        }
        if projection_1.d_out() != projection_2.d_out() {
            return Err(Error::Shape(format!(
                "projections map to different widths: {} vs {}",
                projection_1.d_out(),
                projection_2.d_out()
            )));
        }
        Ok(FusionParams { alpha_logit, projection_1, projection_2 })
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_logit).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
    }
}

/// Wire format for file-backed encoder features: one image per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub image_id: String,
    pub features: Matrix,
}

#[derive(Debug, Clone)]
enum EncoderSource {
    SyntheticGaussian { seed: u64 },
    FileBacked { table: BTreeMap<String, Matrix> },
}

/// Stand-in for a visual encoder: emits an `m x d_enc` feature matrix per
/// image id, either from a seeded generator or from a feature file.
#[derive(Debug, Clone)]
pub struct EncoderStub {
    token_count: usize,
    channels: usize,
    source: EncoderSource,
}

impl EncoderStub {
    pub fn synthetic_gaussian(token_count: usize, channels: usize, seed: u64) -> Result<Self> {
        if token_count == 0 || channels == 0 {
            return Err(Error::Domain(format!(
                "encoder stub needs positive dimensions, got {token_count}x{channels}"
            )));
        }
        Ok(EncoderStub {
            token_count,
            channels,
            source: EncoderSource::SyntheticGaussian { seed },
        })
    }

    pub fn file_backed(path: &Path, token_count: usize, channels: usize) -> Result<Self> {
        let records: Vec<FeatureRecord> = jsonl::read_jsonl(path)?;
        Self::from_records(&records, token_count, channels)
    }

    pub fn from_records(
        records: &[FeatureRecord],
        token_count: usize,
        channels: usize,
    ) -> Result<Self> {
        let mut table = BTreeMap::new();
        for record in records {
            if record.features.shape() != (token_count, channels) {
                return Err(Error::Shape(format!(
                    "features for {} are {}x{}, expected {token_count}x{channels}",
                    record.image_id,
                    record.features.rows(),
                    record.features.cols()
                )));
            }
            table.insert(record.image_id.clone(), record.features.clone());
        }
        Ok(EncoderStub { token_count, channels, source: EncoderSource::FileBacked { table } })
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Emits the feature matrix for `image_id`. Synthetic stubs draw from
    /// a generator keyed by (seed, image_id), so the result does not
    /// depend on call order.
    pub fn encode(&self, image_id: &str) -> Result<Matrix> {
        match &self.source {
            EncoderSource::SyntheticGaussian { seed } => {
                let key = seeding::fnv1a(image_id.as_bytes());
                let mut rng = seeding::rng(*seed, "encoder-stub", key);
                let data: Vec<f64> = (0..self.token_count * self.channels)
                    .map(|_| {
                        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                    .collect();
                Matrix::from_vec(self.token_count, self.channels, data)
            }
            EncoderSource::FileBacked { table } => table
                .get(image_id)
                .cloned()
                .ok_or_else(|| Error::Lookup(format!("no feature record for image_id {image_id}"))),
        }
    }
}

/// `H = F W + b` with the bias added to every row.
pub fn project(features: &Matrix, params: &ProjectionParams) -> Result<Matrix> {
    if features.cols() != params.weight.rows() {
        return Err(Error::Shape(format!(
            "project: features are {}x{} but weight is {}x{}",
            features.rows(),
            features.cols(),
            params.weight.rows(),
            params.weight.cols()
        )));
    }
    features.matmul(&params.weight)?.add_row_vec(&params.bias)
}

/// Elementwise `alpha * h1 + (1 - alpha) * h2`.
pub fn fuse(h1: &Matrix, h2: &Matrix, params: &FusionParams) -> Result<Matrix> {
    if h1.shape() != h2.shape() {
        return Err(Error::Shape(format!(
            "fuse shape mismatch: {}x{} vs {}x{}",
            h1.rows(),
            h1.cols(),
            h2.rows(),
            h2.cols()
        )));
    }
    let alpha = params.alpha();
    let data: Vec<f64> = h1
        .data()
        .iter()
        .zip(h2.data())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    Matrix::from_vec(h1.rows(), h1.cols(), data)
}

/// Intermediates of a full fusion forward pass, kept for the backward.
#[derive(Debug, Clone)]
pub struct FusionForward {
    pub h1: Matrix,
    pub h2: Matrix,
    pub fused: Matrix,
}

/// Projects both raw streams and blends them: the complete forward pass.
pub fn fuse_features(f1: &Matrix, f2: &Matrix, params: &FusionParams) -> Result<FusionForward> {
    let h1 = project(f1, &params.projection_1)?;
    let h2 = project(f2, &params.projection_2)?;
    let fused = fuse(&h1, &h2, params)?;
    Ok(FusionForward { h1, h2, fused })
}

#[derive(Debug, Clone)]
pub struct ProjectionGradients {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionGradients {
    pub alpha_logit: f64,
    pub projection_1: ProjectionGradients,
    pub projection_2: ProjectionGradients,
    pub input_1: Matrix,
    pub input_2: Matrix,
}

/// Backward pass through projection + fusion for an upstream gradient of
/// the same shape as the fused output.
///
/// The gate gradient is `sigma'(a) * sum_ij upstream_ij (h1_ij - h2_ij)`;
/// projection and input gradients follow by the chain rule through
/// [`project`].
pub fn fusion_backward(
    f1: &Matrix,
    f2: &Matrix,
    params: &FusionParams,
    upstream: &Matrix,
) -> Result<FusionGradients> {
    let forward = fuse_features(f1, f2, params)?;
    if upstream.shape() != forward.fused.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{} but fused output is {}x{}",
            upstream.rows(),
            upstream.cols(),
            forward.fused.rows(),
            forward.fused.cols()
        )));
    }
    let alpha = params.alpha();
    let gate_sensitivity = alpha * (1.0 - alpha);
    let diff = forward.h1.sub(&forward.h2)?;
    let d_alpha_logit = gate_sensitivity * upstream.frob_dot(&diff)?;

    let d_h1 = upstream.scale(alpha)?;
    let d_h2 = upstream.scale(1.0 - alpha)?;

    let project_backward = |f: &Matrix, p: &ProjectionParams, d_h: &Matrix| -> Result<(ProjectionGradients, Matrix)> {
        let d_weight = f.transpose().matmul(d_h)?;
        let mut d_bias = vec![0.0; p.bias.len()];
        for r in 0..d_h.rows() {
            for (c, acc) in d_bias.iter_mut().enumerate() {
                *acc += d_h.get(r, c);
            }
        }
        let d_input = d_h.matmul(&p.weight.transpose())?;
        Ok((ProjectionGradients { weight: d_weight, bias: d_bias }, d_input))
    };

    let (g1, d_f1) = project_backward(f1, &params.projection_1, &d_h1)?;
    let (g2, d_f2) = project_backward(f2, &params.projection_2, &d_h2)?;

    Ok(FusionGradients {
        alpha_logit: d_alpha_logit,
        projection_1: g1,
        projection_2: g2,
        input_1: d_f1,
        input_2: d_f2,
    })
}

/// Random fusion parameters for tests and audits.
pub fn random_params(d_enc1: usize, d_enc2: usize, d_out: usize, seed: u64) -> FusionParams {
    let mut rng = seeding::rng(seed, "fusion-init", 0);
    let alpha_logit = rng.random_range(-1.5..1.5);
    let projection_1 = ProjectionParams::random(d_enc1, d_out, &mut rng);
    let projection_2 = ProjectionParams::random(d_enc2, d_out, &mut rng);
    FusionParams { alpha_logit, projection_1, projection_2 }
}

// keep `outer` linked for modules that build rank-one projection updates
#[allow(dead_code)]
fn _rank_one(u: &[f64], v: &[f64]) -> Matrix {
    outer(u, v)
}

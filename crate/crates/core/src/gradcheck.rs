//! Repository-wide gradient audit.
//!
//! Rebuilds each trainable module at small dimensions over several seeds,
//! computes its analytic gradients, and compares every coordinate against
//! central differences of the corresponding scalar loss. One report row
//! per parameter group, aggregated over seeds.

use rand::Rng;

use crate::error::Result;
use crate::fusion::{self, FusionParams, ProjectionParams};
use crate::lm::{self, LmExample, LowRankAdapter, TokenSequence, ToyLmParams};
use crate::num::{check_gradients, dot, finite_diff_grad, softmax, GradReport, Matrix};
use crate::sampler::{
    adr_loss, normalize_scores, score_group, AttentionScorerParams, RedundantGroup, ScoreKind,
    ScorerParams,
};
use crate::seeding;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 10;
const FD_STEP: f64 = 1e-5;

struct Accumulator {
    rows: Vec<GradReport>,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator { rows: Vec::new() }
    }

    fn record(
        &mut self,
        name: &str,
        analytic: &[f64],
        numeric: &[f64],
        tol: f64,
        corrupt: Option<&str>,
    ) -> Result<()> {
        let mut analytic = analytic.to_vec();
        if corrupt == Some(name) {
            analytic[0] += 1e-2;
        }
        let report = check_gradients(name, &analytic, numeric, tol)?;
        match self.rows.iter_mut().find(|r| r.parameter_name == name) {
            Some(row) => {
                row.max_relative_error = row.max_relative_error.max(report.max_relative_error);
                row.num_entries_checked += report.num_entries_checked;
                row.pass = row.pass && report.pass;
            }
            None => self.rows.push(report),
        }
        Ok(())
    }
}

fn rand_matrix(rng: &mut rand_chacha::ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite")
}

fn audit_fusion(acc: &mut Accumulator, seed: u64, tol: f64, corrupt: Option<&str>) -> Result<()> {
    let (m, d1, d2, d_out) = (3, 4, 5, 3);
    let params = fusion::random_params(d1, d2, d_out, seed);
    let mut rng = seeding::rng(seed, "audit-fusion", 0);
    let f1 = rand_matrix(&mut rng, m, d1);
    let f2 = rand_matrix(&mut rng, m, d2);
    let upstream = rand_matrix(&mut rng, m, d_out);

    let grads = fusion::fusion_backward(&f1, &f2, &params, &upstream)?;

    let rebuild = |alpha_logit: f64, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]| -> FusionParams {
        FusionParams::new(
            alpha_logit,
            ProjectionParams::new(Matrix::from_vec(d1, d_out, w1.to_vec()).unwrap(), b1.to_vec())
                .unwrap(),
            ProjectionParams::new(Matrix::from_vec(d2, d_out, w2.to_vec()).unwrap(), b2.to_vec())
                .unwrap(),
        )
        .unwrap()
    };
    let base = (
        params.alpha_logit,
        params.projection_1.weight.data().to_vec(),
        params.projection_1.bias.clone(),
        params.projection_2.weight.data().to_vec(),
        params.projection_2.bias.clone(),
    );
    let loss = |p: &FusionParams| -> f64 {
        let out = fusion::fuse_features(&f1, &f2, p).unwrap();
        upstream.frob_dot(&out.fused).unwrap()
    };

    let n_alpha = finite_diff_grad(
        |x| loss(&rebuild(x[0], &base.1, &base.2, &base.3, &base.4)),
        &[base.0],
        FD_STEP,
    )?;
    acc.record("fusion.alpha_logit", &[grads.alpha_logit], &n_alpha, tol, corrupt)?;

    let n_w1 = finite_diff_grad(
        |x| loss(&rebuild(base.0, x, &base.2, &base.3, &base.4)),
        &base.1,
        FD_STEP,
    )?;
    acc.record("fusion.projection_1.weight", grads.projection_1.weight.data(), &n_w1, tol, corrupt)?;

    let n_b1 = finite_diff_grad(
        |x| loss(&rebuild(base.0, &base.1, x, &base.3, &base.4)),
        &base.2,
        FD_STEP,
    )?;
    acc.record("fusion.projection_1.bias", &grads.projection_1.bias, &n_b1, tol, corrupt)?;

    let n_w2 = finite_diff_grad(
        |x| loss(&rebuild(base.0, &base.1, &base.2, x, &base.4)),
        &base.3,
        FD_STEP,
    )?;
    acc.record("fusion.projection_2.weight", grads.projection_2.weight.data(), &n_w2, tol, corrupt)?;

    let n_b2 = finite_diff_grad(
        |x| loss(&rebuild(base.0, &base.1, &base.2, &base.3, x)),
        &base.4,
        FD_STEP,
    )?;
    acc.record("fusion.projection_2.bias", &grads.projection_2.bias, &n_b2, tol, corrupt)?;
    Ok(())
}

fn audit_sampler(acc: &mut Accumulator, seed: u64, tol: f64, corrupt: Option<&str>) -> Result<()> {
    let (k, m, d) = (3, 2, 4);
    let mut rng = seeding::rng(seed, "audit-sampler", 0);
    let images: Vec<Matrix> = (0..k).map(|_| rand_matrix(&mut rng, m, d)).collect();
    let text = rand_matrix(&mut rng, m, d);
    let group = RedundantGroup::new("audit".into(), images, text, Some(0))?;
    let w0: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let params = ScorerParams { w: w0.clone(), attention: AttentionScorerParams::identity(d, 1)? };
    let temperature = 0.9;

    let attn = score_group(&group, &params, ScoreKind::Attention)?;
    let pooled: Vec<Vec<f64>> = group.image_features.iter().map(|m| m.mean_over_rows()).collect();
    let p = normalize_scores(&attn.raw, temperature)?;
    let raw: Vec<f64> = pooled.iter().map(|h| dot(h, &w0)).collect();
    let q = softmax(&raw, temperature)?;
    let mut analytic = vec![0.0; d];
    for (i, h) in pooled.iter().enumerate() {
        let coeff = (q[i] - p[i]) / temperature;
        for (a, &hv) in analytic.iter_mut().zip(h) {
            *a += coeff * hv;
        }
    }

    let numeric = finite_diff_grad(
        |w| {
            let raw: Vec<f64> = pooled.iter().map(|h| dot(h, w)).collect();
            adr_loss(&attn.raw, &raw, temperature).unwrap()
        },
        &w0,
        1e-6,
    )?;
    acc.record("sampler.w", &analytic, &numeric, tol, corrupt)
}

fn audit_toylm(acc: &mut Accumulator, seed: u64, tol: f64, corrupt: Option<&str>) -> Result<()> {
    let (vocab, d_e, d_k, d_v) = (6, 5, 3, 4);
    let mut params = ToyLmParams::init(vocab, d_e, d_k, d_v, 900 + seed)?;
    let mut rng = seeding::rng(seed, "audit-toylm", 0);
    // both adapter factors random: with b = 0 the gradient of a vanishes
    // identically and the check would be vacuous
    let adapter = LowRankAdapter::new(
        rand_matrix(&mut rng, d_e, 2),
        rand_matrix(&mut rng, 2, vocab),
        0.5,
    )?;
    params.adapters.insert("output_weight".into(), adapter);
    let batch: Vec<LmExample> = (0..2)
        .map(|_| LmExample {
            visual: rand_matrix(&mut rng, 2, d_v),
            instruction: TokenSequence::new((0..2).map(|_| rng.random_range(0..vocab)).collect()),
            answer: TokenSequence::new((0..3).map(|_| rng.random_range(0..vocab)).collect()),
        })
        .collect();

    let (_, grads) = lm::loss_and_gradients(&params, &batch)?;
    for name in params.trainable_parameters()? {
        let x0 = params.param_slice(&name)?.to_vec();
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.param_slice_mut(&name).unwrap().copy_from_slice(x);
                lm::teacher_forced_loss(&probe, &batch).unwrap()
            },
            &x0,
            FD_STEP,
        )?;
        acc.record(&format!("toylm.{name}"), &grads[&name], &numeric, tol, corrupt)?;
    }
    Ok(())
}

/// Runs the full audit over `n_seeds` random parameter points.
pub fn run_gradient_audit(n_seeds: usize, tol: f64) -> Result<Vec<GradReport>> {
    run_gradient_audit_with_corruption(n_seeds, tol, None)
}

/// Audit with an optional corruption hook: the named row's analytic
/// gradient is perturbed so the audit must flag it (negative control).
pub fn run_gradient_audit_with_corruption(
    n_seeds: usize,
    tol: f64,
    corrupt: Option<&str>,
) -> Result<Vec<GradReport>> {
    let mut acc = Accumulator::new();
    for seed in 0..n_seeds as u64 {
        audit_fusion(&mut acc, seed, tol, corrupt)?;
        audit_sampler(&mut acc, seed, tol, corrupt)?;
        audit_toylm(&mut acc, seed, tol, corrupt)?;
    }
    Ok(acc.rows)
}

//! Cross-module behavior on the planted-truth benchmarks: attention
//! oracle soundness, distillation transfer to held-out groups, and the
//! fused-vs-single-stream ablation direction.

use redfuse::datagen::{make_group, GroupSpec};
use redfuse::sampler::{
    mean_adr_loss, mean_attention_entropy, score_group, selection_accuracy, train_sampler,
    AttentionScorerParams, RedundantGroup, ScoreKind, ScoreVector, ScorerParams, TrainHyper,
};
use redfuse::seeding;
use redfuse::Matrix;

fn default_scorer(d: usize, d_k: usize, seed: u64) -> ScorerParams {
    let attention = AttentionScorerParams::shared_random(d, d_k, 1, seed).unwrap();
    ScorerParams::new(d, attention).unwrap()
}

fn generate(spec: &GroupSpec, count: u64) -> Vec<RedundantGroup> {
    (0..count).map(|i| make_group(spec, i).unwrap().group).collect()
}

#[test]
fn attention_oracle_is_perfect_without_noise() {
    // With sigma = 0 decoy directions are exactly orthogonal to the text
    // direction, so the exact-alignment oracle (identity weights, d_k = d)
    // must rank the planted image first in every group.
    let spec = GroupSpec { noise_sigma: 0.0, ..GroupSpec::default() };
    let groups = generate(&spec, 1000);
    let attention = AttentionScorerParams::identity(spec.d, 1).unwrap();
    let params = ScorerParams::new(spec.d, attention).unwrap();
    let acc = selection_accuracy(&groups, |g| score_group(g, &params, ScoreKind::Attention))
        .unwrap();
    assert_eq!(acc, 1.0, "noiseless oracle accuracy {acc}");
}

#[test]
fn attention_oracle_soundness_at_default_noise() {
    let spec = GroupSpec::default();
    let groups = generate(&spec, 1000);
    let params = default_scorer(spec.d, 16, spec.seed);
    let acc = selection_accuracy(&groups, |g| score_group(g, &params, ScoreKind::Attention))
        .unwrap();
    assert!(acc >= 0.98, "oracle accuracy {acc} below 0.98");
}

#[test]
fn random_feature_weights_select_at_chance() {
    use rand::Rng;
    let spec = GroupSpec::default();
    let groups = generate(&spec, 1000);
    let mut rng = seeding::rng(99, "random-w", 0);
    let mut params = default_scorer(spec.d, 16, spec.seed);
    for w in &mut params.w {
        *w = rng.random_range(-1.0..1.0);
    }
    let acc =
        selection_accuracy(&groups, |g| score_group(g, &params, ScoreKind::Feature)).unwrap();
    let chance = 1.0 / spec.k as f64;
    assert!(
        (acc - chance).abs() <= 0.1,
        "random-w accuracy {acc} not within 0.1 of {chance}"
    );
}

#[test]
fn distillation_transfers_to_held_out_groups() {
    let spec = GroupSpec::default();
    let all = generate(&spec, 700);
    let (train, held_out) = all.split_at(500);
    let params = default_scorer(spec.d, 16, spec.seed);
    let hyper = TrainHyper::default();

    let untrained_acc =
        selection_accuracy(held_out, |g| score_group(g, &params, ScoreKind::Feature)).unwrap();
    assert!(
        (untrained_acc - 0.125).abs() <= 0.10,
        "untrained accuracy {untrained_acc} outside 0.125 +/- 0.10"
    );

    let (trained, history) = train_sampler(train, &params, &hyper).unwrap();
    assert_eq!(history.len(), hyper.steps);

    let acc =
        selection_accuracy(held_out, |g| score_group(g, &trained, ScoreKind::Feature)).unwrap();
    assert!(acc >= 0.90, "held-out accuracy {acc} after distillation");

    let final_loss = mean_adr_loss(train, &trained, hyper.temperature).unwrap();
    let floor = mean_attention_entropy(train, &trained, hyper.temperature).unwrap();
    assert!(
        final_loss <= floor + 0.05,
        "final train loss {final_loss} above floor {floor} + 0.05"
    );
    // training should not have increased the loss
    assert!(history.last().unwrap() <= history.first().unwrap());
}

#[test]
fn trained_selection_ignores_text_features() {
    let spec = GroupSpec { k: 4, ..GroupSpec::default() };
    let all = generate(&spec, 120);
    let (train, held_out) = all.split_at(100);
    let params = default_scorer(spec.d, 16, spec.seed);
    let (trained, _) = train_sampler(train, &params, &TrainHyper::default()).unwrap();

    let zeroed: Vec<RedundantGroup> = held_out
        .iter()
        .map(|g| {
            let text = Matrix::zeros(g.text_features.rows(), g.text_features.cols());
            RedundantGroup::new(
                g.group_id.clone(),
                g.image_features.clone(),
                text,
                g.planted_valid_index,
            )
            .unwrap()
        })
        .collect();

    for (a, b) in held_out.iter().zip(&zeroed) {
        let sa = score_group(a, &trained, ScoreKind::Feature).unwrap();
        let sb = score_group(b, &trained, ScoreKind::Feature).unwrap();
        assert_eq!(sa.raw, sb.raw, "feature scores depend on text features");
    }
}

/// Scores a group view under the attention oracle.
fn oracle_scores(
    images: &[Matrix],
    text: &Matrix,
    params: &ScorerParams,
) -> redfuse::Result<ScoreVector> {
    let group = RedundantGroup::new(
        "view".into(),
        images.to_vec(),
        text.clone(),
        Some(0),
    )?;
    score_group(&group, params, ScoreKind::Attention)
}

#[test]
fn fused_features_beat_either_single_stream() {
    let spec = GroupSpec { complementary: true, ..GroupSpec::default() };
    let params = default_scorer(spec.d, 16, spec.seed);
    let gate = redfuse::fusion::FusionParams::new(
        0.0,
        redfuse::fusion::ProjectionParams::identity(spec.d),
        redfuse::fusion::ProjectionParams::identity(spec.d),
    )
    .unwrap();

    let mut hits = [0usize; 3]; // fused, stream1, stream2
    let n = 1000u64;
    for idx in 0..n {
        let generated = make_group(&spec, idx).unwrap();
        let planted = generated.group.planted_valid_index.unwrap();
        let text = &generated.group.text_features;

        let fused: Vec<Matrix> = generated
            .streams
            .iter()
            .map(|s| {
                redfuse::fusion::fuse_features(&s.stream1, &s.stream2, &gate)
                    .unwrap()
                    .fused
            })
            .collect();
        // the half-half gate over identity projections reconstructs the
        // group features exactly
        for (f, g) in fused.iter().zip(&generated.group.image_features) {
            assert_eq!(f, g);
        }
        let s1: Vec<Matrix> = generated.streams.iter().map(|s| s.stream1.clone()).collect();
        let s2: Vec<Matrix> = generated.streams.iter().map(|s| s.stream2.clone()).collect();

        for (slot, view) in [fused, s1, s2].iter().enumerate() {
            let scores = oracle_scores(view, text, &params).unwrap();
            if redfuse::sampler::select_valid(&scores).unwrap() == planted {
                hits[slot] += 1;
            }
        }
    }
    let acc: Vec<f64> = hits.iter().map(|h| *h as f64 / n as f64).collect();
    assert!(
        acc[0] >= acc[1] + 0.10 && acc[0] >= acc[2] + 0.10,
        "fused {} vs streams {} / {}",
        acc[0],
        acc[1],
        acc[2]
    );
}

//! Synthetic benchmark generation.
//!
//! Groups are built around a planted "text direction": the valid image's
//! tokens cluster around it, decoys sit in directions orthogonal to it,
//! and the generator records which index is valid. Selection accuracy on
//! these groups is therefore an exact measurement, not a proxy.
//!
//! Per-group text directions share a dataset-wide component (with a small
//! jitter), so a single learned channel-weight vector can transfer from
//! training groups to held-out groups.
//!
//! The module also builds instruction-following conversation records and
//! their exact byte serialization.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FeatureRecord;
use crate::num::{dot, Matrix};
use crate::sampler::{GroupRecord, RedundantGroup};
use crate::seeding;

pub use crate::jsonl::{read_jsonl, write_jsonl};

/// How far per-group text directions wander from the dataset-wide
/// direction (relative Gaussian jitter before renormalization).
const DIRECTION_JITTER: f64 = 0.25;

/// Configuration for one synthetic dataset. Generation is a pure
/// function of this value plus the group index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    /// Images per group.
    pub k: usize,
    /// Tokens per feature matrix.
    pub m: usize,
    /// Channels of the group (fused-space) features.
    pub d: usize,
    /// Channels of the two raw encoder streams.
    pub d_enc1: usize,
    pub d_enc2: usize,
    pub noise_sigma: f64,
    /// Split the planted signal across the two streams (even channels in
    /// stream 1, odd channels in stream 2) so that neither stream alone
    /// identifies the valid image.
    pub complementary: bool,
    pub seed: u64,
}

impl Default for GroupSpec {
    fn default() -> Self {
        GroupSpec {
            k: 8,
            m: 4,
            d: 32,
            d_enc1: 32,
            d_enc2: 32,
            noise_sigma: 0.1,
            complementary: false,
            seed: 0,
        }
    }
}

impl GroupSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("d must be at least 2, got {}", self.d)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be a finite nonnegative value, got {}",
                self.noise_sigma
            )));
        }
        if self.d_enc1 < self.d || self.d_enc2 < self.d {
            return Err(Error::Config(format!(
                "stream channels ({}, {}) must be at least d = {}",
                self.d_enc1, self.d_enc2, self.d
            )));
        }
        if self.complementary && (self.d_enc1 != self.d || self.d_enc2 != self.d) {
            return Err(Error::Config(
                "complementary mode requires d_enc1 == d_enc2 == d".into(),
            ));
        }
        Ok(())
    }
}

/// Raw per-image encoder streams alongside the group's fused features.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStreams {
    pub image_id: String,
    pub stream1: Matrix,
    pub stream2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedGroup {
    pub group: RedundantGroup,
    pub streams: Vec<ImageStreams>,
}

impl GeneratedGroup {
    pub fn to_record(&self) -> GroupRecord {
        GroupRecord {
            group_id: self.group.group_id.clone(),
            text_features: self.group.text_features.clone(),
            images: self
                .streams
                .iter()
                .zip(&self.group.image_features)
                .map(|(s, features)| FeatureRecord {
                    image_id: s.image_id.clone(),
                    features: features.clone(),
                })
                .collect(),
            valid_index: self.group.planted_valid_index,
        }
    }

    pub fn stream_records(&self, which: usize) -> Vec<FeatureRecord> {
        self.streams
            .iter()
            .map(|s| FeatureRecord {
                image_id: s.image_id.clone(),
                features: if which == 1 { s.stream1.clone() } else { s.stream2.clone() },
            })
            .collect()
    }
}

fn gauss_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = dot(v, v).sqrt();
    if norm < 1e-9 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

fn mask_parity(v: &mut [f64], keep_even: bool) {
    for (i, x) in v.iter_mut().enumerate() {
        if (i % 2 == 0) != keep_even {
            *x = 0.0;
        }
    }
}

/// Unit vector along `base + DIRECTION_JITTER * noise`, optionally
/// restricted to one channel parity.
fn jittered_unit(rng: &mut ChaCha20Rng, base: &[f64], parity: Option<bool>) -> Vec<f64> {
    loop {
        let mut v = gauss_vec(rng, base.len());
        if let Some(keep_even) = parity {
            mask_parity(&mut v, keep_even);
        }
        for (x, b) in v.iter_mut().zip(base) {
            *x = b + DIRECTION_JITTER * *x;
        }
        if normalize(&mut v) {
            return v;
        }
    }
}

/// Unit vector orthogonal to `against`, optionally parity-restricted.
fn orthogonal_unit(rng: &mut ChaCha20Rng, against: &[f64], parity: Option<bool>) -> Vec<f64> {
    loop {
        let mut v = gauss_vec(rng, against.len());
        if let Some(keep_even) = parity {
            mask_parity(&mut v, keep_even);
        }
        let proj = dot(&v, against);
        for (x, a) in v.iter_mut().zip(against) {
            *x -= proj * a;
        }
        if normalize(&mut v) {
            return v;
        }
    }
}

fn unit_direction(rng: &mut ChaCha20Rng, d: usize, parity: Option<bool>) -> Vec<f64> {
    loop {
        let mut v = gauss_vec(rng, d);
        if let Some(keep_even) = parity {
            mask_parity(&mut v, keep_even);
        }
        if normalize(&mut v) {
            return v;
        }
    }
}

/// Builds one redundant group plus its two raw encoder streams.
///
/// Fully determined by `(spec, group_index)`. The group's fused-space
/// features are exactly the average of the two streams' first `d`
/// channels, so blending the streams with a half-half gate reconstructs
/// them bit-for-bit.
pub fn make_group(spec: &GroupSpec, group_index: u64) -> Result<GeneratedGroup> {
    spec.validate()?;
    let sigma = spec.noise_sigma;

    // dataset-wide direction(s), a function of the seed alone
    let mut dir_rng = seeding::rng(spec.seed, "direction", 0);
    let (base_even, base_odd, base_full);
    if spec.complementary {
        base_even = unit_direction(&mut dir_rng, spec.d, Some(true));
        base_odd = unit_direction(&mut dir_rng, spec.d, Some(false));
        base_full = Vec::new();
    } else {
        base_even = Vec::new();
        base_odd = Vec::new();
        base_full = unit_direction(&mut dir_rng, spec.d, None);
    }

    let mut rng = seeding::rng(spec.seed, "group", group_index);

    // group text direction
    let (text_even, text_odd, text_dir);
    if spec.complementary {
        text_even = jittered_unit(&mut rng, &base_even, Some(true));
        text_odd = jittered_unit(&mut rng, &base_odd, Some(false));
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        text_dir = text_even
            .iter()
            .zip(&text_odd)
            .map(|(e, o)| (e + o) * inv_sqrt2)
            .collect::<Vec<f64>>();
    } else {
        text_even = Vec::new();
        text_odd = Vec::new();
        text_dir = jittered_unit(&mut rng, &base_full, None);
    }

    let valid = rng.random_range(0..spec.k);
    let even_match_decoys = spec.k / 2; // ambiguous share per stream

    let mut image_features = Vec::with_capacity(spec.k);
    let mut streams = Vec::with_capacity(spec.k);
    let mut decoy_ordinal = 0usize;
    for i in 0..spec.k {
        let dir: Vec<f64> = if i == valid {
            text_dir.clone()
        } else if spec.complementary {
            let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
            let matched_even = decoy_ordinal < even_match_decoys;
            decoy_ordinal += 1;
            if matched_even {
                let r_odd = orthogonal_unit(&mut rng, &text_odd, Some(false));
                text_even.iter().zip(&r_odd).map(|(e, o)| (e + o) * inv_sqrt2).collect()
            } else {
                let r_even = orthogonal_unit(&mut rng, &text_even, Some(true));
                r_even.iter().zip(&text_odd).map(|(e, o)| (e + o) * inv_sqrt2).collect()
            }
        } else {
            decoy_ordinal += 1;
            orthogonal_unit(&mut rng, &text_dir, None)
        };

        // per-token streams; the group features are their first-d average
        let mut s1 = Vec::with_capacity(spec.m * spec.d_enc1);
        let mut s2 = Vec::with_capacity(spec.m * spec.d_enc2);
        let mut fused = Vec::with_capacity(spec.m * spec.d);
        for _ in 0..spec.m {
            let n1 = gauss_vec(&mut rng, spec.d_enc1);
            let n2 = gauss_vec(&mut rng, spec.d_enc2);
            let mut row1 = vec![0.0; spec.d_enc1];
            let mut row2 = vec![0.0; spec.d_enc2];
            for c in 0..spec.d_enc1 {
                let signal = if c < spec.d {
                    if spec.complementary {
                        if c % 2 == 0 { 2.0 * dir[c] } else { 0.0 }
                    } else {
                        dir[c]
                    }
                } else {
                    0.0
                };
                row1[c] = signal + sigma * n1[c];
            }
            for c in 0..spec.d_enc2 {
                let signal = if c < spec.d {
                    if spec.complementary {
                        if c % 2 == 1 { 2.0 * dir[c] } else { 0.0 }
                    } else {
                        dir[c]
                    }
                } else {
                    0.0
                };
                row2[c] = signal + sigma * n2[c];
            }
            for c in 0..spec.d {
                fused.push((row1[c] + row2[c]) / 2.0);
            }
            s1.extend_from_slice(&row1);
            s2.extend_from_slice(&row2);
        }
        image_features.push(Matrix::from_vec(spec.m, spec.d, fused)?);
        streams.push(ImageStreams {
            image_id: format!("g{group_index:06}-i{i}"),
            stream1: Matrix::from_vec(spec.m, spec.d_enc1, s1)?,
            stream2: Matrix::from_vec(spec.m, spec.d_enc2, s2)?,
        });
    }

    let mut text = Vec::with_capacity(spec.m * spec.d);
    for _ in 0..spec.m {
        let noise = gauss_vec(&mut rng, spec.d);
        for c in 0..spec.d {
            text.push(text_dir[c] + sigma * noise[c]);
        }
    }

    let group = RedundantGroup::new(
        format!("g{group_index:06}"),
        image_features,
        Matrix::from_vec(spec.m, spec.d, text)?,
        Some(valid),
    )?;
    Ok(GeneratedGroup { group, streams })
}

// ---------------------------------------------------------------------------
// instruction records
// ---------------------------------------------------------------------------

pub const STOP_TOKEN: &str = "<STOP>";

/// Whether the question names the examination site or asks a generalized
/// question (with the site expected in the answer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionMode {
    #[serde(rename = "site-cue")]
    SiteCue,
    #[serde(rename = "no-cue")]
    NoCue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub question: String,
    pub image_ids: Vec<String>,
    pub answer: String,
    pub question_mode: QuestionMode,
    pub site: Option<String>,
}

/// Site-cue question templates; `{}` is the site slot.
const SITE_CUE_TEMPLATES: &[(&str, &str)] = &[
    ("What does the ", " ultrasound show?"),
    ("Describe the sonographic findings for the ", "."),
    ("Give the diagnosis for this ", " examination."),
];

const NO_CUE_TEMPLATES: &[&str] = &[
    "What does this ultrasound show?",
    "Describe the sonographic findings in these images.",
    "Give the diagnosis of this ultrasound image.",
];

/// Examination sites used by the synthetic caption generator.
pub const SITES: &[&str] =
    &["thyroid", "liver", "kidney", "breast", "heart", "uterus", "prostate", "carotid"];

const FINDINGS: &[&str] = &[
    "a hypoechoic nodule with well-defined margins",
    "an anechoic cyst with posterior enhancement",
    "a heterogeneous mass with irregular borders",
    "diffusely increased parenchymal echogenicity",
    "multiple calcified foci with acoustic shadowing",
    "no focal lesion",
];

/// Deterministic (site, caption) pair for a group. The caption names the
/// site, so no-cue records still carry it in the answer.
pub fn synthetic_caption(seed: u64, group_index: u64) -> (String, String) {
    let mut rng = seeding::rng(seed, "caption", group_index);
    let site = SITES[rng.random_range(0..SITES.len())];
    let finding = FINDINGS[rng.random_range(0..FINDINGS.len())];
    (site.to_string(), format!("The {site} ultrasound shows {finding}."))
}

/// Builds a conversation record from a caption and its image references.
/// The question is drawn deterministically from a fixed pool keyed by the
/// caption.
pub fn build_instruction_record(
    caption: &str,
    image_ids: &[String],
    mode: QuestionMode,
    site: Option<&str>,
) -> Result<InstructionRecord> {
    if caption.is_empty() {
        return Err(Error::Domain("caption must be nonempty".into()));
    }
    if image_ids.is_empty() {
        return Err(Error::Domain("record needs at least one image reference".into()));
    }
    let pick = seeding::fnv1a(caption.as_bytes()) as usize;
    let question = match (mode, site) {
        (QuestionMode::SiteCue, Some(site)) => {
            if site.is_empty() {
                return Err(Error::Domain("site-cue mode requires a nonempty site".into()));
            }
            let (prefix, suffix) = SITE_CUE_TEMPLATES[pick % SITE_CUE_TEMPLATES.len()];
            format!("{prefix}{site}{suffix}")
        }
        (QuestionMode::SiteCue, None) => {
            return Err(Error::Domain("site-cue mode requires a site".into()));
        }
        (QuestionMode::NoCue, None) => NO_CUE_TEMPLATES[pick % NO_CUE_TEMPLATES.len()].to_string(),
        (QuestionMode::NoCue, Some(_)) => {
            return Err(Error::Domain("no-cue mode must not carry a site".into()));
        }
    };
    Ok(InstructionRecord {
        question,
        image_ids: image_ids.to_vec(),
        answer: caption.to_string(),
        question_mode: mode,
        site: site.map(str::to_string),
    })
}

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::Domain(format!("{name} must be nonempty")));
    }
    for reserved in [STOP_TOKEN, "<img:", "\n"] {
        if value.contains(reserved) {
            return Err(Error::Domain(format!("{name} contains reserved sequence {reserved:?}")));
        }
    }
    Ok(())
}

/// Exact byte serialization:
/// `Human: {question} <img:a> <img:b><STOP>\nAssistant: {answer}<STOP>\n`
/// with single spaces between the question and each image token.
pub fn serialize_conversation(record: &InstructionRecord) -> Result<String> {
    check_field("question", &record.question)?;
    check_field("answer", &record.answer)?;
    if record.image_ids.is_empty() {
        return Err(Error::Domain("record has no image references".into()));
    }
    let mut out = String::from("Human: ");
    out.push_str(&record.question);
    for id in &record.image_ids {
        check_field("image id", id)?;
        if id.contains('>') || id.contains(' ') {
            return Err(Error::Domain(format!("image id {id:?} contains '>' or a space")));
        }
        out.push_str(" <img:");
        out.push_str(id);
        out.push('>');
    }
    out.push_str(STOP_TOKEN);
    out.push_str("\nAssistant: ");
    out.push_str(&record.answer);
    out.push_str(STOP_TOKEN);
    out.push('\n');
    Ok(out)
}

/// Inverse of [`serialize_conversation`]. The question mode and site are
/// recovered by matching against the fixed question pools; questions
/// outside the pools parse as no-cue.
pub fn parse_conversation(text: &str) -> Result<InstructionRecord> {
    let bad = |msg: &str| Error::Domain(format!("conversation does not match template: {msg}"));
    let body = text.strip_prefix("Human: ").ok_or_else(|| bad("missing 'Human: ' prefix"))?;
    let divider = "<STOP>\nAssistant: ";
    let split = body.find(divider).ok_or_else(|| bad("missing Assistant section"))?;
    let human = &body[..split];
    let answer = body[split + divider.len()..]
        .strip_suffix("<STOP>\n")
        .ok_or_else(|| bad("missing trailing <STOP>"))?;
    if answer.is_empty() || answer.contains(STOP_TOKEN) {
        return Err(bad("malformed answer"));
    }

    let first_img = human.find(" <img:").ok_or_else(|| bad("no image references"))?;
    let question = &human[..first_img];
    if question.is_empty() {
        return Err(bad("empty question"));
    }
    let mut image_ids = Vec::new();
    for token in human[first_img + 1..].split(' ') {
        let id = token
            .strip_prefix("<img:")
            .and_then(|t| t.strip_suffix('>'))
            .ok_or_else(|| bad("malformed image token"))?;
        if id.is_empty() {
            return Err(bad("empty image id"));
        }
        image_ids.push(id.to_string());
    }

    let (question_mode, site) = classify_question(question);
    Ok(InstructionRecord {
        question: question.to_string(),
        image_ids,
        answer: answer.to_string(),
        question_mode,
        site,
    })
}

fn classify_question(question: &str) -> (QuestionMode, Option<String>) {
    for (prefix, suffix) in SITE_CUE_TEMPLATES {
        if question.len() > prefix.len() + suffix.len()
            && question.starts_with(prefix)
            && question.ends_with(suffix)
        {
            let site = &question[prefix.len()..question.len() - suffix.len()];
            return (QuestionMode::SiteCue, Some(site.to_string()));
        }
    }
    (QuestionMode::NoCue, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{
        attention_score, score_group, selection_accuracy, AttentionScorerParams, ScoreKind,
        ScorerParams,
    };

    #[test]
    fn make_group_is_deterministic() {
        let spec = GroupSpec { k: 4, m: 3, d: 8, d_enc1: 8, d_enc2: 8, ..GroupSpec::default() };
        let a = make_group(&spec, 17).unwrap();
        let b = make_group(&spec, 17).unwrap();
        assert_eq!(a, b);
        let c = make_group(&spec, 18).unwrap();
        assert_ne!(a.group.image_features, c.group.image_features);
    }

    #[test]
    fn make_group_shapes_and_label() {
        let spec = GroupSpec {
            k: 5,
            m: 3,
            d: 6,
            d_enc1: 10,
            d_enc2: 7,
            ..GroupSpec::default()
        };
        let g = make_group(&spec, 0).unwrap();
        assert_eq!(g.group.k(), 5);
        assert_eq!(g.group.image_features[0].shape(), (3, 6));
        assert_eq!(g.group.text_features.shape(), (3, 6));
        assert_eq!(g.streams[0].stream1.shape(), (3, 10));
        assert_eq!(g.streams[0].stream2.shape(), (3, 7));
        assert!(g.group.planted_valid_index.unwrap() < 5);
    }

    #[test]
    fn group_spec_validation() {
        let mut spec = GroupSpec::default();
        spec.k = 1;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = GroupSpec::default();
        spec.noise_sigma = -0.5;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = GroupSpec::default();
        spec.complementary = true;
        spec.d_enc1 = spec.d + 2;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_groups_are_perfectly_separable() {
        let spec = GroupSpec { noise_sigma: 0.0, k: 6, d: 16, d_enc1: 16, d_enc2: 16, ..GroupSpec::default() };
        let attention = AttentionScorerParams::identity(16, 1).unwrap();
        let params = ScorerParams::new(16, attention).unwrap();
        let groups: Vec<RedundantGroup> =
            (0..100).map(|i| make_group(&spec, i).unwrap().group).collect();
        let acc = selection_accuracy(&groups, |g| {
            score_group(g, &params, ScoreKind::Attention)
        })
        .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn planted_separability_margin() {
        // mean cos(valid pooled, text dir) minus the decoy mean must clear 3 sigma
        let spec = GroupSpec::default();
        let mut valid_sum = 0.0;
        let mut decoy_sum = 0.0;
        let mut decoy_n = 0.0;
        let n = 200u64;
        for idx in 0..n {
            let g = make_group(&spec, idx).unwrap().group;
            let text_dir = {
                let mut t = g.text_features.mean_over_rows();
                assert!(normalize(&mut t));
                t
            };
            let planted = g.planted_valid_index.unwrap();
            for (i, img) in g.image_features.iter().enumerate() {
                let mut pooled = img.mean_over_rows();
                assert!(normalize(&mut pooled));
                let cos = dot(&pooled, &text_dir);
                if i == planted {
                    valid_sum += cos;
                } else {
                    decoy_sum += cos;
                    decoy_n += 1.0;
                }
            }
        }
        let margin = valid_sum / n as f64 - decoy_sum / decoy_n;
        assert!(
            margin >= 3.0 * spec.noise_sigma,
            "separability margin {margin} below {}",
            3.0 * spec.noise_sigma
        );
    }

    #[test]
    fn complementary_groups_split_signal_across_streams() {
        let spec = GroupSpec { complementary: true, noise_sigma: 0.0, ..GroupSpec::default() };
        let g = make_group(&spec, 3).unwrap();
        let planted = g.group.planted_valid_index.unwrap();
        // with sigma = 0, stream 1 carries signal only in even channels
        let s1 = &g.streams[planted].stream1;
        let s2 = &g.streams[planted].stream2;
        for c in 0..spec.d {
            if c % 2 == 1 {
                assert_eq!(s1.get(0, c), 0.0);
            } else {
                assert_eq!(s2.get(0, c), 0.0);
            }
        }
        // average of the streams reconstructs the fused features exactly
        let avg = s1.add(s2).unwrap().scale(0.5).unwrap();
        assert_eq!(&avg, &g.group.image_features[planted]);

        // stream 1 cannot tell the valid image from an even-matched decoy,
        // but the fused features can
        let attention = AttentionScorerParams::identity(spec.d, 1).unwrap();
        let text = &g.group.text_features;
        let valid_fused =
            attention_score(&g.group.image_features[planted], text, &attention).unwrap();
        let decoy_idx = if planted == 0 { 1 } else { 0 };
        let decoy_fused =
            attention_score(&g.group.image_features[decoy_idx], text, &attention).unwrap();
        assert!(valid_fused > decoy_fused);
    }

    #[test]
    fn build_record_site_cue_contains_site() {
        let ids = vec!["a".to_string()];
        let r = build_instruction_record("Caption.", &ids, QuestionMode::SiteCue, Some("thyroid"))
            .unwrap();
        assert!(r.question.contains("thyroid"));
        assert_eq!(r.site.as_deref(), Some("thyroid"));
    }

    #[test]
    fn build_record_no_cue_has_no_site() {
        let ids = vec!["a".to_string()];
        let r = build_instruction_record("Caption.", &ids, QuestionMode::NoCue, None).unwrap();
        for site in SITES {
            assert!(!r.question.contains(site), "question leaked site: {}", r.question);
        }
        assert!(r.site.is_none());
    }

    #[test]
    fn build_record_validates() {
        let ids = vec!["a".to_string()];
        assert!(build_instruction_record("", &ids, QuestionMode::NoCue, None).is_err());
        assert!(build_instruction_record("c", &[], QuestionMode::NoCue, None).is_err());
        assert!(build_instruction_record("c", &ids, QuestionMode::SiteCue, None).is_err());
        assert!(build_instruction_record("c", &ids, QuestionMode::NoCue, Some("x")).is_err());
    }

    #[test]
    fn serialize_exact_byte_layout() {
        let r = InstructionRecord {
            question: "Q".into(),
            image_ids: vec!["i1".into()],
            answer: "A".into(),
            question_mode: QuestionMode::NoCue,
            site: None,
        };
        assert_eq!(
            serialize_conversation(&r).unwrap(),
            "Human: Q <img:i1><STOP>\nAssistant: A<STOP>\n"
        );

        let r3 = InstructionRecord { image_ids: vec!["a".into(), "b".into(), "c".into()], ..r };
        assert_eq!(
            serialize_conversation(&r3).unwrap(),
            "Human: Q <img:a> <img:b> <img:c><STOP>\nAssistant: A<STOP>\n"
        );
    }

    #[test]
    fn serialize_rejects_empty_answer() {
        let r = InstructionRecord {
            question: "Q".into(),
            image_ids: vec!["i1".into()],
            answer: String::new(),
            question_mode: QuestionMode::NoCue,
            site: None,
        };
        assert!(matches!(serialize_conversation(&r), Err(Error::Domain(_))));
    }

    #[test]
    fn conversation_round_trip_over_random_records() {
        let mut rng = seeding::rng(4, "roundtrip", 0);
        for case in 0..100 {
            let k = rng.random_range(1..5);
            let ids: Vec<String> = (0..k).map(|i| format!("img{case}_{i}")).collect();
            let site = SITES[rng.random_range(0..SITES.len())];
            let caption = format!("The {site} scan shows finding {case}.");
            let mode = if rng.random_range(0..2) == 0 {
                QuestionMode::SiteCue
            } else {
                QuestionMode::NoCue
            };
            let site_arg = matches!(mode, QuestionMode::SiteCue).then_some(site);
            let record = build_instruction_record(&caption, &ids, mode, site_arg).unwrap();
            let text = serialize_conversation(&record).unwrap();
            let parsed = parse_conversation(&text).unwrap();
            assert_eq!(parsed, record);
        }
    }

    #[test]
    fn synthetic_caption_is_deterministic_and_names_site() {
        let (site, caption) = synthetic_caption(1, 5);
        assert_eq!(synthetic_caption(1, 5), (site.clone(), caption.clone()));
        assert!(caption.contains(&site));
    }
}

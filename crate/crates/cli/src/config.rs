//! Run configuration: one JSON document drives every subcommand.
//! Command-line flags (`--seed`, `--out`) override config keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use redfuse::datagen::GroupSpec;
use redfuse::lm::OptimizerKind;
use redfuse::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub group_spec: GroupSpecConfig,
    pub fusion: FusionConfig,
    pub sampler: SamplerConfig,
    pub toylm: ToyLmConfig,
    pub ablations: Ablations,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            group_spec: GroupSpecConfig::default(),
            fusion: FusionConfig::default(),
            sampler: SamplerConfig::default(),
            toylm: ToyLmConfig::default(),
            ablations: Ablations::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSpecConfig {
    /// Groups to generate.
    pub count: usize,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub d_enc1: usize,
    pub d_enc2: usize,
    pub noise_sigma: f64,
    pub complementary: bool,
}

impl Default for GroupSpecConfig {
    fn default() -> Self {
        GroupSpecConfig {
            count: 700,
            k: 8,
            m: 4,
            d: 32,
            d_enc1: 32,
            d_enc2: 32,
            noise_sigma: 0.1,
            complementary: false,
        }
    }
}

impl GroupSpecConfig {
    pub fn to_spec(&self, seed: u64) -> Result<GroupSpec> {
        let spec = GroupSpec {
            k: self.k,
            m: self.m,
            d: self.d,
            d_enc1: self.d_enc1,
            d_enc2: self.d_enc2,
            noise_sigma: self.noise_sigma,
            complementary: self.complementary,
            seed,
        };
        spec.validate()?;
        if self.count == 0 {
            return Err(Error::Config("group_spec.count must be positive".into()));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_out: usize,
    pub alpha_logit_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { d_out: 16, alpha_logit_init: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub n_layers: usize,
    pub d_k: usize,
    /// Multiplier on the distillation loss when the sampler trains inside
    /// a full run.
    pub adr_weight: f64,
    /// Leading groups used for training; the rest are held out.
    pub train_groups: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            lr: 1e-3,
            steps: 500,
            batch: 32,
            n_layers: 1,
            d_k: 16,
            adr_weight: 1.0,
            train_groups: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub d_k: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub optimizer: OptimizerKind,
    /// Token caps for the byte-fold encoding of questions and answers.
    pub instruction_len: usize,
    pub answer_len: usize,
    pub freeze: Vec<String>,
    /// Low-rank adapter on the output head; 0 disables it.
    pub adapter_rank: usize,
    pub adapter_scale: f64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            vocab: 64,
            embed_dim: 32,
            d_k: 16,
            lr: 1e-3,
            batch: 8,
            steps_stage1: 600,
            steps_stage2: 600,
            optimizer: OptimizerKind::Adam,
            instruction_len: 12,
            answer_len: 8,
            freeze: vec!["token_embedding".to_string()],
            adapter_rank: 0,
            adapter_scale: 1.0,
        }
    }
}

/// Structural switches mirroring the ablation rows: disabling one flag
/// removes exactly one mechanism from the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Off: route only stream-1 features through a single projection,
    /// bypassing fusion.
    pub visual_enhancement: bool,
    /// Off: the sampler stays untrained (channel weights at init).
    pub redundancy_adaptation: bool,
    /// Off: distillation targets become planted one-hot labels where
    /// available instead of attention pseudo-labels.
    pub attention_strategy: bool,
    /// Off: skip the second tuning stage.
    pub stage2: bool,
    /// Off: questions omit the examination site (no-cue variant).
    pub site_prompt: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            visual_enhancement: true,
            redundancy_adaptation: true,
            attention_strategy: true,
            stage2: true,
            site_prompt: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_dir: PathBuf::from("run") }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.group_spec.to_spec(self.seed)?;
        if !(self.sampler.lr > 0.0) || !(self.sampler.temperature > 0.0) {
            return Err(Error::Config(
                "sampler lr and temperature must be positive".into(),
            ));
        }
        if self.sampler.batch == 0 || self.sampler.d_k == 0 || self.sampler.n_layers == 0 {
            return Err(Error::Config("sampler batch, d_k, n_layers must be positive".into()));
        }
        if !(self.sampler.adr_weight > 0.0) {
            return Err(Error::Config("sampler adr_weight must be positive".into()));
        }
        if self.sampler.train_groups == 0 || self.sampler.train_groups > self.group_spec.count {
            return Err(Error::Config(format!(
                "sampler.train_groups must be in 1..={}, got {}",
                self.group_spec.count, self.sampler.train_groups
            )));
        }
        if self.toylm.vocab < 2 || self.toylm.embed_dim == 0 || self.toylm.d_k == 0 {
            return Err(Error::Config("toylm vocab, embed_dim, d_k must be positive".into()));
        }
        if self.toylm.instruction_len == 0 || self.toylm.answer_len == 0 {
            return Err(Error::Config("toylm token caps must be positive".into()));
        }
        if !(self.toylm.lr > 0.0) {
            return Err(Error::Config("toylm lr must be positive".into()));
        }
        if self.fusion.d_out == 0 {
            return Err(Error::Config("fusion d_out must be positive".into()));
        }
        if !self.ablations.visual_enhancement && self.group_spec.d_enc1 != self.group_spec.d {
            return Err(Error::Config(
                "disabling visual_enhancement requires d_enc1 == d (single-stream view feeds the scorers directly)"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, RunConfig::default());
        let partial: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "group_spec": {"k": 4}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.group_spec.k, 4);
        assert_eq!(partial.group_spec.m, GroupSpecConfig::default().m);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sedd": 7}"#);
        assert!(err.is_err());
    }

    #[test]
    fn invalid_k_fails_validation() {
        let config: RunConfig = serde_json::from_str(r#"{"group_spec": {"k": 1}}"#).unwrap();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}

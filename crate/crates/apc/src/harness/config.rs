//! Run configuration: one JSON document covering the world, model, losses,
//! optimizer, ablation flags and seeds. Unknown keys are rejected and every
//! field is validated before any work starts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apg::{PcmSource, CAPTION_ID_BASE};
use crate::encoders::EncoderDims;
use crate::error::{Error, Result};
use crate::synthworld::WorldSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub images_per_identity_per_domain: usize,
    pub queries_per_identity: usize,
    pub train_identity_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            images_per_identity_per_domain: 8,
            queries_per_identity: 2,
            train_identity_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Domains seen in training.
    pub train_domains: Vec<usize>,
    /// Evaluation domains. Empty means the unseen complement of the train
    /// domains; equal to `train_domains` gives the single-domain setting.
    pub test_domains: Vec<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            train_domains: vec![0, 1],
            test_domains: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub visual_dim: usize,
    pub cross_modal_dim: usize,
    pub token_dim: usize,
    pub visual_blocks: usize,
    pub visual_heads: usize,
    pub text_blocks: usize,
    pub vocab_size: usize,
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            visual_dim: 64,
            cross_modal_dim: 32,
            token_dim: 32,
            visual_blocks: 2,
            visual_heads: 2,
            text_blocks: 2,
            vocab_size: 32,
            positional: true,
        }
    }
}

impl EncoderConfig {
    pub fn dims(&self, world: &WorldSpec) -> EncoderDims {
        EncoderDims {
            input_dim: world.input_dim,
            visual_dim: self.visual_dim,
            cross_modal_dim: self.cross_modal_dim,
            token_dim: self.token_dim,
            tokens_per_image: world.tokens_per_image,
            visual_blocks: self.visual_blocks,
            visual_heads: self.visual_heads,
            text_blocks: self.text_blocks,
            vocab_size: self.vocab_size,
            num_cameras: world.num_cameras,
            positional: self.positional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SadConfig {
    /// Attribute count S.
    pub attribute_count: usize,
    /// Learnable tokens per attribute L.
    pub tokens_per_attribute: usize,
    /// Hard gate width K.
    pub top_k: usize,
}

impl Default for SadConfig {
    fn default() -> Self {
        SadConfig {
            attribute_count: 32,
            tokens_per_attribute: 4,
            top_k: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcmConfig {
    /// Attention dimension d.
    pub dim: usize,
    /// Which visual sequence stage 1 consumes.
    pub source: PcmSource,
}

impl Default for PcmConfig {
    fn default() -> Self {
        PcmConfig {
            dim: 32,
            source: PcmSource::Projected,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FstsConfig {
    /// EMA momentum m.
    pub momentum: f64,
    /// Steps between slow updates; 0 means once per epoch.
    pub slow_update_interval: usize,
    /// Contrastive temperature (the Eq.-14 tau, distinct from the update
    /// interval despite the shared symbol in the source material's notation).
    pub temperature: f64,
}

impl Default for FstsConfig {
    fn default() -> Self {
        FstsConfig {
            momentum: 0.999,
            slow_update_interval: 0,
            temperature: 0.007,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight on the orthogonality term.
    pub kappa: f64,
    pub triplet_margin: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kappa: 0.1,
            triplet_margin: 0.3,
            label_smoothing: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Identities per batch (P).
    pub batch_identities: usize,
    /// Images per identity (K_img).
    pub batch_images_per_identity: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_identities: 8,
            batch_images_per_identity: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: true,
            epochs: 12,
            learning_rate: 1e-3,
            batch_size: 32,
            temperature: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of zeroing each token row during training.
    pub token_dropout: f64,
    /// Extra per-entry noise; `null` reuses the world's noise sigma.
    pub noise_sigma: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            token_dropout: 0.1,
            noise_sigma: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// concat(f_a, f_v) when the attribute pathway exists.
    Concat,
    /// f_v only.
    VisualOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub fsts: bool,
    pub sad: bool,
    pub pcm: bool,
    pub orth: bool,
    pub features: FeatureMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            fsts: true,
            sad: true,
            pcm: true,
            orth: true,
            features: FeatureMode::Concat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub world: WorldSpec,
    pub dataset: DatasetConfig,
    pub scenario: ScenarioConfig,
    pub encoder: EncoderConfig,
    pub sad: SadConfig,
    pub pcm: PcmConfig,
    pub fsts: FstsConfig,
    pub loss: LossConfig,
    pub optimizer: OptimConfig,
    pub pretrain: PretrainConfig,
    pub augment: AugmentConfig,
    pub ablation: AblationConfig,
    pub seeds: Vec<u64>,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            world: WorldSpec::default(),
            dataset: DatasetConfig::default(),
            scenario: ScenarioConfig::default(),
            encoder: EncoderConfig::default(),
            sad: SadConfig::default(),
            pcm: PcmConfig::default(),
            fsts: FstsConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimConfig::default(),
            pretrain: PretrainConfig::default(),
            augment: AugmentConfig::default(),
            ablation: AblationConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: "runs/default".into(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.scenario.train_domains.is_empty() {
            return cfg_err("scenario.train_domains must not be empty".into());
        }
        for &d in self
            .scenario
            .train_domains
            .iter()
            .chain(&self.scenario.test_domains)
        {
            if d >= self.world.num_domains {
                return cfg_err(format!("scenario domain {d} out of range"));
            }
        }
        {
            use std::collections::BTreeSet;
            let train: BTreeSet<usize> = self.scenario.train_domains.iter().cloned().collect();
            let test: BTreeSet<usize> = self.target_domains().into_iter().collect();
            if test.is_empty() {
                return cfg_err("scenario leaves no evaluation domain".into());
            }
            if test != train && !test.is_disjoint(&train) {
                return cfg_err(
                    "scenario.test_domains must equal train_domains or be disjoint from them"
                        .into(),
                );
            }
        }
        if self.dataset.images_per_identity_per_domain < 2 {
            return cfg_err("dataset.images_per_identity_per_domain must be >= 2".into());
        }
        if !(self.dataset.train_identity_fraction > 0.0
            && self.dataset.train_identity_fraction < 1.0)
        {
            return cfg_err("dataset.train_identity_fraction must lie in (0, 1)".into());
        }
        if self.encoder.visual_dim == 0
            || self.encoder.visual_dim % self.encoder.visual_heads != 0
        {
            return cfg_err("encoder.visual_dim must be a positive multiple of visual_heads".into());
        }
        if self.encoder.visual_blocks < 1 {
            return cfg_err("encoder.visual_blocks must be >= 1".into());
        }
        if !(1..=2).contains(&self.encoder.text_blocks) {
            return cfg_err("encoder.text_blocks must be 1 or 2".into());
        }
        if self.ablation.pcm && !self.ablation.sad {
            return cfg_err("ablation: pcm requires sad".into());
        }
        if self.ablation.sad {
            if self.sad.attribute_count < 2 {
                return cfg_err("sad.attribute_count must be >= 2".into());
            }
            if self.sad.tokens_per_attribute < 1 {
                return cfg_err("sad.tokens_per_attribute must be >= 1".into());
            }
            if self.sad.top_k < 1 || self.sad.top_k > self.sad.attribute_count {
                return cfg_err("sad.top_k must lie in [1, attribute_count]".into());
            }
        }
        if self.ablation.pcm && self.pcm.dim == 0 {
            return cfg_err("pcm.dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.fsts.momentum) {
            return cfg_err("fsts.momentum must lie in [0, 1)".into());
        }
        if self.fsts.temperature <= 0.0 {
            return cfg_err("fsts.temperature must be positive".into());
        }
        if self.loss.kappa < 0.0 {
            return cfg_err("loss.kappa must be >= 0".into());
        }
        if self.loss.triplet_margin < 0.0 {
            return cfg_err("loss.triplet_margin must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return cfg_err("loss.label_smoothing must lie in [0, 1)".into());
        }
        if self.optimizer.learning_rate <= 0.0 || self.optimizer.epochs == 0 {
            return cfg_err("optimizer.learning_rate and epochs must be positive".into());
        }
        if self.optimizer.batch_identities < 1 || self.optimizer.batch_images_per_identity < 1 {
            return cfg_err("optimizer batch composition must be positive".into());
        }
        if self.pretrain.enabled {
            if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
                return cfg_err("pretrain.epochs and batch_size must be positive".into());
            }
            if self.pretrain.temperature <= 0.0 {
                return cfg_err("pretrain.temperature must be positive".into());
            }
            let needed = CAPTION_ID_BASE + self.world.num_latent_attributes;
            if self.encoder.vocab_size < needed {
                return cfg_err(format!(
                    "encoder.vocab_size must be >= {needed} to hold template and caption ids"
                ));
            }
        } else if self.encoder.vocab_size < CAPTION_ID_BASE {
            return cfg_err(format!(
                "encoder.vocab_size must be >= {CAPTION_ID_BASE} to hold template ids"
            ));
        }
        if !(0.0..1.0).contains(&self.augment.token_dropout) {
            return cfg_err("augment.token_dropout must lie in [0, 1)".into());
        }
        if let Some(s) = self.augment.noise_sigma {
            if s < 0.0 {
                return cfg_err("augment.noise_sigma must be >= 0".into());
            }
        }
        if self.seeds.is_empty() {
            return cfg_err("seeds must not be empty".into());
        }
        Ok(())
    }

    /// Canonical hash of the whole config; stamped into every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Effective evaluation domains: explicit test set, or the unseen
    /// complement of the train domains.
    pub fn target_domains(&self) -> Vec<usize> {
        if self.scenario.test_domains.is_empty() {
            (0..self.world.num_domains)
                .filter(|d| !self.scenario.train_domains.contains(d))
                .collect()
        } else {
            self.scenario.test_domains.clone()
        }
    }

    /// Whether the evaluation domains are unseen in training.
    pub fn is_dg(&self) -> bool {
        let targets = self.target_domains();
        !targets.iter().any(|d| self.scenario.train_domains.contains(d))
    }

    /// World spec for a given run seed: the run seed shifts the world seed
    /// so multi-seed sweeps draw distinct worlds deterministically.
    pub fn world_for_seed(&self, run_seed: u64) -> WorldSpec {
        let mut w = self.world.clone();
        w.seed = w.seed.wrapping_add(run_seed);
        w
    }

    /// Split over the effective evaluation domains.
    pub fn split_config(&self) -> crate::synthworld::SplitConfig {
        crate::synthworld::SplitConfig {
            train_domains: self.scenario.train_domains.clone(),
            test_domains: self.target_domains(),
            train_identity_fraction: self.dataset.train_identity_fraction,
            queries_per_identity: self.dataset.queries_per_identity,
        }
    }

    /// Split whose queries and galleries come from the train domains
    /// themselves (held-out identities).
    pub fn source_split_config(&self) -> crate::synthworld::SplitConfig {
        crate::synthworld::SplitConfig {
            train_domains: self.scenario.train_domains.clone(),
            test_domains: self.scenario.train_domains.clone(),
            train_identity_fraction: self.dataset.train_identity_fraction,
            queries_per_identity: self.dataset.queries_per_identity,
        }
    }
}

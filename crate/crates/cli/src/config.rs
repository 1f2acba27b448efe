use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rsdgan_core::attack::AttackConfig;
use rsdgan_core::defense::{ProjectionConfig, PATCH_FRAMES};
use rsdgan_core::gan::{Architecture, RingSpec, TrainConfig};
use rsdgan_core::nn::{DiscSpec, GenSpec};
use rsdgan_core::sobolev::RegularizerConfig;
use rsdgan_core::victim::VictimConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Corpus,
    TrainVictim,
    TrainGan,
    Attack,
    Defend,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Corpus,
        Stage::TrainVictim,
        Stage::TrainGan,
        Stage::Attack,
        Stage::Defend,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::TrainVictim => "train-victim",
            Stage::TrainGan => "train-gan",
            Stage::Attack => "attack",
            Stage::Defend => "defend",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// GAN variants compared in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Sobolev constraint only.
    SdGan,
    /// Sobolev constraint plus the spectral regularizer.
    RsdGan,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::SdGan => "SD-GAN",
            Variant::RsdGan => "RSD-GAN",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Variant::SdGan => "sd-gan",
            Variant::RsdGan => "rsd-gan",
        }
    }

    pub fn regularizer(self) -> bool {
        matches!(self, Variant::RsdGan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
}

fn default_repetitions() -> usize {
    3
}

fn default_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub vocab_size: usize,
    pub n_per_class: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Utterances in the attack/defense test set.
    pub test_cases: usize,
    pub test_tokens: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            n_per_class: 20,
            min_tokens: 1,
            max_tokens: 3,
            test_cases: 50,
            test_tokens: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RirSection {
    pub n_filters: usize,
    pub rt60_min: f64,
    pub rt60_max: f64,
    pub theta_frames: usize,
    /// STFT bins of the noise analysed for the regularizer weights.
    pub theta_bins: usize,
}

impl Default for RirSection {
    fn default() -> Self {
        Self {
            n_filters: 8,
            rt60_min: 0.2,
            rt60_max: 0.8,
            theta_frames: 16,
            theta_bins: 257,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    pub variants: Vec<Variant>,
    /// Frame hop between training patches.
    pub patch_hop: usize,
    /// Accountability run on the 2-D ring (collapse and mode columns).
    #[serde(deserialize_with = "ring_overlay")]
    pub ring: TrainConfig,
    pub ring_data: RingSpec,
    /// Patch GAN used by the defense.
    #[serde(deserialize_with = "speech_overlay")]
    pub speech: TrainConfig,
}

/// Recursive merge of `patch` into `base`; a tagged table whose `kind`
/// changes is replaced rather than merged.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    use serde_json::Value;
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let kind_changes = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changes {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn overlay<'de, D: serde::Deserializer<'de>>(d: D, base: TrainConfig) -> Result<TrainConfig, D::Error> {
    let patch = serde_json::Value::deserialize(d)?;
    let mut v = serde_json::to_value(base).map_err(serde::de::Error::custom)?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(serde::de::Error::custom)
}

fn ring_overlay<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    overlay(d, default_ring_train())
}

fn speech_overlay<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    overlay(d, default_speech_train())
}

pub fn default_ring_train() -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        critic_steps: 5,
        total_iters: 2000,
        regularizer_config: RegularizerConfig {
            eigen_dim: 2,
            ..RegularizerConfig::default()
        },
        architecture: Architecture::default(),
        ..TrainConfig::default()
    }
}

pub fn default_speech_train() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        critic_steps: 5,
        total_iters: 1000,
        regularizer_config: RegularizerConfig {
            eigen_dim: 16,
            ..RegularizerConfig::default()
        },
        architecture: Architecture::Conv {
            generator: GenSpec {
                latent_dim: 64,
                height: PATCH_FRAMES,
                width: 26,
                channels: 8,
                res_blocks: 2,
                kernel: 3,
                reduction: vec![8, 4, 1],
            },
            critic: DiscSpec {
                height: PATCH_FRAMES,
                width: 26,
                channels: 2,
                res_blocks: 2,
                kernel: 3,
                tail_convs: 2,
            },
        },
        ..TrainConfig::default()
    }
}

impl Default for GanSection {
    fn default() -> Self {
        Self {
            variants: vec![Variant::SdGan, Variant::RsdGan],
            patch_hop: 2,
            ring: default_ring_train(),
            ring_data: RingSpec::default(),
            speech: default_speech_train(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Cw,
    Eot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub method: AttackMethod,
    /// Target phrases per test utterance.
    pub n_targets: usize,
    pub config: AttackConfig,
    /// EOT only: additive noise, distortion weight and Monte-Carlo draws.
    pub noise_sigma: f64,
    pub alpha_k: f64,
    pub n_mc: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            method: AttackMethod::Cw,
            n_targets: 1,
            config: AttackConfig::default(),
            noise_sigma: 0.002,
            alpha_k: 0.0,
            n_mc: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub victim: VictimConfig,
    #[serde(default)]
    pub rir: RirSection,
    #[serde(default)]
    pub gan: GanSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub defense: ProjectionConfig,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = &self.experiment;
        if e.repetitions == 0 {
            return Err(bad("experiment.repetitions must be at least 1"));
        }
        if e.out_dir.as_os_str().is_empty() {
            return Err(bad("experiment.out_dir is empty"));
        }
        if let Some(parent) = e.out_dir.parent() {
            if !parent.as_os_str().is_empty() && !parent.exists() {
                return Err(bad(format!("parent of out_dir {} does not exist", e.out_dir.display())));
            }
        }
        let c = &self.corpus;
        if !(4..=12).contains(&c.vocab_size) {
            return Err(bad(format!("corpus.vocab_size {} outside 4..=12", c.vocab_size)));
        }
        if c.n_per_class == 0 || c.test_cases == 0 {
            return Err(bad("corpus sizes must be positive"));
        }
        if c.min_tokens == 0 || c.max_tokens < c.min_tokens || c.test_tokens == 0 {
            return Err(bad("corpus token counts must be positive and ordered"));
        }
        if self.rir.n_filters == 0 || self.rir.theta_frames == 0 || self.rir.theta_bins < 2 {
            return Err(bad("rir.n_filters and rir.theta_frames must be positive, rir.theta_bins at least 2"));
        }
        if !(self.rir.rt60_min > 0.05 && self.rir.rt60_max >= self.rir.rt60_min && self.rir.rt60_max <= 2.0) {
            return Err(bad(format!("rir rt60 range [{}, {}] outside (0.05, 2]", self.rir.rt60_min, self.rir.rt60_max)));
        }
        let g = &self.gan;
        if g.variants.is_empty() {
            return Err(bad("gan.variants is empty"));
        }
        if g.patch_hop == 0 {
            return Err(bad("gan.patch_hop must be positive"));
        }
        for (name, t) in [("gan.ring", &g.ring), ("gan.speech", &g.speech)] {
            t.validate().map_err(|e| bad(format!("{name}: {e}")))?;
        }
        match &g.speech.architecture {
            Architecture::Conv { generator, critic } => {
                let n_mels = self.victim.mfcc.n_mels;
                if generator.height != PATCH_FRAMES || generator.width != n_mels || critic.height != PATCH_FRAMES || critic.width != n_mels {
                    return Err(bad(format!("gan.speech patches must be {PATCH_FRAMES}x{n_mels}")));
                }
                if generator.latent_dim != self.defense.latent_dim {
                    return Err(bad(format!(
                        "generator latent {} differs from defense.latent_dim {}",
                        generator.latent_dim, self.defense.latent_dim
                    )));
                }
            }
            Architecture::Mlp { .. } => return Err(bad("gan.speech needs the conv architecture")),
        }
        self.attack.config.validate().map_err(|e| bad(format!("attack: {e}")))?;
        if self.attack.n_targets == 0 {
            return Err(bad("attack.n_targets must be positive"));
        }
        if self.attack.method == AttackMethod::Eot && self.attack.n_mc == 0 {
            return Err(bad("attack.n_mc must be positive for EOT"));
        }
        self.defense.validate().map_err(|e| bad(format!("defense: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the fully resolved config,
    /// leaving out the stage selection and the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.experiment.stages.clear();
        c.experiment.out_dir = PathBuf::new();
        let canon = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Stage- and repetition-specific seed derived from the experiment seed.
    pub fn derived_seed(&self, label: &str, rep: usize) -> u64 {
        let digest = Sha256::digest(format!("{}:{label}:{rep}", self.experiment.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "[experiment]\nseed = 1\nout_dir = \"o\"\n";

    #[test]
    fn partial_gan_tables_keep_their_own_defaults() {
        let cfg = ExperimentConfig::from_toml(&format!("{HEAD}[gan.speech]\ntotal_iters = 7\n[gan.ring.regularizer_config]\neta = 2.0\n")).unwrap();
        assert_eq!(cfg.gan.speech, TrainConfig { total_iters: 7, ..default_speech_train() });
        assert_eq!(cfg.gan.ring.regularizer_config.eta, 2.0);
        assert_eq!(cfg.gan.ring.regularizer_config.eigen_dim, 2);
        assert_eq!(cfg.gan.ring.batch_size, 64);
        cfg.validate().unwrap();
    }

    #[test]
    fn switching_architecture_kind_replaces_the_table() {
        let text = format!("{HEAD}[gan.speech.architecture]\nkind = \"mlp\"\nlatent_dim = 4\ngen_hidden = [8]\ncritic_hidden = [8]\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert!(matches!(cfg.gan.speech.architecture, Architecture::Mlp { latent_dim: 4, .. }));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_nested_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml(&format!("{HEAD}[gan.speech]\nbatch = 3\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{HEAD}[defense]\nrestarts = 3\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{HEAD}[rir]\nrt60 = 3\n")).is_err());
    }

    #[test]
    fn hash_ignores_stages_and_out_dir_only() {
        let a = ExperimentConfig::from_toml(HEAD).unwrap();
        let mut b = a.clone();
        b.experiment.stages = vec![Stage::Report];
        b.experiment.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.defense.lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert_eq!(Stage::parse("train_gan"), None);
    }
}

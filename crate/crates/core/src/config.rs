//! Run configuration. Every field has a default so a partial JSON document
//! resolves to a complete configuration.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::calp::CalpConfig;
use crate::corpus::SynthConfig;
use crate::error::{bail, Result};
use crate::features::{FeatureConfig, PatchGeometry};
use crate::mmtx::MaskConfig;
use crate::nn::EncoderConfig;
use crate::spectran::SpecTranConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Text,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// JSONL manifest; when absent the synthetic corpus is used
    pub manifest: Option<String>,
    /// directory of per-utterance log-mel caches for manifest corpora
    pub feature_cache: Option<String>,
    pub synth: SynthConfig,
    pub vocab_min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: None, feature_cache: None, synth: SynthConfig::default(), vocab_min_count: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_lex: f64,
    pub clip_norm: Option<f64>,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { steps: 1000, batch_size: 32, lr: 1e-3, p_lex: 0.15, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AltConfig {
    pub p_lex: f64,
    pub p_audio: f64,
    pub span: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AltConfig {
    fn default() -> Self {
        let m = MaskConfig::default();
        AltConfig { p_lex: m.p_lex, p_audio: m.p_audio, span: m.span, batch_size: 32, steps: 1000, lr: 5e-4, clip_norm: Some(1.0) }
    }
}

impl AltConfig {
    pub fn mask(&self) -> MaskConfig {
        MaskConfig { p_lex: self.p_lex, p_audio: self.p_audio, span: self.span }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub task: String,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// fixed step budget; overrides `epochs` when set
    pub steps: Option<usize>,
    pub freeze: bool,
    pub modality: Modality,
    pub supervision_fraction: f64,
    pub threshold: f64,
    pub clip_norm: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig::cmu_recipe()
    }
}

impl FinetuneConfig {
    /// Six-class multi-label recipe: learning rate 5e-5, batch 64, 50 epochs.
    pub fn cmu_recipe() -> Self {
        FinetuneConfig {
            task: String::from("emotion"),
            lr: 5e-5,
            batch_size: 64,
            epochs: 50,
            steps: None,
            freeze: true,
            modality: Modality::Both,
            supervision_fraction: 1.0,
            threshold: 0.5,
            clip_norm: None,
        }
    }

    /// Eight-class recipe: learning rate 1e-4, batch 128, 20 epochs.
    pub fn msp_recipe() -> Self {
        FinetuneConfig { lr: 1e-4, batch_size: 128, epochs: 20, ..FinetuneConfig::cmu_recipe() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// each seed also draws a fresh synthetic corpus
    pub vary_corpus: bool,
    pub geometries: Vec<PatchGeometry>,
    /// modality used for the contrastive-weight comparison
    pub alpha_modality: Modality,
    /// fine-tuning budget of the pipeline-ordering arms
    pub pipeline_finetune: ArmFinetune,
    /// fine-tuning budget of the contrastive-weight arms
    pub alpha_finetune: ArmFinetune,
}

/// Fine-tuning override applied to one family of ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmFinetune {
    pub steps: usize,
    pub lr: f64,
    pub freeze: bool,
}

impl ArmFinetune {
    pub fn apply(&self, f: &mut FinetuneConfig) {
        f.steps = Some(self.steps);
        f.lr = self.lr;
        f.freeze = self.freeze;
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2, 3, 4],
            vary_corpus: true,
            geometries: vec![PatchGeometry::default(), PatchGeometry::new(10, 16, 10, 16), PatchGeometry::new(25, 16, 25, 16)],
            alpha_modality: Modality::Audio,
            pipeline_finetune: ArmFinetune { steps: 200, lr: 1e-3, freeze: false },
            alpha_finetune: ArmFinetune { steps: 600, lr: 1e-3, freeze: false },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub precision: Precision,
    pub probes: usize,
    pub tolerance: f64,
    /// harness self-test: perturbs the analytic gradients before comparing
    pub corrupt_gradient: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { precision: Precision::F64, probes: 40, tolerance: 1e-4, corrupt_gradient: false }
    }
}

impl GradCheckConfig {
    pub fn step(&self) -> f64 {
        match self.precision {
            Precision::F64 => 1e-5,
            Precision::F32 => 1e-2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub spectran: SpecTranConfig,
    /// multimodal transformer; also the stage-0 language model
    pub mm: EncoderConfig,
    pub lm: LmConfig,
    pub calp: CalpConfig,
    pub alt: AltConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationConfig,
    pub gradcheck: GradCheckConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.spectran.encoder.validate()?;
        self.mm.validate()?;
        self.calp.validate()?;
        self.alt.mask().validate()?;
        if !(0.0..=1.0).contains(&self.lm.p_lex) {
            bail!(Config, "lm.p_lex must lie in [0, 1]");
        }
        let f = self.finetune.supervision_fraction;
        if !(f > 0.0 && f <= 1.0) {
            bail!(Config, "finetune.supervision_fraction {f} outside (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.finetune.threshold) {
            bail!(Config, "finetune.threshold must lie in [0, 1]");
        }
        for (name, lr) in [("lm", self.lm.lr), ("alt", self.alt.lr), ("finetune", self.finetune.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                bail!(Config, "{name}.lr must be positive");
            }
        }
        for (name, b) in [("lm", self.lm.batch_size), ("alt", self.alt.batch_size), ("finetune", self.finetune.batch_size)] {
            if b == 0 {
                bail!(Config, "{name}.batch_size must be positive");
            }
        }
        Ok(())
    }

    /// A configuration small enough for single-core test runs.
    pub fn tiny() -> Self {
        let enc = |d: usize, ff: usize| EncoderConfig { n_layers: 1, d_model: d, n_heads: 2, d_ff: ff, dropout_rate: 0.1, max_positions: 64 };
        let mut c = RunConfig::default();
        c.features.patch = PatchGeometry::new(25, 16, 25, 16);
        c.spectran.encoder = enc(32, 64);
        c.mm = enc(32, 64);
        c.calp.d_shared = 32;
        c.calp.steps = 2000;
        c.calp.lr = 1e-3;
        c.lm.steps = 300;
        c.alt.steps = 300;
        c.alt.batch_size = 16;
        c.finetune.lr = 1e-3;
        c.finetune.batch_size = 32;
        c.finetune.steps = Some(600);
        c.finetune.freeze = false;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_recipes() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.finetune.lr, c.finetune.batch_size, c.finetune.epochs), (5e-5, 64, 50));
        let m = FinetuneConfig::msp_recipe();
        assert_eq!((m.lr, m.batch_size, m.epochs), (1e-4, 128, 20));
        assert_eq!((c.calp.alpha, c.calp.tau), (0.25, 0.1));
        assert_eq!((c.alt.p_lex, c.alt.p_audio, c.alt.span), (0.15, 0.10, 3));
        assert_eq!(c.features.n_patches(), 63);
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::default();
        c.finetune.supervision_fraction = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.calp.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.mm.n_heads = 3;
        assert!(c.validate().is_err());
    }
}

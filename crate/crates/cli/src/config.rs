use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pivot_lab::data::{DatasetManifest, SplitCounts, Vocab};
use pivot_lab::eval::{LinearProbeConfig, SegmentationProbeConfig};
use pivot_lab::model::{EncoderConfig, LmConfig, ModelConfig};
use pivot_lab::pipeline::{Method, Stage, StageConfig};

/// Mutual-kNN alignment against text features of gold captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Independently seeded Stage-1 runs whose language models serve as references.
    #[serde(default = "default_towers")]
    pub reference_towers: usize,
    /// Pretraining steps for each reference run; the run's own pretrain
    /// setting when absent.
    #[serde(default)]
    pub reference_steps: Option<usize>,
}

fn default_k() -> usize {
    8
}
fn default_towers() -> usize {
    3
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            reference_towers: default_towers(),
            reference_steps: None,
        }
    }
}

/// Gradient maps on localized questions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionConfig {
    #[serde(default = "default_attr_samples")]
    pub samples: usize,
    /// Post-training step at which the maps are read.
    #[serde(default = "default_attr_step")]
    pub step: usize,
    /// How many maps to write out as images.
    #[serde(default = "default_attr_written")]
    pub write_maps: usize,
}

fn default_attr_samples() -> usize {
    50
}
fn default_attr_step() -> usize {
    20
}
fn default_attr_written() -> usize {
    4
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            samples: default_attr_samples(),
            step: default_attr_step(),
            write_maps: default_attr_written(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_true")]
    pub vqa: bool,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default = "default_linear")]
    pub linear_probe: Option<LinearProbeConfig>,
    #[serde(default = "default_segmentation")]
    pub segmentation: Option<SegmentationProbeConfig>,
    #[serde(default)]
    pub alignment: Option<AlignmentConfig>,
    #[serde(default)]
    pub attribution: Option<AttributionConfig>,
}

fn default_true() -> bool {
    true
}
fn default_max_new() -> usize {
    48
}
fn default_linear() -> Option<LinearProbeConfig> {
    Some(LinearProbeConfig::default())
}
fn default_segmentation() -> Option<SegmentationProbeConfig> {
    Some(SegmentationProbeConfig::default())
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            vqa: true,
            max_new_tokens: default_max_new(),
            linear_probe: default_linear(),
            segmentation: default_segmentation(),
            alignment: None,
            attribution: None,
        }
    }
}

/// One end-to-end experiment: data, model, the stages to run and what to measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DatasetManifest,
    pub model: ModelConfig,
    #[serde(default)]
    pub align: Option<StageConfig>,
    #[serde(default)]
    pub pretrain: Option<StageConfig>,
    #[serde(default)]
    pub posttrain: Option<StageConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Threads for data generation and evaluation. Results do not depend on it.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    /// Small model, small data: the whole chain in a few minutes on a laptop.
    pub fn smoke() -> Self {
        let model = tiny_model();
        let mut data = DatasetManifest::new(
            1,
            SplitCounts {
                stage1_align: 256,
                stage1_pretrain: 512,
                stage2_pt: 256,
                eval: 200,
                probe: 120,
            },
        );
        data.image_size = 32;
        data.max_objects = 4;
        let stage = |stage: Stage, steps: usize| StageConfig {
            steps: Some(steps),
            batch_size: 16,
            ..StageConfig::new(stage)
        };
        Self {
            seed: 0,
            data,
            model,
            align: Some(stage(Stage::Align, 60)),
            pretrain: Some(stage(Stage::Pretrain, 200)),
            posttrain: Some(StageConfig {
                method: Some(Method::Dpo),
                lr: Some(1e-4),
                ..stage(Stage::Posttrain, 60)
            }),
            eval: EvalConfig {
                max_new_tokens: 16,
                segmentation: Some(SegmentationProbeConfig {
                    seeds: vec![0, 1, 2],
                    ..Default::default()
                }),
                alignment: Some(AlignmentConfig {
                    reference_towers: 3,
                    reference_steps: Some(40),
                    ..Default::default()
                }),
                attribution: Some(AttributionConfig {
                    samples: 16,
                    step: 20,
                    write_maps: 2,
                }),
                ..Default::default()
            },
            workers: 1,
        }
    }

    /// Strict parse: unknown fields and malformed values are rejected with
    /// the offending field and position.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| anyhow::anyhow!("invalid run config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        let enc = &self.model.encoders[0];
        if enc.image_size != self.data.image_size {
            anyhow::bail!(
                "model.encoders[0].image_size {} differs from data.image_size {}",
                enc.image_size,
                self.data.image_size
            );
        }
        if enc.patch_size != self.data.patch_size {
            anyhow::bail!(
                "model.encoders[0].patch_size {} differs from data.patch_size {}",
                enc.patch_size,
                self.data.patch_size
            );
        }
        if self.model.lm.vocab_size != Vocab::standard().len() {
            anyhow::bail!(
                "model.lm.vocab_size must be {} for the synthetic vocabulary",
                Vocab::standard().len()
            );
        }
        for (field, stage, expected) in [
            ("align", &self.align, Stage::Align),
            ("pretrain", &self.pretrain, Stage::Pretrain),
            ("posttrain", &self.posttrain, Stage::Posttrain),
        ] {
            if let Some(s) = stage {
                if s.stage != expected {
                    anyhow::bail!("{field}.stage must be `{}`", expected.name());
                }
                s.validate().map_err(|e| anyhow::anyhow!("{field}: {e}"))?;
            }
        }
        if self.workers == 0 {
            anyhow::bail!("workers must be at least 1");
        }
        Ok(())
    }

    /// Every default applied and every stage seeded from the run seed.
    pub fn resolved(&self) -> Self {
        let fix = |s: &Option<StageConfig>| {
            s.as_ref().map(|s| StageConfig {
                seed: self.seed,
                ..s.resolved()
            })
        };
        Self {
            align: fix(&self.align),
            pretrain: fix(&self.pretrain),
            posttrain: fix(&self.posttrain),
            model: ModelConfig {
                projector_dims: self.model.resolved_projector_dims(),
                ..self.model.clone()
            },
            ..self.clone()
        }
    }

    /// Hash of everything that affects results except the seed and worker count.
    pub fn config_hash(&self) -> String {
        let mut r = self.resolved();
        r.seed = 0;
        r.workers = 1;
        for s in [&mut r.align, &mut r.pretrain, &mut r.posttrain]
            .into_iter()
            .flatten()
        {
            s.seed = 0;
        }
        short_hash(&serde_json::to_vec(&r).expect("config serializes"))
    }

    /// Hash of the parts Stage 1 depends on, used to share Stage-1 runs.
    pub fn stage1_hash(&self) -> String {
        let r = self.resolved();
        let mut counts = r.data.counts.clone();
        counts.stage2_pt = 0;
        let key = serde_json::json!({
            "data_seed": r.data.seed,
            "counts": counts,
            "image_size": r.data.image_size,
            "patch_size": r.data.patch_size,
            "objects": [r.data.min_objects, r.data.max_objects],
            "mix": r.data.domain_mix,
            "model": r.model,
            "align": r.align.map(|mut s| { s.seed = 0; s }),
            "pretrain": r.pretrain.map(|mut s| { s.seed = 0; s }),
        });
        short_hash(&serde_json::to_vec(&key).expect("key serializes"))
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

/// The desk-scale reference model: 32-pixel images, 8-pixel patches.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoders: vec![EncoderConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }],
        projector_dims: Vec::new(),
        lm: LmConfig {
            vocab_size: Vocab::standard().len(),
            embed_dim: 48,
            depth: 2,
            heads: 4,
            max_seq_len: 96,
            mlp_ratio: 2,
        },
    }
}

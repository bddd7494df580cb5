//! Staged training: projector alignment, end-to-end pretraining, SFT or DPO
//! post-training, and the detach/freeze/reuse flow that builds a new model
//! around a post-trained vision encoder.

mod checkpoint;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{
    load_bundle, load_checkpoint, save_bundle, save_checkpoint, Checkpoint, PivotBundle,
    ProvenanceEntry, FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{component_rng, Component, LanguageModel, LmConfig, MultimodalModel, Projector};
use crate::objectives::{
    dpo_loss_with_reference, reference_logprobs, sft_loss, DpoConfig, DpoStats, PreferenceSample,
};
use crate::optim::{AdamConfig, AdamState, CosineSchedule};
use crate::params::Parameterized;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Align,
    Pretrain,
    Posttrain,
    Stage3,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
            Stage::Stage3 => "stage3",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    Dpo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Dpo => "dpo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainableFlags {
    pub encoder: bool,
    pub projector: bool,
    pub lm: bool,
}

impl TrainableFlags {
    pub const ALL: TrainableFlags = TrainableFlags {
        encoder: true,
        projector: true,
        lm: true,
    };
    pub const PROJECTOR_ONLY: TrainableFlags = TrainableFlags {
        encoder: false,
        projector: true,
        lm: false,
    };
}

fn default_batch_size() -> usize {
    32
}
fn default_warmup_frac() -> f64 {
    0.03
}
fn default_beta() -> f64 {
    DpoConfig::default().beta
}
fn default_reuse() -> usize {
    1
}
fn default_added() -> usize {
    1
}

/// Hyperparameters for one stage. Unset optional fields take stage-specific
/// defaults; [`StageConfig::resolved`] fills them in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub trainable: Option<TrainableFlags>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_reuse")]
    pub pivot_projector_reuse: usize,
    #[serde(default = "default_added")]
    pub added_projector_layers: usize,
    #[serde(default)]
    pub full_train: bool,
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            method: None,
            lr: None,
            batch_size: default_batch_size(),
            steps: None,
            seed: 0,
            warmup_frac: default_warmup_frac(),
            trainable: None,
            beta: default_beta(),
            pivot_projector_reuse: default_reuse(),
            added_projector_layers: default_added(),
            full_train: false,
        }
    }

    pub fn posttrain(method: Method) -> Self {
        Self {
            method: Some(method),
            ..Self::new(Stage::Posttrain)
        }
    }

    /// Every optional field made explicit.
    pub fn resolved(&self) -> Self {
        let method = match self.stage {
            Stage::Posttrain => Some(self.method.unwrap_or(Method::Sft)),
            _ => self.method,
        };
        let lr = self.lr.unwrap_or(match (self.stage, method) {
            (Stage::Align, _) => 1e-3,
            (Stage::Posttrain, Some(Method::Dpo)) => 3e-5,
            _ => 3e-4,
        });
        let steps = self.steps.unwrap_or(match self.stage {
            Stage::Align => 300,
            Stage::Pretrain => 3000,
            Stage::Posttrain => 500,
            Stage::Stage3 => 1500,
        });
        let trainable = match self.stage {
            Stage::Stage3 => self.trainable,
            _ => Some(self.trainable.unwrap_or(match self.stage {
                Stage::Align => TrainableFlags::PROJECTOR_ONLY,
                _ => TrainableFlags::ALL,
            })),
        };
        Self {
            method,
            lr: Some(lr),
            steps: Some(steps),
            trainable,
            ..self.clone()
        }
    }

    pub fn method(&self) -> Method {
        self.resolved().method.unwrap_or(Method::Sft)
    }

    pub fn lr(&self) -> f64 {
        self.resolved().lr.expect("resolved")
    }

    pub fn steps(&self) -> usize {
        self.resolved().steps.expect("resolved")
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolved();
        let lr = r.lr.expect("resolved");
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {lr}"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside [0, 1)",
                self.warmup_frac
            )));
        }
        DpoConfig { beta: self.beta }.validate()?;
        if self.stage != Stage::Posttrain && self.method.is_some() {
            return Err(Error::Config(format!(
                "method applies to posttrain only, not {}",
                self.stage.name()
            )));
        }
        if self.stage == Stage::Align && r.trainable != Some(TrainableFlags::PROJECTOR_ONLY) {
            return Err(Error::Config("align trains the projector only".into()));
        }
        if self.stage == Stage::Stage3 && self.trainable.is_some() {
            return Err(Error::Config(
                "stage3 trainability is set by full_train".into(),
            ));
        }
        if self.pivot_projector_reuse > 2 {
            return Err(Error::Config(format!(
                "pivot_projector_reuse must be 0, 1 or 2, got {}",
                self.pivot_projector_reuse
            )));
        }
        if self.pivot_projector_reuse + self.added_projector_layers == 0 {
            return Err(Error::Config(
                "reused plus added projector layers must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Short stable hash of the resolved configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(&self.resolved()).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub sample_ids: Vec<u64>,
    #[serde(default)]
    pub dpo: Option<DpoStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// The resolved stage configuration.
    pub config: StageConfig,
    pub records: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct RunControl {
    /// A mid-stage checkpoint to continue from.
    pub resume: Option<Checkpoint>,
    /// Stop after this many total steps and return a resumable checkpoint.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Positions into the training set for `step`: one seeded permutation per
/// epoch, consumed in order, so the sequence depends only on
/// `(n, batch_size, seed)`.
pub fn batch_indices(n: usize, batch_size: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut order = EpochOrder::new(n, seed);
    (0..batch_size)
        .map(|j| order.at(step * batch_size + j))
        .collect()
}

struct EpochOrder {
    n: usize,
    seed: u64,
    epoch: usize,
    perm: Vec<usize>,
}

impl EpochOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: usize::MAX,
            perm: Vec::new(),
        }
    }

    fn at(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        if epoch != self.epoch {
            self.perm = (0..self.n).collect();
            self.perm
                .shuffle(&mut component_rng(self.seed, 1000 + epoch as u64));
            self.epoch = epoch;
        }
        self.perm[position % self.n]
    }
}

/// Runs steps `start..stop` of a stage's schedule.
#[allow(clippy::too_many_arguments)]
fn run_steps(
    model: &mut MultimodalModel,
    samples: &[PreferenceSample],
    cfg: &StageConfig,
    reference: Option<&MultimodalModel>,
    optimizer: &mut AdamState,
    start: usize,
    stop: usize,
) -> Result<Vec<StepRecord>> {
    let method = cfg.method();
    let schedule = CosineSchedule {
        base_lr: cfg.lr(),
        total_steps: cfg.steps(),
        warmup_frac: cfg.warmup_frac,
    };
    let dpo = DpoConfig { beta: cfg.beta };
    let mut order = EpochOrder::new(samples.len(), cfg.seed);
    let mut ref_cache: HashMap<u64, (f64, f64)> = HashMap::new();
    let mut records = Vec::with_capacity(stop.saturating_sub(start));
    for step in start..stop {
        let batch: Vec<&PreferenceSample> = (0..cfg.batch_size)
            .map(|j| &samples[order.at(step * cfg.batch_size + j)])
            .collect();
        let lr = schedule.lr_at(step);
        let mut g = Graph::new();
        let mb = model.bind(&mut g, false);
        let (loss, stats) = match method {
            Method::Sft => (sft_loss(&mut g, model, &mb, &batch)?, None),
            Method::Dpo => {
                let reference = reference
                    .ok_or_else(|| Error::Config("dpo needs a reference snapshot".into()))?;
                let refs = batch
                    .iter()
                    .map(|s| match ref_cache.get(&s.id) {
                        Some(v) => Ok(*v),
                        None => {
                            let v = reference_logprobs(reference, s)?;
                            ref_cache.insert(s.id, v);
                            Ok(v)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let terms = dpo_loss_with_reference(&mut g, model, &mb, &batch, &refs, &dpo)?;
                let stats =
                    DpoStats::from_deltas(&terms.delta_chosen, &terms.delta_rejected, dpo.beta);
                (terms.loss, Some(stats))
            }
        };
        let loss_value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let grad_map = model.collect_grads(&g, &mb, &grads);
        if !grad_map.is_empty() {
            optimizer.step_with_lr(model, &grad_map, lr)?;
        }
        records.push(StepRecord {
            step,
            lr,
            loss: loss_value,
            sample_ids: batch.iter().map(|s| s.id).collect(),
            dpo: stats,
        });
    }
    Ok(records)
}

fn apply_flags(model: &mut MultimodalModel, flags: TrainableFlags) {
    model.set_trainable(Component::Encoder, flags.encoder);
    model.set_trainable(Component::Projector, flags.projector);
    model.set_trainable(Component::Lm, flags.lm);
}

/// Shared driver: flags, optional resume, the loop, and provenance.
fn run_stage(
    entry: Checkpoint,
    samples: &[PreferenceSample],
    cfg: &StageConfig,
    expected: Stage,
    ctl: RunControl,
    mut warnings: Vec<String>,
) -> Result<StageOutput> {
    if cfg.stage != expected {
        return Err(Error::Config(format!(
            "expected a {} config, got {}",
            expected.name(),
            cfg.stage.name()
        )));
    }
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no training samples for {}",
            expected.name()
        )));
    }
    let resolved = cfg.resolved();
    let steps = cfg.steps();
    let method = cfg.method();

    let mut model = entry.model.clone();
    if let Some(flags) = resolved.trainable {
        apply_flags(&mut model, flags);
    }
    let reference =
        (expected == Stage::Posttrain && method == Method::Dpo).then(|| entry.model.frozen_copy());
    let ref_hash_entry = reference.as_ref().map(|r| r.param_hash());

    let mut optimizer = AdamState::new(AdamConfig::with_lr(cfg.lr()));
    let mut start = 0;
    if let Some(partial) = ctl.resume {
        if partial.in_progress != Some(expected) || partial.provenance != entry.provenance {
            return Err(Error::Config(format!(
                "resume checkpoint is not a partial {} run from this entry checkpoint",
                expected.name()
            )));
        }
        let state = partial
            .optimizer
            .ok_or_else(|| Error::Integrity("resume checkpoint has no optimizer state".into()))?;
        if partial.model.config() != model.config() {
            return Err(Error::Config(
                "resume checkpoint has a different architecture".into(),
            ));
        }
        model = partial.model;
        optimizer = state;
        start = partial.step;
    }
    let stop = ctl.stop_after.map_or(steps, |s| s.min(steps)).max(start);

    let records = run_steps(
        &mut model,
        samples,
        cfg,
        reference.as_ref(),
        &mut optimizer,
        start,
        stop,
    )?;

    let mut provenance = entry.provenance.clone();
    let finished = stop == steps;
    let reference_hash = match (&reference, ref_hash_entry) {
        (Some(r), Some(before)) => {
            let after = r.param_hash();
            if after != before {
                return Err(Error::Integrity(
                    "reference policy changed during training".into(),
                ));
            }
            Some((before, after))
        }
        _ => None,
    };
    if finished {
        provenance.push(ProvenanceEntry {
            stage: expected,
            method: resolved.method,
            steps,
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            param_hash: model.param_hash(),
            reference_hash,
        });
    } else {
        warnings.push(format!("stopped after {stop} of {steps} steps"));
    }
    let checkpoint = Checkpoint {
        model,
        seed: entry.seed,
        step: stop,
        provenance,
        in_progress: (!finished).then_some(expected),
        optimizer: (!finished).then_some(optimizer),
    };
    Ok(StageOutput {
        checkpoint,
        log: TrainLog {
            config: resolved,
            records,
            warnings,
        },
    })
}

/// Projector-only SFT on caption-style samples.
pub fn stage1_align(
    entry: Checkpoint,
    samples: &[PreferenceSample],
    cfg: &StageConfig,
    ctl: RunControl,
) -> Result<StageOutput> {
    run_stage(entry, samples, cfg, Stage::Align, ctl, Vec::new())
}

/// End-to-end SFT on instruction data. Warns when no alignment stage preceded it.
pub fn stage1_pretrain(
    entry: Checkpoint,
    samples: &[PreferenceSample],
    cfg: &StageConfig,
    ctl: RunControl,
) -> Result<StageOutput> {
    let mut warnings = Vec::new();
    if !entry.has_stage(Stage::Align) {
        warnings.push("pretraining without a preceding align stage".to_string());
    }
    run_stage(entry, samples, cfg, Stage::Pretrain, ctl, warnings)
}

/// Full-parameter SFT or DPO. For DPO the entry model is snapshotted as the
/// frozen reference and verified unchanged on exit.
pub fn stage2_posttrain(
    entry: Checkpoint,
    samples: &[PreferenceSample],
    cfg: &StageConfig,
    ctl: RunControl,
) -> Result<StageOutput> {
    run_stage(entry, samples, cfg, Stage::Posttrain, ctl, Vec::new())
}

/// Detaches the vision encoder (and the first `reuse` projector layers) as frozen parts.
pub fn pivot_extract(ckpt: &Checkpoint, reuse: usize) -> Result<PivotBundle> {
    if reuse > 2 {
        return Err(Error::Config(format!(
            "reuse must be 0, 1 or 2, got {reuse}"
        )));
    }
    let mut encoders = ckpt.model.encoders.clone();
    for e in &mut encoders {
        e.params.set_all_trainable(false);
    }
    let projector = if reuse == 0 {
        None
    } else {
        let mut p = ckpt.model.projector.truncated(reuse)?;
        p.params.set_all_trainable(false);
        Some(p)
    };
    Ok(PivotBundle {
        encoders,
        projector,
        seed: ckpt.seed,
        provenance: ckpt.provenance.clone(),
    })
}

/// The model Stage 3 trains: the bundle's frozen parts, `added` fresh
/// projector layers into `lm`'s width, and a fresh language model.
pub fn stage3_model(
    bundle: &PivotBundle,
    lm: &LmConfig,
    cfg: &StageConfig,
) -> Result<MultimodalModel> {
    let reused = bundle.projector.as_ref().map_or(0, Projector::num_layers);
    if reused != cfg.pivot_projector_reuse {
        return Err(Error::Config(format!(
            "bundle carries {reused} projector layers, config asks for {}",
            cfg.pivot_projector_reuse
        )));
    }
    let added = cfg.added_projector_layers;
    if added == 0 && bundle.output_dim() != lm.embed_dim {
        return Err(Error::Dimension(format!(
            "reused projector emits width {} but the language model expects {}; add a layer to bridge them",
            bundle.output_dim(),
            lm.embed_dim
        )));
    }
    let mut rng = component_rng(cfg.seed, 100);
    let mut projector = match &bundle.projector {
        Some(p) => p.clone(),
        None => {
            let mut dims = vec![bundle.feature_dim()];
            dims.extend(std::iter::repeat_n(lm.embed_dim, added));
            let mut p = Projector::with_dims(dims, &mut rng);
            p.params.set_all_trainable(true);
            p
        }
    };
    if bundle.projector.is_some() {
        projector.push_layers(&vec![lm.embed_dim; added], &mut rng);
    }
    for layer in 0..reused {
        projector.set_layer_frozen(layer, !cfg.full_train);
    }
    let mut encoders = bundle.encoders.clone();
    for e in &mut encoders {
        e.params.set_all_trainable(cfg.full_train);
    }
    let lm = LanguageModel::new(lm.clone(), &mut component_rng(cfg.seed, 200))?;
    MultimodalModel::from_parts(encoders, projector, lm)
}

/// Trains a fresh language model (and new projector layers) on top of a
/// detached encoder. With `full_train`, the reused parts train as well.
pub fn stage3_finetune(
    bundle: &PivotBundle,
    lm: &LmConfig,
    samples: &[PreferenceSample],
    cfg: &StageConfig,
    ctl: RunControl,
) -> Result<StageOutput> {
    cfg.validate()?;
    let model = stage3_model(bundle, lm, cfg)?;
    let entry = Checkpoint {
        model,
        seed: bundle.seed,
        step: 0,
        provenance: bundle.provenance.clone(),
        in_progress: None,
        optimizer: None,
    };
    run_stage(entry, samples, cfg, Stage::Stage3, ctl, Vec::new())
}

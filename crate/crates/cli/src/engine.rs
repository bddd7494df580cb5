use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use pivot_lab::data::{build_dataset, tokenize, DataSample, Dataset, Split, SEGMENTATION_CLASSES};
use pivot_lab::eval::{
    alignment_against_references, extract_features, focus_mass, grad_attribution, linear_probe,
    segmentation_probe_features, vqa_eval, write_attribution, AttributionMap, EvalReport,
    FeatureSource, ModelAnswerer, Objective,
};
use pivot_lab::image::Image;
use pivot_lab::model::{LmConfig, MultimodalModel};
use pivot_lab::objectives::PreferenceSample;
use pivot_lab::pipeline::{
    save_checkpoint, stage1_align, stage1_pretrain, stage2_posttrain, stage3_finetune, Checkpoint,
    Method, PivotBundle, RunControl, StageConfig, TrainLog,
};
use pivot_lab::{Graph, Tensor};

use crate::config::{AlignmentConfig, EvalConfig, RunConfig};

/// Name of the env var that overrides the output root.
pub const OUT_ENV: &str = "PIVOT_LAB_OUT";

/// The output root: `PIVOT_LAB_OUT` if set, else `fallback`.
pub fn output_root(fallback: &Path) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.to_path_buf())
}

pub fn preferences(ds: &Dataset, split: Split) -> anyhow::Result<Vec<PreferenceSample>> {
    ds.split(split)
        .iter()
        .map(|s| s.to_preference())
        .collect::<pivot_lab::Result<Vec<_>>>()
        .with_context(|| format!("converting {} samples", split.name()))
}

/// Result of the shared first stage.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub checkpoint: Checkpoint,
    pub logs: Vec<TrainLog>,
}

/// Alignment then pretraining, each only if configured. `cfg` must be resolved.
pub fn run_stage1(cfg: &RunConfig, ds: &Dataset) -> anyhow::Result<Stage1Output> {
    let mut ckpt = Checkpoint::fresh(&cfg.model, cfg.seed)?;
    let mut logs = Vec::new();
    if let Some(align) = &cfg.align {
        let out = stage1_align(
            ckpt,
            &preferences(ds, Split::Stage1Align)?,
            align,
            RunControl::default(),
        )?;
        ckpt = out.checkpoint;
        logs.push(out.log);
    }
    if let Some(pretrain) = &cfg.pretrain {
        let out = stage1_pretrain(
            ckpt,
            &preferences(ds, Split::Stage1Pretrain)?,
            pretrain,
            RunControl::default(),
        )?;
        ckpt = out.checkpoint;
        logs.push(out.log);
    }
    Ok(Stage1Output {
        checkpoint: ckpt,
        logs,
    })
}

/// Vision-grounded questions that point at one grid cell.
pub fn localized_samples(ds: &Dataset, n: usize) -> Vec<&DataSample> {
    ds.split(Split::Eval)
        .into_iter()
        .filter(|s| s.focus_cell.is_some() && !s.rejected.is_empty())
        .take(n)
        .collect()
}

pub struct PosttrainOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub attribution: Vec<(AttributionMap, (usize, usize))>,
}

/// Post-trains from `entry`. With attribution configured, training pauses
/// at the configured step, maps are read from that policy, and training
/// resumes bit-identically.
pub fn run_posttrain(
    cfg: &StageConfig,
    ds: &Dataset,
    entry: &Checkpoint,
    eval: &EvalConfig,
) -> anyhow::Result<PosttrainOutput> {
    let samples = preferences(ds, Split::Stage2Pt)?;
    let Some(attr) = &eval.attribution else {
        let out = stage2_posttrain(entry.clone(), &samples, cfg, RunControl::default())?;
        return Ok(PosttrainOutput {
            checkpoint: out.checkpoint,
            log: out.log,
            attribution: Vec::new(),
        });
    };
    let objective = match cfg.method() {
        Method::Sft => Objective::Sft,
        Method::Dpo => Objective::Dpo,
    };
    let localized = localized_samples(ds, attr.samples);
    let maps_of =
        |policy: &MultimodalModel| -> anyhow::Result<Vec<(AttributionMap, (usize, usize))>> {
            localized
                .iter()
                .map(|s| {
                    let map = grad_attribution(
                        policy,
                        Some(&entry.model),
                        &s.to_preference()?,
                        objective,
                        cfg.beta,
                    )?;
                    Ok((map, s.focus_cell.expect("localized")))
                })
                .collect()
        };
    let steps = cfg.steps();
    if attr.step == 0 {
        let maps = maps_of(&entry.model)?;
        let out = stage2_posttrain(entry.clone(), &samples, cfg, RunControl::default())?;
        return Ok(PosttrainOutput {
            checkpoint: out.checkpoint,
            log: out.log,
            attribution: maps,
        });
    }
    if attr.step >= steps {
        let out = stage2_posttrain(entry.clone(), &samples, cfg, RunControl::default())?;
        let maps = maps_of(&out.checkpoint.model)?;
        return Ok(PosttrainOutput {
            checkpoint: out.checkpoint,
            log: out.log,
            attribution: maps,
        });
    }
    let paused = stage2_posttrain(
        entry.clone(),
        &samples,
        cfg,
        RunControl {
            resume: None,
            stop_after: Some(attr.step),
        },
    )?;
    let maps = maps_of(&paused.checkpoint.model)?;
    let mut out = stage2_posttrain(
        entry.clone(),
        &samples,
        cfg,
        RunControl {
            resume: Some(paused.checkpoint),
            stop_after: None,
        },
    )?;
    let mut records = paused.log.records;
    records.append(&mut out.log.records);
    out.log.records = records;
    Ok(PosttrainOutput {
        checkpoint: out.checkpoint,
        log: out.log,
        attribution: maps,
    })
}

fn patch_features(model: &MultimodalModel, images: &[&Image]) -> anyhow::Result<Vec<Tensor>> {
    images
        .iter()
        .map(|im| {
            let mut g = Graph::new();
            let mb = model.bind(&mut g, true);
            let a = model.encode_image(&mut g, &mb, im)?;
            Ok(g.value(a).clone())
        })
        .collect()
}

/// Text features of each sample's gold caption under each reference language model.
pub fn caption_features(
    towers: &[ReferenceTower],
    samples: &[&DataSample],
) -> anyhow::Result<Vec<Tensor>> {
    towers
        .iter()
        .map(|lm| {
            let rows = samples
                .iter()
                .map(|s| Ok(lm.0.text_features(&tokenize(&s.caption)?)?))
                .collect::<anyhow::Result<Vec<_>>>()?;
            Ok(Tensor::from_rows(&rows)?)
        })
        .collect()
}

/// A trained language model used as an alignment reference.
pub struct ReferenceTower(pub pivot_lab::model::LanguageModel);

/// Stage-1 runs with independent seeds; their language models are the references.
pub fn reference_towers(
    cfg: &RunConfig,
    ds: &Dataset,
    align: &AlignmentConfig,
) -> anyhow::Result<Vec<ReferenceTower>> {
    (0..align.reference_towers as u64)
        .map(|i| {
            let mut tower = cfg.clone();
            tower.seed = 10_000 + i;
            tower = tower.resolved();
            if let (Some(steps), Some(p)) = (align.reference_steps, tower.pretrain.as_mut()) {
                p.steps = Some(steps);
            }
            Ok(ReferenceTower(run_stage1(&tower, ds)?.checkpoint.model.lm))
        })
        .collect()
}

/// Everything measurable on a trained model, as one report.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &MultimodalModel,
    ds: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
    config_hash: &str,
    references: Option<(&[Tensor], usize)>,
    attribution: &[(AttributionMap, (usize, usize))],
    workers: usize,
) -> anyhow::Result<EvalReport> {
    let mut report = EvalReport::new(seed, config_hash);
    if cfg.vqa {
        let eval = ds.split(Split::Eval);
        let answerer = ModelAnswerer {
            model,
            max_new: cfg.max_new_tokens,
        };
        let r = vqa_eval(&answerer, &eval, workers)?;
        for &(domain, correct, total) in &r.per_domain {
            report.push("vqa_accuracy", domain.name(), correct as f64 / total as f64);
        }
        report.push("vqa_accuracy", "all", r.macro_accuracy());
        report.push(
            "vqa_truncated",
            "all",
            r.flagged.len() as f64 / eval.len().max(1) as f64,
        );
    }
    let probe: Vec<&DataSample> = ds.split(Split::Probe);
    if let Some(lp) = &cfg.linear_probe {
        let labelled: Vec<&DataSample> = probe
            .iter()
            .copied()
            .filter(|s| s.label.is_some())
            .collect();
        let items: Vec<(u64, &Image)> = labelled.iter().map(|s| (s.id, &s.image)).collect();
        let labels: Vec<usize> = labelled
            .iter()
            .map(|s| s.label.expect("filtered") as usize)
            .collect();
        let cfg = pivot_lab::eval::LinearProbeConfig { seed, ..lp.clone() };
        for (name, source) in [
            ("linear_probe", FeatureSource::Encoder),
            ("linear_probe_projected", FeatureSource::Projected),
        ] {
            let f = extract_features(model, &items, source, workers)?;
            report.push(name, "all", linear_probe(&f.data, &labels, &cfg)?);
        }
    }
    if let Some(seg) = &cfg.segmentation {
        let images: Vec<&Image> = probe.iter().map(|s| &s.image).collect();
        let masks: Vec<Vec<u8>> = probe.iter().map(|s| s.mask.clone()).collect();
        let feats = patch_features(model, &images)?;
        report.push(
            "segmentation_recall",
            "all",
            segmentation_probe_features(&feats, &masks, SEGMENTATION_CLASSES, seg)?,
        );
        report.probe_seeds = seg.seeds.clone();
    }
    if let Some((refs, k)) = references {
        let eval = ds.split(Split::Eval);
        let n = refs.first().map_or(0, Tensor::rows);
        let items: Vec<(u64, &Image)> = eval.iter().take(n).map(|s| (s.id, &s.image)).collect();
        let f = extract_features(model, &items, FeatureSource::Encoder, workers)?;
        report.push(
            "alignment",
            "all",
            alignment_against_references(&f.data, refs, k)?,
        );
        report.metadata.insert(
            "alignment_metric".into(),
            format!("mutual top-{k} cosine neighbour overlap"),
        );
        report.metadata.insert(
            "alignment_references".into(),
            format!("{} stage-1 language models on gold captions", refs.len()),
        );
    }
    if !attribution.is_empty() {
        let mass: f64 = attribution
            .iter()
            .map(|(m, cell)| focus_mass(m, *cell))
            .sum::<f64>()
            / attribution.len() as f64;
        report.push("attribution_focus", "all", mass);
    }
    report.metadata.insert(
        "scoring".into(),
        "exact match after removing think spans".into(),
    );
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLog {
    pub config_hash: String,
    pub seed: u64,
    /// The configuration with every default made explicit.
    pub resolved_config: RunConfig,
    pub stages: Vec<TrainLog>,
    pub warnings: Vec<String>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
    pub stage1: Stage1Output,
    pub log: RunLog,
}

/// Directory name for a run: configuration hash plus seed.
pub fn run_name(cfg: &RunConfig) -> String {
    format!("run-{}-s{}", cfg.config_hash(), cfg.seed)
}

/// Runs `body` inside `root/.partial/name`; on success the directory moves
/// to `root/name`, on failure to `root/quarantine/name`.
pub fn with_staging<T>(
    root: &Path,
    name: &str,
    body: impl FnOnce(&Path) -> anyhow::Result<T>,
) -> anyhow::Result<(PathBuf, T)> {
    let staging = root.join(".partial").join(name);
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    match body(&staging) {
        Ok(v) => {
            let dest = root.join(name);
            if dest.exists() {
                std::fs::remove_dir_all(&dest)?;
            }
            std::fs::rename(&staging, &dest)?;
            Ok((dest, v))
        }
        Err(e) => {
            let q = root.join("quarantine").join(name);
            if q.exists() {
                std::fs::remove_dir_all(&q)?;
            }
            std::fs::create_dir_all(q.parent().expect("has parent"))?;
            std::fs::rename(&staging, &q)?;
            Err(e.context(format!("partial outputs moved to {}", q.display())))
        }
    }
}

/// The full chain: data, Stage 1 (or a shared result), post-training and evaluation.
pub fn run_with(
    cfg: &RunConfig,
    root: &Path,
    shared: Option<(&Dataset, &Stage1Output)>,
) -> anyhow::Result<RunOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let hash = cfg.config_hash();
    let built;
    let ds = match shared {
        Some((ds, _)) => ds,
        None => {
            built = build_dataset(&cfg.data, cfg.workers)?;
            &built
        }
    };
    let (dir, (report, checkpoint, stage1, log)) = with_staging(root, &run_name(&cfg), |dir| {
        let stage1 = match shared {
            Some((_, s)) => s.clone(),
            None => run_stage1(&cfg, ds)?,
        };
        let mut stages = stage1.logs.clone();
        let (checkpoint, attribution) = match &cfg.posttrain {
            Some(pt) => {
                let out = run_posttrain(pt, ds, &stage1.checkpoint, &cfg.eval)?;
                stages.push(out.log);
                (out.checkpoint, out.attribution)
            }
            None => (stage1.checkpoint.clone(), Vec::new()),
        };
        save_checkpoint(&dir.join("checkpoint"), &checkpoint)?;
        for (i, (map, _)) in attribution
            .iter()
            .take(cfg.eval.attribution.as_ref().map_or(0, |a| a.write_maps))
            .enumerate()
        {
            write_attribution(
                &dir.join("attribution"),
                &format!("{i:02}-{}", map.sample_id),
                map,
            )?;
        }
        let references = match &cfg.eval.alignment {
            Some(a) => {
                let towers = reference_towers(&cfg, ds, a)?;
                let eval = ds.split(Split::Eval);
                let n = eval.len().min(512);
                Some((caption_features(&towers, &eval[..n])?, a.k))
            }
            None => None,
        };
        let report = evaluate(
            &checkpoint.model,
            ds,
            &cfg.eval,
            cfg.seed,
            &hash,
            references.as_ref().map(|(r, k)| (r.as_slice(), *k)),
            &attribution,
            cfg.workers,
        )?;
        report.write(dir)?;
        let warnings = stages.iter().flat_map(|l| l.warnings.clone()).collect();
        let log = RunLog {
            config_hash: hash.clone(),
            seed: cfg.seed,
            resolved_config: cfg.clone(),
            stages,
            warnings,
        };
        std::fs::write(
            dir.join("run_log.json"),
            serde_json::to_string_pretty(&log)? + "\n",
        )?;
        Ok((report, checkpoint, stage1, log))
    })?;
    Ok(RunOutcome {
        dir,
        report,
        checkpoint,
        stage1,
        log,
    })
}

pub fn run(cfg: &RunConfig, root: &Path) -> anyhow::Result<RunOutcome> {
    run_with(cfg, root, None)
}

/// Stage 3 on a detached encoder, trained on the pretraining split.
pub fn run_stage3(
    bundle: &PivotBundle,
    lm: &LmConfig,
    cfg: &StageConfig,
    ds: &Dataset,
) -> anyhow::Result<(Checkpoint, TrainLog)> {
    let samples = preferences(ds, Split::Stage1Pretrain)?;
    let out = stage3_finetune(bundle, lm, &samples, cfg, RunControl::default())?;
    Ok((out.checkpoint, out.log))
}

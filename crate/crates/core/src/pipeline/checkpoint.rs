use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Method, Stage};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ModelConfig, MultimodalModel, Projector, VisionEncoder};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Param, Parameterized};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

/// One completed (or in-progress) stage in a model's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceEntry {
    pub stage: Stage,
    #[serde(default)]
    pub method: Option<Method>,
    pub steps: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Parameter hash after the stage.
    pub param_hash: String,
    /// Reference-policy hash at entry and exit of a preference stage.
    #[serde(default)]
    pub reference_hash: Option<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into `params.bin`, in values.
    offset: usize,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum Contents {
    Model {
        config: ModelConfig,
    },
    PivotBundle {
        encoders: Vec<EncoderConfig>,
        projector_dims: Option<Vec<usize>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    contents: Contents,
    seed: u64,
    step: usize,
    provenance: Vec<ProvenanceEntry>,
    /// Set while a stage is partway through; resuming needs the optimizer arrays.
    in_progress: Option<Stage>,
    optimizer: Option<OptimizerMeta>,
    arrays: Vec<ArrayEntry>,
    total_values: usize,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
}

/// A model plus its history, optionally with mid-stage optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MultimodalModel,
    pub seed: u64,
    /// Steps completed in `in_progress`, or in the last stage.
    pub step: usize,
    pub provenance: Vec<ProvenanceEntry>,
    pub in_progress: Option<Stage>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn fresh(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::from_model(MultimodalModel::new(config, seed)?, seed))
    }

    pub fn from_model(model: MultimodalModel, seed: u64) -> Self {
        Self {
            model,
            seed,
            step: 0,
            provenance: Vec::new(),
            in_progress: None,
            optimizer: None,
        }
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.provenance.iter().any(|p| p.stage == stage)
    }

    pub fn last_stage(&self) -> Option<Stage> {
        self.provenance.last().map(|p| p.stage)
    }
}

/// A detached vision encoder with the projector layers reused alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct PivotBundle {
    pub encoders: Vec<VisionEncoder>,
    pub projector: Option<Projector>,
    pub seed: u64,
    pub provenance: Vec<ProvenanceEntry>,
}

impl PivotBundle {
    pub fn feature_dim(&self) -> usize {
        self.encoders.iter().map(|e| e.config.embed_dim).sum()
    }

    /// Width of the features handed to newly added layers.
    pub fn output_dim(&self) -> usize {
        self.projector
            .as_ref()
            .map_or(self.feature_dim(), |p| p.out_dim())
    }
}

fn collect(
    visit: impl FnOnce(&mut dyn FnMut(&str, &Param)),
    prefix: &str,
    out: &mut Vec<(String, Param)>,
) {
    visit(&mut |n, p| out.push((format!("{prefix}{n}"), p.clone())));
}

fn write(dir: &Path, mut manifest: Manifest, arrays: Vec<(String, Param)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut offset = 0;
    manifest.arrays.clear();
    for (name, p) in &arrays {
        manifest.arrays.push(ArrayEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            trainable: p.trainable,
        });
        offset += p.value.numel();
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.total_values = offset;
    manifest.sha256 = hex::encode(Sha256::digest(&bytes));
    // Arrays first, so a manifest never points at a missing payload.
    fs::write(dir.join(PARAMS), &bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read(dir: &Path) -> Result<(Manifest, BTreeMap<String, Param>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let bytes = fs::read(dir.join(PARAMS))?;
    if bytes.len() != manifest.total_values * 8 {
        return Err(Error::Integrity(format!(
            "params.bin holds {} bytes, manifest expects {}",
            bytes.len(),
            manifest.total_values * 8
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(Error::Integrity("params.bin checksum mismatch".into()));
    }
    let mut arrays = BTreeMap::new();
    for a in &manifest.arrays {
        let n: usize = a.shape.iter().product();
        if a.offset + n > manifest.total_values {
            return Err(Error::Integrity(format!(
                "array `{}` runs past the end of params.bin",
                a.name
            )));
        }
        let data = bytes[a.offset * 8..(a.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Tensor::new(a.shape.clone(), data)?;
        let param = Param {
            value,
            trainable: a.trainable,
        };
        if arrays.insert(a.name.clone(), param).is_some() {
            return Err(Error::Integrity(format!("array `{}` listed twice", a.name)));
        }
    }
    Ok((manifest, arrays))
}

/// Overwrites every parameter of `target` from `arrays[prefix + name]`,
/// removing the consumed entries.
fn fill(
    target: &mut dyn Parameterized,
    prefix: &str,
    arrays: &mut BTreeMap<String, Param>,
) -> Result<()> {
    let mut err = None;
    target.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match arrays.remove(&key) {
            Some(src) if src.value.shape() == p.value.shape() => *p = src,
            Some(src) => {
                err = Some(Error::Integrity(format!(
                    "array `{key}` has shape {:?}, model expects {:?}",
                    src.value.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Integrity(format!("array `{key}` is missing"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn moments_prefix(which: &str) -> String {
    format!("opt.{which}.")
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut arrays = Vec::new();
    collect(|f| ckpt.model.visit(f), "", &mut arrays);
    let optimizer = ckpt.optimizer.as_ref().map(|o| {
        for (which, moments) in [("m", &o.first_moment), ("v", &o.second_moment)] {
            for (name, t) in moments {
                arrays.push((
                    format!("{}{name}", moments_prefix(which)),
                    Param {
                        value: t.clone(),
                        trainable: false,
                    },
                ));
            }
        }
        OptimizerMeta {
            config: o.config.clone(),
            step: o.step,
        }
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        contents: Contents::Model {
            config: ckpt.model.config(),
        },
        seed: ckpt.seed,
        step: ckpt.step,
        provenance: ckpt.provenance.clone(),
        in_progress: ckpt.in_progress,
        optimizer,
        arrays: Vec::new(),
        total_values: 0,
        sha256: String::new(),
    };
    write(dir, manifest, arrays)
}

fn take_moments(arrays: &mut BTreeMap<String, Param>, which: &str) -> BTreeMap<String, Tensor> {
    let prefix = moments_prefix(which);
    let keys: Vec<String> = arrays
        .keys()
        .filter(|k| k.starts_with(&prefix))
        .cloned()
        .collect();
    keys.into_iter()
        .map(|k| {
            let p = arrays.remove(&k).expect("key listed");
            (k[prefix.len()..].to_string(), p.value)
        })
        .collect()
}

fn reject_leftovers(arrays: &BTreeMap<String, Param>) -> Result<()> {
    match arrays.keys().next() {
        Some(extra) => Err(Error::Integrity(format!("unexpected array `{extra}`"))),
        None => Ok(()),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (manifest, mut arrays) = read(dir)?;
    let Contents::Model { config } = &manifest.contents else {
        return Err(Error::Integrity(
            "directory holds a pivot bundle, not a model checkpoint".into(),
        ));
    };
    let mut model = MultimodalModel::new(config, 0)?;
    fill(&mut model, "", &mut arrays)?;
    let optimizer = manifest.optimizer.as_ref().map(|meta| {
        let mut o = AdamState::new(meta.config.clone());
        o.step = meta.step;
        o.first_moment = take_moments(&mut arrays, "m");
        o.second_moment = take_moments(&mut arrays, "v");
        o
    });
    reject_leftovers(&arrays)?;
    Ok(Checkpoint {
        model,
        seed: manifest.seed,
        step: manifest.step,
        provenance: manifest.provenance,
        in_progress: manifest.in_progress,
        optimizer,
    })
}

pub fn save_bundle(dir: &Path, bundle: &PivotBundle) -> Result<()> {
    let mut arrays = Vec::new();
    for (i, e) in bundle.encoders.iter().enumerate() {
        collect(|f| e.params.visit(f), &format!("enc{i}."), &mut arrays);
    }
    if let Some(p) = &bundle.projector {
        collect(|f| p.params.visit(f), "proj.", &mut arrays);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        contents: Contents::PivotBundle {
            encoders: bundle.encoders.iter().map(|e| e.config.clone()).collect(),
            projector_dims: bundle.projector.as_ref().map(|p| p.dims().to_vec()),
        },
        seed: bundle.seed,
        step: 0,
        provenance: bundle.provenance.clone(),
        in_progress: None,
        optimizer: None,
        arrays: Vec::new(),
        total_values: 0,
        sha256: String::new(),
    };
    write(dir, manifest, arrays)
}

pub fn load_bundle(dir: &Path) -> Result<PivotBundle> {
    let (manifest, mut arrays) = read(dir)?;
    let Contents::PivotBundle {
        encoders,
        projector_dims,
    } = &manifest.contents
    else {
        return Err(Error::Integrity(
            "directory holds a model checkpoint, not a pivot bundle".into(),
        ));
    };
    let mut rng = crate::model::component_rng(0, 0);
    let mut encs = Vec::new();
    for (i, cfg) in encoders.iter().enumerate() {
        let mut e = VisionEncoder::new(cfg.clone(), &mut rng)?;
        fill(&mut e.params, &format!("enc{i}."), &mut arrays)?;
        encs.push(e);
    }
    let projector = match projector_dims {
        Some(dims) if dims.len() < 2 => {
            return Err(Error::Integrity(format!(
                "projector dims {dims:?} describe no layer"
            )));
        }
        Some(dims) => {
            let mut p = Projector::with_dims(dims.clone(), &mut rng);
            fill(&mut p.params, "proj.", &mut arrays)?;
            Some(p)
        }
        None => None,
    };
    reject_leftovers(&arrays)?;
    Ok(PivotBundle {
        encoders: encs,
        projector,
        seed: manifest.seed,
        provenance: manifest.provenance,
    })
}

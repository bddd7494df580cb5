//! Representation probes and benchmark scoring for trained models.

mod alignment;
mod attribution;
mod probe;
mod report;
mod vqa;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use alignment::{alignment_against_references, knn_sets, mutual_knn_alignment};
pub use attribution::{focus_mass, grad_attribution, write_attribution, AttributionMap, Objective};
pub use probe::{
    linear_probe, segmentation_probe, segmentation_probe_features, LinearProbeConfig, ProbeMode,
    SegmentationProbeConfig,
};
pub use report::{EvalReport, Metric};
pub use vqa::{vqa_eval, Answer, Answerer, ImageAblated, ModelAnswerer, VqaResult};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::model::MultimodalModel;
use crate::tensor::Tensor;

/// Which activations a feature matrix was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Vision encoder output alone.
    Encoder,
    /// Encoder followed by the projector, i.e. the visual tokens the LM sees.
    Projected,
}

impl FeatureSource {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Encoder => "encoder",
            FeatureSource::Projected => "projected",
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(FeatureSource::Encoder),
            "projected" => Ok(FeatureSource::Projected),
            other => Err(Error::InvalidArgument(format!(
                "unknown feature source `{other}`"
            ))),
        }
    }
}

/// One pooled feature row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub data: Tensor,
    pub source: FeatureSource,
    pub ids: Vec<u64>,
}

/// Maps `f` over `items` on up to `workers` threads. Results come back in
/// input order regardless of scheduling.
pub(crate) fn par_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Mean-pooled activations of `source` for each image.
pub fn extract_features(
    model: &MultimodalModel,
    items: &[(u64, &Image)],
    source: FeatureSource,
    workers: usize,
) -> Result<FeatureMatrix> {
    let rows = par_map(items, workers, |(_, image)| {
        let mut g = Graph::new();
        let mb = model.bind(&mut g, true);
        let mut x = model.encode_image(&mut g, &mb, image)?;
        if source == FeatureSource::Projected {
            x = model.project(&mut g, &mb, x)?;
        }
        let pooled = g.mean_rows(x)?;
        Ok(g.value(pooled).data().to_vec())
    })?;
    let data = if rows.is_empty() {
        let width = match source {
            FeatureSource::Encoder => model.config().feature_dim(),
            FeatureSource::Projected => model.lm.config.embed_dim,
        };
        Tensor::zeros(&[0, width])
    } else {
        Tensor::from_rows(&rows)?
    };
    if !data.is_finite() {
        return Err(Error::NonFinite {
            op: "extract_features",
        });
    }
    Ok(FeatureMatrix {
        data,
        source,
        ids: items.iter().map(|(id, _)| *id).collect(),
    })
}

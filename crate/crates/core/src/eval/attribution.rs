use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GRID;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::MultimodalModel;
use crate::objectives::{dpo_term, reference_logprobs, PreferenceSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sft,
    Dpo,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::Dpo => "dpo",
        }
    }
}

/// Per-patch gradient magnitude on the encoder output, scaled so the
/// largest entry is 1 (or all zeros when the gradient vanishes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub grid: usize,
    /// Row-major `grid × grid` values in `[0, 1]`.
    pub values: Vec<f64>,
    pub sample_id: u64,
    pub objective: Objective,
}

impl AttributionMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Gradient of one sample's loss with respect to the encoder features `A`.
///
/// The encoder is run once, its output re-entered as a fresh leaf, and the
/// rest of the model is evaluated on top of that leaf, so the gradient
/// stops at `A` without touching any parameter.
pub fn grad_attribution(
    model: &MultimodalModel,
    reference: Option<&MultimodalModel>,
    sample: &PreferenceSample,
    objective: Objective,
    beta: f64,
) -> Result<AttributionMap> {
    if sample.chosen.is_empty() || (objective == Objective::Dpo && sample.rejected.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "sample {} has an empty response",
            sample.id
        )));
    }
    let mut g = Graph::new();
    let mb = model.bind(&mut g, true);
    let encoded = model.encode_image(&mut g, &mb, &sample.image)?;
    let a = g.param(g.value(encoded).clone());
    let visual = model.project(&mut g, &mb, a)?;
    let lp_c =
        model.response_logprob_from_visual(&mut g, &mb, visual, &sample.query, &sample.chosen)?;
    let loss = match objective {
        Objective::Sft => g.scale(lp_c, -1.0 / sample.chosen.len() as f64)?,
        Objective::Dpo => {
            let reference = reference.ok_or_else(|| {
                Error::InvalidArgument("dpo attribution needs a reference model".into())
            })?;
            let (ref_c, ref_r) = reference_logprobs(reference, sample)?;
            let lp_r = model.response_logprob_from_visual(
                &mut g,
                &mb,
                visual,
                &sample.query,
                &sample.rejected,
            )?;
            dpo_term(&mut g, lp_c, lp_r, ref_c, ref_r, beta)?
        }
    };
    let grads = g.backward(loss)?;
    let da = grads.wrt(a);
    let mut values: Vec<f64> = (0..da.rows())
        .map(|r| da.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(AttributionMap {
        grid: model.grid(),
        values,
        sample_id: sample.id,
        objective,
    })
}

/// Fraction of the map's total mass inside one scene cell. Patches are
/// assigned to the scene cell containing them.
pub fn focus_mass(map: &AttributionMap, cell: (usize, usize)) -> f64 {
    let total: f64 = map.values.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let scene_cell = |p: usize| p * GRID / map.grid;
    let mut inside = 0.0;
    for r in 0..map.grid {
        for c in 0..map.grid {
            if (scene_cell(r), scene_cell(c)) == cell {
                inside += map.at(r, c);
            }
        }
    }
    inside / total
}

/// Writes `{stem}.pgm` (8-bit grayscale, one pixel per patch) and
/// `{stem}.txt` with the full-precision values, one grid row per line.
pub fn write_attribution(dir: &Path, stem: &str, map: &AttributionMap) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut pgm = format!("P5\n{} {}\n255\n", map.grid, map.grid).into_bytes();
    pgm.extend(
        map.values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(dir.join(format!("{stem}.pgm")), pgm)?;
    let mut txt = String::new();
    for r in 0..map.grid {
        let row: Vec<String> = (0..map.grid).map(|c| format!("{}", map.at(r, c))).collect();
        writeln!(txt, "{}", row.join(" ")).expect("writing to a string");
    }
    std::fs::write(dir.join(format!("{stem}.txt")), txt)?;
    Ok(())
}

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::templates::Answer;
use crate::error::{Error, Result};
use crate::model::component_rng;

/// How a rejected response is derived from the chosen one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Another value of the same answer type.
    #[default]
    WrongValue,
    /// A value carried by a different object in the same scene.
    WrongAttribute,
    /// The answer is cut off.
    Truncation,
    /// The answer is buried in hedging next to a wrong alternative.
    VerboseHedge,
}

impl CorruptionMode {
    pub const ALL: [CorruptionMode; 4] = [
        CorruptionMode::WrongValue,
        CorruptionMode::WrongAttribute,
        CorruptionMode::Truncation,
        CorruptionMode::VerboseHedge,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::Config(format!("unknown corruption mode `{name}`")))
    }
}

fn wrong_value(answer: &Answer, rng: &mut impl rand::Rng) -> String {
    let others: Vec<&&str> = answer
        .kind
        .pool()
        .iter()
        .filter(|&&v| v != answer.value)
        .collect();
    others
        .choose(rng)
        .expect("every answer pool has an alternative")
        .to_string()
}

/// Rejected answer words for `answer`; never equal to `[answer.value]`.
///
/// `scene_values` lists same-kind values found elsewhere in the scene; when
/// it is empty `WrongAttribute` falls back to `WrongValue`.
pub fn corrupt_response(
    answer: &Answer,
    mode: CorruptionMode,
    scene_values: &[String],
    seed: u64,
) -> Vec<String> {
    let mut rng = component_rng(seed, 2);
    match mode {
        CorruptionMode::WrongValue => vec![wrong_value(answer, &mut rng)],
        CorruptionMode::WrongAttribute => {
            let options: Vec<&String> = scene_values
                .iter()
                .filter(|v| **v != answer.value)
                .collect();
            match options.choose(&mut rng) {
                Some(v) => vec![v.to_string()],
                None => vec![wrong_value(answer, &mut rng)],
            }
        }
        CorruptionMode::Truncation => Vec::new(),
        CorruptionMode::VerboseHedge => {
            let other = wrong_value(answer, &mut rng);
            [
                "it",
                "might",
                "be",
                answer.value.as_str(),
                "or",
                other.as_str(),
                ",",
                "i",
                "am",
                "not",
                "sure",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect()
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::data::{detokenize, strip_think, token, DataSample, Domain, EOS};
use crate::error::Result;
use crate::image::Image;
use crate::model::MultimodalModel;

use super::par_map;

/// A produced response, as words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Answer {
    pub words: Vec<String>,
    /// Generation stopped at the length budget rather than at end-of-sequence.
    pub hit_limit: bool,
}

/// Anything that can answer a question about an image.
pub trait Answerer: Sync {
    fn answer(&self, image: &Image, query: &[usize]) -> Result<Answer>;
}

impl<A: Answerer + ?Sized> Answerer for &A {
    fn answer(&self, image: &Image, query: &[usize]) -> Result<Answer> {
        (**self).answer(image, query)
    }
}

/// Greedy decoding from a trained model.
pub struct ModelAnswerer<'a> {
    pub model: &'a MultimodalModel,
    pub max_new: usize,
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&self, image: &Image, query: &[usize]) -> Result<Answer> {
        let decoded = self
            .model
            .greedy_decode(image, query, token(EOS), self.max_new)?;
        let text = detokenize(&decoded.tokens)?;
        Ok(Answer {
            words: text
                .split(' ')
                .filter(|w| !w.is_empty())
                .map(str::to_string)
                .collect(),
            hit_limit: decoded.hit_limit,
        })
    }
}

/// Wraps an answerer so it only ever sees an all-black image.
pub struct ImageAblated<A>(pub A);

impl<A: Answerer> Answerer for ImageAblated<A> {
    fn answer(&self, image: &Image, query: &[usize]) -> Result<Answer> {
        let blank = Image::filled(image.width(), image.height(), [0, 0, 0]);
        self.0.answer(&blank, query)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaResult {
    /// `(domain, correct, total)` for each domain present, in canonical order.
    pub per_domain: Vec<(Domain, usize, usize)>,
    /// Ids of samples whose decode ran out of budget; all are scored wrong.
    pub flagged: Vec<u64>,
}

impl VqaResult {
    pub fn accuracy(&self, domain: Domain) -> Option<f64> {
        self.per_domain
            .iter()
            .find(|(d, _, _)| *d == domain)
            .map(|&(_, c, t)| c as f64 / t as f64)
    }

    /// Unweighted mean of the per-domain accuracies.
    pub fn macro_accuracy(&self) -> f64 {
        if self.per_domain.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .per_domain
            .iter()
            .map(|&(_, c, t)| c as f64 / t as f64)
            .sum();
        sum / self.per_domain.len() as f64
    }
}

/// Exact match after removing reasoning spans.
fn is_correct(answer: &Answer, gold: &str) -> bool {
    if answer.hit_limit {
        return false;
    }
    let words: Vec<&str> = answer.words.iter().map(String::as_str).collect();
    strip_think(&words).join(" ") == gold
}

pub fn vqa_eval(
    answerer: &dyn Answerer,
    samples: &[&DataSample],
    workers: usize,
) -> Result<VqaResult> {
    let outcomes = par_map(samples, workers, |s| {
        let answer = answerer.answer(&s.image, &s.query_tokens()?)?;
        Ok((is_correct(&answer, &s.answer), answer.hit_limit))
    })?;
    let mut per_domain = Vec::new();
    for domain in Domain::ALL {
        let mut correct = 0;
        let mut total = 0;
        for (s, (ok, _)) in samples.iter().zip(&outcomes) {
            if s.domain == domain {
                total += 1;
                correct += usize::from(*ok);
            }
        }
        if total > 0 {
            per_domain.push((domain, correct, total));
        }
    }
    let flagged = samples
        .iter()
        .zip(&outcomes)
        .filter(|(_, (_, hit))| *hit)
        .map(|(s, _)| s.id)
        .collect();
    Ok(VqaResult {
        per_domain,
        flagged,
    })
}

//! The miniature multimodal model: vision encoder(s) → projector → decoder LM.

mod layers;
mod lm;
mod projector;
mod vision;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use lm::{LanguageModel, LmConfig};
pub use projector::Projector;
pub use vision::{ensemble_encode, patchify, unpatchify, EncoderConfig, VisionEncoder};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::image::Image;
use crate::params::{Bound, GradMap, Param, Parameterized};
use crate::tensor::Tensor;

/// Everything needed to rebuild a [`MultimodalModel`]'s parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoders: Vec<EncoderConfig>,
    /// Widths before/after each projector layer; defaults to
    /// `[Σ encoder dims, lm dim, lm dim]` when empty.
    #[serde(default)]
    pub projector_dims: Vec<usize>,
    pub lm: LmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoders: vec![EncoderConfig::default()],
            projector_dims: Vec::new(),
            lm: LmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.encoders.iter().map(|e| e.embed_dim).sum()
    }

    pub fn resolved_projector_dims(&self) -> Vec<usize> {
        if self.projector_dims.is_empty() {
            vec![self.feature_dim(), self.lm.embed_dim, self.lm.embed_dim]
        } else {
            self.projector_dims.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.encoders.first() else {
            return Err(Error::Config("model needs at least one encoder".into()));
        };
        for e in &self.encoders {
            e.validate()?;
            if e.num_patches() != first.num_patches() || e.image_size != first.image_size {
                return Err(Error::Config(
                    "ensemble encoders must share the patch grid".into(),
                ));
            }
        }
        self.lm.validate()?;
        let dims = self.resolved_projector_dims();
        if dims.len() < 2
            || dims[0] != self.feature_dim()
            || *dims.last().unwrap() != self.lm.embed_dim
        {
            return Err(Error::Config(format!(
                "projector dims {dims:?} must map {} to {}",
                self.feature_dim(),
                self.lm.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Projector,
    Lm,
}

/// Layout of an assembled `[visual][query][response]` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub visual_len: usize,
    pub query_len: usize,
    pub response_len: usize,
}

impl SequenceLayout {
    pub fn new(
        visual_len: usize,
        query_len: usize,
        response_len: usize,
        max_len: usize,
    ) -> Result<Self> {
        let layout = Self {
            visual_len,
            query_len,
            response_len,
        };
        if layout.len() > max_len {
            return Err(Error::SequenceOverflow {
                len: layout.len(),
                max: max_len,
            });
        }
        if visual_len + query_len == 0 {
            return Err(Error::InvalidArgument(
                "a response needs a preceding context".into(),
            ));
        }
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.visual_len + self.query_len + self.response_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sequence positions holding response tokens.
    pub fn response_positions(&self) -> Range<usize> {
        let start = self.visual_len + self.query_len;
        start..start + self.response_len
    }

    /// 1 exactly on response-token positions.
    pub fn loss_mask(&self) -> Vec<f64> {
        let r = self.response_positions();
        (0..self.len())
            .map(|i| if r.contains(&i) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Per-component parameter bindings on one graph.
pub struct ModelBinding {
    pub encoders: Vec<Bound>,
    pub projector: Bound,
    pub lm: Bound,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// The token budget ran out before an end-of-sequence token.
    pub hit_limit: bool,
}

/// Vision encoder(s) + projector + language model: the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalModel {
    pub encoders: Vec<VisionEncoder>,
    pub projector: Projector,
    pub lm: LanguageModel,
}

impl MultimodalModel {
    /// Fresh Gaussian initialization. Each component draws from its own
    /// stream so a component's init does not depend on the others.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoders = config
            .encoders
            .iter()
            .enumerate()
            .map(|(i, c)| VisionEncoder::new(c.clone(), &mut component_rng(seed, 1 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let projector = Projector::with_dims(
            config.resolved_projector_dims(),
            &mut component_rng(seed, 100),
        );
        let lm = LanguageModel::new(config.lm.clone(), &mut component_rng(seed, 200))?;
        Ok(Self {
            encoders,
            projector,
            lm,
        })
    }

    pub fn from_parts(
        encoders: Vec<VisionEncoder>,
        projector: Projector,
        lm: LanguageModel,
    ) -> Result<Self> {
        let model = Self {
            encoders,
            projector,
            lm,
        };
        model.config().validate()?;
        Ok(model)
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoders: self.encoders.iter().map(|e| e.config.clone()).collect(),
            projector_dims: self.projector.dims().to_vec(),
            lm: self.lm.config.clone(),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.encoders[0].config.num_patches()
    }

    pub fn grid(&self) -> usize {
        self.encoders[0].config.grid()
    }

    pub fn set_trainable(&mut self, component: Component, trainable: bool) {
        match component {
            Component::Encoder => self
                .encoders
                .iter_mut()
                .for_each(|e| e.params.set_all_trainable(trainable)),
            Component::Projector => self.projector.params.set_all_trainable(trainable),
            Component::Lm => self.lm.params.set_all_trainable(trainable),
        }
    }

    /// Deep copy with every parameter frozen: a reference policy.
    pub fn frozen_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.set_all_trainable(false);
        copy
    }

    pub fn component_hash(&self, component: Component) -> String {
        match component {
            Component::Encoder => {
                let hashes: Vec<String> = self
                    .encoders
                    .iter()
                    .map(|e| e.params.param_hash())
                    .collect();
                hashes.join(":")
            }
            Component::Projector => self.projector.params.param_hash(),
            Component::Lm => self.lm.params.param_hash(),
        }
    }

    pub fn bind(&self, g: &mut Graph, frozen: bool) -> ModelBinding {
        ModelBinding {
            encoders: self
                .encoders
                .iter()
                .map(|e| e.params.bind(g, frozen))
                .collect(),
            projector: self.projector.params.bind(g, frozen),
            lm: self.lm.params.bind(g, frozen),
        }
    }

    /// Parameter values in [`Parameterized::visit`] order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.push(p.value.clone()));
        out
    }

    /// A binding over caller-provided leaves, in [`Self::param_tensors`]
    /// order. Used to differentiate with respect to every parameter.
    pub fn bind_vars(&self, vars: &[Var]) -> ModelBinding {
        let mut it = vars.iter().copied();
        let mut take = |names: Vec<&str>| {
            Bound::from_pairs(
                names
                    .into_iter()
                    .map(|n| (n.to_string(), it.next().expect("enough vars"))),
            )
        };
        ModelBinding {
            encoders: self
                .encoders
                .iter()
                .map(|e| take(e.params.names().collect()))
                .collect(),
            projector: take(self.projector.params.names().collect()),
            lm: take(self.lm.params.names().collect()),
        }
    }

    /// Encoder features `A` (concatenated per patch for an ensemble).
    pub fn encode_image(&self, g: &mut Graph, mb: &ModelBinding, image: &Image) -> Result<Var> {
        match self.encoders.as_slice() {
            [single] => single.forward(g, &mb.encoders[0], image),
            [a, b] => ensemble_encode(g, (a, &mb.encoders[0]), (b, &mb.encoders[1]), image),
            many => {
                let feats = many
                    .iter()
                    .zip(&mb.encoders)
                    .map(|(e, b)| e.forward(g, b, image))
                    .collect::<Result<Vec<_>>>()?;
                g.concat_cols(&feats)
            }
        }
    }

    /// Visual token embeddings in LM space.
    pub fn project(&self, g: &mut Graph, mb: &ModelBinding, features: Var) -> Result<Var> {
        self.projector.forward(g, &mb.projector, features)
    }

    /// Embeds `[visual][query][response]` and returns the layout.
    pub fn assemble_sequence(
        &self,
        g: &mut Graph,
        mb: &ModelBinding,
        visual: Var,
        query: &[usize],
        response: &[usize],
    ) -> Result<(Var, SequenceLayout)> {
        let layout = SequenceLayout::new(
            g.value(visual).rows(),
            query.len(),
            response.len(),
            self.lm.config.max_seq_len,
        )?;
        let tokens: Vec<usize> = query.iter().chain(response).copied().collect();
        let embedded = self.lm.embed(g, &mb.lm, Some(visual), &tokens)?;
        Ok((embedded, layout))
    }

    /// `log π(response | visual, query)` as a scalar node, teacher-forced.
    pub fn response_logprob_from_visual(
        &self,
        g: &mut Graph,
        mb: &ModelBinding,
        visual: Var,
        query: &[usize],
        response: &[usize],
    ) -> Result<Var> {
        self.lm.check_tokens(response)?;
        let (embedded, layout) = self.assemble_sequence(g, mb, visual, query, response)?;
        if layout.response_len == 0 {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let hidden = self.lm.hidden(g, &mb.lm, embedded)?;
        let r = layout.response_positions();
        let rows = g.slice_rows(hidden, r.start - 1, r.end - 1)?;
        let logits = self.lm.head(g, &mb.lm, rows)?;
        g.token_logprob_sum(logits, response, &vec![1.0; response.len()])
    }

    pub fn response_logprob(
        &self,
        g: &mut Graph,
        mb: &ModelBinding,
        image: &Image,
        query: &[usize],
        response: &[usize],
    ) -> Result<Var> {
        let feats = self.encode_image(g, mb, image)?;
        let visual = self.project(g, mb, feats)?;
        self.response_logprob_from_visual(g, mb, visual, query, response)
    }

    /// Logits at every position of `[visual][tokens]`.
    pub fn sequence_logits(
        &self,
        g: &mut Graph,
        mb: &ModelBinding,
        image: &Image,
        tokens: &[usize],
    ) -> Result<Var> {
        let feats = self.encode_image(g, mb, image)?;
        let visual = self.project(g, mb, feats)?;
        let embedded = self.lm.embed(g, &mb.lm, Some(visual), tokens)?;
        let hidden = self.lm.hidden(g, &mb.lm, embedded)?;
        self.lm.head(g, &mb.lm, hidden)
    }

    /// Scalar log-probability value with frozen parameters.
    pub fn score(&self, image: &Image, query: &[usize], response: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let mb = self.bind(&mut g, true);
        let lp = self.response_logprob(&mut g, &mb, image, query, response)?;
        Ok(g.value(lp).item())
    }

    /// Greedy decoding after `query` until `eos` or `max_new` tokens.
    pub fn greedy_decode(
        &self,
        image: &Image,
        query: &[usize],
        eos: usize,
        max_new: usize,
    ) -> Result<Decoded> {
        let mut g = Graph::new();
        let mb = self.bind(&mut g, true);
        let feats = self.encode_image(&mut g, &mb, image)?;
        let visual = self.project(&mut g, &mb, feats)?;
        let mut tokens = query.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let embedded = self.lm.embed(&mut g, &mb.lm, Some(visual), &tokens)?;
            let hidden = self.lm.hidden(&mut g, &mb.lm, embedded)?;
            let len = g.value(hidden).rows();
            let last = g.slice_rows(hidden, len - 1, len)?;
            let logits = self.lm.head(&mut g, &mb.lm, last)?;
            let next = argmax(g.value(logits).data());
            if next == eos {
                return Ok(Decoded {
                    tokens: out,
                    hit_limit: false,
                });
            }
            out.push(next);
            tokens.push(next);
            if self.num_patches() + tokens.len() >= self.lm.config.max_seq_len {
                break;
            }
        }
        Ok(Decoded {
            tokens: out,
            hit_limit: true,
        })
    }

    /// Gradients of every trainable leaf in `mb`, keyed by qualified name.
    pub fn collect_grads(&self, g: &Graph, mb: &ModelBinding, grads: &Gradients) -> GradMap {
        let mut out = GradMap::new();
        for (i, b) in mb.encoders.iter().enumerate() {
            b.collect_grads(g, grads, &format!("enc{i}."), &mut out);
        }
        mb.projector.collect_grads(g, grads, "proj.", &mut out);
        mb.lm.collect_grads(g, grads, "lm.", &mut out);
        out
    }
}

impl Parameterized for MultimodalModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, e) in self.encoders.iter().enumerate() {
            let prefix = format!("enc{i}.");
            e.params.visit(&mut |n, p| f(&format!("{prefix}{n}"), p));
        }
        self.projector
            .params
            .visit(&mut |n, p| f(&format!("proj.{n}"), p));
        self.lm.params.visit(&mut |n, p| f(&format!("lm.{n}"), p));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            let prefix = format!("enc{i}.");
            e.params
                .visit_mut(&mut |n, p| f(&format!("{prefix}{n}"), p));
        }
        self.projector
            .params
            .visit_mut(&mut |n, p| f(&format!("proj.{n}"), p));
        self.lm
            .params
            .visit_mut(&mut |n, p| f(&format!("lm.{n}"), p));
    }
}

pub(crate) fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;

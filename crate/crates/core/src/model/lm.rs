use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, INIT_STD};
use super::vision::default_mlp_ratio;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            embed_dim: 128,
            depth: 2,
            heads: 4,
            max_seq_len: 160,
            mlp_ratio: 4,
        }
    }
}

impl LmConfig {
    /// Depth for the named size preset: `0.5B`, `1.5B`, `3B`, `7B`.
    pub fn preset_depth(name: &str) -> Result<usize> {
        match name {
            "0.5B" => Ok(2),
            "1.5B" => Ok(3),
            "3B" => Ok(4),
            "7B" => Ok(6),
            other => Err(Error::Config(format!(
                "unknown language model preset `{other}`"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "lm embed_dim {} must be divisible by heads {} (depth {})",
                self.embed_dim, self.heads, self.depth
            )));
        }
        if self.vocab_size < 2 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "lm needs vocab_size >= 2 and max_seq_len >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Decoder-only transformer with causal attention over the whole sequence,
/// including any prefix embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: ParamStore,
}

impl LanguageModel {
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamStore::new();
        params.insert("tok", Tensor::randn(&[config.vocab_size, d], INIT_STD, rng));
        params.insert(
            "pos",
            Tensor::randn(&[config.max_seq_len, d], INIT_STD, rng),
        );
        for i in 0..config.depth {
            layers::init_block(
                &mut params,
                &format!("blocks.{i}"),
                d,
                config.mlp_ratio,
                config.depth,
                rng,
            );
        }
        layers::init_layer_norm(&mut params, "ln_f", d);
        layers::init_linear(&mut params, "head", d, config.vocab_size, INIT_STD, rng);
        Ok(Self { config, params })
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Prefix embeddings followed by embedded `tokens`, plus positions.
    pub fn embed(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: Option<Var>,
        tokens: &[usize],
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let prefix_len = prefix.map_or(0, |p| g.value(p).rows());
        let len = prefix_len + tokens.len();
        if len == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        if len > self.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len,
                max: self.config.max_seq_len,
            });
        }
        let mut parts = Vec::with_capacity(2);
        parts.extend(prefix);
        if !tokens.is_empty() {
            parts.push(g.embedding(b.var("tok"), tokens)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let pos = g.slice_rows(b.var("pos"), 0, len)?;
        g.add(x, pos)
    }

    /// Final-norm hidden states `[len × d]` for an embedded sequence.
    pub fn hidden(&self, g: &mut Graph, b: &Bound, embedded: Var) -> Result<Var> {
        let mut x = embedded;
        for i in 0..self.config.depth {
            x = layers::block(g, b, &format!("blocks.{i}"), x, self.config.heads, true)?;
        }
        layers::layer_norm(g, b, "ln_f", x)
    }

    pub fn head(&self, g: &mut Graph, b: &Bound, hidden: Var) -> Result<Var> {
        layers::linear(g, b, "head", hidden)
    }

    /// Mean-pooled hidden states over a text-only sequence.
    pub fn text_features(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, true);
        let x = self.embed(&mut g, &b, None, tokens)?;
        let h = self.hidden(&mut g, &b, x)?;
        let pooled = g.mean_rows(h)?;
        Ok(g.value(pooled).data().to_vec())
    }
}

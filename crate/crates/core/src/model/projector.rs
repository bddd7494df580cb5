use rand::Rng;

use super::layers::{self, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// A stack of affine layers with GELU between consecutive layers.
///
/// Layer `i` stores `"{i}.w"` (`in×out`) and `"{i}.b"`. Each layer carries
/// its own frozen flag through the parameters' trainable bits.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    dims: Vec<usize>,
    pub params: ParamStore,
}

impl Projector {
    /// The standard two-layer projector `in → out → out`.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::with_dims(vec![in_dim, out_dim, out_dim], rng)
    }

    /// `dims` lists the width before and after every layer.
    pub fn with_dims(dims: Vec<usize>, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "a projector needs at least one layer");
        let mut params = ParamStore::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers::init_linear(&mut params, &i.to_string(), w[0], w[1], INIT_STD, rng);
        }
        Self { dims, params }
    }

    /// Appends freshly initialized trainable layers mapping to `widths`.
    pub fn push_layers(&mut self, widths: &[usize], rng: &mut impl Rng) {
        for &w in widths {
            let i = self.num_layers();
            let input = *self.dims.last().expect("nonempty dims");
            layers::init_linear(&mut self.params, &i.to_string(), input, w, INIT_STD, rng);
            self.dims.push(w);
        }
    }

    /// Keeps only the first `n` layers.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {n} of {} projector layers",
                self.num_layers()
            )));
        }
        let mut params = ParamStore::new();
        for i in 0..n {
            for suffix in ["w", "b"] {
                let name = format!("{i}.{suffix}");
                let p = self.params.param(&name).expect("layer parameter exists");
                params.insert(name.clone(), p.value.clone());
                params.set_trainable_prefix(&name, p.trainable);
            }
        }
        Ok(Self {
            dims: self.dims[..=n].to_vec(),
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("nonempty dims")
    }

    pub fn set_layer_frozen(&mut self, layer: usize, frozen: bool) {
        self.params
            .set_trainable_prefix(&format!("{layer}."), !frozen);
    }

    pub fn layer_frozen(&self, layer: usize) -> bool {
        self.params
            .param(&format!("{layer}.w"))
            .is_some_and(|p| !p.trainable)
    }

    pub fn layer_weights(&self, layer: usize) -> Result<(&Tensor, &Tensor)> {
        Ok((
            self.params.get(&format!("{layer}.w"))?,
            self.params.get(&format!("{layer}.b"))?,
        ))
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let mut x = x;
        for i in 0..self.num_layers() {
            if i > 0 {
                x = g.gelu(x)?;
            }
            x = layers::linear(g, b, &i.to_string(), x)?;
        }
        Ok(x)
    }
}

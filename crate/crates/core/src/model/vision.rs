use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, INIT_STD};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

pub(crate) fn default_mlp_ratio() -> usize {
    4
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 1,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// Depth for the named size preset: `B`, `L`, `So`, `g`.
    pub fn preset_depth(name: &str) -> Result<usize> {
        match name {
            "B" => Ok(1),
            "L" => Ok(2),
            "So" => Ok(3),
            "g" => Ok(4),
            other => Err(Error::Config(format!("unknown encoder preset `{other}`"))),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder embed_dim {} must be divisible by heads {} (depth {})",
                self.embed_dim, self.heads, self.depth
            )));
        }
        Ok(())
    }
}

/// Splits an `H×W×3` image into non-overlapping row-major patches, each
/// flattened row-major with interleaved channels.
pub fn patchify(image: &Image, cfg: &EncoderConfig) -> Result<Tensor> {
    if image.width() != cfg.image_size || image.height() != cfg.image_size {
        return dim_err(format!(
            "image is {}x{}, encoder expects {}x{}",
            image.width(),
            image.height(),
            cfg.image_size,
            cfg.image_size
        ));
    }
    let values = image.unit_values();
    let (ps, grid, w) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pr in 0..grid {
        for pc in 0..grid {
            for y in pr * ps..(pr + 1) * ps {
                let start = (y * w + pc * ps) * CHANNELS;
                out.extend_from_slice(&values[start..start + ps * CHANNELS]);
            }
        }
    }
    Tensor::matrix(cfg.num_patches(), cfg.patch_dim(), out)
}

/// Inverse of [`patchify`], back to row-major `H×W×3` values.
pub fn unpatchify(patches: &Tensor, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return dim_err(format!("patch tensor shape {:?}", patches.shape()));
    }
    let (ps, grid, w) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let mut out = vec![0.0; w * w * CHANNELS];
    for pr in 0..grid {
        for pc in 0..grid {
            let patch = patches.row(pr * grid + pc);
            for dy in 0..ps {
                let dst = ((pr * ps + dy) * w + pc * ps) * CHANNELS;
                out[dst..dst + ps * CHANNELS]
                    .copy_from_slice(&patch[dy * ps * CHANNELS..(dy + 1) * ps * CHANNELS]);
            }
        }
    }
    Ok(out)
}

/// Patch embedding + learned positions + bidirectional transformer blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl VisionEncoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut params = ParamStore::new();
        layers::init_linear(&mut params, "patch", config.patch_dim(), d, INIT_STD, rng);
        params.insert(
            "pos",
            Tensor::randn(&[config.num_patches(), d], INIT_STD, rng),
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
        Ok(Self { config, params })
    }

    /// Features `A`: `[num_patches × embed_dim]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: &Image) -> Result<Var> {
        let patches = g.constant(patchify(image, &self.config)?);
        let x = layers::linear(g, b, "patch", patches)?;
        let mut x = g.add(x, b.var("pos"))?;
        for i in 0..self.config.depth {
            x = layers::block(g, b, &format!("blocks.{i}"), x, self.config.heads, false)?;
        }
        layers::layer_norm(g, b, "ln_f", x)
    }

    /// Forward pass with frozen parameters, returning the feature values.
    pub fn features(&self, image: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, true);
        let a = self.forward(&mut g, &b, image)?;
        Ok(g.value(a).clone())
    }
}

/// Per-patch concatenation of two encoders' features.
pub fn ensemble_encode(
    g: &mut Graph,
    a: (&VisionEncoder, &Bound),
    b: (&VisionEncoder, &Bound),
    image: &Image,
) -> Result<Var> {
    if a.0.config.num_patches() != b.0.config.num_patches() {
        return Err(Error::Dimension(format!(
            "patch grids differ: {} vs {}",
            a.0.config.num_patches(),
            b.0.config.num_patches()
        )));
    }
    let fa = a.0.forward(g, a.1, image)?;
    let fb = b.0.forward(g, b.1, image)?;
    g.concat_cols(&[fa, fb])
}

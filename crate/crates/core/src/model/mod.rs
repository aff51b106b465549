//! Promptable segmentation model contract and implementations.
//!
//! A [`PromptableModel`] splits inference into an image encoder, run once
//! per image, and a prompt-conditioned mask decoder that can be called many
//! times against the cached [`ImageEmbedding`]. Decoders return logits at the
//! model's square input resolution.

mod checkpoint;
pub mod doubles;
mod lora;
mod params;
mod toy;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::maskcore::{BinaryMask, BoxPrompt, PointPrompt, Prompt};
use crate::raster::RgbImage;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use lora::{linear, lora_linear_forward, LoraAdapter, LoraConfig, LORA_TARGETS};
pub use params::{Param, ParamStore};
pub use toy::{inject_lora, ToyBackbone};

/// Architecture of the toy vision-transformer backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: String,
    /// Side length of the square model input.
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub decoder_depth: usize,
    pub decoder_mlp_dim: usize,
    /// Channels of the full-resolution pixel branch in the mask head.
    pub pixel_channels: usize,
    pub pixel_hidden: usize,
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: "toy-vit".into(),
            input_size: 128,
            patch_size: 8,
            embed_dim: 64,
            encoder_depth: 4,
            num_heads: 4,
            mlp_dim: 128,
            decoder_depth: 2,
            decoder_mlp_dim: 128,
            pixel_channels: 4,
            pixel_hidden: 16,
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.variant != "toy-vit" {
            return fail(format!("unknown encoder variant {:?}", self.variant));
        }
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "input size {} is not a multiple of patch size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
            || !self.embed_dim.is_multiple_of(2)
        {
            return fail(format!(
                "embed dim {} must be even and divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.lora.rank == 0 || self.lora.rank > self.embed_dim {
            return fail(format!(
                "lora rank {} must be in 1..={}",
                self.lora.rank, self.embed_dim
            ));
        }
        for t in &self.lora.targets {
            if !LORA_TARGETS.contains(&t.as_str()) {
                return fail(format!("unknown lora target {t:?}"));
            }
        }
        Ok(())
    }
}

/// Image-encoder output cached per image.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    /// Identifier of the model instance that produced it.
    pub model_id: u64,
    /// Digest of the encoded image.
    pub image_hash: u64,
    /// Patch grid side length.
    pub grid: usize,
    /// `grid² × channels` patch features.
    pub features: Tensor,
    /// `input² × 3` normalised pixels for the full-resolution mask branch.
    pub pixels: Tensor,
}

impl ImageEmbedding {
    /// Same embedding cut from the autograd graph.
    pub fn detach(&self) -> ImageEmbedding {
        ImageEmbedding {
            features: self.features.detach(),
            pixels: self.pixels.detach(),
            ..self.clone()
        }
    }

    /// Embedding values as `(grid_h, grid_w, channels)` nested vectors.
    pub fn to_grid(&self) -> Result<Vec<Vec<Vec<f32>>>> {
        let c = self.features.dims2()?.1;
        let t = self
            .features
            .to_dtype(candle_core::DType::F32)?
            .reshape((self.grid, self.grid, c))?;
        Ok(t.to_vec3()?)
    }
}

/// Prompts decoded together into one mask, in model-input coordinates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub points: Vec<PointPrompt>,
    pub boxes: Vec<BoxPrompt>,
}

impl PromptGroup {
    pub fn from_prompts<'a>(prompts: impl IntoIterator<Item = &'a Prompt>) -> Self {
        let mut g = PromptGroup::default();
        for p in prompts {
            g.push(*p);
        }
        g
    }

    pub fn push(&mut self, p: Prompt) {
        match p {
            Prompt::Point(p) => self.points.push(p),
            Prompt::Box(b) => self.boxes.push(b),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty()
    }

    /// Sparse token count: one per point, two per box.
    pub fn token_count(&self) -> usize {
        self.points.len() + 2 * self.boxes.len()
    }
}

/// Image encoder, prompt encoder and mask decoder behind one interface.
pub trait PromptableModel: Send + Sync {
    /// Side length of the square input the encoder accepts.
    fn input_size(&self) -> usize;

    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding>;

    /// One `input × input` logits grid for one prompt group.
    fn decode_mask(&self, embedding: &ImageEmbedding, prompts: &PromptGroup) -> Result<Tensor>;

    fn decode_many(&self, embedding: &ImageEmbedding, groups: &[PromptGroup]) -> Result<Vec<Tensor>> {
        groups.iter().map(|g| self.decode_mask(embedding, g)).collect()
    }
}

impl<M: PromptableModel + ?Sized> PromptableModel for std::sync::Arc<M> {
    fn input_size(&self) -> usize {
        (**self).input_size()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding> {
        (**self).encode_image(image)
    }

    fn decode_mask(&self, embedding: &ImageEmbedding, prompts: &PromptGroup) -> Result<Tensor> {
        (**self).decode_mask(embedding, prompts)
    }

    fn decode_many(&self, embedding: &ImageEmbedding, groups: &[PromptGroup]) -> Result<Vec<Tensor>> {
        (**self).decode_many(embedding, groups)
    }
}

/// Logits grid as a row-major `f32` vector plus its dimensions.
pub fn logits_to_vec(logits: &Tensor) -> Result<(usize, usize, Vec<f32>)> {
    let (h, w) = logits.dims2()?;
    let v = logits
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok((h, w, v))
}

/// Foreground where `logit > threshold`.
pub fn binarize(logits: &Tensor, threshold: f32) -> Result<BinaryMask> {
    let (h, w, v) = logits_to_vec(logits)?;
    BinaryMask::from_vec(h, w, v.into_iter().map(|x| x > threshold).collect())
}

/// `±magnitude` logits reproducing a mask exactly under `binarize(_, 0)`.
pub fn mask_to_logits(mask: &BinaryMask, magnitude: f32) -> Result<Tensor> {
    let v: Vec<f32> = mask
        .data()
        .iter()
        .map(|&b| if b { magnitude } else { -magnitude })
        .collect();
    Ok(Tensor::from_vec(v, mask.dims(), &Device::Cpu)?)
}

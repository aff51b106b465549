//! Test doubles behind the [`PromptableModel`] interface.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use candle_core::{DType, Device, Tensor};

use super::{mask_to_logits, ImageEmbedding, PromptGroup, PromptableModel};
use crate::maskcore::BinaryMask;
use crate::raster::RgbImage;
use crate::{Error, Result};

const ORACLE_MODEL_ID: u64 = 0;

fn stub_embedding(image: &RgbImage) -> Result<ImageEmbedding> {
    Ok(ImageEmbedding {
        model_id: ORACLE_MODEL_ID,
        image_hash: image.content_hash(),
        grid: 1,
        features: Tensor::zeros((1, 1), DType::F32, &Device::Cpu)?,
        pixels: Tensor::zeros((1, 3), DType::F32, &Device::Cpu)?,
    })
}

/// Returns the ground-truth instance a prompt group points at.
///
/// Instances are registered per image (at model-input resolution). A group
/// with a box selects the instance whose bounding box overlaps it best;
/// otherwise the instance under the first positive point is returned.
#[derive(Debug, Default)]
pub struct GtOracleModel {
    input_size: usize,
    instances: RwLock<HashMap<u64, Vec<BinaryMask>>>,
    encode_calls: AtomicUsize,
}

impl GtOracleModel {
    pub fn new(input_size: usize) -> Self {
        Self {
            input_size,
            ..Default::default()
        }
    }

    pub fn register(&self, image: &RgbImage, masks: Vec<BinaryMask>) -> Result<()> {
        let s = self.input_size;
        if image.dims() != (s, s) || masks.iter().any(|m| m.dims() != (s, s)) {
            return Err(Error::shape((s, s), image.dims()));
        }
        self.instances
            .write()
            .expect("oracle lock poisoned")
            .insert(image.content_hash(), masks);
        Ok(())
    }

    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    fn select(&self, masks: &[BinaryMask], prompts: &PromptGroup) -> Option<BinaryMask> {
        if let Some(b) = prompts.boxes.first() {
            return masks
                .iter()
                .filter_map(|m| m.bounding_box().map(|bb| (bb.iou(b), m)))
                .filter(|(score, _)| *score > 0.0)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, m)| m.clone());
        }
        let p = prompts.points.iter().find(|p| p.is_positive())?;
        masks.iter().find(|m| m.get(p.row, p.col)).cloned()
    }
}

impl PromptableModel for GtOracleModel {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        stub_embedding(image)
    }

    fn decode_mask(&self, embedding: &ImageEmbedding, prompts: &PromptGroup) -> Result<Tensor> {
        let s = self.input_size;
        let table = self.instances.read().expect("oracle lock poisoned");
        let masks = table
            .get(&embedding.image_hash)
            .ok_or_else(|| Error::Model("oracle has no ground truth for this image".into()))?;
        let mask = self
            .select(masks, prompts)
            .unwrap_or_else(|| BinaryMask::new(s, s));
        mask_to_logits(&mask, 20.0)
    }
}

/// Predicts an empty mask for every prompt.
#[derive(Debug)]
pub struct EmptyModel {
    pub input_size: usize,
}

impl PromptableModel for EmptyModel {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding> {
        stub_embedding(image)
    }

    fn decode_mask(&self, _embedding: &ImageEmbedding, _prompts: &PromptGroup) -> Result<Tensor> {
        let s = self.input_size;
        Ok((Tensor::ones((s, s), DType::F32, &Device::Cpu)? * -20.0)?)
    }
}

//! Simulated interactive prompting.
//!
//! An initial point or box is drawn from the ground truth, the model predicts,
//! and corrective clicks are sampled from the largest error region of each
//! intermediate prediction until the click budget is spent or the prediction
//! matches the ground truth. Intermediate predictions are cut from the
//! autograd graph; only the final prediction carries gradients.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::maskcore::{
    box_from_mask, sample_correction_click, sample_point_in_mask, BinaryMask, ClickPlacement, Correction,
    PointPrompt, Prompt,
};
use crate::model::{binarize, ImageEmbedding, PromptGroup, PromptableModel};
use crate::raster::RgbImage;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Upper bound of the uniform draw for the number of corrections.
    pub max_corrections: usize,
    pub initial_point_probability: f64,
    /// Inclusive range of the extra margin added around box prompts.
    pub box_margin: (usize, usize),
    pub click_placement: ClickPlacement,
    /// Feed the previous mask logits back as a dense prompt. Not supported by
    /// any model here; kept so configurations can state it explicitly.
    pub dense_mask_prompt: bool,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            max_corrections: 5,
            initial_point_probability: 0.5,
            box_margin: (0, 10),
            click_placement: ClickPlacement::Random,
            dense_mask_prompt: false,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.initial_point_probability) {
            return Err(Error::Config(format!(
                "initial point probability {} outside [0, 1]",
                self.initial_point_probability
            )));
        }
        if self.box_margin.0 > self.box_margin.1 {
            return Err(Error::Config(format!(
                "empty box margin range {:?}",
                self.box_margin
            )));
        }
        if self.dense_mask_prompt {
            return Err(Error::Config("dense mask prompts are not supported".into()));
        }
        Ok(())
    }
}

/// The initial prompt followed by the corrective clicks, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub initial: Prompt,
    pub corrections: Vec<PointPrompt>,
}

impl PromptSet {
    pub fn new(initial: Prompt) -> Self {
        Self {
            initial,
            corrections: Vec::new(),
        }
    }

    /// Initial prompt plus the first `k` corrections.
    pub fn group(&self, k: usize) -> PromptGroup {
        let mut g = PromptGroup::default();
        g.push(self.initial);
        g.points.extend(self.corrections.iter().take(k).copied());
        g
    }

    pub fn full_group(&self) -> PromptGroup {
        self.group(self.corrections.len())
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        std::iter::once(self.initial)
            .chain(self.corrections.iter().map(|&p| Prompt::Point(p)))
            .collect()
    }
}

/// Result of one simulated interaction.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub prompts: PromptSet,
    /// Final logits, attached to the autograd graph of the embedding.
    pub logits: Tensor,
    /// Binarized prediction each correction was sampled from.
    pub intermediate: Vec<BinaryMask>,
    /// The loop stopped because a prediction matched the ground truth.
    pub converged: bool,
}

/// Random point inside the mask or box around it.
pub fn sample_initial_prompt<R: Rng + ?Sized>(
    gt: &BinaryMask,
    cfg: &SimulationConfig,
    rng: &mut R,
) -> Result<Prompt> {
    if gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    if rng.gen_bool(cfg.initial_point_probability) {
        Ok(Prompt::Point(sample_point_in_mask(gt, rng)?))
    } else {
        sample_box_prompt(gt, cfg.box_margin, rng)
    }
}

/// Box around the mask with a margin drawn uniformly from `margin`.
pub fn sample_box_prompt<R: Rng + ?Sized>(
    gt: &BinaryMask,
    margin: (usize, usize),
    rng: &mut R,
) -> Result<Prompt> {
    let m = rng.gen_range(margin.0..=margin.1);
    Ok(Prompt::Box(box_from_mask(gt, m)?))
}

/// Number of corrective clicks for one simulation, uniform over
/// `0..=max_corrections`.
pub fn draw_n<R: Rng + ?Sized>(cfg: &SimulationConfig, rng: &mut R) -> usize {
    rng.gen_range(0..=cfg.max_corrections)
}

/// Encodes `image` and runs the interaction loop from a sampled initial prompt.
pub fn simulate_interaction<M, R>(
    model: &M,
    image: &RgbImage,
    gt: &BinaryMask,
    n: usize,
    cfg: &SimulationConfig,
    rng: &mut R,
) -> Result<Simulation>
where
    M: PromptableModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let initial = sample_initial_prompt(gt, cfg, rng)?;
    let embedding = model.encode_image(image)?;
    simulate_from(model, &embedding, gt, initial, n, cfg.click_placement, rng)
}

/// Interaction loop from a given initial prompt on a precomputed embedding.
///
/// Prediction `k` is conditioned on the initial prompt plus exactly `k`
/// corrections.
pub fn simulate_from<M, R>(
    model: &M,
    embedding: &ImageEmbedding,
    gt: &BinaryMask,
    initial: Prompt,
    n: usize,
    placement: ClickPlacement,
    rng: &mut R,
) -> Result<Simulation>
where
    M: PromptableModel + ?Sized,
    R: Rng + ?Sized,
{
    if gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut prompts = PromptSet::new(initial);
    let mut intermediate = Vec::new();
    let mut converged = false;
    let frozen = embedding.detach();
    for _ in 0..n {
        let logits = model.decode_mask(&frozen, &prompts.full_group())?.detach();
        let pred = binarize(&logits, 0.0)?;
        let correction = sample_correction_click(&pred, gt, placement, rng)?;
        intermediate.push(pred);
        match correction {
            Correction::Converged => {
                converged = true;
                break;
            }
            Correction::Click(p) => prompts.corrections.push(p),
        }
    }
    let logits = model.decode_mask(embedding, &prompts.full_group())?;
    Ok(Simulation {
        prompts,
        logits,
        intermediate,
        converged,
    })
}

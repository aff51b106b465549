//! Two-stage inference: preprocessing, automatic masks from detector boxes,
//! and interactive per-mask refinement sessions.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use candle_core::Tensor;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::maskcore::components::{label_components, Connectivity};
use crate::maskcore::{BinaryMask, BoxPrompt, PointPrompt, Prompt};
use crate::model::{ImageEmbedding, PromptGroup, PromptableModel};
use crate::raster::{resize_bilinear, RgbImage};
use crate::{Error, Result};

/// Longest side after preprocessing for full-size backbones.
pub const DEFAULT_TARGET_SIZE: usize = 1024;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;

/// How an original image maps into the square model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecord {
    pub original: (usize, usize),
    pub scale: f64,
    /// Content region size before padding.
    pub scaled: (usize, usize),
    /// Side of the padded square.
    pub padded: usize,
    /// Zero rows added at the bottom and columns at the right.
    pub pad: (usize, usize),
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl PreprocessRecord {
    pub fn new(height: usize, width: usize, target: usize) -> Result<Self> {
        if height == 0 || width == 0 || target == 0 {
            return Err(Error::Config(format!(
                "cannot preprocess a {height}x{width} image to {target}"
            )));
        }
        let scale = target as f64 / height.max(width) as f64;
        let sh = round_half_up(height as f64 * scale).clamp(1, target);
        let sw = round_half_up(width as f64 * scale).clamp(1, target);
        Ok(Self {
            original: (height, width),
            scale,
            scaled: (sh, sw),
            padded: target,
            pad: (target - sh, target - sw),
        })
    }

    fn forward(&self, v: usize, scaled_len: usize) -> usize {
        round_half_up(v as f64 * self.scale).min(scaled_len - 1)
    }

    fn backward(&self, v: usize, original_len: usize) -> usize {
        round_half_up(v as f64 / self.scale).min(original_len - 1)
    }

    pub fn point_to_model(&self, p: PointPrompt) -> PointPrompt {
        PointPrompt {
            row: self.forward(p.row, self.scaled.0),
            col: self.forward(p.col, self.scaled.1),
            polarity: p.polarity,
        }
    }

    pub fn point_to_original(&self, p: PointPrompt) -> PointPrompt {
        PointPrompt {
            row: self.backward(p.row, self.original.0),
            col: self.backward(p.col, self.original.1),
            polarity: p.polarity,
        }
    }

    pub fn box_to_model(&self, b: BoxPrompt) -> BoxPrompt {
        BoxPrompt::new(
            self.forward(b.row_min, self.scaled.0),
            self.forward(b.col_min, self.scaled.1),
            self.forward(b.row_max, self.scaled.0),
            self.forward(b.col_max, self.scaled.1),
        )
    }

    pub fn prompt_to_model(&self, p: &Prompt) -> Prompt {
        match *p {
            Prompt::Point(pt) => Prompt::Point(self.point_to_model(pt)),
            Prompt::Box(b) => Prompt::Box(self.box_to_model(b)),
        }
    }
}

/// Bilinear resize so the longer side equals `target`, then zero padding at
/// the bottom and right up to `target × target`.
pub fn preprocess(image: &RgbImage, target: usize) -> Result<(RgbImage, PreprocessRecord)> {
    let (h, w) = image.dims();
    let rec = PreprocessRecord::new(h, w, target)?;
    let (sh, sw) = rec.scaled;
    let scaled = if (sh, sw) == (h, w) {
        image.clone()
    } else {
        image.resize_bilinear(sh, sw)
    };
    let mut out = RgbImage::new(target, target);
    for r in 0..sh {
        let src = &scaled.data()[r * sw * 3..(r + 1) * sw * 3];
        out.data_mut()[r * target * 3..r * target * 3 + sw * 3].copy_from_slice(src);
    }
    Ok((out, rec))
}

/// Logit corresponding to a foreground probability.
pub fn probability_to_logit(p: f64) -> f32 {
    (p / (1.0 - p)).ln() as f32
}

/// Crops the padding, resizes the logits to the original resolution and
/// keeps pixels whose probability exceeds `probability`.
pub fn postprocess_mask(logits: &Tensor, rec: &PreprocessRecord, probability: f64) -> Result<BinaryMask> {
    let (h, w, values) = crate::model::logits_to_vec(logits)?;
    if (h, w) != (rec.padded, rec.padded) {
        return Err(Error::shape((rec.padded, rec.padded), (h, w)));
    }
    let (sh, sw) = rec.scaled;
    let mut content = Vec::with_capacity(sh * sw);
    for r in 0..sh {
        content.extend_from_slice(&values[r * w..r * w + sw]);
    }
    let (oh, ow) = rec.original;
    let resized = if (sh, sw) == (oh, ow) {
        content
    } else {
        resize_bilinear(&content, sh, sw, 1, oh, ow)
    };
    let t = probability_to_logit(probability);
    BinaryMask::from_vec(oh, ow, resized.into_iter().map(|v| v > t).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Automatic,
    User,
}

#[derive(Debug, Clone)]
pub struct MaskRecord {
    pub id: u64,
    /// Current mask at original resolution.
    pub mask: BinaryMask,
    /// Prompts in original-image coordinates, oldest first.
    pub history: Vec<Prompt>,
    pub source: MaskSource,
    /// Detector confidence for automatic masks.
    pub score: Option<f64>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Model-resolution logits of the last decode.
    pub logits: Option<Tensor>,
    undo_stack: Vec<BinaryMask>,
}

impl MaskRecord {
    /// Rebuilds a record from persisted fields.
    pub fn restore(
        id: u64,
        mask: BinaryMask,
        history: Vec<Prompt>,
        source: MaskSource,
        score: Option<f64>,
        created_at: DateTime<Utc>,
        updated_at: DateTime<Utc>,
    ) -> Self {
        Self {
            id,
            mask,
            history,
            source,
            score,
            created_at,
            updated_at,
            logits: None,
            undo_stack: Vec::new(),
        }
    }

    /// Number of refinements that can be undone.
    pub fn undo_depth(&self) -> usize {
        self.history.len().saturating_sub(1)
    }
}

impl PartialEq for MaskRecord {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.mask == other.mask
            && self.history == other.history
            && self.source == other.source
            && self.score == other.score
    }
}

/// A detector box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorBox {
    #[serde(flatten)]
    pub bbox: BoxPrompt,
    pub score: f64,
}

/// Source of candidate boxes for automatic segmentation.
pub trait CellDetector: Send + Sync {
    fn detect(&self, image: &RgbImage) -> Result<Vec<DetectorBox>>;
}

/// Tight boxes around registered ground-truth instances.
#[derive(Debug, Default)]
pub struct OracleDetector {
    boxes: std::sync::RwLock<std::collections::HashMap<u64, Vec<DetectorBox>>>,
}

impl OracleDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, image: &RgbImage, instances: &[BinaryMask]) {
        let boxes = instances
            .iter()
            .filter_map(|m| m.bounding_box())
            .map(|bbox| DetectorBox { bbox, score: 1.0 })
            .collect();
        self.boxes
            .write()
            .expect("detector lock poisoned")
            .insert(image.content_hash(), boxes);
    }
}

impl CellDetector for OracleDetector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<DetectorBox>> {
        Ok(self
            .boxes
            .read()
            .expect("detector lock poisoned")
            .get(&image.content_hash())
            .cloned()
            .unwrap_or_default())
    }
}

/// Intensity threshold plus connected components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobDetector {
    /// Mean-channel intensity above which a pixel is foreground.
    pub threshold: f32,
    /// Foreground is darker than the background (e.g. stained nuclei).
    pub dark_foreground: bool,
    pub min_area: usize,
}

impl Default for BlobDetector {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            dark_foreground: false,
            min_area: 8,
        }
    }
}

impl BlobDetector {
    pub fn foreground(&self, image: &RgbImage) -> BinaryMask {
        BinaryMask::from_fn(image.height(), image.width(), |r, c| {
            let [red, green, blue] = image.pixel(r, c);
            let v = (red + green + blue) / 3.0;
            if self.dark_foreground {
                v < self.threshold
            } else {
                v > self.threshold
            }
        })
    }
}

impl CellDetector for BlobDetector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<DetectorBox>> {
        let fg = self.foreground(image);
        let labels = label_components(&fg, Connectivity::Four);
        Ok((0..labels.len())
            .filter(|&k| labels.areas[k] >= self.min_area)
            .filter_map(|k| labels.component_mask(k).bounding_box())
            .map(|bbox| DetectorBox { bbox, score: 1.0 })
            .collect())
    }
}

/// Runs an external program as `<program> <args..> <image.png>` and reads a
/// JSON list of boxes from its standard output.
#[derive(Debug, Clone)]
pub struct ExternalDetector {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl ExternalDetector {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            timeout: Duration::from_secs(30),
        }
    }
}

impl CellDetector for ExternalDetector {
    fn detect(&self, image: &RgbImage) -> Result<Vec<DetectorBox>> {
        let path = std::env::temp_dir().join(format!("cellpilot-{}.png", uuid::Uuid::new_v4()));
        image.save_png(&path)?;
        let result = self.run(&path);
        let _ = std::fs::remove_file(&path);
        result
    }
}

impl ExternalDetector {
    fn run(&self, image_path: &std::path::Path) -> Result<Vec<DetectorBox>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(image_path)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Detector(format!("cannot start {}: {e}", self.program.display())))?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Detector(format!(
                    "detector timed out after {:?}; retry later",
                    self.timeout
                )));
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        let out = reader
            .join()
            .map_err(|_| Error::Detector("detector output reader panicked".into()))??;
        if !status.success() {
            let mut err = String::new();
            if let Some(mut e) = child.stderr.take() {
                let _ = e.read_to_string(&mut err);
            }
            return Err(Error::Detector(format!(
                "detector exited with {status}: {}",
                err.trim()
            )));
        }
        serde_json::from_slice(&out).map_err(|e| Error::Detector(format!("bad detector output: {e}")))
    }
}

/// Live annotation state for one image.
#[derive(Debug)]
pub struct Session {
    image: RgbImage,
    record: PreprocessRecord,
    embedding: ImageEmbedding,
    masks: Vec<MaskRecord>,
    next_id: u64,
    pub confidence_threshold: f64,
    /// Foreground probability cut-off for decoded masks.
    pub mask_threshold: f64,
    pub image_ref: String,
    pub created_at: DateTime<Utc>,
}

impl Session {
    /// Preprocesses `image` and computes its embedding once.
    pub fn new(model: &dyn PromptableModel, image: RgbImage, image_ref: impl Into<String>) -> Result<Self> {
        let (input, record) = preprocess(&image, model.input_size())?;
        let embedding = model.encode_image(&input)?.detach();
        Ok(Self {
            image,
            record,
            embedding,
            masks: Vec::new(),
            next_id: 1,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            mask_threshold: 0.5,
            image_ref: image_ref.into(),
            created_at: Utc::now(),
        })
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn record(&self) -> &PreprocessRecord {
        &self.record
    }

    pub fn embedding(&self) -> &ImageEmbedding {
        &self.embedding
    }

    pub fn masks(&self) -> &[MaskRecord] {
        &self.masks
    }

    pub fn mask(&self, id: u64) -> Result<&MaskRecord> {
        self.masks
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::NotFound(format!("mask {id}")))
    }

    fn mask_mut(&mut self, id: u64) -> Result<&mut MaskRecord> {
        self.masks
            .iter_mut()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::NotFound(format!("mask {id}")))
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    fn take_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn group(&self, prompts: &[Prompt]) -> PromptGroup {
        let mapped: Vec<Prompt> = prompts.iter().map(|p| self.record.prompt_to_model(p)).collect();
        PromptGroup::from_prompts(&mapped)
    }

    /// Decodes a prompt history (original coordinates) to a mask.
    pub fn decode(&self, model: &dyn PromptableModel, prompts: &[Prompt]) -> Result<(BinaryMask, Tensor)> {
        let logits = model.decode_mask(&self.embedding, &self.group(prompts))?;
        let mask = postprocess_mask(&logits, &self.record, self.mask_threshold)?;
        Ok((mask, logits))
    }

    fn validate(&self, prompt: &Prompt) -> Result<()> {
        prompt.validate(self.image.height(), self.image.width())
    }

    /// Replaces all automatic masks with one per detector box above the
    /// confidence threshold. Returns the new ids.
    pub fn auto_segment(
        &mut self,
        model: &dyn PromptableModel,
        detector: &dyn CellDetector,
    ) -> Result<Vec<u64>> {
        let (h, w) = self.image.dims();
        let boxes: Vec<DetectorBox> = detector
            .detect(&self.image)?
            .into_iter()
            .filter(|b| b.score >= self.confidence_threshold)
            .filter(|b| b.bbox.row_min < h && b.bbox.col_min < w)
            .map(|mut b| {
                b.bbox.row_max = b.bbox.row_max.min(h - 1);
                b.bbox.col_max = b.bbox.col_max.min(w - 1);
                b
            })
            .filter(|b| b.bbox.row_min <= b.bbox.row_max && b.bbox.col_min <= b.bbox.col_max)
            .collect();
        let groups: Vec<PromptGroup> = boxes.iter().map(|b| self.group(&[Prompt::Box(b.bbox)])).collect();
        let logits = model.decode_many(&self.embedding, &groups)?;
        let mut decoded = Vec::with_capacity(boxes.len());
        for (b, l) in boxes.iter().zip(logits) {
            let mask = postprocess_mask(&l, &self.record, self.mask_threshold)?;
            if !mask.is_empty() {
                decoded.push((*b, mask, l));
            }
        }
        self.masks.retain(|m| m.source != MaskSource::Automatic);
        let now = Utc::now();
        let mut ids = Vec::with_capacity(decoded.len());
        for (b, mask, logits) in decoded {
            let id = self.take_id();
            self.masks.push(MaskRecord {
                id,
                mask,
                history: vec![Prompt::Box(b.bbox)],
                source: MaskSource::Automatic,
                score: Some(b.score),
                created_at: now,
                updated_at: now,
                logits: Some(logits),
                undo_stack: Vec::new(),
            });
            ids.push(id);
        }
        Ok(ids)
    }

    /// New user mask from a single prompt.
    pub fn add_mask(&mut self, model: &dyn PromptableModel, prompt: Prompt) -> Result<u64> {
        self.validate(&prompt)?;
        let (mask, logits) = self.decode(model, &[prompt])?;
        let id = self.take_id();
        let now = Utc::now();
        self.masks.push(MaskRecord {
            id,
            mask,
            history: vec![prompt],
            source: MaskSource::User,
            score: None,
            created_at: now,
            updated_at: now,
            logits: Some(logits),
            undo_stack: Vec::new(),
        });
        Ok(id)
    }

    /// Appends `prompt` to the mask's history and re-decodes from the full
    /// history.
    pub fn refine_mask(
        &mut self,
        model: &dyn PromptableModel,
        id: u64,
        prompt: Prompt,
    ) -> Result<&MaskRecord> {
        let mut history = self.mask(id)?.history.clone();
        self.validate(&prompt)?;
        history.push(prompt);
        let (mask, logits) = self.decode(model, &history)?;
        let rec = self.mask_mut(id)?;
        let previous = std::mem::replace(&mut rec.mask, mask);
        rec.undo_stack.push(previous);
        rec.history = history;
        rec.logits = Some(logits);
        rec.updated_at = Utc::now();
        Ok(rec)
    }

    /// Drops the last refinement prompt and restores the previous mask.
    pub fn undo(&mut self, model: &dyn PromptableModel, id: u64) -> Result<&MaskRecord> {
        let rec = self.mask(id)?;
        if rec.history.len() <= 1 {
            return Err(Error::InvalidState(format!(
                "mask {id} has only its initial prompt; nothing to undo"
            )));
        }
        let shorter = rec.history[..rec.history.len() - 1].to_vec();
        let restored = if rec.undo_stack.is_empty() {
            Some(self.decode(model, &shorter)?)
        } else {
            None
        };
        let rec = self.mask_mut(id)?;
        rec.history = shorter;
        match restored {
            Some((mask, logits)) => {
                rec.mask = mask;
                rec.logits = Some(logits);
            }
            None => {
                rec.mask = rec.undo_stack.pop().expect("non-empty undo stack");
                rec.logits = None;
            }
        }
        rec.updated_at = Utc::now();
        Ok(rec)
    }

    pub fn remove_mask(&mut self, id: u64) -> Result<MaskRecord> {
        let idx = self
            .masks
            .iter()
            .position(|m| m.id == id)
            .ok_or_else(|| Error::NotFound(format!("mask {id}")))?;
        Ok(self.masks.remove(idx))
    }

    /// Decodes the mask's full history from scratch.
    pub fn replay(&self, model: &dyn PromptableModel, id: u64) -> Result<BinaryMask> {
        let history = &self.mask(id)?.history;
        Ok(self.decode(model, history)?.0)
    }

    /// Reinstates persisted masks; the id counter moves past every id seen.
    pub fn restore_masks(&mut self, masks: Vec<MaskRecord>, next_id: u64) -> Result<()> {
        let (h, w) = self.image.dims();
        for m in &masks {
            if m.mask.dims() != (h, w) {
                return Err(Error::shape((h, w), m.mask.dims()));
            }
        }
        let max_id = masks.iter().map(|m| m.id).max().unwrap_or(0);
        self.masks = masks;
        self.next_id = next_id.max(max_id + 1);
        Ok(())
    }
}

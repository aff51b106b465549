//! Dataset ingestion, manifests, session export and the synthetic blob set.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use image::{DynamicImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{hsv_to_rgb, Sample};
use crate::maskcore::rle::{self, Rle};
use crate::maskcore::{BinaryMask, Prompt};
use crate::model::PromptableModel;
use crate::pipeline::{MaskRecord, MaskSource, Session};
use crate::raster::RgbImage;
use crate::{Error, Result};

pub const ANNOTATION_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotationKind {
    #[serde(rename = "labelmap")]
    LabelMap,
    #[serde(rename = "rle-json")]
    RleJson,
}

impl std::str::FromStr for AnnotationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labelmap" => Ok(Self::LabelMap),
            "rle-json" => Ok(Self::RleJson),
            other => Err(Error::Config(format!("unknown annotation kind {other:?}"))),
        }
    }
}

/// Byte offset of a JSON parse error inside `text`.
fn json_error_offset(text: &str, err: &serde_json::Error) -> usize {
    let line = err.line().max(1);
    let before: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    before + err.column().saturating_sub(1)
}

fn format_error(text: &str, err: serde_json::Error) -> Error {
    Error::Format {
        offset: json_error_offset(text, &err),
        message: err.to_string(),
    }
}

/// One mask per positive id of an instance label map, in ascending id order.
pub fn masks_from_label_map(height: usize, width: usize, ids: &[u32]) -> Result<Vec<BinaryMask>> {
    if ids.len() != height * width {
        return Err(Error::shape((height, width), (ids.len(), 1)));
    }
    let mut by_id: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if id != 0 {
            by_id.entry(id).or_insert_with(|| vec![false; ids.len()])[i] = true;
        }
    }
    by_id
        .into_values()
        .map(|data| BinaryMask::from_vec(height, width, data))
        .collect()
}

/// Reads an 8- or 16-bit single-channel label map (PNG or TIFF).
pub fn load_label_map(path: &Path) -> Result<Vec<BinaryMask>> {
    let img = image::open(path).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ids: Vec<u32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "{}: label maps must be single-channel, found {:?}",
                    path.display(),
                    other.color()
                ),
            })
        }
    };
    masks_from_label_map(h, w, &ids)
}

/// Writes a 16-bit PNG label map; instance `k` gets id `k + 1`.
pub fn save_label_map(path: &Path, masks: &[BinaryMask], height: usize, width: usize) -> Result<()> {
    if masks.len() > u16::MAX as usize {
        return Err(Error::OutOfRange(format!(
            "{} instances exceed 16-bit ids",
            masks.len()
        )));
    }
    let mut buf = vec![0u16; height * width];
    for (k, m) in masks.iter().enumerate() {
        if m.dims() != (height, width) {
            return Err(Error::shape((height, width), m.dims()));
        }
        for (i, &on) in m.data().iter().enumerate() {
            if on {
                buf[i] = k as u16 + 1;
            }
        }
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, buf).expect("buffer sized to image");
    img.save(path)?;
    Ok(())
}

/// Masks from an annotation file, or from a bare JSON list of RLE objects.
pub fn masks_from_rle_json(text: &str) -> Result<Vec<BinaryMask>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| format_error(text, e))?;
    let rles: Vec<Rle> = if value.is_array() {
        serde_json::from_value(value).map_err(|e| format_error(text, e))?
    } else {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| format_error(text, e))?;
        file.check_schema()?;
        file.masks.into_iter().map(|m| m.rle).collect()
    };
    rles.iter().map(rle::decode).collect()
}

/// One mask per instance; empty instances are dropped with a warning.
pub fn load_annotations(path: &Path, kind: AnnotationKind) -> Result<Vec<BinaryMask>> {
    let masks = match kind {
        AnnotationKind::LabelMap => load_label_map(path)?,
        AnnotationKind::RleJson => masks_from_rle_json(&std::fs::read_to_string(path)?)?,
    };
    let before = masks.len();
    let masks: Vec<BinaryMask> = masks.into_iter().filter(|m| !m.is_empty()).collect();
    if masks.len() < before {
        log::warn!(
            "{}: dropped {} empty instances",
            path.display(),
            before - masks.len()
        );
    }
    if masks.is_empty() {
        log::warn!("{}: no instances", path.display());
    }
    Ok(masks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dataset: String,
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub kind: AnnotationKind,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub image: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
    pub rejects: Vec<Reject>,
}

/// Where images and annotations live below the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestRules {
    pub name: Option<String>,
    pub image_dir: String,
    pub annotation_dir: String,
    pub image_extensions: Vec<String>,
    /// Annotation extensions tried in order for each image stem.
    pub annotation_extensions: Vec<String>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ManifestRules {
    fn default() -> Self {
        Self {
            name: None,
            image_dir: "images".into(),
            annotation_dir: "masks".into(),
            image_extensions: ["png", "tif", "tiff", "jpg", "jpeg"].map(String::from).to_vec(),
            annotation_extensions: ["png", "tif", "tiff", "json"].map(String::from).to_vec(),
            val_fraction: 0.1,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

fn split_key(seed: u64, relative: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(relative.as_bytes());
    h.finalize().into()
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Scans `root` for images with matching annotations.
///
/// Entries are sorted by image path. The `round(n · val_fraction)` images
/// with the smallest seeded hash of their relative path form the validation
/// split, the next `round(n · test_fraction)` the test split.
pub fn make_manifest(root: &Path, rules: &ManifestRules) -> Result<DatasetManifest> {
    let image_dir = root.join(&rules.image_dir);
    let mut images: Vec<PathBuf> = std::fs::read_dir(&image_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && rules.image_extensions.contains(&extension(p)))
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::NotFound(format!("no images in {}", image_dir.display())));
    }
    let name = rules.name.clone().unwrap_or_else(|| {
        root.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("dataset")
            .to_string()
    });
    let mut manifest = DatasetManifest {
        name: name.clone(),
        ..Default::default()
    };
    for image in images {
        let stem = image
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let found = rules.annotation_extensions.iter().find_map(|ext| {
            let p = root.join(&rules.annotation_dir).join(format!("{stem}.{ext}"));
            p.is_file().then_some(p)
        });
        match found {
            Some(annotation) => {
                let kind = if extension(&annotation) == "json" {
                    AnnotationKind::RleJson
                } else {
                    AnnotationKind::LabelMap
                };
                manifest.entries.push(ManifestEntry {
                    dataset: name.clone(),
                    image,
                    annotation,
                    kind,
                    split: Split::Train,
                });
            }
            None => manifest.rejects.push(Reject {
                image,
                reason: format!("no annotation named {stem}.* in {}", rules.annotation_dir),
            }),
        }
    }
    let n = manifest.entries.len();
    let mut order: Vec<(usize, [u8; 32])> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let rel = e.image.strip_prefix(root).unwrap_or(&e.image);
            (
                i,
                split_key(rules.seed, &rel.to_string_lossy().replace('\\', "/")),
            )
        })
        .collect();
    order.sort_by_key(|a| a.1);
    let n_val = (n as f64 * rules.val_fraction).round() as usize;
    let n_test = ((n as f64 * rules.test_fraction).round() as usize).min(n - n_val.min(n));
    for (rank, (i, _)) in order.into_iter().enumerate() {
        manifest.entries[i].split = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(manifest)
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// One JSON object per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_rejects(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.rejects {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a manifest; relative paths resolve against the manifest's folder.
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for line in f.lines() {
            let line = line?;
            let start = offset;
            offset += line.len() + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|err| Error::Format {
                offset: start + err.column().saturating_sub(1),
                message: err.to_string(),
            })?;
            if e.image.is_relative() {
                e.image = base.join(&e.image);
            }
            if e.annotation.is_relative() {
                e.annotation = base.join(&e.annotation);
            }
            entries.push(e);
        }
        Ok(Self {
            name: entries.first().map(|e| e.dataset.clone()).unwrap_or_default(),
            entries,
            rejects: Vec::new(),
        })
    }

    /// Loads images and instances of one split.
    pub fn load(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split)
            .map(|e| {
                let image = RgbImage::open(&e.image)?;
                let instances = load_annotations(&e.annotation, e.kind)?;
                if let Some(m) = instances.iter().find(|m| m.dims() != image.dims()) {
                    return Err(Error::shape(image.dims(), m.dims()));
                }
                Ok(Sample { image, instances })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub path: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedMask {
    pub id: u64,
    pub source: MaskSource,
    #[serde(default)]
    pub score: Option<f64>,
    pub rle: Rle,
    /// Prompt history in original-image coordinates.
    #[serde(default)]
    pub prompts: Vec<Prompt>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// Versioned annotation file written for every exported session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub schema: u32,
    pub image: ImageInfo,
    pub created_at: DateTime<Utc>,
    pub exported_at: DateTime<Utc>,
    pub next_id: u64,
    pub masks: Vec<AnnotatedMask>,
}

impl AnnotationFile {
    pub fn check_schema(&self) -> Result<()> {
        if self.schema != ANNOTATION_SCHEMA {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported annotation schema {}", self.schema),
            });
        }
        for m in &self.masks {
            if m.rle.size != [self.image.height, self.image.width] {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("mask {} size {:?} differs from the image", m.id, m.rle.size),
                });
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| format_error(text, e))?;
        file.check_schema()?;
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn masks(&self) -> Result<Vec<BinaryMask>> {
        self.masks.iter().map(|m| rle::decode(&m.rle)).collect()
    }
}

pub fn export_session(session: &Session) -> AnnotationFile {
    let (height, width) = session.image().dims();
    AnnotationFile {
        schema: ANNOTATION_SCHEMA,
        image: ImageInfo {
            path: session.image_ref.clone(),
            height,
            width,
        },
        created_at: session.created_at,
        exported_at: Utc::now(),
        next_id: session.next_id(),
        masks: session
            .masks()
            .iter()
            .map(|m| AnnotatedMask {
                id: m.id,
                source: m.source,
                score: m.score,
                rle: rle::encode(&m.mask),
                prompts: m.history.clone(),
                created_at: m.created_at,
                updated_at: m.updated_at,
            })
            .collect(),
    }
}

/// Rebuilds a session from an export and its image.
pub fn import_session(
    model: &dyn PromptableModel,
    image: RgbImage,
    file: &AnnotationFile,
) -> Result<Session> {
    file.check_schema()?;
    if image.dims() != (file.image.height, file.image.width) {
        return Err(Error::shape((file.image.height, file.image.width), image.dims()));
    }
    let mut session = Session::new(model, image, file.image.path.clone())?;
    session.created_at = file.created_at;
    let masks = file
        .masks
        .iter()
        .map(|m| {
            Ok(MaskRecord::restore(
                m.id,
                rle::decode(&m.rle)?,
                m.prompts.clone(),
                m.source,
                m.score,
                m.created_at,
                m.updated_at,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    session.restore_masks(masks, file.next_id)?;
    Ok(session)
}

/// Parameters of the synthetic blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub images: usize,
    pub size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Semi-axis range in pixels.
    pub axis: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 200,
            size: 128,
            min_instances: 3,
            max_instances: 8,
            axis: (5.0, 14.0),
            noise: 0.03,
            seed: 0,
        }
    }
}

fn ellipse(size: usize, cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> BinaryMask {
    let (s, c) = theta.sin_cos();
    BinaryMask::from_fn(size, size, |r, col| {
        let dy = r as f64 - cy;
        let dx = col as f64 - cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

fn dilate(m: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = m.dims();
    let r = radius as isize;
    BinaryMask::from_fn(h, w, |row, col| {
        (-r..=r).any(|dr| {
            (-r..=r).any(|dc| {
                let y = row as isize + dr;
                let x = col as isize + dc;
                y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.get(y as usize, x as usize)
            })
        })
    })
}

/// One image with 3–8 separated elliptical instances on a dark textured
/// background.
pub fn synth_sample<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Sample {
    let n = cfg.size;
    let target = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut occupied = BinaryMask::new(n, n);
    let mut instances = Vec::new();
    let mut attempts = 0;
    while instances.len() < target && attempts < 500 {
        attempts += 1;
        let a = rng.gen_range(cfg.axis.0..=cfg.axis.1);
        let b = rng.gen_range(cfg.axis.0..=cfg.axis.1);
        let margin = a.max(b) + 1.0;
        let cy = rng.gen_range(margin..n as f64 - margin);
        let cx = rng.gen_range(margin..n as f64 - margin);
        let m = ellipse(n, cy, cx, a, b, rng.gen_range(0.0..PI));
        if m.is_empty() || !m.and(&occupied).expect("same size").is_empty() {
            continue;
        }
        occupied = occupied.or(&dilate(&m, 2)).expect("same size");
        instances.push(m);
    }
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
    let bg = hsv_to_rgb([
        rng.gen_range(180.0..260.0),
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.1..0.25),
    ]);
    let mut image = RgbImage::new(n, n);
    for r in 0..n {
        for c in 0..n {
            image.set_pixel(r, c, bg);
        }
    }
    for m in &instances {
        let fg = hsv_to_rgb([
            rng.gen_range(0.0..360.0),
            rng.gen_range(0.3..0.8),
            rng.gen_range(0.7..1.0),
        ]);
        for (r, c) in m.foreground() {
            image.set_pixel(r, c, fg);
        }
    }
    for v in image.data_mut() {
        *v = (*v + noise.sample(rng) as f32).clamp(0.0, 1.0);
    }
    Sample { image, instances }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.images).map(|_| synth_sample(cfg, &mut rng)).collect()
}

/// Writes the synthetic set as `images/NNNN.png` and `masks/NNNN.png`.
pub fn write_synth_dataset(root: &Path, cfg: &SynthConfig) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    for (i, s) in synth_dataset(cfg).iter().enumerate() {
        s.image
            .save_png(root.join("images").join(format!("{i:04}.png")))?;
        save_label_map(
            &root.join("masks").join(format!("{i:04}.png")),
            &s.instances,
            cfg.size,
            cfg.size,
        )?;
    }
    Ok(())
}

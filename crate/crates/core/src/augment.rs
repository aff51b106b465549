//! Training-time augmentation applied consistently to an image and its
//! instance masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::maskcore::{BinaryMask, BoxPrompt, PointPrompt, Prompt};
use crate::raster::{resize_mask_nearest, RgbImage};
use crate::{Error, Result};

/// An image together with its ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub instances: Vec<BinaryMask>,
}

/// Symmetries of the square: four rotations (clockwise) and four reflections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum D4Element {
    E,
    R90,
    R180,
    R270,
    /// Mirror left-right.
    Fh,
    /// Mirror top-bottom.
    Fv,
    /// Transpose about the main diagonal.
    Fd,
    /// Transpose about the anti-diagonal.
    Fa,
}

impl D4Element {
    pub const ALL: [D4Element; 8] = [
        D4Element::E,
        D4Element::R90,
        D4Element::R180,
        D4Element::R270,
        D4Element::Fh,
        D4Element::Fv,
        D4Element::Fd,
        D4Element::Fa,
    ];

    /// Image of pixel `(row, col)` on an `n × n` grid.
    pub fn map(self, row: usize, col: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            D4Element::E => (row, col),
            D4Element::R90 => (col, m - row),
            D4Element::R180 => (m - row, m - col),
            D4Element::R270 => (m - col, row),
            D4Element::Fh => (row, m - col),
            D4Element::Fv => (m - row, col),
            D4Element::Fd => (col, row),
            D4Element::Fa => (m - col, m - row),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: D4Element) -> D4Element {
        // Two non-symmetric probe points pin down an element of D4 on a 3×3 grid.
        let probe = |g: D4Element| [g.map(0, 1, 3), g.map(0, 0, 3)];
        let target = {
            let (a, b) = (other.map(0, 1, 3), other.map(0, 0, 3));
            [self.map(a.0, a.1, 3), self.map(b.0, b.1, 3)]
        };
        *D4Element::ALL
            .iter()
            .find(|&&g| probe(g) == target)
            .expect("D4 is closed under composition")
    }

    pub fn inverse(self) -> D4Element {
        *D4Element::ALL
            .iter()
            .find(|&&g| self.compose(g) == D4Element::E)
            .expect("every element has an inverse")
    }

    pub fn apply_mask(self, m: &BinaryMask) -> Result<BinaryMask> {
        let n = square_side(m.dims())?;
        let mut out = BinaryMask::new(n, n);
        for (r, c) in m.foreground() {
            let (r2, c2) = self.map(r, c, n);
            out.set(r2, c2, true);
        }
        Ok(out)
    }

    pub fn apply_image(self, img: &RgbImage) -> Result<RgbImage> {
        let n = square_side(img.dims())?;
        let mut out = RgbImage::new(n, n);
        for r in 0..n {
            for c in 0..n {
                let (r2, c2) = self.map(r, c, n);
                out.set_pixel(r2, c2, img.pixel(r, c));
            }
        }
        Ok(out)
    }

    pub fn apply_prompt(self, p: &Prompt, n: usize) -> Prompt {
        match *p {
            Prompt::Point(pt) => {
                let (row, col) = self.map(pt.row, pt.col, n);
                Prompt::Point(PointPrompt { row, col, ..pt })
            }
            Prompt::Box(b) => {
                let a = self.map(b.row_min, b.col_min, n);
                let z = self.map(b.row_max, b.col_max, n);
                Prompt::Box(BoxPrompt::new(
                    a.0.min(z.0),
                    a.1.min(z.1),
                    a.0.max(z.0),
                    a.1.max(z.1),
                ))
            }
        }
    }
}

fn square_side((h, w): (usize, usize)) -> Result<usize> {
    if h != w {
        return Err(Error::Config(format!(
            "D4 transforms need a square image, got {h}x{w}"
        )));
    }
    Ok(h)
}

/// Applies one symmetry to the image, every mask and every prompt.
pub fn apply_d4(
    g: D4Element,
    image: &RgbImage,
    masks: &[BinaryMask],
    prompts: &[Prompt],
) -> Result<(RgbImage, Vec<BinaryMask>, Vec<Prompt>)> {
    let n = square_side(image.dims())?;
    let image = g.apply_image(image)?;
    let masks = masks
        .iter()
        .map(|m| g.apply_mask(m))
        .collect::<Result<Vec<_>>>()?;
    let prompts = prompts.iter().map(|p| g.apply_prompt(p, n)).collect();
    Ok((image, masks, prompts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Crop width / height.
    pub crop_aspect: (f64, f64),
    pub hue_shift_deg: f64,
    pub saturation_shift: f64,
    pub value_shift: f64,
    pub p_d4: f64,
    pub p_crop: f64,
    pub p_hsv: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.5, 1.0),
            crop_aspect: (0.9, 1.1),
            hue_shift_deg: 20.0,
            saturation_shift: 0.3,
            value_shift: 0.2,
            p_d4: 1.0,
            p_crop: 0.5,
            p_hsv: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        Self {
            p_d4: 0.0,
            p_crop: 0.0,
            p_hsv: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.crop_scale;
        let (a0, a1) = self.crop_aspect;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::Config(format!(
                "bad crop scale range {:?}",
                self.crop_scale
            )));
        }
        if !(a0 > 0.0 && a0 <= a1) {
            return Err(Error::Config(format!(
                "bad crop aspect range {:?}",
                self.crop_aspect
            )));
        }
        for p in [self.p_d4, self.p_crop, self.p_hsv] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.hue_shift_deg < 0.0 || self.saturation_shift < 0.0 || self.value_shift < 0.0 {
            return Err(Error::Config("colour shift limits must be non-negative".into()));
        }
        Ok(())
    }
}

/// Crop window `(row0, col0, height, width)` with area and aspect drawn from
/// the configured ranges. Falls back to the whole image after ten misses.
pub fn sample_crop_window<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(usize, usize, usize, usize)> {
    cfg.validate()?;
    let area = (height * width) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let log_aspect = rng.gen_range(cfg.crop_aspect.0.ln()..=cfg.crop_aspect.1.ln());
        let aspect = log_aspect.exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let r0 = rng.gen_range(0..=height - h);
            let c0 = rng.gen_range(0..=width - w);
            return Ok((r0, c0, h, w));
        }
    }
    Ok((0, 0, height, width))
}

fn crop_mask(m: &BinaryMask, r0: usize, c0: usize, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| m.get(r0 + r, c0 + c))
}

/// Random sub-rectangle resized to `out_size × out_size`. Instances that end
/// up empty are dropped.
pub fn random_resized_crop<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &AugmentationConfig,
    out_size: usize,
    rng: &mut R,
) -> Result<Sample> {
    let (h, w) = sample.image.dims();
    let (r0, c0, ch, cw) = sample_crop_window(h, w, cfg, rng)?;
    Ok(crop_and_resize(sample, (r0, c0, ch, cw), out_size))
}

pub fn crop_and_resize(
    sample: &Sample,
    (r0, c0, ch, cw): (usize, usize, usize, usize),
    out_size: usize,
) -> Sample {
    let image = sample
        .image
        .crop(r0, c0, ch, cw)
        .resize_bilinear(out_size, out_size);
    let instances = sample
        .instances
        .iter()
        .map(|m| resize_mask_nearest(&crop_mask(m, r0, c0, ch, cw), out_size, out_size))
        .filter(|m| !m.is_empty())
        .collect();
    Sample { image, instances }
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Adds a hue rotation (degrees) and saturation/value offsets to every
/// pixel, clamping saturation and value to `[0, 1]`.
pub fn shift_hsv(image: &RgbImage, hue_deg: f32, sat: f32, val: f32) -> RgbImage {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
        let rgb = hsv_to_rgb([
            (h + hue_deg).rem_euclid(360.0),
            (s + sat).clamp(0.0, 1.0),
            (v + val).clamp(0.0, 1.0),
        ]);
        px.copy_from_slice(&rgb);
    }
    out
}

/// Random hue/saturation/value shift within the configured limits.
pub fn hsv_jitter<R: Rng + ?Sized>(image: &RgbImage, cfg: &AugmentationConfig, rng: &mut R) -> RgbImage {
    if cfg.hue_shift_deg == 0.0 && cfg.saturation_shift == 0.0 && cfg.value_shift == 0.0 {
        return image.clone();
    }
    let draw = |rng: &mut R, limit: f64| {
        if limit > 0.0 {
            rng.gen_range(-limit..=limit) as f32
        } else {
            0.0
        }
    };
    let dh = draw(rng, cfg.hue_shift_deg);
    let ds = draw(rng, cfg.saturation_shift);
    let dv = draw(rng, cfg.value_shift);
    shift_hsv(image, dh, ds, dv)
}

/// Full augmentation chain: crop-resize, D4, colour jitter.
pub fn augment_sample<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &AugmentationConfig,
    out_size: usize,
    rng: &mut R,
) -> Result<Sample> {
    cfg.validate()?;
    let mut s = if rng.gen_bool(cfg.p_crop) {
        random_resized_crop(sample, cfg, out_size, rng)?
    } else if sample.image.dims() != (out_size, out_size) {
        let (h, w) = sample.image.dims();
        crop_and_resize(sample, (0, 0, h, w), out_size)
    } else {
        sample.clone()
    };
    if rng.gen_bool(cfg.p_d4) {
        let g = D4Element::ALL[rng.gen_range(0..8)];
        let (image, instances, _) = apply_d4(g, &s.image, &s.instances, &[])?;
        s = Sample { image, instances };
    }
    if rng.gen_bool(cfg.p_hsv) {
        s.image = hsv_jitter(&s.image, cfg, rng);
    }
    Ok(s)
}

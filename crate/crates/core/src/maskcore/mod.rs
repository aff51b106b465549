//! Geometry and metric kernel over binary instance masks.
//!
//! Everything here is a pure function of its inputs. Random draws take an
//! explicit [`rand::Rng`] so results are reproducible from a seed.

pub mod components;
pub mod distance;
pub mod rle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use components::{connected_components, label_components, Connectivity, Labeling};
pub use distance::squared_distance_to_background;

/// A 2-D boolean grid for one instance, stored row-major.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, area {})",
            self.height,
            self.width,
            self.area()
        )
    }
}

impl BinaryMask {
    /// All-background mask. Panics on a zero dimension.
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        let mut m = Self::new(height, width);
        m.data.fill(true);
        m
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Config(format!(
                "mask data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Builds a mask from a list of foreground pixels.
    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Self::new(height, width);
        for &(r, c) in pixels {
            m.set(r, c, true);
        }
        m
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                m.data[r * width + c] = f(r, c);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground pixels in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / w, i % w))
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(self.dims(), other.dims()));
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn xor(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a != b)
    }

    /// `self ∧ ¬other`
    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    /// Tight inclusive bounding box, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoxPrompt> {
        let mut bb: Option<BoxPrompt> = None;
        for (r, c) in self.foreground() {
            bb = Some(match bb {
                None => BoxPrompt::new(r, c, r, c),
                Some(b) => BoxPrompt::new(
                    b.row_min.min(r),
                    b.col_min.min(c),
                    b.row_max.max(r),
                    b.col_max.max(c),
                ),
            });
        }
        bb
    }
}

/// Whether a point prompt should grow or shrink the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

impl PointPrompt {
    pub fn positive(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            polarity: Polarity::Positive,
        }
    }

    pub fn negative(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            polarity: Polarity::Negative,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.polarity == Polarity::Positive
    }
}

/// Axis-aligned box with inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoxPrompt {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        debug_assert!(row_min <= row_max && col_min <= col_max);
        Self {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    /// Intersection-over-union of two boxes in pixel counts.
    pub fn iou(&self, other: &BoxPrompt) -> f64 {
        let r0 = self.row_min.max(other.row_min);
        let c0 = self.col_min.max(other.col_min);
        let r1 = self.row_max.min(other.row_max);
        let c1 = self.col_max.min(other.col_max);
        if r0 > r1 || c0 > c1 {
            return 0.0;
        }
        let inter = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }
}

/// The user/simulator input vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prompt {
    Point(PointPrompt),
    Box(BoxPrompt),
}

impl Prompt {
    /// Checks the prompt lies inside a `height × width` image.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let ok = match self {
            Prompt::Point(p) => p.row < height && p.col < width,
            Prompt::Box(b) => {
                b.row_min <= b.row_max && b.col_min <= b.col_max && b.row_max < height && b.col_max < width
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfRange(format!(
                "{self:?} outside {height}x{width} image"
            )))
        }
    }
}

impl From<PointPrompt> for Prompt {
    fn from(p: PointPrompt) -> Self {
        Prompt::Point(p)
    }
}

impl From<BoxPrompt> for Prompt {
    fn from(b: BoxPrompt) -> Self {
        Prompt::Box(b)
    }
}

/// Under- and over-predicted pixels of a prediction against ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorRegions {
    /// `gt ∧ ¬pred`
    pub false_negative: BinaryMask,
    /// `pred ∧ ¬gt`
    pub false_positive: BinaryMask,
}

/// Where a corrective click lands inside the chosen error component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickPlacement {
    /// Pixel farthest from the component boundary.
    #[default]
    Center,
    /// Uniformly random pixel of the component.
    Random,
}

/// Outcome of asking for a corrective click.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correction {
    Click(PointPrompt),
    /// Prediction already equals ground truth.
    Converged,
}

fn count_pair(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize, usize)> {
    a.check_same_dims(b)?;
    let (mut inter, mut union, mut na, mut nb) = (0, 0, 0, 0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok((inter, union, na, nb))
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union, _, _) = count_pair(a, b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Sørensen–Dice coefficient; 1.0 when both masks are empty.
pub fn dice_coefficient(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, _, na, nb) = count_pair(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn error_regions(pred: &BinaryMask, gt: &BinaryMask) -> Result<ErrorRegions> {
    Ok(ErrorRegions {
        false_negative: gt.and_not(pred)?,
        false_positive: pred.and_not(gt)?,
    })
}

/// Largest error component, jointly over both error sides.
///
/// Returns the component mask and whether it is a false-negative region.
/// Ties prefer the false-negative side; within one side, the component whose
/// first pixel comes first in row-major order.
pub fn largest_error_component(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<(BinaryMask, bool)>> {
    let regions = error_regions(pred, gt)?;
    let fn_lab = label_components(&regions.false_negative, Connectivity::Four);
    let fp_lab = label_components(&regions.false_positive, Connectivity::Four);

    let best_fn = fn_lab.largest();
    let best_fp = fp_lab.largest();
    let pick_fn = match (best_fn, best_fp) {
        (None, None) => return Ok(None),
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (Some(f), Some(p)) => fn_lab.areas[f] >= fp_lab.areas[p],
    };
    let component = if pick_fn {
        fn_lab.component_mask(best_fn.unwrap())
    } else {
        fp_lab.component_mask(best_fp.unwrap())
    };
    Ok(Some((component, pick_fn)))
}

/// Picks the next corrective click from the largest error component.
///
/// A false-negative component yields a positive click, a false-positive one a
/// negative click. With [`ClickPlacement::Center`] the click is the component
/// pixel farthest (Euclidean) from any pixel outside it, image border
/// included; ties go to the smallest `(row, col)`.
pub fn sample_correction_click<R: Rng + ?Sized>(
    pred: &BinaryMask,
    gt: &BinaryMask,
    placement: ClickPlacement,
    rng: &mut R,
) -> Result<Correction> {
    let Some((component, is_fn)) = largest_error_component(pred, gt)? else {
        return Ok(Correction::Converged);
    };
    let (row, col) = match placement {
        ClickPlacement::Center => distance_center(&component),
        ClickPlacement::Random => {
            let area = component.area();
            let k = rng.gen_range(0..area);
            component.foreground().nth(k).expect("component is nonempty")
        }
    };
    let polarity = if is_fn {
        Polarity::Positive
    } else {
        Polarity::Negative
    };
    Ok(Correction::Click(PointPrompt { row, col, polarity }))
}

/// Foreground pixel with the largest distance to background, smallest
/// `(row, col)` on ties.
pub fn distance_center(component: &BinaryMask) -> (usize, usize) {
    let dist = squared_distance_to_background(component);
    let mut best = (0usize, 0usize);
    let mut best_d = -1i64;
    for (i, &d) in dist.iter().enumerate() {
        if component.data[i] && d > best_d {
            best_d = d;
            best = (i / component.width, i % component.width);
        }
    }
    best
}

/// Tight bounding box expanded by `margin` on every side, clamped to the image.
pub fn box_from_mask(m: &BinaryMask, margin: usize) -> Result<BoxPrompt> {
    let bb = m.bounding_box().ok_or(Error::EmptyMask)?;
    Ok(BoxPrompt::new(
        bb.row_min.saturating_sub(margin),
        bb.col_min.saturating_sub(margin),
        (bb.row_max + margin).min(m.height - 1),
        (bb.col_max + margin).min(m.width - 1),
    ))
}

/// Uniformly random foreground pixel as a positive click.
pub fn sample_point_in_mask<R: Rng + ?Sized>(m: &BinaryMask, rng: &mut R) -> Result<PointPrompt> {
    let area = m.area();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let k = rng.gen_range(0..area);
    let (row, col) = m.foreground().nth(k).expect("k < area");
    Ok(PointPrompt::positive(row, col))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn iou_cases() {
        let a = BinaryMask::from_pixels(4, 4, &[(1, 1), (2, 2)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = BinaryMask::from_pixels(4, 4, &[(0, 0)]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let a = BinaryMask::from_pixels(1, 3, &[(0, 0), (0, 1)]);
        let b = BinaryMask::from_pixels(1, 3, &[(0, 1), (0, 2)]);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let e = BinaryMask::new(2, 2);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn shape_errors() {
        let a = BinaryMask::new(2, 3);
        let b = BinaryMask::new(3, 2);
        assert!(matches!(iou(&a, &b), Err(Error::Shape { .. })));
        assert!(matches!(dice_coefficient(&a, &b), Err(Error::Shape { .. })));
        assert!(matches!(error_regions(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn dice_cases() {
        let a = BinaryMask::from_pixels(3, 3, &[(0, 0), (0, 1)]);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        let b = BinaryMask::from_pixels(3, 3, &[(2, 2)]);
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.0);
        let c = BinaryMask::from_pixels(3, 3, &[(0, 1), (1, 1)]);
        assert_eq!(dice_coefficient(&a, &c).unwrap(), 0.5);
    }

    #[test]
    fn error_region_sizes() {
        let gt = BinaryMask::from_pixels(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        let pred = BinaryMask::from_pixels(4, 4, &[(1, 1), (1, 2), (3, 3)]);
        let er = error_regions(&pred, &gt).unwrap();
        assert_eq!(er.false_negative.area(), 2);
        assert_eq!(er.false_positive.area(), 1);
        let same = error_regions(&gt, &gt).unwrap();
        assert!(same.false_negative.is_empty() && same.false_positive.is_empty());
        let empty = BinaryMask::new(4, 4);
        let er = error_regions(&empty, &gt).unwrap();
        assert_eq!(er.false_negative, gt);
        assert!(er.false_positive.is_empty());
    }

    #[test]
    fn correction_prefers_larger_side() {
        // FN component of 25 pixels, FP component of 2.
        let gt = BinaryMask::from_fn(8, 8, |r, c| r < 5 && (1..6).contains(&c));
        let pred = BinaryMask::from_pixels(8, 8, &[(0, 7), (1, 7)]);
        match sample_correction_click(&pred, &gt, ClickPlacement::Center, &mut rng()).unwrap() {
            Correction::Click(p) => {
                assert_eq!(p.polarity, Polarity::Positive);
                assert!(gt.get(p.row, p.col));
                assert_eq!((p.row, p.col), (2, 3));
            }
            Correction::Converged => panic!("expected a click"),
        }
        let gt = BinaryMask::from_pixels(6, 6, &[(0, 0), (1, 0), (2, 0), (3, 0), (4, 0)]);
        let pred = BinaryMask::from_pixels(6, 6, &[(0, 5), (1, 5)]);
        for placement in [ClickPlacement::Center, ClickPlacement::Random] {
            match sample_correction_click(&pred, &gt, placement, &mut rng()).unwrap() {
                Correction::Click(p) => assert!(p.is_positive() && gt.get(p.row, p.col)),
                Correction::Converged => panic!("expected a click"),
            }
        }
    }

    #[test]
    fn correction_converges_and_forced_location() {
        let gt = BinaryMask::from_pixels(5, 5, &[(2, 2)]);
        assert_eq!(
            sample_correction_click(&gt, &gt, ClickPlacement::Center, &mut rng()).unwrap(),
            Correction::Converged
        );
        let pred = BinaryMask::from_pixels(5, 5, &[(2, 2), (4, 1)]);
        for placement in [ClickPlacement::Center, ClickPlacement::Random] {
            assert_eq!(
                sample_correction_click(&pred, &gt, placement, &mut rng()).unwrap(),
                Correction::Click(PointPrompt::negative(4, 1))
            );
        }
    }

    #[test]
    fn correction_tie_goes_to_false_negative() {
        let gt = BinaryMask::from_pixels(3, 3, &[(2, 2)]);
        let pred = BinaryMask::from_pixels(3, 3, &[(0, 0)]);
        let c = sample_correction_click(&pred, &gt, ClickPlacement::Center, &mut rng()).unwrap();
        assert_eq!(c, Correction::Click(PointPrompt::positive(2, 2)));
    }

    #[test]
    fn box_from_mask_cases() {
        let m = BinaryMask::from_fn(6, 6, |r, c| (2..=4).contains(&r) && (3..=5).contains(&c));
        assert_eq!(box_from_mask(&m, 0).unwrap(), BoxPrompt::new(2, 3, 4, 5));
        assert_eq!(box_from_mask(&m, 10).unwrap(), BoxPrompt::new(0, 0, 5, 5));
        let full = BinaryMask::full(4, 7);
        assert_eq!(box_from_mask(&full, 3).unwrap(), BoxPrompt::new(0, 0, 3, 6));
        assert!(matches!(
            box_from_mask(&BinaryMask::new(3, 3), 0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn point_in_mask() {
        let m = BinaryMask::from_pixels(5, 5, &[(3, 1)]);
        assert_eq!(
            sample_point_in_mask(&m, &mut rng()).unwrap(),
            PointPrompt::positive(3, 1)
        );
        assert!(matches!(
            sample_point_in_mask(&BinaryMask::new(2, 2), &mut rng()),
            Err(Error::EmptyMask)
        ));
        let full = BinaryMask::full(10, 10);
        let a = sample_point_in_mask(&full, &mut rng()).unwrap();
        let b = sample_point_in_mask(&full, &mut rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_in_mask_is_uniform() {
        // 10,000 draws over 100 pixels: expected 100 each, sigma ~ 9.95.
        let full = BinaryMask::full(10, 10);
        let mut r = rng();
        let mut counts = [0usize; 100];
        for _ in 0..10_000 {
            let p = sample_point_in_mask(&full, &mut r).unwrap();
            counts[p.row * 10 + p.col] += 1;
        }
        let sigma = (10_000.0f64 * 0.01 * 0.99).sqrt();
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 100.0).powi(2) / 100.0).sum();
        for &c in &counts {
            assert!((c as f64 - 100.0).abs() <= 4.0 * sigma, "count {c}");
        }
        // 99 dof: mean 99, sd ~14; 99.9th percentile ~ 148.
        assert!(chi2 < 148.0, "chi2 {chi2}");
    }

    #[test]
    fn prompt_validation() {
        assert!(Prompt::Point(PointPrompt::positive(4, 4)).validate(5, 5).is_ok());
        assert!(Prompt::Point(PointPrompt::positive(5, 0)).validate(5, 5).is_err());
        assert!(Prompt::Box(BoxPrompt::new(0, 0, 4, 5)).validate(5, 5).is_err());
    }

    #[test]
    fn prompt_json_shape() {
        let p = Prompt::Point(PointPrompt::negative(3, 4));
        let v = serde_json::to_value(p).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"kind": "point", "row": 3, "col": 4, "polarity": "negative"})
        );
    }
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cellpilot::augment::D4Element;
use cellpilot::evalharness::mean_std;
use cellpilot::maskcore::{
    box_from_mask, dice_coefficient, iou, label_components, rle, sample_correction_click, ClickPlacement,
    Connectivity, Correction,
};
use cellpilot::model::mask_to_logits;
use cellpilot::pipeline::PreprocessRecord;
use cellpilot::training::segmentation_loss;
use cellpilot::{BinaryMask, PointPrompt, Polarity, Prompt};

fn mask(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |d| BinaryMask::from_vec(h, w, d).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(any::<bool>(), h * w),
            proptest::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    BinaryMask::from_vec(h, w, a).unwrap(),
                    BinaryMask::from_vec(h, w, b).unwrap(),
                )
            })
    })
}

fn square(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max).prop_flat_map(|n| {
        proptest::collection::vec(any::<bool>(), n * n)
            .prop_map(move |d| BinaryMask::from_vec(n, n, d).unwrap())
    })
}

proptest! {
    #[test]
    fn rle_round_trips(m in mask(24)) {
        let enc = rle::encode(&m);
        prop_assert_eq!(rle::decode(&enc).unwrap(), m.clone());
        let compact = enc.compressed().unwrap();
        prop_assert_eq!(rle::decode(&compact).unwrap(), m.clone());
        prop_assert_eq!(enc.area().unwrap() as usize, m.area());
    }

    #[test]
    fn overlap_scores_are_bounded_and_symmetric((a, b) in mask_pair(16)) {
        let ab = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let d = dice_coefficient(&a, &b).unwrap();
        // Dice is never below IoU and they agree on 0 and 1.
        prop_assert!(d + 1e-12 >= ab);
        prop_assert!((d - 2.0 * ab / (1.0 + ab)).abs() < 1e-12);
    }

    #[test]
    fn components_partition_the_foreground(m in mask(16)) {
        let labels = label_components(&m, Connectivity::Four);
        let mut covered = BinaryMask::new(m.height(), m.width());
        let mut total = 0;
        for k in 0..labels.len() {
            let c = labels.component_mask(k);
            prop_assert!(!c.is_empty());
            prop_assert!(covered.and(&c).unwrap().is_empty());
            covered = covered.or(&c).unwrap();
            total += c.area();
        }
        prop_assert_eq!(covered, m.clone());
        prop_assert_eq!(total, m.area());
    }

    #[test]
    fn correction_click_lands_in_an_error_region((pred, gt) in mask_pair(12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for placement in [ClickPlacement::Center, ClickPlacement::Random] {
            match sample_correction_click(&pred, &gt, placement, &mut rng).unwrap() {
                Correction::Converged => prop_assert_eq!(&pred, &gt),
                Correction::Click(p) => {
                    let (in_gt, in_pred) = (gt.get(p.row, p.col), pred.get(p.row, p.col));
                    match p.polarity {
                        Polarity::Positive => prop_assert!(in_gt && !in_pred),
                        Polarity::Negative => prop_assert!(in_pred && !in_gt),
                    }
                }
            }
        }
    }

    #[test]
    fn box_from_mask_contains_the_mask(m in mask(20), margin in 0usize..12) {
        prop_assume!(!m.is_empty());
        let b = box_from_mask(&m, margin).unwrap();
        prop_assert!(b.row_max < m.height() && b.col_max < m.width());
        for (r, c) in m.foreground() {
            prop_assert!(b.contains(r, c));
        }
    }

    #[test]
    fn d4_inverse_restores_masks_and_points(m in square(10), g in 0usize..8, seed in any::<u64>()) {
        let g = D4Element::ALL[g];
        let back = g.inverse().apply_mask(&g.apply_mask(&m).unwrap()).unwrap();
        prop_assert_eq!(&back, &m);
        let n = m.height();
        let p = Prompt::Point(PointPrompt::positive((seed % n as u64) as usize, ((seed >> 8) % n as u64) as usize));
        prop_assert_eq!(g.inverse().apply_prompt(&g.apply_prompt(&p, n), n), p);
        prop_assert_eq!(g.apply_mask(&m).unwrap().area(), m.area());
    }

    #[test]
    fn preprocess_coordinates_stay_in_bounds(h in 1usize..5000, w in 1usize..5000, target in 8usize..1100, fr in 0.0f64..1.0, fc in 0.0f64..1.0) {
        let rec = PreprocessRecord::new(h, w, target).unwrap();
        prop_assert_eq!(rec.scaled.0.max(rec.scaled.1), target);
        prop_assert_eq!(rec.scaled.0 + rec.pad.0, target);
        prop_assert_eq!(rec.scaled.1 + rec.pad.1, target);
        let p = PointPrompt::positive(((h - 1) as f64 * fr) as usize, ((w - 1) as f64 * fc) as usize);
        let q = rec.point_to_model(p);
        prop_assert!(q.row < rec.scaled.0 && q.col < rec.scaled.1);
        let back = rec.point_to_original(q);
        let tol = if rec.scale >= 1.0 { 0 } else { (1.0 / rec.scale).ceil() as usize + 1 };
        prop_assert!(back.row.abs_diff(p.row) <= tol && back.col.abs_diff(p.col) <= tol);
    }

    #[test]
    fn loss_is_finite_and_nonnegative((pred, gt) in mask_pair(12), magnitude in 0.1f32..30.0) {
        let logits = mask_to_logits(&pred, magnitude).unwrap();
        let loss = segmentation_loss(&logits, &gt).unwrap().to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
    }

    #[test]
    fn mean_std_bounds(values in proptest::collection::vec(0.0f64..1.0, 1..50)) {
        let (mean, std) = mean_std(&values);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        prop_assert!(std >= 0.0 && std <= (hi - lo) / 2.0 + 1e-12);
    }
}

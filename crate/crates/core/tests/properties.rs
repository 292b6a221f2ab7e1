//! Randomized invariants: metric symmetries, mask cardinality, substitution
//! row discipline, and the patchify round trip.

use ndarray::{Array2, Array3};
use paco_core::codebook::{substitute, PatchCodebook, TokenSelection};
use paco_core::eval::{
    auc_fr, f1_per_class, nme_fraction, LandmarkPrediction, NormMode, ParsingPrediction,
};
use paco_core::mask::{mask_cardinality, sample_mask, MaskSet};
use paco_core::patch::{patchify, unpatchify, ImageTensor};
use paco_core::rng::stream_rng;
use proptest::prelude::*;

const MODES: [NormMode; 3] = [NormMode::InterOcular, NormMode::Diag, NormMode::Box];

/// Ground truth plus a bounded perturbation, with non-degenerate eye and
/// bounding-box geometry so every normalizer is defined.
fn landmark_pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (6usize..12)
        .prop_flat_map(|rows| {
            (
                prop::collection::vec(-50.0..150.0f64, rows * 2),
                prop::collection::vec(-5.0..5.0f64, rows * 2),
            )
                .prop_map(move |(gt, delta)| {
                    let gt = Array2::from_shape_vec((rows, 2), gt).expect("shape");
                    let noise = Array2::from_shape_vec((rows, 2), delta).expect("shape");
                    (&gt + &noise, gt)
                })
        })
        .prop_filter("non-degenerate geometry", |(_, gt)| {
            let dx = gt[[4, 0]] - gt[[5, 0]];
            let dy = gt[[4, 1]] - gt[[5, 1]];
            let eye = (dx * dx + dy * dy).sqrt();
            let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
            for row in gt.rows() {
                min_x = min_x.min(row[0]);
                max_x = max_x.max(row[0]);
                min_y = min_y.min(row[1]);
                max_y = max_y.max(row[1]);
            }
            eye > 1.0 && (max_x - min_x) > 1.0 && (max_y - min_y) > 1.0
        })
}

proptest! {
    /// Shifting prediction and ground truth together never changes the
    /// normalized error, for any normalizer.
    #[test]
    fn nme_is_translation_invariant(
        (pred, gt) in landmark_pair(),
        tx in -100.0..100.0f64,
        ty in -100.0..100.0f64,
    ) {
        let base = LandmarkPrediction::new(pred.clone(), gt.clone())
            .unwrap()
            .with_standard_normalizers(64, 48);
        let shift = |a: &Array2<f64>| {
            let mut out = a.clone();
            for mut row in out.rows_mut() {
                row[0] += tx;
                row[1] += ty;
            }
            out
        };
        let moved = LandmarkPrediction::new(shift(&pred), shift(&gt))
            .unwrap()
            .with_standard_normalizers(64, 48);
        for mode in MODES {
            let a = nme_fraction(&base, mode).unwrap();
            let b = nme_fraction(&moved, mode).unwrap();
            prop_assert!((a - b).abs() <= 1e-9, "{mode:?}: {a} vs {b}");
        }
    }

    /// Scaling the whole scene by a power of two (points and image frame)
    /// reproduces the error bit for bit: every operation commutes with an
    /// exact power-of-two factor.
    #[test]
    fn nme_is_scale_covariant(
        (pred, gt) in landmark_pair(),
        scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0]),
    ) {
        let base = LandmarkPrediction::new(pred.clone(), gt.clone())
            .unwrap()
            .with_standard_normalizers(64, 48);
        let h = (64.0 * scale) as usize;
        let w = (48.0 * scale) as usize;
        let scaled = LandmarkPrediction::new(&pred * scale, &gt * scale)
            .unwrap()
            .with_standard_normalizers(h, w);
        for mode in MODES {
            let a = nme_fraction(&base, mode).unwrap();
            let b = nme_fraction(&scaled, mode).unwrap();
            prop_assert_eq!(a, b, "{:?} changed under pure rescaling", mode);
        }
    }

    /// Relabeling pixel positions the same way on both maps leaves every
    /// per-class F1 untouched; the score counts agreements, not geometry.
    #[test]
    fn f1_is_pixel_permutation_invariant(
        (h, w, num_classes, seed) in (3usize..14, 3usize..14, 2usize..6, any::<u64>()),
    ) {
        let mut rng = stream_rng(seed, 0);
        use rand::Rng as _;
        let flat = |rng: &mut paco_core::rng::Rng| -> Vec<u8> {
            (0..h * w).map(|_| rng.gen_range(0..num_classes) as u8).collect()
        };
        let gt_flat = flat(&mut rng);
        let pred_flat = flat(&mut rng);
        let mut perm: Vec<usize> = (0..h * w).collect();
        use rand::seq::SliceRandom as _;
        perm.shuffle(&mut rng);

        let as_map = |v: &[u8]| {
            ParsingPrediction::new(
                Array2::from_shape_vec((h, w), v.to_vec()).expect("shape"),
                num_classes,
            )
            .expect("classes in range")
        };
        let permuted = |v: &[u8]| -> Vec<u8> { perm.iter().map(|&i| v[i]).collect() };

        let base = f1_per_class(&as_map(&pred_flat), &as_map(&gt_flat), true).unwrap();
        let moved =
            f1_per_class(&as_map(&permuted(&pred_flat)), &as_map(&permuted(&gt_flat)), true)
                .unwrap();
        prop_assert_eq!(base.per_class, moved.per_class);
        prop_assert_eq!(base.mean, moved.mean);
        prop_assert_eq!(base.absent, moved.absent);
    }

    /// Making every error worse can only shrink the area under the error
    /// curve and grow the failure rate, and both stay inside [0, 1].
    #[test]
    fn auc_falls_and_fr_rises_as_errors_grow(
        errors in prop::collection::vec(0.0..0.15f64, 1..50),
        bumps in prop::collection::vec(0.0..0.1f64, 50),
    ) {
        let worse: Vec<f64> = errors
            .iter()
            .zip(bumps.iter())
            .map(|(e, b)| e + b)
            .collect();
        let (auc_a, fr_a) = auc_fr(&errors, 0.07).unwrap();
        let (auc_b, fr_b) = auc_fr(&worse, 0.07).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc_a) && (0.0..=1.0).contains(&fr_a));
        prop_assert!((0.0..=1.0).contains(&auc_b) && (0.0..=1.0).contains(&fr_b));
        prop_assert!(auc_b <= auc_a + 1e-12, "auc rose: {auc_a} -> {auc_b}");
        prop_assert!(fr_b >= fr_a - 1e-12, "fr fell: {fr_a} -> {fr_b}");
    }

    /// Mask draws always hit the exact ceil(ratio * K) cardinality, sorted
    /// strictly ascending and in range.
    #[test]
    fn mask_draws_have_exact_cardinality(
        num_patches in 1usize..300,
        ratio in 0.0..=1.0f64,
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, 0);
        let mask = sample_mask(num_patches, ratio, &mut rng).unwrap();
        prop_assert_eq!(mask.positions.len(), mask_cardinality(num_patches, ratio));
        prop_assert!(mask.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(mask.positions.iter().all(|&p| p < num_patches));
    }

    /// Substitution writes the selected token into every masked row and
    /// leaves every other row bit-identical.
    #[test]
    fn substitution_touches_only_masked_rows(
        (k, d, n) in (2usize..40, 1usize..8, 1usize..5),
        seed in any::<u64>(),
        keep in 0.0..1.0f64,
    ) {
        let mut rng = stream_rng(seed, 1);
        use rand::Rng as _;
        let embedded = Array2::from_shape_fn((k, d), |_| rng.gen_range(-2.0..2.0));
        let mut codebook = PatchCodebook::new(k, n, d, &mut rng);
        codebook
            .tokens
            .map_inplace(|v| *v = rng.gen_range(-2.0..2.0));

        let positions: Vec<usize> = (0..k).filter(|_| rng.gen_bool(keep)).collect();
        let mask = MaskSet::from_positions(positions, k).unwrap();
        let alphas: Vec<usize> = mask.positions.iter().map(|_| rng.gen_range(0..n)).collect();
        let m = mask.positions.len();
        let selection = TokenSelection {
            positions: mask.positions.clone(),
            alphas: alphas.clone(),
            logits: Array2::zeros((m, n)),
            probs: Array2::zeros((m, n)),
        };

        let out = substitute(&embedded, &codebook, &selection, &mask).unwrap();
        for row in 0..k {
            match mask.positions.iter().position(|&p| p == row) {
                Some(i) => {
                    let alpha = alphas[i];
                    for col in 0..d {
                        prop_assert_eq!(
                            out[[row, col]].to_bits(),
                            codebook.tokens[[row, alpha, col]].to_bits()
                        );
                    }
                }
                None => {
                    for col in 0..d {
                        prop_assert_eq!(out[[row, col]].to_bits(), embedded[[row, col]].to_bits());
                    }
                }
            }
        }
    }

    /// Cutting an image into patches and reassembling it is the identity,
    /// bit for bit, for every geometry and channel count.
    #[test]
    fn unpatchify_inverts_patchify(
        (gr, gc, p, c) in (1usize..6, 1usize..6, 1usize..9, prop::sample::select(vec![1usize, 3])),
        seed in any::<u64>(),
    ) {
        let (h, w) = (gr * p, gc * p);
        let mut rng = stream_rng(seed, 2);
        use rand::Rng as _;
        let image = ImageTensor::new(Array3::from_shape_fn((h, w, c), |_| rng.gen::<f64>()))
            .unwrap();
        let grid = patchify(&image, p).unwrap();
        let back = unpatchify(&grid).unwrap();
        prop_assert_eq!(&back.data, &image.data);
    }
}

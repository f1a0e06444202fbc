use neurograd::data::nifti::{parse_nifti, write_nifti, NiftiVolume};
use neurograd::data::{kfold_split, upsample_bilinear, Image, Label};
use neurograd::loss::class_weights;
use neurograd::{Tape, Tensor};
use proptest::prelude::*;

fn image() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-1e3f32..1e3, h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_spans_unit_interval((h, w, data) in image()) {
        let mut img = Image::new(h, w, data).unwrap();
        let (lo, hi) = img.min_max();
        img.normalize_min_max();
        prop_assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        if hi > lo {
            let (a, b) = img.min_max();
            prop_assert_eq!(a, 0.0);
            prop_assert_eq!(b, 1.0);
        }
    }

    #[test]
    fn bilinear_stays_within_source_range((h, w, data) in image(), oh in 1usize..40, ow in 1usize..40) {
        let out = upsample_bilinear(&data, h, w, oh, ow).unwrap();
        prop_assert_eq!(out.len(), oh * ow);
        let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let slack = 1e-3 * hi.abs().max(lo.abs()).max(1.0);
        prop_assert!(out.iter().all(|&v| v >= lo - slack && v <= hi + slack));
    }

    #[test]
    fn bilinear_preserves_constants(h in 1usize..10, w in 1usize..10, oh in 1usize..30, ow in 1usize..30, c in -5f32..5.0) {
        let out = upsample_bilinear(&vec![c; h * w], h, w, oh, ow).unwrap();
        prop_assert!(out.iter().all(|&v| (v - c).abs() <= 1e-5));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 2usize..8, seed in prop::collection::vec(-50f64..50.0, 40)) {
        let data: Vec<f64> = (0..rows * cols).map(|i| seed[i % seed.len()]).collect();
        let tape = Tape::<f64>::new();
        let t = Tensor::from_f64(&[rows, cols], &data).unwrap();
        let p = tape.var(&t).softmax().unwrap().value().unwrap();
        for r in p.data().chunks(cols) {
            let s: f64 = r.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn class_weights_follow_one_minus_share(counts in prop::collection::vec(1usize..500, 2..6)) {
        let n: usize = counts.iter().sum();
        let w = class_weights(&counts).unwrap();
        for (c, wc) in counts.iter().zip(&w.weights) {
            prop_assert!((wc - (1.0 - *c as f64 / n as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn kfold_partitions_any_roster(counts in prop::array::uniform3(5usize..40), k in 2usize..6, seed in any::<u64>()) {
        let units: Vec<(String, Label)> = Label::ALL.iter().zip(counts)
            .flat_map(|(&l, n)| (0..n).map(move |i| (format!("{l}{i}"), l))).collect();
        let a = kfold_split(&units, k, seed).unwrap();
        prop_assert_eq!(a.folds.len(), units.len());
        prop_assert!(a.folds.values().all(|&f| f < k));
        for (&l, &n) in Label::ALL.iter().zip(&counts) {
            for f in 0..k {
                let c = units.iter().filter(|(id, lab)| *lab == l && a.folds[id] == f).count();
                prop_assert!(c >= n / k && c <= n.div_ceil(k));
            }
        }
    }

    #[test]
    fn nifti_float_round_trip(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, seed in prop::collection::vec(-1e4f32..1e4, 1..16)) {
        let values: Vec<f32> = (0..nx * ny * nz).map(|i| seed[i % seed.len()]).collect();
        let v = NiftiVolume::from_f32([nx, ny, nz], values.clone()).unwrap();
        let bytes = write_nifti(&v);
        let back = parse_nifti(&bytes).unwrap();
        prop_assert_eq!(&back.voxels, &values);
        prop_assert_eq!(write_nifti(&back), bytes);
    }
}

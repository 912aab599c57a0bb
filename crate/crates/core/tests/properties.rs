use std::collections::HashSet;

use distl_core::eval::{delong_compare, dice, metrics_at, operating_point, roc_auc, BinaryMask};
use distl_core::model::{build_model, ModelSpec};
use distl_core::pipeline::{multi_crop, preprocess_image, ImageTensor, MultiCropOptions, PreprocessOptions};
use distl_core::protocol::{make_partition, pool_at, GenerationSchedule, SampleRecord, Split};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn manifest(n: usize, classes: usize) -> Vec<SampleRecord> {
    (0..n)
        .map(|i| SampleRecord::new(format!("r{i:06}"), Some(i % classes), Split::Train))
        .collect()
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn scored_sample() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..20, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 19.0).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
    })
}

#[test]
fn crop_scales_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = ImageTensor(Array2::from_shape_fn((32, 32), |(r, c)| ((r * 32 + c) % 7) as f64 / 7.0));
    let opts = MultiCropOptions::default();
    let mut draws = 0;
    while draws < 10_000 {
        let set = multi_crop(&img, 2, 4, &opts, &mut rng).unwrap();
        for r in &set.global_rects {
            assert!(r.scale >= 0.75 - 1e-12 && r.scale <= 1.0 + 1e-12, "{}", r.scale);
            assert!(r.top >= 0.0 && r.left >= 0.0 && r.top + r.size <= 32.0 + 1e-9);
        }
        for r in &set.local_rects {
            assert!(r.scale >= 0.2 - 1e-12 && r.scale <= 0.6 + 1e-12, "{}", r.scale);
            assert!(r.left + r.size <= 32.0 + 1e-9);
        }
        assert!(set.globals.iter().all(|g| g.side() == Some(32)));
        assert!(set.locals.iter().all(|l| l.side() == Some(16)));
        draws += 6;
    }
}

#[test]
fn partitions_hold_protocol_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(40..600);
        let classes = rng.random_range(2..4);
        let folds = rng.random_range(1..5);
        let frac = rng.random_range(0.05..0.5);
        let seed = rng.random();
        let m = manifest(n, classes);
        let p = make_partition(&m, frac, folds, seed).unwrap();
        assert_eq!(p.labeled.len(), (frac * n as f64 + 1e-9).floor() as usize);

        let mut seen = HashSet::new();
        for r in p.labeled.iter().chain(p.folds.iter().flatten()) {
            assert!(seen.insert(r.id.clone()), "record {} appears twice", r.id);
        }
        assert_eq!(seen.len(), n);

        let sizes: Vec<usize> = p.folds.iter().map(Vec::len).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "fold sizes {sizes:?}");

        let t_max = rng.random_range(1..5);
        let schedule = GenerationSchedule::linear(folds, t_max).unwrap();
        let mut prev: HashSet<String> = HashSet::new();
        for t in 1..=t_max {
            let pool: HashSet<String> = pool_at(&p, &schedule, t).unwrap().into_iter().map(|r| r.id).collect();
            assert!(prev.is_subset(&pool), "pool shrank at T={t}");
            assert!(pool.len() >= prev.len());
            assert!(p.labeled.iter().all(|r| !pool.contains(&r.id)));
            prev = pool;
        }
        assert_eq!(prev.len(), p.unlabeled_len());

        let again = make_partition(&m, frac, folds, seed).unwrap();
        assert_eq!(again.labeled, p.labeled);
    }
}

#[test]
fn full_scale_split_arithmetic() {
    let m = manifest(35_985, 2);
    let p = make_partition(&m, 0.1, 3, 0).unwrap();
    assert_eq!(p.labeled.len(), 3_598);
    assert_eq!(p.unlabeled_len(), 32_387);
}

#[test]
fn parameter_count_matches_closed_form() {
    for (patch, depth, d, heads, mlp, hidden, k, bottleneck, proj) in
        [(4, 1, 8, 2, 2, 16, 2, 8, 8), (8, 3, 24, 3, 4, 32, 5, 16, 40), (16, 2, 16, 1, 1, 8, 1, 4, 4)]
    {
        let spec = ModelSpec {
            input_side: 32,
            patch_side: patch,
            depth,
            heads,
            embed_dim: d,
            num_classes: k,
            proj_dim: proj,
            head_hidden: hidden,
            bottleneck_dim: bottleneck,
            mlp_ratio: mlp,
        };
        let tokens = (32 / patch) * (32 / patch) + 1;
        let h = d * mlp;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        let head = |out: usize| d * hidden + hidden + hidden * hidden + hidden + hidden * out + out;
        let expected = patch * patch * d + d + d + tokens * d + depth * block + 2 * d + head(k) + head(bottleneck) + bottleneck * proj;
        let params = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(params.param_count(), expected, "{spec:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored_sample()) {
        let roc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((roc.auc - brute_auc(&scores, &labels)).abs() < 1e-12);
        prop_assert!(roc.ci95.0 <= roc.auc && roc.auc <= roc.ci95.1);
        prop_assert!(roc.ci95.0 >= 0.0 && roc.ci95.1 <= 1.0);
    }

    #[test]
    fn operating_point_is_exhaustive_optimum((scores, labels) in scored_sample(), min_sens in 0.0f64..1.0) {
        let roc = roc_auc(&scores, &labels).unwrap();
        let op = operating_point(&roc, &scores, &labels, min_sens).unwrap();
        let mut thresholds: Vec<f64> = scores.clone();
        thresholds.push(f64::INFINITY);
        let best = thresholds
            .iter()
            .map(|&t| metrics_at(&scores, &labels, t))
            .filter(|m| m.sensitivity >= min_sens)
            .map(|m| (m.specificity, m.sensitivity))
            .fold(None, |acc: Option<(f64, f64)>, x| match acc {
                Some(a) if a >= x => Some(a),
                _ => Some(x),
            });
        match best {
            Some((spec, sens)) => {
                prop_assert!(!op.unmet_constraint);
                prop_assert_eq!((op.specificity, op.sensitivity), (spec, sens));
            }
            None => prop_assert!(op.unmet_constraint),
        }
    }

    #[test]
    fn delong_is_antisymmetric((scores, labels) in scored_sample(), noise in prop::collection::vec(0.0f64..1.0, 200)) {
        let other: Vec<f64> = scores.iter().zip(&noise).map(|(s, n)| 0.5 * s + 0.5 * n).collect();
        let ab = delong_compare(&scores, &other, &labels).unwrap();
        let ba = delong_compare(&other, &scores, &labels).unwrap();
        prop_assert!((ab.diff + ba.diff).abs() < 1e-12);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn dice_matches_pixel_counts(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let ma = BinaryMask(Array2::from_shape_vec((8, 8), a.clone()).unwrap());
        let mb = BinaryMask(Array2::from_shape_vec((8, 8), b.clone()).unwrap());
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let total = (a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count()) as f64;
        let expected = if total == 0.0 { 1.0 } else { 2.0 * inter / total };
        let d = dice(&ma, &mb).unwrap();
        prop_assert_eq!(d, expected);
        prop_assert_eq!(d, dice(&mb, &ma).unwrap());
    }

    #[test]
    fn preprocessing_is_idempotent_without_blur(values in prop::collection::vec(0.0f64..4096.0, 16 * 16)) {
        let raw = Array2::from_shape_vec((16, 16), values).unwrap();
        let opts = PreprocessOptions { side: 16, blur: false, ..PreprocessOptions::default() };
        let once = preprocess_image(raw.view(), &opts).unwrap();
        let twice = preprocess_image(once.view(), &opts).unwrap();
        for (x, y) in once.pixels().iter().zip(twice.pixels()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!(once.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

use std::collections::VecDeque;

use fewshot_seg::attention::{cycle_map, raw_affinity, resemblance_weights};
use fewshot_seg::io::tensor_file::{decode, encode};
use fewshot_seg::prototype::{pool_mask, predict};
use fewshot_seg::selfsup::superpixel::superpixels;
use fewshot_seg::selfsup::transform::{geom_transform, sample_geom, AugmentConfig, Interp};
use fewshot_seg::tensor::{Tape, Tensor};
use fewshot_seg::training::eval::{dice, fold_ranges};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn map(h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, h * w).prop_map(move |v| Tensor::new(vec![h, w], v).unwrap())
}

fn features() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(-2.0f64..2.0, d * h * w).prop_map(move |v| Tensor::new(vec![d, h, w], v).unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (Tensor<u8>, Tensor<u8>)> {
    (1usize..40).prop_flat_map(|n| {
        (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n))
            .prop_map(move |(a, b)| (Tensor::new(vec![n], a).unwrap(), Tensor::new(vec![n], b).unwrap()))
    })
}

fn shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 0..4)
}

fn shaped<T: std::fmt::Debug + Copy>(elem: impl Strategy<Value = T> + Clone) -> impl Strategy<Value = Tensor<T>> {
    shape().prop_flat_map(move |s| {
        let n: usize = s.iter().product();
        prop::collection::vec(elem.clone(), n).prop_map(move |v| Tensor::new(s.clone(), v).unwrap())
    })
}

/// Each label's pixels form one 4-connected region.
fn connected(labels: &Tensor<usize>, n_segments: usize) -> bool {
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    let l = labels.data();
    let mut seen = vec![false; h * w];
    let mut regions = 0;
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        regions += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && l[q] == l[p] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 { push(p - w) }
            if y + 1 < h { push(p + w) }
            if x > 0 { push(p - 1) }
            if x + 1 < w { push(p + 1) }
        }
    }
    regions == n_segments
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resemblance_weights_are_a_distribution(x in features()) {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let a = raw_affinity(&mut tape, v, v).unwrap();
        let cycle = cycle_map(tape.value(a)).unwrap();
        let w = resemblance_weights(&mut tape, v, &cycle).unwrap().w;
        let w = tape.value(w).data();
        prop_assert!(w.iter().all(|&p| p > 0.0 && p <= 1.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cycle_map_follows_row_then_column_maxima(x in features()) {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let a = raw_affinity(&mut tape, v, v).unwrap();
        let m = tape.value(a);
        let n = m.shape()[0];
        let cycle = cycle_map(m).unwrap();
        for i in 0..n {
            let j = cycle.via[i];
            prop_assert!((0..n).all(|k| m.at(&[i, k]) <= m.at(&[i, j])));
            prop_assert!((0..n).all(|k| m.at(&[k, j]) <= m.at(&[cycle.istar[i], j])));
        }
    }

    #[test]
    fn predictions_sum_to_one(s in (2usize..5, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-20.0f64..20.0, c * h * w).prop_map(move |v| Tensor::new(vec![c, h, w], v).unwrap())
    })) {
        let (c, hw) = (s.shape()[0], s.shape()[1] * s.shape()[2]);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(s);
        let p = predict(&mut tape, v).unwrap();
        let p = tape.value(p).data();
        for i in 0..hw {
            let col: Vec<f64> = (0..c).map(|k| p[k * hw + i]).collect();
            prop_assert!(col.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=100.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn tensors_round_trip_bitwise(f in shaped(any::<f32>()), d in shaped(any::<f64>()), u in shaped(any::<u8>())) {
        let back = decode::<f32>(&encode(&f).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), f.shape());
        prop_assert!(back.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let back = decode::<f64>(&encode(&d).unwrap()).unwrap();
        prop_assert!(back.data().iter().zip(d.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(decode::<u8>(&encode(&u).unwrap()).unwrap(), u);
    }

    #[test]
    fn fold_ranges_partition_the_scans(n in 2usize..60, folds in 2usize..10) {
        prop_assume!(folds <= n);
        let r = fold_ranges(n, folds).unwrap();
        prop_assert_eq!(r.len(), folds);
        prop_assert_eq!(r[0].start, 0);
        prop_assert_eq!(r[folds - 1].end, n);
        prop_assert!(r.windows(2).all(|p| p[0].end == p[1].start));
        let sizes: Vec<usize> = r.iter().map(|x| x.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pooled_masks_stay_fractional(m in map(8, 12, 0.0, 1.0).prop_map(|t| t.map(|v| v.round())), sigma in prop::sample::select(vec![1usize, 2, 4])) {
        let p = pool_mask(&m, sigma).unwrap();
        prop_assert_eq!(p.shape(), &[8 / sigma, 12 / sigma][..]);
        prop_assert!(p.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        prop_assert!((p.data().iter().sum::<f64>() * (sigma * sigma) as f64 - m.data().iter().sum::<f64>()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn warped_masks_stay_binary(bits in prop::collection::vec(0u8..2, 24 * 24), seed in any::<u64>()) {
        let mask = Tensor::new(vec![24, 24], bits).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_geom(&mut rng, &AugmentConfig::default(), 24, 24);
        let out = geom_transform(&mask, &p, Interp::Nearest).unwrap();
        prop_assert!(out.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn superpixels_partition_into_connected_segments(
        img in prop::collection::vec(0.0f32..1.0, 20 * 20),
        k in 0.0f64..2.0,
        min_size in 1usize..20,
        seed in any::<u64>(),
    ) {
        let image = Tensor::new(vec![20, 20], img).unwrap();
        let sp = superpixels(&image, k, min_size, seed).unwrap();
        let areas = sp.areas();
        prop_assert_eq!(areas.iter().sum::<usize>(), 400);
        prop_assert!(areas.iter().all(|&a| a >= min_size.min(400)));
        prop_assert!(connected(&sp.labels, sp.n_segments));
    }
}

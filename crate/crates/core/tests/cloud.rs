use densify::cloud::{
    augment_with, extract_patches, farthest_point_sampling, knn, knn_all, normalize_unit_sphere, AugmentParams, Point,
    PointCloud,
};
use proptest::prelude::*;

fn cloud_strategy(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), min..=max)
        .prop_map(|pts| PointCloud::from_xyz(&pts).unwrap())
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (a - b).norm_squared()
}

/// Full sort by (distance, index).
fn knn_oracle(cloud: &PointCloud, center: usize, r: usize, include_self: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cloud.len()).filter(|&j| include_self || j != center).collect();
    order.sort_by(|&a, &b| {
        dist2(&cloud[a], &cloud[center])
            .total_cmp(&dist2(&cloud[b], &cloud[center]))
            .then(a.cmp(&b))
    });
    order.truncate(r);
    order
}

/// Quadratic-per-step greedy max-min, recomputing every distance from scratch.
fn fps_oracle(cloud: &PointCloud, k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = None::<(f64, usize)>;
        for j in 0..cloud.len() {
            if chosen.contains(&j) {
                continue;
            }
            let d = chosen.iter().map(|&c| dist2(&cloud[j], &cloud[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, j));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

proptest! {
    #[test]
    fn knn_matches_sorting(cloud in cloud_strategy(2, 40), c in 0usize..40, r in 1usize..10, include_self: bool) {
        let n = cloud.len();
        let center = c % n;
        let max = if include_self { n } else { n - 1 };
        let r = r.min(max);
        let got = knn(&cloud, center, r, include_self).unwrap();
        prop_assert_eq!(got.center, center);
        prop_assert_eq!(&got.neighbors, &knn_oracle(&cloud, center, r, include_self));
        prop_assert_eq!(&knn_all(&cloud, r, include_self).unwrap()[center], &got.neighbors);
    }

    #[test]
    fn fps_matches_greedy_oracle(cloud in cloud_strategy(1, 40), k in 1usize..40, s in 0usize..40) {
        let k = k.min(cloud.len());
        let start = s % cloud.len();
        let got = farthest_point_sampling(&cloud, k, start).unwrap();
        prop_assert_eq!(got, fps_oracle(&cloud, k, start));
    }

    #[test]
    fn normalization_is_invertible(cloud in cloud_strategy(1, 50)) {
        let (unit, norm) = normalize_unit_sphere(&cloud).unwrap();
        prop_assert!(unit.centroid().coords.norm() < 1e-9);
        let max = unit.points().iter().map(|p| p.coords.norm()).fold(0.0, f64::max);
        prop_assert!(max <= 1.0 + 1e-9);
        if norm.scale != 1.0 || max > 0.0 {
            prop_assert!((max - 1.0).abs() < 1e-9);
        }
        let back = norm.invert(&unit).unwrap();
        for (a, b) in back.points().iter().zip(cloud.points()) {
            prop_assert!((a - b).norm() < 1e-9 * (1.0 + b.coords.norm()));
        }
    }

    #[test]
    fn augmentation_scales_distances(cloud in cloud_strategy(2, 30), seed: u64) {
        let params = AugmentParams { jitter_sigma: 0.0, jitter_clip: 0.0, ..AugmentParams::default() };
        let out = augment_with(&cloud, seed, &params).unwrap();
        prop_assert_eq!(&out, &augment_with(&cloud, seed, &params).unwrap());
        let ratio = |i: usize, j: usize| (out[i] - out[j]).norm() / (cloud[i] - cloud[j]).norm();
        let mut scale = None;
        for i in 0..cloud.len() {
            for j in i + 1..cloud.len() {
                if (cloud[i] - cloud[j]).norm() < 1e-6 {
                    continue;
                }
                let s = ratio(i, j);
                prop_assert!((0.8 - 1e-9..=1.2 + 1e-9).contains(&s));
                let s0 = *scale.get_or_insert(s);
                prop_assert!((s - s0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jitter_is_clipped(cloud in cloud_strategy(1, 30), seed: u64) {
        let params = AugmentParams { rotate: false, scale_range: (1.0, 1.0), jitter_sigma: 0.05, jitter_clip: 0.03 };
        let out = augment_with(&cloud, seed, &params).unwrap();
        for (a, b) in out.points().iter().zip(cloud.points()) {
            prop_assert!((a - b).amax() <= 0.03 + 1e-12);
        }
    }
}

#[test]
fn disabled_augmentation_is_identity() {
    let cloud = PointCloud::from_xyz(&[[0.1, 0.2, 0.3], [-1.0, 2.0, 0.5]]).unwrap();
    assert_eq!(augment_with(&cloud, 9, &AugmentParams::disabled()).unwrap(), cloud);
}

#[test]
fn patches_have_requested_shape() {
    let cloud = PointCloud::new(
        (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                Point::new(t.cos(), t.sin(), (i as f64 / 200.0) - 0.5)
            })
            .collect(),
    )
    .unwrap();
    let patches = extract_patches(&cloud, 5, 32).unwrap();
    assert_eq!(patches.len(), 5);
    for p in &patches {
        assert_eq!(p.cloud.len(), 32);
        assert_eq!(p.source_indices[0], p.seed_index);
        let max = p.cloud.points().iter().map(|q| q.coords.norm()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-9);
    }
    assert!(extract_patches(&cloud, 5, 201).is_err());
}

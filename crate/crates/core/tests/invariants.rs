use ndarray::{Array2, Array3};
use proptest::prelude::*;

use segxal_core::ebu::{entropy_map, raw_entropy};
use segxal_core::eem::{binarize_threshold, extract_candidates, fuse, ExtractParams};
use segxal_core::geometry::{apply_edits, point_in_polygon, rasterize_polygon, Edit};
use segxal_core::oracle::{AnnotationRecord, AnnotationSource};
use segxal_core::pae::{nearest_rank_quantile, proximity_mask};
use segxal_core::selection::{dice, select, SelectionInput};
use segxal_core::types::{
    deserialize_pool, serialize_pool, DepthMap, DepthSource, HeatKind, HeatMap, LabelMask, ProbMap, SamplePool, IGNORE,
};

fn probmap(c: usize, h: usize, w: usize) -> impl Strategy<Value = ProbMap> {
    prop::collection::vec(-6.0f64..6.0, c * h * w)
        .prop_map(move |v| ProbMap::from_logits(&Array3::from_shape_vec((c, h, w), v).unwrap()))
}

fn heat(h: usize, w: usize, kind: HeatKind) -> impl Strategy<Value = HeatMap> {
    prop::collection::vec(0.0f64..=1.0, h * w)
        .prop_map(move |v| HeatMap::new(Array2::from_shape_vec((h, w), v).unwrap(), kind))
}

fn mask(h: usize, w: usize, c: u8, ignore: bool) -> impl Strategy<Value = LabelMask> {
    let cell = if ignore {
        prop_oneof![9 => 0..c, 1 => Just(IGNORE)].boxed()
    } else {
        (0..c).boxed()
    };
    prop::collection::vec(cell, h * w)
        .prop_map(move |v| LabelMask::new(Array2::from_shape_vec((h, w), v).unwrap(), c).unwrap())
}

fn record(id: &str, corrected: LabelMask) -> AnnotationRecord {
    AnnotationRecord {
        sample_id: id.into(),
        corrected,
        regions_covered: vec![1],
        source: AnnotationSource::MachinePseudolabel,
        annotator_id: None,
        elapsed: 0.0,
    }
}

/// Random convex polygon: sorted angles around a centre inside the frame.
fn convex_polygon(h: usize, w: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    (
        0.2f64..0.8,
        0.2f64..0.8,
        prop::collection::btree_set(0u32..3600, 3..9),
        1.0f64..6.0,
    )
        .prop_map(move |(cy, cx, angles, rad)| {
            let (cy, cx) = (cy * h as f64, cx * w as f64);
            angles
                .into_iter()
                .map(|a| {
                    let t = a as f64 / 3600.0 * std::f64::consts::TAU;
                    [(cy + rad * t.sin()).clamp(0.0, h as f64), (cx + rad * t.cos()).clamp(0.0, w as f64)]
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_bounded_and_permutation_invariant(
        p in (2usize..7).prop_flat_map(|c| probmap(c, 3, 4)),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let c = p.num_classes();
        let h = raw_entropy(&p);
        for &v in &h {
            prop_assert!(v >= 0.0 && v <= (c as f64).log2() + 1e-12);
        }
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut q = p.clone();
        for (k, &src) in perm.iter().enumerate() {
            q.probs.index_axis_mut(ndarray::Axis(0), k).assign(&p.probs.index_axis(ndarray::Axis(0), src));
        }
        prop_assert_eq!(raw_entropy(&q), h);
        let (m, stats) = entropy_map(&p, None).unwrap();
        prop_assert!(m.violations().is_empty());
        prop_assert!(stats.min <= stats.mean && stats.mean <= stats.max);
    }

    #[test]
    fn fusion_stays_in_unit_range_and_reduces(
        prox in heat(5, 6, HeatKind::ProxGradcam),
        ent in heat(5, 6, HeatKind::Entropy),
        alpha in 0.0f64..1.0,
    ) {
        let e = fuse(&prox, &ent, alpha, 1.0 - alpha).unwrap();
        prop_assert!(e.map.violations().is_empty());
        prop_assert_eq!(&fuse(&prox, &ent, 1.0, 0.0).unwrap().map.values, &prox.values);
        prop_assert_eq!(&fuse(&prox, &ent, 0.0, 1.0).unwrap().map.values, &ent.values);
    }

    #[test]
    fn dice_is_symmetric_bounded_and_reflexive(a in mask(4, 5, 3, true), b in mask(4, 5, 3, true)) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn select_conserves_and_is_monotone_in_theta(
        pairs in prop::collection::vec((mask(4, 4, 3, false), mask(4, 4, 3, false)), 1..8),
        extra in 0usize..4,
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let records: Vec<AnnotationRecord> =
            pairs.iter().enumerate().map(|(k, (_, c))| record(&format!("s{k}"), c.clone())).collect();
        let mut base = SamplePool::default();
        for k in 0..pairs.len() + extra {
            base.candidate.insert(format!("s{k}"));
        }
        base.labeled.insert("l0".into());
        base.unlabeled.insert("u0".into());
        let inputs: Vec<SelectionInput> =
            pairs.iter().zip(&records).map(|((p, _), r)| SelectionInput { prediction: p, record: r }).collect();
        let mut accepted = Vec::new();
        for theta in [lo, hi] {
            let mut pool = base.clone();
            let d = select(&inputs, theta, false, &mut pool, 1).unwrap();
            prop_assert_eq!(pool.len(), base.len());
            prop_assert_eq!(pool.all_ids(), base.all_ids());
            prop_assert!(pool.candidate.is_empty());
            prop_assert!(pool.audit().is_ok());
            accepted.push(d.iter().map(|x| x.accepted).collect::<Vec<_>>());
        }
        for (a_lo, a_hi) in accepted[0].iter().zip(&accepted[1]) {
            prop_assert!(!a_hi || *a_lo);
        }
    }

    #[test]
    fn extracted_regions_are_disjoint_ranked_and_above_threshold(
        ent in heat(12, 16, HeatKind::Entropy),
        pct in 50.0f64..95.0,
        min_px in 1usize..6,
    ) {
        let prox = HeatMap::zeros((12, 16), HeatKind::ProxGradcam);
        let e = fuse(&prox, &ent, 0.0, 1.0).unwrap();
        let params = ExtractParams { percentile: pct, max_regions: 5, min_region_px: min_px };
        let prompts = extract_candidates("x", &e, &params).unwrap();
        prop_assert!(prompts.len() <= 5);
        let t = binarize_threshold(&e.map.values, pct).unwrap();
        let mut seen = Array2::from_elem((12, 16), false);
        for (k, p) in prompts.iter().enumerate() {
            prop_assert_eq!(p.rank, k + 1);
            prop_assert!(p.pixels >= min_px);
            prop_assert_eq!(p.iter_pixels().count(), p.pixels);
            prop_assert!(p.contains(p.anchor[0], p.anchor[1]));
            if k > 0 {
                prop_assert!(prompts[k - 1].score >= p.score);
            }
            for ij in p.iter_pixels() {
                prop_assert!(e.map.values[ij] >= t);
                prop_assert!(!seen[ij]);
                seen[ij] = true;
            }
        }
    }

    #[test]
    fn rasterization_matches_point_in_polygon(poly in convex_polygon(20, 24)) {
        let m = rasterize_polygon(&poly, 20, 24);
        for ((i, j), &v) in m.indexed_iter() {
            prop_assert_eq!(v, point_in_polygon(&poly, [i as f64 + 0.5, j as f64 + 0.5]));
        }
    }

    #[test]
    fn brush_edits_touch_only_their_runs(
        init in mask(6, 8, 4, false),
        runs in prop::collection::vec((0usize..6, 0usize..8, 1usize..4), 1..5),
        class in 0u8..4,
    ) {
        let runs: Vec<[usize; 3]> = runs.into_iter().map(|(r, c, n)| [r, c, n.min(8 - c)]).collect();
        let out = apply_edits(&init, &[Edit::Brush { class_id: class, runs: runs.clone() }]).unwrap();
        for ((i, j), &v) in out.labels.indexed_iter() {
            let hit = runs.iter().any(|&[r, c, n]| r == i && (c..c + n).contains(&j));
            prop_assert_eq!(v, if hit { class } else { init.labels[[i, j]] });
        }
    }

    #[test]
    fn quantile_is_an_element_with_enough_mass_below(
        v in prop::collection::vec(0.0f64..1.0, 1..50),
        q in 0.0f64..=1.0,
    ) {
        let t = nearest_rank_quantile(&v, q);
        prop_assert!(v.contains(&t));
        let below = v.iter().filter(|&&x| x <= t).count() as f64;
        prop_assert!(below >= q * v.len() as f64 - 1e-9);
    }

    #[test]
    fn proximity_mask_is_in_unit_range(
        d in prop::collection::vec(0.0f64..=1.0, 48),
        tau in 0.0f64..1.0,
        hard in any::<bool>(),
    ) {
        let depth = DepthMap { nearness: Array2::from_shape_vec((6, 8), d).unwrap(), provider: DepthSource::Synthetic };
        let m = proximity_mask(&depth, tau, hard).unwrap();
        prop_assert!(m.soft.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
        if hard || m.degenerate {
            prop_assert!(m.support().iter().any(|&s| s));
        }
    }

    #[test]
    fn pool_and_record_round_trip(
        ids in prop::collection::btree_set("[a-z]{1,6}", 0..12),
        corrected in mask(5, 7, 6, true),
    ) {
        let mut pool = SamplePool::default();
        for (k, id) in ids.iter().enumerate() {
            match k % 3 {
                0 => pool.labeled.insert(id.clone()),
                1 => pool.unlabeled.insert(id.clone()),
                _ => pool.candidate.insert(id.clone()),
            };
        }
        prop_assert_eq!(deserialize_pool(&serialize_pool(&pool).unwrap()).unwrap(), pool);
        let r = record("a", corrected);
        let back: AnnotationRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }
}

mod halo {
    use segxal_core::dataset::{near_far_pair_scene, SceneSpec};
    use segxal_core::model::{ModelConfig, UNet};
    use segxal_core::pae::{dilate, prox_gradcam, DepthProvider, PaeOptions, HALO_PX};

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn prox_gradcam_stays_within_support_and_halo(seed in 0u64..1000, tau in 0.2f64..0.9) {
            let spec = SceneSpec { width: 32, height: 16, num_classes: 5, num_objects: 2, seed };
            let scene = near_far_pair_scene(&spec, 2).unwrap();
            let model = UNet::<f32>::new(ModelConfig {
                levels: 2,
                base_channels: 4,
                init_seed: seed,
                ..ModelConfig::desk(5, 16, 32)
            })
            .unwrap();
            let out = prox_gradcam(&model, &scene.sample, &DepthProvider::synthetic(), tau, &PaeOptions::default()).unwrap();
            prop_assert!(out.map.violations().is_empty());
            if !out.fallback {
                let allowed = dilate(&out.mask.support(), HALO_PX);
                for (ij, &v) in out.map.values.indexed_iter() {
                    prop_assert!(allowed[ij] || v == 0.0);
                }
            }
        }
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = Array2::from_elem((7, 7), false);
        m[[3, 3]] = true;
        let d = dilate(&m, 2);
        assert_eq!(d.iter().filter(|&&b| b).count(), 25);
        assert!(d[[1, 1]] && d[[5, 5]] && !d[[0, 3]]);
    }
}

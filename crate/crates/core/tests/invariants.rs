use ndarray::Array2;
use proptest::prelude::*;

use maskcl::distill::{ad_loss, generate_pseudo_labels, kd_loss, OldModelOutput};
use maskcl::formats::{decode_checkpoint, decode_scenes, encode_checkpoint, encode_scene};
use maskcl::mask::BinaryMask;
use maskcl::metrics::{accumulate_pq, PqStats};
use maskcl::model::{predict, MaskActivation, ModelConfig, ModelParams};
use maskcl::objective::{assignment_cost, solve_assignment};
use maskcl::runner::oracle::brute_force_assignment;
use maskcl::synthdata::{build_dataset, make_palette, Geometry, GtSegment, Image};

fn config(activation: MaskActivation) -> ModelConfig {
    ModelConfig {
        channels: 3,
        height: 6,
        width: 6,
        queries: 5,
        dim: 8,
        hidden: 4,
        ffn: 8,
        mask_activation: activation,
        new_row_std: 0.01,
    }
}

fn normalise(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    m
}

fn prob_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.01f64..1.0, rows * cols)
        .prop_map(move |v| normalise(Array2::from_shape_vec((rows, cols), v).unwrap()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_is_optimal(rows in 0usize..5, extra in 0usize..3, values in prop::collection::vec(-1.0f64..1.0, 35)) {
        let cols = rows + extra;
        let cost = Array2::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap();
        let a = solve_assignment(&cost).unwrap();
        let mut seen = a.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), rows);
        let (best, _) = brute_force_assignment(&cost);
        prop_assert!((assignment_cost(&cost, &a) - best).abs() < 1e-12);
    }

    #[test]
    fn softmax_masks_partition_pixels(seed in any::<u64>(), pixels in prop::collection::vec(0.0f64..1.0, 108)) {
        let params = ModelParams::init(config(MaskActivation::Softmax), &[1, 2, 3], seed);
        let image = Image { channels: 3, height: 6, width: 6, data: pixels };
        let p = predict(&params, &image).unwrap();
        for col in p.masks.columns() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-9);
        }
        for row in p.class_probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_masks_in_unit_interval(seed in any::<u64>()) {
        let params = ModelParams::init(config(MaskActivation::Sigmoid), &[4], seed);
        let p = predict(&params, &Image::zeros(3, 6, 6)).unwrap();
        prop_assert!(p.masks.iter().all(|&m| (0.0..=1.0).contains(&m)));
    }

    #[test]
    fn distillation_vanishes_on_identical_old_columns(old in prob_matrix(4, 3), new_cols in 0usize..3) {
        let mut current = Array2::zeros((4, 3 + new_cols));
        current.slice_mut(ndarray::s![.., ..3]).assign(&old);
        prop_assert!(kd_loss(&current, &old).unwrap().value.abs() < 1e-12);
        prop_assert!(ad_loss(&current, &old).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn pseudo_labels_never_touch_ground_truth(
        probs in prob_matrix(3, 3),
        masks in prop::collection::vec(0.0f64..1.0, 3 * 16),
        gt_bits in prop::collection::vec(any::<bool>(), 16),
    ) {
        let old = OldModelOutput {
            height: 4,
            width: 4,
            class_probs: probs,
            masks: Array2::from_shape_vec((3, 16), masks).unwrap(),
        };
        let gt = vec![GtSegment { class_id: 9, mask: BinaryMask::from_bits(4, 4, gt_bits).unwrap() }];
        let ps = generate_pseudo_labels(&old, &gt, &[1, 2]).unwrap();
        for (i, p) in ps.iter().enumerate() {
            prop_assert!(!p.mask.overlaps(&gt[0].mask).unwrap());
            prop_assert!(p.mask.area() >= 1);
            prop_assert!(p.class_id == 1 || p.class_id == 2);
            for q in &ps[i + 1..] {
                prop_assert!(!p.mask.overlaps(&q.mask).unwrap());
            }
        }
    }

    #[test]
    fn pq_bounds(ids in prop::collection::vec(0u8..4, 16), shift in prop::collection::vec(0u8..4, 16)) {
        let seg = |v: &[u8], id: u8| GtSegment {
            class_id: 1 + (id % 2) as u16,
            mask: BinaryMask::from_bits(4, 4, v.iter().map(|&x| x == id).collect()).unwrap(),
        };
        let gt: Vec<_> = (1..4).map(|id| seg(&ids, id)).filter(|s| s.mask.area() > 0).collect();
        let pred_ids: Vec<u8> = ids.iter().zip(&shift).map(|(&a, &b)| if b == 0 { b } else { a }).collect();
        let pred: Vec<_> = (1..4).map(|id| seg(&pred_ids, id)).filter(|s| s.mask.area() > 0).collect();
        let mut stats = PqStats::default();
        accumulate_pq(&pred, &gt, &mut stats).unwrap();
        for s in stats.classes.values() {
            if let Some(sq) = s.sq() {
                prop_assert!(sq > 0.5 && sq <= 1.0);
            }
            if let Some(pq) = s.pq() {
                prop_assert!((0.0..=1.0).contains(&pq));
            }
        }
        // a prediction equal to the ground truth is perfect
        let mut exact = PqStats::default();
        accumulate_pq(&gt, &gt, &mut exact).unwrap();
        prop_assert!(exact.classes.values().all(|s| s.pq() == Some(1.0)));
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), classes in prop::collection::btree_set(1u16..50, 1..6)) {
        let classes: Vec<u16> = classes.into_iter().collect();
        let params = ModelParams::init(config(MaskActivation::Softmax), &classes, seed);
        let bytes = encode_checkpoint(&params).unwrap();
        prop_assert_eq!(decode_checkpoint(&bytes).unwrap(), params);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scene_codec_round_trip(seed in any::<u64>()) {
        let palette = make_palette(4, 2, 3, seed).unwrap();
        let geometry = Geometry { height: 10, width: 10, max_instances: 2 };
        let scenes = build_dataset(&palette, geometry, 1, seed).unwrap();
        let mut buf = Vec::new();
        for s in &scenes {
            encode_scene(s, &mut buf).unwrap();
        }
        // seeds live in the manifest, not in the records
        let expected: Vec<_> = scenes.into_iter().map(|mut s| { s.seed = 0; s }).collect();
        prop_assert_eq!(decode_scenes(&buf).unwrap(), expected);
    }
}

use mvdet::anchor::{assign_targets, decode_and_nms, generate_anchors, AnchorConfig, AnchorHeadOutput};
use mvdet::boxes::{bev_iou, decode_anchor, encode_anchor, iou3d};
use mvdet::nms::{rotated_nms, score_order};
use mvdet::oracle::{brute_assign, brute_nms, hull_bev_iou, raster_bev_iou};
use mvdet::{Box3D, GridSpec, ObjectClass, Se3};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn any_box() -> impl Strategy<Value = Box3D> {
    (
        prop::array::uniform3(-4.0..4.0f64),
        prop::array::uniform3(0.3..5.0f64),
        -3.2..3.2f64,
    )
        .prop_map(|(c, d, yaw)| Box3D::new(Vector3::from(c), d, yaw, ObjectClass::Car).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bev_iou_matches_raster(a in any_box(), b in any_box()) {
        let exact = bev_iou(&a, &b);
        prop_assert!((exact - raster_bev_iou(&a, &b, 400)).abs() < 1e-2);
        prop_assert!((exact - hull_bev_iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_is_symmetric_bounded_and_rigid(a in any_box(), b in any_box(), yaw in -3.2..3.2f64, t in prop::array::uniform3(-100.0..100.0f64)) {
        let v = iou3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou3d(&b, &a)).abs() < 1e-12);
        prop_assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
        let g = Se3::from_euler(0.0, 0.0, yaw, Vector3::from(t));
        prop_assert!((bev_iou(&a.transformed(&g), &b.transformed(&g)) - bev_iou(&a, &b)).abs() < 1e-9);
        prop_assert!((iou3d(&a.transformed(&g), &b.transformed(&g)) - v).abs() < 1e-9);
    }

    #[test]
    fn anchor_encoding_round_trips(g in any_box(), a in any_box()) {
        let d = decode_anchor(&encode_anchor(&g, &a), &a);
        prop_assert!((d.center - g.center).norm() < 1e-9);
        for k in 0..3 {
            prop_assert!((d.dims[k] - g.dims[k]).abs() < 1e-9);
        }
        prop_assert!(mvdet::boxes::wrap_angle(d.yaw - g.yaw).abs() < 1e-9);
    }
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Box3D> {
    (0..n)
        .map(|_| {
            let class = ObjectClass::from_index(rng.gen_range(0..3)).unwrap();
            Box3D::new(
                Vector3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), 0.0),
                [rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.5), 1.5],
                rng.gen_range(-3.2..3.2),
                class,
            )
            .unwrap()
            .with_score(rng.gen_range(0.0..1.0))
        })
        .collect()
}

#[test]
fn nms_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let boxes = random_boxes(&mut rng, 200, 20.0);
        let order = score_order(&boxes);
        for thr in [0.1, 0.3, 0.7] {
            assert_eq!(rotated_nms(&boxes, &order, thr), brute_nms(&boxes, &order, thr));
        }
        let kept = rotated_nms(&boxes, &order, 0.1);
        let kept_boxes: Vec<Box3D> = kept.iter().map(|&i| boxes[i]).collect();
        let again = rotated_nms(&kept_boxes, &score_order(&kept_boxes), 0.1);
        assert_eq!(again.len(), kept.len(), "NMS is idempotent");
    }
}

#[test]
fn assignment_matches_brute_force() {
    let grid = GridSpec::new((0.0, 12.0), (-6.0, 6.0), (-2.0, 2.0), [1.0, 1.0, 4.0]).unwrap();
    let cfg = AnchorConfig::default();
    let anchors = generate_anchors(&grid, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let n = rng.gen_range(0..5);
        let gts: Vec<Box3D> = random_boxes(&mut rng, n, 5.0)
            .into_iter()
            .map(|b| b.with_center(Vector3::new(b.center.x + 6.0, b.center.y, 0.0)))
            .collect();
        let fast = assign_targets(&anchors, &gts, &cfg).unwrap();
        assert_eq!(fast.labels, brute_assign(&anchors, &gts, &cfg));
    }
}

#[test]
fn perfect_head_output_decodes_to_ground_truth() {
    let grid = GridSpec::new((0.0, 20.0), (-10.0, 10.0), (-2.0, 2.0), [0.5, 0.5, 4.0]).unwrap();
    let cfg = AnchorConfig::default();
    let anchors = generate_anchors(&grid, &cfg);
    let gts = vec![
        Box3D::new(Vector3::new(5.1, 2.3, -0.2), [4.6, 2.0, 1.7], 0.4, ObjectClass::Car).unwrap(),
        Box3D::new(Vector3::new(12.2, -4.6, 0.1), [0.9, 0.8, 1.8], -2.0, ObjectClass::Pedestrian).unwrap(),
        Box3D::new(Vector3::new(15.7, 6.1, 0.0), [1.8, 0.7, 1.7], 2.9, ObjectClass::Cyclist).unwrap(),
    ];
    let assignment = assign_targets(&anchors, &gts, &cfg).unwrap();
    let out = AnchorHeadOutput::from_assignment(&anchors, &assignment);
    let dets = decode_and_nms(&out, &anchors, &cfg).unwrap();
    assert_eq!(dets.len(), gts.len());
    for gt in &gts {
        let d = dets.iter().find(|d| d.class == gt.class).unwrap();
        assert!((d.center - gt.center).norm() < 1e-9);
        assert!(mvdet::boxes::wrap_angle(d.yaw - gt.yaw).abs() < 1e-9);
    }
}

use std::collections::BTreeMap;

use nalgebra::UnitQuaternion;
use patchvote::geom::{Pose, Vec3};
use patchvote::mesh::{colored_icosphere, cube, l_prism, Mesh};
use patchvote::metrics::{
    match_detections, pose_error_add, pose_error_adi, Instance, MetricConfig, Prf,
};
use proptest::prelude::*;

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (
        -3.2f64..3.2,
        -1.5f64..1.5,
        -3.2f64..3.2,
        -0.3f64..0.3,
        -0.3f64..0.3,
        0.4f64..1.5,
    )
        .prop_map(|(r, p, y, tx, ty, tz)| {
            Pose::new(
                UnitQuaternion::from_euler_angles(r, p, y),
                Vec3::new(tx, ty, tz),
            )
        })
}

fn meshes() -> Vec<Mesh> {
    vec![
        cube(0.1),
        l_prism(0.14, 0.05, 0.06),
        colored_icosphere(0.06, 1, 3),
    ]
}

fn table() -> BTreeMap<u32, Mesh> {
    meshes()
        .into_iter()
        .enumerate()
        .map(|(i, m)| (i as u32, m))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn errors_are_invariant_to_a_common_rigid_motion(
        gt in pose_strategy(),
        est in pose_strategy(),
        motion in pose_strategy(),
        which in 0usize..3,
    ) {
        let mesh = &meshes()[which];
        let add = pose_error_add(mesh, &gt, &est);
        let moved = pose_error_add(mesh, &motion.compose(&gt), &motion.compose(&est));
        prop_assert!((add - moved).abs() <= 1e-9 * (1.0 + add));
        let adi = pose_error_adi(mesh, &gt, &est);
        let moved = pose_error_adi(mesh, &motion.compose(&gt), &motion.compose(&est));
        prop_assert!((adi - moved).abs() <= 1e-9 * (1.0 + adi));
    }

    #[test]
    fn adi_never_exceeds_add(gt in pose_strategy(), est in pose_strategy(), which in 0usize..3) {
        let mesh = &meshes()[which];
        prop_assert!(pose_error_adi(mesh, &gt, &est) <= pose_error_add(mesh, &gt, &est) + 1e-12);
        prop_assert!(pose_error_add(mesh, &gt, &gt) < 1e-12);
        prop_assert!(pose_error_adi(mesh, &gt, &gt) < 1e-12);
    }

    #[test]
    fn a_pure_translation_error_is_its_length(gt in pose_strategy(), d in (-0.2f64..0.2, -0.2f64..0.2, -0.2f64..0.2)) {
        let mesh = cube(0.1);
        let offset = Vec3::new(d.0, d.1, d.2);
        let est = Pose::new(*gt.rotation(), gt.translation + offset);
        prop_assert!((pose_error_add(&mesh, &gt, &est) - offset.norm()).abs() < 1e-9);
    }

    #[test]
    fn counts_partition_detections_and_ground_truth(
        gts in proptest::collection::vec((0u32..3, pose_strategy()), 0..6),
        dets in proptest::collection::vec((0u32..3, pose_strategy()), 0..6),
        copies in proptest::collection::vec((0usize..6, -0.01f64..0.01), 0..4),
        k_m in 0.05f64..0.5,
    ) {
        let gt: Vec<Instance> = gts.iter().map(|&(object_id, pose)| Instance { object_id, pose }).collect();
        let mut det: Vec<Instance> = dets.iter().map(|&(object_id, pose)| Instance { object_id, pose }).collect();
        // Near copies of ground truth make matches likely.
        for &(i, dx) in &copies {
            if let Some(g) = gt.get(i) {
                det.push(Instance {
                    object_id: g.object_id,
                    pose: Pose::new(*g.pose.rotation(), g.pose.translation + Vec3::new(dx, 0.0, 0.0)),
                });
            }
        }
        let cfg = MetricConfig { k_m, symmetric: vec![0] };
        let r = match_detections(&det, &gt, &table(), &cfg).unwrap();
        prop_assert_eq!(r.prf.tp + r.prf.fn_, gt.len());
        prop_assert_eq!(r.prf.tp + r.prf.fp, det.len());
        prop_assert_eq!(r.prf.tp, r.matches.len());
        let mut seen_d = vec![false; det.len()];
        let mut seen_g = vec![false; gt.len()];
        for m in &r.matches {
            prop_assert!(!seen_d[m.detection] && !seen_g[m.gt]);
            seen_d[m.detection] = true;
            seen_g[m.gt] = true;
            prop_assert_eq!(det[m.detection].object_id, gt[m.gt].object_id);
            prop_assert!(m.error < k_m * table()[&gt[m.gt].object_id].diameter());
        }
        let (p, rc, f) = (r.prf.precision(), r.prf.recall(), r.prf.f1());
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&rc) && (0.0..=1.0).contains(&f));
        if p + rc > 0.0 {
            prop_assert!((f - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_inputs_score_zero() {
    let cfg = MetricConfig::default();
    let r = match_detections(&[], &[], &table(), &cfg).unwrap();
    assert_eq!(r.prf, Prf::default());
    assert_eq!(
        (r.prf.precision(), r.prf.recall(), r.prf.f1()),
        (0.0, 0.0, 0.0)
    );
}

#[test]
fn unknown_objects_and_bad_thresholds_are_errors() {
    let inst = Instance {
        object_id: 7,
        pose: Pose::identity(),
    };
    assert!(match_detections(&[inst], &[inst], &table(), &MetricConfig::default()).is_err());
    let bad = MetricConfig {
        k_m: 0.0,
        ..MetricConfig::default()
    };
    assert!(match_detections(&[], &[], &table(), &bad).is_err());
}

#[test]
fn closer_detection_wins_the_match() {
    let g = Instance {
        object_id: 1,
        pose: Pose::from_translation(Vec3::new(0.0, 0.0, 1.0)),
    };
    let near = Instance {
        object_id: 1,
        pose: Pose::from_translation(Vec3::new(0.002, 0.0, 1.0)),
    };
    let far = Instance {
        object_id: 1,
        pose: Pose::from_translation(Vec3::new(0.01, 0.0, 1.0)),
    };
    let r = match_detections(&[far, near], &[g], &table(), &MetricConfig::default()).unwrap();
    assert_eq!(r.prf, Prf::new(1, 1, 0));
    assert_eq!(r.matches[0].detection, 1);
}

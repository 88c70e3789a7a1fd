use nalgebra::UnitQuaternion;
use patchvote::frame::RgbdFrame;
use patchvote::geom::{CameraIntrinsics, Pose, Vec3};
use patchvote::mesh::{checker_plane, l_prism, Mesh};
use patchvote::render::{render, render_scene};
use patchvote::verify::{
    best_per_object, icp_refine, select_detections, verify, Detection, Verification, VerifyParams,
};

fn object() -> (Mesh, Pose) {
    let pose = Pose::new(
        UnitQuaternion::from_euler_angles(0.4, 0.3, 0.2),
        Vec3::new(0.02, -0.01, 0.6),
    );
    (l_prism(0.14, 0.05, 0.06), pose)
}

/// The object in front of a checkered wall at 1 m.
fn scene() -> RgbdFrame {
    let (mesh, pose) = object();
    let wall = checker_plane(1.5, 10, 60, 200);
    let k = CameraIntrinsics::default();
    render_scene(
        &[
            (&mesh, pose),
            (&wall, Pose::from_translation(Vec3::new(0.0, 0.0, 1.0))),
        ],
        &k,
    )
    .0
}

#[test]
fn the_true_pose_verifies_perfectly() {
    let (mesh, pose) = object();
    let v = verify(&mesh, &pose, &scene(), &VerifyParams::default()).unwrap();
    assert_eq!(v.depth_inlier_frac, 1.0);
    assert!(v.mean_color_diff < 1e-9);
    assert!(v.mean_normal_angle_deg < 1.0, "{}", v.mean_normal_angle_deg);
    assert!(v.accepted);
    assert!((v.fit() - 1.0).abs() < 1e-9);
}

#[test]
fn a_displaced_pose_is_rejected() {
    let (mesh, pose) = object();
    let frame = scene();
    for d in [
        Vec3::new(0.1, 0.0, 0.0),
        Vec3::new(0.0, -0.1, 0.0),
        Vec3::new(0.0, 0.0, 0.1),
    ] {
        let moved = Pose::new(*pose.rotation(), pose.translation + d);
        let v = verify(&mesh, &moved, &frame, &VerifyParams::default()).unwrap();
        assert!(!v.accepted, "{d:?}: {v:?}");
    }
}

#[test]
fn thirty_percent_occlusion_is_accepted() {
    let (mesh, pose) = object();
    let mut frame = scene();
    let alone = render(&mesh, &pose, &frame.intrinsics);
    let fg: Vec<usize> = (0..alone.mask.len()).filter(|&i| alone.mask[i]).collect();
    // Cover the rightmost 30% of the object with a gray occluder 10 cm closer.
    let mut by_column = fg.clone();
    by_column.sort_by_key(|&i| std::cmp::Reverse(i % frame.width()));
    let covered = (fg.len() as f64 * 0.3).round() as usize;
    for &i in &by_column[..covered] {
        frame.depth[i] -= 0.1;
        frame.color[i] = [128, 128, 128];
    }
    let v = verify(&mesh, &pose, &frame, &VerifyParams::default()).unwrap();
    assert!((v.depth_inlier_frac - 0.7).abs() < 0.01, "{v:?}");
    assert!(v.accepted, "{v:?}");
}

#[test]
fn icp_keeps_an_exact_pose() {
    let (mesh, pose) = object();
    let r = icp_refine(&mesh, &pose, &scene(), &VerifyParams::default()).unwrap();
    assert!(r.refined);
    assert!(r.residual < 1e-6, "{}", r.residual);
    let (deg, m) = r.pose.distance_to(&pose);
    assert!(m < 1e-6 && deg < 1e-4, "{m} {deg}");
}

#[test]
fn icp_recovers_a_small_perturbation() {
    let (mesh, pose) = object();
    let start = pose.perturbed(
        &Vec3::new(0.02, -0.015, 0.01),
        &Vec3::new(0.004, -0.003, 0.005),
    );
    let r = icp_refine(&mesh, &start, &scene(), &VerifyParams::default()).unwrap();
    assert!(r.refined && r.iterations > 0);
    let (deg, m) = r.pose.distance_to(&pose);
    assert!(m < 1e-3 && deg < 0.5, "{m} {deg}");
}

#[test]
fn icp_without_scene_support_does_not_refine() {
    let (mesh, pose) = object();
    let empty = RgbdFrame::new(CameraIntrinsics::default());
    let r = icp_refine(&mesh, &pose, &empty, &VerifyParams::default()).unwrap();
    assert!(!r.refined);
    assert_eq!(r.iterations, 0);
    assert_eq!(r.pose, pose);
    let v = verify(&mesh, &pose, &empty, &VerifyParams::default()).unwrap();
    assert_eq!(v.depth_inlier_frac, 0.0);
    assert_eq!(v.fit(), 0.0);
    assert!(!v.accepted);
}

fn detection(object_id: u32, x: f64, fit: f64, score: f64, accepted: bool) -> Detection {
    let centroid = Vec3::new(x, 0.0, 0.8);
    Detection {
        object_id,
        pose: Pose::from_translation(centroid),
        centroid,
        score,
        refined: true,
        verification: Verification {
            depth_inlier_frac: fit,
            mean_normal_angle_deg: 5.0,
            mean_color_diff: 0.0,
            accepted,
        },
    }
}

#[test]
fn suppression_keeps_the_better_fit() {
    let dets = vec![
        detection(0, 0.0, 0.8, 50.0, true),
        detection(0, 0.01, 0.9, 10.0, true),
        detection(1, 0.005, 0.7, 5.0, true),
        detection(0, 0.3, 0.75, 1.0, true),
        detection(0, 0.6, 0.99, 99.0, false),
    ];
    let kept = select_detections(&dets, 0.05);
    assert_eq!(
        kept,
        vec![dets[1].clone(), dets[3].clone(), dets[2].clone()]
    );
    // Equal fit falls back to the vote score.
    let tie = vec![
        detection(0, 0.0, 0.8, 1.0, true),
        detection(0, 0.01, 0.8, 2.0, true),
    ];
    assert_eq!(select_detections(&tie, 0.05), vec![tie[1].clone()]);
    assert_eq!(
        best_per_object(&dets),
        vec![dets[1].clone(), dets[2].clone()]
    );
}

#[test]
fn nothing_accepted_gives_nothing() {
    let dets = vec![
        detection(0, 0.0, 0.3, 5.0, false),
        detection(1, 0.2, 0.2, 9.0, false),
    ];
    assert!(select_detections(&dets, 0.05).is_empty());
    assert!(best_per_object(&dets).is_empty());
    assert!(select_detections(&[], 0.05).is_empty());
}

#[test]
fn invalid_parameters_are_rejected() {
    let (mesh, pose) = object();
    let frame = scene();
    let bad = VerifyParams {
        min_depth_inlier_frac: 1.5,
        ..VerifyParams::default()
    };
    assert!(verify(&mesh, &pose, &frame, &bad).is_err());
    let bad = VerifyParams {
        assoc_max_dist: 0.0,
        ..VerifyParams::default()
    };
    assert!(icp_refine(&mesh, &pose, &frame, &bad).is_err());
}

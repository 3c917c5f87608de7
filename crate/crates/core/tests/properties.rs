mod common;

use atdn::dataio::{parse_pose_file, write_pose_file};
use atdn::evaluation::{histogram, kitti_errors, KITTI_LENGTHS};
use atdn::geometry::{self, Pose, Trajectory};
use atdn::mapping::edl;
use atdn::relocalization::{argmin, candidates, CandidatePolicy};
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(scale: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-scale..scale).prop_map(Vector3::from)
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(3.0), vec3(20.0)).prop_map(|(w, t)| Pose::from_axis_angle(w, t))
}

fn walk(len: usize) -> impl Strategy<Value = Vec<Pose>> {
    prop::collection::vec((vec3(0.05), vec3(0.3)), len).prop_map(|steps| {
        let mut out = vec![Pose::identity()];
        for (w, t) in steps {
            let step = Pose::from_axis_angle(w, t + Vector3::new(0.0, 0.0, 1.0));
            out.push(out.last().unwrap().compose(&step));
        }
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn relative_inverts_compose(a in pose(), b in pose()) {
        let rel = geometry::relative(&a, &b);
        prop_assert!(a.compose(&rel).max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn inverse_is_involution(a in pose()) {
        prop_assert!(a.inverse().inverse().max_abs_diff(&a) < 1e-12);
        prop_assert!(a.compose(&a.inverse()).max_abs_diff(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn edl_is_non_negative(
        e in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 3..12),
        p in prop::collection::vec(vec3(10.0), 12),
    ) {
        let positions = &p[..e.len()];
        let loss = edl(&e, positions, 1).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }

    #[test]
    fn candidates_contain_argmin(
        profile in prop::collection::vec(0.0f64..100.0, 1..200),
        k in 0.0f64..4.0,
        q in 0.0f64..1.0,
    ) {
        let best = argmin(&profile).unwrap();
        for policy in [CandidatePolicy::ZScore(k), CandidatePolicy::Bottom(q)] {
            let c = candidates(&profile, policy);
            prop_assert!(c.contains(&best));
            prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn histogram_conserves_count(values in prop::collection::vec(0.0f64..50.0, 0..300), bins in 1usize..40) {
        let h = histogram(&values, bins);
        prop_assert_eq!(h.len(), bins);
        prop_assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), values.len());
    }

    #[test]
    fn kitti_errors_ignore_common_frame(gt in walk(120), est in walk(120), g in pose()) {
        let (gt_t, est_t) = (Trajectory::from_poses(gt).unwrap(), Trajectory::from_poses(est).unwrap());
        let base = kitti_errors(&gt_t, &est_t, &KITTI_LENGTHS[..1]).unwrap();
        let moved = kitti_errors(&gt_t.transformed(&g), &est_t.transformed(&g), &KITTI_LENGTHS[..1]).unwrap();
        prop_assert_eq!(base.subsequences, moved.subsequences);
        prop_assert!((base.translation_error - moved.translation_error).abs() < 1e-8);
        prop_assert!((base.rotation_error - moved.rotation_error).abs() < 1e-8);
    }

    #[test]
    fn pose_file_round_trip(poses in prop::collection::vec(pose(), 1..20)) {
        let traj = Trajectory::from_poses(poses).unwrap();
        let mut text = Vec::new();
        write_pose_file(&traj, &mut text).unwrap();
        let back = parse_pose_file(text.as_slice()).unwrap();
        prop_assert_eq!(back.len(), traj.len());
        for (a, b) in traj.poses().zip(back.poses()) {
            prop_assert!(a.max_abs_diff(b) < 1e-12);
        }
    }
}

use proptest::prelude::*;

use sqworld::config::RunConfig;
use sqworld::geometry::xyz::{format_xyz, parse_xyz};
use sqworld::geometry::{
    chamfer_distance, occupancy_to_points, revoxelize, transform_point, GridSpec, LabeledPoint, LabeledPointCloud, Pose,
    SparseOccupancy,
};
use sqworld::metrics::{occupancy_iou, occupancy_miou};
use sqworld::scheduling::{assign_timestamps, assignment_score, churn, greedy_assignment, StatMatrix};

const DIMS: [usize; 3] = [12, 10, 4];

fn grid() -> GridSpec<f64> {
    GridSpec::new([-3.0, -2.5, -1.0], 0.5, DIMS).unwrap()
}

fn occupancy() -> impl Strategy<Value = SparseOccupancy> {
    prop::collection::btree_map((0..DIMS[0], 0..DIMS[1], 0..DIMS[2]), 1usize..6, 0..80)
        .prop_map(|m| m.into_iter().map(|((x, y, z), l)| ([x, y, z], l)).collect::<Vec<_>>())
        .prop_map(|cells| SparseOccupancy::from_cells(cells, &grid(), 6).unwrap())
}

fn pose() -> impl Strategy<Value = Pose<f64>> {
    (-200.0..200.0f64, -200.0..200.0f64, -7.0..7.0f64).prop_map(|(x, y, yaw)| Pose::new(x, y, yaw, 0))
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64]
}

fn stat_instance() -> impl Strategy<Value = (StatMatrix, Vec<usize>)> {
    (1usize..7, 1usize..5).prop_flat_map(|(n, nt)| {
        (
            prop::collection::vec(prop::collection::vec(0u64..9, nt), n),
            prop::collection::vec(0..nt, n),
        )
            .prop_map(move |(counts, picks)| {
                let mut quota = vec![0; nt];
                picks.iter().for_each(|&t| quota[t] += 1);
                (StatMatrix { counts }, quota)
            })
    })
}

proptest! {
    #[test]
    fn revoxelizing_cell_centers_is_identity(occ in occupancy()) {
        let g = grid();
        prop_assert_eq!(revoxelize(&occupancy_to_points(&occ, &g, 2), &g).occupancy, occ);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in occupancy(), b in occupancy()) {
        let (ab, ba) = (occupancy_iou(&a, &b), occupancy_iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(occupancy_iou(&a, &a), 1.0);
        let m = occupancy_miou(&a, &b, 6).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn pose_transforms_round_trip(a in pose(), b in pose(), p in point()) {
        let back = transform_point(&transform_point(&p, &a, &b), &b, &a);
        for k in 0..3 {
            prop_assert!((back[k] - p[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_then_compose_recovers_the_pose(a in pose(), b in pose()) {
        let c = a.compose(&a.relative(&b));
        prop_assert!((c.x - b.x).abs() < 1e-9 && (c.y - b.y).abs() < 1e-9);
        prop_assert!(sqworld::geometry::wrap_angle(c.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn chamfer_is_nonnegative_and_symmetric(
        p in prop::collection::vec(point(), 1..40),
        g in prop::collection::vec(point(), 1..40),
    ) {
        let a = chamfer_distance(&p, &g).unwrap();
        let b = chamfer_distance(&g, &p).unwrap();
        prop_assert!(a.value >= 0.0);
        prop_assert!((a.value - b.value).abs() <= 1e-9 * a.value.max(1.0));
        prop_assert_eq!(a.match_p_to_g, b.match_g_to_p);
        prop_assert_eq!(chamfer_distance(&p, &p).unwrap().value, 0.0);
    }

    #[test]
    fn assignment_respects_quota_and_beats_greedy((m, quota) in stat_instance()) {
        let a = assign_timestamps(&m, &quota).unwrap();
        let mut used = vec![0; quota.len()];
        a.iter().for_each(|&t| used[t] += 1);
        prop_assert_eq!(&used, &quota);
        let g = greedy_assignment(&m, &quota).unwrap();
        prop_assert!(assignment_score(&m, &a) >= assignment_score(&m, &g) - 1e-12);
        prop_assert_eq!(churn(&a, &a), 0.0);
        prop_assert!((0.0..=1.0).contains(&churn(&a, &g)));
    }

    #[test]
    fn assignment_follows_row_permutations((m, quota) in stat_instance(), rot in 0usize..7) {
        // the optimum score does not depend on query order
        let n = m.counts.len();
        let k = rot % n;
        let mut rows = m.counts.clone();
        rows.rotate_left(k);
        let moved = StatMatrix { counts: rows };
        let a = assignment_score(&m, &assign_timestamps(&m, &quota).unwrap());
        let b = assignment_score(&moved, &assign_timestamps(&moved, &quota).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn xyz_text_round_trips(pts in prop::collection::vec((point(), 0usize..18, 0usize..5), 0..30)) {
        let cloud = LabeledPointCloud {
            points: pts.iter().map(|&(position, label, timestamp)| LabeledPoint { position, label, timestamp }).collect(),
        };
        prop_assert_eq!(parse_xyz::<f64>(&format_xyz(&cloud)).unwrap(), cloud);
    }

    #[test]
    fn config_toml_round_trips(seed in 0..=i64::MAX as u64, lp in 0.0..100.0f64, repeats in 1usize..5) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.loss.lambda_plan = lp;
        cfg.train.repeats = repeats;
        prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}

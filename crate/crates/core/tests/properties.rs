use affordgrasp::heatmap::{self, AffordanceHeatmap, HeatmapParams};
use affordgrasp::ranking::{self, RankingConfig};
use affordgrasp::{BinaryMask, CameraIntrinsics, Execution, GraspCandidate, GraspPose, ObjectPointCloud, PartSegment};
use nalgebra::Point3;
use proptest::prelude::*;

const W: u32 = 12;
const H: u32 = 9;

fn mask() -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), (W * H) as usize)
        .prop_map(|bits| BinaryMask::from_fn(W, H, |u, v| bits[(v * W + u) as usize]))
}

fn segment() -> impl Strategy<Value = PartSegment> {
    ("[a-c]", mask(), 0.0..=1.0f64).prop_map(|(l, m, c)| PartSegment::new(l, m, c).unwrap())
}

fn segments() -> impl Strategy<Value = Vec<PartSegment>> {
    prop::collection::vec(segment(), 0..4)
}

fn candidate(id: u64) -> impl Strategy<Value = GraspCandidate> {
    (
        prop::array::uniform4(-1.0..1.0f64),
        prop::array::uniform3(-0.3..0.3f64),
        prop::array::uniform3(-0.3..0.3f64),
        0.0..=1.0f64,
    )
        .prop_filter("degenerate quaternion", |(q, ..)| q.iter().map(|c| c * c).sum::<f64>() > 0.01)
        .prop_map(move |(q, t, c, conf)| {
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            let pose = GraspPose::from_wxyz(q.map(|c| c / n), [t[0], t[1], t[2] + 0.5]).unwrap();
            GraspCandidate::new(id, pose, Point3::new(c[0], c[1], c[2] + 0.8), conf).unwrap()
        })
}

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(10.0, 10.0, W as f64 / 2.0, H as f64 / 2.0).unwrap()
}

proptest! {
    #[test]
    fn segment_contributions_add(obj in segment(), a in segments(), b in segments(), u in segments()) {
        let p = HeatmapParams::default();
        let base = heatmap::compose((W, H), &obj, &[], &[], &p).unwrap();
        let whole = heatmap::compose((W, H), &obj, &[a.clone(), b.clone()].concat(), &u, &p).unwrap();
        let only_a = heatmap::compose((W, H), &obj, &a, &[], &p).unwrap();
        let only_b = heatmap::compose((W, H), &obj, &b, &[], &p).unwrap();
        let only_u = heatmap::compose((W, H), &obj, &[], &u, &p).unwrap();
        for i in 0..whole.values.len() {
            let sum = base.values[i] + (only_a.values[i] - base.values[i]) + (only_b.values[i] - base.values[i]) + (only_u.values[i] - base.values[i]);
            prop_assert!((whole.values[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn finalize_is_bounded_and_mode_independent(obj in segment(), d in segments(), u in segments()) {
        let p = HeatmapParams::default();
        let raw = heatmap::compose((W, H), &obj, &d, &u, &p).unwrap();
        let seq = heatmap::finalize_with(&raw, &p, Execution::Sequential).unwrap();
        let par = heatmap::finalize_with(&raw, &p, Execution::Parallel).unwrap();
        prop_assert_eq!(&seq, &par);
        prop_assert!(seq.values().iter().all(|v| (0.0..=255.0).contains(v)));
    }

    #[test]
    fn ranking_is_sorted_complete_and_order_free(
        values in prop::collection::vec(0.0..=255.0f64, (W * H) as usize),
        cands in (1usize..12).prop_flat_map(|n| (0..n as u64).map(candidate).collect::<Vec<_>>()),
        seed in any::<u64>(),
    ) {
        let heat = AffordanceHeatmap::new(W, H, values).unwrap();
        let cloud = ObjectPointCloud::new(
            (0..W * H).map(|i| Point3::new((i % W) as f64 * 0.01, (i / W) as f64 * 0.01, 0.9)).collect(),
            (0..W * H).map(|i| [i % W, i / W]).collect(),
        ).unwrap();
        let cfg = RankingConfig::default();
        let ranked = ranking::rank_with(&cands, &heat, &cloud, &intrinsics(), &cfg, Execution::Sequential).unwrap();
        prop_assert_eq!(ranked.len(), cands.len());
        for pair in ranked.windows(2) {
            prop_assert!(ranking::ranking_order(&pair[0], &pair[1]).is_le());
        }
        let mut shuffled = cands.clone();
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let again = ranking::rank_with(&shuffled, &heat, &cloud, &intrinsics(), &cfg, Execution::Parallel).unwrap();
        prop_assert_eq!(ranked, again);
    }
}

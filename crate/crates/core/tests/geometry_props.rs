use proptest::prelude::*;
use rotreg_core::geometry::{downsample, knn_graph, remove_translation, CameraIntrinsics, ChannelMode, PointCloudSegment};

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), min..max)
}

fn segment(points: &[[f64; 3]]) -> PointCloudSegment {
    PointCloudSegment::from_xyz(points, "p").unwrap()
}

/// True when no point has two neighbours at equal distance near its k-th rank.
fn tie_free(points: &[[f64; 3]]) -> bool {
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum())
            .collect();
        d.sort_by(f64::total_cmp);
        if d.windows(2).any(|w| w[1] - w[0] < 1e-12) {
            return false;
        }
    }
    true
}

proptest! {
    #[test]
    fn project_after_unproject_is_identity(u in 0.0f64..640.0, v in 0.0f64..480.0, z in 0.1f64..5.0) {
        let intr = CameraIntrinsics::new(525.0, 530.0, 319.5, 239.5, 640, 480).unwrap();
        let (pu, pv) = intr.project(intr.unproject(u, v, z));
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    }

    #[test]
    fn downsample_has_exact_size(points in cloud(1, 80), n in 1usize..120, seed in any::<u64>()) {
        let seg = segment(&points);
        let out = downsample(&seg, n, seed).unwrap();
        prop_assert_eq!(out.len(), n);
        prop_assert_eq!(out.mode(), ChannelMode::Xyz);
        // every output point comes from the input
        for p in out.points() {
            prop_assert!(points.iter().any(|q| q[..] == p[..]));
        }
    }

    #[test]
    fn translation_removal_composes(
        points in cloud(1, 30),
        a in prop::array::uniform3(-1.0f64..1.0),
        b in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let seg = segment(&points);
        let ab = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
        let once = remove_translation(&seg, ab);
        let twice = remove_translation(&remove_translation(&seg, a), b);
        for (x, y) in once.values().iter().zip(twice.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_is_permutation_consistent(points in cloud(12, 40), k in 1usize..8, seed in any::<u64>()) {
        prop_assume!(tie_free(&points));
        let n = points.len();
        // Fisher-Yates driven by a simple LCG so the permutation is part of the case
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        // permuted[perm[i]] = points[i]
        let mut permuted = vec![[0.0; 3]; n];
        for (i, &p) in perm.iter().enumerate() {
            permuted[p] = points[i];
        }
        let g = knn_graph(&segment(&points), k).unwrap();
        let h = knn_graph(&segment(&permuted), k).unwrap();
        for i in 0..n {
            let mapped: Vec<usize> = g.neighbors_of(i).iter().map(|&j| perm[j]).collect();
            prop_assert_eq!(h.neighbors_of(perm[i]), &mapped[..]);
        }
    }
}

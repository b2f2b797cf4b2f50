use proptest::prelude::*;
use rotreg_core::data::{generate_sample, ObjectModel};
use rotreg_core::so3::AxisAngle;

fn rotation() -> impl Strategy<Value = AxisAngle> {
    prop::array::uniform3(-3.0f64..3.0).prop_map(AxisAngle)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noiseless_points_map_back_onto_the_model(
        r in rotation(),
        t in prop::array::uniform3(-0.5f64..0.5),
        occ in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let model = ObjectModel::l_shape();
        let s = generate_sample(&model, r, t, occ, 0.0, seed).unwrap();
        let inv = s.rotation.to_rotation().transpose();
        let mut next = 0;
        for p in s.segment.points() {
            let x = inv.apply([p[0] - t[0], p[1] - t[1], p[2] - t[2]]);
            // visible points keep model order
            let hit = model.points[next..]
                .iter()
                .position(|m| (0..3).all(|c| (m[c] - x[c]).abs() < 1e-12));
            prop_assert!(hit.is_some(), "point {:?} is not on the model", x);
            next += hit.unwrap() + 1;
        }
        prop_assert_eq!(s.occlusion_factor, (s.total - s.visible) as f64 / s.total as f64);
    }

    #[test]
    fn more_occlusion_never_shows_more(
        r in rotation(),
        a in 0.0f64..0.9,
        b in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        let model = ObjectModel::symmetric_bar();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t = [0.0, 0.0, 1.0];
        let s_lo = generate_sample(&model, r, t, lo, 0.0, seed).unwrap();
        let s_hi = generate_sample(&model, r, t, hi, 0.0, seed).unwrap();
        prop_assert!(s_hi.visible <= s_lo.visible);
        // same cut plane: the heavier cut removes a superset of points
        for p in s_hi.segment.points() {
            prop_assert!(s_lo.segment.points().any(|q| q == p));
        }
    }
}

use pointillist::gaussian::Gaussian;
use pointillist::geometry::{
    barycentric, face_transform, global_to_local, local_to_global, GlobalGaussian, Point3, Quat,
};
use pointillist::pipeline::spearman;
use pointillist::render::{render, render_brute_force, Camera, RenderOptions};
use proptest::prelude::*;

fn point(r: f64) -> impl Strategy<Value = Point3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn quat() -> impl Strategy<Value = Quat<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-zero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-2)
        .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalized())
}

fn triangle() -> impl Strategy<Value = [Point3<f64>; 3]> {
    (point(1.0), point(1.0), point(1.0))
        .prop_filter("well shaped", |(a, b, c)| (*b - *a).cross(*c - *a).norm() > 1e-2)
        .prop_map(|(a, b, c)| [a, b, c])
}

fn gaussian() -> impl Strategy<Value = Gaussian<f64>> {
    (point(0.5), quat(), point(0.2), (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 0.05..0.99f64).prop_map(
        |(position, rotation, s, (r, g, b), opacity)| Gaussian {
            position,
            rotation,
            scale: Point3::new(s.x.abs() + 0.03, s.y.abs() + 0.03, s.z.abs() + 0.03),
            color: [r, g, b],
            opacity,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn face_frames_are_proper_rotations([a, b, c] in triangle()) {
        let f = face_transform(a, b, c).unwrap();
        let r = f.rotation;
        prop_assert!(r.transpose().mul_mat(&r).max_abs_diff(&pointillist::geometry::Mat3::identity()) < 1e-9);
        prop_assert!((r.det() - 1.0).abs() < 1e-9);
        prop_assert!(f.scale > 0.0);
    }

    #[test]
    fn local_global_round_trip([a, b, c] in triangle(), p in point(1.0), q in quat(), s in point(0.3)) {
        let f = face_transform(a, b, c).unwrap();
        let g = GlobalGaussian { position: p, rotation: q, scale: s };
        let back = local_to_global(&global_to_local(&g, &f), &f);
        prop_assert!((back.position - p).max_abs() < 1e-9);
        prop_assert!((back.scale - s).max_abs() < 1e-9);
        // q and −q are the same rotation
        let d = back.rotation.to_array().iter().zip(q.to_array()).map(|(x, y)| x * y).sum::<f64>();
        prop_assert!((d.abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn barycentric_reconstructs_in_plane_points([a, b, c] in triangle(), u in -0.5..1.5f64, v in -0.5..1.5f64) {
        let p = a * (1.0 - u - v) + b * u + c * v;
        let w = barycentric(p, a, b, c).unwrap();
        prop_assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-9);
        prop_assert!((w[1] - u).abs() < 1e-6 && (w[2] - v).abs() < 1e-6);
    }

    #[test]
    fn rotations_preserve_length(q in quat(), v in point(2.0)) {
        prop_assert!((q.rotate(v).norm() - v.norm()).abs() < 1e-9);
        prop_assert!((q.to_mat3().mul_vec(v) - q.rotate(v)).max_abs() < 1e-9);
    }

    #[test]
    fn renders_stay_in_range_and_match_brute_force(
        scene in prop::collection::vec(gaussian(), 0..12),
        az in -180.0..180.0f64,
        threads in 1usize..4,
    ) {
        let cam = Camera::orbit(az, 15.0, 3.0, 30.0, 24, 24);
        let opts = RenderOptions { early_stop: false, threads };
        let out = render(&scene, &cam, opts);
        prop_assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(out.image.data.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        let brute = render_brute_force(&scene, &cam, false);
        prop_assert_eq!(out.image.data, brute.image.data);
    }

    #[test]
    fn spearman_is_bounded_symmetric_and_rank_based(
        pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 2..40),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = spearman(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((spearman(&b, &a).unwrap() - r).abs() < 1e-12);
        let squashed: Vec<f64> = a.iter().map(|x| x.exp()).collect();
        prop_assert!((spearman(&squashed, &b).unwrap() - r).abs() < 1e-9);
    }
}

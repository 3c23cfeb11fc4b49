use knudsen::geometry::{build_tube, BoundaryPoint, Point2, TubeRealization, TubeSpec, Vec2};
use knudsen::rng::stream;
use knudsen::stats::{ks_p_value, ks_statistic};
use proptest::prelude::*;
use rand::Rng;

fn reference() -> TubeRealization {
    build_tube(TubeSpec::reference(), 42).unwrap()
}

/// Marches along the ray in steps of `step` with the `inside` predicate and
/// bisects the first exit to `1e-12`.
fn marching_distance(tube: &TubeRealization, origin: Point2, dir: Vec2, step: f64) -> f64 {
    let at = |t: f64| origin + dir * t;
    let mut t = 0.0;
    while tube.inside(at(t + step)) {
        t += step;
    }
    let (mut lo, mut hi) = (t, t + step);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if tube.inside(at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn interior_point<R: Rng>(tube: &TubeRealization, a: f64, b: f64, rng: &mut R) -> Point2 {
    loop {
        let x = rng.random_range(a..b);
        let (lo, hi) = tube.section(x);
        let p = Point2::new(x, rng.random_range(lo..hi));
        if tube.inside(p) {
            return p;
        }
    }
}

fn random_dir<R: Rng>(rng: &mut R) -> Vec2 {
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    Vec2::new(a.cos(), a.sin())
}

#[test]
fn ray_casts_match_marching_oracle() {
    let tube = reference();
    let mut rng = stream(1, "oracle", 0);
    for k in 0..300 {
        let p = interior_point(&tube, -50.0, 50.0, &mut rng);
        let d = random_dir(&mut rng);
        let (hit, t) = tube.ray_to_boundary(p, d).unwrap();
        let t_ref = marching_distance(&tube, p, d, 1e-4);
        assert!((t - t_ref).abs() < 1e-6, "cast {k}: exact {t}, oracle {t_ref}");
        let q = p + d * t;
        assert!((hit.position.x - q.x).abs() < 1e-9 && (hit.position.y - q.y).abs() < 1e-9);
    }
}

#[test]
fn strip_casts_match_closed_form() {
    let tube = build_tube(TubeSpec::strip(1.0), 3).unwrap();
    let mut rng = stream(2, "strip", 0);
    for _ in 0..1000 {
        let p = interior_point(&tube, -5.0, 5.0, &mut rng);
        let d = random_dir(&mut rng);
        if d.y.abs() < 1e-3 {
            continue;
        }
        let wall = if d.y > 0.0 { 0.5 } else { -0.5 };
        let (_, t) = tube.ray_to_boundary(p, d).unwrap();
        assert!((t - (wall - p.y) / d.y).abs() < 1e-9);
    }
}

fn near_kink(b: &BoundaryPoint, tube: &TubeRealization) -> bool {
    let cell = tube.cell(b.cell_index);
    let (s, e) = cell.segment(b.segment_index);
    let d = |q: Point2| (q - b.position).norm();
    d(s).min(d(e)) < 1e-6
}

#[test]
fn rays_reverse() {
    let tube = reference();
    let mut rng = stream(3, "reverse", 0);
    let mut tested = 0;
    while tested < 1000 {
        let p = tube.sample_boundary_point(-20.0, 20.0, &mut rng);
        let d = knudsen::billiard::sample_cosine_2d(p.inward_normal, &mut rng);
        let (q, t) = tube.ray_to_boundary(p.position, d).unwrap();
        if near_kink(&p, &tube) || near_kink(&q, &tube) {
            continue;
        }
        let (back, t_back) = tube.ray_to_boundary(q.position, -d).unwrap();
        assert!((back.position - p.position).norm() < 1e-7, "{:?} vs {:?}", back.position, p.position);
        assert!((t_back - t).abs() < 1e-7);
        tested += 1;
    }
}

#[test]
fn knot_sections_are_shift_stationary() {
    // Wider knot range so the section distribution is non-degenerate.
    let tube = build_tube(TubeSpec::rough(0.4, 0.6, 0.2, 0.3), 11).unwrap();
    let mut a: Vec<f64> = (0..10_000).map(|i| tube.section_measure(i as f64 + 0.37)).collect();
    let mut b: Vec<f64> = (0..10_000).map(|i| tube.section_measure((i + 50_000) as f64 + 0.37)).collect();
    // Two-sample KS through the empirical CDF of the first sample.
    a.sort_by(f64::total_cmp);
    let cdf = |x: f64| a.partition_point(|&v| v <= x) as f64 / a.len() as f64;
    let d = ks_statistic(&mut b, cdf);
    // Effective size of a two-sample test with equal sizes is n/2.
    let p = ks_p_value(d, 5_000);
    assert!(p > 0.01, "KS p = {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sections_stay_above_corridor(seed in any::<u64>(), alpha in -1e6f64..1e6) {
        let tube = build_tube(TubeSpec::reference(), seed).unwrap();
        let bound = TubeSpec::reference().min_section_bound();
        prop_assert!(tube.section_measure(alpha) >= bound - 1e-12);
        prop_assert!(bound > 0.0);
    }

    #[test]
    fn queries_are_pure(seed in any::<u64>(), i in -1_000_000i64..1_000_000) {
        let t1 = build_tube(TubeSpec::reference(), seed).unwrap();
        let t2 = build_tube(TubeSpec::reference(), seed).unwrap();
        let _ = t2.cell(i + 1);
        prop_assert_eq!(t1.cell(i), t2.cell(i));
        prop_assert_eq!(t1.section(i as f64 + 0.3), t2.section(i as f64 + 0.3));
    }

    #[test]
    fn cells_join_continuously(seed in any::<u64>(), i in -10_000i64..10_000) {
        let tube = build_tube(TubeSpec::reference(), seed).unwrap();
        let (a, b) = (tube.cell(i), tube.cell(i + 1));
        prop_assert_eq!(a.upper.last(), b.upper.first());
        prop_assert_eq!(a.lower.last(), b.lower.first());
        prop_assert!(a.max_slope() <= TubeSpec::reference().lipschitz_bound() + 1e-12);
    }

    #[test]
    fn flights_stay_inside(seed in any::<u64>(), x in -100.0f64..100.0, angle in 0.0f64..std::f64::consts::TAU) {
        let tube = reference();
        let mut rng = stream(seed, "contain", 0);
        let p = interior_point(&tube, x, x + 1.0, &mut rng);
        let d = Vec2::new(angle.cos(), angle.sin());
        let (_, t) = tube.ray_to_boundary(p, d).unwrap();
        for k in 1..=16 {
            let q = p + d * (t * k as f64 / 17.0);
            prop_assert!(tube.inside(q), "point {k}/17 of a flight of length {t} outside");
        }
    }

    #[test]
    fn boundary_points_face_inward(seed in any::<u64>()) {
        let tube = reference();
        let mut rng = stream(seed, "normal", 0);
        let b = tube.sample_boundary_point(-30.0, 30.0, &mut rng);
        prop_assert!((b.inward_normal.norm() - 1.0).abs() < 1e-12);
        prop_assert!(tube.inside(b.position + b.inward_normal * 1e-6));
        let (s, e) = tube.cell(b.cell_index).segment(b.segment_index);
        let cross = (e - s).cross(b.position - s) / (e - s).norm();
        prop_assert!(cross.abs() < 1e-9);
    }
}

use super::*;
use crate::octree::build_levels;
use crate::util::seeded_rng;
use rand::Rng;

fn random_cloud(seed: u64, n: usize, span: f64) -> PointCloud {
    let mut rng = seeded_rng(seed, "metrics-cloud");
    PointCloud {
        points: (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..span),
                    rng.gen_range(0.0..span),
                    rng.gen_range(0.0..span),
                ]
            })
            .collect(),
    }
}

fn brute_nearest(q: &[f64; 3], pts: &[[f64; 3]], skip: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in pts.iter().enumerate() {
        if i == skip {
            continue;
        }
        let d = sq_dist(q, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn brute_k_nearest(q: &[f64; 3], pts: &[[f64; 3]], k: usize, skip: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = pts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(i, p)| (sq_dist(q, p), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.truncate(k);
    all.into_iter().map(|(d, i)| (i, d)).collect()
}

#[test]
fn kdtree_nearest_matches_brute_force() {
    for seed in 0..5u64 {
        let cloud = random_cloud(seed, 300, 100.0);
        let queries = random_cloud(seed + 100, 50, 120.0);
        let tree = KdTree::build(&cloud.points);
        for q in &queries.points {
            let (ti, td) = tree.nearest(q, usize::MAX);
            let (bi, bd) = brute_nearest(q, &cloud.points, usize::MAX);
            assert_eq!(td, bd);
            assert_eq!(ti, bi);
        }
        // With self-exclusion.
        for (i, q) in cloud.points.iter().enumerate().take(40) {
            let (ti, td) = tree.nearest(q, i);
            let (bi, bd) = brute_nearest(q, &cloud.points, i);
            assert_eq!((ti, td), (bi, bd));
        }
    }
}

#[test]
fn kdtree_k_nearest_matches_brute_force() {
    for seed in 0..4u64 {
        let cloud = random_cloud(seed + 10, 200, 50.0);
        let tree = KdTree::build(&cloud.points);
        for (i, q) in cloud.points.iter().enumerate().take(30) {
            for k in [1usize, 5, 12] {
                assert_eq!(
                    tree.k_nearest(q, k, i),
                    brute_k_nearest(q, &cloud.points, k, i)
                );
            }
        }
    }
}

#[test]
fn kdtree_handles_duplicate_points() {
    let pts = vec![[1.0, 2.0, 3.0]; 9];
    let tree = KdTree::build(&pts);
    let (_, d) = tree.nearest(&[1.0, 2.0, 3.5], usize::MAX);
    assert_eq!(d, 0.25);
    let knn = tree.k_nearest(&[1.0, 2.0, 3.0], 4, 0);
    assert_eq!(knn.len(), 4);
    assert!(knn.iter().all(|&(i, d)| i != 0 && d == 0.0));
}

fn brute_d1(a: &PointCloud, b: &PointCloud, peak: f64) -> f64 {
    let mse = |from: &PointCloud, to: &PointCloud| {
        let mut total = 0.0;
        for p in &from.points {
            total += brute_nearest(p, &to.points, usize::MAX).1;
        }
        total / from.points.len() as f64
    };
    let m = mse(a, b).max(mse(b, a));
    if m == 0.0 {
        PSNR_SENTINEL
    } else {
        10.0 * (3.0 * peak * peak / m).log10()
    }
}

#[test]
fn d1_matches_brute_force_exactly() {
    for seed in 0..8u64 {
        let a = random_cloud(seed, 150, 60.0);
        let b = random_cloud(seed + 50, 170, 60.0);
        assert_eq!(d1_psnr(&a, &b, 1023.0).unwrap(), brute_d1(&a, &b, 1023.0));
    }
}

#[test]
fn d1_worked_example() {
    // Single points one unit apart at 10-bit peak: 10*log10(3*1023^2).
    let a = PointCloud { points: vec![[0.0, 0.0, 0.0]] };
    let b = PointCloud { points: vec![[1.0, 0.0, 0.0]] };
    let got = d1_psnr(&a, &b, 1023.0).unwrap();
    let expect = 10.0 * (3.0f64 * 1023.0 * 1023.0).log10();
    assert_eq!(got, expect);
    assert!((got - 64.97).abs() < 0.01, "got {got}");
}

#[test]
fn identical_clouds_hit_sentinel() {
    let a = random_cloud(3, 100, 10.0);
    assert_eq!(d1_psnr(&a, &a, 1023.0).unwrap(), PSNR_SENTINEL);
    assert_eq!(d2_psnr(&a, &a, 1023.0).unwrap().psnr, PSNR_SENTINEL);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
}

#[test]
fn empty_cloud_is_an_error() {
    let a = random_cloud(4, 10, 5.0);
    let empty = PointCloud { points: vec![] };
    assert!(matches!(d1_psnr(&a, &empty, 1.0), Err(Error::UndefinedMetric(_))));
    assert!(matches!(chamfer(&empty, &a), Err(Error::UndefinedMetric(_))));
}

#[test]
fn d2_requires_enough_points() {
    let a = random_cloud(5, NORMAL_K, 5.0);
    let b = random_cloud(6, 100, 5.0);
    assert!(matches!(d2_psnr(&a, &b, 1.0), Err(Error::InsufficientData(_))));
}

#[test]
fn d2_never_below_d1() {
    for seed in 0..6u64 {
        let a = random_cloud(seed + 20, 120, 30.0);
        let b = random_cloud(seed + 70, 140, 30.0);
        let d1 = d1_psnr(&a, &b, 1023.0).unwrap();
        let d2 = d2_psnr(&a, &b, 1023.0).unwrap().psnr;
        assert!(d2 >= d1, "seed {seed}: d2 {d2} < d1 {d1}");
    }
}

#[test]
fn d2_planar_offset_projects_fully() {
    // Two parallel z-planes: every normal is +-z, so the projected error
    // equals the full displacement and D2 == D1.
    let mut rng = seeded_rng(9, "planes");
    let grid = |z: f64, jx: &mut dyn FnMut() -> f64| PointCloud {
        points: (0..10)
            .flat_map(|x| (0..10).map(move |y| (x, y)))
            .map(|(x, y)| [x as f64 + jx(), y as f64 + jx(), z])
            .collect(),
    };
    let mut j = || rng.gen_range(-0.05..0.05);
    let a = grid(0.0, &mut j);
    let b = grid(0.5, &mut j);
    let r = d2_psnr(&a, &b, 1023.0).unwrap();
    assert_eq!(r.fallback_points, 0);
    let d1 = d1_psnr(&a, &b, 1023.0).unwrap();
    // Displacements are nearly parallel to the normals, so D2 is close to
    // D1 rather than far above it.
    assert!(r.psnr >= d1 && r.psnr < d1 + 1.0, "d1 {d1} d2 {}", r.psnr);
}

#[test]
fn d2_collinear_reference_falls_back() {
    // Reference cloud on a single line: rank-1 neighborhoods everywhere.
    let line = PointCloud {
        points: (0..40).map(|i| [i as f64, 0.0, 0.0]).collect(),
    };
    let probe = PointCloud {
        points: (0..40).map(|i| [i as f64, 1.0, 0.0]).collect(),
    };
    let r = d2_psnr(&probe, &line, 1023.0).unwrap();
    assert!(r.fallback_points > 0);
    assert_eq!(r.psnr, d1_psnr(&probe, &line, 1023.0).unwrap());
}

#[test]
fn chamfer_matches_brute_force_and_is_symmetric() {
    for seed in 0..5u64 {
        let a = random_cloud(seed + 30, 90, 25.0);
        let b = random_cloud(seed + 80, 110, 25.0);
        let mean = |from: &PointCloud, to: &PointCloud| {
            from.points
                .iter()
                .map(|p| brute_nearest(p, &to.points, usize::MAX).1.sqrt())
                .sum::<f64>()
                / from.points.len() as f64
        };
        let expect = 0.5 * (mean(&a, &b) + mean(&b, &a));
        assert_eq!(chamfer(&a, &b).unwrap(), expect);
        assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
    }
}

// ---------------------------------------------------------------------------
// Bjøntegaard deltas

fn cubic_points(c: &[f64; 4], xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x)
        .collect()
}

#[test]
fn bd_identical_curves_are_zero() {
    let curve = vec![(0.5, 60.0), (1.0, 64.0), (2.0, 67.0), (4.0, 69.0)];
    assert!(bd_rate(&curve, &curve).unwrap().abs() < 1e-9);
    assert!(bd_psnr(&curve, &curve).unwrap().abs() < 1e-9);
}

#[test]
fn bd_rate_doubling_is_plus_hundred_percent() {
    let reference = vec![(0.5, 60.0), (1.0, 64.0), (2.0, 67.0), (4.0, 69.0), (8.0, 70.0)];
    let test: Vec<(f64, f64)> = reference.iter().map(|&(r, p)| (2.0 * r, p)).collect();
    let bd = bd_rate(&reference, &test).unwrap();
    assert!((bd - 100.0).abs() < 1e-6, "got {bd}");
    let back = bd_rate(&test, &reference).unwrap();
    assert!((back - (-50.0)).abs() < 1e-6, "got {back}");
}

#[test]
fn bd_psnr_uniform_shift_is_exact() {
    let reference = vec![(0.5, 60.0), (1.0, 64.0), (2.0, 67.0), (4.0, 69.0)];
    let test: Vec<(f64, f64)> = reference.iter().map(|&(r, p)| (r, p + 1.0)).collect();
    let bd = bd_psnr(&reference, &test).unwrap();
    assert!((bd - 1.0).abs() < 1e-9, "got {bd}");
}

#[test]
fn bd_log_delta_is_antisymmetric() {
    let a = vec![(0.4, 58.0), (0.9, 62.5), (2.1, 66.0), (4.5, 68.5)];
    let b = vec![(0.5, 59.0), (1.1, 63.0), (2.0, 66.5), (4.0, 69.5)];
    let fwd = bd_rate_log_delta(&a, &b).unwrap();
    let bwd = bd_rate_log_delta(&b, &a).unwrap();
    assert!((fwd + bwd).abs() < 1e-12);
}

#[test]
fn bd_matches_fine_grid_integration_oracle() {
    // Sample both curves exactly from known cubics so the least-squares fit
    // reproduces the generators, then integrate the generators numerically.
    let cr = [55.0, 9.0, -0.8, 0.05]; // psnr as cubic in log10(rate)
    let ct = [56.2, 8.5, -0.7, 0.04];
    let r_log: Vec<f64> = vec![-0.3, 0.0, 0.3, 0.6, 0.9];
    let t_log: Vec<f64> = vec![-0.4, -0.1, 0.25, 0.55, 0.85];
    let reference: Vec<(f64, f64)> = r_log
        .iter()
        .zip(cubic_points(&cr, &r_log))
        .map(|(&x, p)| (10f64.powf(x), p))
        .collect();
    let test: Vec<(f64, f64)> = t_log
        .iter()
        .zip(cubic_points(&ct, &t_log))
        .map(|(&x, p)| (10f64.powf(x), p))
        .collect();

    let bd = bd_psnr(&reference, &test).unwrap();
    let lo = (-0.3f64).max(-0.4);
    let hi = 0.9f64.min(0.85);
    let steps = 200_000;
    let mut acc = 0.0;
    for i in 0..steps {
        let x0 = lo + (hi - lo) * i as f64 / steps as f64;
        let x1 = lo + (hi - lo) * (i + 1) as f64 / steps as f64;
        let f = |x: f64, c: &[f64; 4]| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
        acc += 0.5 * ((f(x0, &ct) - f(x0, &cr)) + (f(x1, &ct) - f(x1, &cr))) * (x1 - x0);
    }
    let oracle = acc / (hi - lo);
    assert!((bd - oracle).abs() < 1e-6, "bd {bd} oracle {oracle}");
}

#[test]
fn bd_rejects_short_and_disjoint_curves() {
    let short = vec![(0.5, 60.0), (1.0, 64.0), (2.0, 67.0)];
    let full = vec![(0.5, 60.0), (1.0, 64.0), (2.0, 67.0), (4.0, 69.0)];
    assert!(matches!(bd_rate(&short, &full), Err(Error::InsufficientData(_))));
    let high: Vec<(f64, f64)> = full.iter().map(|&(r, p)| (r, p + 50.0)).collect();
    assert!(matches!(bd_rate(&full, &high), Err(Error::UndefinedMetric(_))));
}

// ---------------------------------------------------------------------------
// Sparsity profile

#[test]
fn hrcs_profile_counts_nodes_and_neighbors() {
    let coords = vec![[0u32, 0, 0], [1, 0, 0], [3, 3, 3]];
    let levels = build_levels(&coords, 2, 1).unwrap();
    let profile = hrcs_profile(&levels);
    assert_eq!(profile.rows.len(), 2);

    let r1 = &profile.rows[0];
    assert_eq!((r1.level, r1.nodes), (1, 2)); // parents (0,0,0) and (1,1,1)
    assert!((r1.mean_neighbors - 1.0).abs() < 1e-12);

    let r2 = &profile.rows[1];
    assert_eq!((r2.level, r2.nodes), (2, 3));
    assert!((r2.mean_neighbors - 2.0 / 3.0).abs() < 1e-12);
}

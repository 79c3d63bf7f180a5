//! Seeded synthetic scene generators for tests, training smoke runs, and
//! the evaluation suite: planes, spheres, and LiDAR-like concentric ring
//! scans. All generators are deterministic in (seed, shape parameters).

use crate::octree::{sort_dedup_morton, Coord};
use crate::pcio::PointCloud;
use crate::util::seeded_rng;
use rand::Rng;

/// Points near the plane z = 0.2x + 0.1y + extent/3 inside [0, extent)^2,
/// with small vertical jitter.
pub fn plane(seed: u64, n: usize, extent: f64) -> PointCloud {
    let mut rng = seeded_rng(seed, "synth.plane");
    let points = (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..extent);
            let y = rng.gen_range(0.0..extent);
            let z = 0.2 * x + 0.1 * y + extent / 3.0 + rng.gen_range(-0.01..0.01) * extent;
            [x, y, z]
        })
        .collect();
    PointCloud { points }
}

/// Points on a sphere shell of the given radius with radial jitter.
pub fn sphere(seed: u64, n: usize, center: [f64; 3], radius: f64) -> PointCloud {
    let mut rng = seeded_rng(seed, "synth.sphere");
    let points = (0..n)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let u: f64 = rng.gen_range(-1.0..1.0);
            let s = (1.0 - u * u).sqrt();
            let r = radius * (1.0 + rng.gen_range(-0.005..0.005));
            [
                center[0] + r * s * theta.cos(),
                center[1] + r * s * theta.sin(),
                center[2] + r * u,
            ]
        })
        .collect();
    PointCloud { points }
}

/// A spinning-scanner-like sweep: `rings` elevation channels, each sampled
/// at `per_ring` azimuths, hitting a ground plane or a surrounding wall
/// with range noise. Produces the concentric-circle density profile of a
/// vehicle-mounted scanner.
pub fn ring_scan(seed: u64, rings: usize, per_ring: usize, max_range: f64) -> PointCloud {
    let mut rng = seeded_rng(seed, "synth.rings");
    let sensor_h = 2.0;
    let mut points = Vec::with_capacity(rings * per_ring);
    for ring in 0..rings {
        // Elevation from steep downward to slightly above horizontal.
        let frac = ring as f64 / rings.max(2) as f64;
        let elev = (-25.0 + 27.0 * frac).to_radians();
        for i in 0..per_ring {
            let az = std::f64::consts::TAU * (i as f64 + rng.gen_range(-0.2..0.2))
                / per_ring as f64;
            let range = if elev < 0.0 {
                // Ground return.
                (sensor_h / (-elev).sin()).min(max_range)
            } else {
                // Wall return at a noisy distance.
                max_range * rng.gen_range(0.55..0.95)
            };
            let range = range * (1.0 + rng.gen_range(-0.002..0.002));
            let (ce, se) = (elev.cos(), elev.sin());
            points.push([
                range * ce * az.cos(),
                range * ce * az.sin(),
                sensor_h + range * se,
            ]);
        }
    }
    PointCloud { points }
}

/// Uniform noise in [0, extent)^3; worst case for any context model.
pub fn blob(seed: u64, n: usize, extent: f64) -> PointCloud {
    let mut rng = seeded_rng(seed, "synth.blob");
    let points = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..extent),
                rng.gen_range(0.0..extent),
                rng.gen_range(0.0..extent),
            ]
        })
        .collect();
    PointCloud { points }
}

/// Maps a cloud onto the integer grid [0, 2^depth)^3 by min-max scaling and
/// flooring, then Morton-sorts and dedups. Convenience for tests that need
/// octree input without going through a quantization config.
pub fn to_grid(pc: &PointCloud, depth: u8) -> Vec<Coord> {
    assert!(!pc.points.is_empty());
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pc.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let n = (1u64 << depth) as f64;
    let coords: Vec<Coord> = pc
        .points
        .iter()
        .map(|p| {
            let mut c = [0u32; 3];
            for a in 0..3 {
                let span = (hi[a] - lo[a]).max(1e-12);
                c[a] = (((p[a] - lo[a]) / span) * (n - 1.0)).floor() as u32;
            }
            c
        })
        .collect();
    sort_dedup_morton(&coords, depth).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::is_morton_sorted;

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(plane(1, 50, 10.0).points, plane(1, 50, 10.0).points);
        assert_ne!(plane(1, 50, 10.0).points, plane(2, 50, 10.0).points);
        assert_eq!(
            ring_scan(3, 4, 32, 50.0).points,
            ring_scan(3, 4, 32, 50.0).points
        );
    }

    #[test]
    fn sphere_points_sit_on_shell() {
        let pc = sphere(4, 200, [1.0, 2.0, 3.0], 5.0);
        for p in &pc.points {
            let r = ((p[0] - 1.0).powi(2) + (p[1] - 2.0).powi(2) + (p[2] - 3.0).powi(2)).sqrt();
            assert!((r - 5.0).abs() < 0.05, "radius {r}");
        }
    }

    #[test]
    fn to_grid_is_sorted_in_range() {
        let coords = to_grid(&ring_scan(5, 8, 128, 60.0), 8);
        assert!(is_morton_sorted(&coords));
        assert!(coords.iter().all(|c| c.iter().all(|&v| v < 256)));
        assert!(coords.len() > 100);
    }
}

//! Evaluation mathematics: point-to-point (D1) and point-to-plane (D2)
//! PSNR, Chamfer distance, Bjøntegaard deltas, and the per-level contextual
//! sparsity profile.
//!
//! Nearest-neighbor queries run on a kd-tree whose distance arithmetic is
//! the same expression the O(N^2) oracle uses, so metric values are
//! bit-identical to brute force.

use crate::error::{Error, Result};
use crate::octree::{neighbor_counts, OctreeLevels};
use crate::pcio::PointCloud;
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

/// Reported instead of infinity when the error is exactly zero.
pub const PSNR_SENTINEL: f64 = 999.0;

/// One point on a rate-distortion curve.
#[derive(Clone, Copy, Debug)]
pub struct RDPoint {
    pub bpp: f64,
    pub d1_psnr: f64,
    pub d2_psnr: f64,
    pub chamfer: f64,
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

// ---------------------------------------------------------------------------
// kd-tree

pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    /// Point indices arranged so each subtree occupies a contiguous slice;
    /// the median element is the split node.
    order: Vec<u32>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree { points, order: Vec::new() };
        Self::sort_range(points, &mut order, 0);
        tree.order = order;
        tree
    }

    fn sort_range(points: &[[f64; 3]], idx: &mut [u32], axis: usize) {
        if idx.len() <= 1 {
            return;
        }
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let (_, hi) = rest.split_at_mut(1);
        Self::sort_range(points, lo, (axis + 1) % 3);
        Self::sort_range(points, hi, (axis + 1) % 3);
    }

    /// Index and squared distance of the nearest point, excluding index
    /// `skip` (pass usize::MAX to disable).
    pub fn nearest(&self, q: &[f64; 3], skip: usize) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, skip, 0..self.order.len(), 0, &mut best);
        best
    }

    fn search(
        &self,
        q: &[f64; 3],
        skip: usize,
        range: std::ops::Range<usize>,
        axis: usize,
        best: &mut (usize, f64),
    ) {
        if range.is_empty() {
            return;
        }
        let mid = range.start + range.len() / 2;
        let node = self.order[mid] as usize;
        if node != skip {
            let d = sq_dist(q, &self.points[node]);
            if d < best.1 {
                *best = (node, d);
            }
        }
        let delta = q[axis] - self.points[node][axis];
        let (near, far) = if delta < 0.0 {
            (range.start..mid, mid + 1..range.end)
        } else {
            (mid + 1..range.end, range.start..mid)
        };
        self.search(q, skip, near, (axis + 1) % 3, best);
        if delta * delta < best.1 {
            self.search(q, skip, far, (axis + 1) % 3, best);
        }
    }

    /// Indices of the k nearest points (excluding `skip`), closest first;
    /// squared-distance ties broken by lower index.
    pub fn k_nearest(&self, q: &[f64; 3], k: usize, skip: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.k_search(q, skip, k, 0..self.order.len(), 0, &mut heap);
        heap.sort_by(|a, b| a.partial_cmp(b).unwrap());
        heap.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn k_search(
        &self,
        q: &[f64; 3],
        skip: usize,
        k: usize,
        range: std::ops::Range<usize>,
        axis: usize,
        heap: &mut Vec<(f64, usize)>,
    ) {
        if range.is_empty() {
            return;
        }
        let mid = range.start + range.len() / 2;
        let node = self.order[mid] as usize;
        if node != skip {
            let d = sq_dist(q, &self.points[node]);
            let entry = (d, node);
            if heap.len() < k {
                heap.push(entry);
                heap.sort_by(|a, b| a.partial_cmp(b).unwrap());
            } else if entry < *heap.last().unwrap() {
                heap.pop();
                let pos = heap.partition_point(|e| *e < entry);
                heap.insert(pos, entry);
            }
        }
        let delta = q[axis] - self.points[node][axis];
        let (near, far) = if delta < 0.0 {
            (range.start..mid, mid + 1..range.end)
        } else {
            (mid + 1..range.end, range.start..mid)
        };
        self.k_search(q, skip, k, near, (axis + 1) % 3, heap);
        if heap.len() < k || delta * delta < heap.last().unwrap().0 {
            self.k_search(q, skip, k, far, (axis + 1) % 3, heap);
        }
    }
}

// ---------------------------------------------------------------------------
// D1 / D2 / Chamfer

fn require_nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("empty point cloud".into()));
    }
    Ok(())
}

/// Mean over `from` of the squared distance to the nearest point of `to`.
fn one_way_sq_mse(from: &PointCloud, to_tree: &KdTree, n_to_pts: usize) -> f64 {
    debug_assert!(n_to_pts > 0);
    let mut total = 0.0;
    for p in &from.points {
        total += to_tree.nearest(p, usize::MAX).1;
    }
    total / from.points.len() as f64
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_SENTINEL
    } else {
        10.0 * (3.0 * peak * peak / mse).log10()
    }
}

/// Point-to-point PSNR with the symmetric (max-MSE) convention.
pub fn d1_psnr(a: &PointCloud, b: &PointCloud, peak: f64) -> Result<f64> {
    require_nonempty(a, b)?;
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    let mse_ab = one_way_sq_mse(a, &tb, b.points.len());
    let mse_ba = one_way_sq_mse(b, &ta, a.points.len());
    Ok(psnr_from_mse(mse_ab.max(mse_ba), peak))
}

/// Surface normals per point via PCA over the k nearest same-cloud
/// neighbors. Returns the normal and whether the neighborhood was
/// degenerate (rank < 2: no stable plane, caller falls back to D1).
fn estimate_normals(pc: &PointCloud, k: usize) -> Vec<(Vector3<f64>, bool)> {
    let tree = KdTree::build(&pc.points);
    pc.points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nbrs = tree.k_nearest(p, k, i);
            let mut pts: Vec<Vector3<f64>> = nbrs
                .iter()
                .map(|&(j, _)| Vector3::from(pc.points[j]))
                .collect();
            pts.push(Vector3::from(*p));
            let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            let mut cov = Matrix3::zeros();
            for q in &pts {
                let d = q - centroid;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            // Sort eigenpairs ascending by eigenvalue.
            let mut idx = [0usize, 1, 2];
            idx.sort_by(|&x, &y| eig.eigenvalues[x].partial_cmp(&eig.eigenvalues[y]).unwrap());
            let l_min = eig.eigenvalues[idx[0]].max(0.0);
            let l_mid = eig.eigenvalues[idx[1]].max(0.0);
            let l_max = eig.eigenvalues[idx[2]].max(0.0);
            // Rank < 2: points effectively collinear (or coincident).
            let degenerate = l_mid <= 1e-9 * l_max.max(1e-300) || l_max == 0.0;
            let mut n: Vector3<f64> = eig.eigenvectors.column(idx[0]).into();
            let _ = l_min;
            // Sign disambiguation: face the origin; on an exact tie make the
            // first nonzero component positive.
            let toward = -Vector3::from(*p);
            let d = n.dot(&toward);
            if d < 0.0 {
                n = -n;
            } else if d == 0.0 {
                for c in 0..3 {
                    if n[c] != 0.0 {
                        if n[c] < 0.0 {
                            n = -n;
                        }
                        break;
                    }
                }
            }
            (n, degenerate)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct D2Report {
    pub psnr: f64,
    /// Points whose normal estimate was degenerate and which therefore used
    /// the point-to-point error.
    pub fallback_points: usize,
}

pub const NORMAL_K: usize = 12;

/// Point-to-plane PSNR: per-point displacement projected onto the reference
/// normal, symmetric max, same PSNR formula as D1.
pub fn d2_psnr(a: &PointCloud, b: &PointCloud, peak: f64) -> Result<D2Report> {
    require_nonempty(a, b)?;
    if a.points.len() <= NORMAL_K || b.points.len() <= NORMAL_K {
        return Err(Error::InsufficientData(format!(
            "point-to-plane needs more than {NORMAL_K} points per cloud"
        )));
    }
    let na = estimate_normals(a, NORMAL_K);
    let nb = estimate_normals(b, NORMAL_K);
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    let mut fallbacks = 0usize;
    let mut one_way = |from: &PointCloud, to: &PointCloud, to_tree: &KdTree, normals: &[(Vector3<f64>, bool)]| {
        let mut total = 0.0;
        for p in &from.points {
            let (j, sq) = to_tree.nearest(p, usize::MAX);
            let (n, degenerate) = &normals[j];
            if *degenerate {
                fallbacks += 1;
                total += sq;
            } else {
                let d = Vector3::from(*p) - Vector3::from(to.points[j]);
                let proj = d.dot(n);
                total += proj * proj;
            }
        }
        total / from.points.len() as f64
    };
    let mse_ab = one_way(a, b, &tb, &nb);
    let mse_ba = one_way(b, a, &ta, &na);
    Ok(D2Report {
        psnr: psnr_from_mse(mse_ab.max(mse_ba), peak),
        fallback_points: fallbacks,
    })
}

/// Symmetric Chamfer distance with unsquared Euclidean distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    require_nonempty(a, b)?;
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    let mean = |from: &PointCloud, tree: &KdTree| {
        let mut total = 0.0;
        for p in &from.points {
            total += tree.nearest(p, usize::MAX).1.sqrt();
        }
        total / from.points.len() as f64
    };
    Ok(0.5 * (mean(a, &tb) + mean(b, &ta)))
}

// ---------------------------------------------------------------------------
// Bjøntegaard deltas

fn cubic_fit(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    let n = x.len();
    let mut m = DMatrix::zeros(n, 4);
    for i in 0..n {
        for j in 0..4 {
            m[(i, j)] = x[i].powi(j as i32);
        }
    }
    let rhs = DVector::from_column_slice(y);
    let svd = m.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Numeric(format!("curve fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| {
        c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0
    };
    eval(hi) - eval(lo)
}

fn check_curve(curve: &[(f64, f64)]) -> Result<()> {
    if curve.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "BD metrics need at least 4 rate-distortion points, got {}",
            curve.len()
        )));
    }
    if curve.iter().any(|&(r, p)| !(r > 0.0) || !p.is_finite()) {
        return Err(Error::Numeric("invalid rate-distortion point".into()));
    }
    Ok(())
}

fn overlap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bmin = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let bmax = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = amin.max(bmin);
    let hi = amax.min(bmax);
    if !(hi > lo) {
        return Err(Error::UndefinedMetric(
            "rate-distortion curves do not overlap".into(),
        ));
    }
    Ok((lo, hi))
}

/// Mean difference of the fitted log10-rate curves over the shared PSNR
/// interval, before exponentiation. Exactly antisymmetric.
pub fn bd_rate_log_delta(reference: &[(f64, f64)], test: &[(f64, f64)]) -> Result<f64> {
    check_curve(reference)?;
    check_curve(test)?;
    let rp: Vec<f64> = reference.iter().map(|&(_, p)| p).collect();
    let rr: Vec<f64> = reference.iter().map(|&(r, _)| r.log10()).collect();
    let tp: Vec<f64> = test.iter().map(|&(_, p)| p).collect();
    let tr: Vec<f64> = test.iter().map(|&(r, _)| r.log10()).collect();
    let cr = cubic_fit(&rp, &rr)?;
    let ct = cubic_fit(&tp, &tr)?;
    let (lo, hi) = overlap(&rp, &tp)?;
    Ok((poly_integral(&ct, lo, hi) - poly_integral(&cr, lo, hi)) / (hi - lo))
}

/// Average rate difference in percent over the shared PSNR range; negative
/// means `test` outperforms `reference`.
pub fn bd_rate(reference: &[(f64, f64)], test: &[(f64, f64)]) -> Result<f64> {
    Ok((10f64.powf(bd_rate_log_delta(reference, test)?) - 1.0) * 100.0)
}

/// Average PSNR difference in dB over the shared log10-rate range; positive
/// means `test` outperforms `reference`.
pub fn bd_psnr(reference: &[(f64, f64)], test: &[(f64, f64)]) -> Result<f64> {
    check_curve(reference)?;
    check_curve(test)?;
    let rr: Vec<f64> = reference.iter().map(|&(r, _)| r.log10()).collect();
    let rp: Vec<f64> = reference.iter().map(|&(_, p)| p).collect();
    let tr: Vec<f64> = test.iter().map(|&(r, _)| r.log10()).collect();
    let tp: Vec<f64> = test.iter().map(|&(_, p)| p).collect();
    let cr = cubic_fit(&rr, &rp)?;
    let ct = cubic_fit(&tr, &tp)?;
    let (lo, hi) = overlap(&rr, &tr)?;
    Ok((poly_integral(&ct, lo, hi) - poly_integral(&cr, lo, hi)) / (hi - lo))
}

// ---------------------------------------------------------------------------
// Contextual sparsity profile

#[derive(Clone, Debug)]
pub struct HrcsRow {
    pub level: u8,
    pub nodes: usize,
    pub mean_neighbors: f64,
}

/// Per-level node counts and mean 26-neighborhood occupancy.
#[derive(Clone, Debug)]
pub struct HRCSProfile {
    pub rows: Vec<HrcsRow>,
}

pub fn hrcs_profile(levels: &OctreeLevels) -> HRCSProfile {
    let rows = (levels.min_level..=levels.max_level)
        .map(|l| {
            let coords = levels.coords_at(l);
            let counts = neighbor_counts(coords);
            let mean = if counts.is_empty() {
                0.0
            } else {
                counts.iter().map(|&c| c as f64).sum::<f64>() / counts.len() as f64
            };
            HrcsRow {
                level: l,
                nodes: coords.len(),
                mean_neighbors: mean,
            }
        })
        .collect();
    HRCSProfile { rows }
}

#[cfg(test)]
mod tests;

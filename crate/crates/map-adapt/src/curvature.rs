//! Geometric complexity from local surface curvature.
//!
//! For every point of a stride-subsampled depth cloud, the structure tensor
//! of its spherical neighborhood is decomposed into eigenvalues, and the
//! change of curvature `lambda_3 / (lambda_1 + lambda_2 + lambda_3)` is used
//! as a scale-free complexity score: 0 on planes, up to 1/3 for isotropic
//! scatter. Scores are fused per coarse voxel into a weighted running mean,
//! so a cell's `g` reflects everything observed there, not just the last
//! frame.

use nalgebra::{Matrix3, Point3};
use rayon::prelude::*;

use crate::core_map::{Voxel, MAX_WEIGHT};
use crate::error::Result;
use crate::integrator::{Frame, LabeledPoint};
use crate::spatial::HashGrid;

/// Parameters of the per-frame complexity estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityConfig {
    /// Pixel stride of the subsample feeding the estimate.
    pub stride: usize,
    /// Neighborhood radius in meters.
    pub radius: f64,
    /// Minimum neighbor count (center excluded) for a usable tensor.
    pub min_neighbors: usize,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            stride: 2,
            radius: 0.1,
            min_neighbors: 4,
        }
    }
}

impl ComplexityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(crate::Error::validation("complexity stride must be >= 1"));
        }
        if !(self.radius > 0.0) {
            return Err(crate::Error::validation(
                "complexity radius must be positive",
            ));
        }
        Ok(())
    }
}

/// Pixel indices (row-major) of valid-depth pixels on the stride grid.
pub fn subsample(frame: &Frame, config: &ComplexityConfig) -> Vec<usize> {
    let mut out = Vec::new();
    let (w, h) = (frame.width(), frame.height());
    for v in (0..h).step_by(config.stride) {
        for u in (0..w).step_by(config.stride) {
            let d = frame.depth()[v * w + u];
            if d.is_finite() && d > 0.0 {
                out.push(v * w + u);
            }
        }
    }
    out
}

/// Eigenvalues of a symmetric 3x3 matrix, descending, with tiny negatives
/// (>= -1e-12) clamped to zero.
///
/// Closed-form trigonometric solution (Cardano on the shifted matrix).
/// Eigenvalues of a symmetric matrix are perfectly conditioned, so results
/// are accurate to a few ulp for simple spectra; repeated eigenvalues carry
/// the usual sqrt(machine epsilon) wobble of cubic formulas.
pub fn eigenvalues_sym3(m: &Matrix3<f64>) -> [f64; 3] {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    assert!(
        (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-9 * scale
            && (m[(0, 2)] - m[(2, 0)]).abs() <= 1e-9 * scale
            && (m[(1, 2)] - m[(2, 1)]).abs() <= 1e-9 * scale,
        "matrix is not symmetric: {m}"
    );
    let clamp_tiny = |x: f64| if x < 0.0 && x >= -1e-12 { 0.0 } else { x };
    let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    if p1 == 0.0 {
        let mut d = [m[(0, 0)], m[(1, 1)], m[(2, 2)]].map(clamp_tiny);
        d.sort_unstable_by(|a, b| b.total_cmp(a));
        return d;
    }
    let q = m.trace() / 3.0;
    let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2)
        + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (m - Matrix3::from_diagonal_element(q)) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let mid = 3.0 * q - hi - lo;
    [hi, mid, lo].map(clamp_tiny)
}

/// Structure tensor (covariance) of `members` within `points`, mean-centered
/// and normalized by the member count. The center point is expected to be
/// one of the members.
pub fn structure_tensor(points: &[Point3<f64>], members: &[usize]) -> Matrix3<f64> {
    let n = members.len() as f64;
    let mut mean = Point3::origin();
    for &i in members {
        mean += points[i].coords;
    }
    let mean = mean / n;
    let mut cov = Matrix3::zeros();
    for &i in members {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    cov / n
}

/// Change of curvature of a descending eigenvalue triple: the smallest over
/// the sum, in `[0, 1/3]`; zero when the sum vanishes.
pub fn change_of_curvature(lambda: [f64; 3]) -> f64 {
    let sum: f64 = lambda.iter().sum();
    if sum <= 0.0 {
        return 0.0;
    }
    // The tensor is positive semidefinite; rounding can still push the
    // smallest eigenvalue a few ulp below zero.
    (lambda[2] / sum).max(0.0)
}

/// Per-point change of curvature over a cloud. `None` where the
/// neighborhood (center excluded) has fewer than `min_neighbors` points.
///
/// Neighborhoods come from a hash grid with cells of `radius`, so the cost
/// is linear in the cloud size for bounded density.
pub fn estimate_cloud_complexity(
    points: &[Point3<f64>],
    radius: f64,
    min_neighbors: usize,
) -> Vec<Option<f64>> {
    let grid = HashGrid::build(points, radius);
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let members = grid.within_radius(points, &points[i], radius);
            if members.len() < min_neighbors + 1 {
                return None;
            }
            let cov = structure_tensor(points, &members);
            Some(change_of_curvature(eigenvalues_sym3(&cov)))
        })
        .collect()
}

/// Complexity for each projected point of a frame, aligned with `points`.
///
/// Only points on the stride grid enter the estimate (and can carry a
/// score); everything else gets `None`, and its rays skip the complexity
/// update. Neighborhoods are found within the subsampled cloud itself.
pub fn estimate_frame_complexity(
    points: &[LabeledPoint],
    config: &ComplexityConfig,
) -> Vec<Option<f64>> {
    let mut member_of = Vec::new();
    let mut cloud = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let (u, v) = p.pixel;
        if u as usize % config.stride == 0 && v as usize % config.stride == 0 {
            member_of.push(i);
            cloud.push(p.position);
        }
    }
    let cc = estimate_cloud_complexity(&cloud, config.radius, config.min_neighbors);
    let mut out = vec![None; points.len()];
    for (k, &i) in member_of.iter().enumerate() {
        out[i] = cc[k];
    }
    out
}

/// Fuse one complexity observation into a voxel's running estimate with
/// reliability weight `w`:
///
/// `g <- (w_g * g + w * CC) / (w_g + w)`, with `w_g` saturating at the
/// shared weight cap. The division uses the pre-cap denominator, so before
/// saturation `g` is the exact weighted mean and afterwards an
/// exponentially forgetting one; either way it stays inside the hull of the
/// observed values.
pub fn integrate_complexity(voxel: &mut Voxel, cc: f64, w: f64) {
    debug_assert!(w > 0.0 && cc >= 0.0);
    let denom = voxel.g_weight + w;
    voxel.g = (voxel.g_weight * voxel.g + w * cc) / denom;
    voxel.g_weight = denom.min(MAX_WEIGHT);
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Oracle eigensolver: bisection on the characteristic polynomial,
    /// bracketed by the critical points of the cubic and Gershgorin bounds.
    /// Shares no arithmetic with the closed-form path.
    fn eigenvalues_by_root_finding(m: &Matrix3<f64>) -> [f64; 3] {
        let tr = m.trace();
        let minors = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
            + m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]
            + m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)];
        let det = m.determinant();
        // p(x) = x^3 - tr x^2 + minors x - det, roots all real.
        let p = |x: f64| ((x - tr) * x + minors) * x - det;

        // Gershgorin interval containing every eigenvalue.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..3 {
            let r: f64 = (0..3)
                .filter(|&j| j != i)
                .map(|j| m[(i, j)].abs())
                .sum();
            lo = lo.min(m[(i, i)] - r);
            hi = hi.max(m[(i, i)] + r);
        }
        let pad = 1e-9 * (hi - lo).abs().max(1.0);
        let (lo, hi) = (lo - pad, hi + pad);

        // Critical points of the cubic split it into monotone pieces.
        let disc = (tr * tr - 3.0 * minors).max(0.0).sqrt();
        let t1 = (tr - disc) / 3.0;
        let t2 = (tr + disc) / 3.0;

        let bisect = |mut a: f64, mut b: f64| {
            let (fa, fb) = (p(a), p(b));
            if fa == 0.0 {
                return a;
            }
            if fb == 0.0 || fa.signum() == fb.signum() {
                // No sign change: a (near-)multiple root sits at the
                // endpoint with the smaller residual.
                return if fa.abs() < fb.abs() { a } else { b };
            }
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if mid == a || mid == b {
                    break;
                }
                if p(mid).signum() == fa.signum() {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            0.5 * (a + b)
        };

        let lmin = bisect(lo, t1);
        let lmax = bisect(t2, hi);
        [lmax, tr - lmin - lmax, lmin]
    }

    fn random_sym(rng: &mut ChaCha8Rng, scale: f64) -> Matrix3<f64> {
        let a = Matrix3::from_fn(|_, _| rng.gen_range(-scale..scale));
        (a + a.transpose()) / 2.0
    }

    #[test]
    fn eigensolver_matches_root_finder() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10_000 {
            let scale = match trial % 3 {
                0 => 1.0,
                1 => 1e-4,
                _ => 1e4,
            };
            let m = random_sym(&mut rng, scale);
            let fast = eigenvalues_sym3(&m);
            let slow = eigenvalues_by_root_finding(&m);
            let tol = 1e-9 * scale.max(1.0);
            for k in 0..3 {
                assert!(
                    (fast[k] - slow[k]).abs() <= tol,
                    "trial {trial}: {fast:?} vs {slow:?} for {m}"
                );
            }
            assert!(fast[0] >= fast[1] && fast[1] >= fast[2]);
        }
    }

    #[test]
    fn eigensolver_recovers_constructed_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        // Simple spectra resolve to 1e-9; repeated eigenvalues carry the
        // usual sqrt(machine epsilon) wobble of cubic-formula solvers, so
        // they get a wider (still tight) budget.
        let spectra: [([f64; 3], f64); 5] = [
            ([1.0, 0.0, 0.0], 5e-8),
            ([2.0, 2.0, 2.0], 5e-8),
            ([5.0, 1.0, 1.0], 5e-8),
            ([4.0, 0.5, -3.0], 1e-9),
            ([1.0, 0.3, 0.0], 1e-9),
        ];
        for (lambda, tol) in spectra {
            for _ in 0..50 {
                let q = UnitQuaternion::from_euler_angles(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                );
                let rot = q.to_rotation_matrix();
                let m = rot * Matrix3::from_diagonal(&Vector3::from(lambda)) * rot.transpose();
                // Symmetrize away the rotation rounding before decomposing.
                let m = (m + m.transpose()) / 2.0;
                let got = eigenvalues_sym3(&m);
                for k in 0..3 {
                    assert!(
                        (got[k] - lambda[k]).abs() <= tol,
                        "{got:?} vs {lambda:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn eigensolver_preserves_trace_and_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..2000 {
            let m = random_sym(&mut rng, 2.0);
            let l = eigenvalues_sym3(&m);
            let tr = m.trace();
            let det = m.determinant();
            assert!((l.iter().sum::<f64>() - tr).abs() <= 1e-8 * tr.abs().max(1.0));
            assert!((l[0] * l[1] * l[2] - det).abs() <= 1e-8 * det.abs().max(1.0));
        }
    }

    #[test]
    fn diagonal_matrices_short_circuit() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0));
        assert_eq!(eigenvalues_sym3(&m), [3.0, 2.0, 1.0]);
        assert_eq!(eigenvalues_sym3(&Matrix3::identity()), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn change_of_curvature_conventions() {
        assert!((change_of_curvature([1.0, 1.0, 1.0]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(change_of_curvature([2.0, 1.0, 0.0]), 0.0);
        assert_eq!(change_of_curvature([0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn structure_tensor_on_constructed_neighborhoods() {
        // Collinear points: rank 1, two zero eigenvalues.
        let line: Vec<Point3<f64>> = (0..6)
            .map(|i| Point3::new(0.01 * i as f64, 0.0, 0.0))
            .collect();
        let members: Vec<usize> = (0..line.len()).collect();
        let l = eigenvalues_sym3(&structure_tensor(&line, &members));
        assert!(l[0] > 0.0 && l[1].abs() < 1e-15 && l[2].abs() < 1e-15);

        // Center plus 4 points at +-d on the x and y axes.
        let d = 0.03;
        let cross = vec![
            Point3::origin(),
            Point3::new(d, 0.0, 0.0),
            Point3::new(-d, 0.0, 0.0),
            Point3::new(0.0, d, 0.0),
            Point3::new(0.0, -d, 0.0),
        ];
        let members: Vec<usize> = (0..5).collect();
        let cov = structure_tensor(&cross, &members);
        let expect = 2.0 * d * d / 5.0;
        assert!((cov[(0, 0)] - expect).abs() < 1e-15);
        assert!((cov[(1, 1)] - expect).abs() < 1e-15);
        assert!(cov[(2, 2)].abs() < 1e-15);

        // Identical repeated points: zero tensor.
        let same = vec![Point3::new(0.1, 0.2, 0.3); 7];
        let members: Vec<usize> = (0..7).collect();
        assert!(structure_tensor(&same, &members).norm() < 1e-15);
    }

    fn plane_cloud(n_side: usize, spacing: f64) -> Vec<Point3<f64>> {
        // A tilted plane: z = 0.3 + 0.1 x - 0.05 y.
        let mut points = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                let x = i as f64 * spacing;
                let y = j as f64 * spacing;
                points.push(Point3::new(x, y, 0.3 + 0.1 * x - 0.05 * y));
            }
        }
        points
    }

    fn sphere_cloud(n: usize, radius: f64) -> Vec<Point3<f64>> {
        // Fibonacci sphere: near-uniform, deterministic.
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let t = golden * i as f64;
                Point3::new(radius * r * t.cos(), radius * y, radius * r * t.sin())
            })
            .collect()
    }

    #[test]
    fn planar_cloud_has_vanishing_complexity() {
        let points = plane_cloud(30, 0.02);
        let cfg = ComplexityConfig::default();
        let cc = estimate_cloud_complexity(&points, cfg.radius, cfg.min_neighbors);
        let mut estimated = 0;
        for v in cc {
            if let Some(v) = v {
                assert!(v < 1e-6, "plane complexity {v}");
                estimated += 1;
            }
        }
        assert!(estimated > 800);
    }

    #[test]
    fn sphere_complexity_matches_quadratic_oracle() {
        let points = sphere_cloud(2000, 0.5);
        let cfg = ComplexityConfig::default();
        let fast = estimate_cloud_complexity(&points, cfg.radius, cfg.min_neighbors);
        // Brute-force neighborhoods, same tensor math.
        for (i, center) in points.iter().enumerate() {
            let members: Vec<usize> = (0..points.len())
                .filter(|&j| (points[j] - center).norm() <= cfg.radius)
                .collect();
            let expect = if members.len() < cfg.min_neighbors + 1 {
                None
            } else {
                Some(change_of_curvature(eigenvalues_sym3(&structure_tensor(
                    &points, &members,
                ))))
            };
            match (fast[i], expect) {
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-6, "point {i}: {a} vs {b}");
                    assert!(a > 0.001, "sphere should bend: {a}");
                }
                (a, b) => assert_eq!(a.is_some(), b.is_some(), "point {i}"),
            }
        }
    }

    #[test]
    fn complexity_is_rotation_and_scale_invariant() {
        let points = sphere_cloud(600, 0.2);
        let cfg = ComplexityConfig::default();
        let base = estimate_cloud_complexity(&points, cfg.radius, cfg.min_neighbors);

        let q = UnitQuaternion::from_euler_angles(0.4, -1.1, 2.2);
        let rotated: Vec<Point3<f64>> = points.iter().map(|p| q * p).collect();
        let rot = estimate_cloud_complexity(&rotated, cfg.radius, cfg.min_neighbors);

        let s = 3.7;
        let scaled: Vec<Point3<f64>> = points.iter().map(|p| Point3::from(p.coords * s)).collect();
        let scl = estimate_cloud_complexity(&scaled, cfg.radius * s, cfg.min_neighbors);

        for i in 0..points.len() {
            let (Some(a), Some(b), Some(c)) = (base[i], rot[i], scl[i]) else {
                assert!(base[i].is_none() && rot[i].is_none() && scl[i].is_none());
                continue;
            };
            assert!((a - b).abs() < 1e-9, "rotation moved CC: {a} vs {b}");
            assert!((a - c).abs() < 1e-9, "scaling moved CC: {a} vs {c}");
        }
    }

    #[test]
    fn sparse_cloud_yields_no_estimate() {
        let points = vec![
            Point3::origin(),
            Point3::new(0.05, 0.0, 0.0),
            Point3::new(0.0, 0.05, 0.0),
        ];
        let cfg = ComplexityConfig::default();
        let cc = estimate_cloud_complexity(&points, cfg.radius, cfg.min_neighbors);
        assert!(cc.iter().all(Option::is_none));
    }

    #[test]
    fn fusion_is_weighted_mean_until_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut v = Voxel::default();
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..50 {
            let cc = rng.gen_range(0.0..0.33);
            let w = rng.gen_range(0.1..4.0);
            integrate_complexity(&mut v, cc, w);
            num += w * cc;
            den += w;
            assert!((v.g - num / den).abs() < 1e-9);
            assert_eq!(v.g_weight, den);
        }
        // Saturate the weight; g must stay inside the observed hull.
        for _ in 0..100 {
            integrate_complexity(&mut v, 0.2, 200.0);
        }
        assert_eq!(v.g_weight, MAX_WEIGHT);
        assert!(v.g > 0.0 && v.g < 0.33);
        integrate_complexity(&mut v, 0.0, 1.0);
        assert_eq!(v.g_weight, MAX_WEIGHT);
        assert!(v.g >= 0.0);
    }

    #[test]
    fn fusion_converges_monotonically_to_repeated_value() {
        let mut v = Voxel::default();
        integrate_complexity(&mut v, 0.31, 2.0);
        integrate_complexity(&mut v, 0.05, 1.0);
        let target = 0.12;
        let mut err = (v.g - target).abs();
        // The error contracts by w_g / (w_g + 1) per step, so it shrinks
        // like 1/n; 400 steps bring it from ~0.1 to under 1e-3.
        for _ in 0..400 {
            integrate_complexity(&mut v, target, 1.0);
            let e = (v.g - target).abs();
            assert!(e <= err, "not monotone: {e} > {err}");
            err = e;
        }
        assert!(err < 1e-3);
    }
}

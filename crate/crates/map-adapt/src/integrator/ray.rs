//! Ray traversal and the TSDF update rule.
//!
//! Both the adaptive integrator and the fixed-resolution reference pipeline
//! call these exact functions, so the two agree bit for bit wherever they
//! integrate the same rays at the same voxel size. Keep them free of any
//! map-structure knowledge.

use nalgebra::{Point3, Vector3};

/// Grid cell containing a point, for a uniform grid of edge `cell` anchored
/// at the origin.
#[inline]
pub fn grid_key(p: &Point3<f64>, cell: f64) -> [i64; 3] {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}

/// Center of a grid cell addressed by its index.
#[inline]
pub fn voxel_center(idx: &[i64; 3], cell: f64) -> Point3<f64> {
    Point3::new(
        (idx[0] as f64 + 0.5) * cell,
        (idx[1] as f64 + 0.5) * cell,
        (idx[2] as f64 + 0.5) * cell,
    )
}

/// Walk the segment `origin + t*dir, t in [t0, t1]` through a uniform grid
/// of edge `cell`, visiting every crossed voxel exactly once, in order.
///
/// Classic incremental traversal: track, per axis, the ray parameter of the
/// next boundary crossing and always advance the nearest one. `dir` need not
/// be normalized, but `t0 <= t1` is required for any visits to happen.
pub fn walk_ray_voxels(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    t0: f64,
    t1: f64,
    cell: f64,
    mut visit: impl FnMut([i64; 3]),
) {
    if !(t0 <= t1) {
        return;
    }
    let start = origin + dir * t0;
    let mut idx = grid_key(&start, cell);
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_next[a] = ((idx[a] + 1) as f64 * cell - origin[a]) / dir[a];
            t_delta[a] = cell / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_next[a] = (idx[a] as f64 * cell - origin[a]) / dir[a];
            t_delta[a] = cell / -dir[a];
        }
    }
    loop {
        visit(idx);
        let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        if t_next[a] > t1 {
            return;
        }
        idx[a] += step[a];
        t_next[a] += t_delta[a];
    }
}

/// Signed distance from a voxel center to the surface point, measured along
/// the ray (positive in front of the surface), clamped to `±truncation`.
#[inline]
pub fn point_to_ray_distance(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    t_surface: f64,
    center: &Point3<f64>,
    truncation: f64,
) -> f64 {
    (t_surface - (center - origin).dot(dir)).clamp(-truncation, truncation)
}

/// Weighted running-average TSDF update with weight saturation.
///
/// `tsdf <- (weight*tsdf + w*d) / (weight + w)`, same combination for each
/// color channel, then `weight <- min(weight + w, w_max)`. The division uses
/// the pre-cap denominator so the result is a convex combination of
/// observations.
#[inline]
pub fn apply_tsdf_update(
    tsdf: &mut f64,
    weight: &mut f64,
    color: &mut [f32; 3],
    d: f64,
    w: f64,
    rgb: [f32; 3],
    w_max: f64,
) {
    let denom = *weight + w;
    *tsdf = (*weight * *tsdf + w * d) / denom;
    let (wf, df) = (*weight as f32, denom as f32);
    for c in 0..3 {
        color[c] = (wf * color[c] + w as f32 * rgb[c]) / df;
    }
    *weight = denom.min(w_max);
}

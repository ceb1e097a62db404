//! Deterministic synthetic scenes: analytic primitives with per-primitive
//! labels, rendered into depth/color/semantic frames, plus exact ground
//! truth surface samples for the evaluation metrics.
//!
//! Everything here is seeded and sequential, so a fixed seed reproduces a
//! dataset byte for byte.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Isometry3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, UnitSphere};

use crate::dataset_io::{self, CameraInfo, FrameEntry, SequenceManifest};
use crate::error::{Error, Result};
use crate::integrator::{Frame, PixelLabels};

/// Analytic surface kinds. The plane is a finite square patch: `extent` is
/// its half side length within the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveKind {
    Plane {
        point: Point3<f64>,
        normal: Vector3<f64>,
        extent: f64,
    },
    Sphere {
        center: Point3<f64>,
        radius: f64,
    },
    Box {
        center: Point3<f64>,
        half_extents: Vector3<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePrimitive {
    pub kind: PrimitiveKind,
    pub label: u16,
    pub color: [u8; 3],
}

impl ScenePrimitive {
    /// Surface area in square meters.
    pub fn area(&self) -> f64 {
        match self.kind {
            PrimitiveKind::Plane { extent, .. } => 4.0 * extent * extent,
            PrimitiveKind::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            PrimitiveKind::Box { half_extents: h, .. } => {
                8.0 * (h.x * h.y + h.y * h.z + h.z * h.x)
            }
        }
    }

    /// Representative center, used for scene framing.
    fn center(&self) -> Point3<f64> {
        match self.kind {
            PrimitiveKind::Plane { point, .. } => point,
            PrimitiveKind::Sphere { center, .. } => center,
            PrimitiveKind::Box { center, .. } => center,
        }
    }

    /// Radius of a sphere around `center()` that contains the primitive.
    fn framing_radius(&self) -> f64 {
        match self.kind {
            PrimitiveKind::Plane { extent, .. } => extent * std::f64::consts::SQRT_2,
            PrimitiveKind::Sphere { radius, .. } => radius,
            PrimitiveKind::Box { half_extents: h, .. } => h.norm(),
        }
    }

    /// Distance of a point to this surface.
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        match self.kind {
            PrimitiveKind::Plane {
                point,
                normal,
                extent,
            } => {
                let (e1, e2) = plane_basis(&normal);
                let rel = p - point;
                let u = rel.dot(&e1).clamp(-extent, extent);
                let v = rel.dot(&e2).clamp(-extent, extent);
                let nearest = point + u * e1 + v * e2;
                (p - nearest).norm()
            }
            PrimitiveKind::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            PrimitiveKind::Box {
                center,
                half_extents: h,
            } => {
                let rel = p - center;
                let q = Vector3::new(
                    rel.x.abs() - h.x,
                    rel.y.abs() - h.y,
                    rel.z.abs() - h.z,
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                (outside + inside).abs()
            }
        }
    }
}

/// Deterministic orthonormal basis spanning the plane with normal `n`.
fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = seed.cross(n).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// A labeled scene: primitives plus the label table size they draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    pub n_labels: u32,
}

/// Result of casting one ray against a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Distance along the unit direction.
    pub t: f64,
    /// Index of the hit primitive.
    pub primitive: usize,
}

const RAY_EPS: f64 = 1e-9;

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::validation("scene has no primitives"));
        }
        if self.n_labels < 2 {
            return Err(Error::validation("scene needs at least two labels"));
        }
        for (i, prim) in self.primitives.iter().enumerate() {
            if u32::from(prim.label) >= self.n_labels {
                return Err(Error::validation(format!(
                    "primitive {i}: label {} outside table of {}",
                    prim.label, self.n_labels
                )));
            }
            match prim.kind {
                PrimitiveKind::Plane { normal, extent, .. } => {
                    if (normal.norm() - 1.0).abs() > 1e-6 {
                        return Err(Error::validation(format!(
                            "primitive {i}: plane normal must be unit length"
                        )));
                    }
                    if !(extent > 0.0) {
                        return Err(Error::validation(format!(
                            "primitive {i}: plane extent must be positive"
                        )));
                    }
                }
                PrimitiveKind::Sphere { radius, .. } => {
                    if !(radius > 0.0) {
                        return Err(Error::validation(format!(
                            "primitive {i}: sphere radius must be positive"
                        )));
                    }
                }
                PrimitiveKind::Box { half_extents: h, .. } => {
                    if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0) {
                        return Err(Error::validation(format!(
                            "primitive {i}: box half extents must be positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Mean of the primitive centers.
    pub fn centroid(&self) -> Point3<f64> {
        let mut sum = Vector3::zeros();
        for prim in &self.primitives {
            sum += prim.center().coords;
        }
        Point3::from(sum / self.primitives.len() as f64)
    }

    /// Radius around the centroid that contains every primitive.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.primitives
            .iter()
            .map(|p| (p.center() - c).norm() + p.framing_radius())
            .fold(0.0, f64::max)
    }

    /// Nearest positive intersection of `origin + t * dir` (unit `dir`)
    /// with any primitive. Ties go to the lower primitive index.
    pub fn raycast(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            let t = match prim.kind {
                PrimitiveKind::Plane {
                    point,
                    normal,
                    extent,
                } => intersect_plane(origin, dir, &point, &normal, extent),
                PrimitiveKind::Sphere { center, radius } => {
                    intersect_sphere(origin, dir, &center, radius)
                }
                PrimitiveKind::Box {
                    center,
                    half_extents,
                } => intersect_box(origin, dir, &center, &half_extents),
            };
            if let Some(t) = t {
                if best.map_or(true, |b| t < b.t) {
                    best = Some(RayHit { t, primitive: i });
                }
            }
        }
        best
    }

    /// Distance of a point to the nearest primitive surface.
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

fn intersect_plane(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    point: &Point3<f64>,
    normal: &Vector3<f64>,
    extent: f64,
) -> Option<f64> {
    let denom = dir.dot(normal);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (point - origin).dot(normal) / denom;
    if t <= RAY_EPS {
        return None;
    }
    let hit = origin + t * dir;
    let (e1, e2) = plane_basis(normal);
    let rel = hit - point;
    if rel.dot(&e1).abs() <= extent && rel.dot(&e2).abs() <= extent {
        Some(t)
    } else {
        None
    }
}

fn intersect_sphere(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    center: &Point3<f64>,
    radius: f64,
) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = -b - sq;
    if near > RAY_EPS {
        return Some(near);
    }
    let far = -b + sq;
    if far > RAY_EPS {
        return Some(far);
    }
    None
}

fn intersect_box(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    center: &Point3<f64>,
    half: &Vector3<f64>,
) -> Option<f64> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for axis in 0..3 {
        let o = origin[axis] - center[axis];
        let d = dir[axis];
        let h = half[axis];
        if d.abs() < 1e-12 {
            if o.abs() > h {
                return None;
            }
            continue;
        }
        let (a, b) = ((-h - o) / d, (h - o) / d);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_exit < t_enter {
            return None;
        }
    }
    if t_enter > RAY_EPS {
        Some(t_enter)
    } else if t_exit > RAY_EPS {
        Some(t_exit)
    } else {
        None
    }
}

/// Rendering noise controls. `confusion` is the probability that a pixel's
/// top semantic observation is a wrong label (scored 0.6) with the true
/// label second (0.3); zero emits the true label at probability 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub noise_sigma: Option<f64>,
    pub confusion: f64,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            noise_sigma: None,
            confusion: 0.0,
            seed: 0,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(sigma) = self.noise_sigma {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::validation("noise sigma must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.confusion) {
            return Err(Error::validation("confusion must be in [0, 1)"));
        }
        Ok(())
    }
}

fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Render exact z-depth (camera-frame z of the nearest hit, in meters) for
/// every pixel; misses are 0. No noise, full f64 precision.
pub fn render_depth(scene: &Scene, pose: &Isometry3<f64>, camera: &CameraInfo) -> Vec<f64> {
    let mut out = vec![0.0; camera.width * camera.height];
    render_into(scene, pose, camera, |i, _, s| out[i] = s);
    out
}

fn render_into(
    scene: &Scene,
    pose: &Isometry3<f64>,
    camera: &CameraInfo,
    mut write: impl FnMut(usize, usize, f64),
) {
    let intr = &camera.intrinsics;
    let origin = pose * Point3::origin();
    for v in 0..camera.height {
        for u in 0..camera.width {
            let dir_cam = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let dir_world = pose.rotation * dir_cam;
            let norm = dir_world.norm();
            let unit = dir_world / norm;
            if let Some(hit) = scene.raycast(&origin, &unit) {
                // z-depth: the parameter along `dir_cam`, whose camera z is 1.
                write(v * camera.width + u, hit.primitive, hit.t / norm);
            }
        }
    }
}

/// Render a full frame: depth (optionally noisy), per-primitive color, and
/// semantic observations under the confusion model.
pub fn render_frame(
    scene: &Scene,
    pose: &Isometry3<f64>,
    camera: &CameraInfo,
    options: &RenderOptions,
    frame_id: u64,
) -> Result<Frame> {
    scene.validate()?;
    options.validate()?;
    let n = camera.width * camera.height;
    let mut depth = vec![0f32; n];
    let mut color = vec![[0u8; 3]; n];
    let mut labels = vec![PixelLabels::empty(); n];

    let mut rng = frame_rng(options.seed, frame_id);
    let normal = options
        .noise_sigma
        .map(|sigma| Normal::new(0.0, sigma).expect("validated sigma"));

    let mut failure = None;
    render_into(scene, pose, camera, |i, prim_idx, mut z| {
        let prim = &scene.primitives[prim_idx];
        if let Some(dist) = &normal {
            z = (z + dist.sample(&mut rng)).max(0.0);
        }
        depth[i] = z as f32;
        color[i] = prim.color;
        let truth = prim.label;
        let observed = if options.confusion > 0.0 && rng.gen::<f64>() < options.confusion {
            let mut wrong = rng.gen_range(0..self_exclusive(scene.n_labels));
            if wrong >= u32::from(truth) {
                wrong += 1;
            }
            PixelLabels::from_sorted(&[(wrong as u16, 0.6), (truth, 0.3)])
        } else {
            PixelLabels::from_sorted(&[(truth, 1.0)])
        };
        match observed {
            Ok(l) => labels[i] = l,
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    Frame::new(
        camera.width,
        camera.height,
        depth,
        color,
        labels,
        *pose,
        camera.intrinsics,
        frame_id,
    )
}

fn self_exclusive(n_labels: u32) -> u32 {
    n_labels - 1
}

/// A labeled point on a surface, either drawn analytically from a scene or
/// sampled from a reconstructed mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub position: Point3<f64>,
    pub label: u16,
}

/// Draw exact surface samples, `round(density * area)` per primitive, from
/// a fixed-seed generator.
pub fn gt_surface_samples(scene: &Scene, density: f64, seed: u64) -> Result<Vec<SurfaceSample>> {
    scene.validate()?;
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::validation("sample density must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for prim in &scene.primitives {
        let count = (density * prim.area()).round() as usize;
        for _ in 0..count {
            let position = match prim.kind {
                PrimitiveKind::Plane {
                    point,
                    normal,
                    extent,
                } => {
                    let (e1, e2) = plane_basis(&normal);
                    let a = rng.gen_range(-extent..=extent);
                    let b = rng.gen_range(-extent..=extent);
                    point + a * e1 + b * e2
                }
                PrimitiveKind::Sphere { center, radius } => {
                    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
                    center + radius * Vector3::new(dir[0], dir[1], dir[2])
                }
                PrimitiveKind::Box {
                    center,
                    half_extents: h,
                } => {
                    let weights = [
                        h.y * h.z,
                        h.y * h.z,
                        h.x * h.z,
                        h.x * h.z,
                        h.x * h.y,
                        h.x * h.y,
                    ];
                    let face = WeightedIndex::new(weights)
                        .expect("positive areas")
                        .sample(&mut rng);
                    let a = rng.gen_range(-1.0..=1.0f64);
                    let b = rng.gen_range(-1.0..=1.0f64);
                    let local = match face {
                        0 => Vector3::new(h.x, a * h.y, b * h.z),
                        1 => Vector3::new(-h.x, a * h.y, b * h.z),
                        2 => Vector3::new(a * h.x, h.y, b * h.z),
                        3 => Vector3::new(a * h.x, -h.y, b * h.z),
                        4 => Vector3::new(a * h.x, b * h.y, h.z),
                        _ => Vector3::new(a * h.x, b * h.y, -h.z),
                    };
                    center + local
                }
            };
            out.push(SurfaceSample {
                position,
                label: prim.label,
            });
        }
    }
    Ok(out)
}

/// Majority label per voxel of the given size; ties go to the smaller label.
pub fn gt_voxel_labels(samples: &[SurfaceSample], voxel_size: f64) -> HashMap<[i64; 3], u16> {
    let mut counts: HashMap<[i64; 3], HashMap<u16, usize>> = HashMap::new();
    for s in samples {
        let idx = [
            (s.position.x / voxel_size).floor() as i64,
            (s.position.y / voxel_size).floor() as i64,
            (s.position.z / voxel_size).floor() as i64,
        ];
        *counts.entry(idx).or_default().entry(s.label).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .map(|(idx, by_label)| {
            let mut entries: Vec<(u16, usize)> = by_label.into_iter().collect();
            entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            (idx, entries[0].0)
        })
        .collect()
}

/// Deterministic inward-facing spiral: one turn of azimuth while elevation
/// sweeps from above to below, covering the scene from all sides. The orbit
/// radius adapts to the scene bounds.
pub fn orbit_trajectory(scene: &Scene, n_frames: usize) -> Result<Vec<Isometry3<f64>>> {
    scene.validate()?;
    if n_frames == 0 {
        return Err(Error::validation("trajectory needs at least one frame"));
    }
    let target = scene.centroid();
    let radius = (1.6 * scene.bounding_radius()).max(0.9);
    let (elev_hi, elev_lo) = (1.05f64, -1.05f64);
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let frac = (i as f64 + 0.5) / n_frames as f64;
        let azimuth = std::f64::consts::TAU * frac;
        let elevation = elev_hi + (elev_lo - elev_hi) * frac;
        let eye = target
            + radius
                * Vector3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                );
        poses.push(look_at(&eye, &target));
    }
    Ok(poses)
}

/// Camera pose at `eye` with +z looking at `target`. The image x axis stays
/// horizontal (perpendicular to world z) whenever the view is not vertical.
pub fn look_at(eye: &Point3<f64>, target: &Point3<f64>) -> Isometry3<f64> {
    let forward = (target - eye).normalize();
    let mut right = Vector3::z().cross(&forward);
    if right.norm() < 1e-9 {
        right = Vector3::x();
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rot = Rotation3::from_basis_unchecked(&[right, down, forward]);
    Isometry3::from_parts(
        Translation3::from(eye.coords),
        UnitQuaternion::from_rotation_matrix(&rot),
    )
}

/// Parse a scene description file: `n_labels=` header plus one primitive
/// per line, e.g. `plane point=0,0,0 normal=0,0,1 extent=1.2 label=1
/// color=200,60,60`.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scene = Scene {
        primitives: Vec::new(),
        n_labels: 0,
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| {
            Error::format(path, format!("line {}: {message}", lineno + 1))
        };
        if let Some(value) = line.strip_prefix("n_labels=") {
            scene.n_labels = value
                .trim()
                .parse()
                .map_err(|_| fail(format!("bad n_labels '{value}'")))?;
            continue;
        }
        let mut fields: HashMap<&str, &str> = HashMap::new();
        let mut words = line.split_whitespace();
        let kind = words.next().expect("non-empty line");
        for word in words {
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key=value, got '{word}'")))?;
            fields.insert(k, v);
        }
        let get = |key: &str| -> Result<&str> {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| fail(format!("{kind} is missing '{key}='")))
        };
        let f64_of = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| fail(format!("bad number for '{key}'")))
        };
        let vec3_of = |key: &str| -> Result<Vector3<f64>> {
            let parts: Vec<&str> = get(key)?.split(',').collect();
            if parts.len() != 3 {
                return Err(fail(format!("'{key}' needs three comma-separated numbers")));
            }
            let mut v = [0f64; 3];
            for (slot, part) in v.iter_mut().zip(&parts) {
                *slot = part
                    .parse()
                    .map_err(|_| fail(format!("bad number in '{key}'")))?;
            }
            Ok(Vector3::new(v[0], v[1], v[2]))
        };
        let label: u16 = get("label")?
            .parse()
            .map_err(|_| fail("bad label id".into()))?;
        let color_v = vec3_of("color")?;
        let color = [color_v.x as u8, color_v.y as u8, color_v.z as u8];
        let prim_kind = match kind {
            "plane" => PrimitiveKind::Plane {
                point: Point3::from(vec3_of("point")?),
                normal: vec3_of("normal")?.normalize(),
                extent: f64_of("extent")?,
            },
            "sphere" => PrimitiveKind::Sphere {
                center: Point3::from(vec3_of("center")?),
                radius: f64_of("radius")?,
            },
            "box" => PrimitiveKind::Box {
                center: Point3::from(vec3_of("center")?),
                half_extents: vec3_of("half_extents")?,
            },
            other => return Err(fail(format!("unknown primitive '{other}'"))),
        };
        scene.primitives.push(ScenePrimitive {
            kind: prim_kind,
            label,
            color,
        });
    }
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "n_labels={}", scene.n_labels).unwrap();
    let v3 = |v: &Vector3<f64>| format!("{},{},{}", v.x, v.y, v.z);
    for prim in &scene.primitives {
        let color = format!("{},{},{}", prim.color[0], prim.color[1], prim.color[2]);
        match prim.kind {
            PrimitiveKind::Plane {
                point,
                normal,
                extent,
            } => writeln!(
                text,
                "plane point={} normal={} extent={} label={} color={color}",
                v3(&point.coords),
                v3(&normal),
                extent,
                prim.label
            )
            .unwrap(),
            PrimitiveKind::Sphere { center, radius } => writeln!(
                text,
                "sphere center={} radius={} label={} color={color}",
                v3(&center.coords),
                radius,
                prim.label
            )
            .unwrap(),
            PrimitiveKind::Box {
                center,
                half_extents,
            } => writeln!(
                text,
                "box center={} half_extents={} label={} color={color}",
                v3(&center.coords),
                v3(&half_extents),
                prim.label
            )
            .unwrap(),
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write ground-truth samples as `x y z label` lines.
pub fn save_gt_samples(path: &Path, samples: &[SurfaceSample]) -> Result<()> {
    let mut text = String::from("# x y z label\n");
    for s in samples {
        writeln!(
            text,
            "{} {} {} {}",
            s.position.x, s.position.y, s.position.z, s.label
        )
        .unwrap();
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_gt_samples(path: &Path) -> Result<Vec<SurfaceSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| {
            Error::format(path, format!("line {}: {message}", lineno + 1))
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(fail(format!("expected 4 fields, found {}", fields.len())));
        }
        let mut v = [0f64; 3];
        for (slot, field) in v.iter_mut().zip(&fields[..3]) {
            *slot = field
                .parse()
                .map_err(|_| fail(format!("bad number '{field}'")))?;
        }
        let label: u16 = fields[3]
            .parse()
            .map_err(|_| fail(format!("bad label '{}'", fields[3])))?;
        out.push(SurfaceSample {
            position: Point3::new(v[0], v[1], v[2]),
            label,
        });
    }
    Ok(out)
}

/// Full dataset synthesis controls.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_frames: usize,
    pub render: RenderOptions,
    /// Ground-truth surface samples per square meter.
    pub gt_density: f64,
    /// Label names; `class_<id>` when absent.
    pub label_names: Option<Vec<String>>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_frames: 24,
            render: RenderOptions::default(),
            gt_density: 4000.0,
            label_names: None,
        }
    }
}

/// Render an orbit of frames and write a complete dataset: manifest, label
/// table, trajectory, per-frame images and rasters, and GT samples
/// (`gt_samples.txt`). Returns the manifest.
pub fn synthesize_dataset(
    scene: &Scene,
    camera: &CameraInfo,
    options: &SynthOptions,
    out_dir: &Path,
) -> Result<SequenceManifest> {
    scene.validate()?;
    options.render.validate()?;
    let poses = orbit_trajectory(scene, options.n_frames)?;

    let names: Vec<String> = match &options.label_names {
        Some(names) => {
            if names.len() != scene.n_labels as usize {
                return Err(Error::validation(format!(
                    "{} label names for {} labels",
                    names.len(),
                    scene.n_labels
                )));
            }
            names.clone()
        }
        None => (0..scene.n_labels).map(|i| format!("class_{i:02}")).collect(),
    };

    let mut entries = Vec::with_capacity(options.n_frames);
    let mut pose_rows = Vec::with_capacity(options.n_frames);
    for (i, pose) in poses.iter().enumerate() {
        let frame_id = i as u64;
        let frame = render_frame(scene, pose, camera, &options.render, frame_id)?;
        let depth_rel = format!("depth/{frame_id:06}.png");
        let color_rel = format!("color/{frame_id:06}.png");
        let sem_rel = format!("sem/{frame_id:06}.semk");
        dataset_io::save_depth(
            &out_dir.join(&depth_rel),
            camera.width,
            camera.height,
            frame.depth(),
            dataset_io::DEFAULT_DEPTH_SCALE,
        )?;
        dataset_io::save_color(
            &out_dir.join(&color_rel),
            camera.width,
            camera.height,
            frame.color(),
        )?;
        dataset_io::save_semantics(
            &out_dir.join(&sem_rel),
            camera.width,
            camera.height,
            frame.labels(),
        )?;
        entries.push(FrameEntry {
            frame_id,
            depth: depth_rel.into(),
            color: color_rel.into(),
            semantics: sem_rel.into(),
        });
        pose_rows.push((frame_id, *pose));
    }

    dataset_io::save_label_table(&out_dir.join("labels.txt"), &names)?;
    dataset_io::save_pose_file(&out_dir.join("poses.txt"), &pose_rows)?;
    let samples = gt_surface_samples(scene, options.gt_density, options.render.seed)?;
    save_gt_samples(&out_dir.join("gt_samples.txt"), &samples)?;
    save_scene(&out_dir.join("scene.txt"), scene)?;

    let manifest = SequenceManifest {
        root: out_dir.to_path_buf(),
        camera: *camera,
        depth_scale: dataset_io::DEFAULT_DEPTH_SCALE,
        n_labels: scene.n_labels,
        label_table: "labels.txt".into(),
        poses: "poses.txt".into(),
        frames: entries,
    };
    dataset_io::save_manifest(&out_dir.join("manifest.txt"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::Intrinsics;
    use approx::assert_relative_eq;
    use tempfile::TempDir;

    fn camera() -> CameraInfo {
        CameraInfo {
            intrinsics: Intrinsics {
                fx: 110.0,
                fy: 110.0,
                cx: 80.0,
                cy: 60.0,
            },
            width: 160,
            height: 120,
        }
    }

    fn desk_scene() -> Scene {
        Scene {
            primitives: vec![
                ScenePrimitive {
                    kind: PrimitiveKind::Plane {
                        point: Point3::new(0.0, 0.0, 0.0),
                        normal: Vector3::z(),
                        extent: 0.8,
                    },
                    label: 1,
                    color: [180, 170, 150],
                },
                ScenePrimitive {
                    kind: PrimitiveKind::Sphere {
                        center: Point3::new(0.25, 0.1, 0.3),
                        radius: 0.18,
                    },
                    label: 7,
                    color: [200, 60, 60],
                },
                ScenePrimitive {
                    kind: PrimitiveKind::Box {
                        center: Point3::new(-0.3, -0.1, 0.15),
                        half_extents: Vector3::new(0.15, 0.12, 0.15),
                    },
                    label: 12,
                    color: [60, 90, 200],
                },
            ],
            n_labels: 40,
        }
    }

    #[test]
    fn principal_pixel_depth_is_the_wall_distance() {
        // Camera 2 m in front of a wall, looking straight at it.
        let scene = Scene {
            primitives: vec![ScenePrimitive {
                kind: PrimitiveKind::Plane {
                    point: Point3::new(0.0, 0.0, 0.0),
                    normal: Vector3::z(),
                    extent: 3.0,
                },
                label: 1,
                color: [200, 200, 200],
            }],
            n_labels: 2,
        };
        let pose = look_at(&Point3::new(0.0, 0.0, 2.0), &Point3::origin());
        let cam = camera();
        let depth = render_depth(&scene, &pose, &cam);
        let principal = depth[60 * cam.width + 80];
        // cx/cy land exactly on a pixel, so the principal ray is axial.
        assert!((principal - 2.0).abs() < 1e-9, "{principal}");
    }

    #[test]
    fn on_axis_sphere_depth_is_distance_minus_radius() {
        let scene = Scene {
            primitives: vec![ScenePrimitive {
                kind: PrimitiveKind::Sphere {
                    center: Point3::new(0.0, 0.0, 0.0),
                    radius: 0.25,
                },
                label: 3,
                color: [10, 20, 30],
            }],
            n_labels: 4,
        };
        let pose = look_at(&Point3::new(0.0, -1.5, 0.0), &Point3::origin());
        let cam = camera();
        let depth = render_depth(&scene, &pose, &cam);
        let principal = depth[60 * cam.width + 80];
        assert!((principal - 1.25).abs() < 1e-9, "{principal}");
    }

    #[test]
    fn every_valid_pixel_backprojects_onto_a_surface() {
        let scene = desk_scene();
        let pose = look_at(&Point3::new(1.1, 0.9, 1.0), &Point3::new(0.0, 0.0, 0.2));
        let cam = camera();
        let depth = render_depth(&scene, &pose, &cam);
        let mut checked = 0;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let z = depth[v * cam.width + u];
                if z == 0.0 {
                    continue;
                }
                let dir_cam = Vector3::new(
                    (u as f64 - cam.intrinsics.cx) / cam.intrinsics.fx,
                    (v as f64 - cam.intrinsics.cy) / cam.intrinsics.fy,
                    1.0,
                );
                let world = pose * Point3::from(dir_cam * z);
                assert!(
                    scene.distance(&world) < 1e-9,
                    "pixel ({u},{v}) lands {} m off-surface",
                    scene.distance(&world)
                );
                checked += 1;
            }
        }
        assert!(checked > 3000, "only {checked} valid pixels");
    }

    #[test]
    fn rays_that_miss_leave_invalid_depth() {
        let scene = desk_scene();
        // Looking away from the scene.
        let pose = look_at(&Point3::new(0.0, -3.0, 0.5), &Point3::new(0.0, -9.0, 0.5));
        let depth = render_depth(&scene, &pose, &camera());
        assert!(depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn box_raycast_hits_the_near_face() {
        let center = Point3::new(0.0, 0.0, 0.0);
        let half = Vector3::new(0.2, 0.3, 0.4);
        let origin = Point3::new(2.0, 0.05, -0.1);
        let t = intersect_box(&origin, &Vector3::new(-1.0, 0.0, 0.0), &center, &half).unwrap();
        assert_relative_eq!(t, 1.8, epsilon = 1e-12);
        // From inside, the exit face is reported.
        let t = intersect_box(&Point3::origin(), &Vector3::z(), &center, &half).unwrap();
        assert_relative_eq!(t, 0.4, epsilon = 1e-12);
        assert!(intersect_box(
            &origin,
            &Vector3::new(0.0, 1.0, 0.0),
            &center,
            &half
        )
        .is_none());
    }

    #[test]
    fn rendered_labels_and_colors_follow_the_primitive() {
        let scene = desk_scene();
        let pose = look_at(&Point3::new(0.25, 0.1, 1.4), &Point3::new(0.25, 0.1, 0.3));
        let cam = camera();
        let frame =
            render_frame(&scene, &pose, &cam, &RenderOptions::default(), 0).unwrap();
        let i = 60 * cam.width + 80;
        assert_eq!(frame.color()[i], [200, 60, 60], "sphere is under the center");
        assert_eq!(frame.labels()[i].entries(), &[(7, 1.0)]);
    }

    #[test]
    fn confusion_model_statistics_match_epsilon() {
        let scene = desk_scene();
        let pose = look_at(&Point3::new(0.9, 0.7, 0.9), &Point3::new(0.0, 0.0, 0.2));
        let cam = camera();
        let options = RenderOptions {
            confusion: 0.3,
            ..RenderOptions::default()
        };
        let frame = render_frame(&scene, &pose, &cam, &options, 0).unwrap();
        let clean = render_frame(&scene, &pose, &cam, &RenderOptions::default(), 0).unwrap();
        let mut valid = 0usize;
        let mut confused = 0usize;
        for (obs, truth) in frame.labels().iter().zip(clean.labels()) {
            if truth.is_empty() {
                continue;
            }
            valid += 1;
            let truth_label = truth.entries()[0].0;
            match obs.entries() {
                [(top, p_top), (second, p_second)] => {
                    confused += 1;
                    assert_ne!(top, second);
                    assert_eq!(*second, truth_label, "true label rides second");
                    assert_relative_eq!(*p_top, 0.6);
                    assert_relative_eq!(*p_second, 0.3);
                }
                [(top, p_top)] => {
                    assert_eq!(*top, truth_label);
                    assert_relative_eq!(*p_top, 1.0);
                }
                other => panic!("unexpected observation {other:?}"),
            }
        }
        let rate = confused as f64 / valid as f64;
        assert!((rate - 0.3).abs() < 0.03, "confusion rate {rate}");
    }

    #[test]
    fn depth_noise_is_seeded_and_bounded() {
        let scene = desk_scene();
        let pose = look_at(&Point3::new(0.9, 0.7, 0.9), &Point3::new(0.0, 0.0, 0.2));
        let cam = camera();
        let noisy = RenderOptions {
            noise_sigma: Some(0.004),
            ..RenderOptions::default()
        };
        let a = render_frame(&scene, &pose, &cam, &noisy, 3).unwrap();
        let b = render_frame(&scene, &pose, &cam, &noisy, 3).unwrap();
        assert_eq!(a.depth(), b.depth(), "same seed, same noise");
        let clean = render_frame(&scene, &pose, &cam, &RenderOptions::default(), 3).unwrap();
        let mut any_moved = false;
        for (n, c) in a.depth().iter().zip(clean.depth()) {
            if *c == 0.0 {
                assert_eq!(*n, 0.0);
                continue;
            }
            let delta = (n - c).abs();
            assert!(delta < 6.0 * 0.004, "delta {delta}");
            any_moved |= delta > 0.0;
        }
        assert!(any_moved);
    }

    #[test]
    fn gt_samples_lie_exactly_on_their_surfaces() {
        let scene = desk_scene();
        let samples = gt_surface_samples(&scene, 2000.0, 11).unwrap();
        assert!(samples.len() > 4000);
        for s in &samples {
            let prim = scene
                .primitives
                .iter()
                .find(|p| p.label == s.label)
                .unwrap();
            assert!(
                prim.distance(&s.position) < 1e-12,
                "sample {} m off its surface",
                prim.distance(&s.position)
            );
        }
    }

    #[test]
    fn gt_sample_counts_are_proportional_to_area() {
        // Two planes with a 3:1 area ratio (extents sqrt(3):1).
        let scene = Scene {
            primitives: vec![
                ScenePrimitive {
                    kind: PrimitiveKind::Plane {
                        point: Point3::origin(),
                        normal: Vector3::z(),
                        extent: 3f64.sqrt(),
                    },
                    label: 0,
                    color: [0, 0, 0],
                },
                ScenePrimitive {
                    kind: PrimitiveKind::Plane {
                        point: Point3::new(0.0, 0.0, 1.0),
                        normal: Vector3::z(),
                        extent: 1.0,
                    },
                    label: 1,
                    color: [0, 0, 0],
                },
            ],
            n_labels: 2,
        };
        let samples = gt_surface_samples(&scene, 25000.0 / 16.0, 5).unwrap();
        let big = samples.iter().filter(|s| s.label == 0).count() as f64;
        let small = samples.iter().filter(|s| s.label == 1).count() as f64;
        assert!((big / small - 3.0).abs() < 0.02, "ratio {}", big / small);
    }

    #[test]
    fn gt_voxel_labels_take_the_majority_and_break_ties_low() {
        let p = |x: f64, label: u16| SurfaceSample {
            position: Point3::new(x, 0.01, 0.01),
            label,
        };
        let samples = vec![
            p(0.01, 5),
            p(0.02, 5),
            p(0.03, 2),
            // Second voxel: tie between 9 and 4.
            p(0.11, 9),
            p(0.12, 4),
        ];
        let labels = gt_voxel_labels(&samples, 0.08);
        assert_eq!(labels[&[0, 0, 0]], 5);
        assert_eq!(labels[&[1, 0, 0]], 4);
    }

    #[test]
    fn orbit_faces_the_centroid_with_bounded_baselines() {
        let scene = desk_scene();
        let n = 24;
        let poses = orbit_trajectory(&scene, n).unwrap();
        assert_eq!(poses.len(), n);
        let target = scene.centroid();
        let radius = (poses[0] * Point3::origin() - target).norm();
        for pose in &poses {
            let eye = pose * Point3::origin();
            let forward = pose.rotation * Vector3::z();
            let to_target = (target - eye).normalize();
            let angle = forward.dot(&to_target).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-6, "look-at error {angle} rad");
        }
        let bound = 1.2 * radius * (std::f64::consts::TAU + 2.1) / n as f64;
        for pair in poses.windows(2) {
            let a = pair[0] * Point3::origin();
            let b = pair[1] * Point3::origin();
            assert!((a - b).norm() < bound, "baseline {} over {bound}", (a - b).norm());
        }
        assert_eq!(orbit_trajectory(&scene, 1).unwrap().len(), 1);
    }

    #[test]
    fn scene_files_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("scene.txt");
        let scene = desk_scene();
        save_scene(&path, &scene).unwrap();
        let load = load_scene(&path).unwrap();
        assert_eq!(load, scene);

        std::fs::write(&path, "n_labels=4\nsphere center=0,0,0 radius=-1 label=0 color=1,2,3\n")
            .unwrap();
        assert!(load_scene(&path).is_err());
        std::fs::write(&path, "n_labels=4\ncone center=0,0,0 label=0 color=1,2,3\n").unwrap();
        assert!(load_scene(&path).is_err());
    }

    #[test]
    fn gt_sample_files_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("gt.txt");
        let samples = gt_surface_samples(&desk_scene(), 500.0, 3).unwrap();
        save_gt_samples(&path, &samples).unwrap();
        let load = load_gt_samples(&path).unwrap();
        assert_eq!(load.len(), samples.len());
        for (a, b) in samples.iter().zip(&load) {
            assert_eq!(a.position, b.position, "text floats round-trip exactly");
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn synthesized_dataset_loads_back_and_matches() {
        let dir = TempDir::new().unwrap();
        let scene = desk_scene();
        let cam = camera();
        let options = SynthOptions {
            n_frames: 3,
            gt_density: 300.0,
            ..SynthOptions::default()
        };
        let manifest = synthesize_dataset(&scene, &cam, &options, dir.path()).unwrap();
        let loaded = dataset_io::load_manifest(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(loaded.frames.len(), 3);
        assert_eq!(loaded.n_labels, 40);

        let poses = loaded.load_poses().unwrap();
        let frame = loaded.load_frame(1, &poses).unwrap();
        let rendered = render_frame(
            &scene,
            &poses[1].1,
            &cam,
            &options.render,
            1,
        )
        .unwrap();
        assert_eq!(frame.color(), rendered.color());
        assert_eq!(frame.labels(), rendered.labels());
        // Depth goes through millimeter quantization.
        for (a, b) in frame.depth().iter().zip(rendered.depth()) {
            assert!((a - b).abs() < 0.51e-3, "{a} vs {b}");
        }
        assert_eq!(manifest.frames, loaded.frames);
    }

    #[test]
    fn fixed_seed_reproduces_the_dataset_byte_for_byte() {
        let scene = desk_scene();
        let cam = camera();
        let options = SynthOptions {
            n_frames: 2,
            gt_density: 200.0,
            render: RenderOptions {
                noise_sigma: Some(0.003),
                confusion: 0.2,
                seed: 99,
            },
            ..SynthOptions::default()
        };
        let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
        for dir in &dirs {
            synthesize_dataset(&scene, &cam, &options, dir.path()).unwrap();
        }
        let mut files: Vec<std::path::PathBuf> = Vec::new();
        let mut stack = vec![dirs[0].path().to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p.strip_prefix(dirs[0].path()).unwrap().to_path_buf());
                }
            }
        }
        assert!(files.len() >= 10, "dataset has {} files", files.len());
        for rel in files {
            let a = std::fs::read(dirs[0].path().join(&rel)).unwrap();
            let b = std::fs::read(dirs[1].path().join(&rel)).unwrap();
            assert_eq!(a, b, "{} differs between runs", rel.display());
        }
    }
}

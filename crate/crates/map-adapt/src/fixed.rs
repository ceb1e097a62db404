//! Single-resolution TSDF pipeline used as a reference for the adaptive map.
//!
//! This is the classical voxel-hashing formulation: one global voxel size,
//! one subsample grid, no semantics, no complexity, no level transitions.
//! It shares the ray traversal, projection, and update arithmetic with the
//! adaptive integrator, so the two pipelines produce identical fields
//! wherever the adaptive map is refined to the same resolution.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::integrator::ray::{
    apply_tsdf_update, grid_key, point_to_ray_distance, voxel_center, walk_ray_voxels,
};
use crate::integrator::{project_frame, Frame, IntegratorConfig, LabeledPoint, SUBSAMPLE_ALPHA};

/// A single voxel of the fixed-resolution map. Color is the weighted mean of
/// 8-bit channel values, in [0, 255], matching the adaptive map's convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedVoxel {
    pub tsdf: f64,
    pub weight: f64,
    pub color: [f32; 3],
}

impl Default for FixedVoxel {
    fn default() -> Self {
        Self {
            tsdf: 0.0,
            weight: 0.0,
            color: [0.0; 3],
        }
    }
}

impl FixedVoxel {
    pub fn observed(&self) -> bool {
        self.weight > 0.0
    }
}

/// Serialized bytes per voxel body (tsdf, weight, color).
const VOXEL_BYTES: usize = 8 + 8 + 12;
/// Serialized bytes per map record: a 3 x i64 index plus the voxel body.
const RECORD_BYTES: usize = 24 + VOXEL_BYTES;

pub const FIXED_MAGIC: &[u8; 8] = b"MAPFIXED";
const FIXED_VERSION: u32 = 1;
/// magic + version + voxel_size + record count.
const FIXED_HEADER_BYTES: usize = 8 + 4 + 8 + 8;

/// Spatially hashed single-resolution TSDF volume.
#[derive(Debug, Clone)]
pub struct FixedTsdfMap {
    voxel_size: f64,
    voxels: HashMap<[i64; 3], FixedVoxel>,
}

impl FixedTsdfMap {
    pub fn new(voxel_size: f64) -> Result<Self> {
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::validation(format!(
                "voxel size must be positive and finite, got {voxel_size}"
            )));
        }
        Ok(Self {
            voxel_size,
            voxels: HashMap::new(),
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxel(&self, index: &[i64; 3]) -> Option<&FixedVoxel> {
        self.voxels.get(index)
    }

    pub fn voxel_mut_or_default(&mut self, index: [i64; 3]) -> &mut FixedVoxel {
        self.voxels.entry(index).or_default()
    }

    /// Center of the voxel with the given grid index, in world coordinates.
    pub fn center(&self, index: &[i64; 3]) -> Point3<f64> {
        voxel_center(index, self.voxel_size)
    }

    /// Grid index of the voxel containing a world point.
    pub fn index_of(&self, p: &Point3<f64>) -> [i64; 3] {
        grid_key(p, self.voxel_size)
    }

    /// All voxel indices in ascending lexicographic order.
    pub fn sorted_indices(&self) -> Vec<[i64; 3]> {
        let mut indices: Vec<[i64; 3]> = self.voxels.keys().copied().collect();
        indices.sort_unstable();
        indices
    }

    /// Size accounting, equal by construction to the serialized file size.
    pub fn memory_bytes(&self) -> u64 {
        (FIXED_HEADER_BYTES + self.voxels.len() * RECORD_BYTES) as u64
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[i64; 3], &FixedVoxel)> {
        self.voxels.iter()
    }

    /// Serializes to a deterministic byte image: fixed header, then one
    /// record per voxel in ascending index order, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FIXED_HEADER_BYTES + self.voxels.len() * RECORD_BYTES);
        out.extend_from_slice(FIXED_MAGIC);
        out.extend_from_slice(&FIXED_VERSION.to_le_bytes());
        out.extend_from_slice(&self.voxel_size.to_le_bytes());
        out.extend_from_slice(&(self.voxels.len() as u64).to_le_bytes());
        for index in self.sorted_indices() {
            let v = &self.voxels[&index];
            for c in index {
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.extend_from_slice(&v.tsdf.to_le_bytes());
            out.extend_from_slice(&v.weight.to_le_bytes());
            for ch in v.color {
                out.extend_from_slice(&ch.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |message: String| Error::format(path, message);
        if bytes.len() < FIXED_HEADER_BYTES {
            return Err(fmt("truncated header".into()));
        }
        if &bytes[..8] != FIXED_MAGIC {
            return Err(fmt("not a fixed-resolution map (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FIXED_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let voxel_size = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(fmt(format!("invalid voxel size {voxel_size}")));
        }
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let body = &bytes[FIXED_HEADER_BYTES..];
        if body.len() != count * RECORD_BYTES {
            return Err(fmt(format!(
                "expected {} record bytes, found {}",
                count * RECORD_BYTES,
                body.len()
            )));
        }
        let mut voxels = HashMap::with_capacity(count);
        for rec in body.chunks_exact(RECORD_BYTES) {
            let mut index = [0i64; 3];
            for (axis, value) in index.iter_mut().enumerate() {
                *value = i64::from_le_bytes(rec[axis * 8..axis * 8 + 8].try_into().unwrap());
            }
            let tsdf = f64::from_le_bytes(rec[24..32].try_into().unwrap());
            let weight = f64::from_le_bytes(rec[32..40].try_into().unwrap());
            let mut color = [0f32; 3];
            for (axis, ch) in color.iter_mut().enumerate() {
                *ch = f32::from_le_bytes(rec[40 + axis * 4..44 + axis * 4].try_into().unwrap());
            }
            if voxels
                .insert(index, FixedVoxel { tsdf, weight, color })
                .is_some()
            {
                return Err(fmt(format!("duplicate voxel index {index:?}")));
            }
        }
        Ok(Self { voxel_size, voxels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Per-frame statistics for the fixed pipeline.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedFrameStats {
    pub frame_id: u64,
    pub points: usize,
    pub rays: usize,
    pub voxels_updated: usize,
    pub integrate_ms: f64,
}

/// Depth integrator for [`FixedTsdfMap`].
#[derive(Debug, Clone, Default)]
pub struct FixedIntegrator {
    config: IntegratorConfig,
}

impl FixedIntegrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_config(config: IntegratorConfig) -> Result<Self> {
        config.validate_base()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.config
    }

    pub fn integrate_frame(
        &self,
        map: &mut FixedTsdfMap,
        frame: &Frame,
    ) -> Result<FixedFrameStats> {
        self.config.validate_base()?;
        if self.config.truncation < map.voxel_size {
            return Err(Error::validation(format!(
                "truncation {} must cover at least one voxel of size {}",
                self.config.truncation, map.voxel_size
            )));
        }
        let started = Instant::now();
        let points = project_frame(frame, &self.config)?;
        let mut stats = FixedFrameStats {
            frame_id: frame.frame_id(),
            points: points.len(),
            ..FixedFrameStats::default()
        };

        let admit_cell = SUBSAMPLE_ALPHA * map.voxel_size;
        let mut occupied: HashSet<[i64; 3]> = HashSet::new();
        let origin = frame.pose() * Point3::origin();

        for point in &points {
            if !occupied.insert(grid_key(&point.position, admit_cell)) {
                continue;
            }
            stats.rays += 1;
            stats.voxels_updated += self.integrate_ray_inner(map, &origin, point);
        }
        stats.integrate_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(stats)
    }

    /// Casts one ray, fusing the point into every voxel the segment through
    /// the truncation band crosses. Returns the number of voxels updated.
    pub fn integrate_ray(
        &self,
        map: &mut FixedTsdfMap,
        origin: &Point3<f64>,
        point: &LabeledPoint,
    ) -> usize {
        self.integrate_ray_inner(map, origin, point)
    }

    fn integrate_ray_inner(
        &self,
        map: &mut FixedTsdfMap,
        origin: &Point3<f64>,
        point: &LabeledPoint,
    ) -> usize {
        let to_point = point.position - origin;
        let t_surface = to_point.norm();
        if !(t_surface > 0.0) {
            return 0;
        }
        let dir = to_point / t_surface;
        let tau = self.config.truncation;
        let t0 = (t_surface - tau).max(0.0);
        let t1 = t_surface + tau;
        let w = point.weight;
        let rgb = point.color.map(f32::from);
        let size = map.voxel_size;

        let mut updated = 0usize;
        walk_ray_voxels(origin, &dir, t0, t1, size, |vidx| {
            let center = voxel_center(&vidx, size);
            let d = point_to_ray_distance(origin, &dir, t_surface, &center, tau);
            let voxel = map.voxel_mut_or_default(vidx);
            apply_tsdf_update(
                &mut voxel.tsdf,
                &mut voxel.weight,
                &mut voxel.color,
                d,
                w,
                rgb,
                self.config.w_max,
            );
            updated += 1;
        });
        updated
    }
}

//! Surface extraction from adaptive and single-resolution TSDF maps.
//!
//! The extractor walks the map cell by cell and tessellates the zero
//! crossing of the distance field with marching cubes. Cube corners are
//! voxel centers, so a cube spans the gap between eight neighboring
//! samples rather than a voxel volume. On an adaptive map the cell
//! interior is meshed at the cell's own resolution while every region
//! touching a forward neighbor (+x, +y, +z) is meshed at the finest
//! resolution present among the cells it spans. Corners that land in a
//! coarser cell are substituted by that cell's voxel at its own center,
//! which deforms the cube but keeps the shared face geometry identical on
//! both sides of a resolution change. Cracks therefore cannot open along
//! level transitions; the substituted faces collapse onto the coarser
//! tessellation and the leftover degenerate triangles are dropped.
//!
//! Vertices are welded by position before triangles are emitted, so a
//! closed surface meshes watertight: every interior edge is shared by
//! exactly two triangles. [`extract_fixed_mesh`] applies the same cube
//! tessellation to a [`FixedTsdfMap`], which makes the two extractors
//! directly comparable on uniformly refined maps.

mod ply;
mod tables;

pub use ply::{read_ply, write_ply, PlyFormat};

use std::collections::HashMap;

use nalgebra::Point3;

use crate::core_map::{AdaptiveVoxelMap, CoarseVoxelCell, QualityLevel};
use crate::fixed::FixedTsdfMap;
use crate::integrator::ray::{grid_key, voxel_center};
use tables::{CORNER_OFFSETS, EDGE_ENDPOINTS, EDGE_TABLE, TRIANGLE_TABLE};

/// Vertices closer than this distance are fused into one mesh vertex.
pub const WELD_EPSILON: f64 = 1e-6;

/// A mesh vertex carrying the shading attributes of its source voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshVertex {
    /// Position on the reconstructed surface.
    pub position: Point3<f64>,
    /// Color inherited from the voxel nearest to the vertex.
    pub color: [u8; 3],
    /// Most probable semantic label of the cell owning that voxel.
    pub label: u16,
}

/// An indexed triangle mesh with welded vertices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<MeshVertex>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    /// Whether the mesh contains no geometry at all.
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty() && self.triangles.is_empty()
    }

    /// Checks that every triangle references existing vertices.
    pub fn validate(&self) -> crate::Result<()> {
        let n = self.vertices.len() as u32;
        for (i, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(crate::Error::validation(format!(
                    "triangle {i} references a vertex outside 0..{n}"
                )));
            }
        }
        Ok(())
    }
}

/// One observed voxel sample feeding a marching cubes cell corner.
///
/// The position is always the center of the source voxel. When a corner
/// request cannot be served at the asked resolution the sample comes from
/// a coarser voxel covering the same point, so repeated positions across
/// the eight corners of a cube are legitimate and collapse the affected
/// edges.
#[derive(Debug, Clone, Copy)]
pub struct CornerSample {
    /// Center of the voxel the sample was read from.
    pub position: Point3<f64>,
    /// Signed truncated distance stored in that voxel.
    pub tsdf: f64,
    /// Accumulated integration weight, positive for observed voxels.
    pub weight: f64,
    /// Resolution the sample was actually served at.
    pub source_level: QualityLevel,
    /// Accumulated color of the voxel, in channel units of 0 to 255.
    pub color: [f32; 3],
    /// Best semantic label of the coarse cell owning the voxel.
    pub label: u16,
}

/// Accumulates triangles and welds vertices by quantized position.
#[derive(Debug, Default)]
struct MeshBuilder {
    vertices: Vec<MeshVertex>,
    triangles: Vec<[u32; 3]>,
    /// Vertex indices hashed by position bucket of width `WELD_EPSILON`.
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

impl MeshBuilder {
    fn bucket_of(p: &Point3<f64>) -> [i64; 3] {
        [
            (p.x / WELD_EPSILON).floor() as i64,
            (p.y / WELD_EPSILON).floor() as i64,
            (p.z / WELD_EPSILON).floor() as i64,
        ]
    }

    /// Finds the nearest existing vertex within `WELD_EPSILON` of `p`.
    ///
    /// Two points within the weld radius land in the same or adjacent
    /// buckets, so the 27-bucket scan is exhaustive. Ties go to the lowest
    /// index, which keeps the representative independent of hash order.
    fn find_welded(&self, p: &Point3<f64>) -> Option<u32> {
        let b = Self::bucket_of(p);
        let mut best: Option<(f64, u32)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = self.buckets.get(&[b[0] + dx, b[1] + dy, b[2] + dz]) else {
                        continue;
                    };
                    for &i in ids {
                        let d2 = (self.vertices[i as usize].position - p).norm_squared();
                        if d2 <= WELD_EPSILON * WELD_EPSILON
                            && best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && i < bi))
                        {
                            best = Some((d2, i));
                        }
                    }
                }
            }
        }
        best.map(|(_, i)| i)
    }

    fn push_vertex(&mut self, vertex: &MeshVertex) -> u32 {
        let i = self.vertices.len() as u32;
        self.vertices.push(*vertex);
        self.buckets
            .entry(Self::bucket_of(&vertex.position))
            .or_default()
            .push(i);
        i
    }

    /// Welds and appends one triangle, dropping degenerate ones.
    ///
    /// Welding happens before the degeneracy checks: a triangle whose
    /// corners collapse onto the same representative, or whose welded
    /// positions are collinear, is dropped without inserting anything.
    fn add_triangle(&mut self, tri: &[MeshVertex; 3]) {
        let found = [
            self.find_welded(&tri[0].position),
            self.find_welded(&tri[1].position),
            self.find_welded(&tri[2].position),
        ];
        for (a, b) in [(0, 1), (1, 2), (0, 2)] {
            let collapses = match (found[a], found[b]) {
                (Some(ia), Some(ib)) => ia == ib,
                (None, None) => {
                    (tri[a].position - tri[b].position).norm_squared()
                        <= WELD_EPSILON * WELD_EPSILON
                }
                _ => false,
            };
            if collapses {
                return;
            }
        }
        let resolved = found.map(|f| f.map(|i| self.vertices[i as usize].position));
        let p = [
            resolved[0].unwrap_or(tri[0].position),
            resolved[1].unwrap_or(tri[1].position),
            resolved[2].unwrap_or(tri[2].position),
        ];
        let cross = (p[1] - p[0]).cross(&(p[2] - p[0]));
        if cross.norm_squared() == 0.0 {
            return;
        }
        let indices = [
            found[0].unwrap_or_else(|| self.push_vertex(&tri[0])),
            found[1].unwrap_or_else(|| self.push_vertex(&tri[1])),
            found[2].unwrap_or_else(|| self.push_vertex(&tri[2])),
        ];
        self.triangles.push(indices);
    }

    fn finish(self) -> Mesh {
        Mesh {
            vertices: self.vertices,
            triangles: self.triangles,
        }
    }
}

/// Interpolates the zero crossing on one cube edge.
///
/// Returns `None` when the edge is collapsed: endpoints sharing a position
/// (both substituted by the same coarser voxel) or carrying equal distance
/// values cannot host a crossing. Endpoints are put in a canonical order
/// first so the two cubes sharing an edge compute bit-identical vertices.
fn edge_vertex(a: &CornerSample, b: &CornerSample) -> Option<MeshVertex> {
    if a.position == b.position || a.tsdf == b.tsdf {
        return None;
    }
    let swap = match a
        .position
        .coords
        .as_slice()
        .partial_cmp(b.position.coords.as_slice())
    {
        Some(std::cmp::Ordering::Greater) => true,
        _ => false,
    };
    let (lo, hi) = if swap { (b, a) } else { (a, b) };
    let t = lo.tsdf / (lo.tsdf - hi.tsdf);
    let position = lo.position + (hi.position - lo.position) * t;
    let owner = if t <= 0.5 { lo } else { hi };
    let color = owner.color.map(|c| c.round().clamp(0.0, 255.0) as u8);
    Some(MeshVertex {
        position,
        color,
        label: owner.label,
    })
}

/// Tessellates the zero crossing within one cube of eight corner samples.
///
/// Corner `i` sits at `CORNER_OFFSETS[i]` relative to the cube base. The
/// sign pattern of the corner distances selects one of 256 precomputed
/// configurations; each requested edge vertex is found by linear
/// interpolation between its endpoint samples. Cubes with an unobserved
/// corner (weight zero) and triangles referencing a collapsed edge are
/// skipped.
pub fn marching_cubes_cell(corners: &[CornerSample; 8]) -> Vec<[MeshVertex; 3]> {
    if corners.iter().any(|c| !(c.weight > 0.0)) {
        return Vec::new();
    }
    let mut case = 0usize;
    for (i, corner) in corners.iter().enumerate() {
        if corner.tsdf < 0.0 {
            case |= 1 << i;
        }
    }
    if EDGE_TABLE[case] == 0 {
        return Vec::new();
    }
    let mut cache: [Option<Option<MeshVertex>>; 12] = [None; 12];
    let mut resolve = |edge: usize| -> Option<MeshVertex> {
        if cache[edge].is_none() {
            let (a, b) = EDGE_ENDPOINTS[edge];
            cache[edge] = Some(edge_vertex(&corners[a], &corners[b]));
        }
        cache[edge].unwrap()
    };
    let row = &TRIANGLE_TABLE[case];
    let mut triangles = Vec::new();
    for tri in row.chunks(3) {
        if tri[0] < 0 {
            break;
        }
        let a = resolve(tri[0] as usize);
        let b = resolve(tri[1] as usize);
        let c = resolve(tri[2] as usize);
        if let (Some(a), Some(b), Some(c)) = (a, b, c) {
            triangles.push([a, b, c]);
        }
    }
    triangles
}

/// Reads the voxel sample backing one cube corner position.
///
/// The request names the resolution the surrounding cube is meshed at.
/// A cell answers at the finest granularity it stores, no finer than the
/// request: a split cell serves the child covering the position, an
/// unsplit cell serves its coarse voxel, and a `Coarse` request always
/// reads the coarse voxel itself. The fallback is purely one of
/// granularity; an unobserved voxel at the serving granularity makes the
/// corner absent rather than degrading to coarser data, so meshes never
/// fabricate geometry where the serving resolution has no observations.
/// Whatever voxel answers, its own center becomes the sample position.
pub fn fetch_corner(
    map: &AdaptiveVoxelMap,
    position: &Point3<f64>,
    requested: QualityLevel,
) -> Option<CornerSample> {
    let g = grid_key(position, map.sizes().size(requested));
    fetch_corner_at(map, &g, requested)
}

/// Index-based corner lookup shared by [`fetch_corner`] and the extractor.
///
/// `g` names a voxel on the global grid of the requested resolution, which
/// keeps cell resolution exact for corners on cell boundaries.
fn fetch_corner_at(
    map: &AdaptiveVoxelMap,
    g: &[i64; 3],
    requested: QualityLevel,
) -> Option<CornerSample> {
    let sizes = map.sizes();
    let r = sizes.children_per_axis(requested) as i64;
    let cidx = [
        g[0].div_euclid(r),
        g[1].div_euclid(r),
        g[2].div_euclid(r),
    ];
    let cell = map.cell(&cidx)?;
    let label = cell.semantics.best().map_or(0, |(l, _)| l);
    if requested != QualityLevel::Coarse {
        if let (Some(level), Some(children)) = (cell.children_level, cell.children.as_deref()) {
            let rc = sizes.children_per_axis(level) as i64;
            let off = [
                (g[0].rem_euclid(r) * rc).div_euclid(r),
                (g[1].rem_euclid(r) * rc).div_euclid(r),
                (g[2].rem_euclid(r) * rc).div_euclid(r),
            ];
            let child = &children[((off[0] * rc + off[1]) * rc + off[2]) as usize];
            if !child.observed() {
                return None;
            }
            let global = [cidx[0] * rc + off[0], cidx[1] * rc + off[1], cidx[2] * rc + off[2]];
            return Some(CornerSample {
                position: voxel_center(&global, sizes.size(level)),
                tsdf: child.tsdf,
                weight: child.weight,
                source_level: level,
                color: child.color,
                label,
            });
        }
    }
    if cell.voxel.observed() {
        return Some(CornerSample {
            position: voxel_center(&cidx, sizes.size(QualityLevel::Coarse)),
            tsdf: cell.voxel.tsdf,
            weight: cell.voxel.weight,
            source_level: QualityLevel::Coarse,
            color: cell.voxel.color,
            label,
        });
    }
    None
}

/// Extracts the surface of an adaptive map as a welded triangle mesh.
///
/// Every cell meshes the cube grid between its own voxel centers and the
/// centers of its +x, +y and +z neighbors, so each cube in the map is
/// emitted by exactly one cell. Regions along a forward boundary are
/// meshed at the finest resolution among the cells they span, with
/// [`fetch_corner`] substituting coarser samples where a cell cannot serve
/// the request.
pub fn extract_mesh(map: &AdaptiveVoxelMap) -> Mesh {
    let mut builder = MeshBuilder::default();
    let side = map.block_side() as i64;
    for bidx in map.sorted_block_indices() {
        let Some(block) = map.block(&bidx) else {
            continue;
        };
        for (flat, cell) in block.cells().iter().enumerate() {
            let f = flat as i64;
            let cidx = [
                bidx[0] * side + f / (side * side),
                bidx[1] * side + (f / side) % side,
                bidx[2] * side + f % side,
            ];
            mesh_cell(map, &cidx, cell, &mut builder);
        }
    }
    builder.finish()
}

/// Meshes the cube grid owned by one coarse cell.
fn mesh_cell(
    map: &AdaptiveVoxelMap,
    cidx: &[i64; 3],
    cell: &CoarseVoxelCell,
    builder: &mut MeshBuilder,
) {
    let sizes = map.sizes();
    let own = cell.current_level();
    let r = sizes.children_per_axis(own) as i64;
    // Resolution of the seven forward cells, indexed by direction bits.
    let mut forward = [QualityLevel::Coarse; 8];
    forward[0] = own;
    for (mask, level) in forward.iter_mut().enumerate().skip(1) {
        let n = [
            cidx[0] + (mask & 1) as i64,
            cidx[1] + ((mask >> 1) & 1) as i64,
            cidx[2] + ((mask >> 2) & 1) as i64,
        ];
        *level = map.cell(&n).map_or(QualityLevel::Coarse, CoarseVoxelCell::current_level);
    }
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                // Direction bits of the forward boundaries this cube touches.
                let smask = usize::from(i == r - 1)
                    | usize::from(j == r - 1) << 1
                    | usize::from(k == r - 1) << 2;
                let mut level = own;
                for (mask, &fwd) in forward.iter().enumerate().skip(1) {
                    if mask & smask == mask {
                        level = level.max(fwd);
                    }
                }
                let base = [cidx[0] * r + i, cidx[1] * r + j, cidx[2] * r + k];
                if level == own {
                    emit_cube(map, &base, level, builder);
                } else {
                    let q = (sizes.children_per_axis(level) / sizes.children_per_axis(own)) as i64;
                    for a in 0..q {
                        for b in 0..q {
                            for c in 0..q {
                                let sub = [base[0] * q + a, base[1] * q + b, base[2] * q + c];
                                emit_cube(map, &sub, level, builder);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Corner index pairs spanning the cube along each axis.
const AXIS_PAIRS: [[(usize, usize); 4]; 3] = [
    [(0, 1), (3, 2), (4, 5), (7, 6)],
    [(0, 3), (1, 2), (4, 7), (5, 6)],
    [(0, 4), (1, 5), (2, 6), (3, 7)],
];

/// Meshes one cube with its base corner at voxel `base` of `level`.
fn emit_cube(
    map: &AdaptiveVoxelMap,
    base: &[i64; 3],
    level: QualityLevel,
    builder: &mut MeshBuilder,
) {
    let mut corners = [None; 8];
    for (slot, off) in CORNER_OFFSETS.iter().enumerate() {
        let g = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
        corners[slot] = fetch_corner_at(map, &g, level);
        if corners[slot].is_none() {
            return;
        }
    }
    let corners = corners.map(|c| c.expect("checked above"));
    // A cube whose corner layers coincide along some axis has zero extent
    // there: its samples form a face already meshed by the straddling
    // cubes on either side, and tessellating the face again would paint a
    // spurious membrane into the surface. Skip it.
    for pairs in AXIS_PAIRS {
        if pairs
            .iter()
            .all(|&(a, b)| corners[a].position == corners[b].position)
        {
            return;
        }
    }
    for tri in marching_cubes_cell(&corners) {
        builder.add_triangle(&tri);
    }
}

/// Extracts the surface of a single-resolution map.
///
/// Applies the same cube tessellation as [`extract_mesh`] on the uniform
/// grid: one cube per stored voxel, spanning that voxel's center and the
/// centers of its seven forward neighbors. Cubes with an unobserved corner
/// are skipped. Corner samples report `Fine` granularity and carry no
/// semantic label.
pub fn extract_fixed_mesh(map: &FixedTsdfMap) -> Mesh {
    let mut builder = MeshBuilder::default();
    let size = map.voxel_size();
    for base in map.sorted_indices() {
        let mut corners = [None; 8];
        let mut complete = true;
        for (slot, off) in CORNER_OFFSETS.iter().enumerate() {
            let g = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
            match map.voxel(&g).filter(|v| v.observed()) {
                Some(v) => {
                    corners[slot] = Some(CornerSample {
                        position: voxel_center(&g, size),
                        tsdf: v.tsdf,
                        weight: v.weight,
                        source_level: QualityLevel::Fine,
                        color: v.color,
                        label: 0,
                    })
                }
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            continue;
        }
        let corners = corners.map(|c| c.expect("checked above"));
        for tri in marching_cubes_cell(&corners) {
            builder.add_triangle(&tri);
        }
    }
    builder.finish()
}

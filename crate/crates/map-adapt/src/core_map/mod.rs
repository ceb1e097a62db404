//! Adaptive multi-resolution voxel map.
//!
//! The map is a spatial hash of blocks, each holding `B^3` coarse voxel
//! cells. A cell always carries its coarse voxel (TSDF, weight, color,
//! geometric complexity) and a sparse semantic distribution; it may
//! additionally be split into `R^3` child voxels at middle or fine
//! resolution. Split cells keep integrating at coarse level so that merging
//! later never resurrects stale data.
//!
//! World-space addressing is pure floor arithmetic: a position maps to the
//! coarse index `floor(p / v_coarse)`, which splits into a block index and an
//! intra-block offset by Euclidean division.

pub mod semantics;
pub mod serialize;

pub use semantics::SemanticDistribution;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Point3;

use crate::error::{Error, Result};

/// Resolution tier of a voxel. Ordering is coarse-to-fine, so `max` picks the
/// finer requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QualityLevel {
    Coarse,
    Middle,
    Fine,
}

impl QualityLevel {
    pub const ALL: [QualityLevel; 3] = [
        QualityLevel::Coarse,
        QualityLevel::Middle,
        QualityLevel::Fine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QualityLevel::Coarse => "coarse",
            QualityLevel::Middle => "middle",
            QualityLevel::Fine => "fine",
        }
    }
}

impl fmt::Display for QualityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QualityLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "coarse" => Ok(QualityLevel::Coarse),
            "middle" => Ok(QualityLevel::Middle),
            "fine" => Ok(QualityLevel::Fine),
            other => Err(Error::validation(format!("unknown quality level '{other}'"))),
        }
    }
}

/// Edge lengths (meters) of the three voxel tiers. Coarser sizes must be
/// integer multiples of finer ones so that children tile their parent
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelSizes {
    pub coarse: f64,
    pub middle: f64,
    pub fine: f64,
}

impl Default for VoxelSizes {
    fn default() -> Self {
        VoxelSizes {
            coarse: 0.08,
            middle: 0.04,
            fine: 0.01,
        }
    }
}

impl VoxelSizes {
    pub fn new(coarse: f64, middle: f64, fine: f64) -> Result<Self> {
        let sizes = VoxelSizes {
            coarse,
            middle,
            fine,
        };
        sizes.validate()?;
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fine > 0.0 && self.middle >= self.fine && self.coarse >= self.middle) {
            return Err(Error::validation(format!(
                "voxel sizes must satisfy 0 < fine <= middle <= coarse, got {} {} {}",
                self.coarse, self.middle, self.fine
            )));
        }
        for (a, b, what) in [
            (self.coarse, self.middle, "coarse/middle"),
            (self.middle, self.fine, "middle/fine"),
        ] {
            let ratio = a / b;
            if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
                return Err(Error::validation(format!(
                    "{what} ratio {ratio} is not a positive integer"
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self, level: QualityLevel) -> f64 {
        match level {
            QualityLevel::Coarse => self.coarse,
            QualityLevel::Middle => self.middle,
            QualityLevel::Fine => self.fine,
        }
    }

    /// Children per axis when a coarse cell is split to `level`.
    pub fn children_per_axis(&self, level: QualityLevel) -> usize {
        (self.coarse / self.size(level)).round() as usize
    }
}

/// Saturation cap for integration weights (TSDF and complexity alike).
/// Caps the influence of history so the map can still adapt to change.
pub const MAX_WEIGHT: f64 = 1.0e4;

/// Why a cell is currently split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitCause {
    None,
    Semantic,
    Geometric,
    Neighbor,
}

/// One voxel's accumulated state. `g` is the running geometric complexity
/// estimate with its own saturating weight; children leave both at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    pub tsdf: f64,
    pub weight: f64,
    pub color: [f32; 3],
    pub g: f64,
    pub g_weight: f64,
}

impl Default for Voxel {
    fn default() -> Self {
        Voxel {
            tsdf: 0.0,
            weight: 0.0,
            color: [0.0; 3],
            g: 0.0,
            g_weight: 0.0,
        }
    }
}

impl Voxel {
    pub fn observed(&self) -> bool {
        self.weight > 0.0
    }
}

/// Result of asking a cell to move toward a target level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionOutcome {
    Split,
    Merged,
    Unchanged,
}

/// A coarse voxel cell: the always-present coarse voxel, its semantic belief,
/// and (when split) a dense array of child voxels at one finer level.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseVoxelCell {
    pub voxel: Voxel,
    pub semantics: SemanticDistribution,
    pub children_level: Option<QualityLevel>,
    pub children: Option<Box<[Voxel]>>,
    pub split_cause: SplitCause,
}

impl CoarseVoxelCell {
    pub fn new(n_labels: u32) -> Self {
        CoarseVoxelCell {
            voxel: Voxel::default(),
            semantics: SemanticDistribution::new(n_labels),
            children_level: None,
            children: None,
            split_cause: SplitCause::None,
        }
    }

    /// The level this cell currently represents geometry at.
    pub fn current_level(&self) -> QualityLevel {
        self.children_level.unwrap_or(QualityLevel::Coarse)
    }

    pub fn is_split(&self) -> bool {
        self.children_level.is_some()
    }

    /// Whether the cell holds any state worth keeping or serializing.
    pub fn occupied(&self) -> bool {
        self.voxel.weight > 0.0 || self.children_level.is_some()
    }

    /// Level this cell wants to be at: the finer of the best label's
    /// requirement (default level when unlabeled) and, in geometry-aware
    /// mode, the complexity tier of the accumulated `g`.
    pub fn target_level(&self, policy: &QualityPolicy) -> QualityLevel {
        let semantic = self.semantic_target(policy);
        let geometric = if policy.use_geometry {
            policy.geometric_level(self.voxel.g)
        } else {
            QualityLevel::Coarse
        };
        semantic.max(geometric)
    }

    pub(crate) fn semantic_target(&self, policy: &QualityPolicy) -> QualityLevel {
        match self.semantics.best() {
            Some((label, _)) => policy.level_for_label(label),
            None => policy.default_level,
        }
    }

    /// Split toward a finer level or merge toward a coarser one.
    ///
    /// Splitting re-subdivides existing children in place. Merging discards
    /// children and falls back to the continuously maintained coarse voxel;
    /// it is refused while the best label is uncertain (below the policy's
    /// merge confidence) or while the split only exists for a neighbor's
    /// sake.
    pub fn apply_level_transition(
        &mut self,
        level: QualityLevel,
        policy: &QualityPolicy,
        sizes: &VoxelSizes,
    ) -> TransitionOutcome {
        let current = self.current_level();
        if level > current {
            let cause = if self.semantic_target(policy) >= level {
                SplitCause::Semantic
            } else {
                SplitCause::Geometric
            };
            self.split_to(level, cause, sizes);
            TransitionOutcome::Split
        } else if level < current {
            let confident = self
                .semantics
                .best()
                .map(|(_, p)| p >= policy.merge_confidence)
                .unwrap_or(false);
            if confident && self.split_cause != SplitCause::Neighbor {
                self.children = None;
                self.children_level = None;
                self.split_cause = SplitCause::None;
                TransitionOutcome::Merged
            } else {
                TransitionOutcome::Unchanged
            }
        } else {
            TransitionOutcome::Unchanged
        }
    }

    /// Allocate or refine children so the cell represents `level`.
    ///
    /// Fresh children copy the parent's TSDF/weight/color; when children
    /// already exist at a coarser level, each old child is copied into the
    /// new children covering its volume.
    pub(crate) fn split_to(
        &mut self,
        level: QualityLevel,
        cause: SplitCause,
        sizes: &VoxelSizes,
    ) {
        debug_assert!(level > self.current_level());
        let r_new = sizes.children_per_axis(level);
        let template = Voxel {
            tsdf: self.voxel.tsdf,
            weight: self.voxel.weight,
            color: self.voxel.color,
            g: 0.0,
            g_weight: 0.0,
        };
        let new_children: Box<[Voxel]> = match (&self.children, self.children_level) {
            (Some(old), Some(old_level)) => {
                let r_old = sizes.children_per_axis(old_level);
                let mut out = vec![Voxel::default(); r_new * r_new * r_new];
                for i in 0..r_new {
                    for j in 0..r_new {
                        for k in 0..r_new {
                            let oi = i * r_old / r_new;
                            let oj = j * r_old / r_new;
                            let ok = k * r_old / r_new;
                            out[(i * r_new + j) * r_new + k] =
                                old[(oi * r_old + oj) * r_old + ok];
                        }
                    }
                }
                out.into_boxed_slice()
            }
            _ => vec![template; r_new * r_new * r_new].into_boxed_slice(),
        };
        self.children = Some(new_children);
        self.children_level = Some(level);
        self.split_cause = cause;
    }
}

/// Quality requirements: which level each semantic label deserves, the
/// complexity thresholds, and the merge confidence gate.
#[derive(Debug, Clone)]
pub struct QualityPolicy {
    pub label_level: HashMap<u16, QualityLevel>,
    pub default_level: QualityLevel,
    pub theta_middle: f64,
    pub theta_fine: f64,
    pub merge_confidence: f64,
    /// SG mode: let geometric complexity raise the target level.
    pub use_geometry: bool,
}

impl Default for QualityPolicy {
    fn default() -> Self {
        QualityPolicy {
            label_level: HashMap::new(),
            default_level: QualityLevel::Coarse,
            theta_middle: 0.05,
            theta_fine: 0.1,
            merge_confidence: 0.95,
            use_geometry: false,
        }
    }
}

impl QualityPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_middle > 0.0 && self.theta_fine >= self.theta_middle) {
            return Err(Error::validation(format!(
                "complexity thresholds must satisfy 0 < theta_middle <= theta_fine, got {} {}",
                self.theta_middle, self.theta_fine
            )));
        }
        if !(self.merge_confidence > 0.0 && self.merge_confidence <= 1.0) {
            return Err(Error::validation(format!(
                "merge confidence {} outside (0, 1]",
                self.merge_confidence
            )));
        }
        Ok(())
    }

    pub fn level_for_label(&self, label: u16) -> QualityLevel {
        self.label_level
            .get(&label)
            .copied()
            .unwrap_or(self.default_level)
    }

    /// Complexity tier: `g >= theta_fine` is fine, `>= theta_middle` middle.
    pub fn geometric_level(&self, g: f64) -> QualityLevel {
        if g >= self.theta_fine {
            QualityLevel::Fine
        } else if g >= self.theta_middle {
            QualityLevel::Middle
        } else {
            QualityLevel::Coarse
        }
    }

    /// FNV-1a over the canonical form, stamped into map files so a map can be
    /// traced back to the policy that built it.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        let mut entries: Vec<(u16, QualityLevel)> =
            self.label_level.iter().map(|(&l, &v)| (l, v)).collect();
        entries.sort_unstable();
        for (label, level) in entries {
            eat(&label.to_le_bytes());
            eat(&[level as u8]);
        }
        eat(&[self.default_level as u8, u8::from(self.use_geometry)]);
        eat(&self.theta_middle.to_le_bytes());
        eat(&self.theta_fine.to_le_bytes());
        eat(&self.merge_confidence.to_le_bytes());
        h
    }
}

/// A block of `side^3` coarse cells, the unit of spatial hashing.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    cells: Vec<CoarseVoxelCell>,
}

impl Block {
    fn new(side: usize, n_labels: u32) -> Self {
        Block {
            cells: vec![CoarseVoxelCell::new(n_labels); side * side * side],
        }
    }

    pub fn cell(&self, flat: usize) -> &CoarseVoxelCell {
        &self.cells[flat]
    }

    pub fn cell_mut(&mut self, flat: usize) -> &mut CoarseVoxelCell {
        &mut self.cells[flat]
    }

    pub fn cells(&self) -> &[CoarseVoxelCell] {
        &self.cells
    }
}

pub const DEFAULT_BLOCK_SIDE: usize = 8;

/// The adaptive map: voxel sizes, label-table size, and a hash of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveVoxelMap {
    sizes: VoxelSizes,
    block_side: usize,
    n_labels: u32,
    blocks: HashMap<[i64; 3], Block>,
}

impl AdaptiveVoxelMap {
    pub fn new(sizes: VoxelSizes, n_labels: u32) -> Result<Self> {
        Self::with_block_side(sizes, n_labels, DEFAULT_BLOCK_SIDE)
    }

    pub fn with_block_side(sizes: VoxelSizes, n_labels: u32, block_side: usize) -> Result<Self> {
        sizes.validate()?;
        if n_labels < 2 {
            return Err(Error::validation("label table needs at least two labels"));
        }
        if block_side == 0 {
            return Err(Error::validation("block side must be positive"));
        }
        Ok(AdaptiveVoxelMap {
            sizes,
            block_side,
            n_labels,
            blocks: HashMap::new(),
        })
    }

    pub fn sizes(&self) -> &VoxelSizes {
        &self.sizes
    }

    pub fn n_labels(&self) -> u32 {
        self.n_labels
    }

    pub fn block_side(&self) -> usize {
        self.block_side
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, index: &[i64; 3]) -> Option<&Block> {
        self.blocks.get(index)
    }

    /// Block indices in lexicographic order; every deterministic traversal
    /// (serialization, meshing, statistics) goes through this.
    pub fn sorted_block_indices(&self) -> Vec<[i64; 3]> {
        let mut indices: Vec<[i64; 3]> = self.blocks.keys().copied().collect();
        indices.sort_unstable();
        indices
    }

    /// Coarse grid index containing a world position.
    pub fn coarse_index(&self, p: &Point3<f64>) -> [i64; 3] {
        let v = self.sizes.coarse;
        [
            (p.x / v).floor() as i64,
            (p.y / v).floor() as i64,
            (p.z / v).floor() as i64,
        ]
    }

    pub fn coarse_center(&self, idx: &[i64; 3]) -> Point3<f64> {
        let v = self.sizes.coarse;
        Point3::new(
            (idx[0] as f64 + 0.5) * v,
            (idx[1] as f64 + 0.5) * v,
            (idx[2] as f64 + 0.5) * v,
        )
    }

    /// Split a coarse index into (block index, flat in-block offset).
    pub fn block_and_offset(&self, idx: &[i64; 3]) -> ([i64; 3], usize) {
        let b = self.block_side as i64;
        let block = [
            idx[0].div_euclid(b),
            idx[1].div_euclid(b),
            idx[2].div_euclid(b),
        ];
        let off = [
            idx[0].rem_euclid(b) as usize,
            idx[1].rem_euclid(b) as usize,
            idx[2].rem_euclid(b) as usize,
        ];
        let flat = (off[0] * self.block_side + off[1]) * self.block_side + off[2];
        (block, flat)
    }

    pub fn cell(&self, idx: &[i64; 3]) -> Option<&CoarseVoxelCell> {
        let (block, flat) = self.block_and_offset(idx);
        self.blocks.get(&block).map(|b| b.cell(flat))
    }

    pub fn cell_mut(&mut self, idx: &[i64; 3]) -> Option<&mut CoarseVoxelCell> {
        let (block, flat) = self.block_and_offset(idx);
        self.blocks.get_mut(&block).map(|b| b.cell_mut(flat))
    }

    /// Get-or-create the cell at a coarse index. Allocation is idempotent:
    /// the same index always resolves to the same cell.
    pub fn allocate_cell(&mut self, idx: &[i64; 3]) -> &mut CoarseVoxelCell {
        let (block, flat) = self.block_and_offset(idx);
        let side = self.block_side;
        let n_labels = self.n_labels;
        self.blocks
            .entry(block)
            .or_insert_with(|| Block::new(side, n_labels))
            .cell_mut(flat)
    }

    pub fn cell_at(&self, p: &Point3<f64>) -> Option<&CoarseVoxelCell> {
        self.cell(&self.coarse_index(p))
    }

    pub fn allocate_cell_at(&mut self, p: &Point3<f64>) -> &mut CoarseVoxelCell {
        let idx = self.coarse_index(p);
        self.allocate_cell(&idx)
    }

    /// World center of child `(i, j, k)` of the cell at `coarse_idx`, at the
    /// cell's child level `level`.
    pub fn child_center(
        &self,
        coarse_idx: &[i64; 3],
        level: QualityLevel,
        child: [usize; 3],
    ) -> Point3<f64> {
        let v = self.sizes.size(level);
        let origin = [
            coarse_idx[0] as f64 * self.sizes.coarse,
            coarse_idx[1] as f64 * self.sizes.coarse,
            coarse_idx[2] as f64 * self.sizes.coarse,
        ];
        Point3::new(
            origin[0] + (child[0] as f64 + 0.5) * v,
            origin[1] + (child[1] as f64 + 0.5) * v,
            origin[2] + (child[2] as f64 + 0.5) * v,
        )
    }

    /// Split a global level-`level` voxel index into its coarse cell index
    /// and the child offset inside that cell.
    pub fn split_level_index(
        &self,
        idx: &[i64; 3],
        level: QualityLevel,
    ) -> ([i64; 3], [usize; 3]) {
        let r = self.sizes.children_per_axis(level) as i64;
        let coarse = [
            idx[0].div_euclid(r),
            idx[1].div_euclid(r),
            idx[2].div_euclid(r),
        ];
        let child = [
            idx[0].rem_euclid(r) as usize,
            idx[1].rem_euclid(r) as usize,
            idx[2].rem_euclid(r) as usize,
        ];
        (coarse, child)
    }

    /// Split every coarse neighbor (26-connected) of `idx` that is coarser
    /// than `level` up to `level`, marking them as neighbor-caused. Returns
    /// how many cells were newly split or refined. Not recursive: the
    /// neighbors' own neighbors are left alone.
    pub fn propagate_neighbor_split(&mut self, idx: &[i64; 3], level: QualityLevel) -> usize {
        let sizes = self.sizes;
        let mut count = 0;
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let nidx = [idx[0] + dx, idx[1] + dy, idx[2] + dz];
                    let cell = self.allocate_cell(&nidx);
                    if cell.current_level() < level {
                        cell.split_to(level, SplitCause::Neighbor, &sizes);
                        count += 1;
                    }
                }
            }
        }
        count
    }

    /// True when any 26-neighbor of `idx` is split at `level` or finer;
    /// neighbor-caused splits must persist while this holds.
    pub fn neighbor_requires_split(&self, idx: &[i64; 3], level: QualityLevel) -> bool {
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let nidx = [idx[0] + dx, idx[1] + dy, idx[2] + dz];
                    if let Some(cell) = self.cell(&nidx) {
                        if cell.is_split() && cell.current_level() >= level {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Deterministic size accounting, equal by construction to the size of
    /// the serialized map file:
    ///
    /// - 52-byte header;
    /// - per block: 24-byte index + occupancy bitmap (`ceil(side^3 / 8)`);
    /// - per occupied cell: 44-byte coarse voxel record, semantic record
    ///   (2 + 10 per stored label + 8), 2 bytes of split state, and, when
    ///   split, 28 bytes per child voxel.
    pub fn memory_bytes(&self) -> u64 {
        let mut total = serialize::HEADER_BYTES as u64;
        let bitmap = self.block_side.pow(3).div_ceil(8) as u64;
        for block in self.blocks.values() {
            total += 24 + bitmap;
            for cell in block.cells() {
                if !cell.occupied() {
                    continue;
                }
                total += serialize::cell_bytes(cell, &self.sizes);
            }
        }
        total
    }

    /// Occupied-cell counts by current level, plus split-cause counts
    /// (semantic, geometric, neighbor).
    pub fn level_histogram(&self) -> LevelHistogram {
        let mut h = LevelHistogram::default();
        for block in self.blocks.values() {
            for cell in block.cells() {
                if !cell.occupied() {
                    continue;
                }
                match cell.current_level() {
                    QualityLevel::Coarse => h.coarse_cells += 1,
                    QualityLevel::Middle => h.middle_cells += 1,
                    QualityLevel::Fine => h.fine_cells += 1,
                }
                match cell.split_cause {
                    SplitCause::Semantic => h.semantic_splits += 1,
                    SplitCause::Geometric => h.geometric_splits += 1,
                    SplitCause::Neighbor => h.neighbor_splits += 1,
                    SplitCause::None => {}
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LevelHistogram {
    pub coarse_cells: usize,
    pub middle_cells: usize,
    pub fine_cells: usize,
    pub semantic_splits: usize,
    pub geometric_splits: usize,
    pub neighbor_splits: usize,
}

impl LevelHistogram {
    /// Volume share per level in percent, each cell weighted by the cube of
    /// its representative voxel size (children of a split cell tile the cell
    /// exactly, so a cell's volume is independent of its level; shares are
    /// therefore cell-count shares).
    pub fn volume_percentages(&self) -> [f64; 3] {
        let total = (self.coarse_cells + self.middle_cells + self.fine_cells) as f64;
        if total == 0.0 {
            return [0.0; 3];
        }
        [
            self.coarse_cells as f64 / total * 100.0,
            self.middle_cells as f64 / total * 100.0,
            self.fine_cells as f64 / total * 100.0,
        ]
    }
}

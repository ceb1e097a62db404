//! Binary map files.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! header (52 bytes):
//!   magic    8  b"MAPADAPT"
//!   version  u32
//!   sizes    3 x f64   coarse, middle, fine edge lengths
//!   n_labels u32
//!   side     u32       block side (coarse cells per axis)
//!   policy   u64       hash of the quality policy that built the map
//! blocks, sorted by index, until end of file:
//!   index    3 x i64
//!   bitmap   ceil(side^3 / 8) bytes, bit i = cell i occupied
//!   per occupied cell, in flat index order:
//!     coarse voxel: tsdf f64, weight f64, color 3 x f32, g f64, g_weight f64
//!     semantics:    len u16, len x (label u16, prob f64), remainder f64
//!     split state:  children_level u8 (0 none, 1 middle, 2 fine), cause u8
//!     children:     R^3 x (tsdf f64, weight f64, color 3 x f32)  when split
//! ```
//!
//! Writing is deterministic: the same map and policy hash always produce the
//! same bytes. `AdaptiveVoxelMap::memory_bytes` mirrors this layout, so the
//! reported footprint equals the file size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    AdaptiveVoxelMap, CoarseVoxelCell, QualityLevel, SemanticDistribution, SplitCause, Voxel,
    VoxelSizes,
};
use crate::error::{Error, Result};

pub const MAP_MAGIC: &[u8; 8] = b"MAPADAPT";
pub const MAP_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 52;

/// Serialized size of one occupied cell.
pub(crate) fn cell_bytes(cell: &CoarseVoxelCell, sizes: &VoxelSizes) -> u64 {
    let mut n = 44 + 2 + 10 * cell.semantics.stored_len() as u64 + 8 + 2;
    if let Some(level) = cell.children_level {
        n += 28 * sizes.children_per_axis(level).pow(3) as u64;
    }
    n
}

/// Serialize a map to bytes.
pub fn write_map_bytes(map: &AdaptiveVoxelMap, policy_hash: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.memory_bytes() as usize);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&MAP_VERSION.to_le_bytes());
    out.extend_from_slice(&map.sizes().coarse.to_le_bytes());
    out.extend_from_slice(&map.sizes().middle.to_le_bytes());
    out.extend_from_slice(&map.sizes().fine.to_le_bytes());
    out.extend_from_slice(&map.n_labels().to_le_bytes());
    out.extend_from_slice(&(map.block_side() as u32).to_le_bytes());
    out.extend_from_slice(&policy_hash.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_BYTES);

    let side = map.block_side();
    for index in map.sorted_block_indices() {
        let block = map.block(&index).expect("index from the map itself");
        out.extend_from_slice(&index[0].to_le_bytes());
        out.extend_from_slice(&index[1].to_le_bytes());
        out.extend_from_slice(&index[2].to_le_bytes());
        let mut bitmap = vec![0u8; side.pow(3).div_ceil(8)];
        for (flat, cell) in block.cells().iter().enumerate() {
            if cell.occupied() {
                bitmap[flat / 8] |= 1 << (flat % 8);
            }
        }
        out.extend_from_slice(&bitmap);
        for cell in block.cells() {
            if cell.occupied() {
                write_cell(&mut out, cell);
            }
        }
    }
    out
}

fn write_voxel_full(out: &mut Vec<u8>, v: &Voxel) {
    out.extend_from_slice(&v.tsdf.to_le_bytes());
    out.extend_from_slice(&v.weight.to_le_bytes());
    for c in v.color {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&v.g.to_le_bytes());
    out.extend_from_slice(&v.g_weight.to_le_bytes());
}

fn write_cell(out: &mut Vec<u8>, cell: &CoarseVoxelCell) {
    write_voxel_full(out, &cell.voxel);
    out.extend_from_slice(&(cell.semantics.stored_len() as u16).to_le_bytes());
    for (label, prob) in cell.semantics.stored() {
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(&prob.to_le_bytes());
    }
    out.extend_from_slice(&cell.semantics.remainder().to_le_bytes());
    out.push(match cell.children_level {
        None => 0,
        Some(QualityLevel::Middle) => 1,
        Some(QualityLevel::Fine) => 2,
        Some(QualityLevel::Coarse) => unreachable!("coarse cells have no children array"),
    });
    out.push(match cell.split_cause {
        SplitCause::None => 0,
        SplitCause::Semantic => 1,
        SplitCause::Geometric => 2,
        SplitCause::Neighbor => 3,
    });
    if let Some(children) = &cell.children {
        for child in children.iter() {
            out.extend_from_slice(&child.tsdf.to_le_bytes());
            out.extend_from_slice(&child.weight.to_le_bytes());
            for c in child.color {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
}

/// Write a map file. Returns the number of bytes written.
pub fn save_map(map: &AdaptiveVoxelMap, policy_hash: u64, path: &Path) -> Result<u64> {
    let bytes = write_map_bytes(map, policy_hash);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

struct MapReader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<'a, R: Read> MapReader<'a, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "unexpected end of file"))?;
        Ok(buf)
    }

    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.path, "unexpected end of file"))?;
        Ok(buf)
    }

    /// Read N bytes, or None on a clean end of file before the first byte.
    fn bytes_or_eof<const N: usize>(&mut self) -> Result<Option<[u8; N]>> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(Error::format(self.path, "truncated block record")),
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io(self.path, e)),
            }
        }
        Ok(Some(buf))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::format(self.path, message))
    }
}

/// Read a map from any byte source. Returns the map and the stored policy
/// hash.
pub fn read_map(reader: impl Read, path: &Path) -> Result<(AdaptiveVoxelMap, u64)> {
    let mut r = MapReader {
        inner: reader,
        path,
    };
    let magic: [u8; 8] = r.bytes()?;
    if &magic != MAP_MAGIC {
        return r.fail("not an adaptive map file (bad magic)");
    }
    let version = r.u32()?;
    if version != MAP_VERSION {
        return r.fail(format!("unsupported map version {version}"));
    }
    let sizes = VoxelSizes::new(r.f64()?, r.f64()?, r.f64()?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let n_labels = r.u32()?;
    let side = r.u32()? as usize;
    let policy_hash = r.u64()?;
    let mut map = AdaptiveVoxelMap::with_block_side(sizes, n_labels, side)
        .map_err(|e| Error::format(path, e.to_string()))?;

    let cells_per_block = side.pow(3);
    while let Some(ix) = r.bytes_or_eof::<8>()? {
        let index = [
            i64::from_le_bytes(ix),
            r.i64()?,
            r.i64()?,
        ];
        let bitmap = r.vec(cells_per_block.div_ceil(8))?;
        for flat in 0..cells_per_block {
            if bitmap[flat / 8] & (1 << (flat % 8)) == 0 {
                continue;
            }
            let cell = read_cell(&mut r, &sizes, n_labels)?;
            let global = [
                index[0] * side as i64 + (flat / (side * side)) as i64,
                index[1] * side as i64 + (flat / side % side) as i64,
                index[2] * side as i64 + (flat % side) as i64,
            ];
            *map.allocate_cell(&global) = cell;
        }
    }
    Ok((map, policy_hash))
}

fn read_cell<R: Read>(
    r: &mut MapReader<'_, R>,
    sizes: &VoxelSizes,
    n_labels: u32,
) -> Result<CoarseVoxelCell> {
    let voxel = Voxel {
        tsdf: r.f64()?,
        weight: r.f64()?,
        color: [r.f32()?, r.f32()?, r.f32()?],
        g: r.f64()?,
        g_weight: r.f64()?,
    };
    let len = r.u16()? as usize;
    if len as u32 >= n_labels {
        return r.fail(format!("semantic record stores {len} of {n_labels} labels"));
    }
    let mut labels = Vec::with_capacity(len);
    let mut probs = Vec::with_capacity(len);
    for _ in 0..len {
        labels.push(r.u16()?);
        probs.push(r.f64()?);
    }
    let remainder = r.f64()?;
    let semantics = SemanticDistribution::from_parts(labels, probs, remainder, n_labels)
        .map_err(|e| Error::format(r.path, e.to_string()))?;
    let children_level = match r.bytes::<1>()?[0] {
        0 => None,
        1 => Some(QualityLevel::Middle),
        2 => Some(QualityLevel::Fine),
        other => return r.fail(format!("invalid children level tag {other}")),
    };
    let split_cause = match r.bytes::<1>()?[0] {
        0 => SplitCause::None,
        1 => SplitCause::Semantic,
        2 => SplitCause::Geometric,
        3 => SplitCause::Neighbor,
        other => return r.fail(format!("invalid split cause tag {other}")),
    };
    if children_level.is_none() && split_cause != SplitCause::None {
        return r.fail("split cause recorded on an unsplit cell");
    }
    let children = match children_level {
        None => None,
        Some(level) => {
            let count = sizes.children_per_axis(level).pow(3);
            let mut children = Vec::with_capacity(count);
            for _ in 0..count {
                children.push(Voxel {
                    tsdf: r.f64()?,
                    weight: r.f64()?,
                    color: [r.f32()?, r.f32()?, r.f32()?],
                    g: 0.0,
                    g_weight: 0.0,
                });
            }
            Some(children.into_boxed_slice())
        }
    };
    Ok(CoarseVoxelCell {
        voxel,
        semantics,
        children_level,
        children,
        split_cause,
    })
}

/// Load a map file (see [`read_map`]).
pub fn load_map(path: &Path) -> Result<(AdaptiveVoxelMap, u64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_map(BufReader::new(file), path)
}

/// Peek at a file's 8-byte magic without consuming the file.
pub fn file_magic(path: &Path) -> Result<[u8; 8]> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "file too short for a map header"))?;
    Ok(magic)
}

//! Readers and writers for every on-disk artifact: depth and color images,
//! semantic rasters, trajectories, label tables, quality policies, runtime
//! configs, and the sequence manifest that ties a dataset together.
//!
//! Binary formats round-trip bit-exactly; text formats round-trip
//! value-exactly (floats are printed in shortest round-trip form).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};

use crate::core_map::{QualityLevel, QualityPolicy, VoxelSizes};
use crate::curvature::ComplexityConfig;
use crate::error::{Error, Result};
use crate::integrator::{Frame, FrameStats, IntegratorConfig, Intrinsics, PixelLabels};

/// Default depth scale: stored units are integer millimeters.
pub const DEFAULT_DEPTH_SCALE: f64 = 1e-3;

const SEMK_MAGIC: &[u8; 4] = b"SEMK";
const SEMK_VERSION: u32 = 1;

/// Camera geometry shared by every frame of a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraInfo {
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl CameraInfo {
    /// A symmetric pinhole camera with square pixels, the principal point at
    /// the image center, and the given vertical field of view in degrees.
    pub fn pinhole(width: usize, height: usize, vfov_degrees: f64) -> Result<CameraInfo> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if !(vfov_degrees > 0.0 && vfov_degrees < 180.0) {
            return Err(Error::validation(format!(
                "vertical field of view {vfov_degrees} must be in (0, 180) degrees"
            )));
        }
        let f = 0.5 * height as f64 / (0.5 * vfov_degrees.to_radians()).tan();
        Ok(CameraInfo {
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: 0.5 * width as f64,
                cy: 0.5 * height as f64,
            },
            width,
            height,
        })
    }
}

/// One frame's file references within a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub frame_id: u64,
    pub depth: PathBuf,
    pub color: PathBuf,
    pub semantics: PathBuf,
}

/// A dataset on disk: camera, scale, label table, trajectory, frame files.
/// All paths are stored relative to `root`.
#[derive(Debug, Clone)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub camera: CameraInfo,
    pub depth_scale: f64,
    pub n_labels: u32,
    pub label_table: PathBuf,
    pub poses: PathBuf,
    pub frames: Vec<FrameEntry>,
}

impl SequenceManifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Load one frame: depth, color, semantics, and its pose.
    pub fn load_frame(&self, index: usize, poses: &[(u64, Isometry3<f64>)]) -> Result<Frame> {
        let entry = self.frames.get(index).ok_or_else(|| {
            Error::validation(format!(
                "frame index {index} out of range ({} frames)",
                self.frames.len()
            ))
        })?;
        let (dw, dh, depth) = load_depth(&self.resolve(&entry.depth), self.depth_scale)?;
        let (cw, ch, color) = load_color(&self.resolve(&entry.color))?;
        let (sw, sh, labels) = load_semantics(&self.resolve(&entry.semantics))?;
        for (what, w, h) in [("depth", dw, dh), ("color", cw, ch), ("semantics", sw, sh)] {
            if (w, h) != (self.camera.width, self.camera.height) {
                return Err(Error::validation(format!(
                    "frame {}: {what} is {w}x{h}, manifest says {}x{}",
                    entry.frame_id, self.camera.width, self.camera.height
                )));
            }
        }
        let pose = poses
            .iter()
            .find(|(id, _)| *id == entry.frame_id)
            .map(|(_, p)| *p)
            .ok_or_else(|| {
                Error::validation(format!("no pose for frame {}", entry.frame_id))
            })?;
        Frame::new(
            self.camera.width,
            self.camera.height,
            depth,
            color,
            labels,
            pose,
            self.camera.intrinsics,
            entry.frame_id,
        )
    }

    /// Load the trajectory file referenced by this manifest.
    pub fn load_poses(&self) -> Result<Vec<(u64, Isometry3<f64>)>> {
        load_pose_file(&self.resolve(&self.poses))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    let mut file = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load a 16-bit grayscale PNG as depth in meters (`value * scale`).
/// Zero values stay zero and mean "invalid".
pub fn load_depth(path: &Path, scale: f64) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::format(
                path,
                format!(
                    "depth must be 16-bit single-channel PNG, found {:?}",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let depth = gray
        .into_raw()
        .into_iter()
        .map(|v| (f64::from(v) * scale) as f32)
        .collect();
    Ok((w, h, depth))
}

/// Write depth in meters as a 16-bit PNG (`round(m / scale)`, saturating).
pub fn save_depth(path: &Path, width: usize, height: usize, meters: &[f32], scale: f64) -> Result<()> {
    if meters.len() != width * height {
        return Err(Error::validation(format!(
            "depth buffer is {} values for a {width}x{height} image",
            meters.len()
        )));
    }
    let raw: Vec<u16> = meters
        .iter()
        .map(|&m| {
            if !m.is_finite() || m <= 0.0 {
                0
            } else {
                (f64::from(m) / scale).round().clamp(0.0, 65535.0) as u16
            }
        })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        width as u32,
        height as u32,
        raw,
    )
    .expect("sized buffer");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Load an 8-bit RGB PNG.
pub fn load_color(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let color = rgb.pixels().map(|p| p.0).collect();
    Ok((w, h, color))
}

pub fn save_color(path: &Path, width: usize, height: usize, color: &[[u8; 3]]) -> Result<()> {
    if color.len() != width * height {
        return Err(Error::validation(format!(
            "color buffer is {} pixels for a {width}x{height} image",
            color.len()
        )));
    }
    let raw: Vec<u8> = color.iter().flatten().copied().collect();
    let buf =
        image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::from_raw(width as u32, height as u32, raw)
            .expect("sized buffer");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Load a semantic raster: per-pixel top-k `(label, probability)` lists.
///
/// Layout: magic `SEMK`, u32 version, u32 width, u32 height, u8 k (at most
/// 4), then `height * width` records of k little-endian `(u16, f32)` pairs,
/// zero-padded, probabilities descending. Entries with probability at or
/// below the score floor are treated as absent.
pub fn load_semantics(path: &Path) -> Result<(usize, usize, Vec<PixelLabels>)> {
    let bytes = read_bytes(path)?;
    let fmt = |message: String| Error::format(path, message);
    if bytes.len() < 13 {
        return Err(fmt("truncated header".into()));
    }
    if &bytes[..4] != SEMK_MAGIC {
        return Err(fmt("bad magic, not a semantic raster".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SEMK_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 17 {
        return Err(fmt("truncated header".into()));
    }
    let k = bytes[16] as usize;
    if k > 4 {
        return Err(fmt(format!("k = {k} exceeds the top-4 limit")));
    }
    let body = &bytes[17..];
    let record = k * 6;
    if body.len() != width * height * record {
        return Err(fmt(format!(
            "expected {} record bytes, found {}",
            width * height * record,
            body.len()
        )));
    }
    let mut out = Vec::with_capacity(width * height);
    for (pixel, rec) in body.chunks_exact(record.max(1)).enumerate() {
        if record == 0 {
            out.push(PixelLabels::empty());
            continue;
        }
        let mut entries = Vec::with_capacity(k);
        for pair in rec.chunks_exact(6) {
            let label = u16::from_le_bytes(pair[0..2].try_into().unwrap());
            let prob = f32::from_le_bytes(pair[2..6].try_into().unwrap());
            if prob > 1.0 {
                return Err(fmt(format!("pixel {pixel}: probability {prob} above 1")));
            }
            if prob > PixelLabels::MIN_SCORE {
                entries.push((label, prob));
            }
        }
        let labels = PixelLabels::from_sorted(&entries)
            .map_err(|e| fmt(format!("pixel {pixel}: {e}")))?;
        out.push(labels);
    }
    // A zero-k raster still carries its dimensions; the record loop above
    // only runs when there are bytes to chunk.
    if record == 0 {
        out = vec![PixelLabels::empty(); width * height];
    }
    Ok((width, height, out))
}

pub fn save_semantics(
    path: &Path,
    width: usize,
    height: usize,
    labels: &[PixelLabels],
) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::validation(format!(
            "semantic buffer is {} pixels for a {width}x{height} raster",
            labels.len()
        )));
    }
    let k = labels.iter().map(|l| l.len()).max().unwrap_or(0).max(1);
    let mut bytes = Vec::with_capacity(17 + labels.len() * k * 6);
    bytes.extend_from_slice(SEMK_MAGIC);
    bytes.extend_from_slice(&SEMK_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(width as u32).to_le_bytes());
    bytes.extend_from_slice(&(height as u32).to_le_bytes());
    bytes.push(k as u8);
    for pixel in labels {
        let entries = pixel.entries();
        for slot in 0..k {
            let (label, prob) = entries.get(slot).copied().unwrap_or((0, 0.0));
            bytes.extend_from_slice(&label.to_le_bytes());
            bytes.extend_from_slice(&prob.to_le_bytes());
        }
    }
    write_bytes(path, &bytes)
}

/// Load a TUM-style trajectory: `id tx ty tz qx qy qz qw` per line.
/// Quaternions must be unit within 1e-3 and are renormalized.
pub fn load_pose_file(path: &Path) -> Result<Vec<(u64, Isometry3<f64>)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let fail = |message: String| {
            Error::format(path, format!("line {}: {message}", lineno + 1))
        };
        if fields.len() != 8 {
            return Err(fail(format!("expected 8 fields, found {}", fields.len())));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| fail(format!("bad frame id '{}'", fields[0])))?;
        let mut v = [0f64; 7];
        for (slot, field) in v.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse()
                .map_err(|_| fail(format!("bad number '{field}'")))?;
        }
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(fail(format!("quaternion norm {} too far from 1", q.norm())));
        }
        let rotation = UnitQuaternion::from_quaternion(q);
        let pose = Isometry3::from_parts(Translation3::new(v[0], v[1], v[2]), rotation);
        out.push((id, pose));
    }
    Ok(out)
}

pub fn save_pose_file(path: &Path, poses: &[(u64, Isometry3<f64>)]) -> Result<()> {
    let mut text = String::new();
    for (id, pose) in poses {
        let t = pose.translation;
        let q = pose.rotation.quaternion();
        writeln!(
            text,
            "{id} {} {} {} {} {} {} {}",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .expect("string write");
    }
    write_bytes(path, text.as_bytes())
}

/// Load a quality policy: `label_id,level` lines plus `theta_middle=`,
/// `theta_fine=`, `merge_confidence=`, `default=` and `mode=S|SG` headers.
pub fn load_policy(path: &Path) -> Result<QualityPolicy> {
    let text = read_text(path)?;
    let mut policy = QualityPolicy::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| {
            Error::format(path, format!("line {}: {message}", lineno + 1))
        };
        if let Some((key, value)) = line.split_once('=') {
            let (key, value) = (key.trim(), value.trim());
            match key {
                "theta_middle" => {
                    policy.theta_middle =
                        value.parse().map_err(|_| fail(format!("bad float '{value}'")))?
                }
                "theta_fine" => {
                    policy.theta_fine =
                        value.parse().map_err(|_| fail(format!("bad float '{value}'")))?
                }
                "merge_confidence" => {
                    policy.merge_confidence =
                        value.parse().map_err(|_| fail(format!("bad float '{value}'")))?
                }
                "default" => policy.default_level = QualityLevel::from_str(value)?,
                "mode" => {
                    policy.use_geometry = match value {
                        "S" => false,
                        "SG" => true,
                        other => return Err(fail(format!("mode must be S or SG, got '{other}'"))),
                    }
                }
                other => return Err(fail(format!("unknown key '{other}'"))),
            }
        } else if let Some((label, level)) = line.split_once(',') {
            let label: u16 = label
                .trim()
                .parse()
                .map_err(|_| fail(format!("bad label id '{label}'")))?;
            let level = QualityLevel::from_str(level)?;
            if policy.label_level.insert(label, level).is_some() {
                return Err(fail(format!("duplicate label {label}")));
            }
        } else {
            return Err(fail(format!("unrecognized line '{line}'")));
        }
    }
    policy.validate()?;
    Ok(policy)
}

pub fn save_policy(path: &Path, policy: &QualityPolicy) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "mode={}", if policy.use_geometry { "SG" } else { "S" }).unwrap();
    writeln!(text, "default={}", policy.default_level.name()).unwrap();
    writeln!(text, "theta_middle={}", policy.theta_middle).unwrap();
    writeln!(text, "theta_fine={}", policy.theta_fine).unwrap();
    writeln!(text, "merge_confidence={}", policy.merge_confidence).unwrap();
    let mut entries: Vec<(u16, QualityLevel)> =
        policy.label_level.iter().map(|(&l, &v)| (l, v)).collect();
    entries.sort_unstable();
    for (label, level) in entries {
        writeln!(text, "{label},{}", level.name()).unwrap();
    }
    write_bytes(path, text.as_bytes())
}

/// Load a label table: `id,name` lines, ids dense from 0.
pub fn load_label_table(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut entries: Vec<(u16, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| {
            Error::format(path, format!("line {}: {message}", lineno + 1))
        };
        let (id, name) = line
            .split_once(',')
            .ok_or_else(|| fail(format!("expected 'id,name', got '{line}'")))?;
        let id: u16 = id
            .trim()
            .parse()
            .map_err(|_| fail(format!("bad label id '{id}'")))?;
        entries.push((id, name.trim().to_string()));
    }
    entries.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in entries.iter().enumerate() {
        if *id as usize != expect {
            return Err(Error::format(
                path,
                format!("label ids must be dense from 0; missing {expect}"),
            ));
        }
    }
    Ok(entries.into_iter().map(|(_, name)| name).collect())
}

pub fn save_label_table(path: &Path, names: &[String]) -> Result<()> {
    let mut text = String::new();
    for (id, name) in names.iter().enumerate() {
        writeln!(text, "{id},{name}").unwrap();
    }
    write_bytes(path, text.as_bytes())
}

/// Runtime configuration carried as a key=value text file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub integrator: IntegratorConfig,
    pub complexity: ComplexityConfig,
    pub sizes: VoxelSizes,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            integrator: IntegratorConfig::default(),
            complexity: ComplexityConfig::default(),
            sizes: VoxelSizes::default(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = read_text(path)?;
    let mut config = RunConfig::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| {
            Error::format(path, format!("line {}: {message}", lineno + 1))
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("expected key=value, got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || fail(format!("bad value '{value}' for {key}"));
        match key {
            "truncation" => config.integrator.truncation = value.parse().map_err(|_| bad())?,
            "w_max" => config.integrator.w_max = value.parse().map_err(|_| bad())?,
            "max_ray_length" => {
                config.integrator.max_ray_length = value.parse().map_err(|_| bad())?
            }
            "min_depth" => config.integrator.min_depth = value.parse().map_err(|_| bad())?,
            "complexity_stride" => {
                config.complexity.stride = value.parse().map_err(|_| bad())?
            }
            "complexity_radius" => {
                config.complexity.radius = value.parse().map_err(|_| bad())?
            }
            "complexity_min_neighbors" => {
                config.complexity.min_neighbors = value.parse().map_err(|_| bad())?
            }
            "voxel_coarse" => config.sizes.coarse = value.parse().map_err(|_| bad())?,
            "voxel_middle" => config.sizes.middle = value.parse().map_err(|_| bad())?,
            "voxel_fine" => config.sizes.fine = value.parse().map_err(|_| bad())?,
            other => return Err(fail(format!("unknown key '{other}'"))),
        }
    }
    config.sizes.validate()?;
    config.complexity.validate()?;
    config.integrator.validate(&config.sizes)?;
    Ok(config)
}

pub fn save_config(path: &Path, config: &RunConfig) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "truncation={}", config.integrator.truncation).unwrap();
    writeln!(text, "w_max={}", config.integrator.w_max).unwrap();
    writeln!(text, "max_ray_length={}", config.integrator.max_ray_length).unwrap();
    writeln!(text, "min_depth={}", config.integrator.min_depth).unwrap();
    writeln!(text, "complexity_stride={}", config.complexity.stride).unwrap();
    writeln!(text, "complexity_radius={}", config.complexity.radius).unwrap();
    writeln!(
        text,
        "complexity_min_neighbors={}",
        config.complexity.min_neighbors
    )
    .unwrap();
    writeln!(text, "voxel_coarse={}", config.sizes.coarse).unwrap();
    writeln!(text, "voxel_middle={}", config.sizes.middle).unwrap();
    writeln!(text, "voxel_fine={}", config.sizes.fine).unwrap();
    write_bytes(path, text.as_bytes())
}

/// Load a sequence manifest and verify every cross-reference exists.
pub fn load_manifest(path: &Path) -> Result<SequenceManifest> {
    let text = read_text(path)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut keys: HashMap<String, String> = HashMap::new();
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| {
            Error::format(path, format!("line {}: {message}", lineno + 1))
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("expected key=value, got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "frame" {
            let fields: Vec<&str> = value.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(fail(format!(
                    "frame line needs 'id depth color semantics', got '{value}'"
                )));
            }
            let frame_id: u64 = fields[0]
                .parse()
                .map_err(|_| fail(format!("bad frame id '{}'", fields[0])))?;
            frames.push(FrameEntry {
                frame_id,
                depth: PathBuf::from(fields[1]),
                color: PathBuf::from(fields[2]),
                semantics: PathBuf::from(fields[3]),
            });
        } else if keys.insert(key.to_string(), value.to_string()).is_some() {
            return Err(fail(format!("duplicate key '{key}'")));
        }
    }

    let get = |key: &str| -> Result<&String> {
        keys.get(key)
            .ok_or_else(|| Error::format(path, format!("missing key '{key}'")))
    };
    let get_f64 = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(path, format!("bad float for '{key}'")))
    };
    let get_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(path, format!("bad integer for '{key}'")))
    };

    let manifest = SequenceManifest {
        root,
        camera: CameraInfo {
            intrinsics: Intrinsics {
                fx: get_f64("fx")?,
                fy: get_f64("fy")?,
                cx: get_f64("cx")?,
                cy: get_f64("cy")?,
            },
            width: get_usize("width")?,
            height: get_usize("height")?,
        },
        depth_scale: keys
            .get("depth_scale")
            .map(|v| v.parse())
            .transpose()
            .map_err(|_| Error::format(path, "bad float for 'depth_scale'"))?
            .unwrap_or(DEFAULT_DEPTH_SCALE),
        n_labels: get_usize("n_labels")? as u32,
        label_table: PathBuf::from(get("label_table")?),
        poses: PathBuf::from(get("poses")?),
        frames,
    };

    if manifest.frames.is_empty() {
        return Err(Error::format(path, "manifest lists no frames"));
    }
    let mut missing = Vec::new();
    let mut check = |rel: &Path| {
        let p = manifest.resolve(rel);
        if !p.is_file() {
            missing.push(p.display().to_string());
        }
    };
    check(&manifest.label_table);
    check(&manifest.poses);
    for frame in &manifest.frames {
        check(&frame.depth);
        check(&frame.color);
        check(&frame.semantics);
    }
    if !missing.is_empty() {
        return Err(Error::format(
            path,
            format!("missing referenced files: {}", missing.join(", ")),
        ));
    }
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &SequenceManifest) -> Result<()> {
    let mut text = String::new();
    let cam = &manifest.camera;
    writeln!(text, "fx={}", cam.intrinsics.fx).unwrap();
    writeln!(text, "fy={}", cam.intrinsics.fy).unwrap();
    writeln!(text, "cx={}", cam.intrinsics.cx).unwrap();
    writeln!(text, "cy={}", cam.intrinsics.cy).unwrap();
    writeln!(text, "width={}", cam.width).unwrap();
    writeln!(text, "height={}", cam.height).unwrap();
    writeln!(text, "depth_scale={}", manifest.depth_scale).unwrap();
    writeln!(text, "n_labels={}", manifest.n_labels).unwrap();
    writeln!(text, "label_table={}", manifest.label_table.display()).unwrap();
    writeln!(text, "poses={}", manifest.poses.display()).unwrap();
    for frame in &manifest.frames {
        writeln!(
            text,
            "frame={} {} {} {}",
            frame.frame_id,
            frame.depth.display(),
            frame.color.display(),
            frame.semantics.display()
        )
        .unwrap();
    }
    write_bytes(path, text.as_bytes())
}

/// Append-style writer for per-frame integration statistics.
/// Reads a per-frame statistics log written by [`save_stats_log`].
pub fn load_stats_log(path: &Path) -> Result<Vec<FrameStats>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let fail = |message: String| {
            Error::format(path, format!("line {}: {message}", lineno + 1))
        };
        if fields.len() != 11 {
            return Err(fail(format!("expected 11 fields, found {}", fields.len())));
        }
        let mut ints = [0u64; 10];
        for (slot, field) in ints.iter_mut().zip(&fields[..10]) {
            *slot = field
                .parse()
                .map_err(|_| fail(format!("bad count '{field}'")))?;
        }
        let integrate_ms: f64 = fields[10]
            .parse()
            .map_err(|_| fail(format!("bad time '{}'", fields[10])))?;
        out.push(FrameStats {
            frame_id: ints[0],
            points: ints[1] as usize,
            rays: ints[2] as usize,
            admitted: [ints[3] as usize, ints[4] as usize, ints[5] as usize],
            voxels_updated: ints[6] as usize,
            cells_split: ints[7] as usize,
            neighbor_splits: ints[8] as usize,
            cells_merged: ints[9] as usize,
            integrate_ms,
        });
    }
    Ok(out)
}

pub fn save_stats_log(path: &Path, stats: &[FrameStats]) -> Result<()> {
    let mut text = String::from(
        "# frame points rays admitted_coarse admitted_middle admitted_fine \
         voxels_updated cells_split neighbor_splits cells_merged integrate_ms\n",
    );
    for s in stats {
        writeln!(
            text,
            "{} {} {} {} {} {} {} {} {} {} {:.3}",
            s.frame_id,
            s.points,
            s.rays,
            s.admitted[0],
            s.admitted[1],
            s.admitted[2],
            s.voxels_updated,
            s.cells_split,
            s.neighbor_splits,
            s.cells_merged,
            s.integrate_ms
        )
        .unwrap();
    }
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use tempfile::TempDir;

    #[test]
    fn pinhole_camera_covers_the_requested_fov() {
        let cam = CameraInfo::pinhole(320, 240, 60.0).unwrap();
        assert_eq!(cam.intrinsics.fx, cam.intrinsics.fy);
        assert_eq!(cam.intrinsics.cx, 160.0);
        assert_eq!(cam.intrinsics.cy, 120.0);
        // The top image edge sits half the fov away from the optical axis.
        let half = (cam.intrinsics.cy / cam.intrinsics.fy).atan().to_degrees();
        assert_relative_eq!(half, 30.0, epsilon = 1e-12);
        assert!(CameraInfo::pinhole(0, 240, 60.0).is_err());
        assert!(CameraInfo::pinhole(320, 240, 0.0).is_err());
        assert!(CameraInfo::pinhole(320, 240, 180.0).is_err());
    }

    #[test]
    fn stats_log_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("stats.txt");
        let stats = vec![
            FrameStats {
                frame_id: 0,
                points: 4096,
                rays: 512,
                admitted: [300, 150, 62],
                voxels_updated: 9000,
                cells_split: 12,
                neighbor_splits: 80,
                cells_merged: 1,
                integrate_ms: 15.625,
            },
            FrameStats {
                frame_id: 7,
                points: 0,
                rays: 0,
                admitted: [0, 0, 0],
                voxels_updated: 0,
                cells_split: 0,
                neighbor_splits: 0,
                cells_merged: 0,
                integrate_ms: 0.001,
            },
        ];
        save_stats_log(&path, &stats).unwrap();
        let back = load_stats_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].frame_id, 0);
        assert_eq!(back[0].admitted, [300, 150, 62]);
        assert_eq!(back[0].integrate_ms, 15.625);
        assert_eq!(back[1].frame_id, 7);
        // Truncated lines are format errors, not silently skipped.
        std::fs::write(&path, "0 1 2 3\n").unwrap();
        assert!(load_stats_log(&path).is_err());
    }

    #[test]
    fn depth_png_round_trips_and_scales() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("d.png");
        let meters: Vec<f32> = vec![0.0, 1.0, 0.5, 65.535, 2.5, 0.001];
        save_depth(&path, 3, 2, &meters, DEFAULT_DEPTH_SCALE).unwrap();
        let (w, h, load) = load_depth(&path, DEFAULT_DEPTH_SCALE).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(load[0], 0.0, "zero stays invalid");
        assert_relative_eq!(load[1], 1.0, epsilon = 1e-6);
        assert_relative_eq!(load[3], 65.535, epsilon = 1e-5);
        // Values are quantized to integer millimeters.
        for (orig, read) in meters.iter().zip(&load) {
            assert!((orig - read).abs() < 0.5e-3 + 1e-6, "{orig} vs {read}");
        }
    }

    #[test]
    fn depth_loader_rejects_eight_bit_images() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.png");
        let buf = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_raw(2, 2, vec![9; 4])
            .unwrap();
        buf.save_with_format(&path, image::ImageFormat::Png).unwrap();
        let err = load_depth(&path, DEFAULT_DEPTH_SCALE).unwrap_err();
        assert!(err.to_string().contains("16-bit"), "{err}");
    }

    #[test]
    fn color_png_round_trips_exactly() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("c.png");
        let color: Vec<[u8; 3]> = (0..12u8).map(|i| [i, 2 * i, 255 - i]).collect();
        save_color(&path, 4, 3, &color).unwrap();
        let (w, h, load) = load_color(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(load, color);
    }

    #[test]
    fn semantics_round_trip_and_floor() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("s.semk");
        let labels = vec![
            PixelLabels::from_sorted(&[(5, 0.9)]).unwrap(),
            PixelLabels::empty(),
            PixelLabels::from_sorted(&[(1, 0.5), (2, 0.3), (9, 0.15)]).unwrap(),
            PixelLabels::from_sorted(&[(0, 0.4), (39, 0.2)]).unwrap(),
        ];
        save_semantics(&path, 2, 2, &labels).unwrap();
        let (w, h, load) = load_semantics(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(load, labels);
    }

    #[test]
    fn semantics_score_floor_drops_weak_entries() {
        // Hand-build a raster whose record carries a 0.05 probability: the
        // loader must drop it rather than reject the file.
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("weak.semk");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SEMK");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(4);
        for (label, prob) in [(3u16, 0.5f32), (7, 0.3), (9, 0.15), (11, 0.05)] {
            bytes.extend_from_slice(&label.to_le_bytes());
            bytes.extend_from_slice(&prob.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let (_, _, load) = load_semantics(&path).unwrap();
        assert_eq!(load[0].len(), 3, "the 0.05 entry is absent");
    }

    #[test]
    fn semantics_reject_probability_above_one() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.semk");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SEMK");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(1);
        bytes.extend_from_slice(&3u16.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_semantics(&path).is_err());
    }

    #[test]
    fn pose_file_round_trips_within_tolerance() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("poses.txt");
        let poses: Vec<(u64, Isometry3<f64>)> = (0..10)
            .map(|i| {
                let angle = i as f64 * 0.37;
                let q = UnitQuaternion::from_euler_angles(angle, angle * 0.5, -angle);
                (
                    i,
                    Isometry3::from_parts(
                        Translation3::new(i as f64 * 0.1, -1.5, angle.sin()),
                        q,
                    ),
                )
            })
            .collect();
        save_pose_file(&path, &poses).unwrap();
        let load = load_pose_file(&path).unwrap();
        assert_eq!(load.len(), poses.len());
        for ((ia, pa), (ib, pb)) in poses.iter().zip(&load) {
            assert_eq!(ia, ib);
            let dt = (pa.translation.vector - pb.translation.vector).norm();
            let dr = pa.rotation.angle_to(&pb.rotation);
            assert!(dt < 1e-9 && dr < 1e-9, "dt {dt} dr {dr}");
        }
    }

    #[test]
    fn pose_parser_reports_line_numbers() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "0 0 0 0 0 0 0 1\nnot a pose\n").unwrap();
        let err = load_pose_file(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn pose_parser_enforces_unit_quaternions() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "0 0 0 0 0 0 0 1.2\n").unwrap();
        assert!(load_pose_file(&path).is_err());
        // 90 degrees about z, from the identity.
        std::fs::write(&path, "3 1 2 3 0 0 0.70710678 0.70710678\n").unwrap();
        let poses = load_pose_file(&path).unwrap();
        let (id, pose) = &poses[0];
        assert_eq!(*id, 3);
        let rotated = pose.rotation * nalgebra::Vector3::x();
        assert_relative_eq!(rotated.y, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn policy_round_trip_and_validation() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("policy.txt");
        let mut policy = QualityPolicy::default();
        policy.label_level.insert(3, QualityLevel::Fine);
        policy.label_level.insert(11, QualityLevel::Middle);
        policy.use_geometry = true;
        save_policy(&path, &policy).unwrap();
        let load = load_policy(&path).unwrap();
        assert_eq!(load.label_level, policy.label_level);
        assert_eq!(load.default_level, policy.default_level);
        assert!(load.use_geometry);
        assert_eq!(load.hash64(), policy.hash64());

        std::fs::write(&path, "3,fine\n3,coarse\n").unwrap();
        let err = load_policy(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn config_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.cfg");
        let mut config = RunConfig::default();
        config.integrator.truncation = 0.12;
        config.complexity.radius = 0.07;
        config.sizes = VoxelSizes::new(0.06, 0.03, 0.015).unwrap();
        save_config(&path, &config).unwrap();
        let load = load_config(&path).unwrap();
        assert_eq!(load, config);
    }

    #[test]
    fn label_table_requires_dense_ids() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("labels.txt");
        let names: Vec<String> = ["wall", "floor", "chair"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        save_label_table(&path, &names).unwrap();
        assert_eq!(load_label_table(&path).unwrap(), names);

        std::fs::write(&path, "0,wall\n2,chair\n").unwrap();
        assert!(load_label_table(&path).is_err());
    }

    #[test]
    fn manifest_validates_cross_references() {
        let dir = TempDir::new().unwrap();
        let root = dir.path();
        std::fs::write(root.join("labels.txt"), "0,wall\n1,floor\n").unwrap();
        std::fs::write(root.join("poses.txt"), "0 0 0 0 0 0 0 1\n").unwrap();
        let manifest_text = "fx=40\nfy=40\ncx=16\ncy=12\nwidth=32\nheight=24\n\
             n_labels=2\nlabel_table=labels.txt\nposes=poses.txt\n\
             frame=0 d0.png c0.png s0.semk\n";
        let path = root.join("manifest.txt");
        std::fs::write(&path, manifest_text).unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("missing referenced files"), "{err}");

        save_depth(&root.join("d0.png"), 32, 24, &vec![1.0; 32 * 24], 1e-3).unwrap();
        save_color(&root.join("c0.png"), 32, 24, &vec![[0, 0, 0]; 32 * 24]).unwrap();
        save_semantics(&root.join("s0.semk"), 32, 24, &vec![PixelLabels::empty(); 32 * 24])
            .unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.frames.len(), 1);
        assert_eq!(manifest.depth_scale, DEFAULT_DEPTH_SCALE);
        let poses = manifest.load_poses().unwrap();
        let frame = manifest.load_frame(0, &poses).unwrap();
        assert_eq!(frame.width(), 32);
        assert_eq!(frame.frame_id(), 0);
    }
}

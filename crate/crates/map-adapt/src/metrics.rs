//! Reconstruction quality metrics.
//!
//! The evaluation follows the usual surface-to-surface protocol: points are
//! sampled uniformly by area from the reconstructed mesh, ground truth is an
//! exact sample set from the analytic scene, and errors are nearest-neighbor
//! distances between the two clouds. Completion error queries ground truth
//! against the reconstruction (what is missing), geometric error queries the
//! reconstruction against ground truth (what is wrong), and the completion
//! ratio counts ground-truth points recovered within a threshold.
//!
//! Both error directions are reported per quality level. A reconstructed
//! point belongs to the level that the policy assigns to the label of its
//! nearest ground-truth point, regardless of any label the point itself
//! carries; ground-truth points are bucketed by their own labels. Distances
//! are always measured against the full opposite cloud, the buckets only
//! select which queries contribute to which row.
//!
//! Semantic quality is scored on the coarse grid: per-voxel best labels
//! against a ground-truth labeling of the same grid, as overall accuracy and
//! mean intersection-over-union.
//!
//! All nearest-neighbor queries run on an exact kd-tree with ties broken by
//! lower point index, so every number here is reproducible bit for bit and
//! equals a brute-force evaluation of the same inputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Point3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::core_map::{AdaptiveVoxelMap, QualityLevel, QualityPolicy};
use crate::fixed::FixedTsdfMap;
use crate::mesher::Mesh;
use crate::scene_synth::SurfaceSample;
use crate::spatial::KdTree;
use crate::{Error, Result};

/// Draws `round(area * density)` points uniformly by area from a mesh.
///
/// Each sample lies on a triangle chosen with probability proportional to
/// its area and carries the label of the nearest of the three vertices
/// (ties to the lowest corner). Sampling is deterministic in `seed`. A mesh
/// with zero total area yields an empty set.
pub fn sample_mesh(mesh: &Mesh, density: f64, seed: u64) -> Result<Vec<SurfaceSample>> {
    if !(density.is_finite() && density > 0.0) {
        return Err(Error::validation(format!(
            "sample density {density} must be positive and finite"
        )));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize].position);
        total += (b - a).cross(&(c - a)).norm() * 0.5;
        cumulative.push(total);
    }
    let n = (total * density).round() as usize;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.gen_range(0.0..total);
        let ti = cumulative.partition_point(|&c| c <= pick);
        let tri = &mesh.triangles[ti];
        let verts = tri.map(|i| &mesh.vertices[i as usize]);
        // Square-root warping maps the unit square onto barycentric
        // coordinates with a uniform density over the triangle.
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let su = r1.sqrt();
        let bary = [1.0 - su, su * (1.0 - r2), su * r2];
        let position = Point3::from(
            verts[0].position.coords * bary[0]
                + verts[1].position.coords * bary[1]
                + verts[2].position.coords * bary[2],
        );
        let mut nearest = 0;
        for k in 1..3 {
            if (verts[k].position - position).norm_squared()
                < (verts[nearest].position - position).norm_squared()
            {
                nearest = k;
            }
        }
        out.push(SurfaceSample {
            position,
            label: verts[nearest].label,
        });
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Nearest-neighbor distances in meters from every query to the tree.
fn nn_distances(queries: &[Point3<f64>], tree: &KdTree) -> Vec<f64> {
    queries
        .iter()
        .map(|q| tree.nearest(q).expect("tree is nonempty").1)
        .collect()
}

/// Mean and standard deviation, in centimeters, of nearest-neighbor
/// distances from `gt` to `recon`.
///
/// An empty reconstruction leaves every ground-truth point unexplained, so
/// both statistics degenerate to the `+inf` sentinel. An empty ground-truth
/// set is a caller error.
pub fn completion_error(
    gt: &[Point3<f64>],
    recon: &[Point3<f64>],
) -> Result<(f64, f64)> {
    if gt.is_empty() {
        return Err(Error::validation("completion error needs ground-truth points"));
    }
    if recon.is_empty() {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    let tree = KdTree::build(recon);
    let d = nn_distances(gt, &tree);
    let (m, s) = mean_std(&d);
    Ok((m * 100.0, s * 100.0))
}

/// Percentage of `gt` points whose nearest `recon` point is closer than
/// `threshold` meters. An empty reconstruction recovers nothing.
pub fn completion_ratio(
    gt: &[Point3<f64>],
    recon: &[Point3<f64>],
    threshold: f64,
) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::validation("completion ratio needs ground-truth points"));
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::validation(format!(
            "completion threshold {threshold} must be positive and finite"
        )));
    }
    if recon.is_empty() {
        return Ok(0.0);
    }
    let tree = KdTree::build(recon);
    let hits = gt
        .iter()
        .filter(|q| tree.nearest(q).expect("tree is nonempty").1 < threshold)
        .count();
    Ok(hits as f64 / gt.len() as f64 * 100.0)
}

/// Mean and standard deviation, in centimeters, of nearest-neighbor
/// distances from `recon` to `gt`: [`completion_error`] with the roles
/// swapped, so an empty ground-truth set yields the `+inf` sentinel and an
/// empty reconstruction is the caller error.
pub fn geometric_error(
    recon: &[Point3<f64>],
    gt: &[Point3<f64>],
) -> Result<(f64, f64)> {
    if recon.is_empty() {
        return Err(Error::validation("geometric error needs reconstructed points"));
    }
    if gt.is_empty() {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    let tree = KdTree::build(gt);
    let d = nn_distances(recon, &tree);
    let (m, s) = mean_std(&d);
    Ok((m * 100.0, s * 100.0))
}

/// Point indices grouped by quality level.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LevelBuckets {
    pub fine: Vec<usize>,
    pub middle: Vec<usize>,
    pub coarse: Vec<usize>,
}

impl LevelBuckets {
    pub fn get(&self, level: QualityLevel) -> &[usize] {
        match level {
            QualityLevel::Fine => &self.fine,
            QualityLevel::Middle => &self.middle,
            QualityLevel::Coarse => &self.coarse,
        }
    }

    fn push(&mut self, level: QualityLevel, index: usize) {
        match level {
            QualityLevel::Fine => self.fine.push(index),
            QualityLevel::Middle => self.middle.push(index),
            QualityLevel::Coarse => self.coarse.push(index),
        }
    }
}

/// Buckets reconstructed points by the level of their nearest ground-truth
/// point's label. The points' own labels are deliberately ignored: the
/// evaluation judges a region at the quality the scene demands there, not at
/// the quality the reconstruction believes it delivered. Equidistant
/// ground-truth points resolve to the lower index.
pub fn partition_by_level(
    points: &[SurfaceSample],
    gt: &[SurfaceSample],
    policy: &QualityPolicy,
) -> Result<LevelBuckets> {
    if gt.is_empty() && !points.is_empty() {
        return Err(Error::validation(
            "cannot partition points without ground truth",
        ));
    }
    let positions: Vec<Point3<f64>> = gt.iter().map(|s| s.position).collect();
    let tree = KdTree::build(&positions);
    let mut buckets = LevelBuckets::default();
    for (i, p) in points.iter().enumerate() {
        let (nearest, _) = tree.nearest(&p.position).expect("ground truth nonempty");
        buckets.push(policy.level_for_label(gt[nearest].label), i);
    }
    Ok(buckets)
}

/// Buckets ground-truth points by the level of their own labels.
pub fn partition_gt_by_level(gt: &[SurfaceSample], policy: &QualityPolicy) -> LevelBuckets {
    let mut buckets = LevelBuckets::default();
    for (i, s) in gt.iter().enumerate() {
        buckets.push(policy.level_for_label(s.label), i);
    }
    buckets
}

/// Semantic accuracy and mean IoU, both in percent, of the map's per-voxel
/// best labels against a ground-truth labeling of the coarse grid.
///
/// The comparison covers coarse voxels that are observed, carry at least one
/// semantic observation, and have a ground-truth label; semantic fusion is
/// gated to the near-surface band, so observed cells without votes say
/// nothing about labeling quality. The IoU average runs over every class
/// present in ground truth or predictions on those voxels. No overlapping
/// voxels at all is an error rather than a score of zero.
pub fn semantic_scores(
    map: &AdaptiveVoxelMap,
    gt: &HashMap<[i64; 3], u16>,
) -> Result<(f64, f64)> {
    let side = map.block_side() as i64;
    let mut confusion: BTreeMap<(u16, u16), u64> = BTreeMap::new();
    for bidx in map.sorted_block_indices() {
        let Some(block) = map.block(&bidx) else {
            continue;
        };
        for (flat, cell) in block.cells().iter().enumerate() {
            if !cell.voxel.observed() {
                continue;
            }
            let Some((predicted, _)) = cell.semantics.best() else {
                continue;
            };
            let f = flat as i64;
            let cidx = [
                bidx[0] * side + f / (side * side),
                bidx[1] * side + (f / side) % side,
                bidx[2] * side + f % side,
            ];
            let Some(&truth) = gt.get(&cidx) else {
                continue;
            };
            *confusion.entry((truth, predicted)).or_default() += 1;
        }
    }
    if confusion.is_empty() {
        return Err(Error::validation(
            "no labeled voxels overlap the ground-truth grid",
        ));
    }
    let total: u64 = confusion.values().sum();
    let correct: u64 = confusion
        .iter()
        .filter(|((t, p), _)| t == p)
        .map(|(_, &n)| n)
        .sum();
    let mut classes = BTreeSet::new();
    for &(t, p) in confusion.keys() {
        classes.insert(t);
        classes.insert(p);
    }
    let mut iou_sum = 0.0;
    for &c in &classes {
        let mut tp = 0u64;
        let mut union = 0u64;
        for (&(t, p), &n) in &confusion {
            if t == c && p == c {
                tp += n;
            }
            if t == c || p == c {
                union += n;
            }
        }
        iou_sum += tp as f64 / union as f64;
    }
    Ok((
        correct as f64 / total as f64 * 100.0,
        iou_sum / classes.len() as f64 * 100.0,
    ))
}

/// One row of the evaluation: reconstruction errors for the points of a
/// single quality level.
///
/// A level with no ground-truth points has nothing to measure; its error
/// fields are `NaN` and excused by [`EvalReport::validate`]. A level whose
/// ground truth found an empty reconstruction carries the `+inf` sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelMetrics {
    pub gt_points: u64,
    pub recon_points: u64,
    pub completion_error_mean_cm: f64,
    pub completion_error_std_cm: f64,
    pub completion_ratio_5cm_pct: f64,
    pub geometric_error_mean_cm: f64,
    pub geometric_error_std_cm: f64,
}

impl LevelMetrics {
    fn empty() -> Self {
        LevelMetrics {
            gt_points: 0,
            recon_points: 0,
            completion_error_mean_cm: f64::NAN,
            completion_error_std_cm: f64::NAN,
            completion_ratio_5cm_pct: f64::NAN,
            geometric_error_mean_cm: f64::NAN,
            geometric_error_std_cm: f64::NAN,
        }
    }

    fn validate(&self, level: &str) -> Result<()> {
        let errors = [
            ("completion_error_mean_cm", self.completion_error_mean_cm, self.gt_points),
            ("completion_error_std_cm", self.completion_error_std_cm, self.gt_points),
            ("geometric_error_mean_cm", self.geometric_error_mean_cm, self.recon_points),
            ("geometric_error_std_cm", self.geometric_error_std_cm, self.recon_points),
        ];
        for (name, value, queries) in errors {
            let ok = if queries == 0 {
                value.is_nan()
            } else {
                value >= 0.0
            };
            if !ok {
                return Err(Error::validation(format!(
                    "{level}.{name} = {value} with {queries} query points"
                )));
            }
        }
        let ratio = self.completion_ratio_5cm_pct;
        let ok = if self.gt_points == 0 {
            ratio.is_nan()
        } else {
            (0.0..=100.0).contains(&ratio)
        };
        if !ok {
            return Err(Error::validation(format!(
                "{level}.completion_ratio_5cm_pct = {ratio} outside [0, 100]"
            )));
        }
        Ok(())
    }
}

/// The full evaluation: per-level reconstruction errors plus overall
/// semantic scores, map size, and timing statistics.
///
/// Timing fields are `NaN` when the evaluation had no timing source (a map
/// loaded from disk does not remember how long integration took). The two
/// semantic fields are `NaN` when the map carries no semantics, as with a
/// fixed-resolution baseline map.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub fine: LevelMetrics,
    pub middle: LevelMetrics,
    pub coarse: LevelMetrics,
    pub semantic_accuracy_pct: f64,
    pub semantic_miou_pct: f64,
    pub map_size_bytes: u64,
    pub integrate_time_mean_ms: f64,
    pub integrate_time_std_ms: f64,
    pub mesh_time_ms: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        self.fine.validate("fine")?;
        self.middle.validate("middle")?;
        self.coarse.validate("coarse")?;
        for (name, pct) in [
            ("semantic_accuracy_pct", self.semantic_accuracy_pct),
            ("semantic_miou_pct", self.semantic_miou_pct),
        ] {
            if !pct.is_nan() && !(0.0..=100.0).contains(&pct) {
                return Err(Error::validation(format!(
                    "{name} = {pct} outside [0, 100]"
                )));
            }
        }
        Ok(())
    }

    pub fn level(&self, level: QualityLevel) -> &LevelMetrics {
        match level {
            QualityLevel::Fine => &self.fine,
            QualityLevel::Middle => &self.middle,
            QualityLevel::Coarse => &self.coarse,
        }
    }
}

/// Wall-clock inputs for the report's timing fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalTimings {
    /// Per-frame integration times in milliseconds.
    pub integrate_ms: Vec<f64>,
    /// Total mesh extraction time in milliseconds.
    pub mesh_ms: f64,
}

/// Knobs for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Mesh sampling density in points per square meter.
    pub sample_density: f64,
    /// Seed for the mesh sampler.
    pub sample_seed: u64,
    /// Completion threshold in meters.
    pub completion_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            sample_density: 20_000.0,
            sample_seed: 7,
            completion_threshold: 0.05,
        }
    }
}

/// Runs the full evaluation of a reconstruction against ground truth.
///
/// Samples the mesh, buckets both clouds by quality level, and fills an
/// [`EvalReport`] with per-level completion and geometric errors (each
/// bucket queried against the full opposite cloud), semantic scores on the
/// coarse grid, and the map's serialized size.
pub fn evaluate(
    map: &AdaptiveVoxelMap,
    mesh: &Mesh,
    gt_samples: &[SurfaceSample],
    gt_labels: &HashMap<[i64; 3], u16>,
    policy: &QualityPolicy,
    options: &EvalOptions,
    timings: Option<&EvalTimings>,
) -> Result<EvalReport> {
    let (accuracy, miou) = semantic_scores(map, gt_labels)?;
    assemble_report(
        mesh,
        gt_samples,
        policy,
        options,
        timings,
        accuracy,
        miou,
        map.memory_bytes(),
    )
}

/// [`evaluate`] for a fixed-resolution baseline map.
///
/// The geometry protocol is identical; the semantic fields are `NaN` because
/// a fixed map stores no label votes. The per-level bucketing still follows
/// `policy` so the rows line up with an adaptive run over the same scene.
pub fn evaluate_fixed(
    map: &FixedTsdfMap,
    mesh: &Mesh,
    gt_samples: &[SurfaceSample],
    policy: &QualityPolicy,
    options: &EvalOptions,
    timings: Option<&EvalTimings>,
) -> Result<EvalReport> {
    assemble_report(
        mesh,
        gt_samples,
        policy,
        options,
        timings,
        f64::NAN,
        f64::NAN,
        map.memory_bytes(),
    )
}

#[allow(clippy::too_many_arguments)]
fn assemble_report(
    mesh: &Mesh,
    gt_samples: &[SurfaceSample],
    policy: &QualityPolicy,
    options: &EvalOptions,
    timings: Option<&EvalTimings>,
    semantic_accuracy_pct: f64,
    semantic_miou_pct: f64,
    map_size_bytes: u64,
) -> Result<EvalReport> {
    if gt_samples.is_empty() {
        return Err(Error::validation("evaluation needs ground-truth samples"));
    }
    if !(options.completion_threshold.is_finite() && options.completion_threshold > 0.0) {
        return Err(Error::validation(format!(
            "completion threshold {} must be positive and finite",
            options.completion_threshold
        )));
    }
    let recon = sample_mesh(mesh, options.sample_density, options.sample_seed)?;
    let gt_positions: Vec<Point3<f64>> = gt_samples.iter().map(|s| s.position).collect();
    let recon_positions: Vec<Point3<f64>> = recon.iter().map(|s| s.position).collect();
    let gt_buckets = partition_gt_by_level(gt_samples, policy);
    let recon_buckets = partition_by_level(&recon, gt_samples, policy)?;
    let gt_tree = KdTree::build(&gt_positions);
    let recon_tree = KdTree::build(&recon_positions);

    let mut rows = [LevelMetrics::empty(), LevelMetrics::empty(), LevelMetrics::empty()];
    for (row, level) in rows.iter_mut().zip([
        QualityLevel::Fine,
        QualityLevel::Middle,
        QualityLevel::Coarse,
    ]) {
        let gt_idx = gt_buckets.get(level);
        let recon_idx = recon_buckets.get(level);
        row.gt_points = gt_idx.len() as u64;
        row.recon_points = recon_idx.len() as u64;
        if !gt_idx.is_empty() {
            if recon_positions.is_empty() {
                row.completion_error_mean_cm = f64::INFINITY;
                row.completion_error_std_cm = f64::INFINITY;
                row.completion_ratio_5cm_pct = 0.0;
            } else {
                let d: Vec<f64> = gt_idx
                    .iter()
                    .map(|&i| recon_tree.nearest(&gt_positions[i]).expect("nonempty").1)
                    .collect();
                let (m, s) = mean_std(&d);
                row.completion_error_mean_cm = m * 100.0;
                row.completion_error_std_cm = s * 100.0;
                let hits = d.iter().filter(|&&x| x < options.completion_threshold).count();
                row.completion_ratio_5cm_pct = hits as f64 / d.len() as f64 * 100.0;
            }
        }
        if !recon_idx.is_empty() {
            let d: Vec<f64> = recon_idx
                .iter()
                .map(|&i| gt_tree.nearest(&recon_positions[i]).expect("nonempty").1)
                .collect();
            let (m, s) = mean_std(&d);
            row.geometric_error_mean_cm = m * 100.0;
            row.geometric_error_std_cm = s * 100.0;
        }
    }

    let (integrate_mean, integrate_std, mesh_ms) = match timings {
        Some(t) if !t.integrate_ms.is_empty() => {
            let (m, s) = mean_std(&t.integrate_ms);
            (m, s, t.mesh_ms)
        }
        Some(t) => (f64::NAN, f64::NAN, t.mesh_ms),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    let [fine, middle, coarse] = rows;
    let report = EvalReport {
        fine,
        middle,
        coarse,
        semantic_accuracy_pct,
        semantic_miou_pct,
        map_size_bytes,
        integrate_time_mean_ms: integrate_mean,
        integrate_time_std_ms: integrate_std,
        mesh_time_ms: mesh_ms,
    };
    report.validate()?;
    Ok(report)
}

const LEVEL_NAMES: [(&str, fn(&EvalReport) -> &LevelMetrics); 3] = [
    ("fine", |r| &r.fine),
    ("middle", |r| &r.middle),
    ("coarse", |r| &r.coarse),
];

/// Renders the per-level rows as a comma-separated table with a header.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::from(
        "level,gt_points,recon_points,completion_error_mean_cm,\
         completion_error_std_cm,completion_ratio_5cm_pct,\
         geometric_error_mean_cm,geometric_error_std_cm\n",
    );
    for (name, get) in LEVEL_NAMES {
        let m = get(report);
        out.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            m.gt_points,
            m.recon_points,
            m.completion_error_mean_cm,
            m.completion_error_std_cm,
            m.completion_ratio_5cm_pct,
            m.geometric_error_mean_cm,
            m.geometric_error_std_cm,
        ));
    }
    out
}

/// Renders the whole report as `key = value` lines, one per field.
pub fn report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    for (name, get) in LEVEL_NAMES {
        let m = get(report);
        out.push_str(&format!("{name}.gt_points = {}\n", m.gt_points));
        out.push_str(&format!("{name}.recon_points = {}\n", m.recon_points));
        out.push_str(&format!(
            "{name}.completion_error_mean_cm = {}\n",
            m.completion_error_mean_cm
        ));
        out.push_str(&format!(
            "{name}.completion_error_std_cm = {}\n",
            m.completion_error_std_cm
        ));
        out.push_str(&format!(
            "{name}.completion_ratio_5cm_pct = {}\n",
            m.completion_ratio_5cm_pct
        ));
        out.push_str(&format!(
            "{name}.geometric_error_mean_cm = {}\n",
            m.geometric_error_mean_cm
        ));
        out.push_str(&format!(
            "{name}.geometric_error_std_cm = {}\n",
            m.geometric_error_std_cm
        ));
    }
    out.push_str(&format!(
        "semantic_accuracy_pct = {}\n",
        report.semantic_accuracy_pct
    ));
    out.push_str(&format!("semantic_miou_pct = {}\n", report.semantic_miou_pct));
    out.push_str(&format!("map_size_bytes = {}\n", report.map_size_bytes));
    out.push_str(&format!(
        "integrate_time_mean_ms = {}\n",
        report.integrate_time_mean_ms
    ));
    out.push_str(&format!(
        "integrate_time_std_ms = {}\n",
        report.integrate_time_std_ms
    ));
    out.push_str(&format!("mesh_time_ms = {}\n", report.mesh_time_ms));
    out
}

/// Parses the output of [`report_text`] back into a report.
pub fn report_from_text(text: &str) -> Result<EvalReport> {
    let mut values: HashMap<&str, &str> = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::validation(format!(
                "report line {}: expected `key = value`, got {line:?}",
                ln + 1
            )));
        };
        values.insert(key.trim(), value.trim());
    }
    let float = |key: &str| -> Result<f64> {
        values
            .get(key)
            .ok_or_else(|| Error::validation(format!("report is missing key {key}")))?
            .parse()
            .map_err(|_| Error::validation(format!("report key {key} is not a number")))
    };
    let int = |key: &str| -> Result<u64> {
        values
            .get(key)
            .ok_or_else(|| Error::validation(format!("report is missing key {key}")))?
            .parse()
            .map_err(|_| Error::validation(format!("report key {key} is not an integer")))
    };
    let level = |name: &str| -> Result<LevelMetrics> {
        Ok(LevelMetrics {
            gt_points: int(&format!("{name}.gt_points"))?,
            recon_points: int(&format!("{name}.recon_points"))?,
            completion_error_mean_cm: float(&format!("{name}.completion_error_mean_cm"))?,
            completion_error_std_cm: float(&format!("{name}.completion_error_std_cm"))?,
            completion_ratio_5cm_pct: float(&format!("{name}.completion_ratio_5cm_pct"))?,
            geometric_error_mean_cm: float(&format!("{name}.geometric_error_mean_cm"))?,
            geometric_error_std_cm: float(&format!("{name}.geometric_error_std_cm"))?,
        })
    };
    Ok(EvalReport {
        fine: level("fine")?,
        middle: level("middle")?,
        coarse: level("coarse")?,
        semantic_accuracy_pct: float("semantic_accuracy_pct")?,
        semantic_miou_pct: float("semantic_miou_pct")?,
        map_size_bytes: int("map_size_bytes")?,
        integrate_time_mean_ms: float("integrate_time_mean_ms")?,
        integrate_time_std_ms: float("integrate_time_std_ms")?,
        mesh_time_ms: float("mesh_time_ms")?,
    })
}

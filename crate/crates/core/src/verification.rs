//! Candidate scoring by a robust Chamfer distance between a sparse copy of
//! the source map and the voxel centers of the target map, and selection of
//! the winning pose.

use kiddo::{KdTree, SquaredEuclidean};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud_io::PointCloud;
use crate::error::{Error, Result};
use crate::estimator::TransformationCandidate;
use crate::geometry::{Mat3, Vec3};
use crate::segmentation::{Segment, SemanticVoxelMap, VoxelLabel};

/// Source points kept per voxel.
pub const SAMPLES_PER_VOXEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetGeometry {
    Plane { normal: Vec3 },
    Line { direction: Vec3 },
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetEntry {
    pub center: Vec3,
    pub label: VoxelLabel,
    pub geometry: TargetGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSample {
    pub point: Vec3,
    pub label: VoxelLabel,
}

pub struct CompressedMaps {
    pub source: Vec<SourceSample>,
    pub target: Vec<TargetEntry>,
    index: KdTree<f64, 3>,
}

impl std::fmt::Debug for CompressedMaps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompressedMaps")
            .field("source", &self.source.len())
            .field("target", &self.target.len())
            .finish()
    }
}

impl CompressedMaps {
    pub fn new(source: Vec<SourceSample>, target: Vec<TargetEntry>) -> Self {
        let mut index: KdTree<f64, 3> = KdTree::with_capacity(target.len().max(1));
        for (i, e) in target.iter().enumerate() {
            index.add(&[e.center.x, e.center.y, e.center.z], i as u64);
        }
        Self { source, target, index }
    }

    /// Index of the target center nearest to `q`; equidistant centers
    /// resolve to the lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<usize> {
        if self.target.is_empty() {
            return None;
        }
        let q = [q.x, q.y, q.z];
        let best = self.index.nearest_one::<SquaredEuclidean>(&q);
        let radius = best.distance * (1.0 + 1e-12) + f64::MIN_POSITIVE;
        self.index
            .within_unsorted::<SquaredEuclidean>(&q, radius)
            .into_iter()
            .filter(|n| n.distance <= best.distance)
            .map(|n| n.item as usize)
            .min()
            .or(Some(best.item as usize))
    }
}

/// Keeps the first five points (by original index) of every source voxel
/// and the center of every target voxel together with the direction data
/// of the segment that owns it. `src_cloud` is the cloud the source map's
/// point indices refer to.
pub fn compress_maps(
    src: &SemanticVoxelMap,
    src_cloud: &PointCloud,
    tgt: &SemanticVoxelMap,
    tgt_segments: &[Segment],
) -> CompressedMaps {
    let mut source = Vec::new();
    for cell in src.cells.values() {
        let mut idx = cell.cell.points.clone();
        idx.sort_unstable();
        source.extend(idx.into_iter().take(SAMPLES_PER_VOXEL).map(|i| SourceSample {
            point: src_cloud.points[i],
            label: cell.label,
        }));
    }
    let target = tgt
        .cells
        .values()
        .map(|cell| {
            let seg = cell.segment.and_then(|id| tgt_segments.iter().find(|s| s.id == id));
            let geometry = match (cell.label, seg) {
                (VoxelLabel::Plane, Some(Segment { normal: Some(n), .. })) => TargetGeometry::Plane { normal: n.normalize() },
                (VoxelLabel::Line, Some(Segment { direction: Some(d), .. })) => {
                    TargetGeometry::Line { direction: d.normalize() }
                }
                _ => TargetGeometry::Point,
            };
            TargetEntry {
                center: cell.cell.mean,
                label: cell.label,
                geometry,
            }
        })
        .collect();
    CompressedMaps::new(source, target)
}

/// Distance from `p` to the target entity, by entity type.
pub fn primitive_residual(p: &Vec3, entry: &TargetEntry) -> f64 {
    let delta = p - entry.center;
    match entry.geometry {
        TargetGeometry::Plane { normal } => normal.dot(&delta).abs(),
        TargetGeometry::Line { direction } => (delta - direction * direction.dot(&delta)).norm(),
        TargetGeometry::Point => delta.norm(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Dcs,
    Tukey,
    Cauchy,
    Huber,
    Tls,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dcs" => Ok(Self::Dcs),
            "tukey" => Ok(Self::Tukey),
            "cauchy" => Ok(Self::Cauchy),
            "huber" => Ok(Self::Huber),
            "tls" => Ok(Self::Tls),
            _ => Err(Error::Config(format!("unknown kernel '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustKernel {
    pub kind: KernelKind,
    /// Scale `Φ`.
    pub scale: f64,
}

impl RobustKernel {
    pub fn new(kind: KernelKind, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("kernel scale must be positive, got {scale}")));
        }
        Ok(Self { kind, scale })
    }

    pub fn value(&self, r: f64) -> f64 {
        let phi = self.scale;
        let r2 = r * r;
        match self.kind {
            KernelKind::Dcs => {
                let s = (2.0 * phi / (phi + r2)).min(1.0);
                // Algebraically Φ once s < 1; the clamp absorbs rounding.
                (s * s * r2 + (1.0 - s) * (1.0 - s) * phi).min(phi)
            }
            KernelKind::Tukey => {
                if r.abs() >= phi {
                    phi * phi / 6.0
                } else {
                    let u = 1.0 - r2 / (phi * phi);
                    phi * phi / 6.0 * (1.0 - u * u * u)
                }
            }
            KernelKind::Cauchy => 0.5 * phi * phi * (1.0 + r2 / (phi * phi)).ln(),
            KernelKind::Huber => {
                let a = r.abs();
                if a <= phi {
                    0.5 * r2
                } else {
                    phi * (a - 0.5 * phi)
                }
            }
            KernelKind::Tls => r2.min(phi * phi),
        }
    }

    /// Limit of the kernel as `r → ∞`; infinite for the unbounded kernels.
    pub fn saturation(&self) -> f64 {
        let phi = self.scale;
        match self.kind {
            KernelKind::Dcs => phi,
            KernelKind::Tukey => phi * phi / 6.0,
            KernelKind::Tls => phi * phi,
            KernelKind::Cauchy | KernelKind::Huber => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyParams {
    pub kernel: KernelKind,
    pub scale: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Dcs,
            scale: 1.0,
        }
    }
}

impl VerifyParams {
    pub fn kernel(&self) -> Result<RobustKernel> {
        RobustKernel::new(self.kernel, self.scale)
    }
}

/// Kernel value of every transformed source sample against its nearest
/// target entity, in sample order.
pub fn sample_contributions(r: &Mat3, t: &Vec3, maps: &CompressedMaps, kernel: &RobustKernel) -> Vec<f64> {
    if maps.target.is_empty() {
        return vec![kernel.saturation(); maps.source.len()];
    }
    maps.source
        .par_iter()
        .map(|s| {
            let p = r * s.point + t;
            let j = maps.nearest(&p).expect("target is non-empty");
            kernel.value(primitive_residual(&p, &maps.target[j]))
        })
        .collect()
}

/// Mean robust residual of the transformed source samples against their
/// nearest target entities.
pub fn chamfer_score(r: &Mat3, t: &Vec3, maps: &CompressedMaps, kernel: &RobustKernel) -> f64 {
    if maps.source.is_empty() || maps.target.is_empty() {
        return kernel.saturation();
    }
    let total: f64 = sample_contributions(r, t, maps, kernel).iter().sum();
    total / maps.source.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: TransformationCandidate,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub score: f64,
    /// Pyramid level of the winner; `None` when no candidate existed.
    pub level: Option<usize>,
    pub candidates: Vec<ScoredCandidate>,
}

impl RegistrationResult {
    pub fn failure(score: f64) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            score,
            level: None,
            candidates: Vec::new(),
        }
    }
}

/// Scores every candidate and keeps the lowest score; ties go to the
/// lowest pyramid level.
pub fn select_best(candidates: Vec<TransformationCandidate>, maps: &CompressedMaps, kernel: &RobustKernel) -> Result<RegistrationResult> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate poses to verify"));
    }
    let scored: Vec<ScoredCandidate> = candidates
        .into_iter()
        .map(|c| {
            let score = chamfer_score(&c.rotation, &c.translation, maps, kernel);
            ScoredCandidate { candidate: c, score }
        })
        .collect();
    let best = scored
        .iter()
        .min_by(|a, b| a.score.total_cmp(&b.score).then(a.candidate.level.cmp(&b.candidate.level)))
        .expect("non-empty");
    Ok(RegistrationResult {
        rotation: best.candidate.rotation,
        translation: best.candidate.translation,
        score: best.score,
        level: Some(best.candidate.level),
        candidates: scored.clone(),
    })
}

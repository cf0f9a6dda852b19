//! End-to-end registration: models, matching, pyramid pruning, per-level
//! pose estimation and verification.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{mknn_match, Correspondence};
use crate::cloud_io::{remove_ground, GroundSplit, PointCloud};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::estimator::{estimate_candidate, TransformationCandidate};
use crate::gem::{build_gem, select_top_j, Gem, PrimitiveType};
use crate::geometry::{Mat3, Vec3};
use crate::pagor::{build_pyramid, graduated_max_clique, CliqueResult, PyramidGraph};
use crate::segmentation::{segment_cloud, Segmentation};
use crate::verification::{chamfer_score, compress_maps, select_best, RegistrationResult};

/// Everything extracted from one cloud.
#[derive(Debug, Clone)]
pub struct CloudModels {
    pub ground: GroundSplit,
    /// Segmentation of `ground.nonground`.
    pub segmentation: Segmentation,
    /// Top-J models per type.
    pub gems: Vec<Gem>,
}

impl CloudModels {
    pub fn counts(&self) -> SegmentCounts {
        let c = |t| self.gems.iter().filter(|g| g.primitive == t).count();
        SegmentCounts {
            plane: c(PrimitiveType::Plane),
            cluster: c(PrimitiveType::Cluster),
            line: c(PrimitiveType::Line),
        }
    }
}

pub fn extract_models(cloud: &PointCloud, cfg: &Config, seed: u64) -> Result<CloudModels> {
    let ground = if cfg.ground.enabled {
        remove_ground(cloud, &cfg.ground.params(), seed)
    } else {
        GroundSplit {
            ground: PointCloud::default(),
            nonground: cloud.clone(),
            nonground_indices: (0..cloud.len()).collect(),
            plane: None,
        }
    };
    let segmentation = segment_cloud(&ground.nonground, &cfg.plane, &cfg.line, cfg.segment.min_points, seed)?;
    let all: Vec<Gem> = segmentation
        .segments
        .par_iter()
        .map(|s| build_gem(s, &segmentation.map, &ground.nonground))
        .collect::<Result<_>>()?;
    let gems = select_top_j(&all, cfg.association.top_j);
    Ok(CloudModels {
        ground,
        segmentation,
        gems,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub plane: usize,
    pub cluster: usize,
    pub line: usize,
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub correspondence_ms: f64,
    pub graph_ms: f64,
    pub clique_ms: f64,
    pub estimate_ms: f64,
    pub verify_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub level: usize,
    pub clique_size: usize,
    pub score: f64,
    pub converged: bool,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// False when no level produced a candidate pose.
    pub success: bool,
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub score: f64,
    pub level: Option<usize>,
    pub clique_sizes: Vec<usize>,
    pub correspondences: usize,
    pub source_segments: SegmentCounts,
    pub target_segments: SegmentCounts,
    pub candidates: Vec<CandidateSummary>,
    pub timings: StageTimings,
}

impl PipelineReport {
    pub fn rotation_matrix(&self) -> Mat3 {
        Mat3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn translation_vector(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    /// Same report with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: StageTimings::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn row_major(m: &Mat3) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[(i, j)]))
}

/// Intermediate results of one registration, for diagnostics and metrics.
#[derive(Debug, Clone)]
pub struct Detailed {
    pub report: PipelineReport,
    pub result: RegistrationResult,
    pub source: CloudModels,
    pub target: CloudModels,
    pub correspondences: Vec<Correspondence>,
    pub pyramid: PyramidGraph,
    pub cliques: CliqueResult,
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Registers `src` onto `tgt`: the returned pose maps source points into
/// the target frame. A run that yields no candidate is reported with the
/// identity pose and `success = false`.
pub fn register(src: &PointCloud, tgt: &PointCloud, cfg: &Config) -> Result<PipelineReport> {
    register_detailed(src, tgt, cfg).map(|d| d.report)
}

pub fn register_detailed(src: &PointCloud, tgt: &PointCloud, cfg: &Config) -> Result<Detailed> {
    cfg.validate()?;
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Empty("registration needs two non-empty clouds"));
    }
    let kernel = cfg.verify.kernel()?;

    let t0 = Instant::now();
    let (source, target) = rayon::join(
        || extract_models(src, cfg, cfg.seed),
        || extract_models(tgt, cfg, cfg.seed),
    );
    let (source, target) = (source?, target?);
    let correspondences = mknn_match(&source.gems, &target.gems, cfg.association.k);
    let correspondence_ms = ms(t0);

    let t1 = Instant::now();
    let pyramid = build_pyramid(&correspondences, &source.gems, &target.gems, &cfg.pagor.p_values)?;
    let graph_ms = ms(t1);

    let t2 = Instant::now();
    let cliques = graduated_max_clique(&pyramid);
    let clique_ms = ms(t2);

    let t3 = Instant::now();
    let candidates: Vec<TransformationCandidate> = cliques
        .cliques
        .par_iter()
        .enumerate()
        .filter(|(_, c)| c.len() >= 3)
        .map(|(level, c)| estimate_candidate(level, c, &correspondences, &source.gems, &target.gems, &cfg.estimator))
        .collect::<Vec<_>>()
        .into_iter()
        .filter_map(|r| match r {
            Ok(c) => Some(Ok(c)),
            Err(Error::UnderConstrained(_)) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;
    let estimate_ms = ms(t3);

    let t4 = Instant::now();
    let maps = compress_maps(
        &source.segmentation.semantic,
        &source.ground.nonground,
        &target.segmentation.semantic,
        &target.segmentation.segments,
    );
    let success = !candidates.is_empty();
    let result = if success {
        select_best(candidates, &maps, &kernel)?
    } else {
        RegistrationResult::failure(chamfer_score(&Mat3::identity(), &Vec3::zeros(), &maps, &kernel))
    };
    let verify_ms = ms(t4);

    let report = PipelineReport {
        success,
        rotation: row_major(&result.rotation),
        translation: result.translation.into(),
        score: result.score,
        level: result.level,
        clique_sizes: cliques.sizes(),
        correspondences: correspondences.len(),
        source_segments: source.counts(),
        target_segments: target.counts(),
        candidates: result
            .candidates
            .iter()
            .map(|s| CandidateSummary {
                level: s.candidate.level,
                clique_size: s.candidate.inliers.len(),
                score: s.score,
                converged: s.candidate.converged,
                rotation: row_major(&s.candidate.rotation),
                translation: s.candidate.translation.into(),
            })
            .collect(),
        timings: StageTimings {
            correspondence_ms,
            graph_ms,
            clique_ms,
            estimate_ms,
            verify_ms,
        },
    };
    Ok(Detailed {
        report,
        result,
        source,
        target,
        correspondences,
        pyramid,
        cliques,
    })
}

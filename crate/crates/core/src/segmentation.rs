//! Plane-aided segmentation of a non-ground voxel map into plane, cluster
//! and line segments.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud_io::{neighbours26, PointCloud, VoxelCell, VoxelKey, VoxelMap};
use crate::error::{Error, Result};
use crate::gem::merge_moments;
use crate::geometry::{canonical_direction, mean_and_covariance, sorted_eigen, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveType {
    Plane,
    Cluster,
    Line,
}

impl PrimitiveType {
    pub const ALL: [PrimitiveType; 3] = [PrimitiveType::Plane, PrimitiveType::Cluster, PrimitiveType::Line];

    pub fn as_str(&self) -> &'static str {
        match self {
            PrimitiveType::Plane => "plane",
            PrimitiveType::Cluster => "cluster",
            PrimitiveType::Line => "line",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelLabel {
    Unassigned,
    Ground,
    Plane,
    Cluster,
    Line,
}

impl From<PrimitiveType> for VoxelLabel {
    fn from(t: PrimitiveType) -> Self {
        match t {
            PrimitiveType::Plane => VoxelLabel::Plane,
            PrimitiveType::Cluster => VoxelLabel::Cluster,
            PrimitiveType::Line => VoxelLabel::Line,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: usize,
    pub primitive: PrimitiveType,
    /// Member voxels, ascending.
    pub voxels: Vec<VoxelKey>,
    /// Indices into the segmented cloud, ascending.
    pub points: Vec<usize>,
    /// Unit plane normal (planes only).
    pub normal: Option<Vec3>,
    /// Unit line direction (lines only).
    pub direction: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCell {
    pub cell: VoxelCell,
    pub label: VoxelLabel,
    pub segment: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVoxelMap {
    pub voxel_size: f64,
    pub cells: BTreeMap<VoxelKey, SemanticCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaneParams {
    pub voxel_size: f64,
    /// Minimum λ2/λ3 for a voxel to count as planar.
    pub eigen_ratio: f64,
    /// Minimum |n1ᵀn2| for two plane voxels to merge.
    pub normal_threshold: f64,
    /// Maximum point-to-plane offset between merged centers (m).
    pub distance_threshold: f64,
}

impl Default for PlaneParams {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            eigen_ratio: 30.0,
            normal_threshold: 0.95,
            distance_threshold: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineParams {
    /// Point-to-line inlier distance (m).
    pub distance_threshold: f64,
    /// Minimum inlier ratio for a cluster to become a line.
    pub inlier_ratio: f64,
    pub iterations: usize,
}

impl Default for LineParams {
    fn default() -> Self {
        Self {
            distance_threshold: 0.5,
            inlier_ratio: 0.5,
            iterations: 100,
        }
    }
}

/// λ2/λ3 ≥ ratio on descending eigenvalues, written without division so
/// that a vanishing λ3 counts as perfectly planar. Collinear or point-like
/// spreads (λ2 ≈ 0) never qualify.
pub fn is_planar(eigenvalues: &Vec3, ratio: f64) -> bool {
    let (l2, l3) = (eigenvalues[1], eigenvalues[2].max(0.0));
    l2 > 1e-12 && l2 >= ratio * l3
}

/// Returns the voxel normal when the cell is planar.
pub fn classify_plane_voxel(cell: &VoxelCell, eigen_ratio: f64) -> Option<Vec3> {
    if cell.count < 3 {
        return None;
    }
    let (vals, vecs) = sorted_eigen(&cell.cov);
    is_planar(&vals, eigen_ratio).then(|| vecs.column(2).into_owned())
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so that labels do not depend on visit order.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Whether two plane patches with centers `p1`, `p2` and unit normals `n1`,
/// `n2` satisfy the distance and normal merge conditions.
pub fn planes_mergeable(p1: &Vec3, n1: &Vec3, p2: &Vec3, n2: &Vec3, params: &PlaneParams) -> bool {
    let d = p1 - p2;
    n1.dot(&d).abs() <= params.distance_threshold
        && n2.dot(&d).abs() <= params.distance_threshold
        && n1.dot(n2).abs() >= params.normal_threshold
}

/// Region-grows planar voxels into plane segments.
///
/// Plane voxels are joined when they are 26-adjacent and pass
/// [`planes_mergeable`]; segments are the connected components of that
/// relation, so the result does not depend on visiting order. Components
/// with fewer than `min_points` points, or whose merged covariance is no
/// longer planar, are dropped and their voxels stay unclaimed.
pub fn grow_planes(
    map: &VoxelMap,
    plane_voxels: &BTreeMap<VoxelKey, Vec3>,
    params: &PlaneParams,
    min_points: usize,
) -> Vec<Segment> {
    let keys: Vec<VoxelKey> = plane_voxels.keys().copied().collect();
    let index: BTreeMap<VoxelKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut dsu = DisjointSet::new(keys.len());
    for (i, key) in keys.iter().enumerate() {
        let (p1, n1) = (&map.cells[key].mean, &plane_voxels[key]);
        for nb in neighbours26(key) {
            let Some(&j) = index.get(&nb) else { continue };
            if j <= i {
                continue;
            }
            if planes_mergeable(p1, n1, &map.cells[&nb].mean, &plane_voxels[&nb], params) {
                dsu.union(i, j);
            }
        }
    }

    let mut components: BTreeMap<usize, Vec<VoxelKey>> = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        components.entry(dsu.find(i)).or_default().push(*key);
    }

    let mut planes = Vec::new();
    for voxels in components.into_values() {
        let cells: Vec<&VoxelCell> = voxels.iter().map(|k| &map.cells[k]).collect();
        let total: usize = cells.iter().map(|c| c.count).sum();
        if total < min_points {
            continue;
        }
        let Ok((_, cov)) = merge_moments(cells.iter().copied()) else { continue };
        let (vals, vecs) = sorted_eigen(&cov);
        if !is_planar(&vals, params.eigen_ratio) {
            continue;
        }
        let normal = canonical_direction(vecs.column(2).into_owned());
        planes.push(Segment {
            id: 0,
            primitive: PrimitiveType::Plane,
            points: sorted_points(&cells),
            voxels,
            normal: Some(normal),
            direction: None,
        });
    }
    planes
}

fn sorted_points(cells: &[&VoxelCell]) -> Vec<usize> {
    let mut pts: Vec<usize> = cells.iter().flat_map(|c| c.points.iter().copied()).collect();
    pts.sort_unstable();
    pts
}

/// Connected components (26-adjacency) of the voxels not in `claimed`.
/// Components with fewer than `min_points` points are discarded.
pub fn cluster_remaining(map: &VoxelMap, claimed: &BTreeSet<VoxelKey>, min_points: usize) -> Vec<Segment> {
    let mut visited: BTreeSet<VoxelKey> = BTreeSet::new();
    let mut clusters = Vec::new();
    for key in map.cells.keys() {
        if claimed.contains(key) || visited.contains(key) {
            continue;
        }
        let mut voxels = Vec::new();
        let mut queue = VecDeque::from([*key]);
        visited.insert(*key);
        while let Some(k) = queue.pop_front() {
            voxels.push(k);
            for nb in neighbours26(&k) {
                if map.cells.contains_key(&nb) && !claimed.contains(&nb) && visited.insert(nb) {
                    queue.push_back(nb);
                }
            }
        }
        voxels.sort_unstable();
        let cells: Vec<&VoxelCell> = voxels.iter().map(|k| &map.cells[k]).collect();
        if cells.iter().map(|c| c.count).sum::<usize>() < min_points {
            continue;
        }
        clusters.push(Segment {
            id: 0,
            primitive: PrimitiveType::Cluster,
            points: sorted_points(&cells),
            voxels,
            normal: None,
            direction: None,
        });
    }
    clusters
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub is_line: bool,
    pub inlier_ratio: f64,
    pub direction: Vec3,
}

fn point_line_distance(p: &Vec3, origin: &Vec3, dir: &Vec3) -> f64 {
    let d = p - origin;
    (d - dir * dir.dot(&d)).norm()
}

/// Random-sampling line fit. The cluster is a line when the best
/// consensus set holds at least `inlier_ratio` of the points. The returned
/// direction is the principal axis of the consensus set.
pub fn classify_line(points: &[Vec3], params: &LineParams, rng: &mut ChaCha8Rng) -> LineFit {
    let n = points.len();
    let fallback_dir = || {
        let (_, _, cov) = mean_and_covariance(points.iter());
        let (_, vecs) = sorted_eigen(&cov);
        canonical_direction(vecs.column(0).into_owned())
    };
    if n < 2 {
        return LineFit {
            is_line: false,
            inlier_ratio: 0.0,
            direction: Vec3::x(),
        };
    }
    let mut best: Option<(usize, Vec3, Vec3)> = None;
    for _ in 0..params.iterations {
        let idx = sample(rng, n, 2);
        let (a, b) = (points[idx.index(0)], points[idx.index(1)]);
        let span = b - a;
        let len = span.norm();
        if len < 1e-9 {
            continue;
        }
        let dir = span / len;
        let count = points
            .iter()
            .filter(|p| point_line_distance(p, &a, &dir) <= params.distance_threshold)
            .count();
        if best.as_ref().map_or(true, |(c, _, _)| count > *c) {
            best = Some((count, a, dir));
        }
    }
    let Some((count, origin, dir)) = best else {
        return LineFit {
            is_line: params.inlier_ratio <= 0.0,
            inlier_ratio: 0.0,
            direction: fallback_dir(),
        };
    };
    let inliers: Vec<Vec3> = points
        .iter()
        .filter(|p| point_line_distance(p, &origin, &dir) <= params.distance_threshold)
        .copied()
        .collect();
    let (_, _, cov) = mean_and_covariance(inliers.iter());
    let (vals, vecs) = sorted_eigen(&cov);
    let principal = if vals[0] > 0.0 { vecs.column(0).into_owned() } else { dir };
    let direction = canonical_direction(principal);
    let ratio = count as f64 / n as f64;
    LineFit {
        is_line: ratio >= params.inlier_ratio,
        inlier_ratio: ratio,
        direction,
    }
}

/// Deterministic per-segment generator: one ChaCha stream per segment id.
pub fn segment_rng(seed: u64, segment_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(segment_id as u64);
    rng
}

/// Labels every voxel with the primitive and id of the segment that owns
/// it; voxels claimed by no segment are `Unassigned`.
pub fn relabel_voxels(segments: &[Segment], map: &VoxelMap) -> Result<SemanticVoxelMap> {
    let mut cells: BTreeMap<VoxelKey, SemanticCell> = map
        .cells
        .iter()
        .map(|(k, c)| {
            (
                *k,
                SemanticCell {
                    cell: c.clone(),
                    label: VoxelLabel::Unassigned,
                    segment: None,
                },
            )
        })
        .collect();
    for seg in segments {
        for key in &seg.voxels {
            let entry = cells.get_mut(key).ok_or_else(|| {
                Error::InvalidArgument(format!("segment {} references unknown voxel {key:?}", seg.id))
            })?;
            if let Some(first) = entry.segment {
                return Err(Error::OverlappingClaim {
                    key: *key,
                    first,
                    second: seg.id,
                });
            }
            entry.label = seg.primitive.into();
            entry.segment = Some(seg.id);
        }
    }
    Ok(SemanticVoxelMap {
        voxel_size: map.voxel_size,
        cells,
    })
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub map: VoxelMap,
    pub segments: Vec<Segment>,
    pub semantic: SemanticVoxelMap,
}

impl Segmentation {
    pub fn count(&self, t: PrimitiveType) -> usize {
        self.segments.iter().filter(|s| s.primitive == t).count()
    }
}

/// Full segmentation of a (ground-free) cloud. Segment ids are dense:
/// planes first, then clusters in voxel-key order; line detection relabels
/// clusters in place.
pub fn segment_cloud(
    cloud: &PointCloud,
    plane: &PlaneParams,
    line: &LineParams,
    min_points: usize,
    seed: u64,
) -> Result<Segmentation> {
    let map = crate::cloud_io::voxelize(cloud, plane.voxel_size)?;
    let plane_voxels: BTreeMap<VoxelKey, Vec3> = map
        .cells
        .par_iter()
        .filter_map(|(k, c)| classify_plane_voxel(c, plane.eigen_ratio).map(|n| (*k, n)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let planes = grow_planes(&map, &plane_voxels, plane, min_points);
    let claimed: BTreeSet<VoxelKey> = planes.iter().flat_map(|s| s.voxels.iter().copied()).collect();
    let clusters = cluster_remaining(&map, &claimed, min_points);

    let mut segments: Vec<Segment> = planes.into_iter().chain(clusters).collect();
    for (i, s) in segments.iter_mut().enumerate() {
        s.id = i;
    }
    let fits: Vec<Option<LineFit>> = segments
        .par_iter()
        .map(|s| {
            (s.primitive == PrimitiveType::Cluster).then(|| {
                let pts: Vec<Vec3> = s.points.iter().map(|&i| cloud.points[i]).collect();
                classify_line(&pts, line, &mut segment_rng(seed, s.id))
            })
        })
        .collect();
    for (s, fit) in segments.iter_mut().zip(fits) {
        if let Some(fit) = fit.filter(|f| f.is_line) {
            s.primitive = PrimitiveType::Line;
            s.direction = Some(fit.direction);
        }
    }
    let semantic = relabel_voxels(&segments, &map)?;
    Ok(Segmentation {
        map,
        segments,
        semantic,
    })
}

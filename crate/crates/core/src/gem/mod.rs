//! Gaussian ellipsoid models: a segment's statistical Gaussian together with
//! a pseudo-Gaussian whose confidence ellipsoid is inscribed in the
//! segment's minimum oriented bounding box.

pub mod obb;

use std::cmp::Ordering;

use crate::cloud_io::{PointCloud, VoxelCell, VoxelMap};
use crate::error::{Error, Result};
use crate::geometry::{sorted_eigen, symmetrize, Mat3, Vec3};
use crate::segmentation::Segment;

pub use crate::segmentation::PrimitiveType;
pub use obb::{fit_obb, Obb};

/// χ² value (3 DoF, 95 %) sizing the center ellipsoid inside the box.
pub const OBE_CHI2: f64 = 7.815;

/// Smallest box side used for the pseudo covariance (m).
pub const EXTENT_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Gem {
    pub segment_id: usize,
    pub primitive: PrimitiveType,
    pub point_count: usize,
    /// Statistical center (m).
    pub mean: Vec3,
    /// Statistical population covariance (m²).
    pub cov: Mat3,
    /// Pseudo covariance of the center (m²).
    pub pseudo_cov: Mat3,
    /// Eigenvalues of `pseudo_cov`, descending, paired with `extents`.
    pub pseudo_eigenvalues: Vec3,
    /// Box axes as columns, ordered like `extents`.
    pub orientation: Mat3,
    /// Floored box sides (m), descending.
    pub extents: Vec3,
    pub obb: Obb,
    /// Area (plane), volume (cluster) or length (line) of the box.
    pub salience: f64,
}

/// Combines per-voxel moments into the moments of the union of their
/// points. Uses the mean-shifted form of the pooled covariance, which is
/// algebraically the same as `Σ Nₖ(Σₖ + μₖμₖᵀ)/N − μμᵀ` but does not cancel
/// catastrophically far from the origin.
pub fn merge_moments<'a>(cells: impl IntoIterator<Item = &'a VoxelCell> + Clone) -> Result<(Vec3, Mat3)> {
    let mut total = 0usize;
    let mut mean = Vec3::zeros();
    for c in cells.clone() {
        total += c.count;
        mean += c.mean * c.count as f64;
    }
    if total == 0 {
        return Err(Error::Empty("moment merge over zero points"));
    }
    mean /= total as f64;
    let mut cov = Mat3::zeros();
    for c in cells {
        let d = c.mean - mean;
        cov += (c.cov + d * d.transpose()) * c.count as f64;
    }
    Ok((mean, symmetrize(&(cov / total as f64))))
}

/// `λ̂ᵢ = (sᵢ / (2√χ²))²`, `Σ̂ = R diag(λ̂) Rᵀ`.
pub fn obe_pseudo_covariance(orientation: &Mat3, extents: &Vec3, chi2: f64) -> Result<(Mat3, Vec3)> {
    if !(chi2 > 0.0) {
        return Err(Error::InvalidArgument(format!("chi-square value must be positive, got {chi2}")));
    }
    let half_root = 2.0 * chi2.sqrt();
    let lambda = extents.map(|s| (s / half_root).powi(2));
    let cov = orientation * Mat3::from_diagonal(&lambda) * orientation.transpose();
    Ok((symmetrize(&cov), lambda))
}

/// Assembles the model of one segment. `cloud` is the cloud the segment's
/// point indices refer to and `map` its voxelization.
pub fn build_gem(seg: &Segment, map: &VoxelMap, cloud: &PointCloud) -> Result<Gem> {
    let cells: Vec<&VoxelCell> = seg
        .voxels
        .iter()
        .map(|k| {
            map.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("segment {} references unknown voxel {k:?}", seg.id)))
        })
        .collect::<Result<_>>()?;
    let (mean, cov) = merge_moments(cells.iter().copied())?;
    let point_count = cells.iter().map(|c| c.count).sum();

    let axis = match seg.primitive {
        PrimitiveType::Plane => seg.normal,
        PrimitiveType::Line => seg.direction,
        PrimitiveType::Cluster => None,
    }
    .unwrap_or_else(|| sorted_eigen(&cov).1.column(2).into_owned());

    let points: Vec<Vec3> = seg.points.iter().map(|&i| cloud.points[i]).collect();
    let obb = fit_obb(&points, &axis)?;
    let extents = obb.extents.map(|s| s.max(EXTENT_FLOOR));
    let (pseudo_cov, pseudo_eigenvalues) = obe_pseudo_covariance(&obb.orientation, &extents, OBE_CHI2)?;
    let salience = match seg.primitive {
        PrimitiveType::Plane => extents[0] * extents[1],
        PrimitiveType::Cluster => extents[0] * extents[1] * extents[2],
        PrimitiveType::Line => extents[0],
    };
    Ok(Gem {
        segment_id: seg.id,
        primitive: seg.primitive,
        point_count,
        mean,
        cov,
        pseudo_cov,
        pseudo_eigenvalues,
        orientation: obb.orientation,
        extents,
        obb,
        salience,
    })
}

/// Keeps the `j` most salient models of each primitive type. Output is
/// grouped by type (plane, cluster, line), each group by descending
/// salience with ties going to the lower segment id.
pub fn select_top_j(gems: &[Gem], j: usize) -> Vec<Gem> {
    let mut out = Vec::new();
    for t in PrimitiveType::ALL {
        let mut group: Vec<&Gem> = gems.iter().filter(|g| g.primitive == t).collect();
        group.sort_by(|a, b| {
            b.salience
                .partial_cmp(&a.salience)
                .unwrap_or(Ordering::Equal)
                .then(a.segment_id.cmp(&b.segment_id))
        });
        out.extend(group.into_iter().take(j).cloned());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud_io::voxelize;
    use crate::geometry::{mean_and_covariance, rotation_from_euler};
    use approx::assert_relative_eq;

    fn cell(count: usize, mean: Vec3, cov: Mat3) -> VoxelCell {
        VoxelCell {
            key: [0, 0, 0],
            count,
            mean,
            cov,
            points: vec![],
        }
    }

    #[test]
    fn merge_single_cell_is_identity() {
        let c = cell(4, Vec3::new(1.0, 2.0, 3.0), Mat3::from_diagonal(&Vec3::new(0.2, 0.1, 0.05)));
        let (m, s) = merge_moments([&c]).unwrap();
        assert_eq!(m, c.mean);
        assert_relative_eq!(s, c.cov, epsilon = 1e-15);
    }

    #[test]
    fn merge_two_points() {
        let a = cell(1, Vec3::zeros(), Mat3::zeros());
        let b = cell(1, Vec3::new(2.0, 0.0, 0.0), Mat3::zeros());
        let (m, s) = merge_moments([&a, &b]).unwrap();
        assert_eq!(m, Vec3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(s, Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0)), epsilon = 1e-15);
        assert!(merge_moments(std::iter::empty::<&VoxelCell>()).is_err());
    }

    #[test]
    fn merge_matches_direct_moments() {
        let pts: Vec<Vec3> = (0..200)
            .map(|i| {
                let f = i as f64;
                Vec3::new(30.0 + (f * 0.37).sin() * 3.0, -12.0 + (f * 0.11).cos() * 2.0, (f * 0.05).sin())
            })
            .collect();
        let map = voxelize(&PointCloud::new(pts.clone()), 0.7).unwrap();
        let (m, s) = merge_moments(map.cells.values()).unwrap();
        let (_, dm, ds) = mean_and_covariance(pts.iter());
        assert!((m - dm).norm() / dm.norm() < 1e-12);
        assert!((s - ds).norm() / ds.norm() < 1e-12);
    }

    #[test]
    fn pseudo_covariance_values() {
        let (_, l) = obe_pseudo_covariance(&Mat3::identity(), &Vec3::new(4.0, 2.0, 2.0), 7.815).unwrap();
        assert_relative_eq!(l, Vec3::new(0.511836, 0.127959, 0.127959), epsilon = 1e-5);

        let s = 2.0 * 7.815f64.sqrt();
        let r = rotation_from_euler(0.3, -0.2, 1.0);
        let (cov, l) = obe_pseudo_covariance(&r, &Vec3::new(s, s, s), 7.815).unwrap();
        assert_relative_eq!(l, Vec3::new(1.0, 1.0, 1.0), epsilon = 1e-12);
        assert_relative_eq!(cov, Mat3::identity(), epsilon = 1e-12);
        assert!(obe_pseudo_covariance(&r, &l, 0.0).is_err());
    }

    fn fake_gem(id: usize, primitive: PrimitiveType, salience: f64) -> Gem {
        Gem {
            segment_id: id,
            primitive,
            point_count: 10,
            mean: Vec3::zeros(),
            cov: Mat3::identity(),
            pseudo_cov: Mat3::identity(),
            pseudo_eigenvalues: Vec3::new(1.0, 1.0, 1.0),
            orientation: Mat3::identity(),
            extents: Vec3::new(1.0, 1.0, 1.0),
            obb: Obb {
                center: Vec3::zeros(),
                orientation: Mat3::identity(),
                extents: Vec3::new(1.0, 1.0, 1.0),
            },
            salience,
        }
    }

    #[test]
    fn top_j_semantics() {
        let planes: Vec<Gem> = (0..3).map(|i| fake_gem(i, PrimitiveType::Plane, i as f64)).collect();
        assert_eq!(select_top_j(&planes, 50).len(), 3);

        let clusters: Vec<Gem> = (0..60).map(|i| fake_gem(i, PrimitiveType::Cluster, i as f64)).collect();
        let top = select_top_j(&clusters, 50);
        assert_eq!(top.len(), 50);
        assert_eq!(top[0].segment_id, 59);
        assert!(top.iter().all(|g| g.segment_id >= 10));

        let tied = vec![
            fake_gem(7, PrimitiveType::Line, 2.0),
            fake_gem(3, PrimitiveType::Line, 1.0),
            fake_gem(5, PrimitiveType::Line, 1.0),
        ];
        let top = select_top_j(&tied, 2);
        assert_eq!(top.iter().map(|g| g.segment_id).collect::<Vec<_>>(), vec![7, 3]);
    }
}

//! Putative correspondences between same-type models by mutual K-nearest
//! neighbours over a Gaussian Wasserstein distance.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gem::{Gem, PrimitiveType};
use crate::geometry::{floor_eigenvalues, psd_sqrt, Mat3, Vec3};

/// Eigenvalue floor applied to statistical covariances before the matrix
/// square roots (m²).
pub const COV_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub primitive: PrimitiveType,
    /// Index into the source model list.
    pub x: usize,
    /// Index into the target model list.
    pub y: usize,
    /// Wasserstein score (m²).
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationParams {
    /// Models kept per primitive type.
    pub top_j: usize,
    /// Neighbourhood size of the mutual matching.
    pub k: usize,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self { top_j: 50, k: 20 }
    }
}

/// Transform aligning the box frame of `x` onto that of `y`:
/// `R = R_o(y) R_o(x)ᵀ`, `t = μ_y − R μ_x`.
pub fn alignment_substitute(x: &Gem, y: &Gem) -> (Mat3, Vec3) {
    let r = y.orientation * x.orientation.transpose();
    (r, y.mean - r * x.mean)
}

/// The four proper sign assignments of a frame's axes.
pub const AXIS_FLIPS: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];

/// 2-Wasserstein distance (squared) between `N(R μ_x + t, R Σ_x Rᵀ)` and
/// `N(μ_y, Σ_y)`.
pub fn wasserstein_distance(mu_x: &Vec3, cov_x: &Mat3, mu_y: &Vec3, cov_y: &Mat3, r: &Mat3, t: &Vec3) -> f64 {
    let mean_term = (r * mu_x + t - mu_y).norm_squared();
    let cx = r * floor_eigenvalues(cov_x, COV_FLOOR) * r.transpose();
    let cy = floor_eigenvalues(cov_y, COV_FLOOR);
    (mean_term + bures_term(&cx, &cy)).max(0.0)
}

/// `Tr(A + B − 2 (A^½ B A^½)^½)` for symmetric PSD `A`, `B`.
pub fn bures_term(a: &Mat3, b: &Mat3) -> f64 {
    let ra = psd_sqrt(a);
    let inner = psd_sqrt(&(ra * b * ra));
    (a.trace() + b.trace() - 2.0 * inner.trace()).max(0.0)
}

/// Matching score between two models: the covariance term of the
/// Wasserstein distance under the substitute alignment, minimised over the
/// four sign assignments of the source box frame. The mean term vanishes
/// under the substitute transform.
pub fn gem_distance(x: &Gem, y: &Gem) -> f64 {
    let cx = floor_eigenvalues(&x.cov, COV_FLOOR);
    let cy = floor_eigenvalues(&y.cov, COV_FLOOR);
    AXIS_FLIPS
        .iter()
        .map(|f| {
            let flip = Mat3::from_diagonal(&Vec3::new(f[0], f[1], f[2]));
            let r = y.orientation * flip * x.orientation.transpose();
            bures_term(&(r * cx * r.transpose()), &cy)
        })
        .fold(f64::INFINITY, f64::min)
}

fn k_nearest(row: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut v: Vec<(usize, f64)> = row.collect();
    v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Mutual K-nearest-neighbour matching within each primitive type. Output
/// is sorted by ascending distance, ties by type then indices.
pub fn mknn_match(xs: &[Gem], ys: &[Gem], k: usize) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for t in PrimitiveType::ALL {
        let xi: Vec<usize> = (0..xs.len()).filter(|&i| xs[i].primitive == t).collect();
        let yi: Vec<usize> = (0..ys.len()).filter(|&i| ys[i].primitive == t).collect();
        if xi.is_empty() || yi.is_empty() || k == 0 {
            continue;
        }
        let dist: Vec<Vec<f64>> = xi
            .par_iter()
            .map(|&a| yi.iter().map(|&b| gem_distance(&xs[a], &ys[b])).collect())
            .collect();
        let x_knn: Vec<Vec<usize>> = (0..xi.len())
            .map(|a| k_nearest(dist[a].iter().copied().enumerate(), k))
            .collect();
        let y_knn: Vec<Vec<usize>> = (0..yi.len())
            .map(|b| k_nearest((0..xi.len()).map(|a| (a, dist[a][b])), k))
            .collect();
        for (a, nbrs) in x_knn.iter().enumerate() {
            for &b in nbrs {
                if y_knn[b].contains(&a) {
                    out.push(Correspondence {
                        primitive: t,
                        x: xi[a],
                        y: yi[b],
                        distance: dist[a][b],
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(Ordering::Equal)
            .then(a.primitive.cmp(&b.primitive))
            .then(a.x.cmp(&b.x))
            .then(a.y.cmp(&b.y))
    });
    out
}

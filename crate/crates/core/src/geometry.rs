//! Small linear-algebra helpers shared by the pipeline stages.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Symmetric eigen-decomposition with eigenvalues sorted in descending
/// order. Column `i` of the returned matrix is the eigenvector of the
/// `i`-th eigenvalue.
pub fn sorted_eigen(m: &Mat3) -> (Vec3, Mat3) {
    let eig = symmetrize(m).symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vec3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let vectors = Mat3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    (values, vectors)
}

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Rebuilds `V diag(f(λ)) Vᵀ` from a symmetric matrix.
pub fn map_eigenvalues(m: &Mat3, f: impl Fn(f64) -> f64) -> Mat3 {
    let eig = symmetrize(m).symmetric_eigen();
    let d = Mat3::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// are clamped to zero first.
pub fn psd_sqrt(m: &Mat3) -> Mat3 {
    map_eigenvalues(m, |l| l.max(0.0).sqrt())
}

pub fn floor_eigenvalues(m: &Mat3, floor: f64) -> Mat3 {
    map_eigenvalues(m, |l| l.max(floor))
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn exp_so3(w: &Vec3) -> Mat3 {
    Rotation3::new(*w).into_inner()
}

/// Closest proper rotation in Frobenius norm.
pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Geodesic angle of a rotation, in radians.
pub fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Rotation about +z by `yaw` radians composed with small roll and pitch.
pub fn rotation_from_euler(roll: f64, pitch: f64, yaw: f64) -> Mat3 {
    Rotation3::from_euler_angles(roll, pitch, yaw).into_inner()
}

/// Weighted closed-form point-to-point alignment (Horn / Kabsch):
/// the `(R, t)` minimising `Σ wᵢ ‖dstᵢ − (R srcᵢ + t)‖²`.
/// Returns `None` when the total weight vanishes.
pub fn weighted_horn(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Option<(Mat3, Vec3)> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || src.is_empty() {
        return None;
    }
    let mut cs = Vec3::zeros();
    let mut cd = Vec3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cs += s * *w;
        cd += d * *w;
    }
    cs /= total;
    cd /= total;
    let mut h = Mat3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        h += (d - cd) * (s - cs).transpose() * *w;
    }
    let r = project_to_so3(&h);
    Some((r, cd - r * cs))
}

/// Orders a right-handed frame deterministically: the first column gets a
/// non-negative x (ties broken on y, then z), the second likewise, and the
/// third is their cross product.
pub fn canonical_frame(first: Vec3, second: Vec3) -> Mat3 {
    let a = canonical_direction(first.normalize());
    let b = canonical_direction((second - a * a.dot(&second)).normalize());
    Mat3::from_columns(&[a, b, a.cross(&b)])
}

/// Flips `v` so that its first non-zero component is positive.
pub fn canonical_direction(v: Vec3) -> Vec3 {
    const EPS: f64 = 1e-12;
    for i in 0..3 {
        if v[i] > EPS {
            return v;
        }
        if v[i] < -EPS {
            return -v;
        }
    }
    v
}

/// Population mean and covariance of a point set (two-pass).
pub fn mean_and_covariance<'a>(points: impl Iterator<Item = &'a Vec3> + Clone) -> (usize, Vec3, Mat3) {
    let mut n = 0usize;
    let mut mean = Vec3::zeros();
    for p in points.clone() {
        n += 1;
        mean += p;
    }
    if n == 0 {
        return (0, mean, Mat3::zeros());
    }
    mean /= n as f64;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    (n, mean, symmetrize(&(cov / n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigen_sorted_descending() {
        let m = Mat3::from_diagonal(&Vec3::new(0.1, 10.0, 5.0));
        let (vals, vecs) = sorted_eigen(&m);
        assert_relative_eq!(vals, Vec3::new(10.0, 5.0, 0.1), epsilon = 1e-12);
        assert_relative_eq!(vecs.column(0).x.abs(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(vecs.column(0).y.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = Mat3::new(2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.7);
        let s = psd_sqrt(&m);
        assert_relative_eq!(s * s, m, epsilon = 1e-12);
    }

    #[test]
    fn horn_recovers_pose() {
        let r = rotation_from_euler(0.1, -0.2, 2.5);
        let t = Vec3::new(1.0, -2.0, 3.0);
        let src = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.0, 0.0, 3.0),
        ];
        let dst: Vec<_> = src.iter().map(|p| r * p + t).collect();
        let (re, te) = weighted_horn(&src, &dst, &[1.0; 4]).unwrap();
        assert_relative_eq!(re, r, epsilon = 1e-12);
        assert_relative_eq!(te, t, epsilon = 1e-12);
    }

    #[test]
    fn canonical_frame_is_proper() {
        let f = canonical_frame(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, -1.0));
        assert_relative_eq!(f.determinant(), 1.0, epsilon = 1e-12);
        assert!(f.column(0).x > 0.0);
    }
}

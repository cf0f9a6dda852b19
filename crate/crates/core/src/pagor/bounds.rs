//! Scalar ingredients of the compatibility test.

use statrs::function::erf::{erf, erfc};

use crate::error::{Error, Result};
use crate::geometry::{sorted_eigen, Mat3, Vec3};

/// Difference of the two translation-and-rotation invariant lengths of a
/// correspondence pair: `| ‖xᵢ − xⱼ‖ − ‖yᵢ − yⱼ‖ |`.
pub fn trim_gap(xi: &Vec3, xj: &Vec3, yi: &Vec3, yj: &Vec3) -> f64 {
    ((xi - xj).norm() - (yi - yj).norm()).abs()
}

/// The three cheap upper bounds on `λ₁(Σ₁ + Σ₂)`: column-sum
/// (Perron–Frobenius), trace-moment (Wolkowicz–Styan) and Weyl.
/// `l1_a`, `l1_b` are the largest eigenvalues of the two summands.
pub fn eigenvalue_bounds(a: &Mat3, l1_a: f64, b: &Mat3, l1_b: f64) -> [f64; 3] {
    let s = a + b;
    let ub1 = (0..3)
        .map(|j| (0..3).map(|i| s[(i, j)].abs()).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    let m = s.trace() / 3.0;
    let s2 = ((s * s).trace() / 3.0 - m * m).max(0.0);
    let ub2 = m + (2.0 * s2).sqrt();
    let ub3 = l1_a + l1_b;
    [ub1, ub2, ub3]
}

/// Smallest of the three bounds; never below `λ₁(Σ₁ + Σ₂)` for PSD inputs.
pub fn upper_eigenvalue(a: &Mat3, b: &Mat3) -> f64 {
    let l1 = |m: &Mat3| sorted_eigen(m).0[0];
    upper_eigenvalue_with(a, l1(a), b, l1(b))
}

/// As [`upper_eigenvalue`] with precomputed largest eigenvalues.
pub fn upper_eigenvalue_with(a: &Mat3, l1_a: f64, b: &Mat3, l1_b: f64) -> f64 {
    let [u1, u2, u3] = eigenvalue_bounds(a, l1_a, b, l1_b);
    u1.min(u2).min(u3)
}

fn survival_3dof(x: f64) -> f64 {
    let h = (0.5 * x).sqrt();
    erfc(h) + (2.0 * x / std::f64::consts::PI).sqrt() * (-0.5 * x).exp()
}

fn cdf_3dof(x: f64) -> f64 {
    let h = (0.5 * x).sqrt();
    erf(h) - (2.0 * x / std::f64::consts::PI).sqrt() * (-0.5 * x).exp()
}

/// Three-DoF χ² value whose upper-tail probability is `p`. Solved by
/// bisection on the closed-form distribution function for three degrees
/// of freedom.
pub fn chi2_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("tail probability must lie in (0, 1), got {p}")));
    }
    // Evaluate whichever tail is small to avoid cancellation.
    let excess = |x: f64| {
        if p < 0.5 {
            p - survival_3dof(x)
        } else {
            cdf_3dof(x) - (1.0 - p)
        }
    };
    let mut hi = 1.0;
    while excess(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trim_examples() {
        let g = trim_gap(&Vec3::zeros(), &Vec3::new(3.0, 0.0, 0.0), &Vec3::new(10.0, 0.0, 0.0), &Vec3::new(10.0, 4.0, 0.0));
        assert_eq!(g, 1.0);
        let (a, b) = (Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.5, 2.0));
        let r = crate::geometry::rotation_from_euler(0.3, 0.2, -1.1);
        let t = Vec3::new(5.0, 6.0, 7.0);
        assert!(trim_gap(&a, &b, &(r * a + t), &(r * b + t)) < 1e-12);
        assert_eq!(trim_gap(&a, &b, &t, &r.column(0).into_owned()), trim_gap(&b, &a, &r.column(0).into_owned(), &t));
    }

    #[test]
    fn bounds_on_identity() {
        let i = Mat3::identity();
        assert_eq!(eigenvalue_bounds(&i, 1.0, &i, 1.0), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn bounds_on_rank_one_sum() {
        let b = Mat3::new(1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let [u1, u2, u3] = eigenvalue_bounds(&Mat3::identity(), 1.0, &b, 2.0);
        assert_relative_eq!(u1, 3.0, epsilon = 1e-12);
        assert_relative_eq!(u2, 3.0, epsilon = 1e-12);
        assert_relative_eq!(u3, 3.0, epsilon = 1e-12);
        assert_relative_eq!(upper_eigenvalue(&Mat3::identity(), &b), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn chi2_reference_values() {
        assert_relative_eq!(chi2_quantile(0.05).unwrap(), 7.815, epsilon = 5e-4);
        assert_relative_eq!(chi2_quantile(0.01).unwrap(), 11.345, epsilon = 5e-4);
        for (p, v) in [(0.99, 0.1148), (0.95, 0.3518), (0.9, 0.5844), (0.8, 1.0052)] {
            assert_relative_eq!(chi2_quantile(p).unwrap(), v, epsilon = 5e-5);
        }
        assert!(chi2_quantile(0.0).is_err());
        assert!(chi2_quantile(1.0).is_err());
    }
}

//! Robust pose from matched Gaussians: truncated least squares over
//! distribution-to-distribution residuals, solved by graduated
//! non-convexity with a damped Gauss-Newton pose step.

use serde::{Deserialize, Serialize};

use crate::association::Correspondence;
use crate::error::{Error, Result};
use crate::gem::{Gem, PrimitiveType};
use crate::geometry::{exp_so3, floor_eigenvalues, project_to_so3, skew, sorted_eigen, weighted_horn, Mat3, Vec3};
use crate::pagor::chi2_quantile;

/// Eigenvalue floor for non-plane covariances (m²).
pub const COV_FLOOR: f64 = 1e-3;

/// Eigenvalues given to plane covariances, largest first.
pub const PLANE_EIGENVALUES: [f64; 3] = [1.0, 1.0, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorParams {
    /// Tail probability defining the truncation threshold `c̄²`.
    pub cbar_p: f64,
    /// Multiplier of the GNC control parameter per outer iteration.
    pub gnc_factor: f64,
    pub max_iters: usize,
    /// Convergence tolerance on the max-norm weight change.
    pub weight_tol: f64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            cbar_p: 0.01,
            gnc_factor: 1.4,
            max_iters: 100,
            weight_tol: 1e-3,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gnc_factor > 1.0) {
            return Err(Error::Config(format!("estimator.gnc_factor must exceed 1, got {}", self.gnc_factor)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("estimator.max_iters must be positive".into()));
        }
        if !(self.weight_tol > 0.0) {
            return Err(Error::Config("estimator.weight_tol must be positive".into()));
        }
        chi2_quantile(self.cbar_p).map_err(|e| Error::Config(format!("estimator.cbar_p: {e}")))?;
        Ok(())
    }

    pub fn cbar2(&self) -> Result<f64> {
        chi2_quantile(self.cbar_p)
    }
}

/// One matched pair of Gaussians with solver-ready covariances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct D2dPair {
    pub mu_x: Vec3,
    pub cov_x: Mat3,
    pub mu_y: Vec3,
    pub cov_y: Mat3,
}

impl D2dPair {
    pub fn from_gems(x: &Gem, y: &Gem) -> Self {
        Self {
            mu_x: x.mean,
            cov_x: prepare_cov(x),
            mu_y: y.mean,
            cov_y: prepare_cov(y),
        }
    }
}

/// Replaces a plane covariance's eigenvalues with `(1, 1, 1e-3)`, keeping
/// its eigenvectors.
pub fn regularize_plane_cov(cov: &Mat3) -> Mat3 {
    let (_, v) = sorted_eigen(cov);
    v * Mat3::from_diagonal(&Vec3::from(PLANE_EIGENVALUES)) * v.transpose()
}

/// Planes are regularized, everything else gets the eigenvalue floor.
pub fn prepare_cov(g: &Gem) -> Mat3 {
    match g.primitive {
        PrimitiveType::Plane => regularize_plane_cov(&g.cov),
        _ => floor_eigenvalues(&g.cov, COV_FLOOR),
    }
}

/// `dᵀ (Σ_y + R Σ_x Rᵀ)⁻¹ d` with `d = μ_y − (R μ_x + t)`.
pub fn d2d_residual(pair: &D2dPair, r: &Mat3, t: &Vec3) -> Result<f64> {
    let d = pair.mu_y - (r * pair.mu_x + t);
    let c = pair.cov_y + r * pair.cov_x * r.transpose();
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::Numerical("combined covariance is not positive definite".into()))?;
    Ok(d.dot(&chol.solve(&d)).max(0.0))
}

fn residuals(pairs: &[D2dPair], r: &Mat3, t: &Vec3) -> Result<Vec<f64>> {
    pairs.iter().map(|p| d2d_residual(p, r, t)).collect()
}

/// `Σ wₖ rₖ(Exp(ω) R₀, t₀ + τ)` and its gradient with respect to `(ω, τ)`
/// at `ω = τ = 0`.
pub fn weighted_objective_and_gradient(pairs: &[D2dPair], weights: &[f64], r: &Mat3, t: &Vec3) -> Result<(f64, [f64; 6])> {
    let mut f = 0.0;
    let mut grad = [0.0; 6];
    for (pair, &w) in pairs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let p = r * pair.mu_x;
        let s = r * pair.cov_x * r.transpose();
        let d = pair.mu_y - p - t;
        let chol = (pair.cov_y + s)
            .cholesky()
            .ok_or_else(|| Error::Numerical("combined covariance is not positive definite".into()))?;
        let a = chol.solve(&d);
        f += w * d.dot(&a);
        let g_rot = (a.cross(&p) + a.cross(&(s * a))) * (2.0 * w);
        let g_tr = a * (-2.0 * w);
        for i in 0..3 {
            grad[i] += g_rot[i];
            grad[i + 3] += g_tr[i];
        }
    }
    Ok((f, grad))
}

/// Evaluates the weighted objective at a perturbed pose; used by tests and
/// the line search.
pub fn weighted_objective(pairs: &[D2dPair], weights: &[f64], r: &Mat3, t: &Vec3) -> Result<f64> {
    Ok(residuals(pairs, r, t)?.iter().zip(weights).map(|(r, w)| r * w).sum())
}

/// `Σ min(rₖ, c̄²)`.
pub fn tls_objective(res: &[f64], cbar2: f64) -> f64 {
    res.iter().map(|r| r.min(cbar2)).sum()
}

/// Damped Gauss-Newton on the weighted objective. Information matrices are
/// recomputed before each step and held fixed while the step is solved.
fn refine_pose(pairs: &[D2dPair], weights: &[f64], mut r: Mat3, mut t: Vec3) -> Result<(Mat3, Vec3, f64)> {
    let mut cost = weighted_objective(pairs, weights, &r, &t)?;
    let mut lambda = 1e-4;
    for _ in 0..50 {
        let mut h = nalgebra::Matrix6::<f64>::zeros();
        let mut g = nalgebra::Vector6::<f64>::zeros();
        for (pair, &w) in pairs.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let p = r * pair.mu_x;
            let info = match (pair.cov_y + r * pair.cov_x * r.transpose()).try_inverse() {
                Some(m) => m,
                None => return Err(Error::Numerical("combined covariance is singular".into())),
            };
            let d = pair.mu_y - p - t;
            let mut j = nalgebra::Matrix3x6::<f64>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&p));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Mat3::identity()));
            let jt_info = j.transpose() * info * w;
            h += jt_info * j;
            g += jt_info * d;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-9);
            }
            let Some(step) = damped.cholesky().map(|c| -c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vec3::new(step[0], step[1], step[2]);
            let nr = project_to_so3(&(exp_so3(&w) * r));
            let nt = t + Vec3::new(step[3], step[4], step[5]);
            let ncost = weighted_objective(pairs, weights, &nr, &nt)?;
            if ncost <= cost {
                let done = step.norm() < 1e-10 || cost - ncost <= 1e-12 * cost.max(1e-300);
                r = nr;
                t = nt;
                cost = ncost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok((r, t, cost))
}

/// Closed-form TLS weights under the GNC surrogate with control `mu`.
pub fn gnc_weights(res: &[f64], cbar2: f64, mu: f64) -> Vec<f64> {
    let lo = mu / (mu + 1.0) * cbar2;
    let hi = (mu + 1.0) / mu * cbar2;
    res.iter()
        .map(|&r| {
            if r <= lo {
                1.0
            } else if r >= hi {
                0.0
            } else {
                ((cbar2 * mu * (mu + 1.0) / r).sqrt() - mu).clamp(0.0, 1.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GncSolution {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Best TLS objective after each outer iteration; non-increasing.
    pub objective_trace: Vec<f64>,
}

/// Graduated non-convexity over the truncated objective. Starts from
/// identity unless `seed` is given. Each outer iteration refines the pose
/// under the current weights, warm-started from whichever of the current
/// pose and the weighted closed-form alignment of the means scores lower,
/// then updates the weights. The pose with the lowest TLS objective seen is
/// returned.
pub fn gnc_tls_solve(pairs: &[D2dPair], params: &EstimatorParams, seed: Option<(Mat3, Vec3)>) -> Result<GncSolution> {
    if pairs.len() < 3 {
        return Err(Error::UnderConstrained(format!("{} correspondences, need at least 3", pairs.len())));
    }
    let spread = pairs.iter().map(|p| (p.mu_x - pairs[0].mu_x).norm()).fold(0.0, f64::max);
    if spread <= 1e-9 {
        return Err(Error::UnderConstrained("all source centers coincide".into()));
    }
    params.validate()?;
    let cbar2 = params.cbar2()?;
    let src: Vec<Vec3> = pairs.iter().map(|p| p.mu_x).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|p| p.mu_y).collect();

    let (mut r, mut t) = seed.unwrap_or((Mat3::identity(), Vec3::zeros()));
    let mut weights = vec![1.0; pairs.len()];
    let mut mu = None;
    let mut best = (r, t, tls_objective(&residuals(pairs, &r, &t)?, cbar2));
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iters {
        iterations += 1;
        if let Some((hr, ht)) = weighted_horn(&src, &dst, &weights) {
            if weighted_objective(pairs, &weights, &hr, &ht)? < weighted_objective(pairs, &weights, &r, &t)? {
                r = hr;
                t = ht;
            }
        }
        let (nr, nt, _) = refine_pose(pairs, &weights, r, t)?;
        r = nr;
        t = nt;
        let res = residuals(pairs, &r, &t)?;
        let obj = tls_objective(&res, cbar2);
        if obj < best.2 {
            best = (r, t, obj);
        }
        trace.push(best.2);

        let m = match mu {
            Some(m) => m * params.gnc_factor,
            None => {
                let rmax = res.iter().copied().fold(0.0, f64::max);
                if 2.0 * rmax <= cbar2 {
                    // Every residual is already inside the convex region.
                    weights = res.iter().map(|&x| if x <= cbar2 { 1.0 } else { 0.0 }).collect();
                    converged = true;
                    break;
                }
                cbar2 / (2.0 * rmax - cbar2)
            }
        };
        mu = Some(m);
        let new_w = gnc_weights(&res, cbar2, m);
        let change = new_w.iter().zip(&weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // The surrogate equals TLS once no residual sits in the transition
        // band; tiny but fractional weights early on do not count.
        let (lo, hi) = (m / (m + 1.0) * cbar2, (m + 1.0) / m * cbar2);
        let binary = res.iter().all(|&x| x <= lo || x >= hi);
        weights = new_w;
        if change < params.weight_tol && binary {
            converged = true;
            break;
        }
        if weights.iter().all(|w| *w == 0.0) {
            break;
        }
    }

    let (r, t, _) = best;
    let r = project_to_so3(&r);
    let final_res = residuals(pairs, &r, &t)?;
    let weights = if converged { weights } else { final_res.iter().map(|&x| if x <= cbar2 { 1.0 } else { 0.0 }).collect() };
    Ok(GncSolution {
        rotation: r,
        translation: t,
        weights,
        converged,
        iterations,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformationCandidate {
    pub rotation: Mat3,
    pub translation: Vec3,
    /// Pyramid level the inlier set came from (0-based).
    pub level: usize,
    /// Correspondence indices of the level's clique.
    pub inliers: Vec<usize>,
    /// Final weight per inlier.
    pub weights: Vec<f64>,
    pub converged: bool,
}

/// Estimates the candidate pose of one pyramid level from its clique.
pub fn estimate_candidate(
    level: usize,
    clique: &[usize],
    corrs: &[Correspondence],
    xs: &[Gem],
    ys: &[Gem],
    params: &EstimatorParams,
) -> Result<TransformationCandidate> {
    let pairs: Vec<D2dPair> = clique
        .iter()
        .map(|&i| D2dPair::from_gems(&xs[corrs[i].x], &ys[corrs[i].y]))
        .collect();
    let sol = gnc_tls_solve(&pairs, params, None)?;
    Ok(TransformationCandidate {
        rotation: sol.rotation,
        translation: sol.translation,
        level,
        inliers: clique.to_vec(),
        weights: sol.weights,
        converged: sol.converged,
    })
}

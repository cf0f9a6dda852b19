//! Outlier pruning with a pyramid of compatibility graphs.
//!
//! Each correspondence pair is tested once for length consistency; the
//! tolerance grows with a χ² value per level, so the graphs get denser from
//! level to level and every edge set contains the previous one. One maximum
//! clique is extracted per level.

pub mod bounds;
pub mod clique;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::Correspondence;
use crate::error::{Error, Result};
use crate::gem::Gem;
use crate::geometry::sorted_eigen;

pub use bounds::{chi2_quantile, trim_gap, upper_eigenvalue};
pub use clique::{max_clique_bnb, max_clique_within, Graph};

/// Default tail probabilities, one per level.
pub const DEFAULT_P_VALUES: [f64; 4] = [0.99, 0.95, 0.9, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub p_value: f64,
    pub chi2: f64,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidGraph {
    pub correspondences: Vec<Correspondence>,
    pub levels: Vec<PyramidLevel>,
}

impl PyramidGraph {
    pub fn graph(&self, level: usize) -> Graph {
        Graph::from_edges(self.correspondences.len(), self.levels[level].edges.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliqueResult {
    /// Sorted correspondence indices of the clique found at each level.
    pub cliques: Vec<Vec<usize>>,
}

impl CliqueResult {
    pub fn sizes(&self) -> Vec<usize> {
        self.cliques.iter().map(Vec::len).collect()
    }
}

/// Checks that `p` is strictly descending inside `(0, 1)` and returns the
/// matching χ² values.
pub fn level_thresholds(p_values: &[f64]) -> Result<Vec<f64>> {
    if p_values.is_empty() {
        return Err(Error::InvalidArgument("at least one p-value is required".into()));
    }
    if p_values.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::InvalidArgument(format!("p-values must be strictly descending, got {p_values:?}")));
    }
    p_values.iter().map(|&p| chi2_quantile(p)).collect()
}

/// Builds the compatibility pyramid over `corrs`, whose indices refer to
/// `xs` (source) and `ys` (target). An edge enters at the first level whose
/// tolerance `√(χ² λx) + √(χ² λy)` covers the length gap and stays in every
/// later level.
pub fn build_pyramid(corrs: &[Correspondence], xs: &[Gem], ys: &[Gem], p_values: &[f64]) -> Result<PyramidGraph> {
    let chi2 = level_thresholds(p_values)?;
    for c in corrs {
        if c.x >= xs.len() || c.y >= ys.len() {
            return Err(Error::InvalidArgument(format!("correspondence ({}, {}) out of range", c.x, c.y)));
        }
    }
    let lx: Vec<f64> = corrs.iter().map(|c| sorted_eigen(&xs[c.x].pseudo_cov).0[0]).collect();
    let ly: Vec<f64> = corrs.iter().map(|c| sorted_eigen(&ys[c.y].pseudo_cov).0[0]).collect();
    let n = corrs.len();

    let first_level: Vec<Vec<(usize, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (xi, yi) = (&xs[corrs[i].x], &ys[corrs[i].y]);
            let mut row = Vec::new();
            for j in i + 1..n {
                let cj = &corrs[j];
                let (xj, yj) = (&xs[cj.x], &ys[cj.y]);
                let d = trim_gap(&xi.mean, &xj.mean, &yi.mean, &yj.mean);
                let bx = bounds::upper_eigenvalue_with(&xi.pseudo_cov, lx[i], &xj.pseudo_cov, lx[j]);
                let by = bounds::upper_eigenvalue_with(&yi.pseudo_cov, ly[i], &yj.pseudo_cov, ly[j]);
                if let Some(m) = chi2.iter().position(|&c| d <= (c * bx).sqrt() + (c * by).sqrt()) {
                    row.push((j, m));
                }
            }
            row
        })
        .collect();

    let mut levels: Vec<PyramidLevel> = p_values
        .iter()
        .zip(&chi2)
        .map(|(&p_value, &chi2)| PyramidLevel {
            p_value,
            chi2,
            edges: Vec::new(),
        })
        .collect();
    for (i, row) in first_level.iter().enumerate() {
        for &(j, m) in row {
            for level in &mut levels[m..] {
                level.edges.push((i, j));
            }
        }
    }
    Ok(PyramidGraph {
        correspondences: corrs.to_vec(),
        levels,
    })
}

/// Maximum clique per level. Level 1 is solved from scratch; each later
/// level drops vertices whose degree is below `c − 1`, `c` being the size of
/// the previous clique, and is seeded with that clique, so sizes never
/// decrease.
pub fn graduated_max_clique(pyr: &PyramidGraph) -> CliqueResult {
    let n = pyr.correspondences.len();
    let mut cliques = Vec::with_capacity(pyr.levels.len());
    let mut prev: Vec<usize> = Vec::new();
    for m in 0..pyr.levels.len() {
        let g = pyr.graph(m);
        let clique = if n == 0 {
            Vec::new()
        } else {
            let need = prev.len().saturating_sub(1);
            let allowed: Vec<bool> = (0..n).map(|v| g.degree(v) >= need).collect();
            max_clique_within(&g, &allowed, &prev)
        };
        prev = clique.clone();
        cliques.push(clique);
    }
    CliqueResult { cliques }
}

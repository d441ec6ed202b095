//! Gaussian-prior relative position bias.
//!
//! For a flattened `h×w` patch grid the bias added to attention logits is
//! `P[i,j] = G[i,j] + R[rel(i,j)]`, where `G` is a Gaussian of the grid
//! distance between patches `i` and `j` with learnable width `theta`, and `R`
//! is a learnable table of length `4N` indexed by the (row, column) offset.
//!
//! `rel(i, j) = 2w·(i/w − j/w + h) + (i%w − j%w + w)` with integer division,
//! which ranges over `[2w+1, 4N−1]`; the low slots of the table (including
//! slot 0) are never read.

use crate::autograd::{Graph, NodeId};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Patch grid of a tokenized feature map, `N = h·w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(invalid(format!("grid {h}×{w} must be non-empty")));
        }
        Ok(Self { h, w })
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn table_len(&self) -> usize {
        4 * self.n()
    }

    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.w, i % self.w)
    }
}

/// Per-head GRPE parameters. `theta = exp(raw_theta)` keeps the width positive.
#[derive(Clone, Debug, PartialEq)]
pub struct GrpeParams {
    pub grid: Grid,
    pub raw_theta: f64,
    pub rel_table: Vec<f64>,
}

impl GrpeParams {
    /// `theta = max(h, w) / 4` and a zero table, i.e. the pure Gaussian prior.
    pub fn init(grid: Grid) -> Self {
        Self {
            grid,
            raw_theta: default_theta(grid).ln(),
            rel_table: vec![0.0; grid.table_len()],
        }
    }

    pub fn new(grid: Grid, theta: f64, rel_table: Vec<f64>) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(invalid(format!("theta must be positive, got {theta}")));
        }
        if rel_table.len() != grid.table_len() {
            return Err(Error::ShapeMismatch {
                op: "grpe table",
                lhs: vec![grid.table_len()],
                rhs: vec![rel_table.len()],
            });
        }
        Ok(Self {
            grid,
            raw_theta: theta.ln(),
            rel_table,
        })
    }

    pub fn theta(&self) -> f64 {
        self.raw_theta.exp()
    }

    /// `4N + 1`: the table plus one width.
    pub fn param_count(&self) -> usize {
        self.rel_table.len() + 1
    }
}

pub fn default_theta(grid: Grid) -> f64 {
    grid.h.max(grid.w) as f64 / 4.0
}

pub fn relative_index(i: usize, j: usize, grid: Grid) -> Result<usize> {
    let n = grid.n();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, len: n });
        }
    }
    let (w, h) = (grid.w as isize, grid.h as isize);
    let (i, j) = (i as isize, j as isize);
    let idx = 2 * w * (i / w - j / w + h) + (i % w - j % w + w);
    Ok(idx as usize)
}

/// `relative_index` for every `(i, j)`, row-major `N×N`.
pub fn relative_index_table(grid: Grid) -> Vec<usize> {
    let n = grid.n();
    (0..n * n).map(|k| relative_index(k / n, k % n, grid).unwrap()).collect()
}

/// Squared grid distance between every pair of patches.
pub fn squared_distances(grid: Grid) -> Tensor {
    let n = grid.n();
    Tensor::from_fn([n, n], |k| {
        let ((ri, ci), (rj, cj)) = (grid.coords(k / n), grid.coords(k % n));
        let dr = rj as f64 - ri as f64;
        let dc = cj as f64 - ci as f64;
        dr * dr + dc * dc
    })
}

pub fn gaussian_prior(grid: Grid, theta: f64) -> Result<Tensor> {
    if !(theta > 0.0) {
        return Err(invalid(format!("theta must be positive, got {theta}")));
    }
    let d2 = squared_distances(grid);
    let denom = 2.0 * theta * theta;
    Ok(Tensor::from_fn(d2.shape().to_vec(), |k| (-d2.data()[k] / denom).exp()))
}

pub fn grpe_embed(params: &GrpeParams) -> Result<Tensor> {
    let grid = params.grid;
    if params.rel_table.len() != grid.table_len() {
        return Err(Error::ShapeMismatch {
            op: "grpe table",
            lhs: vec![grid.table_len()],
            rhs: vec![params.rel_table.len()],
        });
    }
    let mut p = gaussian_prior(grid, params.theta())?;
    for (v, idx) in p.data_mut().iter_mut().zip(relative_index_table(grid)) {
        *v += params.rel_table[idx];
    }
    Ok(p)
}

/// Recorded version of [`grpe_embed`]: `raw_theta` is a 1×1 node and
/// `rel_table` holds `4N` values (any shape).
pub fn grpe_node(g: &mut Graph, grid: Grid, raw_theta: NodeId, rel_table: NodeId) -> Result<NodeId> {
    if g.value(rel_table).numel() != grid.table_len() {
        return Err(Error::ShapeMismatch {
            op: "grpe table",
            lhs: vec![grid.table_len()],
            rhs: g.shape(rel_table).to_vec(),
        });
    }
    let n = grid.n();
    let d2 = g.constant(squared_distances(grid));
    // −d² / (2θ²) with θ² = exp(2·raw)
    let inv_theta_sq = {
        let t = g.scale(raw_theta, -2.0);
        g.exp(t)
    };
    let expo = g.mul(d2, inv_theta_sq)?;
    let expo = g.scale(expo, -0.5);
    let prior = g.exp(expo);
    let rel = g.gather(rel_table, relative_index_table(grid), &[n, n])?;
    g.add(prior, rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use proptest::prelude::*;

    #[test]
    fn prior_fixtures() {
        let grid = Grid::new(4, 4).unwrap();
        let g = gaussian_prior(grid, 1.0).unwrap();
        for i in 0..16 {
            assert_eq!(g.at(i, i), 1.0);
        }
        // (0,0)–(0,1) and (0,0)–(1,1)
        assert!((g.at(0, 1) - 0.606531).abs() < 1e-6);
        assert!((g.at(0, 5) - 0.367879).abs() < 1e-6);
        assert!((g.at(0, 1) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_theta_rejected() {
        let grid = Grid::new(2, 2).unwrap();
        assert!(gaussian_prior(grid, 0.0).is_err());
        assert!(gaussian_prior(grid, -1.0).is_err());
        assert!(GrpeParams::new(grid, 0.0, vec![0.0; 16]).is_err());
    }

    #[test]
    fn index_fixtures() {
        let grid = Grid::new(2, 2).unwrap();
        assert_eq!(relative_index(0, 3, grid).unwrap(), 5);
        for (h, w) in [(1, 1), (2, 3), (5, 4)] {
            let grid = Grid::new(h, w).unwrap();
            for i in 0..grid.n() {
                assert_eq!(relative_index(i, i, grid).unwrap(), 2 * w * h + w);
            }
            let max = relative_index_table(grid).into_iter().max().unwrap();
            assert_eq!(max, 4 * grid.n() - 1);
        }
        assert!(relative_index(4, 0, grid).is_err());
    }

    #[test]
    fn embed_fixtures() {
        let grid = Grid::new(2, 2).unwrap();
        let zero = GrpeParams::new(grid, 1.3, vec![0.0; 16]).unwrap();
        assert_eq!(grpe_embed(&zero).unwrap(), gaussian_prior(grid, 1.3).unwrap());

        let wide = GrpeParams::new(grid, 1e6, vec![0.0; 16]).unwrap();
        assert!(grpe_embed(&wide).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-11));

        let table = (0..16).map(|k| k as f64 / 100.0).collect();
        let p = GrpeParams::new(grid, 1.0, table).unwrap();
        let e = grpe_embed(&p).unwrap();
        assert!((e.at(0, 3) - ((-1.0f64).exp() + 0.05)).abs() < 1e-15);
    }

    #[test]
    fn init_and_param_count() {
        let grid = Grid::new(8, 8).unwrap();
        let p = GrpeParams::init(grid);
        assert!((p.theta() - 2.0).abs() < 1e-15);
        assert_eq!(p.param_count(), 4 * 64 + 1);
        assert!(p.rel_table.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn node_matches_plain() {
        let grid = Grid::new(3, 2).unwrap();
        let table: Vec<f64> = (0..24).map(|k| (k as f64 * 0.7).sin()).collect();
        let params = GrpeParams::new(grid, 0.8, table.clone()).unwrap();
        let mut g = Graph::new();
        let raw = g.constant(Tensor::scalar(params.raw_theta));
        let rel = g.constant(Tensor::new([1, 24], table).unwrap());
        let p = grpe_node(&mut g, grid, raw, rel).unwrap();
        assert!(g.value(p).max_abs_diff(&grpe_embed(&params).unwrap()) < 1e-14);
    }

    #[test]
    fn gradients_wrt_theta_and_table() {
        let grid = Grid::new(3, 3).unwrap();
        let raw = Tensor::scalar(0.4f64.ln());
        let table = Tensor::from_fn([1, 36], |k| (k as f64).cos() * 0.3);
        let weights = Tensor::from_fn([9, 9], |k| ((k * 7 % 11) as f64 - 5.0) / 5.0);
        let r = grad_check(
            |g, p| {
                let e = grpe_node(g, grid, p[0], p[1])?;
                let w = g.constant(weights.clone());
                let m = g.mul(e, w)?;
                Ok(g.sum_all(m))
            },
            &[raw, table],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(1e-5), "{:?}", r.worst());
    }

    proptest! {
        #[test]
        fn prior_symmetric_and_bounded(h in 1usize..7, w in 1usize..7, theta in 0.1f64..6.0) {
            let grid = Grid::new(h, w).unwrap();
            let g = gaussian_prior(grid, theta).unwrap();
            let n = grid.n();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(g.at(i, j), g.at(j, i));
                    prop_assert!(g.at(i, j) > 0.0 && g.at(i, j) <= 1.0);
                    if i != j { prop_assert!(g.at(i, j) < 1.0); }
                }
            }
        }

        #[test]
        fn index_depends_only_on_offset(h in 1usize..6, w in 1usize..6, a in 0usize..36, b in 0usize..36, c in 0usize..36) {
            let grid = Grid::new(h, w).unwrap();
            let n = grid.n();
            let (i, j, i2) = (a % n, b % n, c % n);
            let (ri, ci) = grid.coords(i);
            let (rj, cj) = grid.coords(j);
            let (ri2, ci2) = grid.coords(i2);
            let rj2 = ri2 as isize + rj as isize - ri as isize;
            let cj2 = ci2 as isize + cj as isize - ci as isize;
            if (0..h as isize).contains(&rj2) && (0..w as isize).contains(&cj2) {
                let j2 = rj2 as usize * w + cj2 as usize;
                prop_assert_eq!(relative_index(i, j, grid).unwrap(), relative_index(i2, j2, grid).unwrap());
            }
        }
    }
}

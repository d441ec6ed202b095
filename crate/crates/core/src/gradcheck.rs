//! Central finite-difference checking of analytic gradients.
//!
//! For every checked scalar parameter `x`, the numeric derivative is
//! `(f(x + eps) − f(x − eps)) / (2·eps)`. The relative error of an entry is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`; the floor keeps
//! entries whose true gradient is zero from being judged on round-off noise.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub floor: f64,
    /// Check only this many randomly chosen scalars (across all params).
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-4,
            sample: None,
            seed: 0,
        }
    }
}

/// One compared scalar.
#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

/// Worst errors over the checked scalars of one parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamSummary {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub per_parameter: Vec<ParamSummary>,
    pub entries: Vec<EntryCheck>,
    /// `(param, element)` pairs where either gradient was non-finite.
    pub failures: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self, rel_tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_err <= rel_tol
    }
}

fn evaluate(f: &impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>, params: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(invalid(format!("scalar_fn returned shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares the reverse-mode gradient of `scalar_fn` with central finite
/// differences. `scalar_fn` must be deterministic and return a one-element
/// node.
pub fn grad_check(
    scalar_fn: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    params: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&cfg.eps) {
        return Err(invalid(format!("eps {} outside [1e-7, 1e-4]", cfg.eps)));
    }

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = scalar_fn(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
    drop(g);

    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |e| (p, e)))
        .collect();
    let chosen: Vec<(usize, usize)> = match cfg.sample {
        Some(k) if k < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picks = sample(&mut rng, all.len(), k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    };

    let mut report = GradCheckReport {
        per_parameter: vec![ParamSummary::default(); params.len()],
        ..Default::default()
    };
    let mut work = params.to_vec();
    for (p, e) in chosen {
        let x0 = work[p].data()[e];
        work[p].data_mut()[e] = x0 + cfg.eps;
        let fp = evaluate(&scalar_fn, &work)?;
        work[p].data_mut()[e] = x0 - cfg.eps;
        let fm = evaluate(&scalar_fn, &work)?;
        work[p].data_mut()[e] = x0;

        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let a = analytic[p][e];
        if !a.is_finite() || !numeric.is_finite() {
            report.failures.push((p, e));
            continue;
        }
        let abs_err = (a - numeric).abs();
        let rel_err = abs_err / a.abs().max(numeric.abs()).max(cfg.floor);
        let s = &mut report.per_parameter[p];
        s.checked += 1;
        s.max_abs_err = s.max_abs_err.max(abs_err);
        s.max_rel_err = s.max_rel_err.max(rel_err);
        report.max_abs_err = report.max_abs_err.max(abs_err);
        report.max_rel_err = report.max_rel_err.max(rel_err);
        report.entries.push(EntryCheck {
            param: p,
            element: e,
            analytic: a,
            numeric,
            abs_err,
            rel_err,
        });
    }
    Ok(report)
}

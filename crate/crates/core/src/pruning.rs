//! Two-stage attention pruning and self-attention FLOP accounting.
//!
//! Query-wise: a per-patch gate scores each patch as background or
//! foreground, and only patches with `G_b < tau_q` issue queries.
//! Dependency-wise: every surviving attention row is thresholded at
//!
//! ```text
//! T_i = min(A_i) + (max(A_i) − min(A_i)) · σ(W_t·Q_i) · σ(g)
//! ```
//!
//! and re-normalized as `A'_ij = M_ij·exp(A_ij) / (1e-6 + Σ_k M_ik·exp(A_ik))`.
//! The mask `M = [A ≥ T]` is a constant in the graph, so `W_t` and `g` get
//! no gradient through it.
//!
//! Multiply counting convention: one multiply per multiply-accumulate in the
//! five matrix products of a head (Q on kept rows, K and V on all rows, the
//! kept×N logits, the masked `A'·V`, and the `d_m×d_m` output projection).
//! Scaling, bias, exponentials and normalization are not counted.

use std::fmt;
use std::str::FromStr;

use crate::attention::{
    attention_probs_node, ffn_node, multi_head_combine_node, transformer_block_node, AttentionHeadParams, BlockNodes,
    HeadNodes,
};
use crate::autograd::{Graph, NodeId, ReduceKind};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Additive term in the re-normalization denominator.
pub const RENORM_EPS: f64 = 1e-6;
/// Probability clamp inside the gate cross-entropy.
pub const GATE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlopsMode {
    /// `(3−α)Ndd_m + α(2−λ)N²d_m + αNd_m²`
    AsPrinted,
    /// `(3−α)Ndd_m + (1−α)(2−λ)N²d_m + (1−α)Nd_m²`
    #[default]
    KeptFraction,
}

impl FromStr for FlopsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" => Ok(Self::AsPrinted),
            "kept-fraction" => Ok(Self::KeptFraction),
            other => Err(invalid(format!("unknown flops mode {other:?} (as-printed | kept-fraction)"))),
        }
    }
}

impl fmt::Display for FlopsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AsPrinted => "as-printed",
            Self::KeptFraction => "kept-fraction",
        })
    }
}

/// Background and foreground projections, each `d×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w_b: Tensor,
    pub w_f: Tensor,
}

impl GateParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_b: Tensor::zeros([d, 1]),
            w_f: Tensor::zeros([d, 1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_b.shape() != self.w_f.shape() || self.w_b.rank() != 2 || self.w_b.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "gate",
                lhs: self.w_b.shape().to_vec(),
                rhs: self.w_f.shape().to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    pub tau_q: f64,
    pub g_init: f64,
    pub g_frozen_rounds: usize,
    pub enable_query_prune: bool,
    pub enable_dep_prune: bool,
    pub flops_mode: FlopsMode,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tau_q: 0.5,
            g_init: -2.0,
            g_frozen_rounds: 100,
            enable_query_prune: true,
            enable_dep_prune: true,
            flops_mode: FlopsMode::KeptFraction,
        }
    }
}

impl PruneConfig {
    /// Both stages off.
    pub fn disabled() -> Self {
        Self {
            enable_query_prune: false,
            enable_dep_prune: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_q > 0.0 && self.tau_q <= 1.0) {
            return Err(invalid(format!("tau_q = {} outside (0, 1]", self.tau_q)));
        }
        if !self.g_init.is_finite() {
            return Err(invalid("g_init must be finite"));
        }
        Ok(())
    }
}

/// What a pruned block kept. `masks` holds one `kept×N` 0/1 matrix per head
/// and is empty when dependency pruning did not run.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision {
    pub n: usize,
    pub kept_indices: Vec<usize>,
    pub masks: Vec<Tensor>,
    pub thresholds: Vec<Vec<f64>>,
    pub measured_alpha: f64,
    pub measured_lambda: f64,
}

impl PruneDecision {
    pub fn new(n: usize, kept_indices: Vec<usize>, masks: Vec<Tensor>, thresholds: Vec<Vec<f64>>) -> Self {
        let mut d = Self {
            n,
            kept_indices,
            masks,
            thresholds,
            measured_alpha: 0.0,
            measured_lambda: 0.0,
        };
        (d.measured_alpha, d.measured_lambda) = measure_rates(&d, n);
        d
    }

    /// Nothing pruned.
    pub fn full(n: usize) -> Self {
        Self::new(n, (0..n).collect(), Vec::new(), Vec::new())
    }

    pub fn kept(&self) -> usize {
        self.kept_indices.len()
    }

    /// Surviving entries of head `h`'s mask (`kept·N` without dependency pruning).
    pub fn nnz(&self, h: usize) -> usize {
        match self.masks.get(h) {
            Some(m) => m.data().iter().filter(|&&v| v != 0.0).count(),
            None => self.kept() * self.n,
        }
    }
}

pub fn measure_rates(decision: &PruneDecision, n: usize) -> (f64, f64) {
    let alpha = if n == 0 { 0.0 } else { 1.0 - decision.kept_indices.len() as f64 / n as f64 };
    let (zeros, size) = decision.masks.iter().fold((0usize, 0usize), |(z, s), m| {
        (z + m.data().iter().filter(|&&v| v == 0.0).count(), s + m.numel())
    });
    let lambda = if size == 0 { 0.0 } else { zeros as f64 / size as f64 };
    (alpha, lambda)
}

// ---------------------------------------------------------------------------
// FLOPs

pub fn flops_sa(n: u64, d: u64, d_m: u64) -> u64 {
    3 * n * d * d_m + 2 * n * n * d_m + n * d_m * d_m
}

pub fn flops_psa(n: u64, d: u64, d_m: u64, alpha: f64, lambda: f64, mode: FlopsMode) -> u64 {
    let (n, d, d_m) = (n as f64, d as f64, d_m as f64);
    let f = match mode {
        FlopsMode::AsPrinted => alpha,
        FlopsMode::KeptFraction => 1.0 - alpha,
    };
    let v = (3.0 - alpha) * n * d * d_m + f * (2.0 - lambda) * n * n * d_m + f * n * d_m * d_m;
    v.round() as u64
}

/// Multiplies of one pruned head with `kept` queries and `nnz` surviving
/// attention entries, under the counting convention above.
pub fn pruned_head_mults(n: u64, d: u64, d_m: u64, kept: u64, nnz: u64) -> u64 {
    kept * d * d_m + 2 * n * d * d_m + kept * n * d_m + nnz * d_m + kept * d_m * d_m
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub n: usize,
    pub d: usize,
    pub d_m: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub omega_sa: u64,
    pub omega_psa_formula: u64,
    pub omega_psa_measured: u64,
}

impl FlopReport {
    pub const CSV_HEADER: &'static str = "N,d,d_m,alpha,lambda,omega_sa,omega_psa_formula,omega_psa_measured";

    /// Report for a block with `decision.masks.len()` heads (or `heads`
    /// when the decision carries no masks).
    pub fn from_decision(decision: &PruneDecision, d: usize, d_m: usize, heads: usize, mode: FlopsMode) -> Self {
        let n = decision.n;
        let (n64, d64, dm64, h64) = (n as u64, d as u64, d_m as u64, heads as u64);
        let kept = decision.kept() as u64;
        let measured = (0..heads).map(|h| pruned_head_mults(n64, d64, dm64, kept, decision.nnz(h) as u64)).sum();
        Self {
            n,
            d,
            d_m,
            alpha: decision.measured_alpha,
            lambda: decision.measured_lambda,
            omega_sa: h64 * flops_sa(n64, d64, dm64),
            omega_psa_formula: h64
                * flops_psa(n64, d64, dm64, decision.measured_alpha, decision.measured_lambda, mode),
            omega_psa_measured: measured,
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n,
            self.d,
            self.d_m,
            self.alpha,
            self.lambda,
            self.omega_sa,
            self.omega_psa_formula,
            self.omega_psa_measured
        )
    }
}

/// Scalar-loop pruned head that counts its own multiplies. `mask`, if given,
/// is `kept×N` and triggers the re-normalization. Returns the `kept×d_m`
/// head output after `E_o` and the multiply count.
pub fn instrumented_pruned_head(
    f_p: &Tensor,
    kept: &[usize],
    head: &AttentionHeadParams,
    bias: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, u64)> {
    head.validate()?;
    let (n, d) = (f_p.rows(), f_p.cols());
    let d_m = head.e_q.cols();
    if head.e_q.rows() != d || bias.shape() != [n, n] {
        return Err(invalid("instrumented head: inconsistent shapes"));
    }
    if let Some(&bad) = kept.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    if let Some(m) = mask {
        if m.shape() != [kept.len(), n] {
            return Err(invalid(format!("mask shape {:?}, expected [{}, {n}]", m.shape(), kept.len())));
        }
    }
    let mut mults = 0u64;
    let mut project = |rows: &mut dyn Iterator<Item = usize>, e: &Tensor| -> Vec<Vec<f64>> {
        rows.map(|r| {
            (0..d_m)
                .map(|c| {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += f_p.at(r, k) * e.at(k, c);
                        mults += 1;
                    }
                    acc
                })
                .collect()
        })
        .collect()
    };
    let q = project(&mut kept.iter().copied(), &head.e_q);
    let k = project(&mut (0..n), &head.e_k);
    let v = project(&mut (0..n), &head.e_v);

    let scale = 1.0 / (d_m as f64).sqrt();
    let mut out = Tensor::zeros([kept.len(), d_m]);
    for (r, &i) in kept.iter().enumerate() {
        let mut row: Vec<f64> = (0..n)
            .map(|j| {
                let mut acc = 0.0;
                for c in 0..d_m {
                    acc += q[r][c] * k[j][c];
                    mults += 1;
                }
                acc * scale + bias.at(i, j)
            })
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
        let keep: Vec<bool> = match mask {
            Some(mk) => (0..n).map(|j| mk.at(r, j) != 0.0).collect(),
            None => vec![true; n],
        };
        if mask.is_some() {
            let s: f64 = (0..n).filter(|&j| keep[j]).map(|j| row[j].exp()).sum();
            for j in 0..n {
                row[j] = if keep[j] { row[j].exp() / (RENORM_EPS + s) } else { 0.0 };
            }
        }
        let mut av = vec![0.0; d_m];
        for j in (0..n).filter(|&j| keep[j]) {
            for c in 0..d_m {
                av[c] += row[j] * v[j][c];
                mults += 1;
            }
        }
        for c in 0..d_m {
            let mut acc = 0.0;
            for t in 0..d_m {
                acc += av[t] * head.e_o.at(t, c);
                mults += 1;
            }
            out.set(r, c, acc);
        }
    }
    Ok((out, mults))
}

// ---------------------------------------------------------------------------
// recorded forms

/// Background probability `G_b = σ(F·W_b − F·W_f)` as an `N×1` node.
pub fn gate_probs_node(g: &mut Graph, f_p: NodeId, w_b: NodeId, w_f: NodeId) -> Result<NodeId> {
    let lb = g.matmul(f_p, w_b)?;
    let lf = g.matmul(f_p, w_f)?;
    let diff = g.sub(lb, lf)?;
    Ok(g.sigmoid(diff))
}

/// Mean two-class cross-entropy of `G_b` (`N×1`) against per-patch labels
/// (1 = foreground).
pub fn gate_loss_node(g: &mut Graph, g_b: NodeId, patch_mask: &[u8]) -> Result<NodeId> {
    let n = g.value(g_b).numel();
    if patch_mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "gate_loss",
            lhs: vec![n],
            rhs: vec![patch_mask.len()],
        });
    }
    let shape = g.shape(g_b).to_vec();
    let nf = n as f64;
    let w_bg = g.constant(Tensor::new(shape.clone(), patch_mask.iter().map(|&m| (1 - m.min(1)) as f64 / nf).collect())?);
    let w_fg = g.constant(Tensor::new(shape, patch_mask.iter().map(|&m| m.min(1) as f64 / nf).collect())?);
    let neg = g.scale(g_b, -1.0);
    let g_f = g.add_scalar(neg, 1.0);
    let cb = g.clamp_min(g_b, GATE_CLAMP);
    let lb = g.log(cb);
    let cf = g.clamp_min(g_f, GATE_CLAMP);
    let lf = g.log(cf);
    let tb = g.mul(lb, w_bg)?;
    let tf = g.mul(lf, w_fg)?;
    let sb = g.sum_all(tb);
    let sf = g.sum_all(tf);
    let s = g.add(sb, sf)?;
    Ok(g.scale(s, -1.0))
}

/// `A_p` for the rows `kept` of `f_p`, with the bias rows gathered to match.
/// Returns `(A_p, Q)`.
pub fn pruned_attention_node(g: &mut Graph, f_p: NodeId, kept: &[usize], head: &HeadNodes) -> Result<(NodeId, NodeId)> {
    if kept.is_empty() {
        return Err(invalid("pruned attention with no kept queries"));
    }
    let rows = g.gather_rows(f_p, kept)?;
    let bias = match head.bias {
        Some(b) => Some(g.gather_rows(b, kept)?),
        None => None,
    };
    attention_probs_node(g, rows, f_p, head.e_q, head.e_k, bias)
}

/// Thresholds as a `kept×1` node. `w_t` is `d_m×1`, `g_scalar` is `1×1`.
pub fn adaptive_thresholds_node(
    g: &mut Graph,
    a_p: NodeId,
    q: NodeId,
    w_t: NodeId,
    g_scalar: NodeId,
) -> Result<NodeId> {
    let lo = g.reduce(a_p, 1, ReduceKind::Min)?;
    let hi = g.reduce(a_p, 1, ReduceKind::Max)?;
    let range = g.sub(hi, lo)?;
    let qw = g.matmul(q, w_t)?;
    let s1 = g.sigmoid(qw);
    let s2 = g.sigmoid(g_scalar);
    let gate = g.mul(s1, s2)?;
    let step = g.mul(range, gate)?;
    g.add(lo, step)
}

/// `M[i,j] = 1` iff `A_p[i,j] ≥ T_i`.
pub fn mask_from_thresholds(a_p: &Tensor, t: &[f64]) -> Result<Tensor> {
    if a_p.rank() != 2 || a_p.rows() != t.len() {
        return Err(Error::ShapeMismatch {
            op: "mask",
            lhs: a_p.shape().to_vec(),
            rhs: vec![t.len()],
        });
    }
    let c = a_p.cols();
    Ok(Tensor::from_fn(a_p.shape().to_vec(), |k| if a_p.data()[k] >= t[k / c] { 1.0 } else { 0.0 }))
}

/// Masked re-normalization with `mask` held constant.
pub fn apply_mask_renorm_node(g: &mut Graph, a_p: NodeId, mask: &Tensor) -> Result<NodeId> {
    if g.shape(a_p) != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask_renorm",
            lhs: g.shape(a_p).to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let m = g.constant(mask.clone());
    let e = g.exp(a_p);
    let num = g.mul(e, m)?;
    let s = g.reduce(num, 1, ReduceKind::Sum)?;
    let den = g.add_scalar(s, RENORM_EPS);
    g.div(num, den)
}

/// Combines kept-row head outputs, adds them to their rows of `f_p`, and
/// leaves pruned rows as they were.
pub fn scatter_back_node(
    g: &mut Graph,
    head_outputs: &[NodeId],
    kept: &[usize],
    f_p: NodeId,
    w_msa: NodeId,
) -> Result<NodeId> {
    let n = g.shape(f_p)[0];
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("kept indices must be strictly increasing"));
    }
    let cat = g.concat(head_outputs, 1)?;
    let mixed = g.matmul(cat, w_msa)?;
    let full = g.scatter_rows(mixed, kept, n)?;
    g.add(full, f_p)
}

/// Node handles of the pruning parameters of one block.
#[derive(Clone, Debug)]
pub struct PruneNodes {
    pub w_b: NodeId,
    pub w_f: NodeId,
    /// `d_m×1` per head.
    pub w_t: Vec<NodeId>,
    /// `1×1`
    pub g: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct PruneContext<'a> {
    pub cfg: &'a PruneConfig,
    pub warmup_active: bool,
    /// Replaces the data-dependent choices (kept set and masks), e.g. to
    /// hold them fixed under finite differences.
    pub frozen: Option<&'a PruneDecision>,
}

#[derive(Clone, Debug)]
pub struct HeadTrace {
    /// `kept×N` attention before re-normalization.
    pub a_p: NodeId,
    /// After re-normalization, when dependency pruning ran.
    pub a_renorm: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub out: NodeId,
    /// `N×1` background probabilities, when the gate is enabled.
    pub gate: Option<NodeId>,
    pub heads: Vec<HeadTrace>,
    pub decision: PruneDecision,
}

/// Indices with `G_b < tau_q`, or all of them during warm-up or when query
/// pruning is off. Never empty.
pub fn select_query_indices(g_b: &[f64], cfg: &PruneConfig, warmup_active: bool) -> Vec<usize> {
    if warmup_active || !cfg.enable_query_prune {
        return (0..g_b.len()).collect();
    }
    let kept: Vec<usize> = (0..g_b.len()).filter(|&i| g_b[i] < cfg.tau_q).collect();
    if !kept.is_empty() || g_b.is_empty() {
        return kept;
    }
    let argmin = (0..g_b.len()).min_by(|&a, &b| g_b[a].total_cmp(&g_b[b])).unwrap();
    vec![argmin]
}

/// Transformer block with both pruning stages. With nothing to prune it runs
/// the unpruned path unchanged.
pub fn pruned_block_node(
    g: &mut Graph,
    f_p: NodeId,
    block: &BlockNodes,
    prune: Option<&PruneNodes>,
    ctx: PruneContext<'_>,
) -> Result<BlockTrace> {
    let n = g.shape(f_p)[0];
    let cfg = ctx.cfg;
    let gate = match prune {
        Some(p) if cfg.enable_query_prune => Some(gate_probs_node(g, f_p, p.w_b, p.w_f)?),
        _ => None,
    };
    let dep_active = prune.is_some() && cfg.enable_dep_prune && !ctx.warmup_active;
    let kept = match (ctx.frozen, gate) {
        (Some(fr), _) => fr.kept_indices.clone(),
        (None, Some(gb)) => select_query_indices(g.value(gb).data(), cfg, ctx.warmup_active),
        (None, None) => (0..n).collect(),
    };

    if kept.len() == n && !dep_active {
        let (out, attn) = transformer_block_node(g, f_p, block)?;
        return Ok(BlockTrace {
            out,
            gate,
            heads: attn.into_iter().map(|a_p| HeadTrace { a_p, a_renorm: None }).collect(),
            decision: PruneDecision::full(n),
        });
    }

    let mut outs = Vec::with_capacity(block.heads.len());
    let mut traces = Vec::with_capacity(block.heads.len());
    let mut masks = Vec::new();
    let mut thresholds = Vec::new();
    for (h, head) in block.heads.iter().enumerate() {
        let (a_p, q) = pruned_attention_node(g, f_p, &kept, head)?;
        let a_renorm = if dep_active {
            let p = prune.unwrap();
            let w_t = *p.w_t.get(h).ok_or_else(|| invalid("missing threshold projection for head"))?;
            let t = adaptive_thresholds_node(g, a_p, q, w_t, p.g)?;
            let t_vals = g.value(t).data().to_vec();
            let mask = match ctx.frozen {
                Some(fr) => fr.masks.get(h).cloned().ok_or_else(|| invalid("frozen decision lacks a mask"))?,
                None => mask_from_thresholds(g.value(a_p), &t_vals)?,
            };
            let r = apply_mask_renorm_node(g, a_p, &mask)?;
            masks.push(mask);
            thresholds.push(t_vals);
            Some(r)
        } else {
            None
        };
        let v = g.matmul(f_p, head.e_v)?;
        let o = g.matmul(a_renorm.unwrap_or(a_p), v)?;
        outs.push(g.matmul(o, head.e_o)?);
        traces.push(HeadTrace { a_p, a_renorm });
    }
    let msa = if kept.len() == n {
        multi_head_combine_node(g, &outs, block.w_msa, f_p)?
    } else {
        scatter_back_node(g, &outs, &kept, f_p, block.w_msa)?
    };
    let out = ffn_node(g, msa, block.w_1, block.b_1, block.w_2, block.b_2)?;
    Ok(BlockTrace {
        out,
        gate,
        heads: traces,
        decision: PruneDecision::new(n, kept, masks, thresholds),
    })
}

// ---------------------------------------------------------------------------
// plain forms

/// `(G_b, G_f)` with `G_f = 1 − G_b`.
pub fn gate_scores(f_p: &Tensor, gate: &GateParams) -> Result<(Vec<f64>, Vec<f64>)> {
    gate.validate()?;
    let mut g = Graph::new();
    let ids = [f_p, &gate.w_b, &gate.w_f].map(|t| g.constant(t.clone()));
    let gb = gate_probs_node(&mut g, ids[0], ids[1], ids[2])?;
    let g_b = g.value(gb).data().to_vec();
    let g_f = g_b.iter().map(|p| 1.0 - p).collect();
    Ok((g_b, g_f))
}

pub fn gate_loss(g_b: &[f64], g_f: &[f64], patch_mask: &[u8]) -> Result<f64> {
    if g_b.len() != patch_mask.len() || g_f.len() != patch_mask.len() {
        return Err(Error::ShapeMismatch {
            op: "gate_loss",
            lhs: vec![g_b.len(), g_f.len()],
            rhs: vec![patch_mask.len()],
        });
    }
    let n = patch_mask.len() as f64;
    let s: f64 = patch_mask
        .iter()
        .zip(g_b.iter().zip(g_f))
        .map(|(&m, (&b, &f))| if m == 0 { b.max(GATE_CLAMP).ln() } else { f.max(GATE_CLAMP).ln() })
        .sum();
    Ok(-s / n)
}

pub fn select_queries(
    f_p: &Tensor,
    g_b: &[f64],
    cfg: &PruneConfig,
    warmup_active: bool,
) -> Result<(Tensor, Vec<usize>)> {
    if f_p.rank() != 2 || f_p.rows() != g_b.len() {
        return Err(Error::ShapeMismatch {
            op: "select_queries",
            lhs: f_p.shape().to_vec(),
            rhs: vec![g_b.len()],
        });
    }
    let kept = select_query_indices(g_b, cfg, warmup_active);
    let d = f_p.cols();
    let rows = Tensor::new([kept.len(), d], kept.iter().flat_map(|&i| f_p.row(i).iter().copied()).collect())?;
    Ok((rows, kept))
}

pub fn pruned_attention_logits(
    f_p_pruned: &Tensor,
    f_p: &Tensor,
    head: &AttentionHeadParams,
    p_kept: &Tensor,
) -> Result<Tensor> {
    head.validate()?;
    if f_p_pruned.rows() == 0 {
        return Err(invalid("pruned attention with no kept queries"));
    }
    let mut g = Graph::new();
    let ids = [f_p_pruned, f_p, &head.e_q, &head.e_k, p_kept].map(|t| g.constant(t.clone()));
    let (a, _) = attention_probs_node(&mut g, ids[0], ids[1], ids[2], ids[3], Some(ids[4]))?;
    Ok(g.value(a).clone())
}

pub fn adaptive_thresholds(a_p: &Tensor, q_pruned: &Tensor, w_t: &[f64], g_scalar: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let a = g.constant(a_p.clone());
    let q = g.constant(q_pruned.clone());
    let w = g.constant(Tensor::new([w_t.len(), 1], w_t.to_vec())?);
    let s = g.constant(Tensor::scalar(g_scalar));
    let t = adaptive_thresholds_node(&mut g, a, q, w, s)?;
    Ok(g.value(t).data().to_vec())
}

/// Returns `(A_p', M)`.
pub fn apply_mask_renorm(a_p: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor)> {
    let mask = mask_from_thresholds(a_p, t)?;
    let mut g = Graph::new();
    let a = g.constant(a_p.clone());
    let r = apply_mask_renorm_node(&mut g, a, &mask)?;
    Ok((g.value(r).clone(), mask))
}

/// `head_outputs` are `kept×d_m` per head (already through `E_o`).
pub fn scatter_back(head_outputs: &[Tensor], kept: &[usize], f_p: &Tensor, w_msa: &Tensor) -> Result<Tensor> {
    if head_outputs.is_empty() {
        return Err(invalid("no head outputs"));
    }
    let mut g = Graph::new();
    let heads: Vec<NodeId> = head_outputs.iter().map(|t| g.constant(t.clone())).collect();
    let (x, w) = (g.constant(f_p.clone()), g.constant(w_msa.clone()));
    let out = scatter_back_node(&mut g, &heads, kept, x, w)?;
    Ok(g.value(out).clone())
}

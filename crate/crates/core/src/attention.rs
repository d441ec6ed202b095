//! Multi-head self-attention with an additive position bias, the FFN, and
//! the self-supervised attention losses (symmetry and row entropy).
//!
//! Every operation has a recorded form (`*_node`, used for training) and a
//! plain form over tensors that records into a throwaway graph, so both go
//! through the same arithmetic.

use crate::autograd::{Graph, NodeId, ReduceKind};
use crate::error::{invalid, Error, Result};
use crate::grpe::{grpe_embed, GrpeParams};
use crate::tensor::Tensor;

/// Probabilities are clamped here inside `log2` so that `0·log 0 = 0`.
pub const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyReduce {
    Min,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsaConfig {
    pub enabled: bool,
    pub alpha_sym: f64,
    pub alpha_en: f64,
    pub beta_1: f64,
    pub beta_2: f64,
    pub entropy_reduce: EntropyReduce,
}

impl Default for SsaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha_sym: 0.3,
            alpha_en: 0.5,
            beta_1: 0.8,
            beta_2: 0.2,
            entropy_reduce: EntropyReduce::Min,
        }
    }
}

impl SsaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_sym", self.alpha_sym), ("alpha_en", self.alpha_en)] {
            if !(0.0..1.0).contains(&a) {
                return Err(invalid(format!("{name} = {a} outside [0, 1)")));
            }
        }
        if self.beta_1 < 0.0 || self.beta_2 < 0.0 || self.beta_1 + self.beta_2 <= 0.0 {
            return Err(invalid(format!(
                "loss weights must be non-negative with positive sum, got {} and {}",
                self.beta_1, self.beta_2
            )));
        }
        Ok(())
    }
}

/// One attention head: `d×d_m` projections, a `d_m×d_m` output projection
/// applied to the head output inside a block, and the position-bias
/// parameters.
#[derive(Clone, Debug)]
pub struct AttentionHeadParams {
    pub e_q: Tensor,
    pub e_k: Tensor,
    pub e_v: Tensor,
    pub e_o: Tensor,
    pub grpe: GrpeParams,
}

impl AttentionHeadParams {
    pub fn validate(&self) -> Result<()> {
        let s = self.e_q.shape();
        if s.len() != 2 || self.e_k.shape() != s || self.e_v.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "head projections",
                lhs: s.to_vec(),
                rhs: self.e_k.shape().to_vec(),
            });
        }
        if self.e_o.shape() != [s[1], s[1]] {
            return Err(Error::ShapeMismatch {
                op: "head output projection",
                lhs: vec![s[1], s[1]],
                rhs: self.e_o.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Parameters of a whole transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlockParams {
    pub heads: Vec<AttentionHeadParams>,
    /// `(heads·d_m)×d`
    pub w_msa: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

impl TransformerBlockParams {
    pub fn validate(&self) -> Result<()> {
        let first = self.heads.first().ok_or_else(|| invalid("a block needs at least one head"))?;
        for h in &self.heads {
            h.validate()?;
            if h.e_q.shape() != first.e_q.shape() {
                return Err(Error::ShapeMismatch {
                    op: "heads",
                    lhs: first.e_q.shape().to_vec(),
                    rhs: h.e_q.shape().to_vec(),
                });
            }
        }
        let (d, d_m) = (first.e_q.rows(), first.e_q.cols());
        let d_ff = self.w_1.shape().get(1).copied().unwrap_or(0);
        if self.w_msa.shape() != [self.heads.len() * d_m, d] {
            return Err(Error::ShapeMismatch {
                op: "w_msa",
                lhs: vec![self.heads.len() * d_m, d],
                rhs: self.w_msa.shape().to_vec(),
            });
        }
        if d_ff < d {
            return Err(invalid(format!("d_ff {d_ff} must be ≥ d {d}")));
        }
        let expect: [(&Tensor, [usize; 2]); 4] =
            [(&self.w_1, [d, d_ff]), (&self.b_1, [1, d_ff]), (&self.w_2, [d_ff, d]), (&self.b_2, [1, d])];
        for (t, s) in expect {
            if t.shape() != s {
                return Err(Error::ShapeMismatch {
                    op: "ffn",
                    lhs: s.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// recorded forms

/// `softmax((queries·E_q)(keys·E_k)ᵀ / √d_m + bias)` with one row per query.
/// Also returns the projected queries, which the pruning thresholds use.
pub fn attention_probs_node(
    g: &mut Graph,
    queries: NodeId,
    keys: NodeId,
    e_q: NodeId,
    e_k: NodeId,
    bias: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    if g.shape(queries)[0] == 0 || g.shape(keys)[0] == 0 {
        return Err(invalid("attention over zero patches"));
    }
    let d_m = g.shape(e_q)[1];
    let q = g.matmul(queries, e_q)?;
    let k = g.matmul(keys, e_k)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (d_m as f64).sqrt());
    if let Some(b) = bias {
        logits = g.add(logits, b)?;
    }
    Ok((g.softmax_rows(logits)?, q))
}

/// Single-head self-attention. Returns `(F_sa, A)`.
pub fn attend_node(
    g: &mut Graph,
    f_p: NodeId,
    e_q: NodeId,
    e_k: NodeId,
    e_v: NodeId,
    bias: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let (a, _) = attention_probs_node(g, f_p, f_p, e_q, e_k, bias)?;
    let v = g.matmul(f_p, e_v)?;
    Ok((g.matmul(a, v)?, a))
}

/// `concat(heads)·W_msa + residual`.
pub fn multi_head_combine_node(g: &mut Graph, heads: &[NodeId], w_msa: NodeId, residual: NodeId) -> Result<NodeId> {
    let cat = g.concat(heads, 1)?;
    if g.shape(cat)[1] != g.shape(w_msa)[0] {
        return Err(Error::ShapeMismatch {
            op: "multi_head_combine",
            lhs: g.shape(cat).to_vec(),
            rhs: g.shape(w_msa).to_vec(),
        });
    }
    let mixed = g.matmul(cat, w_msa)?;
    g.add(mixed, residual)
}

/// `(ReLU(x·W_1 + b_1)·W_2 + b_2) + x`.
pub fn ffn_node(g: &mut Graph, x: NodeId, w_1: NodeId, b_1: NodeId, w_2: NodeId, b_2: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, w_1)?;
    let h = g.add(h, b_1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w_2)?;
    let o = g.add(o, b_2)?;
    g.add(o, x)
}

/// Cosine similarity between `A` and `Aᵀ` under the Frobenius inner product.
///
/// Sums run over unordered pairs `{i, j}` so that transposing `A` only swaps
/// the operands of commutative products and sums, which makes the score of
/// `Aᵀ` bitwise equal to the score of `A`.
pub fn symmetry_score_node(g: &mut Graph, a: NodeId) -> Result<NodeId> {
    let s = g.shape(a).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(invalid(format!("symmetry score needs a square matrix, got {s:?}")));
    }
    if g.value(a).data().iter().all(|&v| v == 0.0) {
        return Err(invalid("symmetry score of an all-zero matrix"));
    }
    let n = s[0];
    let (mut upper, mut lower) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            upper.push(i * n + j);
            lower.push(j * n + i);
        }
    }
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let d = g.gather(a, diag, &[1, n])?;
    let dd = g.mul(d, d)?;
    let diag_sq = g.sum_all(dd);
    if upper.is_empty() {
        return g.div(diag_sq, diag_sq);
    }
    let m = upper.len();
    let u = g.gather(a, upper, &[1, m])?;
    let l = g.gather(a, lower, &[1, m])?;
    let ul = g.mul(u, l)?;
    let cross = g.sum_all(ul);
    let cross = g.scale(cross, 2.0);
    let num = g.add(cross, diag_sq)?;
    let uu = g.mul(u, u)?;
    let ll = g.mul(l, l)?;
    let sq = g.add(uu, ll)?;
    let off_sq = g.sum_all(sq);
    // ‖A‖ = ‖Aᵀ‖, so the denominator is Σ A².
    let den = g.add(off_sq, diag_sq)?;
    g.div(num, den)
}

pub fn sym_loss_node(g: &mut Graph, a: NodeId, alpha_sym: f64) -> Result<NodeId> {
    let s = symmetry_score_node(g, a)?;
    let x = g.scale(s, -1.0);
    let x = g.add_scalar(x, 1.0 - alpha_sym);
    Ok(g.relu(x))
}

/// Normalized entropy of every row, as an `r×1` column.
pub fn row_entropy_node(g: &mut Graph, a: NodeId) -> Result<NodeId> {
    let s = g.shape(a).to_vec();
    if s.len() != 2 {
        return Err(invalid(format!("row entropy needs rank 2, got {s:?}")));
    }
    let n = s[1];
    if n < 2 {
        return Err(invalid("row entropy is undefined for N = 1"));
    }
    let clamped = g.clamp_min(a, ENTROPY_CLAMP);
    let ln = g.log(clamped);
    let plogp = g.mul(a, ln)?;
    let sum = g.reduce(plogp, 1, ReduceKind::Sum)?;
    // −Σ p·log2 p / log2 N = −Σ p·ln p / ln N
    Ok(g.scale(sum, -1.0 / (n as f64).ln()))
}

pub fn entropy_loss_node(g: &mut Graph, a: NodeId, alpha_en: f64, reduce: EntropyReduce) -> Result<NodeId> {
    let e = row_entropy_node(g, a)?;
    let pooled = match reduce {
        EntropyReduce::Min => g.reduce(e, 0, ReduceKind::Min)?,
        EntropyReduce::Mean => g.mean_all(e),
    };
    let x = g.add_scalar(pooled, -alpha_en);
    Ok(g.relu(x))
}

/// `β₁·L_sym(sym_part) + β₂·L_en(rows)`. `sym_part` is the square matrix the
/// symmetry term sees; `rows` are the distributions the entropy term sees
/// (the same node for an unpruned head).
pub fn ssa_loss_parts_node(g: &mut Graph, sym_part: NodeId, rows: NodeId, cfg: &SsaConfig) -> Result<NodeId> {
    let ls = sym_loss_node(g, sym_part, cfg.alpha_sym)?;
    let le = entropy_loss_node(g, rows, cfg.alpha_en, cfg.entropy_reduce)?;
    let ls = g.scale(ls, cfg.beta_1);
    let le = g.scale(le, cfg.beta_2);
    g.add(ls, le)
}

pub fn ssa_loss_node(g: &mut Graph, a: NodeId, cfg: &SsaConfig) -> Result<NodeId> {
    ssa_loss_parts_node(g, a, a, cfg)
}

/// Node handles of one head inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub e_q: NodeId,
    pub e_k: NodeId,
    pub e_v: NodeId,
    pub e_o: NodeId,
    /// `N×N` additive bias.
    pub bias: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct BlockNodes {
    pub heads: Vec<HeadNodes>,
    pub w_msa: NodeId,
    pub w_1: NodeId,
    pub b_1: NodeId,
    pub w_2: NodeId,
    pub b_2: NodeId,
}

impl BlockNodes {
    /// Binds every tensor of `p` as a constant (`params = false`) or a
    /// trainable leaf.
    pub fn bind(g: &mut Graph, p: &TransformerBlockParams, params: bool) -> Result<Self> {
        p.validate()?;
        let leaf = |g: &mut Graph, t: &Tensor| if params { g.param(t.clone()) } else { g.constant(t.clone()) };
        let mut heads = Vec::with_capacity(p.heads.len());
        for h in &p.heads {
            let bias = leaf(g, &grpe_embed(&h.grpe)?);
            heads.push(HeadNodes {
                e_q: leaf(g, &h.e_q),
                e_k: leaf(g, &h.e_k),
                e_v: leaf(g, &h.e_v),
                e_o: leaf(g, &h.e_o),
                bias: Some(bias),
            });
        }
        Ok(Self {
            heads,
            w_msa: leaf(g, &p.w_msa),
            w_1: leaf(g, &p.w_1),
            b_1: leaf(g, &p.b_1),
            w_2: leaf(g, &p.w_2),
            b_2: leaf(g, &p.b_2),
        })
    }
}

/// Unpruned block. Returns the output and each head's `N×N` attention.
pub fn transformer_block_node(g: &mut Graph, f_p: NodeId, b: &BlockNodes) -> Result<(NodeId, Vec<NodeId>)> {
    let mut outs = Vec::with_capacity(b.heads.len());
    let mut attn = Vec::with_capacity(b.heads.len());
    for h in &b.heads {
        let (o, a) = attend_node(g, f_p, h.e_q, h.e_k, h.e_v, h.bias)?;
        outs.push(g.matmul(o, h.e_o)?);
        attn.push(a);
    }
    let msa = multi_head_combine_node(g, &outs, b.w_msa, f_p)?;
    let out = ffn_node(g, msa, b.w_1, b.b_1, b.w_2, b.b_2)?;
    Ok((out, attn))
}

// ---------------------------------------------------------------------------
// plain forms

fn scalar_of(f: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new();
    let out = f(&mut g)?;
    Ok(g.value(out).item())
}

/// Self-attention of one head with bias `p` (`N×N`). Returns `(F_sa, A)`.
pub fn attend(f_p: &Tensor, head: &AttentionHeadParams, p: &Tensor) -> Result<(Tensor, Tensor)> {
    head.validate()?;
    if f_p.rank() != 2 || f_p.rows() == 0 {
        return Err(invalid(format!("attend needs a non-empty N×d sequence, got {:?}", f_p.shape())));
    }
    let mut g = Graph::new();
    let ids = [f_p, &head.e_q, &head.e_k, &head.e_v, p].map(|t| g.constant(t.clone()));
    let (f_sa, a) = attend_node(&mut g, ids[0], ids[1], ids[2], ids[3], Some(ids[4]))?;
    Ok((g.value(f_sa).clone(), g.value(a).clone()))
}

pub fn multi_head_combine(head_outputs: &[Tensor], w_msa: &Tensor, residual: &Tensor) -> Result<Tensor> {
    if head_outputs.is_empty() {
        return Err(invalid("no head outputs"));
    }
    let mut g = Graph::new();
    let heads: Vec<NodeId> = head_outputs.iter().map(|t| g.constant(t.clone())).collect();
    let (w, r) = (g.constant(w_msa.clone()), g.constant(residual.clone()));
    let out = multi_head_combine_node(&mut g, &heads, w, r)?;
    Ok(g.value(out).clone())
}

pub fn ffn(f_msa: &Tensor, block: &TransformerBlockParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = [f_msa, &block.w_1, &block.b_1, &block.w_2, &block.b_2].map(|t| g.constant(t.clone()));
    let out = ffn_node(&mut g, ids[0], ids[1], ids[2], ids[3], ids[4])?;
    Ok(g.value(out).clone())
}

/// Full unpruned transformer block: every head attends with its GRPE bias,
/// head outputs pass through `E_o`, heads are combined with the residual,
/// then the FFN.
pub fn transformer_block(f_p: &Tensor, block: &TransformerBlockParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = BlockNodes::bind(&mut g, block, false)?;
    let x = g.constant(f_p.clone());
    let (out, _) = transformer_block_node(&mut g, x, &nodes)?;
    Ok(g.value(out).clone())
}

pub fn symmetry_score(a: &Tensor) -> Result<f64> {
    scalar_of(|g| {
        let a = g.constant(a.clone());
        symmetry_score_node(g, a)
    })
}

pub fn sym_loss(a: &Tensor, alpha_sym: f64) -> Result<f64> {
    scalar_of(|g| {
        let a = g.constant(a.clone());
        sym_loss_node(g, a, alpha_sym)
    })
}

pub fn row_entropy(a: &Tensor, i: usize) -> Result<f64> {
    if a.rank() != 2 || i >= a.rows() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: a.shape().first().copied().unwrap_or(0),
        });
    }
    let mut g = Graph::new();
    let id = g.constant(a.clone());
    let e = row_entropy_node(&mut g, id)?;
    Ok(g.value(e).data()[i])
}

pub fn entropy_loss(a: &Tensor, alpha_en: f64, reduce: EntropyReduce) -> Result<f64> {
    scalar_of(|g| {
        let a = g.constant(a.clone());
        entropy_loss_node(g, a, alpha_en, reduce)
    })
}

pub fn ssa_loss(a: &Tensor, cfg: &SsaConfig) -> Result<f64> {
    scalar_of(|g| {
        let a = g.constant(a.clone());
        ssa_loss_node(g, a, cfg)
    })
}

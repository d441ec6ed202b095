//! U-shaped CNN/transformer segmentation model and its training objective.
//!
//! Encoder stages are `conv3×3-ReLU-conv3×3-ReLU` followed by a 2× max-pool;
//! the pooled map of the last stage is tokenized into `s×s` patches, run
//! through the pruned transformer blocks, un-tokenized, and decoded by mirror
//! stages of `upsample → concat skip → conv-ReLU ×2`, then a 1×1 head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attention_probs_node, ssa_loss_node, ssa_loss_parts_node, BlockNodes, HeadNodes, SsaConfig};
use crate::autograd::{Graph, NodeId, ReduceKind, Upsample};
use crate::error::{invalid, Error, Result};
use crate::grpe::{default_theta, grpe_node, Grid};
use crate::pruning::{gate_loss_node, pruned_block_node, BlockTrace, FlopReport, PruneConfig, PruneContext, PruneDecision, PruneNodes};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PosEmbed {
    #[default]
    Grpe,
    Absolute,
    None,
}

impl FromStr for PosEmbed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpe" => Ok(Self::Grpe),
            "absolute" => Ok(Self::Absolute),
            "none" => Ok(Self::None),
            other => Err(invalid(format!("unknown position embedding {other:?} (grpe | absolute | none)"))),
        }
    }
}

impl fmt::Display for PosEmbed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Grpe => "grpe",
            Self::Absolute => "absolute",
            Self::None => "none",
        })
    }
}

pub fn parse_upsample(s: &str) -> Result<Upsample> {
    match s {
        "nearest" => Ok(Upsample::Nearest),
        "bilinear" => Ok(Upsample::Bilinear),
        other => Err(invalid(format!("unknown upsample mode {other:?} (nearest | bilinear)"))),
    }
}

pub fn upsample_name(u: Upsample) -> &'static str {
    match u {
        Upsample::Nearest => "nearest",
        Upsample::Bilinear => "bilinear",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ce_weight: 0.5,
            dice_weight: 0.5,
            dice_smooth: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub enc_widths: Vec<usize>,
    pub patch_size: usize,
    pub d: usize,
    pub heads: usize,
    pub d_m: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub classes: usize,
    pub pos_embed: PosEmbed,
    pub upsample: Upsample,
    pub ssa: SsaConfig,
    pub prune: PruneConfig,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_h: 64,
            image_w: 64,
            enc_widths: vec![16, 32, 64],
            patch_size: 1,
            d: 64,
            heads: 4,
            d_m: 16,
            d_ff: 128,
            blocks: 2,
            classes: 2,
            pos_embed: PosEmbed::Grpe,
            upsample: Upsample::Nearest,
            ssa: SsaConfig::default(),
            prune: PruneConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    /// 16×16 input, one block of two 4-wide heads.
    pub fn tiny() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            enc_widths: vec![3, 4, 6],
            d: 8,
            heads: 2,
            d_m: 4,
            d_ff: 12,
            blocks: 1,
            ..Self::default()
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.enc_widths.len()
    }

    /// Side of the image cell covered by one token.
    pub fn cell(&self) -> usize {
        self.downsampling() * self.patch_size
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.image_h / self.cell(), self.image_w / self.cell())
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.enc_widths.last().unwrap_or(&0)
    }

    /// Whether the gate, threshold and `g` parameters exist.
    pub fn has_prune_params(&self) -> bool {
        self.prune.enable_query_prune || self.prune.enable_dep_prune
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("patch_size", self.patch_size),
            ("d", self.d),
            ("heads", self.heads),
            ("d_m", self.d_m),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.enc_widths.is_empty() || self.enc_widths.contains(&0) {
            return Err(Error::Config("encoder widths must be non-empty and positive".into()));
        }
        let cell = self.cell();
        if self.image_h == 0 || self.image_w == 0 || !self.image_h.is_multiple_of(cell) || !self.image_w.is_multiple_of(cell) {
            return Err(Error::Config(format!(
                "image {}×{} not divisible by downsampling×patch = {cell}",
                self.image_h, self.image_w
            )));
        }
        if self.d != self.heads * self.d_m {
            return Err(Error::Config(format!("d = {} must equal heads·d_m = {}", self.d, self.heads * self.d_m)));
        }
        if self.d_ff < self.d {
            return Err(Error::Config(format!("d_ff = {} must be ≥ d = {}", self.d_ff, self.d)));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be ≥ 2".into()));
        }
        if self.ssa.enabled && self.blocks > 0 && self.grid()?.n() < 2 {
            return Err(Error::Config("attention losses need at least two tokens".into()));
        }
        self.ssa.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.prune.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// One image (`C×H×W`, values in [0,1]) and its `H·W` row-major labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor, mask: Vec<u8>, classes: usize) -> Result<Self> {
        if image.rank() != 3 || mask.len() != image.shape()[1] * image.shape()[2] {
            return Err(invalid(format!("image {:?} with {} labels", image.shape(), mask.len())));
        }
        if let Some(&bad) = mask.iter().find(|&&m| m as usize >= classes) {
            return Err(invalid(format!("label {bad} ≥ class count {classes}")));
        }
        Ok(Self { image, mask })
    }
}

/// Per-patch foreground labels: a patch is 1 iff any pixel of its
/// `cell×cell` square is non-background.
pub fn ground_truth_patch_mask(mask: &[u8], h: usize, w: usize, grid: Grid, cell: usize) -> Result<Vec<u8>> {
    if mask.len() != h * w || grid.h * cell != h || grid.w * cell != w {
        return Err(invalid(format!(
            "{}-pixel mask of {h}×{w} does not tile a {}×{} grid of {cell}-pixel cells",
            mask.len(),
            grid.h,
            grid.w
        )));
    }
    let mut out = vec![0u8; grid.n()];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != 0 {
                out[(y / cell) * grid.w + x / cell] = 1;
            }
        }
    }
    Ok(out)
}

/// Flat index map between a `D×h×w` map and its `N×(D·s²)` patch matrix:
/// entry `k` of the patch matrix is element `index[k]` of the map.
pub fn patch_index(channels: usize, h: usize, w: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(invalid(format!("{h}×{w} map is not divisible into {s}×{s} patches")));
    }
    let (gh, gw) = (h / s, w / s);
    let mut index = Vec::with_capacity(channels * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..channels {
                for dy in 0..s {
                    for dx in 0..s {
                        index.push((c * h + py * s + dy) * w + px * s + dx);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Tokenizes a `D×h×w` node into `N×(D·s²)` and projects it to `N×d`.
pub fn patch_embed_node(g: &mut Graph, map: NodeId, s: usize, w_pe: NodeId, b_pe: NodeId) -> Result<NodeId> {
    let shape = g.shape(map).to_vec();
    if shape.len() != 3 {
        return Err(invalid(format!("patch_embed needs D×h×w, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let index = patch_index(c, h, w, s)?;
    let n = (h / s) * (w / s);
    let tokens = g.gather(map, index, &[n, c * s * s])?;
    let proj = g.matmul(tokens, w_pe)?;
    g.add(proj, b_pe)
}

/// Plain form of [`patch_embed_node`]. Returns the sequence and its grid.
pub fn patch_embed(map: &Tensor, s: usize, w_pe: &Tensor, b_pe: &Tensor) -> Result<(Tensor, Grid)> {
    let mut g = Graph::new();
    let ids = [map, w_pe, b_pe].map(|t| g.constant(t.clone()));
    let out = patch_embed_node(&mut g, ids[0], s, ids[1], ids[2])?;
    let grid = Grid::new(map.shape()[1] / s, map.shape()[2] / s)?;
    Ok((g.value(out).clone(), grid))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct HeadIds {
    e_q: ParamId,
    e_k: ParamId,
    e_v: ParamId,
    e_o: ParamId,
    theta: Option<ParamId>,
    table: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct PruneIds {
    w_b: ParamId,
    w_f: ParamId,
    w_t: Vec<ParamId>,
    g: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    heads: Vec<HeadIds>,
    w_msa: ParamId,
    w_1: ParamId,
    b_1: ParamId,
    w_2: ParamId,
    b_2: ParamId,
    prune: Option<PruneIds>,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<[ConvIds; 2]>,
    w_pe: ParamId,
    b_pe: ParamId,
    pos: Option<ParamId>,
    blocks: Vec<BlockIds>,
    w_ue: ParamId,
    b_ue: ParamId,
    dec: Vec<[ConvIds; 2]>,
    head: ConvIds,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std is positive");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut self.rng));
        self.store.add(name, t)
    }

    fn fixed(&mut self, name: String, t: Tensor) -> ParamId {
        self.store.add(name, t)
    }

    fn conv(&mut self, name: &str, o: usize, c: usize, k: usize, gain: f64) -> ConvIds {
        let std = (gain / (c * k * k) as f64).sqrt();
        ConvIds {
            w: self.normal(format!("{name}.w"), &[o, c, k, k], std),
            b: self.fixed(format!("{name}.b"), Tensor::zeros([o])),
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, gain: f64) -> ParamId {
        self.normal(name.to_string(), &[i, o], (gain / i as f64).sqrt())
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, Layout)> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        store: ParamStore::default(),
    };
    let mut enc = Vec::new();
    let mut c = cfg.in_channels;
    for (k, &w) in cfg.enc_widths.iter().enumerate() {
        enc.push([init.conv(&format!("enc{k}.conv_a"), w, c, 3, 2.0), init.conv(&format!("enc{k}.conv_b"), w, w, 3, 2.0)]);
        c = w;
    }
    let grid = cfg.grid()?;
    let s2 = cfg.patch_size * cfg.patch_size;
    let (n, d, d_m) = (grid.n(), cfg.d, cfg.d_m);
    let w_pe = init.linear("embed.w", c * s2, d, 1.0);
    let b_pe = init.fixed("embed.b".into(), Tensor::zeros([1, d]));
    let pos = (cfg.pos_embed == PosEmbed::Absolute).then(|| init.normal("embed.pos".into(), &[n, d], 0.02));

    let mut blocks = Vec::new();
    for b in 0..cfg.blocks {
        let p = format!("block{b}");
        let heads = (0..cfg.heads)
            .map(|h| {
                let hp = format!("{p}.head{h}");
                let grpe = cfg.pos_embed == PosEmbed::Grpe;
                HeadIds {
                    e_q: init.linear(&format!("{hp}.e_q"), d, d_m, 1.0),
                    e_k: init.linear(&format!("{hp}.e_k"), d, d_m, 1.0),
                    e_v: init.linear(&format!("{hp}.e_v"), d, d_m, 1.0),
                    e_o: init.fixed(format!("{hp}.e_o"), Tensor::eye(d_m)),
                    theta: grpe.then(|| init.fixed(format!("{hp}.grpe_theta"), Tensor::scalar(default_theta(grid).ln()))),
                    table: grpe.then(|| init.fixed(format!("{hp}.grpe_table"), Tensor::zeros([1, grid.table_len()]))),
                }
            })
            .collect();
        let w_msa = init.linear(&format!("{p}.w_msa"), cfg.heads * d_m, d, 1.0);
        let w_1 = init.linear(&format!("{p}.ffn.w_1"), d, cfg.d_ff, 2.0);
        let b_1 = init.fixed(format!("{p}.ffn.b_1"), Tensor::zeros([1, cfg.d_ff]));
        let w_2 = init.linear(&format!("{p}.ffn.w_2"), cfg.d_ff, d, 1.0);
        let b_2 = init.fixed(format!("{p}.ffn.b_2"), Tensor::zeros([1, d]));
        let prune = cfg.has_prune_params().then(|| PruneIds {
            w_b: init.fixed(format!("{p}.gate.w_b"), Tensor::zeros([d, 1])),
            w_f: init.fixed(format!("{p}.gate.w_f"), Tensor::zeros([d, 1])),
            w_t: (0..cfg.heads)
                .map(|h| init.fixed(format!("{p}.head{h}.w_t"), Tensor::zeros([d_m, 1])))
                .collect(),
            g: init.fixed(format!("{p}.g"), Tensor::scalar(cfg.prune.g_init)),
        });
        blocks.push(BlockIds {
            heads,
            w_msa,
            w_1,
            b_1,
            w_2,
            b_2,
            prune,
        });
    }
    let w_ue = init.linear("unembed.w", d, c * s2, 1.0);
    let b_ue = init.fixed("unembed.b".into(), Tensor::zeros([1, c * s2]));

    let mut dec = Vec::new();
    let mut prev = c;
    for k in (0..cfg.enc_widths.len()).rev() {
        let skip = cfg.enc_widths[k];
        let out = cfg.enc_widths[k.saturating_sub(1)];
        dec.push([init.conv(&format!("dec{k}.conv_a"), out, prev + skip, 3, 2.0), init.conv(&format!("dec{k}.conv_b"), out, out, 3, 2.0)]);
        prev = out;
    }
    let head = init.conv("head", cfg.classes, prev, 1, 1.0);
    let layout = Layout {
        enc,
        w_pe,
        b_pe,
        pos,
        blocks,
        w_ue,
        b_ue,
        dec,
        head,
    };
    Ok((init.store, layout))
}

/// How a forward pass treats the pruning stages.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub warmup_active: bool,
    /// One decision per block, replacing the data-dependent choices.
    pub frozen: Option<&'a [PruneDecision]>,
}

/// Graph handles produced by [`Model::forward_node`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: NodeId,
    pub block_inputs: Vec<NodeId>,
    pub blocks: Vec<BlockTrace>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_ssa: f64,
    pub l_g: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub l_seg: NodeId,
    pub l_ssa: NodeId,
    pub l_g: NodeId,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_seg: g.value(self.l_seg).item(),
            l_ssa: g.value(self.l_ssa).item(),
            l_g: g.value(self.l_g).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Values captured from one block of a forward pass.
#[derive(Clone, Debug)]
pub struct BlockDiagnostics {
    /// `N×d` block input.
    pub input: Tensor,
    /// Per head, `kept×N` attention before re-normalization.
    pub attention: Vec<Tensor>,
    /// Per head, after re-normalization (when dependency pruning ran).
    pub renormalized: Vec<Option<Tensor>>,
    pub decision: PruneDecision,
    pub gate: Option<Vec<f64>>,
    pub flops: FlopReport,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub grid: Grid,
    pub blocks: Vec<BlockDiagnostics>,
}

impl Diagnostics {
    pub fn sa_flops(&self) -> u64 {
        self.blocks.iter().map(|b| b.flops.omega_psa_measured).sum()
    }

    pub fn sa_flops_unpruned(&self) -> u64 {
        self.blocks.iter().map(|b| b.flops.omega_sa).sum()
    }
}

/// Result of one per-sample forward/backward pass.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: LossBreakdown,
    /// One buffer per parameter, in store order.
    pub grads: Vec<Vec<f64>>,
    pub decisions: Vec<PruneDecision>,
    pub sa_flops: u64,
    /// Argmax labels of the forward pass.
    pub pred: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let (store, layout) = build(&cfg, seed)?;
        Ok(Self { cfg, store, layout })
    }

    /// Rebuilds the layout for `cfg` and adopts `store`, which must hold the
    /// same names and shapes in the same order.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let (fresh, layout) = build(&cfg, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::Config(format!("expected {} tensors, found {}", fresh.len(), store.len())));
        }
        for ((_, a, ta), (_, b, tb)) in fresh.iter().zip(store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Config(format!("parameter {b} {:?} does not match {a} {:?}", tb.shape(), ta.shape())));
            }
        }
        Ok(Self { cfg, store, layout })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameters held at their initial value during warm-up.
    pub fn warmup_frozen(&self) -> Vec<ParamId> {
        self.layout.blocks.iter().filter_map(|b| b.prune.as_ref().map(|p| p.g)).collect()
    }

    pub fn grid(&self) -> Grid {
        self.cfg.grid().expect("validated at construction")
    }

    /// Binds every parameter as a trainable leaf (`trainable`) or a constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.store
            .iter()
            .map(|(_, _, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    fn conv_relu(g: &mut Graph, p: &[NodeId], x: NodeId, c: ConvIds) -> Result<NodeId> {
        let y = g.conv2d(x, p[c.w.0], Some(p[c.b.0]), 1)?;
        Ok(g.relu(y))
    }

    pub fn forward_node(&self, g: &mut Graph, p: &[NodeId], image: &Tensor, opts: ForwardOptions<'_>) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        let want = [cfg.in_channels, cfg.image_h, cfg.image_w];
        if image.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: want.to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        if let Some(fr) = opts.frozen {
            if fr.len() != cfg.blocks {
                return Err(invalid(format!("{} frozen decisions for {} blocks", fr.len(), cfg.blocks)));
            }
        }
        let l = &self.layout;
        let mut x = g.constant(image.clone());
        let mut skips = Vec::with_capacity(l.enc.len());
        for [a, b] in &l.enc {
            x = Self::conv_relu(g, p, x, *a)?;
            x = Self::conv_relu(g, p, x, *b)?;
            skips.push(x);
            x = g.max_pool2(x)?;
        }
        let map_shape = g.shape(x).to_vec();
        let s = cfg.patch_size;
        let mut f = patch_embed_node(g, x, s, p[l.w_pe.0], p[l.b_pe.0])?;
        if let Some(pos) = l.pos {
            f = g.add(f, p[pos.0])?;
        }

        let grid = self.grid();
        let mut block_inputs = Vec::with_capacity(l.blocks.len());
        let mut traces = Vec::with_capacity(l.blocks.len());
        for (bi, b) in l.blocks.iter().enumerate() {
            let mut heads = Vec::with_capacity(b.heads.len());
            for h in &b.heads {
                let bias = match (h.theta, h.table) {
                    (Some(t), Some(r)) => Some(grpe_node(g, grid, p[t.0], p[r.0])?),
                    _ => None,
                };
                heads.push(HeadNodes {
                    e_q: p[h.e_q.0],
                    e_k: p[h.e_k.0],
                    e_v: p[h.e_v.0],
                    e_o: p[h.e_o.0],
                    bias,
                });
            }
            let nodes = BlockNodes {
                heads,
                w_msa: p[b.w_msa.0],
                w_1: p[b.w_1.0],
                b_1: p[b.b_1.0],
                w_2: p[b.w_2.0],
                b_2: p[b.b_2.0],
            };
            let prune = b.prune.as_ref().map(|pr| PruneNodes {
                w_b: p[pr.w_b.0],
                w_f: p[pr.w_f.0],
                w_t: pr.w_t.iter().map(|id| p[id.0]).collect(),
                g: p[pr.g.0],
            });
            let ctx = PruneContext {
                cfg: &cfg.prune,
                warmup_active: opts.warmup_active,
                frozen: opts.frozen.map(|fr| &fr[bi]),
            };
            block_inputs.push(f);
            let tr = pruned_block_node(g, f, &nodes, prune.as_ref(), ctx)?;
            f = tr.out;
            traces.push(tr);
        }

        let u = g.matmul(f, p[l.w_ue.0])?;
        let u = g.add(u, p[l.b_ue.0])?;
        let index = patch_index(map_shape[0], map_shape[1], map_shape[2], s)?;
        let mut x = g.scatter(u, index, &map_shape)?;

        for ([a, b], skip) in l.dec.iter().zip(skips.iter().rev()) {
            x = g.upsample(x, 2, cfg.upsample)?;
            x = g.concat(&[x, *skip], 0)?;
            x = Self::conv_relu(g, p, x, *a)?;
            x = Self::conv_relu(g, p, x, *b)?;
        }
        let logits = g.conv2d(x, p[l.head.w.0], Some(p[l.head.b.0]), 0)?;
        Ok(ForwardTrace {
            logits,
            block_inputs,
            blocks: traces,
        })
    }

    /// Segmentation, attention and gate losses of one sample.
    pub fn loss_node(&self, g: &mut Graph, trace: &ForwardTrace, mask: &[u8]) -> Result<LossNodes> {
        let cfg = &self.cfg;
        let l_seg = seg_loss_node(g, trace.logits, mask, &cfg.loss)?;
        let zero = g.constant(Tensor::scalar(0.0));

        let mut l_ssa = zero;
        if cfg.ssa.enabled {
            for b in &trace.blocks {
                let kept = &b.decision.kept_indices;
                for h in &b.heads {
                    let term = if kept.len() == b.decision.n {
                        ssa_loss_node(g, h.a_p, &cfg.ssa)?
                    } else {
                        let k = kept.len();
                        let n = b.decision.n;
                        let index = (0..k * k).map(|t| (t / k) * n + kept[t % k]).collect();
                        let square = g.gather(h.a_p, index, &[k, k])?;
                        ssa_loss_parts_node(g, square, h.a_p, &cfg.ssa)?
                    };
                    l_ssa = g.add(l_ssa, term)?;
                }
            }
        }

        let mut l_g = zero;
        if trace.blocks.iter().any(|b| b.gate.is_some()) {
            let patch = ground_truth_patch_mask(mask, cfg.image_h, cfg.image_w, self.grid(), cfg.cell())?;
            for b in &trace.blocks {
                if let Some(gb) = b.gate {
                    let term = gate_loss_node(g, gb, &patch)?;
                    l_g = g.add(l_g, term)?;
                }
            }
        }
        let s = g.add(l_seg, l_ssa)?;
        let total = g.add(s, l_g)?;
        Ok(LossNodes { total, l_seg, l_ssa, l_g })
    }

    fn diagnostics(&self, g: &Graph, trace: &ForwardTrace) -> Diagnostics {
        let blocks = trace
            .blocks
            .iter()
            .zip(&trace.block_inputs)
            .map(|(b, &input)| BlockDiagnostics {
                input: g.value(input).clone(),
                attention: b.heads.iter().map(|h| g.value(h.a_p).clone()).collect(),
                renormalized: b.heads.iter().map(|h| h.a_renorm.map(|r| g.value(r).clone())).collect(),
                decision: b.decision.clone(),
                gate: b.gate.map(|gb| g.value(gb).data().to_vec()),
                flops: FlopReport::from_decision(&b.decision, self.cfg.d, self.cfg.d_m, self.cfg.heads, self.cfg.prune.flops_mode),
            })
            .collect();
        Diagnostics { grid: self.grid(), blocks }
    }

    /// Logits (`classes×H×W`) and per-block diagnostics.
    pub fn forward(&self, image: &Tensor, opts: ForwardOptions<'_>) -> Result<(Tensor, Diagnostics)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let trace = self.forward_node(&mut g, &p, image, opts)?;
        let diag = self.diagnostics(&g, &trace);
        Ok((g.value(trace.logits).clone(), diag))
    }

    pub fn total_loss(&self, sample: &SegSample, opts: ForwardOptions<'_>) -> Result<(LossBreakdown, Diagnostics)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let trace = self.forward_node(&mut g, &p, &sample.image, opts)?;
        let loss = self.loss_node(&mut g, &trace, &sample.mask)?;
        Ok((loss.values(&g), self.diagnostics(&g, &trace)))
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_grad(&self, sample: &SegSample, opts: ForwardOptions<'_>) -> Result<SampleGrad> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let trace = self.forward_node(&mut g, &p, &sample.image, opts)?;
        let loss = self.loss_node(&mut g, &trace, &sample.mask)?;
        let breakdown = loss.values(&g);
        let decisions: Vec<PruneDecision> = trace.blocks.iter().map(|b| b.decision.clone()).collect();
        let sa_flops = decisions
            .iter()
            .map(|d| FlopReport::from_decision(d, self.cfg.d, self.cfg.d_m, self.cfg.heads, self.cfg.prune.flops_mode).omega_psa_measured)
            .sum();
        let pred = argmax_labels(g.value(trace.logits));
        if !breakdown.total.is_finite() {
            return Ok(SampleGrad {
                loss: breakdown,
                grads: Vec::new(),
                decisions,
                sa_flops,
                pred,
            });
        }
        g.backward(loss.total)?;
        let grads = p.iter().map(|&id| g.take_grad(id).expect("trainable leaf")).collect();
        Ok(SampleGrad {
            loss: breakdown,
            grads,
            decisions,
            sa_flops,
            pred,
        })
    }

    /// Unpruned `N×N` attention of every head of block `b` for the given
    /// block input.
    pub fn full_attention(&self, b: usize, input: &Tensor) -> Result<Vec<Tensor>> {
        let block = self
            .layout
            .blocks
            .get(b)
            .ok_or(Error::IndexOutOfRange { index: b, len: self.layout.blocks.len() })?;
        let grid = self.grid();
        let mut out = Vec::with_capacity(block.heads.len());
        for h in &block.heads {
            let mut g = Graph::new();
            let mut c = |id: ParamId| g.constant(self.store.get(id).clone());
            let (e_q, e_k) = (c(h.e_q), c(h.e_k));
            let rt = match (h.theta, h.table) {
                (Some(t), Some(r)) => Some((c(t), c(r))),
                _ => None,
            };
            let bias = match rt {
                Some((t, r)) => Some(grpe_node(&mut g, grid, t, r)?),
                None => None,
            };
            let x = g.constant(input.clone());
            let (a, _) = attention_probs_node(&mut g, x, x, e_q, e_k, bias)?;
            out.push(g.value(a).clone());
        }
        Ok(out)
    }

    /// Per-pixel argmax labels.
    pub fn predict(&self, image: &Tensor, opts: ForwardOptions<'_>) -> Result<Vec<u8>> {
        let (logits, _) = self.forward(image, opts)?;
        Ok(argmax_labels(&logits))
    }
}

/// Class with the largest logit at every pixel of a `C×H×W` tensor (first
/// index wins ties).
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..hw)
        .map(|k| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * hw + k] > d[best * hw + k] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}

/// `ce_weight·CE + dice_weight·(1 − mean soft Dice over foreground classes)`
/// for `classes×H×W` logits.
pub fn seg_loss_node(g: &mut Graph, logits: NodeId, mask: &[u8], cfg: &LossConfig) -> Result<NodeId> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[1] * s[2] != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "seg_loss",
            lhs: s,
            rhs: vec![mask.len()],
        });
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    if let Some(&bad) = mask.iter().find(|&&m| m as usize >= c) {
        return Err(invalid(format!("label {bad} ≥ class count {c}")));
    }
    let flat = g.reshape(logits, &[c, hw])?;
    let rows = g.transpose(flat)?;
    let onehot = Tensor::from_fn([hw, c], |k| if mask[k / c] as usize == k % c { 1.0 } else { 0.0 });
    let y_sum = Tensor::from_fn([1, c], |k| mask.iter().filter(|&&m| m as usize == k).count() as f64);
    let y = g.constant(onehot);

    let logp = g.log_softmax_rows(rows)?;
    let picked = g.mul(logp, y)?;
    let ce = g.sum_all(picked);
    let ce = g.scale(ce, -1.0 / hw as f64);

    let probs = g.softmax_rows(rows)?;
    let py = g.mul(probs, y)?;
    let inter = g.reduce(py, 0, ReduceKind::Sum)?;
    let p_sum = g.reduce(probs, 0, ReduceKind::Sum)?;
    let y_sum = g.constant(y_sum);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, cfg.dice_smooth);
    let den = g.add(p_sum, y_sum)?;
    let den = g.add_scalar(den, cfg.dice_smooth);
    let dice = g.div(num, den)?;
    let fg = g.slice_cols(dice, 1, c)?;
    let mean = g.mean_all(fg);
    let neg = g.scale(mean, -1.0);
    let dice_loss = g.add_scalar(neg, 1.0);

    let a = g.scale(ce, cfg.ce_weight);
    let b = g.scale(dice_loss, cfg.dice_weight);
    g.add(a, b)
}

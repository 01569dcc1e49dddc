//! Multi-scale heterogeneous graph attention over agent feature maps.
//!
//! Agents form a complete directed graph (self-loops included). Node types
//! come from either the LiDAR category (4 types) or the rotation frequency
//! (2 types); each node type owns its query/key/value projections and each
//! ordered edge type owns an attention-weight and a value-weight matrix.
//! Per spatial location and head:
//!
//! ```text
//! logit(i,j) = Q(i) · W_att[e_ij] · K(j)ᵀ / sqrt(d_h)
//! Att(i,j)   = softmax over j in N(i)
//! Msg(i,j)   = V(j) · W_val[e_ij]
//! G(i)       = Σ_j Att(i,j) · Msg(i,j)
//! ```
//!
//! A block pairs this cross-agent layer with windowed local self-attention,
//! each wrapped in residual + layer norm. The multi-scale branch runs one
//! block per pyramid level (learned stride-2 downsampling, transposed-conv
//! upsampling) and projects the concatenated scales back to C channels.

use crate::encoder::BevFeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, LayerNorm, Linear, ParamStore};
use crate::tensor::{Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which heterogeneity axis a graph is typed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Category,
    Frequency,
}

impl Branch {
    pub fn n_types(self) -> usize {
        match self {
            Branch::Category => 4,
            Branch::Frequency => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Category => "category",
            Branch::Frequency => "frequency",
        }
    }

    /// Node type index for an agent's metadata.
    pub fn type_index(self, meta: &crate::encoder::FeatureMeta) -> Result<usize> {
        match self {
            Branch::Category => Ok(crate::scenario::LidarKind::ALL
                .iter()
                .position(|&k| k == meta.category)
                .expect("LidarKind enum covers all categories")),
            Branch::Frequency => match meta.frequency_hz {
                10 => Ok(0),
                20 => Ok(1),
                f => Err(Error::config(format!("unknown rotation frequency {f} Hz"))),
            },
        }
    }
}

/// One typed node: the agent's feature map `[l, c]` plus its type index.
#[derive(Debug, Clone, Copy)]
pub struct GraphNode {
    pub agent_id: u32,
    pub type_index: usize,
    pub features: Var,
}

/// Complete directed graph with self-loops over the agents of one frame.
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub branch: Branch,
    pub nodes: Vec<GraphNode>,
    /// All ordered pairs (i, j), including i = j.
    pub edges: Vec<(usize, usize)>,
}

impl HeteroGraph {
    pub fn edge_type(&self, i: usize, j: usize) -> (usize, usize) {
        (self.nodes[i].type_index, self.nodes[j].type_index)
    }
}

/// Build the category and frequency graphs over one frame's feature maps.
///
/// Both graphs share the node set and differ only in node typing. All maps
/// must share H x W x C; inconsistent shapes or unknown frequencies error.
pub fn build_graphs(t: &Tape, features: &[BevFeatureMap]) -> Result<(HeteroGraph, HeteroGraph)> {
    if features.is_empty() {
        return Err(Error::config("build_graphs needs at least one agent"));
    }
    let (h0, w0, c0) = (features[0].h, features[0].w, features[0].c);
    for f in features {
        if f.h != h0 || f.w != w0 || f.c != c0 {
            return Err(Error::shape(format!(
                "agent {} map {}x{}x{} differs from {}x{}x{}",
                f.meta.agent_id, f.h, f.w, f.c, h0, w0, c0
            )));
        }
        if t.shape(f.data) != [h0 * w0, c0] {
            return Err(Error::shape(format!(
                "agent {} tensor shape {:?} does not match metadata",
                f.meta.agent_id,
                t.shape(f.data)
            )));
        }
    }
    let n = features.len();
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let mk = |branch: Branch| -> Result<HeteroGraph> {
        let nodes = features
            .iter()
            .map(|f| {
                Ok(GraphNode {
                    agent_id: f.meta.agent_id,
                    type_index: branch.type_index(&f.meta)?,
                    features: f.data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HeteroGraph { branch, nodes, edges: edges.clone() })
    };
    Ok((mk(Branch::Category)?, mk(Branch::Frequency)?))
}

/// Per-node-type projections and per-ordered-edge-type weights for one layer.
pub struct GraphAttentionParams {
    pub branch: Branch,
    pub heads: usize,
    pub head_dim: usize,
    /// Indexed by node type: (query, key, value).
    pub qkv: Vec<(Linear, Linear, Linear)>,
    /// Indexed by `ti * n_types + tj`: `[h, d, d]` weight tensors.
    pub edge_att: Vec<usize>,
    pub edge_val: Vec<usize>,
    pub out_proj: Linear,
}

impl GraphAttentionParams {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        branch: Branch,
        c: usize,
        heads: usize,
    ) -> Result<Self> {
        if c % heads != 0 {
            return Err(Error::config(format!("channels {c} not divisible by heads {heads}")));
        }
        let d = c / heads;
        let nt = branch.n_types();
        let mut qkv = Vec::with_capacity(nt);
        for ti in 0..nt {
            qkv.push((
                Linear::new(ps, rng, &format!("{name}.type{ti}.q"), c, c),
                Linear::new(ps, rng, &format!("{name}.type{ti}.k"), c, c),
                Linear::new(ps, rng, &format!("{name}.type{ti}.v"), c, c),
            ));
        }
        let mut edge_att = Vec::with_capacity(nt * nt);
        let mut edge_val = Vec::with_capacity(nt * nt);
        for ti in 0..nt {
            for tj in 0..nt {
                edge_att.push(ps.add(
                    &format!("{name}.edge{ti}_{tj}.att"),
                    crate::nn::xavier_uniform(rng, &[heads, d, d], d, d),
                    false,
                ));
                edge_val.push(ps.add(
                    &format!("{name}.edge{ti}_{tj}.val"),
                    crate::nn::xavier_uniform(rng, &[heads, d, d], d, d),
                    false,
                ));
            }
        }
        let out_proj = Linear::new(ps, rng, &format!("{name}.out"), c, c);
        Ok(Self { branch, heads, head_dim: d, qkv, edge_att, edge_val, out_proj })
    }
}

/// One cross-agent attention layer; returns updated per-node features `[l, c]`.
pub fn graph_attention_layer(
    t: &mut Tape,
    ps: &ParamStore,
    graph: &HeteroGraph,
    params: &GraphAttentionParams,
) -> Result<Vec<Var>> {
    let n = graph.nodes.len();
    let (h, d) = (params.heads, params.head_dim);
    let c = h * d;
    let l = t.shape(graph.nodes[0].features)[0];
    let nt = params.branch.n_types();
    let scale = 1.0 / (d as f64).sqrt();

    // typed projections, reshaped to [l, h, d]
    let mut q = Vec::with_capacity(n);
    let mut k = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for node in &graph.nodes {
        if node.type_index >= nt {
            return Err(Error::config(format!(
                "node type {} out of range for {} branch",
                node.type_index,
                params.branch.name()
            )));
        }
        let (wq, wk, wv) = &params.qkv[node.type_index];
        let qi = wq.forward(t, ps, node.features);
        let ki = wk.forward(t, ps, node.features);
        let vi = wv.forward(t, ps, node.features);
        q.push(t.reshape(qi, &[l, h, d]));
        k.push(t.reshape(ki, &[l, h, d]));
        v.push(t.reshape(vi, &[l, h, d]));
    }

    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        // logits over neighbors j (all nodes incl. self), per location and head
        let mut logit_cols = Vec::with_capacity(n);
        for j in 0..n {
            let (ti, tj) = graph.edge_type(i, j);
            let w_att = t.param(params.edge_att[ti * nt + tj], ps.value(params.edge_att[ti * nt + tj]));
            let qw = t.head_matmul(q[i], w_att);
            let prod = t.mul(qw, k[j]);
            let lij = t.sum_axis(prod, 2);
            let lij = t.scale(lij, scale);
            if t.value(lij).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("graph attention logits for nodes {i} <- {j}"),
                });
            }
            logit_cols.push(t.reshape(lij, &[l, h, 1]));
        }
        let logits = t.concat(&logit_cols, 2);
        let att = t.softmax_last(logits); // [l, h, n]

        let mut g: Option<Var> = None;
        for j in 0..n {
            let (ti, tj) = graph.edge_type(i, j);
            let w_val = t.param(params.edge_val[ti * nt + tj], ps.value(params.edge_val[ti * nt + tj]));
            let msg = t.head_matmul(v[j], w_val); // [l, h, d]
            let a_j = t.slice(att, 2, j, 1); // [l, h, 1]
            let contrib = t.mul(msg, a_j);
            g = Some(match g {
                Some(acc) => t.add(acc, contrib),
                None => contrib,
            });
        }
        let g = t.reshape(g.unwrap(), &[l, c]);
        outputs.push(params.out_proj.forward(t, ps, g));
    }
    Ok(outputs)
}

/// Attention probabilities of one node, for normalization diagnostics.
/// Returns `[l, h, n]` softmax rows for node `i`.
pub fn graph_attention_probs(
    t: &mut Tape,
    ps: &ParamStore,
    graph: &HeteroGraph,
    params: &GraphAttentionParams,
    i: usize,
) -> Result<crate::tensor::Arr> {
    let n = graph.nodes.len();
    let (h, d) = (params.heads, params.head_dim);
    let l = t.shape(graph.nodes[0].features)[0];
    let nt = params.branch.n_types();
    let scale = 1.0 / (d as f64).sqrt();
    let (wq, _, _) = &params.qkv[graph.nodes[i].type_index];
    let qi_full = wq.forward(t, ps, graph.nodes[i].features);
    let qi = t.reshape(qi_full, &[l, h, d]);
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let (ti, tj) = graph.edge_type(i, j);
        let (_, wk, _) = &params.qkv[graph.nodes[j].type_index];
        let kj_full = wk.forward(t, ps, graph.nodes[j].features);
        let kj = t.reshape(kj_full, &[l, h, d]);
        let w_att = t.param(params.edge_att[ti * nt + tj], ps.value(params.edge_att[ti * nt + tj]));
        let qw = t.head_matmul(qi, w_att);
        let prod = t.mul(qw, kj);
        let lij = t.sum_axis(prod, 2);
        let lij = t.scale(lij, scale);
        cols.push(t.reshape(lij, &[l, h, 1]));
    }
    let logits = t.concat(&cols, 2);
    let att = t.softmax_last(logits);
    Ok(t.value(att).clone())
}

/// Shared-projection multi-head self-attention within m x m spatial windows.
pub struct LocalSelfAttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub window: usize,
}

impl LocalSelfAttentionParams {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if c % heads != 0 {
            return Err(Error::config(format!("channels {c} not divisible by heads {heads}")));
        }
        Ok(Self {
            wq: Linear::new(ps, rng, &format!("{name}.q"), c, c),
            wk: Linear::new(ps, rng, &format!("{name}.k"), c, c),
            wv: Linear::new(ps, rng, &format!("{name}.v"), c, c),
            wo: Linear::new(ps, rng, &format!("{name}.o"), c, c),
            heads,
            window,
        })
    }
}

/// Windowed self-attention on a single `[l, c]` map laid out as h x w.
pub fn local_self_attention(
    t: &mut Tape,
    ps: &ParamStore,
    x: Var,
    h: usize,
    w: usize,
    params: &LocalSelfAttentionParams,
) -> Result<Var> {
    let m = params.window;
    if h % m != 0 || w % m != 0 {
        return Err(Error::config(format!(
            "window {m} must divide H x W = {h} x {w}"
        )));
    }
    let c = t.shape(x)[1];
    let heads = params.heads;
    let d = c / heads;
    let (hw, ww) = (h / m, w / m);
    let n_win = hw * ww;
    let tokens = m * m;

    let q = params.wq.forward(t, ps, x);
    let k = params.wk.forward(t, ps, x);
    let v = params.wv.forward(t, ps, x);

    // [l, c] -> [n_win * heads, tokens, d]
    let to_windows = |t: &mut Tape, y: Var| -> Var {
        let y = t.reshape(y, &[hw, m, ww, m, heads, d]);
        let y = t.permute(y, &[0, 2, 4, 1, 3, 5]);
        t.reshape(y, &[n_win * heads, tokens, d])
    };
    let qw = to_windows(t, q);
    let kw = to_windows(t, k);
    let vw = to_windows(t, v);
    let out = t.attention(qw, kw, vw, 1.0 / (d as f64).sqrt());
    // back to [l, c]
    let out = t.reshape(out, &[hw, ww, heads, m, m, d]);
    let out = t.permute(out, &[0, 3, 1, 4, 2, 5]);
    let out = t.reshape(out, &[h * w, c]);
    Ok(params.wo.forward(t, ps, out))
}

/// Graph attention + local self-attention, each with residual + layer norm.
pub struct GraphAttentionBlock {
    pub ga: GraphAttentionParams,
    pub ln1: LayerNorm,
    pub lsa: LocalSelfAttentionParams,
    pub ln2: LayerNorm,
}

impl GraphAttentionBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        branch: Branch,
        c: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        Ok(Self {
            ga: GraphAttentionParams::new(ps, rng, &format!("{name}.ga"), branch, c, heads)?,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c),
            lsa: LocalSelfAttentionParams::new(ps, rng, &format!("{name}.lsa"), c, heads, window)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c),
        })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        graph: &HeteroGraph,
        h: usize,
        w: usize,
    ) -> Result<Vec<Var>> {
        let updated = graph_attention_layer(t, ps, graph, &self.ga)?;
        let mut out = Vec::with_capacity(graph.nodes.len());
        for (node, up) in graph.nodes.iter().zip(updated) {
            let res = t.add(node.features, up);
            let normed = self.ln1.forward(t, ps, res);
            let local = local_self_attention(t, ps, normed, h, w, &self.lsa)?;
            let res2 = t.add(normed, local);
            out.push(self.ln2.forward(t, ps, res2));
        }
        Ok(out)
    }
}

/// Configuration of one heterogeneity branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchConfig {
    pub channels: usize,
    pub heads: usize,
    pub local_window: usize,
    pub n_scales: usize,
}

/// Full multi-scale branch: per-scale blocks plus resampling and fusion.
pub struct MultiScaleBranch {
    pub branch: Branch,
    pub config: BranchConfig,
    blocks: Vec<GraphAttentionBlock>,
    down_convs: Vec<Conv2d>,
    up_convs: Vec<ConvTranspose2d>,
    fuse_proj: Linear,
}

impl MultiScaleBranch {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        branch: Branch,
        config: BranchConfig,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if config.n_scales == 0 || config.n_scales > 3 {
            return Err(Error::config("n_scales must be 1..=3"));
        }
        let c = config.channels;
        for level in 0..config.n_scales {
            let f = 1usize << level;
            if h % (f * config.local_window) != 0 || w % (f * config.local_window) != 0 {
                return Err(Error::config(format!(
                    "scale {level} dims {}x{} not divisible by window {}",
                    h / f,
                    w / f,
                    config.local_window
                )));
            }
        }
        let mut blocks = Vec::new();
        let mut down_convs = Vec::new();
        let mut up_convs = Vec::new();
        for level in 0..config.n_scales {
            blocks.push(GraphAttentionBlock::new(
                ps,
                rng,
                &format!("{name}.scale{level}"),
                branch,
                c,
                config.heads,
                config.local_window,
            )?);
            if level > 0 {
                down_convs.push(Conv2d::new(
                    ps,
                    rng,
                    &format!("{name}.down{level}"),
                    c,
                    c,
                    3,
                    2,
                    1,
                ));
                up_convs.push(ConvTranspose2d::new(
                    ps,
                    rng,
                    &format!("{name}.up{level}"),
                    c,
                    c,
                    1 << level,
                ));
            }
        }
        let fuse_proj = Linear::new(ps, rng, &format!("{name}.fuse"), config.n_scales * c, c);
        Ok(Self { branch, config, blocks, down_convs, up_convs, fuse_proj })
    }

    fn to_chw(t: &mut Tape, x: Var, h: usize, w: usize, c: usize) -> Var {
        let y = t.reshape(x, &[h, w, c]);
        t.permute(y, &[2, 0, 1])
    }

    fn to_lc(t: &mut Tape, x: Var, h: usize, w: usize, c: usize) -> Var {
        let y = t.permute(x, &[1, 2, 0]);
        t.reshape(y, &[h * w, c])
    }

    /// Run the branch over all agents; outputs one `[l, c]` map per agent.
    pub fn forward(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        features: &[BevFeatureMap],
    ) -> Result<Vec<Var>> {
        let (h, w, c) = (features[0].h, features[0].w, features[0].c);
        if c != self.config.channels {
            return Err(Error::shape(format!(
                "branch built for {} channels, got {c}",
                self.config.channels
            )));
        }
        let n = features.len();

        // per-scale node feature pyramids
        let mut scale_inputs: Vec<Vec<Var>> = vec![features.iter().map(|f| f.data).collect()];
        for level in 1..self.config.n_scales {
            let (ph, pw) = (h >> (level - 1), w >> (level - 1));
            let prev = &scale_inputs[level - 1];
            let mut maps = Vec::with_capacity(n);
            for &x in prev {
                let chw = Self::to_chw(t, x, ph, pw, c);
                let down = self.down_convs[level - 1].forward(t, ps, chw);
                maps.push(Self::to_lc(t, down, ph / 2, pw / 2, c));
            }
            scale_inputs.push(maps);
        }

        // a block per scale, then upsample everything back to full resolution
        let mut per_scale_outputs: Vec<Vec<Var>> = Vec::with_capacity(self.config.n_scales);
        for level in 0..self.config.n_scales {
            let (sh, sw) = (h >> level, w >> level);
            let graph = HeteroGraph {
                branch: self.branch,
                nodes: features
                    .iter()
                    .zip(&scale_inputs[level])
                    .map(|(f, &x)| {
                        Ok(GraphNode {
                            agent_id: f.meta.agent_id,
                            type_index: self.branch.type_index(&f.meta)?,
                            features: x,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                edges: (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect(),
            };
            let mut outs = self.blocks[level].forward(t, ps, &graph, sh, sw)?;
            if level > 0 {
                outs = outs
                    .into_iter()
                    .map(|x| {
                        let chw = Self::to_chw(t, x, sh, sw, c);
                        let up = self.up_convs[level - 1].forward(t, ps, chw);
                        Self::to_lc(t, up, h, w, c)
                    })
                    .collect();
            }
            per_scale_outputs.push(outs);
        }

        // concat scales channel-wise per agent and project back to C
        let mut out = Vec::with_capacity(n);
        for ai in 0..n {
            let cols: Vec<Var> = per_scale_outputs.iter().map(|s| s[ai]).collect();
            let cat = t.concat(&cols, 1);
            out.push(self.fuse_proj.forward(t, ps, cat));
        }
        Ok(out)
    }
}

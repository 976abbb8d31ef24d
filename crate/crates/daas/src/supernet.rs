//! Cell-based weight-sharing network with stochastic operation and edge
//! selection.
//!
//! Each cell is a DAG over 2 input nodes and 4 intermediate nodes; every
//! intermediate node sees candidate edges from all earlier nodes (14 edges
//! per cell). Per edge there are 8 candidate operations. Sampling draws one
//! operation per edge (Gumbel-argmax over op logits) and two incoming edges
//! per node (Gumbel top-2 over edge logits). The forward pass computes only
//! the sampled subgraph, gating each contribution with a hard 0/1 weight
//! whose backward pass substitutes the tempered-softmax soft weight, so the
//! op and edge logits receive gradients through the ordinary tape.

use crate::error::{Error, Result};
use crate::kernels::Conv2dSpec;
use crate::nn::{
    init_conv, init_linear, Binder, BnMode, BnUnit, DilConv, FactorizedReduce, ParamId,
    ParamStore, ParamView, ReluConvBn, SepConv,
};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const NUM_ARCH_OPS: usize = 8;
/// Intermediate nodes per cell (inputs excluded).
pub const CELL_NODES: usize = 4;
/// Candidate edges per cell: node j has j+2 incoming candidates.
pub const CELL_EDGES: usize = 14;
/// First edge index of each intermediate node's group.
pub const EDGE_OFFSETS: [usize; CELL_NODES] = [0, 2, 5, 9];

/// Size of node j's candidate-edge group.
pub fn group_len(node: usize) -> usize {
    node + 2
}

/// Absolute edge index for (source node i, intermediate node j).
pub fn edge_index(i: usize, j: usize) -> usize {
    EDGE_OFFSETS[j] + i
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchOpKind {
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
    MaxPool3,
    AvgPool3,
    Identity,
    Zero,
}

impl ArchOpKind {
    pub const ALL: [ArchOpKind; NUM_ARCH_OPS] = [
        ArchOpKind::SepConv3,
        ArchOpKind::SepConv5,
        ArchOpKind::DilConv3,
        ArchOpKind::DilConv5,
        ArchOpKind::MaxPool3,
        ArchOpKind::AvgPool3,
        ArchOpKind::Identity,
        ArchOpKind::Zero,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchOpKind::SepConv3 => "sep-conv-3x3",
            ArchOpKind::SepConv5 => "sep-conv-5x5",
            ArchOpKind::DilConv3 => "dil-conv-3x3",
            ArchOpKind::DilConv5 => "dil-conv-5x5",
            ArchOpKind::MaxPool3 => "max-pool-3x3",
            ArchOpKind::AvgPool3 => "avg-pool-3x3",
            ArchOpKind::Identity => "identity",
            ArchOpKind::Zero => "zero",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

/// Which of the two parameter sets a cell draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Normal,
    Reduction,
}

/// Logits for one cell kind: one op row per edge, one edge score per edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellArch {
    /// [CELL_EDGES x NUM_ARCH_OPS], row-major
    pub alpha: Vec<f64>,
    /// [CELL_EDGES], grouped by destination node
    pub beta: Vec<f64>,
}

impl CellArch {
    pub fn new() -> Self {
        CellArch {
            alpha: vec![0.0; CELL_EDGES * NUM_ARCH_OPS],
            beta: vec![0.0; CELL_EDGES],
        }
    }

    pub fn alpha_row(&self, edge: usize) -> &[f64] {
        &self.alpha[edge * NUM_ARCH_OPS..(edge + 1) * NUM_ARCH_OPS]
    }

    pub fn beta_group(&self, node: usize) -> &[f64] {
        let lo = EDGE_OFFSETS[node];
        &self.beta[lo..lo + group_len(node)]
    }
}

impl Default for CellArch {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub normal: CellArch,
    pub reduce: CellArch,
}

impl ArchParams {
    pub fn new() -> Self {
        ArchParams {
            normal: CellArch::new(),
            reduce: CellArch::new(),
        }
    }

    pub fn cell(&self, kind: CellKind) -> &CellArch {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.normal
            .alpha
            .iter()
            .chain(&self.normal.beta)
            .chain(&self.reduce.alpha)
            .chain(&self.reduce.beta)
            .all(|v| v.is_finite())
    }

    /// Coordinates in flat order: normal alpha | normal beta | reduce alpha
    /// | reduce beta.
    pub fn flat_dim() -> usize {
        2 * (CELL_EDGES * NUM_ARCH_OPS + CELL_EDGES)
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::flat_dim());
        v.extend_from_slice(&self.normal.alpha);
        v.extend_from_slice(&self.normal.beta);
        v.extend_from_slice(&self.reduce.alpha);
        v.extend_from_slice(&self.reduce.beta);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), Self::flat_dim());
        let a = CELL_EDGES * NUM_ARCH_OPS;
        let b = CELL_EDGES;
        self.normal.alpha.copy_from_slice(&v[..a]);
        self.normal.beta.copy_from_slice(&v[a..a + b]);
        self.reduce.alpha.copy_from_slice(&v[a + b..a + b + a]);
        self.reduce.beta.copy_from_slice(&v[a + b + a..]);
    }

    /// Whether a flat coordinate is an edge score (beta) rather than an op
    /// logit (alpha).
    pub fn coord_is_beta(idx: usize) -> bool {
        let a = CELL_EDGES * NUM_ARCH_OPS;
        let b = CELL_EDGES;
        (a..a + b).contains(&idx) || (2 * a + b..2 * (a + b)).contains(&idx)
    }
}

impl Default for ArchParams {
    fn default() -> Self {
        Self::new()
    }
}

fn log_softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let ls = log_softmax_f64(logits);
    ls.iter().map(|&l| l.exp()).collect()
}

/// One Gumbel-perturbed categorical draw over an op row. Returns the one-hot
/// selection and the tempered-softmax relaxation for the same noise. The
/// hard argmax does not depend on the temperature; the soft vector does.
pub fn gumbel_sample_ops(
    alpha_row: &[f64],
    tau: f64,
    rng_: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let noise: Vec<f64> = (0..alpha_row.len()).map(|_| rng::gumbel(rng_)).collect();
    gumbel_with_noise(alpha_row, &noise, tau)
}

/// Deterministic part of the op draw, reusable with retained noise.
pub fn gumbel_with_noise(logits: &[f64], noise: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(tau > 0.0);
    let ls = log_softmax_f64(logits);
    let perturbed: Vec<f64> = ls.iter().zip(noise).map(|(&l, &g)| l + g).collect();
    let argmax = perturbed
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    let scaled: Vec<f64> = perturbed.iter().map(|&y| y / tau).collect();
    let soft = softmax_f64(&scaled);
    let mut hard = vec![0.0; logits.len()];
    hard[argmax] = 1.0;
    (hard, soft)
}

/// Gumbel top-2 over a node's candidate-edge scores: the two largest
/// perturbed logits win, which samples edge pairs without replacement from
/// the softmax weights (the standard sequential-choice law). Returns the
/// two-hot selection and the tempered-softmax relaxation.
pub fn gumbel_sample_edges(
    beta_group: &[f64],
    tau: f64,
    rng_: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if beta_group.len() < 2 {
        return Err(Error::invalid(
            "gumbel_sample_edges",
            format!("need at least 2 candidate edges, got {}", beta_group.len()),
        ));
    }
    let noise: Vec<f64> = (0..beta_group.len()).map(|_| rng::gumbel(rng_)).collect();
    Ok(gumbel_edges_with_noise(beta_group, &noise, tau))
}

pub fn gumbel_edges_with_noise(logits: &[f64], noise: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(tau > 0.0);
    let ls = log_softmax_f64(logits);
    let perturbed: Vec<f64> = ls.iter().zip(noise).map(|(&l, &g)| l + g).collect();
    let (a, b) = top2(&perturbed);
    let scaled: Vec<f64> = perturbed.iter().map(|&y| y / tau).collect();
    let soft = softmax_f64(&scaled);
    let mut hard = vec![0.0; logits.len()];
    hard[a] = 1.0;
    hard[b] = 1.0;
    (hard, soft)
}

fn top2(values: &[f64]) -> (usize, usize) {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    let mut second = usize::MAX;
    for i in 0..values.len() {
        if i == best {
            continue;
        }
        if second == usize::MAX || values[i] > values[second] {
            second = i;
        }
    }
    (best, second)
}

/// Probability that Gumbel top-2 over `weights` (softmax already applied,
/// summing to one) selects the unordered pair {a, b}: the first pick takes
/// one of them, the second wins the renormalized remainder.
pub fn pair_probability(weights: &[f64], a: usize, b: usize) -> f64 {
    weights[a] * weights[b] * (1.0 / (1.0 - weights[a]) + 1.0 / (1.0 - weights[b]))
}

/// Hard choices plus the Gumbel noise that produced them, for one cell kind.
/// The soft tensors are rebuilt on a tape at the current temperature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSample {
    /// chosen op per edge
    pub op_choice: Vec<usize>,
    /// per-edge op noise, [CELL_EDGES x NUM_ARCH_OPS]
    pub op_noise: Vec<Vec<f64>>,
    /// per node: local indices (within the group) of the two chosen edges,
    /// ascending
    pub edge_pairs: Vec<[usize; 2]>,
    /// per-node edge noise
    pub edge_noise: Vec<Vec<f64>>,
}

impl CellSample {
    pub fn draw(arch: &CellArch, rng_: &mut impl Rng) -> Self {
        let mut op_choice = Vec::with_capacity(CELL_EDGES);
        let mut op_noise = Vec::with_capacity(CELL_EDGES);
        for e in 0..CELL_EDGES {
            let noise: Vec<f64> = (0..NUM_ARCH_OPS).map(|_| rng::gumbel(rng_)).collect();
            let (hard, _) = gumbel_with_noise(arch.alpha_row(e), &noise, 1.0);
            op_choice.push(hard.iter().position(|&v| v == 1.0).unwrap());
            op_noise.push(noise);
        }
        let mut edge_pairs = Vec::with_capacity(CELL_NODES);
        let mut edge_noise = Vec::with_capacity(CELL_NODES);
        for j in 0..CELL_NODES {
            let group = arch.beta_group(j);
            let noise: Vec<f64> = (0..group.len()).map(|_| rng::gumbel(rng_)).collect();
            let (hard, _) = gumbel_edges_with_noise(group, &noise, 1.0);
            let mut pair: Vec<usize> = hard
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(i, _)| i)
                .collect();
            pair.sort_unstable();
            edge_pairs.push([pair[0], pair[1]]);
            edge_noise.push(noise);
        }
        CellSample {
            op_choice,
            op_noise,
            edge_pairs,
            edge_noise,
        }
    }

    pub fn edge_selected(&self, node: usize, local: usize) -> bool {
        self.edge_pairs[node].contains(&local)
    }
}

/// One architecture draw: a sample per cell kind, shared by all cells of
/// that kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSample {
    pub normal: CellSample,
    pub reduce: CellSample,
}

impl ArchSample {
    pub fn draw(params: &ArchParams, rng_: &mut impl Rng) -> Self {
        ArchSample {
            normal: CellSample::draw(&params.normal, rng_),
            reduce: CellSample::draw(&params.reduce, rng_),
        }
    }

    pub fn cell(&self, kind: CellKind) -> &CellSample {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        }
    }
}

// ---- soft gating tensors on the tape ----

/// Tape-resident soft weights for one cell kind. Only sampled edges have op
/// rows bound; the logits of never-sampled edges stay off the tape, so
/// their gradients are exactly zero.
pub struct CellGates {
    /// per edge: soft op vector (only for selected edges)
    pub op_soft: Vec<Option<Var>>,
    /// per node: soft edge vector over the group
    pub edge_soft: Vec<Var>,
    /// leaves, for gradient readout: (edge, alpha-row var)
    pub alpha_leaves: Vec<(usize, Var)>,
    /// per node: beta-group var
    pub beta_leaves: Vec<Var>,
}

/// Temperature-scaled softmax of (log-softmax(logits) + noise), recorded on
/// the tape so gradients reach the logits leaf.
fn soft_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    logits_leaf: Var,
    noise: &[f64],
    tau: f64,
) -> Result<Var> {
    let ls = tape.log_softmax(logits_leaf)?;
    let noise_t = tape.constant(Tensor::from_f64_slice(&[noise.len()], noise)?);
    let pert = tape.add(ls, noise_t)?;
    let scaled = tape.scale_const(pert, F::from_f64(1.0 / tau));
    tape.softmax1d(scaled)
}

impl CellGates {
    /// Bind the sampled rows/groups of one cell kind onto the tape at
    /// temperature `tau`.
    pub fn bind<F: Scalar>(
        tape: &mut Tape<F>,
        arch: &CellArch,
        sample: &CellSample,
        tau: f64,
    ) -> Result<Self> {
        let mut op_soft = vec![None; CELL_EDGES];
        let mut alpha_leaves = Vec::new();
        let mut edge_soft = Vec::with_capacity(CELL_NODES);
        let mut beta_leaves = Vec::with_capacity(CELL_NODES);
        for j in 0..CELL_NODES {
            let group = arch.beta_group(j);
            let leaf = tape.leaf(Tensor::from_f64_slice(&[group.len()], group)?);
            beta_leaves.push(leaf);
            let soft = soft_on_tape(tape, leaf, &sample.edge_noise[j], tau)?;
            edge_soft.push(soft);
            for &local in &sample.edge_pairs[j] {
                let e = EDGE_OFFSETS[j] + local;
                let leaf = tape.leaf(Tensor::from_f64_slice(&[NUM_ARCH_OPS], arch.alpha_row(e))?);
                alpha_leaves.push((e, leaf));
                let soft = soft_on_tape(tape, leaf, &sample.op_noise[e], tau)?;
                op_soft[e] = Some(soft);
            }
        }
        Ok(CellGates {
            op_soft,
            edge_soft,
            alpha_leaves,
            beta_leaves,
        })
    }

    /// Read alpha/beta gradients back into dense [edges x ops] / [edges]
    /// f64 buffers (zeros for unbound rows).
    pub fn read_grads<F: Scalar>(&self, tape: &Tape<F>) -> (Vec<f64>, Vec<f64>) {
        let mut ga = vec![0.0; CELL_EDGES * NUM_ARCH_OPS];
        let mut gb = vec![0.0; CELL_EDGES];
        for &(e, leaf) in &self.alpha_leaves {
            if let Some(g) = tape.grad_ref(leaf) {
                for (o, &v) in g.data().iter().enumerate() {
                    ga[e * NUM_ARCH_OPS + o] = v.to_f64();
                }
            }
        }
        for (j, &leaf) in self.beta_leaves.iter().enumerate() {
            if let Some(g) = tape.grad_ref(leaf) {
                for (local, &v) in g.data().iter().enumerate() {
                    gb[EDGE_OFFSETS[j] + local] = v.to_f64();
                }
            }
        }
        (ga, gb)
    }
}

pub struct ArchGates {
    pub normal: CellGates,
    pub reduce: CellGates,
}

impl ArchGates {
    pub fn bind<F: Scalar>(
        tape: &mut Tape<F>,
        params: &ArchParams,
        sample: &ArchSample,
        tau: f64,
    ) -> Result<Self> {
        Ok(ArchGates {
            normal: CellGates::bind(tape, &params.normal, &sample.normal, tau)?,
            reduce: CellGates::bind(tape, &params.reduce, &sample.reduce, tau)?,
        })
    }

    pub fn cell(&self, kind: CellKind) -> &CellGates {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        }
    }
}

// ---- candidate op instances ----

#[derive(Clone)]
pub(crate) enum OpInstance {
    Sep(SepConv),
    Dil(DilConv),
    MaxPool { stride: usize, bn: BnUnit },
    AvgPool { stride: usize, bn: BnUnit },
    Identity,
    /// identity on a stride-2 edge needs a shape-preserving reduction
    IdentityReduce(FactorizedReduce),
    Zero { stride: usize },
}

impl OpInstance {
    pub(crate) fn build<F: Scalar>(
        kind: ArchOpKind,
        store: &mut ParamStore<F>,
        rng_: &mut impl Rng,
        name: &str,
        c: usize,
        stride: usize,
        track_running: bool,
    ) -> Self {
        match kind {
            ArchOpKind::SepConv3 => {
                OpInstance::Sep(SepConv::build(store, rng_, name, c, 3, stride, track_running))
            }
            ArchOpKind::SepConv5 => {
                OpInstance::Sep(SepConv::build(store, rng_, name, c, 5, stride, track_running))
            }
            ArchOpKind::DilConv3 => {
                OpInstance::Dil(DilConv::build(store, rng_, name, c, 3, stride, track_running))
            }
            ArchOpKind::DilConv5 => {
                OpInstance::Dil(DilConv::build(store, rng_, name, c, 5, stride, track_running))
            }
            ArchOpKind::MaxPool3 => OpInstance::MaxPool {
                stride,
                bn: BnUnit::plain(c, track_running),
            },
            ArchOpKind::AvgPool3 => OpInstance::AvgPool {
                stride,
                bn: BnUnit::plain(c, track_running),
            },
            ArchOpKind::Identity => {
                if stride == 1 {
                    OpInstance::Identity
                } else {
                    OpInstance::IdentityReduce(FactorizedReduce::build(
                        store,
                        rng_,
                        name,
                        c,
                        c,
                        track_running,
                    ))
                }
            }
            ArchOpKind::Zero => OpInstance::Zero { stride },
        }
    }

    pub(crate) fn forward<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binder: &mut Binder<F>,
        view: &dyn ParamView<F>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        match self {
            OpInstance::Sep(op) => op.forward(tape, binder, view, x, mode),
            OpInstance::Dil(op) => op.forward(tape, binder, view, x, mode),
            OpInstance::MaxPool { stride, bn } => {
                let p = tape.max_pool3(x, *stride)?;
                bn.forward(tape, binder, view, p, mode)
            }
            OpInstance::AvgPool { stride, bn } => {
                let p = tape.avg_pool3(x, *stride)?;
                bn.forward(tape, binder, view, p, mode)
            }
            OpInstance::Identity => Ok(x),
            OpInstance::IdentityReduce(fr) => fr.forward(tape, binder, view, x, mode),
            OpInstance::Zero { stride } => {
                let shape = tape.value(x).shape().to_vec();
                let s = *stride;
                let out = vec![shape[0], shape[1], shape[2].div_ceil(s), shape[3].div_ceil(s)];
                Ok(tape.zeros(&out))
            }
        }
    }
}

#[derive(Clone)]
enum Preprocess {
    Conv(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    fn forward<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binder: &mut Binder<F>,
        view: &dyn ParamView<F>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        match self {
            Preprocess::Conv(op) => op.forward(tape, binder, view, x, mode),
            Preprocess::Reduce(op) => op.forward(tape, binder, view, x, mode),
        }
    }
}

#[derive(Clone)]
struct SuperCell {
    kind: CellKind,
    pre0: Preprocess,
    pre1: Preprocess,
    /// [edge][op] candidate instances
    edges: Vec<Vec<OpInstance>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupernetConfig {
    pub cells: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub stem_multiplier: usize,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            cells: 8,
            channels: 16,
            in_channels: 3,
            classes: 4,
            stem_multiplier: 3,
        }
    }
}

impl SupernetConfig {
    /// Reduction cells sit at one third and two thirds of the stack.
    pub fn is_reduction(&self, cell_index: usize) -> bool {
        self.cells >= 2 && (cell_index == self.cells / 3 || cell_index == 2 * self.cells / 3)
    }
}

/// The weight-sharing network: stem, stacked cells with per-edge candidate
/// ops, global pooling and a linear classifier. Weights live in a caller
/// owned store so forward passes can read through overlays.
#[derive(Clone)]
pub struct Supernet {
    pub cfg: SupernetConfig,
    stem_w: ParamId,
    stem_bn: BnUnit,
    cells: Vec<SuperCell>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl Supernet {
    pub fn build<F: Scalar>(
        cfg: SupernetConfig,
        store: &mut ParamStore<F>,
        rng_: &mut impl Rng,
    ) -> Self {
        let c_stem = cfg.stem_multiplier * cfg.channels;
        let stem_w = init_conv(
            store,
            rng_,
            "stem.w".to_string(),
            [c_stem, cfg.in_channels, 3, 3],
        );
        let stem_bn = BnUnit::affine(store, "stem.bn", c_stem, false);

        let mut cells = Vec::with_capacity(cfg.cells);
        let (mut c_pp, mut c_p, mut c_curr) = (c_stem, c_stem, cfg.channels);
        let mut prev_reduction = false;
        for idx in 0..cfg.cells {
            let reduction = cfg.is_reduction(idx);
            if reduction {
                c_curr *= 2;
            }
            let name = format!("cell{idx}");
            let pre0 = if prev_reduction {
                Preprocess::Reduce(FactorizedReduce::build(
                    store,
                    rng_,
                    &format!("{name}.pre0"),
                    c_pp,
                    c_curr,
                    false,
                ))
            } else {
                Preprocess::Conv(ReluConvBn::build(
                    store,
                    rng_,
                    &format!("{name}.pre0"),
                    c_pp,
                    c_curr,
                    1,
                    Conv2dSpec::pointwise(),
                    false,
                ))
            };
            let pre1 = Preprocess::Conv(ReluConvBn::build(
                store,
                rng_,
                &format!("{name}.pre1"),
                c_p,
                c_curr,
                1,
                Conv2dSpec::pointwise(),
                false,
            ));
            let mut edges = Vec::with_capacity(CELL_EDGES);
            for j in 0..CELL_NODES {
                for i in 0..group_len(j) {
                    let e = edge_index(i, j);
                    // source nodes 0/1 are the cell inputs; reduction cells
                    // stride those edges
                    let stride = if reduction && i < 2 { 2 } else { 1 };
                    let mut ops = Vec::with_capacity(NUM_ARCH_OPS);
                    for kind in ArchOpKind::ALL {
                        ops.push(OpInstance::build(
                            kind,
                            store,
                            rng_,
                            &format!("{name}.edge{e}.{}", kind.name()),
                            c_curr,
                            stride,
                            false,
                        ));
                    }
                    edges.push(ops);
                }
            }
            cells.push(SuperCell {
                kind: if reduction {
                    CellKind::Reduction
                } else {
                    CellKind::Normal
                },
                pre0,
                pre1,
                edges,
            });
            prev_reduction = reduction;
            c_pp = c_p;
            c_p = CELL_NODES * c_curr;
        }
        let (fc_w, fc_b) = init_linear(store, rng_, "classifier", cfg.classes, c_p);
        Supernet {
            cfg,
            stem_w,
            stem_bn,
            cells,
            fc_w,
            fc_b,
        }
    }

    pub fn classifier_bias(&self) -> ParamId {
        self.fc_b
    }

    /// Forward the sampled subgraph. Gates use hard 0/1 factors in the
    /// value pass and the tape routes gradients through the retained soft
    /// tensors in `gates`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        binder: &mut Binder<F>,
        view: &dyn ParamView<F>,
        gates: &ArchGates,
        sample: &ArchSample,
        batch: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let w = binder.bind(tape, view, self.stem_w);
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            dilation: 1,
            groups: 1,
        };
        let conv = tape.conv2d(batch, w, spec)?;
        let stem = self.stem_bn.forward(tape, binder, view, conv, mode)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in self.cells.iter_mut() {
            let cs = sample.cell(cell.kind);
            let cg = gates.cell(cell.kind);
            let x0 = cell.pre0.forward(tape, binder, view, s0, mode)?;
            let x1 = cell.pre1.forward(tape, binder, view, s1, mode)?;
            let mut states = vec![x0, x1];
            for j in 0..CELL_NODES {
                let mut acc: Option<Var> = None;
                for &local in &cs.edge_pairs[j] {
                    let e = EDGE_OFFSETS[j] + local;
                    let op_id = cs.op_choice[e];
                    let x = states[local];
                    let out = cell.edges[e][op_id].forward(tape, binder, view, x, mode)?;
                    let s_op = tape.select(cg.op_soft[e].expect("sampled edge bound"), op_id)?;
                    let g1 = tape.st_mul(out, s_op, F::one())?;
                    let s_edge = tape.select(cg.edge_soft[j], local)?;
                    let g2 = tape.st_mul(g1, s_edge, F::one())?;
                    acc = Some(match acc {
                        None => g2,
                        Some(a) => tape.add(a, g2)?,
                    });
                }
                states.push(acc.expect("two edges per node"));
            }
            let out = tape.concat_channels(&states[2..])?;
            s0 = s1;
            s1 = out;
        }
        let pooled = tape.global_avg_pool(s1)?;
        let fw = binder.bind(tape, view, self.fc_w);
        let fb = binder.bind(tape, view, self.fc_b);
        tape.linear(pooled, fw, fb)
    }

    /// Conv2d invocations a forward pass will record for this sample:
    /// stem + preprocessing + selected ops only.
    pub fn expected_conv_count(&self, sample: &ArchSample) -> usize {
        let mut count = 1; // stem
        for cell in &self.cells {
            count += match cell.pre0 {
                Preprocess::Conv(_) => 1,
                Preprocess::Reduce(_) => 2,
            };
            count += 1; // pre1 is always a 1x1 conv
            let cs = sample.cell(cell.kind);
            for j in 0..CELL_NODES {
                for &local in &cs.edge_pairs[j] {
                    let e = EDGE_OFFSETS[j] + local;
                    let op = ArchOpKind::ALL[cs.op_choice[e]];
                    let stride2 = matches!(cell.kind, CellKind::Reduction) && local < 2;
                    count += match op {
                        ArchOpKind::SepConv3 | ArchOpKind::SepConv5 => 4,
                        ArchOpKind::DilConv3 | ArchOpKind::DilConv5 => 2,
                        ArchOpKind::Identity => {
                            if stride2 {
                                2
                            } else {
                                0
                            }
                        }
                        _ => 0,
                    };
                }
            }
        }
        count
    }
}

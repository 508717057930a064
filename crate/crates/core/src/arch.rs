//! Cell-based architecture encodings: DAG cells with one operation per edge,
//! stacked into a fully convolutional backbone skeleton.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Operation choice for one cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Outputs the zero tensor.
    Zero,
    /// Identity; requires equal input/output channels (always true inside a cell).
    Skip,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Skip => "skip",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Conv3x3 => "conv3x3",
            OpKind::AvgPool3x3 => "avgpool3x3",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        Some(match s {
            "zero" => OpKind::Zero,
            "skip" => OpKind::Skip,
            "conv1x1" => OpKind::Conv1x1,
            "conv3x3" => OpKind::Conv3x3,
            "avgpool3x3" => OpKind::AvgPool3x3,
            _ => return None,
        })
    }

    /// Kernel size when the op is a convolution.
    pub fn conv_kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv1x1 => Some(1),
            OpKind::Conv3x3 => Some(3),
            _ => None,
        }
    }
}

/// Canonical edge order: (0,1), (0,2), (1,2), (0,3), (1,3), (2,3), ...
pub fn edge_pairs(num_nodes: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(num_nodes * (num_nodes - 1) / 2);
    for to in 1..num_nodes {
        for from in 0..to {
            pairs.push((from, to));
        }
    }
    pairs
}

/// A DAG cell: node 0 is the input, the last node is the output, and a node's
/// value is the sum of its incoming edge outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    num_nodes: usize,
    edges: Vec<(usize, usize, OpKind)>,
}

impl CellSpec {
    /// Build from per-edge ops listed in canonical edge order.
    pub fn from_ops(num_nodes: usize, ops: &[OpKind]) -> Result<Self> {
        let pairs = edge_pairs(num_nodes);
        if ops.len() != pairs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} nodes need {} edge ops, got {}",
                num_nodes,
                pairs.len(),
                ops.len()
            )));
        }
        Ok(CellSpec {
            num_nodes,
            edges: pairs
                .into_iter()
                .zip(ops)
                .map(|((f, t), &op)| (f, t, op))
                .collect(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize, OpKind)] {
        &self.edges
    }

    pub fn ops(&self) -> Vec<OpKind> {
        self.edges.iter().map(|&(_, _, op)| op).collect()
    }

    pub fn with_op(&self, edge_index: usize, op: OpKind) -> CellSpec {
        let mut c = self.clone();
        c.edges[edge_index].2 = op;
        c
    }
}

/// A full candidate architecture: a cell repeated through staged stacks with
/// stride-2 channel-doubling downsample convolutions between stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub cell: CellSpec,
    pub stem_channels: usize,
    pub cells_per_stage: usize,
    pub num_stages: usize,
}

pub const INPUT_CHANNELS: usize = 3;
pub const DEFAULT_STEM_CHANNELS: usize = 16;
pub const DEFAULT_CELLS_PER_STAGE: usize = 1;
pub const DEFAULT_NUM_STAGES: usize = 3;

impl ArchSpec {
    pub fn new(cell: CellSpec) -> Self {
        ArchSpec {
            cell,
            stem_channels: DEFAULT_STEM_CHANNELS,
            cells_per_stage: DEFAULT_CELLS_PER_STAGE,
            num_stages: DEFAULT_NUM_STAGES,
        }
    }

    /// Canonical string: edge ops joined by `|` in canonical edge order.
    pub fn encode(&self) -> String {
        self.cell
            .edges()
            .iter()
            .map(|&(_, _, op)| op.name())
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Channel count of stage `s` (0-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    /// Same topology with every edge set to conv3x3; per-edge FLOPS maximum.
    pub fn all_conv3x3(&self) -> ArchSpec {
        let ops = vec![OpKind::Conv3x3; self.cell.num_edges()];
        ArchSpec {
            cell: CellSpec::from_ops(self.cell.num_nodes(), &ops).expect("same edge count"),
            ..self.clone()
        }
    }
}

/// Decode a canonical arch string using default backbone structure.
/// The node count is inferred from the edge count (must be triangular).
pub fn decode(s: &str) -> Result<ArchSpec> {
    let parts: Vec<&str> = s.split('|').collect();
    let e = parts.len();
    // n nodes -> n(n-1)/2 edges
    let mut num_nodes = None;
    for n in 2..=12 {
        if n * (n - 1) / 2 == e {
            num_nodes = Some(n);
            break;
        }
    }
    let num_nodes = num_nodes.ok_or_else(|| Error::BadArchString {
        string: s.to_string(),
        reason: format!("{e} edges is not a complete DAG edge count"),
    })?;
    let mut ops = Vec::with_capacity(e);
    for part in parts {
        let op = OpKind::parse(part).ok_or_else(|| Error::BadArchString {
            string: s.to_string(),
            reason: format!("unknown op {part:?}"),
        })?;
        ops.push(op);
    }
    Ok(ArchSpec::new(CellSpec::from_ops(num_nodes, &ops)?))
}

/// MACs for one input sample of the given spatial size. Only convolutions
/// count: k^2 * c_in * c_out * h_out * w_out per layer; zero/skip/pool are free.
pub fn count_flops(spec: &ArchSpec, input_hw: (usize, usize)) -> f64 {
    let (mut h, mut w) = input_hw;
    let mut total = 0.0f64;
    // stem: 3 -> stem_channels, 3x3 stride 1 pad 1
    total += (9 * INPUT_CHANNELS * spec.stem_channels * h * w) as f64;
    for stage in 0..spec.num_stages {
        let c = spec.stage_channels(stage);
        for _ in 0..spec.cells_per_stage {
            for &(_, _, op) in spec.cell.edges() {
                if let Some(k) = op.conv_kernel() {
                    total += (k * k * c * c * h * w) as f64;
                }
            }
        }
        if stage + 1 < spec.num_stages {
            // downsample: 3x3 stride 2 pad 1, doubling channels
            let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
            total += (9 * c * 2 * c * oh * ow) as f64;
            h = oh;
            w = ow;
        }
    }
    total
}

/// FLOPS of `spec` normalized by the all-conv3x3 architecture of the same
/// topology; in (0, 1].
pub fn normalized_flops(spec: &ArchSpec, input_hw: (usize, usize)) -> f64 {
    count_flops(spec, input_hw) / count_flops(&spec.all_conv3x3(), input_hw)
}

/// A finite op-per-edge search space over a fixed cell topology.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub name: String,
    pub num_nodes: usize,
    pub ops: Vec<OpKind>,
    pub stem_channels: usize,
    pub cells_per_stage: usize,
    pub num_stages: usize,
}

impl SearchSpace {
    /// Desk-scale space: 3 edges x 4 ops = 64 architectures, small enough to
    /// exhaustively train.
    pub fn mini() -> Self {
        SearchSpace {
            name: "mini".into(),
            num_nodes: 3,
            ops: vec![OpKind::Zero, OpKind::Skip, OpKind::Conv1x1, OpKind::Conv3x3],
            stem_channels: DEFAULT_STEM_CHANNELS,
            cells_per_stage: DEFAULT_CELLS_PER_STAGE,
            num_stages: DEFAULT_NUM_STAGES,
        }
    }

    /// 6 edges x 5 ops = 15625 architectures; used for search-only runs.
    pub fn full() -> Self {
        SearchSpace {
            name: "full".into(),
            num_nodes: 4,
            ops: vec![
                OpKind::Zero,
                OpKind::Skip,
                OpKind::Conv1x1,
                OpKind::Conv3x3,
                OpKind::AvgPool3x3,
            ],
            stem_channels: DEFAULT_STEM_CHANNELS,
            cells_per_stage: DEFAULT_CELLS_PER_STAGE,
            num_stages: DEFAULT_NUM_STAGES,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mini" => Ok(SearchSpace::mini()),
            "full" => Ok(SearchSpace::full()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown search space {name:?} (expected \"mini\" or \"full\")"
            ))),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.num_nodes * (self.num_nodes - 1) / 2
    }

    pub fn size(&self) -> u64 {
        (self.ops.len() as u64).pow(self.num_edges() as u32)
    }

    fn spec_with(&self, ops: &[OpKind]) -> ArchSpec {
        ArchSpec {
            cell: CellSpec::from_ops(self.num_nodes, ops).expect("edge count fixed by space"),
            stem_channels: self.stem_channels,
            cells_per_stage: self.cells_per_stage,
            num_stages: self.num_stages,
        }
    }

    /// Uniform over op choices per edge.
    pub fn random_spec(&self, rng: &mut Rng) -> ArchSpec {
        let ops: Vec<OpKind> = (0..self.num_edges()).map(|_| *rng.choose(&self.ops)).collect();
        self.spec_with(&ops)
    }

    /// Change exactly one uniformly chosen edge to a different uniformly
    /// chosen op.
    pub fn mutate_spec(&self, spec: &ArchSpec, rng: &mut Rng) -> ArchSpec {
        assert!(self.ops.len() >= 2, "mutation needs at least two ops");
        let edge = rng.below(self.num_edges());
        let current = spec.cell.edges()[edge].2;
        let alternatives: Vec<OpKind> = self.ops.iter().copied().filter(|&o| o != current).collect();
        let op = *rng.choose(&alternatives);
        ArchSpec {
            cell: spec.cell.with_op(edge, op),
            ..spec.clone()
        }
    }

    /// Visit every architecture exactly once, in lexicographic op order.
    pub fn enumerate(&self) -> impl Iterator<Item = ArchSpec> + '_ {
        let e = self.num_edges();
        let base = self.ops.len() as u64;
        (0..self.size()).map(move |mut idx| {
            let mut ops = vec![self.ops[0]; e];
            for slot in ops.iter_mut() {
                *slot = self.ops[(idx % base) as usize];
                idx /= base;
            }
            self.spec_with(&ops)
        })
    }

    pub fn decode(&self, s: &str) -> Result<ArchSpec> {
        let spec = decode(s)?;
        if spec.cell.num_nodes() != self.num_nodes {
            return Err(Error::BadArchString {
                string: s.to_string(),
                reason: format!(
                    "expected {} edges for this space, got {}",
                    self.num_edges(),
                    spec.cell.num_edges()
                ),
            });
        }
        for &(_, _, op) in spec.cell.edges() {
            if !self.ops.contains(&op) {
                return Err(Error::BadArchString {
                    string: s.to_string(),
                    reason: format!("op {:?} not allowed in space {}", op.name(), self.name),
                });
            }
        }
        Ok(self.spec_with(&spec.cell.ops()))
    }

    pub fn contains(&self, spec: &ArchSpec) -> bool {
        spec.cell.num_nodes() == self.num_nodes
            && spec.cell.edges().iter().all(|&(_, _, op)| self.ops.contains(&op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let s = "conv3x3|skip|zero|conv1x1|skip|conv3x3";
        let spec = decode(s).unwrap();
        assert_eq!(spec.cell.num_nodes(), 4);
        assert_eq!(spec.encode(), s);
    }

    #[test]
    fn decode_rejects_bad_strings() {
        assert!(decode("conv3x3|skip").is_err()); // 2 edges: not triangular
        assert!(decode("conv9x9|skip|zero").is_err());
    }

    #[test]
    fn space_sizes() {
        assert_eq!(SearchSpace::mini().size(), 64);
        assert_eq!(SearchSpace::full().size(), 15625);
    }

    #[test]
    fn enumerate_visits_each_once() {
        let space = SearchSpace::mini();
        let mut seen = std::collections::HashSet::new();
        for spec in space.enumerate() {
            assert!(seen.insert(spec.encode()));
        }
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn mutation_changes_exactly_one_edge() {
        let space = SearchSpace::full();
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let parent = space.random_spec(&mut rng);
            let child = space.mutate_spec(&parent, &mut rng);
            let diff = parent
                .cell
                .ops()
                .iter()
                .zip(child.cell.ops())
                .filter(|(a, b)| **a != *b)
                .count();
            assert_eq!(diff, 1);
        }
    }

    #[test]
    fn random_spec_is_uniform_per_edge() {
        let space = SearchSpace::full();
        let mut rng = Rng::new(17);
        let n = 100_000;
        let mut counts = vec![std::collections::HashMap::new(); space.num_edges()];
        for _ in 0..n {
            let spec = space.random_spec(&mut rng);
            for (e, op) in spec.cell.ops().into_iter().enumerate() {
                *counts[e].entry(op).or_insert(0usize) += 1;
            }
        }
        for per_edge in &counts {
            for op in &space.ops {
                let freq = *per_edge.get(op).unwrap_or(&0) as f64 / n as f64;
                assert!((freq - 0.2).abs() < 0.01, "op {:?} freq {freq}", op);
            }
        }
    }

    #[test]
    fn flops_hand_count() {
        // A single conv3x3 layer 4->8 channels on an 8x8 map adds 9*4*8*64 MACs.
        // Check via the formula pieces used by count_flops.
        let macs = (9 * 4 * 8 * 8 * 8) as f64;
        assert_eq!(macs, 18432.0);

        // conv3x3 on an edge costs 9x the conv1x1 on the same edge.
        let space = SearchSpace::mini();
        let zero = space.decode("zero|zero|zero").unwrap();
        let c1 = space.decode("conv1x1|zero|zero").unwrap();
        let c3 = space.decode("conv3x3|zero|zero").unwrap();
        let base = count_flops(&zero, (32, 32));
        let f1 = count_flops(&c1, (32, 32)) - base;
        let f3 = count_flops(&c3, (32, 32)) - base;
        assert!((f3 / f1 - 9.0).abs() < 1e-12);
    }

    #[test]
    fn zero_cells_cost_stem_and_downsample_only() {
        let space = SearchSpace::mini();
        let zero = space.decode("zero|zero|zero").unwrap();
        // stem: 9*3*16*32*32; ds1: 9*16*32*16*16; ds2: 9*32*64*8*8
        let expect = (9 * 3 * 16 * 1024) as f64 + (9 * 16 * 32 * 256) as f64 + (9 * 32 * 64 * 64) as f64;
        assert_eq!(count_flops(&zero, (32, 32)), expect);
    }

    #[test]
    fn normalized_flops_bounds() {
        let space = SearchSpace::mini();
        let zero = space.decode("zero|zero|zero").unwrap();
        let full = space.decode("conv3x3|conv3x3|conv3x3").unwrap();
        let nz = normalized_flops(&zero, (32, 32));
        assert!(nz > 0.0 && nz < 0.5, "{nz}");
        assert_eq!(normalized_flops(&full, (32, 32)), 1.0);
    }

    #[test]
    fn normalized_flops_monotone_in_conv_ops() {
        let space = SearchSpace::mini();
        let a = space.decode("zero|skip|zero").unwrap();
        let b = space.decode("conv1x1|skip|zero").unwrap();
        let c = space.decode("conv1x1|skip|conv3x3").unwrap();
        let (na, nb, nc) = (
            normalized_flops(&a, (32, 32)),
            normalized_flops(&b, (32, 32)),
            normalized_flops(&c, (32, 32)),
        );
        assert!(na < nb && nb < nc);
    }

    #[test]
    fn mutation_of_single_edge_space_never_returns_parent() {
        let space = SearchSpace {
            name: "pair".into(),
            num_nodes: 2,
            ops: vec![OpKind::Zero, OpKind::Skip, OpKind::Conv3x3],
            stem_channels: 16,
            cells_per_stage: 1,
            num_stages: 3,
        };
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let parent = space.random_spec(&mut rng);
            let child = space.mutate_spec(&parent, &mut rng);
            assert_ne!(parent.encode(), child.encode());
        }
    }
}

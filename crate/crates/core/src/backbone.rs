//! Materialization of an [`ArchSpec`] into a headless fully convolutional
//! backbone, with cached forward passes and analytic backward passes over
//! the whole block stack.

use crate::arch::{ArchSpec, OpKind, INPUT_CHANNELS};
use crate::conv::{conv2d_backward, conv2d_forward, ConvLayer};
use crate::error::Result;
use crate::init::InitScheme;
use crate::layers::{avgpool3x3_backward, avgpool3x3_forward, relu_backward, relu_forward};
use crate::optim::SgdConfig;
use crate::rng::Rng;
use crate::tensor::Tensor4;
use serde::{Deserialize, Serialize};

/// Which feature map the proxy head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    Final,
    BeforeDs1,
    BeforeDs2,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::Final, Tap::BeforeDs1, Tap::BeforeDs2];
}

enum EdgeOp {
    Zero,
    Skip,
    Conv(ConvLayer), // conv followed by ReLU
    AvgPool,
}

struct Cell {
    num_nodes: usize,
    // canonical edge order; parallel to CellSpec::edges
    pairs: Vec<(usize, usize)>,
    edges: Vec<EdgeOp>,
}

enum Block {
    /// Stem or downsample: conv followed by ReLU.
    Conv(ConvLayer),
    Cell(Cell),
}

/// Materialized backbone: stem conv, staged cells, stride-2 downsamples.
/// No pooling or linear head; the output is a feature map.
pub struct Backbone {
    blocks: Vec<Block>,
    /// Block count to run for each tap: [before_ds1, before_ds2, final]
    cutoffs: [usize; 3],
    tap_channels: [usize; 3],
}

/// Per-block caches from a forward pass, consumed by [`Backbone::backward`].
pub struct ForwardTrace {
    /// Input to the whole backbone.
    input: Tensor4,
    blocks: Vec<BlockTrace>,
}

enum BlockTrace {
    Conv { pre_relu: Tensor4, output: Tensor4 },
    Cell { nodes: Vec<Tensor4>, pre_relu: Vec<Option<Tensor4>> },
}

/// Gradients for every kernel in the backbone, in block order.
pub struct BackboneGrads {
    blocks: Vec<BlockGrads>,
}

enum BlockGrads {
    Conv(Vec<f32>),
    Cell(Vec<Option<Vec<f32>>>),
}

/// Deterministic materialization: same (spec, seed, scheme) gives
/// parameter-identical backbones.
pub fn materialize(spec: &ArchSpec, rng: &mut Rng, scheme: InitScheme) -> Result<Backbone> {
    let mut blocks = Vec::new();
    let mut cutoffs = [0usize; 3];
    let mut tap_channels = [0usize; 3];

    let stem = ConvLayer::init(spec.stem_channels, INPUT_CHANNELS, 3, 1, 1, true, scheme, rng)?;
    blocks.push(Block::Conv(stem));

    for stage in 0..spec.num_stages {
        let c = spec.stage_channels(stage);
        for _ in 0..spec.cells_per_stage {
            blocks.push(Block::Cell(build_cell(spec, c, rng, scheme)?));
        }
        if stage == 0 {
            cutoffs[0] = blocks.len();
            tap_channels[0] = c;
        }
        if stage == 1 {
            cutoffs[1] = blocks.len();
            tap_channels[1] = c;
        }
        if stage + 1 < spec.num_stages {
            let ds = ConvLayer::init(2 * c, c, 3, 2, 1, true, scheme, rng)?;
            blocks.push(Block::Conv(ds));
        }
    }
    cutoffs[2] = blocks.len();
    tap_channels[2] = spec.stage_channels(spec.num_stages - 1);
    Ok(Backbone {
        blocks,
        cutoffs,
        tap_channels,
    })
}

fn build_cell(spec: &ArchSpec, channels: usize, rng: &mut Rng, scheme: InitScheme) -> Result<Cell> {
    let mut pairs = Vec::new();
    let mut edges = Vec::new();
    for &(from, to, op) in spec.cell.edges() {
        pairs.push((from, to));
        edges.push(match op {
            OpKind::Zero => EdgeOp::Zero,
            OpKind::Skip => EdgeOp::Skip,
            OpKind::AvgPool3x3 => EdgeOp::AvgPool,
            OpKind::Conv1x1 => EdgeOp::Conv(ConvLayer::init(channels, channels, 1, 1, 0, true, scheme, rng)?),
            OpKind::Conv3x3 => EdgeOp::Conv(ConvLayer::init(channels, channels, 3, 1, 1, true, scheme, rng)?),
        });
    }
    Ok(Cell {
        num_nodes: spec.cell.num_nodes(),
        pairs,
        edges,
    })
}

impl Backbone {
    fn cutoff(&self, tap: Tap) -> usize {
        match tap {
            Tap::BeforeDs1 => self.cutoffs[0],
            Tap::BeforeDs2 => self.cutoffs[1],
            Tap::Final => self.cutoffs[2],
        }
    }

    /// Channel count of the feature map at `tap`.
    pub fn channels_at(&self, tap: Tap) -> usize {
        match tap {
            Tap::BeforeDs1 => self.tap_channels[0],
            Tap::BeforeDs2 => self.tap_channels[1],
            Tap::Final => self.tap_channels[2],
        }
    }

    /// Spatial dims of the feature map at `tap` for a given input size.
    pub fn spatial_at(&self, tap: Tap, input_hw: (usize, usize)) -> (usize, usize) {
        let ds = |x: usize| (x - 1) / 2 + 1;
        let (h, w) = input_hw;
        match tap {
            Tap::BeforeDs1 => (h, w),
            Tap::BeforeDs2 => (ds(h), ds(w)),
            Tap::Final => (ds(ds(h)), ds(ds(w))),
        }
    }

    /// Forward pass up to `tap` without caches.
    pub fn forward(&self, input: &Tensor4, tap: Tap) -> Result<Tensor4> {
        let mut x = input.clone();
        for block in &self.blocks[..self.cutoff(tap)] {
            x = block_forward(block, &x)?.0;
        }
        Ok(x)
    }

    /// Forward pass up to `tap`, retaining the per-block caches required by
    /// [`Backbone::backward`].
    pub fn forward_cached(&self, input: &Tensor4, tap: Tap) -> Result<(Tensor4, ForwardTrace)> {
        let mut x = input.clone();
        let mut traces = Vec::new();
        for block in &self.blocks[..self.cutoff(tap)] {
            let (out, trace) = block_forward(block, &x)?;
            traces.push(trace);
            x = out;
        }
        Ok((
            x,
            ForwardTrace {
                input: input.clone(),
                blocks: traces,
            },
        ))
    }

    /// Backward through the blocks covered by `trace`. Returns kernel
    /// gradients in block order; blocks beyond the tap get empty grads.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Tensor4) -> Result<BackboneGrads> {
        let mut grad = grad_out.clone();
        let mut grads: Vec<Option<BlockGrads>> = (0..self.blocks.len()).map(|_| None).collect();
        for (idx, block_trace) in trace.blocks.iter().enumerate().rev() {
            let input = if idx == 0 {
                &trace.input
            } else {
                block_trace_output_input(&trace.blocks[idx - 1], &trace.input)
            };
            let (g_in, g_block) = block_backward(&self.blocks[idx], input, block_trace, &grad)?;
            grads[idx] = Some(g_block);
            grad = g_in;
        }
        Ok(BackboneGrads {
            blocks: grads
                .into_iter()
                .map(|g| g.unwrap_or(BlockGrads::Conv(Vec::new())))
                .collect(),
        })
    }

    /// One SGD step on every trainable kernel.
    pub fn step(&mut self, grads: &BackboneGrads, cfg: &SgdConfig, lr: f32) {
        for (block, g) in self.blocks.iter_mut().zip(&grads.blocks) {
            match (block, g) {
                (Block::Conv(layer), BlockGrads::Conv(gk)) if !gk.is_empty() => {
                    layer.apply_grad_with_lr(gk, cfg, lr);
                }
                (Block::Cell(cell), BlockGrads::Cell(edge_grads)) => {
                    for (edge, eg) in cell.edges.iter_mut().zip(edge_grads) {
                        if let (EdgeOp::Conv(layer), Some(gk)) = (edge, eg) {
                            layer.apply_grad_with_lr(gk, cfg, lr);
                        }
                    }
                }
                _ => {}
            }
        }
    }

    /// Bit-exact snapshot of every kernel, in a fixed traversal order.
    pub fn kernel_bits(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for block in &self.blocks {
            match block {
                Block::Conv(layer) => out.extend(layer.kernel_bits()),
                Block::Cell(cell) => {
                    for edge in &cell.edges {
                        if let EdgeOp::Conv(layer) = edge {
                            out.extend(layer.kernel_bits());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        for block in &self.blocks {
            match block {
                Block::Conv(layer) => n += layer.kernel().len(),
                Block::Cell(cell) => {
                    for edge in &cell.edges {
                        if let EdgeOp::Conv(layer) = edge {
                            n += layer.kernel().len();
                        }
                    }
                }
            }
        }
        n
    }
}

/// The output of a block, which is the input of the block after it.
fn block_output(trace: &BlockTrace) -> &Tensor4 {
    match trace {
        BlockTrace::Cell { nodes, .. } => nodes.last().expect("cell has nodes"),
        BlockTrace::Conv { output, .. } => output,
    }
}

fn block_forward(block: &Block, x: &Tensor4) -> Result<(Tensor4, BlockTrace)> {
    match block {
        Block::Conv(layer) => {
            let pre = conv2d_forward(x, layer)?;
            let out = relu_forward(&pre);
            Ok((out, BlockTrace::Conv { pre_relu: pre }))
        }
        Block::Cell(cell) => {
            let mut nodes: Vec<Tensor4> = Vec::with_capacity(cell.num_nodes);
            nodes.push(x.clone());
            let mut pre_relu: Vec<Option<Tensor4>> = (0..cell.edges.len()).map(|_| None).collect();
            for node in 1..cell.num_nodes {
                let (b, c, h, w) = nodes[0].dims();
                let mut acc = Tensor4::zeros(b, c, h, w);
                for (e, (&(from, to), op)) in cell.pairs.iter().zip(&cell.edges).enumerate() {
                    if to != node {
                        continue;
                    }
                    match op {
                        EdgeOp::Zero => {}
                        EdgeOp::Skip => acc.add_scaled(&nodes[from], 1.0),
                        EdgeOp::AvgPool => acc.add_scaled(&avgpool3x3_forward(&nodes[from]), 1.0),
                        EdgeOp::Conv(layer) => {
                            let pre = conv2d_forward(&nodes[from], layer)?;
                            acc.add_scaled(&relu_forward(&pre), 1.0);
                            pre_relu[e] = Some(pre);
                        }
                    }
                }
                nodes.push(acc);
            }
            let out = nodes.last().expect("at least two nodes").clone();
            Ok((out, BlockTrace::Cell { nodes, pre_relu }))
        }
    }
}

fn block_backward(
    block: &Block,
    input: &Tensor4,
    trace: &BlockTrace,
    grad_out: &Tensor4,
) -> Result<(Tensor4, BlockGrads)> {
    match (block, trace) {
        (Block::Conv(layer), BlockTrace::Conv { pre_relu }) => {
            let g_pre = relu_backward(pre_relu, grad_out);
            let (g_in, g_kernel) = conv2d_backward(input, layer, &g_pre)?;
            Ok((g_in, BlockGrads::Conv(g_kernel)))
        }
        (Block::Cell(cell), BlockTrace::Cell { nodes, pre_relu }) => {
            let mut node_grads: Vec<Option<Tensor4>> = (0..cell.num_nodes).map(|_| None).collect();
            node_grads[cell.num_nodes - 1] = Some(grad_out.clone());
            let mut edge_grads: Vec<Option<Vec<f32>>> = (0..cell.edges.len()).map(|_| None).collect();
            for node in (1..cell.num_nodes).rev() {
                let g_node = match node_grads[node].take() {
                    Some(g) => g,
                    None => continue, // node unused downstream
                };
                for (e, (&(from, to), op)) in cell.pairs.iter().zip(&cell.edges).enumerate() {
                    if to != node {
                        continue;
                    }
                    let contribution = match op {
                        EdgeOp::Zero => None,
                        EdgeOp::Skip => Some(g_node.clone()),
                        EdgeOp::AvgPool => Some(avgpool3x3_backward(&g_node)),
                        EdgeOp::Conv(layer) => {
                            let pre = pre_relu[e].as_ref().expect("conv edge was traced");
                            let g_pre = relu_backward(pre, &g_node);
                            let (g_in, g_kernel) = conv2d_backward(&nodes[from], layer, &g_pre)?;
                            edge_grads[e] = Some(g_kernel);
                            Some(g_in)
                        }
                    };
                    if let Some(c) = contribution {
                        match &mut node_grads[from] {
                            Some(acc) => acc.add_scaled(&c, 1.0),
                            slot => *slot = Some(c),
                        }
                    }
                }
            }
            let (b, c, h, w) = input.dims();
            let g_in = node_grads[0].take().unwrap_or_else(|| Tensor4::zeros(b, c, h, w));
            Ok((g_in, BlockGrads::Cell(edge_grads)))
        }
        _ => unreachable!("trace kind always matches block kind"),
    }
}

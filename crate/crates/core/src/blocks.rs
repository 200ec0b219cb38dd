//! Grapher and FFN modules and the block that stacks them.

use crate::autograd::Var;
use crate::conv::{ConvVariant, GraphConv, NeighborIndex};
use crate::error::Result;
use crate::graph::{adjust_with_relative_pe, knn_graph, pairwise_sq_distances, Graph};
use crate::layers::{drop_path, BatchNorm, Ctx, Linear, ParamBuilder};
use crate::tensor::{Element, Tensor};

/// Hidden width of the graph convolution relative to the block width.
pub const GRAPHER_RATIO: usize = 2;

/// Grapher hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct GrapherSpec {
    pub dim: usize,
    pub variant: ConvVariant,
    pub heads: usize,
    pub k: usize,
    pub dilation: usize,
    pub drop_path: f64,
}

/// `Y = drop_path(BN(fc_out(GELU(BN(conv(X₁)))))) + X` with `X₁ = BN(fc_in(X))`.
#[derive(Clone, Debug)]
pub struct Grapher {
    pub spec: GrapherSpec,
    pub fc_in: Linear,
    pub bn_in: BatchNorm,
    pub conv: GraphConv,
    pub bn_conv: BatchNorm,
    pub fc_out: Linear,
    pub bn_out: BatchNorm,
}

impl Grapher {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, prefix: &str, spec: GrapherSpec) -> Result<Self> {
        let d = spec.dim;
        let hidden = GRAPHER_RATIO * d;
        Ok(Grapher {
            fc_in: Linear::new(pb, &format!("{prefix}.fc_in"), d, d, true)?,
            bn_in: BatchNorm::new(pb, &format!("{prefix}.fc_in.bn"), d)?,
            conv: GraphConv::new(pb, &format!("{prefix}.conv"), spec.variant, d, hidden, spec.heads)?,
            bn_conv: BatchNorm::new(pb, &format!("{prefix}.conv.bn"), hidden)?,
            fc_out: Linear::new(pb, &format!("{prefix}.fc_out"), hidden, d, true)?,
            bn_out: BatchNorm::new(pb, &format!("{prefix}.fc_out.bn"), d)?,
            spec,
        })
    }

    /// `x` stacks `batch` images of equal node count; `bias` is an optional `[N×N]`
    /// positional term added to every image's distance matrix.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        batch: usize,
        bias: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let h = self.fc_in.forward(ctx, x)?;
        let x1 = self.bn_in.forward(ctx, h)?;
        let graphs = build_graphs(ctx.tape.value(x1), batch, self.spec.k, self.spec.dilation, bias)?;
        let idx = NeighborIndex::new(&graphs)?;
        if let Some(trace) = ctx.trace_mut() {
            trace.graphs.push(graphs);
        }
        let g = self.conv.forward(ctx, x1, &idx)?;
        let g = self.bn_conv.forward(ctx, g)?;
        let g = ctx.tape.gelu(g)?;
        let o = self.fc_out.forward(ctx, g)?;
        let o = self.bn_out.forward(ctx, o)?;
        let o = drop_path(ctx, o, self.spec.drop_path, batch)?;
        ctx.tape.add(o, x)
    }

    /// Multiply-accumulates for one image of `n` nodes, split into dense layers,
    /// graph convolution, and pairwise distances.
    pub fn macs(&self, n: usize) -> BlockMacs {
        BlockMacs {
            dense: self.fc_in.macs(n) + self.fc_out.macs(n),
            graph_conv: self.conv.macs(n, self.spec.k),
            distance: (n * n * self.spec.dim) as u64,
        }
    }
}

/// One KNN graph per image over the rows of `features: [batch·N × D]`.
pub fn build_graphs<T: Element>(
    features: &Tensor<T>,
    batch: usize,
    k: usize,
    dilation: usize,
    bias: Option<&Tensor<T>>,
) -> Result<Vec<Graph>> {
    let (rows, d) = features.dims2()?;
    let n = rows / batch.max(1);
    if batch == 0 || n * batch != rows {
        return Err(crate::VigError::dim(format!("{rows} rows do not split into {batch} images")));
    }
    features
        .data()
        .chunks_exact(n * d)
        .map(|img| {
            let x = Tensor::new([n, d], img.to_vec())?;
            let mut m = pairwise_sq_distances(&x)?;
            if let Some(b) = bias {
                m = adjust_with_relative_pe(&m, b)?;
            }
            knn_graph(&m, k, dilation)
        })
        .collect()
}

/// `Z = drop_path(BN(fc2(GELU(BN(fc1(Y)))))) + Y`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub drop_path: f64,
}

impl Ffn {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        drop_path: f64,
    ) -> Result<Self> {
        Ok(Ffn {
            fc1: Linear::new(pb, &format!("{prefix}.fc1"), dim, hidden, true)?,
            bn1: BatchNorm::new(pb, &format!("{prefix}.fc1.bn"), hidden)?,
            fc2: Linear::new(pb, &format!("{prefix}.fc2"), hidden, dim, true)?,
            bn2: BatchNorm::new(pb, &format!("{prefix}.fc2.bn"), dim)?,
            drop_path,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, y: Var, batch: usize) -> Result<Var> {
        let h = self.fc1.forward(ctx, y)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.gelu(h)?;
        let o = self.fc2.forward(ctx, h)?;
        let o = self.bn2.forward(ctx, o)?;
        let o = drop_path(ctx, o, self.drop_path, batch)?;
        ctx.tape.add(o, y)
    }

    pub fn macs(&self, n: usize) -> u64 {
        self.fc1.macs(n) + self.fc2.macs(n)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockMacs {
    pub dense: u64,
    pub graph_conv: u64,
    pub distance: u64,
}

/// Grapher followed by FFN.
#[derive(Clone, Debug)]
pub struct VigBlock {
    pub grapher: Grapher,
    pub ffn: Ffn,
}

impl VigBlock {
    /// `ffn_ratio` is the FFN hidden width over the block width.
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        spec: GrapherSpec,
        ffn_ratio: usize,
    ) -> Result<Self> {
        Ok(VigBlock {
            grapher: Grapher::new(pb, &format!("{prefix}.grapher"), spec)?,
            ffn: Ffn::new(pb, &format!("{prefix}.ffn"), spec.dim, ffn_ratio * spec.dim, spec.drop_path)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        batch: usize,
        bias: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let y = self.grapher.forward(ctx, x, batch, bias)?;
        let z = self.ffn.forward(ctx, y, batch)?;
        if ctx.trace_mut().is_some() {
            let value = ctx.tape.value(z).clone();
            if let Some(trace) = ctx.trace_mut() {
                trace.block_outputs.push(value);
            }
        }
        Ok(z)
    }

    pub fn macs(&self, n: usize) -> BlockMacs {
        let g = self.grapher.macs(n);
        BlockMacs {
            dense: g.dense + self.ffn.macs(n),
            ..g
        }
    }
}

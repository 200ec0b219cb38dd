//! Graph convolution: neighbor aggregation followed by a multi-head linear update.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Result, VigError};
use crate::graph::Graph;
use crate::layers::{Ctx, Init, ParamBuilder};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvVariant {
    /// `max_j (x_i − x_j)`.
    MaxRelative,
    /// `[x_i ‖ max_j (x_i − x_j)]`.
    #[default]
    MaxRelativeConcat,
    /// `max_j GELU([x_i ‖ x_j − x_i]·W + b)` with a grouped `W`.
    Edge,
    /// `(1 + ε)·x_i + Σ_j x_j`.
    Gin,
    /// `[x_i ‖ mean_j (x_j·W + b)]`.
    Sage,
}

impl ConvVariant {
    pub const ALL: [ConvVariant; 5] = [
        ConvVariant::MaxRelative,
        ConvVariant::MaxRelativeConcat,
        ConvVariant::Edge,
        ConvVariant::Gin,
        ConvVariant::Sage,
    ];

    /// Width of the aggregated features for input width `d`.
    pub fn agg_width(self, d: usize) -> usize {
        match self {
            ConvVariant::MaxRelative | ConvVariant::Gin => d,
            ConvVariant::MaxRelativeConcat | ConvVariant::Edge | ConvVariant::Sage => 2 * d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvVariant::MaxRelative => "max_relative",
            ConvVariant::MaxRelativeConcat => "max_relative_concat",
            ConvVariant::Edge => "edge",
            ConvVariant::Gin => "gin",
            ConvVariant::Sage => "sage",
        }
    }
}

/// Flattened neighbor lists for a batch of graphs over stacked node rows.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    /// Row of the center node for every edge, repeated `k` times per node.
    pub centers: Arc<[u32]>,
    /// Row of the neighbor for every edge.
    pub sources: Arc<[u32]>,
    pub k: usize,
    pub rows: usize,
}

impl NeighborIndex {
    /// Graph `b` covers rows `b·N .. (b+1)·N`. All graphs must share `N` and `k`.
    pub fn new(graphs: &[Graph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| VigError::Contract("no graphs given".into()))?;
        let (n, k) = (first.num_nodes(), first.k());
        if k == 0 {
            return Err(VigError::EmptyNeighborhood);
        }
        let rows = n * graphs.len();
        let mut centers = Vec::with_capacity(rows * k);
        let mut sources = Vec::with_capacity(rows * k);
        for (b, g) in graphs.iter().enumerate() {
            if g.num_nodes() != n || g.k() != k {
                return Err(VigError::dim(format!(
                    "graph {b} has N={}, K={}; expected N={n}, K={k}",
                    g.num_nodes(),
                    g.k()
                )));
            }
            let base = (b * n) as u32;
            for i in 0..n {
                for &j in g.neighbors(i) {
                    centers.push(base + i as u32);
                    sources.push(base + j);
                }
            }
        }
        Ok(NeighborIndex {
            centers: centers.into(),
            sources: sources.into(),
            k,
            rows,
        })
    }
}

/// Parameter names and shapes of one graph convolution.
#[derive(Clone, Debug)]
pub struct GraphConv {
    pub prefix: String,
    pub variant: ConvVariant,
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
}

impl GraphConv {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        variant: ConvVariant,
        d_in: usize,
        d_out: usize,
        heads: usize,
    ) -> Result<Self> {
        let conv = GraphConv {
            prefix: prefix.to_owned(),
            variant,
            d_in,
            d_out,
            heads,
        };
        conv.check_heads()?;
        let h = heads;
        let d_agg = variant.agg_width(d_in);
        match variant {
            ConvVariant::Edge => {
                let g = 2 * d_in / h;
                pb.param(conv.name("edge.weight"), &[h, g, g], Init::Kaiming(g))?;
                pb.param(conv.name("edge.bias"), &[2 * d_in], Init::Zeros)?;
            }
            ConvVariant::Gin => {
                pb.param(conv.name("gin.eps"), &[1], Init::Zeros)?;
            }
            ConvVariant::Sage => {
                pb.param(conv.name("sage.weight"), &[d_in, d_in], Init::Kaiming(d_in))?;
                pb.param(conv.name("sage.bias"), &[d_in], Init::Zeros)?;
            }
            ConvVariant::MaxRelative | ConvVariant::MaxRelativeConcat => {}
        }
        pb.param(
            conv.name("update.weight"),
            &[h, d_agg / h, d_out / h],
            Init::Kaiming(d_agg / h),
        )?;
        Ok(conv)
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    fn check_heads(&self) -> Result<()> {
        let h = self.heads;
        let d_agg = self.variant.agg_width(self.d_in);
        let mut widths = vec![d_agg, self.d_out];
        if self.variant == ConvVariant::Edge {
            widths.push(2 * self.d_in);
        }
        for width in widths {
            if h == 0 || width % h != 0 {
                return Err(VigError::HeadSplit { heads: h, width });
            }
        }
        Ok(())
    }

    pub fn d_agg(&self) -> usize {
        self.variant.agg_width(self.d_in)
    }

    /// Neighbor aggregation, `[rows × D] → [rows × D_agg]`.
    pub fn aggregate<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        idx: &NeighborIndex,
    ) -> Result<Var> {
        let (rows, d) = ctx.tape.value(x).dims2()?;
        if rows != idx.rows || d != self.d_in {
            return Err(VigError::dim(format!(
                "graph conv expects [{}×{}], got [{rows}×{d}]",
                idx.rows, self.d_in
            )));
        }
        let k = idx.k;
        let tape = &mut *ctx.tape;
        match self.variant {
            ConvVariant::MaxRelative | ConvVariant::MaxRelativeConcat => {
                let xi = tape.gather_rows(x, idx.centers.clone())?;
                let xj = tape.gather_rows(x, idx.sources.clone())?;
                let rel = tape.sub(xi, xj)?;
                let m = tape.group_max(rel, k)?;
                if self.variant == ConvVariant::MaxRelative {
                    Ok(m)
                } else {
                    tape.concat_cols(x, m)
                }
            }
            ConvVariant::Edge => {
                let xi = tape.gather_rows(x, idx.centers.clone())?;
                let xj = tape.gather_rows(x, idx.sources.clone())?;
                let rel = tape.sub(xj, xi)?;
                let pair = tape.concat_cols(xi, rel)?;
                let w = ctx.param(&self.name("edge.weight"))?;
                let b = ctx.param(&self.name("edge.bias"))?;
                let tape = &mut *ctx.tape;
                let h = tape.grouped_matmul(pair, w)?;
                let h = tape.add_row_bias(h, b)?;
                let h = tape.gelu(h)?;
                tape.group_max(h, k)
            }
            ConvVariant::Gin => {
                let eps = ctx.param(&self.name("gin.eps"))?;
                let tape = &mut *ctx.tape;
                let xj = tape.gather_rows(x, idx.sources.clone())?;
                let s = tape.group_sum(xj, k)?;
                let own = tape.one_plus_scale(x, eps)?;
                tape.add(own, s)
            }
            ConvVariant::Sage => {
                let w = ctx.param(&self.name("sage.weight"))?;
                let b = ctx.param(&self.name("sage.bias"))?;
                let tape = &mut *ctx.tape;
                // Transforming before gathering is the same map at 1/K of the cost.
                let t = tape.matmul(x, w)?;
                let t = tape.add_row_bias(t, b)?;
                let tj = tape.gather_rows(t, idx.sources.clone())?;
                let m = tape.group_mean(tj, k)?;
                tape.concat_cols(x, m)
            }
        }
    }

    /// Block-diagonal update, `[rows × D_agg] → [rows × D_out]`, no bias.
    pub fn update<T: Element>(&self, ctx: &mut Ctx<'_, T>, agg: Var) -> Result<Var> {
        let w = ctx.param(&self.name("update.weight"))?;
        ctx.tape.grouped_matmul(agg, w)
    }

    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        idx: &NeighborIndex,
    ) -> Result<Var> {
        let agg = self.aggregate(ctx, x, idx)?;
        self.update(ctx, agg)
    }

    /// Multiply-accumulates for `n` nodes with `k` neighbors each.
    ///
    /// Max, sum and mean reductions count one MAC per reduced element.
    pub fn macs(&self, n: usize, k: usize) -> u64 {
        let (n, k, d, h) = (n as u64, k as u64, self.d_in as u64, self.heads as u64);
        let agg = match self.variant {
            ConvVariant::MaxRelative | ConvVariant::MaxRelativeConcat | ConvVariant::Gin => n * k * d,
            ConvVariant::Edge => n * k * (2 * d) * (2 * d) / h + n * k * 2 * d,
            ConvVariant::Sage => n * d * d + n * k * d,
        };
        let update = n * self.d_agg() as u64 * self.d_out as u64 / h;
        agg + update
    }
}

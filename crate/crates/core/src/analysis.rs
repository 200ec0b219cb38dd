//! Parameter and MAC accounting, the feature-diversity measure, and the FFN Lipschitz bound.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::blocks::{build_graphs, Ffn, GrapherSpec, VigBlock};
use crate::conv::{ConvVariant, GraphConv, NeighborIndex};
use crate::error::{Result, VigError};
use crate::layers::{BatchNorm, Ctx, Linear, Mode, ParamBuilder, ParamStore};
use crate::model::{Model, Stem};
use crate::tensor::{Element, Tensor};

/// Parameters and MACs of one named part of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelStats {
    pub param_count: u64,
    pub mac_count: u64,
    pub layers: Vec<LayerCost>,
}

impl ModelStats {
    /// MACs spent building pairwise distance matrices.
    pub fn distance_macs(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.name.ends_with(".distance"))
            .map(|l| l.macs)
            .sum()
    }

    /// CSV with header `name,params,macs`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "name,params,macs")?;
        for l in &self.layers {
            writeln!(w, "{},{},{}", l.name, l.params, l.macs)?;
        }
        writeln!(w, "total,{},{}", self.param_count, self.mac_count)?;
        Ok(())
    }
}

/// Exact number of learnable scalars.
pub fn count_params<T: Element>(model: &Model<T>) -> u64 {
    model.param_count() as u64
}

/// Analytic MAC total for one image at `resolution`.
pub fn count_macs<T: Element>(model: &Model<T>, resolution: [usize; 2]) -> Result<u64> {
    Ok(model_stats(model, resolution)?.mac_count)
}

/// Per-part parameter and MAC breakdown for one image at `resolution`.
///
/// Dense layers and convolutions count `rows · fan_in · fan_out`; every dynamic graph
/// costs `N²·D` for its distance matrix; reductions over neighbors count one MAC per
/// reduced element. Normalization, activations and pooling are not counted.
pub fn model_stats<T: Element>(model: &Model<T>, resolution: [usize; 2]) -> Result<ModelStats> {
    let cfg = model.config();
    cfg.check_resolution(resolution)?;
    let params = |prefix: &str| -> u64 {
        model
            .store
            .params()
            .iter()
            .filter(|(n, _)| *n == prefix || n.starts_with(&format!("{prefix}.")))
            .map(|(_, t)| t.numel() as u64)
            .sum()
    };
    let mut layers = Vec::new();
    let [mut h, mut w] = resolution;
    let stem_macs = match &model.stem {
        Stem::Patch { conv, .. } => {
            let m = conv.macs(h, w);
            (h, w) = conv.out_hw(h, w);
            m
        }
        Stem::Conv { layers } => layers
            .iter()
            .map(|(conv, _)| {
                let m = conv.macs(h, w);
                (h, w) = conv.out_hw(h, w);
                m
            })
            .sum(),
    };
    layers.push(LayerCost {
        name: "stem".into(),
        params: params("stem"),
        macs: stem_macs,
    });
    if let Some(name) = &model.pos_embed {
        layers.push(LayerCost {
            name: name.clone(),
            params: params(name),
            macs: 0,
        });
    }
    for (s, stage) in model.stages.iter().enumerate() {
        let sname = format!("stage{}", s + 1);
        if let Some((conv, _)) = &stage.downsample {
            let prefix = format!("{sname}.downsample");
            layers.push(LayerCost {
                params: params(&prefix),
                name: prefix,
                macs: conv.macs(h, w),
            });
            (h, w) = conv.out_hw(h, w);
        }
        let n = h * w;
        for (b, block) in stage.blocks.iter().enumerate() {
            let prefix = format!("{sname}.block{b}");
            let g = &block.grapher;
            let k = g.spec.k.min(n - 1);
            let grapher = format!("{prefix}.grapher");
            layers.push(LayerCost {
                params: params(&grapher),
                macs: g.fc_in.macs(n) + g.conv.macs(n, k) + g.fc_out.macs(n),
                name: grapher.clone(),
            });
            layers.push(LayerCost {
                name: format!("{grapher}.distance"),
                params: 0,
                macs: (n * n * g.spec.dim) as u64,
            });
            let ffn = format!("{prefix}.ffn");
            layers.push(LayerCost {
                params: params(&ffn),
                macs: block.ffn.macs(n),
                name: ffn,
            });
        }
    }
    layers.push(LayerCost {
        name: "head".into(),
        params: params("head"),
        macs: model.head.fc1.macs(1) + model.head.fc2.macs(1),
    });
    Ok(ModelStats {
        param_count: count_params(model),
        mac_count: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}

/// `γ(X) = sqrt(‖A‖₁·‖A‖∞)` of the column-centered `A = X − 1·x̃ᵀ`, where `‖·‖₁` is the
/// largest absolute column sum and `‖·‖∞` the largest absolute row sum.
pub fn feature_diversity<T: Element>(x: &Tensor<T>) -> Result<f64> {
    let (n, d) = x.dims2()?;
    let xs = x.data();
    let mut mean = vec![0.0f64; d];
    for row in xs.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut col = vec![0.0f64; d];
    let mut row_max = 0.0f64;
    for row in xs.chunks_exact(d) {
        let mut r = 0.0;
        for j in 0..d {
            let a = (row[j].to_f64().unwrap_or(f64::NAN) - mean[j]).abs();
            col[j] += a;
            r += a;
        }
        row_max = row_max.max(r);
    }
    let col_max = col.into_iter().fold(0.0, f64::max);
    Ok((col_max * row_max).sqrt())
}

/// `γ` of every image's node matrix in `x: [batch·N × D]`, averaged over images.
pub fn batch_diversity<T: Element>(x: &Tensor<T>, batch: usize) -> Result<f64> {
    let (rows, d) = x.dims2()?;
    if batch == 0 || rows % batch != 0 {
        return Err(VigError::dim(format!("{rows} rows do not split into {batch} images")));
    }
    let n = rows / batch;
    let mut total = 0.0;
    for img in x.data().chunks_exact(n * d) {
        total += feature_diversity(&Tensor::new([n, d], img.to_vec())?)?;
    }
    Ok(total / batch as f64)
}

/// `γ` after every block of `model` in eval mode, as `(1-based layer, γ)`.
pub fn diversity_profile<T: Element>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<(usize, f64)>> {
    let batch = images.shape().first().copied().unwrap_or(0);
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &model.store, Mode::Eval, 0).with_trace();
    model.forward_nodes(&mut ctx, images)?;
    let trace = ctx.take_trace().unwrap_or_default();
    trace
        .block_outputs
        .iter()
        .enumerate()
        .map(|(l, x)| Ok((l + 1, batch_diversity(x, batch)?)))
        .collect()
}

/// CSV with header `layer,value`.
pub fn write_profile_csv(profile: &[(usize, f64)], mut w: impl Write) -> Result<()> {
    writeln!(w, "layer,value")?;
    for (l, v) in profile {
        writeln!(w, "{l},{v}")?;
    }
    Ok(())
}

/// Setup of the depth probe: a stack of ViG blocks against a stack of bare graph
/// convolutions, both on one random node matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub nodes: usize,
    pub dim: usize,
    pub k: usize,
    pub depth: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            nodes: 196,
            dim: 64,
            k: 9,
            depth: 12,
            heads: 4,
            seed: 0,
        }
    }
}

/// Paired per-layer diversity of the two stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub vig: Vec<f64>,
    pub bare: Vec<f64>,
}

impl ProbeResult {
    /// `γ(last)/γ(first)` for each stack.
    pub fn ratios(&self) -> (f64, f64) {
        let r = |p: &[f64]| p.last().copied().unwrap_or(0.0) / p.first().copied().unwrap_or(1.0);
        (r(&self.vig), r(&self.bare))
    }

    /// CSV with header `layer,vig,bare`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "layer,vig,bare")?;
        for (l, (v, b)) in self.vig.iter().zip(&self.bare).enumerate() {
            writeln!(w, "{},{v},{b}", l + 1)?;
        }
        Ok(())
    }
}

/// Run both stacks in eval mode on the same standard-normal input.
///
/// The bare stack repeats `X ← GELU(GraphConv(X))` with the literal max-relative
/// aggregation and a width-preserving update, rebuilding the KNN graph at every layer.
pub fn probe_diversity(cfg: ProbeConfig) -> Result<ProbeResult> {
    if cfg.depth == 0 {
        return Err(VigError::config("depth", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0: Tensor<f64> = Tensor::from_fn([cfg.nodes, cfg.dim], |_| rng.sample(StandardNormal));
    let k = cfg.k.min(cfg.nodes.saturating_sub(1)).max(1);

    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, Some(cfg.seed.wrapping_add(1)));
    let spec = GrapherSpec {
        dim: cfg.dim,
        variant: ConvVariant::default(),
        heads: cfg.heads,
        k,
        dilation: 1,
        drop_path: 0.0,
    };
    let blocks = (0..cfg.depth)
        .map(|l| VigBlock::new(&mut pb, &format!("vig{l}"), spec, 4))
        .collect::<Result<Vec<_>>>()?;
    let convs = (0..cfg.depth)
        .map(|l| GraphConv::new(&mut pb, &format!("bare{l}"), ConvVariant::MaxRelative, cfg.dim, cfg.dim, cfg.heads))
        .collect::<Result<Vec<_>>>()?;

    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, 0);
    let mut vig = Vec::with_capacity(cfg.depth);
    let mut x = ctx.tape.leaf(x0.clone());
    for b in &blocks {
        x = b.forward(&mut ctx, x, 1, None)?;
        vig.push(feature_diversity(ctx.tape.value(x))?);
    }
    let mut bare = Vec::with_capacity(cfg.depth);
    let mut x = ctx.tape.leaf(x0);
    for c in &convs {
        let graphs = build_graphs(ctx.tape.value(x), 1, k, 1, None)?;
        let y = c.forward(&mut ctx, x, &NeighborIndex::new(&graphs)?)?;
        x = ctx.tape.gelu(y)?;
        bare.push(feature_diversity(ctx.tape.value(x))?);
    }
    Ok(ProbeResult { vig, bare })
}

/// FFN with batch norm folded into the dense layers: `h = GELU(x·W1 + b1)`,
/// `FFN(x) = x + h·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedFfn {
    pub w1: Tensor<f64>,
    pub b1: Vec<f64>,
    pub w2: Tensor<f64>,
    pub b2: Vec<f64>,
}

fn fold<T: Element>(store: &ParamStore<T>, fc: &Linear, bn: &BatchNorm) -> Result<(Tensor<f64>, Vec<f64>)> {
    for buf in ["running_mean", "running_var"] {
        let t = store.buffer(&format!("{}.{buf}", bn.prefix))?;
        if !t.is_finite() || (buf == "running_var" && t.data().iter().any(|&v| v < T::zero())) {
            return Err(VigError::Contract(format!("`{}` has no valid frozen statistics", bn.prefix)));
        }
    }
    let (a, c) = bn.folded(store)?;
    let w = store.get(&fc.weight)?.cast::<f64>();
    let (din, dout) = w.dims2()?;
    let bias = match &fc.bias {
        Some(b) => store.get(b)?.cast::<f64>().into_data(),
        None => vec![0.0; dout],
    };
    let a: Vec<f64> = a.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let c: Vec<f64> = c.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let wf = Tensor::from_fn([din, dout], |i| w.data()[i] * a[i % dout]);
    let bf = (0..dout).map(|j| a[j] * bias[j] + c[j]).collect();
    Ok((wf, bf))
}

/// Fold each eval-mode batch norm of `ffn` into the preceding dense layer.
pub fn fold_ffn<T: Element>(store: &ParamStore<T>, ffn: &Ffn) -> Result<FoldedFfn> {
    let (w1, b1) = fold(store, &ffn.fc1, &ffn.bn1)?;
    let (w2, b2) = fold(store, &ffn.fc2, &ffn.bn2)?;
    Ok(FoldedFfn { w1, b1, w2, b2 })
}

impl FoldedFfn {
    pub fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (_, dh) = self.w1.dims2()?;
        let mut h = x.matmul(&self.w1)?;
        for (i, v) in h.data_mut().iter_mut().enumerate() {
            *v = crate::autograd::gelu_value(*v + self.b1[i % dh]);
        }
        let mut o = h.matmul(&self.w2)?;
        let d = self.b2.len();
        for (i, (v, xv)) in o.data_mut().iter_mut().zip(x.data()).enumerate() {
            *v += self.b2[i % d] + xv;
        }
        Ok(o)
    }
}

/// `max(‖W‖₁, ‖W‖∞)`: bounds both induced norms, so it bounds their geometric mean.
pub fn norm_bound(w: &Tensor<f64>) -> Result<f64> {
    let (r, c) = w.dims2()?;
    let mut cols = vec![0.0f64; c];
    let mut row_max = 0.0f64;
    for i in 0..r {
        let mut s = 0.0;
        for (j, col) in cols.iter_mut().enumerate() {
            let a = w.at(i, j).abs();
            *col += a;
            s += a;
        }
        row_max = row_max.max(s);
    }
    Ok(cols.into_iter().fold(0.0, f64::max).max(row_max))
}

/// `sup |GELU'|`, located numerically.
pub fn gelu_lipschitz() -> f64 {
    use crate::autograd::gelu_slope;
    // GELU' is smooth with its extremes near ±1.4; scan, then refine by golden section.
    let f = |x: f64| gelu_slope(x).abs();
    let mut best = (0.0, 0.0);
    let mut x = -8.0;
    while x <= 8.0 {
        if f(x) > best.1 {
            best = (x, f(x));
        }
        x += 1e-3;
    }
    let (mut lo, mut hi) = (best.0 - 1e-3, best.0 + 1e-3);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if f(a) > f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    f((lo + hi) / 2.0)
}

/// `λ̂ = 1 + L_σ·max(‖W1'‖₁, ‖W1'‖∞)·max(‖W2'‖₁, ‖W2'‖∞)` on BN-folded weights.
pub fn ffn_lipschitz_bound(ffn: &FoldedFfn) -> Result<f64> {
    Ok(1.0 + gelu_lipschitz() * norm_bound(&ffn.w1)? * norm_bound(&ffn.w2)?)
}

/// Apply an FFN module to `x` in eval mode through the tape.
pub fn ffn_eval<T: Element>(store: &ParamStore<T>, ffn: &Ffn, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval, 0);
    let xv: Var = ctx.tape.leaf(x.clone());
    let y = ffn.forward(&mut ctx, xv, 1)?;
    Ok(tape.value(y).clone())
}

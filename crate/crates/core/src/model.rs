//! Model configurations, named presets, and assembled isotropic and pyramid networks.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::autograd::{grad_check, Tape, Var};
use crate::blocks::{GrapherSpec, VigBlock};
use crate::conv::ConvVariant;
use crate::error::{Result, VigError};
use crate::graph::{effective_k_dilation, relative_bias};
use crate::layers::{param_grad_check, BatchNorm, Conv2d, Ctx, Init, Linear, Mode, ParamBuilder, ParamStore, Trace};
use crate::tensor::{Element, Tensor};

/// Worst relative gradient errors found by [`Model::gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport<T> {
    pub param_error: T,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    pub input_error: T,
}

impl<T: Element> GradReport<T> {
    pub fn max_error(&self) -> T {
        self.param_error.max(self.input_error)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Isotropic,
    Pyramid,
}

/// Fully resolved network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Block width per stage; a single entry for isotropic models.
    pub dims: Vec<usize>,
    /// Block count per stage.
    pub depths: Vec<usize>,
    /// FFN hidden width over block width.
    pub ffn_ratio: usize,
    /// Neighbor count grows linearly from `k_min` at the first block to `k_max` at the last.
    pub k_min: usize,
    pub k_max: usize,
    pub heads: usize,
    pub conv: ConvVariant,
    /// `[height, width]` of input images.
    pub image_size: [usize; 2],
    pub num_classes: usize,
    /// Stochastic depth rate of the last block; earlier blocks scale linearly from 0.
    pub drop_path_rate: f64,
    /// Side of the square patches of the isotropic stem.
    pub patch_size: usize,
    pub head_hidden: usize,
    pub absolute_pos: bool,
    pub relative_pos: bool,
}

/// Config document: an optional preset plus field overrides. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub kind: Option<ModelKind>,
    pub dims: Option<Vec<usize>>,
    pub depths: Option<Vec<usize>>,
    pub ffn_ratio: Option<usize>,
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
    pub heads: Option<usize>,
    pub conv: Option<ConvVariant>,
    pub image_size: Option<[usize; 2]>,
    pub num_classes: Option<usize>,
    pub drop_path_rate: Option<f64>,
    pub patch_size: Option<usize>,
    pub head_hidden: Option<usize>,
    pub absolute_pos: Option<bool>,
    pub relative_pos: Option<bool>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let path = unknown_field(&e.to_string()).unwrap_or_else(|| "<document>".into());
            VigError::config(path, e.to_string())
        })
    }

    pub fn resolve(self) -> Result<ModelConfig> {
        let mut cfg = match (&self.preset, self.kind) {
            (Some(name), _) => {
                preset(name).ok_or_else(|| VigError::config("preset", format!("unknown preset `{name}`")))?
            }
            (None, Some(kind)) => {
                let dims = self
                    .dims
                    .clone()
                    .ok_or_else(|| VigError::config("dims", "required without a preset"))?;
                let depths = self
                    .depths
                    .clone()
                    .ok_or_else(|| VigError::config("depths", "required without a preset"))?;
                ModelConfig::base(kind, dims, depths)
            }
            (None, None) => return Err(VigError::config("kind", "required without a preset")),
        };
        macro_rules! overlay {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        overlay!(
            kind, dims, depths, ffn_ratio, k_min, k_max, heads, conv, image_size, num_classes,
            drop_path_rate, patch_size, head_hidden, absolute_pos, relative_pos
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_owned())
}

/// Published reference values for a preset: parameters (millions) and MACs (billions) at 224².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedFigures {
    pub params_m: f64,
    pub macs_b: f64,
}

pub const PRESET_NAMES: [&str; 10] = [
    "vig-ti", "vig-s", "vig-b", "pvig-ti", "pvig-s", "pvig-m", "pvig-b", "micro", "vig-toy", "pvig-toy",
];

/// Table values for the named presets that have them.
pub fn published_figures(name: &str) -> Option<PublishedFigures> {
    let (params_m, macs_b) = match name {
        "vig-ti" => (7.1, 1.3),
        "vig-s" => (22.7, 4.5),
        "vig-b" => (86.8, 17.7),
        "pvig-ti" => (10.7, 1.7),
        "pvig-s" => (27.3, 4.6),
        "pvig-m" => (51.7, 8.9),
        "pvig-b" => (92.6, 16.8),
        _ => return None,
    };
    Some(PublishedFigures { params_m, macs_b })
}

pub fn preset(name: &str) -> Option<ModelConfig> {
    use ModelKind::*;
    let iso = |depth: usize, dim: usize, dp: f64| ModelConfig {
        drop_path_rate: dp,
        ..ModelConfig::base(Isotropic, vec![dim], vec![depth])
    };
    let pyr = |dims: [usize; 4], depths: [usize; 4], dp: f64| ModelConfig {
        drop_path_rate: dp,
        ..ModelConfig::base(Pyramid, dims.to_vec(), depths.to_vec())
    };
    Some(match name {
        "vig-ti" => iso(12, 192, 0.1),
        "vig-s" => iso(16, 320, 0.1),
        "vig-b" => iso(16, 640, 0.3),
        "pvig-ti" => pyr([48, 96, 240, 384], [2, 2, 6, 2], 0.1),
        "pvig-s" => pyr([80, 160, 400, 640], [2, 2, 6, 2], 0.1),
        "pvig-m" => pyr([96, 192, 384, 768], [2, 2, 16, 2], 0.1),
        "pvig-b" => pyr([128, 256, 512, 1024], [2, 2, 18, 2], 0.3),
        // 12×12 image, 4×4 patches: 9 nodes of width 8, 3 neighbors, 2 blocks
        "micro" => ModelConfig {
            k_min: 3,
            k_max: 3,
            image_size: [12, 12],
            num_classes: 10,
            patch_size: 4,
            head_hidden: 16,
            ..ModelConfig::base(Isotropic, vec![8], vec![2])
        },
        "vig-toy" => ModelConfig {
            image_size: [32, 32],
            num_classes: 10,
            patch_size: 4,
            head_hidden: 256,
            ..ModelConfig::base(Isotropic, vec![64], vec![4])
        },
        "pvig-toy" => ModelConfig {
            image_size: [32, 32],
            num_classes: 10,
            head_hidden: 256,
            ..ModelConfig::base(Pyramid, vec![32, 64, 128], vec![2, 2, 2])
        },
        _ => return None,
    })
}

impl ModelConfig {
    /// Defaults shared by the presets of one kind.
    pub fn base(kind: ModelKind, dims: Vec<usize>, depths: Vec<usize>) -> Self {
        let (k_max, relative_pos) = match kind {
            ModelKind::Isotropic => (18, false),
            ModelKind::Pyramid => (9, true),
        };
        ModelConfig {
            kind,
            dims,
            depths,
            ffn_ratio: 4,
            k_min: 9,
            k_max,
            heads: 4,
            conv: ConvVariant::default(),
            image_size: [224, 224],
            num_classes: 1000,
            drop_path_rate: 0.0,
            patch_size: 16,
            head_hidden: 1024,
            absolute_pos: true,
            relative_pos,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| VigError::config(path.display().to_string(), e.to_string()))?;
        ConfigFile::parse(&text)?.resolve()
    }

    pub fn total_depth(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Side divisor of the input: patch size, or the stem's 4 times one halving per
    /// extra stage.
    pub fn resolution_divisor(&self) -> usize {
        match self.kind {
            ModelKind::Isotropic => self.patch_size,
            ModelKind::Pyramid => 4 << self.dims.len().saturating_sub(1),
        }
    }

    /// Node grid `(h, w)` of every stage at the configured resolution.
    pub fn stage_grids(&self) -> Vec<(usize, usize)> {
        self.grids_at(self.image_size)
    }

    pub fn grids_at(&self, [h, w]: [usize; 2]) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Isotropic => vec![(h / self.patch_size, w / self.patch_size)],
            ModelKind::Pyramid => (0..self.dims.len()).map(|s| (h / (4 << s), w / (4 << s))).collect(),
        }
    }

    /// Neighbor count for the 1-based global block index `layer`.
    pub fn k_at(&self, layer: usize) -> usize {
        k_schedule(layer, self.total_depth(), self.k_min, self.k_max)
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.dims.len();
        if stages == 0 {
            return Err(VigError::config("dims", "at least one stage is required"));
        }
        if self.kind == ModelKind::Isotropic && stages != 1 {
            return Err(VigError::config("dims", "isotropic models have exactly one width"));
        }
        if self.depths.len() != stages {
            return Err(VigError::config(
                "depths",
                format!("{} entries for {stages} stages", self.depths.len()),
            ));
        }
        for (s, (&d, &n)) in self.dims.iter().zip(&self.depths).enumerate() {
            if d == 0 {
                return Err(VigError::config(format!("dims[{s}]"), "must be positive"));
            }
            if n == 0 {
                return Err(VigError::config(format!("depths[{s}]"), "must be positive"));
            }
            let h = self.heads;
            if h == 0 || self.conv.agg_width(d) % h != 0 || (2 * d) % h != 0 {
                return Err(VigError::config(
                    "heads",
                    format!("{h} heads do not split width {d} of stage {s}"),
                ));
            }
        }
        if self.ffn_ratio == 0 {
            return Err(VigError::config("ffn_ratio", "must be positive"));
        }
        if self.k_min == 0 || self.k_max < self.k_min {
            return Err(VigError::config("k_max", "need 1 ≤ k_min ≤ k_max"));
        }
        if self.num_classes == 0 {
            return Err(VigError::config("num_classes", "must be positive"));
        }
        if self.head_hidden == 0 {
            return Err(VigError::config("head_hidden", "must be positive"));
        }
        if self.patch_size == 0 {
            return Err(VigError::config("patch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(VigError::config("drop_path_rate", "must lie in [0, 1)"));
        }
        self.check_resolution(self.image_size)
    }

    /// Divisibility and minimum node count at the given input size.
    pub fn check_resolution(&self, size: [usize; 2]) -> Result<()> {
        let div = self.resolution_divisor();
        if size[0] == 0 || size[1] == 0 || size[0] % div != 0 || size[1] % div != 0 {
            return Err(VigError::config(
                "image_size",
                format!("{}×{} is not divisible by {div}", size[0], size[1]),
            ));
        }
        for (s, (h, w)) in self.grids_at(size).into_iter().enumerate() {
            if h * w < 2 {
                return Err(VigError::config(
                    "image_size",
                    format!("stage {s} would have {} node(s); a graph needs 2", h * w),
                ));
            }
        }
        Ok(())
    }
}

/// `round(k_min + (k_max − k_min)·(l − 1)/(depth − 1))` for the 1-based layer `l`.
pub fn k_schedule(layer: usize, depth: usize, k_min: usize, k_max: usize) -> usize {
    if depth < 2 {
        return k_min;
    }
    let t = (layer.clamp(1, depth) - 1) as f64 / (depth - 1) as f64;
    (k_min as f64 + (k_max - k_min) as f64 * t).round() as usize
}

#[derive(Clone, Debug)]
pub(crate) enum Stem {
    /// Non-overlapping patches projected to the first width, then batch norm.
    Patch { conv: Conv2d, bn: BatchNorm },
    /// Three 3×3 convolutions with strides 2, 2, 1, each followed by BN and GELU.
    Conv { layers: Vec<(Conv2d, BatchNorm)> },
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub grid: (usize, usize),
    pub dim: usize,
    /// Stride-2 3×3 convolution from the previous stage, with batch norm.
    pub downsample: Option<(Conv2d, BatchNorm)>,
    pub blocks: Vec<VigBlock>,
}

impl Stage {
    pub fn nodes(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// An assembled network and its parameters.
pub struct Model<T: Element> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    pub(crate) stem: Stem,
    pub(crate) pos_embed: Option<String>,
    pub stages: Vec<Stage>,
    pub(crate) head: Head,
    rel_bias: Vec<OnceLock<Tensor<T>>>,
}

impl<T: Element> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            store: self.store.clone(),
            stem: self.stem.clone(),
            pos_embed: self.pos_embed.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
            rel_bias: (0..self.stages.len()).map(|_| OnceLock::new()).collect(),
        }
    }
}

impl<T: Element> Model<T> {
    /// Build with random initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(seed))
    }

    /// Build with all-zero random initializers; for counting and inspection, or as a
    /// target for loaded weights.
    pub fn structure(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, seed);
        let grids = config.stage_grids();
        let d0 = config.dims[0];

        let stem = match config.kind {
            ModelKind::Isotropic => {
                let p = config.patch_size;
                Stem::Patch {
                    conv: Conv2d::new(&mut pb, "stem.proj", 3, d0, p, p, 0)?,
                    bn: BatchNorm::new(&mut pb, "stem.proj.bn", d0)?,
                }
            }
            ModelKind::Pyramid => {
                let half = (d0 / 2).max(1);
                let plan = [(3, half, 2), (half, d0, 2), (d0, d0, 1)];
                let layers = plan
                    .iter()
                    .enumerate()
                    .map(|(i, &(ci, co, s))| {
                        let conv = Conv2d::new(&mut pb, &format!("stem.conv{i}"), ci, co, 3, s, 1)?;
                        let bn = BatchNorm::new(&mut pb, &format!("stem.conv{i}.bn"), co)?;
                        Ok((conv, bn))
                    })
                    .collect::<Result<_>>()?;
                Stem::Conv { layers }
            }
        };

        let pos_embed = if config.absolute_pos {
            let (h, w) = grids[0];
            Some(pb.param("pos_embed".into(), &[h * w, d0], Init::Normal(0.02))?)
        } else {
            None
        };

        let total = config.total_depth();
        let mut layer = 0;
        let mut stages = Vec::with_capacity(grids.len());
        for (s, (&dim, &depth)) in config.dims.iter().zip(&config.depths).enumerate() {
            let grid = grids[s];
            let downsample = if s == 0 {
                None
            } else {
                let prefix = format!("stage{}.downsample", s + 1);
                let prev = config.dims[s - 1];
                Some((
                    Conv2d::new(&mut pb, &prefix, prev, dim, 3, 2, 1)?,
                    BatchNorm::new(&mut pb, &format!("{prefix}.bn"), dim)?,
                ))
            };
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                layer += 1;
                let (k, dilation) = effective_k_dilation(layer, config.k_at(layer), grid.0 * grid.1);
                let drop_path = if total > 1 {
                    config.drop_path_rate * (layer - 1) as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                let spec = GrapherSpec {
                    dim,
                    variant: config.conv,
                    heads: config.heads,
                    k,
                    dilation,
                    drop_path,
                };
                blocks.push(VigBlock::new(
                    &mut pb,
                    &format!("stage{}.block{b}", s + 1),
                    spec,
                    config.ffn_ratio,
                )?);
            }
            stages.push(Stage {
                grid,
                dim,
                downsample,
                blocks,
            });
        }

        let d_last = *config.dims.last().unwrap_or(&d0);
        let head = Head {
            fc1: Linear::new(&mut pb, "head.fc1", d_last, config.head_hidden, true)?,
            fc2: Linear::new(&mut pb, "head.fc2", config.head_hidden, config.num_classes, true)?,
        };
        let rel_bias = (0..stages.len()).map(|_| OnceLock::new()).collect();
        Ok(Model {
            config,
            store,
            stem,
            pos_embed,
            stages,
            head,
            rel_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &VigBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    fn stage_bias(&self, s: usize) -> Option<&Tensor<T>> {
        if !self.config.relative_pos {
            return None;
        }
        let st = &self.stages[s];
        Some(self.rel_bias[s].get_or_init(|| relative_bias(st.grid.0, st.grid.1, st.dim)))
    }

    /// Logits `[B × num_classes]` for normalized images `[B × H × W × 3]`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, images: &Tensor<T>) -> Result<Var> {
        let (x, batch) = self.input(ctx, images)?;
        self.forward_pixels(ctx, x, batch)
    }

    /// As [`Model::forward`], from pixels already on the tape as `[B·H·W × 3]`.
    pub fn forward_pixels(&self, ctx: &mut Ctx<'_, T>, pixels: Var, batch: usize) -> Result<Var> {
        let x = self.nodes_from_pixels(ctx, pixels, batch)?;
        let (rows, _) = ctx.tape.value(x).dims2()?;
        let n = self.stages.last().map_or(1, Stage::nodes);
        let pooled = ctx.tape.group_mean(x, n)?;
        debug_assert_eq!(ctx.tape.shape(pooled)[0], rows / n);
        let h = self.head.fc1.forward(ctx, pooled)?;
        let h = ctx.tape.gelu(h)?;
        self.head.fc2.forward(ctx, h)
    }

    /// Node features after the last block, `[B·N × D]`.
    pub fn forward_nodes(&self, ctx: &mut Ctx<'_, T>, images: &Tensor<T>) -> Result<Var> {
        let (x, batch) = self.input(ctx, images)?;
        self.nodes_from_pixels(ctx, x, batch)
    }

    fn input(&self, ctx: &mut Ctx<'_, T>, images: &Tensor<T>) -> Result<(Var, usize)> {
        let [h, w] = self.config.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != h || shape[2] != w || shape[3] != 3 {
            return Err(VigError::dim(format!(
                "expected images [B×{h}×{w}×3], got {shape:?}"
            )));
        }
        let batch = shape[0];
        Ok((ctx.tape.leaf(images.clone().reshape([batch * h * w, 3])?), batch))
    }

    fn nodes_from_pixels(&self, ctx: &mut Ctx<'_, T>, x: Var, batch: usize) -> Result<Var> {
        let [h, w] = self.config.image_size;
        if ctx.tape.shape(x) != [batch * h * w, 3] {
            return Err(VigError::dim(format!(
                "expected pixels [{}×3], got {:?}",
                batch * h * w,
                ctx.tape.shape(x)
            )));
        }
        let mut x = match &self.stem {
            Stem::Patch { conv, bn } => {
                let (y, _, _) = conv.forward(ctx, x, batch, h, w)?;
                bn.forward(ctx, y)?
            }
            Stem::Conv { layers } => {
                let (mut y, mut gh, mut gw) = (x, h, w);
                for (conv, bn) in layers {
                    let (c, oh, ow) = conv.forward(ctx, y, batch, gh, gw)?;
                    let c = bn.forward(ctx, c)?;
                    y = ctx.tape.gelu(c)?;
                    (gh, gw) = (oh, ow);
                }
                y
            }
        };
        if let Some(name) = &self.pos_embed {
            let p = ctx.param(name)?;
            x = ctx.tape.add_tiled(x, p)?;
        }
        let mut grid = self.stages[0].grid;
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some((conv, bn)) = &stage.downsample {
                let (y, oh, ow) = conv.forward(ctx, x, batch, grid.0, grid.1)?;
                x = bn.forward(ctx, y)?;
                grid = (oh, ow);
            }
            debug_assert_eq!(grid, stage.grid);
            let bias = self.stage_bias(s);
            for block in &stage.blocks {
                x = block.forward(ctx, x, batch, bias)?;
            }
        }
        Ok(x)
    }

    /// Compare backprop against central differences for every parameter and every
    /// input pixel, with a label-smoothed cross-entropy loss in train mode.
    pub fn gradient_check(&self, images: &Tensor<T>, targets: &[usize], step: T) -> Result<GradReport<T>> {
        let eps = T::lit(0.1);
        let (param_error, worst_param) = param_grad_check(
            &self.store,
            Mode::Train,
            |ctx| {
                let logits = self.forward(ctx, images)?;
                ctx.tape.smoothed_cross_entropy(logits, targets, eps)
            },
            step,
        )?;
        let [h, w] = self.config.image_size;
        let batch = images.shape()[0];
        let pixels = images.clone().reshape([batch * h * w, 3])?;
        let input_error = grad_check(
            |tape, x| {
                let mut ctx = Ctx::new(tape, &self.store, Mode::Train, 0);
                let logits = self.forward_pixels(&mut ctx, x, batch)?;
                ctx.tape.smoothed_cross_entropy(logits, targets, eps)
            },
            &pixels,
            step,
        )?;
        Ok(GradReport {
            param_error,
            worst_param,
            input_error,
        })
    }

    /// Eval-mode pass recording every block's output and graphs.
    pub fn trace(&self, images: &Tensor<T>) -> Result<Trace<T>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval, 0).with_trace();
        self.forward_nodes(&mut ctx, images)?;
        Ok(ctx.take_trace().unwrap_or_default())
    }

    /// Node grid `(rows, cols)` seen by the 1-based block `layer`.
    pub fn block_grid(&self, layer: usize) -> Result<(usize, usize)> {
        let mut seen = 0;
        for stage in &self.stages {
            seen += stage.blocks.len();
            if layer >= 1 && layer <= seen {
                return Ok(stage.grid);
            }
        }
        Err(VigError::Index(format!("layer {layer} out of range 1..={seen}")))
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval, 0);
        let y = self.forward(&mut ctx, images)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w] = cfg.image_size;
        Tensor::from_fn([batch, h, w, 3], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn k_schedule_values() {
        assert_eq!(k_schedule(1, 12, 9, 18), 9);
        assert_eq!(k_schedule(12, 12, 9, 18), 18);
        assert_eq!(k_schedule(6, 12, 9, 18), 13);
        assert_eq!(k_schedule(16, 16, 9, 18), 18);
        assert_eq!(k_schedule(1, 1, 9, 18), 9);
    }

    #[test]
    fn presets_match_tables() {
        let ti = preset("vig-ti").unwrap();
        assert_eq!((ti.depths.clone(), ti.dims.clone()), (vec![12], vec![192]));
        assert_eq!(ti.stage_grids(), vec![(14, 14)]);
        assert_eq!(preset("vig-s").unwrap().dims, vec![320]);
        assert_eq!(preset("vig-b").unwrap().depths, vec![16]);
        let p = preset("pvig-ti").unwrap();
        assert_eq!(p.dims, vec![48, 96, 240, 384]);
        assert_eq!(p.depths, vec![2, 2, 6, 2]);
        assert_eq!((p.ffn_ratio, p.k_min, p.k_max), (4, 9, 9));
        assert_eq!(p.stage_grids(), vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
        assert_eq!(preset("pvig-m").unwrap().depths, vec![2, 2, 16, 2]);
        assert_eq!(preset("pvig-b").unwrap().dims, vec![128, 256, 512, 1024]);
        for name in PRESET_NAMES {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn isotropic_blocks_see_196_nodes_and_scheduled_k() {
        let m = Model::<f32>::structure(preset("vig-ti").unwrap()).unwrap();
        assert_eq!(m.num_blocks(), 12);
        assert!(m.stages.iter().all(|s| s.nodes() == 196));
        let ks: Vec<usize> = m.blocks().map(|b| b.grapher.spec.k).collect();
        assert_eq!((ks[0], ks[11]), (9, 18));
        let ds: Vec<usize> = m.blocks().map(|b| b.grapher.spec.dilation).collect();
        assert_eq!(ds, vec![1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = ConfigFile::parse(r#"{"preset": "vig-ti", "colour": 3}"#).unwrap_err();
        assert!(matches!(err, VigError::Config { ref path, .. } if path == "colour"), "{err}");
        let mut cfg = preset("vig-ti").unwrap();
        cfg.image_size = [225, 225];
        assert!(matches!(cfg.validate(), Err(VigError::Config { ref path, .. }) if path == "image_size"));
        let err = ConfigFile::parse(r#"{"kind": "pyramid", "dims": [8]}"#).unwrap().resolve().unwrap_err();
        assert!(matches!(err, VigError::Config { ref path, .. } if path == "depths"));
        let cfg = ConfigFile::parse(r#"{"preset": "pvig-ti", "num_classes": 10, "image_size": [64, 64]}"#)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.num_classes, 10);
        // echo round trip
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ConfigFile::parse(&json).unwrap().resolve().unwrap(), cfg);
    }

    #[test]
    fn small_pyramid_clamps_k_and_runs() {
        let cfg = preset("pvig-toy").unwrap();
        let m = Model::<f64>::new(cfg.clone(), 1).unwrap();
        // last stage is 2×2: 3 neighbors at most
        assert!(m.stages[2].blocks.iter().all(|b| b.grapher.spec.k == 3));
        let logits = m.predict(&images(&cfg, 2, 2)).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.is_finite());
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let cfg = preset("micro").unwrap();
        let m = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let one = images(&cfg, 1, 4);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let logits = m.predict(&Tensor::new([2, 12, 12, 3], two).unwrap()).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn zero_image_with_zeroed_classifier_gives_equal_logits() {
        let cfg = preset("micro").unwrap();
        let mut m = Model::<f64>::new(cfg, 5).unwrap();
        m.store.assign("head.fc2.weight", Tensor::zeros([16, 10])).unwrap();
        let logits = m.predict(&Tensor::zeros([1, 12, 12, 3])).unwrap();
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let m = Model::<f64>::new(preset("micro").unwrap(), 0).unwrap();
        assert!(matches!(m.predict(&Tensor::zeros([1, 16, 16, 3])), Err(VigError::Dimension(_))));
    }

    #[test]
    fn micro_model_gradients_reach_every_parameter() {
        let cfg = preset("micro").unwrap();
        let m = Model::<f64>::new(cfg.clone(), 7).unwrap();
        let x = images(&cfg, 4, 8);
        let targets = [1, 4, 7, 9];
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &m.store, Mode::Train, 0);
        let logits = m.forward(&mut ctx, &x).unwrap();
        let loss = ctx.tape.smoothed_cross_entropy(logits, &targets, 0.1).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, g) in grads.params() {
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
        }
        assert_eq!(grads.params().len(), m.store.params().len());
    }

    #[test]
    fn micro_model_gradient_check() {
        let cfg = preset("micro").unwrap();
        let m = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let x = images(&cfg, 2, 10);
        let report = m.gradient_check(&x, &[3, 6], 1e-6).unwrap();
        assert!(report.param_error <= 1e-4, "{report:?}");
        assert!(report.input_error <= 1e-4, "{report:?}");
    }
}

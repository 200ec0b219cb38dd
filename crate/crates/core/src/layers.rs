//! Named parameter storage, forward context and the dense building blocks.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BnStats, ConvGeometry, Tape, Var};
use crate::error::{Result, VigError};
use crate::graph::Graph;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Parameters and non-learned buffers (batch-norm running statistics), in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| VigError::Index(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| VigError::Index(format!("no parameter named `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| VigError::Index(format!("no buffer named `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| VigError::Index(format!("no buffer named `{name}`")))
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<T>> {
        &self.buffers
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub(crate) fn insert_param(&mut self, name: String, t: Tensor<T>) -> Result<()> {
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(VigError::Contract(format!("duplicate tensor name `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub(crate) fn insert_buffer(&mut self, name: String, t: Tensor<T>) -> Result<()> {
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(VigError::Contract(format!("duplicate tensor name `{name}`")));
        }
        self.buffers.insert(name, t);
        Ok(())
    }

    /// Replace a tensor's contents by name (parameter or buffer), keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = match self.params.get_mut(name) {
            Some(t) => t,
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| VigError::Index(format!("no tensor named `{name}`")))?,
        };
        if slot.shape() != value.shape() {
            return Err(VigError::dim(format!(
                "`{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn apply_stats(&mut self, updates: Vec<(String, BnStats<T>)>) -> Result<()> {
        for (prefix, stats) in updates {
            let mean = self.buffer_mut(&format!("{prefix}.running_mean"))?;
            mean.data_mut().copy_from_slice(&stats.mean);
            let var = self.buffer_mut(&format!("{prefix}.running_var"))?;
            var.data_mut().copy_from_slice(&stats.var);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He-normal with the given fan-in.
    Kaiming(usize),
}

/// Registers parameters while a model is assembled.
///
/// Without an RNG every random initializer yields zeros, which is enough for structural
/// work (counting, inspection) and avoids sampling tens of millions of values.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: Option<ChaCha8Rng>,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: Option<u64>) -> Self {
        ParamBuilder {
            store,
            rng: seed.map(ChaCha8Rng::seed_from_u64),
        }
    }

    pub fn param(&mut self, name: String, shape: &[usize], init: Init) -> Result<String> {
        let numel: usize = shape.iter().product();
        let std = match init {
            Init::Normal(s) => Some(s),
            Init::Kaiming(fan_in) => Some((2.0 / fan_in.max(1) as f64).sqrt()),
            _ => None,
        };
        let data = match (init, std, self.rng.as_mut()) {
            (Init::Ones, _, _) => vec![T::one(); numel],
            (_, Some(s), Some(rng)) => {
                let normal = Normal::new(0.0, s).map_err(|e| VigError::Contract(e.to_string()))?;
                (0..numel).map(|_| T::lit(normal.sample(rng))).collect()
            }
            _ => vec![T::zero(); numel],
        };
        self.store
            .insert_param(name.clone(), Tensor::new(shape.to_vec(), data)?)?;
        Ok(name)
    }

    pub fn buffer(&mut self, name: String, value: Tensor<T>) -> Result<String> {
        self.store.insert_buffer(name.clone(), value)?;
        Ok(name)
    }
}

/// Per-forward state: the tape, parameter lookup, mode, and collected side outputs.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    rng: ChaCha8Rng,
    stat_updates: Vec<(String, BnStats<T>)>,
    trace: Option<Trace<T>>,
}

/// Intermediate values captured during a forward when tracing is on.
#[derive(Clone, Debug, Default)]
pub struct Trace<T> {
    /// Node features after each ViG block, in execution order.
    pub block_outputs: Vec<Tensor<T>>,
    /// Graphs built by each Grapher, one per image.
    pub graphs: Vec<Vec<Graph>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Ctx {
            tape,
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stat_updates: Vec::new(),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Trace::default());
        self
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(self.tape.param(name, t))
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn take_stat_updates(&mut self) -> Vec<(String, BnStats<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn take_trace(&mut self) -> Option<Trace<T>> {
        self.trace.take()
    }

    pub(crate) fn trace_mut(&mut self) -> Option<&mut Trace<T>> {
        self.trace.as_mut()
    }

    pub(crate) fn record_stats(&mut self, prefix: &str, stats: BnStats<T>) {
        self.stat_updates.push((prefix.to_owned(), stats));
    }
}

/// Fully connected layer on node rows, `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = pb.param(format!("{prefix}.weight"), &[d_in, d_out], Init::Kaiming(d_in))?;
        let bias = bias
            .then(|| pb.param(format!("{prefix}.bias"), &[d_out], Init::Zeros))
            .transpose()?;
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight)?;
        let y = ctx.tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = ctx.param(b)?;
                ctx.tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.d_in * self.d_out) as u64
    }
}

/// Batch normalization over feature columns.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, prefix: &str, dim: usize) -> Result<Self> {
        pb.param(format!("{prefix}.weight"), &[dim], Init::Ones)?;
        pb.param(format!("{prefix}.bias"), &[dim], Init::Zeros)?;
        pb.buffer(format!("{prefix}.running_mean"), Tensor::zeros([dim]))?;
        pb.buffer(format!("{prefix}.running_var"), Tensor::full([dim], T::one()))?;
        Ok(BatchNorm {
            prefix: prefix.to_owned(),
            dim,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let scale = ctx.param(&format!("{}.weight", self.prefix))?;
        let shift = ctx.param(&format!("{}.bias", self.prefix))?;
        let store = ctx.store;
        let mean = store.buffer(&format!("{}.running_mean", self.prefix))?;
        let var = store.buffer(&format!("{}.running_var", self.prefix))?;
        let train = ctx.train();
        let (y, stats) = ctx
            .tape
            .batch_norm(x, scale, shift, (mean.data(), var.data()), train)?;
        if let Some(stats) = stats {
            ctx.record_stats(&self.prefix, stats);
        }
        Ok(y)
    }

    /// Eval-mode affine form `y = a·x + c`, one `(a, c)` per column.
    pub fn folded<T: Element>(&self, store: &ParamStore<T>) -> Result<(Vec<T>, Vec<T>)> {
        let g = store.get(&format!("{}.weight", self.prefix))?.data();
        let b = store.get(&format!("{}.bias", self.prefix))?.data();
        let m = store.buffer(&format!("{}.running_mean", self.prefix))?.data();
        let v = store.buffer(&format!("{}.running_var", self.prefix))?.data();
        let eps = T::lit(crate::autograd::BN_EPS);
        let a: Vec<T> = (0..self.dim).map(|j| g[j] / (v[j] + eps).sqrt()).collect();
        let c = (0..self.dim).map(|j| b[j] - a[j] * m[j]).collect();
        Ok((a, c))
    }
}

/// 2-D convolution over NHWC node rows, lowered to im2col + matmul.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub linear: Linear,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Conv2d {
            linear: Linear::new(pb, prefix, kernel * kernel * c_in, c_out, true)?,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    /// Returns the output rows and their spatial extent.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<(Var, usize, usize)> {
        let geom = ConvGeometry {
            batch,
            height: h,
            width: w,
            channels: self.c_in,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let cols = ctx.tape.im2col(x, geom)?;
        let y = self.linear.forward(ctx, cols)?;
        let (oh, ow) = geom.out_hw();
        Ok((y, oh, ow))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_hw(h, w);
        self.linear.macs(oh * ow)
    }
}

/// Stochastic depth: zero the residual branch per sample with probability `rate`, scaling
/// survivors by `1/(1 − rate)`. Identity in eval mode.
pub fn drop_path<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, rate: f64, batch: usize) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(VigError::config("drop_path_rate", format!("{rate} outside [0, 1)")));
    }
    if !ctx.train() || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scales: Vec<T> = (0..batch)
        .map(|_| {
            if ctx.rng().gen::<f64>() < keep {
                T::lit(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    ctx.tape.group_scale(x, scales)
}

/// Worst relative gradient error over all parameters, with the name where it occurs.
///
/// `f` builds a scalar loss from the context it is handed. The error per coordinate is
/// `|analytic − central difference| / max(1, |central difference|)`.
pub fn param_grad_check<T, F>(store: &ParamStore<T>, mode: Mode, f: F, step: T) -> Result<(T, String)>
where
    T: Element,
    F: Fn(&mut Ctx<'_, T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = {
        let mut ctx = Ctx::new(&mut tape, store, mode, 0);
        f(&mut ctx)?
    };
    let grads = tape.backward(loss)?;

    let mut probe = store.clone();
    let eval = |probe: &ParamStore<T>| -> Result<T> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, probe, mode, 0);
        let out = f(&mut ctx)?;
        Ok(tape.value(out).data()[0])
    };
    let two = T::lit(2.0);
    let mut worst = (T::zero(), String::new());
    for (name, value) in store.params() {
        let zeros = Tensor::zeros(value.shape().to_vec());
        let analytic = grads.param(name).unwrap_or(&zeros);
        for i in 0..value.numel() {
            let orig = value.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (two * step);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(T::one());
            if err > worst.0 {
                worst = (err, name.clone());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_counts() {
        let mut store = ParamStore::<f64>::new();
        let mut pb = ParamBuilder::new(&mut store, Some(1));
        let l = Linear::new(&mut pb, "fc", 5, 3, false).unwrap();
        assert_eq!(store.param_count(), 15);
        assert_eq!(l.macs(7), 7 * 15);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut pb = ParamBuilder::new(&mut store, None);
        pb.param("a".into(), &[2], Init::Zeros).unwrap();
        assert!(pb.param("a".into(), &[2], Init::Zeros).is_err());
    }

    #[test]
    fn drop_path_rates() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([4, 2], 3.0));
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, 0);
        assert_eq!(drop_path(&mut ctx, x, 0.7, 4).unwrap(), x);
        assert!(drop_path(&mut ctx, x, 1.0, 4).is_err());
        assert!(drop_path(&mut ctx, x, -0.1, 4).is_err());
        ctx.mode = Mode::Train;
        assert_eq!(drop_path(&mut ctx, x, 0.0, 4).unwrap(), x);
    }

    #[test]
    fn drop_path_preserves_expectation() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let batch = 20_000;
        let x = tape.leaf(Tensor::full([batch, 1], 1.0));
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, 42);
        let y = drop_path(&mut ctx, x, 0.5, batch).unwrap();
        let vals = ctx.tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = vals.iter().sum::<f64>() / batch as f64;
        // Bernoulli(0.5)·2 has std 1; 4σ of the sample mean
        assert!((mean - 1.0).abs() < 4.0 / (batch as f64).sqrt(), "{mean}");
    }
}

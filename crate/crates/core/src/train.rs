//! Optimizer, learning-rate schedule, evaluation and the supervised training loop.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::data::{Augment, Dataset};
use crate::error::{Result, VigError};
use crate::layers::{Ctx, Mode, ParamStore};
use crate::model::Model;
use crate::tensor::{Element, Tensor};

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let t = (step - warmup_steps).min(span) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (PI * t).cos())
}

/// AdamW with decoupled weight decay applied before the adaptive step.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Weight decay applies to matrices and higher-rank weights only; biases, norm
    /// affine terms and scalars are left undecayed.
    pub fn decays(t: &Tensor<T>) -> bool {
        t.rank() >= 2
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::lit(1.0 - b1.powi(t));
        let c2 = T::lit(1.0 - b2.powi(t));
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let eps = T::lit(self.eps);
        let lr_t = T::lit(lr);
        for (name, p) in store.params_mut() {
            let Some(g) = grads.param(name) else { continue };
            if g.shape() != p.shape() {
                return Err(VigError::dim(format!("gradient of `{name}` has shape {:?}", g.shape())));
            }
            let decay = if Self::decays(p) {
                T::lit(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + one_b1 * gi;
                *vi = b2t * *vi + one_b2 * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Hyper-parameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub flip: bool,
    pub crop_pad: usize,
    /// Abort after this many consecutive non-finite steps.
    pub divergence_patience: usize,
    /// Stop after the first epoch whose validation top-1 reaches this value.
    pub target_top1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 2e-3,
            warmup_epochs: 1,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            seed: 0,
            flip: true,
            crop_pad: 2,
            divergence_patience: 3,
            target_top1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(VigError::config("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(VigError::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(VigError::config("label_smoothing", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(VigError::config("weight_decay", "must be finite and non-negative"));
        }
        if self.divergence_patience == 0 {
            return Err(VigError::config("divergence_patience", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
    /// Where the best-validation checkpoint was written, if anywhere.
    pub best_checkpoint: Option<PathBuf>,
}

impl History {
    /// CSV with header `epoch,train_loss,val_top1,val_top5,lr`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_top1,val_top5,lr")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_top1, e.val_top5, e.lr)?;
        }
        Ok(())
    }

    pub fn best_top1(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_top1).fold(0.0, f64::max)
    }
}

/// Whether `target` ranks within the top `k` of `logits`, ties going to the lower class.
pub fn in_top_k<T: Element>(logits: &[T], target: usize, k: usize) -> bool {
    let t = logits[target];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > t || (v == t && c < target))
        .count();
    ahead < k
}

/// Top-1 and top-5 accuracy of row-wise logits.
pub fn accuracy<T: Element>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, f64)> {
    let (b, _) = logits.dims2()?;
    if b != targets.len() || b == 0 {
        return Err(VigError::dim(format!("{b} logit rows for {} targets", targets.len())));
    }
    let (mut t1, mut t5) = (0usize, 0usize);
    for (i, &y) in targets.iter().enumerate() {
        t1 += in_top_k(logits.row(i), y, 1) as usize;
        t5 += in_top_k(logits.row(i), y, 5) as usize;
    }
    Ok((t1 as f64 / b as f64, t5 as f64 / b as f64))
}

/// Eval-mode top-1 and top-5 over a dataset.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(VigError::Contract("cannot evaluate on an empty dataset".into()));
    }
    let (mut t1, mut t5) = (0.0, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let logits = model.predict(&data.batch::<T>(chunk, None)?)?;
        let targets: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
        let (a, b) = accuracy(&logits, &targets)?;
        t1 += a * chunk.len() as f64;
        t5 += b * chunk.len() as f64;
    }
    Ok((t1 / data.len() as f64, t5 / data.len() as f64))
}

/// Train with AdamW, cosine schedule and label smoothing; evaluates after every epoch.
///
/// When `out_dir` is given, the best-validation weights go to `best.vigc` (plus
/// manifest) and the history to `metrics.csv` there, rewritten after every epoch.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<History> {
    cfg.validate()?;
    let [h, w] = model.config().image_size;
    for (name, d) in [("train", train_set), ("validation", val_set)] {
        if d.height != h || d.width != w || d.channels != 3 {
            return Err(VigError::dim(format!(
                "{name} images are {}×{}×{}, model expects {h}×{w}×3",
                d.height, d.width, d.channels
            )));
        }
        if d.num_classes > model.config().num_classes {
            return Err(VigError::Index(format!(
                "{name} set has {} classes, model outputs {}",
                d.num_classes,
                model.config().num_classes
            )));
        }
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(VigError::Contract("train and validation sets must be non-empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let aug = Augment {
        flip: cfg.flip,
        crop_pad: cfg.crop_pad,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::<T>::new(cfg.weight_decay);
    let mut history = History::default();
    let mut best = f64::NEG_INFINITY;
    let mut bad_steps = 0;
    let mut step = 0;
    let eps = T::lit(cfg.label_smoothing);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, warmup, cfg.lr);
            let images = train_set.batch::<T>(chunk, Some((&aug, &mut rng)))?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let outcome = train_step(model, &images, &targets, eps, step as u64 ^ cfg.seed.rotate_left(32));
            step += 1;
            match outcome {
                Ok((loss, grads, stats)) if loss.is_finite() => {
                    bad_steps = 0;
                    opt.step(&mut model.store, &grads, lr)?;
                    model.store.apply_stats(stats)?;
                    loss_sum += loss * chunk.len() as f64;
                    seen += chunk.len();
                }
                Ok(_) | Err(VigError::NonFinite(_)) => {
                    bad_steps += 1;
                    if bad_steps >= cfg.divergence_patience {
                        return Err(VigError::Divergence(format!(
                            "loss non-finite for {bad_steps} consecutive steps (epoch {epoch}, step {step}, lr {lr:.3e})"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let (val_top1, val_top5) = evaluate(model, val_set, cfg.batch_size.max(64))?;
        history.epochs.push(EpochMetrics {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_top1,
            val_top5,
            lr,
        });
        if let Some(dir) = out_dir {
            if val_top1 > best {
                let path = dir.join("best.vigc");
                model.save(&path)?;
                history.best_checkpoint = Some(path);
            }
            history.write_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
        }
        best = best.max(val_top1);
        if cfg.target_top1.is_some_and(|t| val_top1 >= t) {
            break;
        }
    }
    Ok(history)
}

type StepOutput<T> = (f64, Gradients<T>, Vec<(String, crate::autograd::BnStats<T>)>);

fn train_step<T: Element>(
    model: &Model<T>,
    images: &Tensor<T>,
    targets: &[usize],
    eps: T,
    seed: u64,
) -> Result<StepOutput<T>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.store, Mode::Train, seed);
    let logits = model.forward(&mut ctx, images)?;
    let loss = ctx.tape.smoothed_cross_entropy(logits, targets, eps)?;
    let stats = ctx.take_stat_updates();
    let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    let grads = tape.backward(loss)?;
    Ok((value, grads, stats))
}

/// Softmax regression on raw normalized pixels; returns validation top-1.
///
/// A reference point for how much of a dataset is solvable without spatial reasoning.
pub fn linear_probe(train_set: &Dataset, val_set: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<f64> {
    let d = train_set.record_len();
    let c = train_set.num_classes;
    let mut store = ParamStore::<f32>::new();
    {
        let mut pb = crate::layers::ParamBuilder::new(&mut store, Some(seed));
        pb.param("w".into(), &[d, c], crate::layers::Init::Normal(0.01))?;
        pb.param("b".into(), &[c], crate::layers::Init::Zeros)?;
    }
    let flat = |data: &Dataset, idx: &[usize]| -> Result<Tensor<f32>> {
        data.batch::<f32>(idx, None)?.reshape([idx.len(), d])
    };
    let mut opt = AdamW::new(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(64) {
            let x = flat(train_set, chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let w = tape.param("w", store.get("w")?);
            let b = tape.param("b", store.get("b")?);
            let z = tape.matmul(xv, w)?;
            let z = tape.add_row_bias(z, b)?;
            let loss = tape.smoothed_cross_entropy(z, &targets, 0.0)?;
            let grads = tape.backward(loss)?;
            opt.step(&mut store, &grads, lr)?;
        }
    }
    let idx: Vec<usize> = (0..val_set.len()).collect();
    let logits = flat(val_set, &idx)?.matmul(store.get("w")?)?;
    let b = store.get("b")?.data();
    let logits = Tensor::from_fn([idx.len(), c], |i| logits.data()[i] + b[i % c]);
    let targets: Vec<usize> = idx.iter().map(|&i| val_set.label(i)).collect();
    Ok(accuracy(&logits, &targets)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Init, ParamBuilder};
    use crate::model::preset;
    use rand::Rng;

    fn store_with(name: &str, values: Vec<f64>, shape: &[usize]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        ParamBuilder::new(&mut s, None).param(name.into(), shape, Init::Zeros).unwrap();
        s.assign(name, Tensor::new(shape.to_vec(), values).unwrap()).unwrap();
        s
    }

    fn grads_for(store: &ParamStore<f64>, name: &str, g: Vec<f64>) -> Gradients<f64> {
        // sum(p ⊙ g) has gradient g
        let mut tape = Tape::new();
        let p = tape.param(name, store.get(name).unwrap());
        let shape = store.get(name).unwrap().shape().to_vec();
        let gv = tape.leaf(Tensor::new(shape, g).unwrap());
        let prod = tape.mul(p, gv).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 10, 1.0), 0.0);
        assert_eq!(cosine_lr(10, 100, 10, 1.0), 1.0);
        assert!((cosine_lr(55, 100, 10, 1.0) - 0.5).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 10, 1.0).abs() < 1e-15);
        assert_eq!(cosine_lr(5, 100, 10, 2.0), 1.0);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let mut s = store_with("w", vec![1.0, -2.0, 3.0, 0.5], &[2, 2]);
        let g = grads_for(&s, "w", vec![0.0; 4]);
        AdamW::new(0.0).step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn adamw_decay_only_shrinks() {
        let mut s = store_with("w", vec![1.0, -2.0, 3.0, 0.5], &[2, 2]);
        let g = grads_for(&s, "w", vec![0.0; 4]);
        AdamW::new(0.05).step(&mut s, &g, 0.1).unwrap();
        let f = 1.0 - 0.1 * 0.05;
        assert_eq!(s.get("w").unwrap().data(), &[f, -2.0 * f, 3.0 * f, 0.5 * f]);
    }

    #[test]
    fn adamw_scalar_steps_by_hand() {
        let mut s = store_with("w", vec![2.0, 0.0, 0.0, 0.0], &[2, 2]);
        let mut opt = AdamW::new(0.1);
        let g = grads_for(&s, "w", vec![0.5, 0.0, 0.0, 0.0]);
        opt.step(&mut s, &g, 0.01).unwrap();
        // m̂ = g, v̂ = g² after one step, so the adaptive part is lr·g/(|g| + eps)
        let step1 = 2.0 * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - step1).abs() < 1e-15);
        let g = grads_for(&s, "w", vec![-1.0, 0.0, 0.0, 0.0]);
        opt.step(&mut s, &g, 0.01).unwrap();
        let m = 0.9 * 0.05 + 0.1 * -1.0;
        let v = 0.999 * 0.00025 + 0.001 * 1.0;
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        let step2 = step1 * (1.0 - 0.001) - 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - step2).abs() < 1e-15);
    }

    #[test]
    fn bias_vectors_are_not_decayed() {
        let mut s = store_with("b", vec![1.0, 2.0], &[2]);
        let g = grads_for(&s, "b", vec![0.0; 2]);
        AdamW::new(0.5).step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.get("b").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn top_k_ties_favor_lower_classes() {
        let uniform = Tensor::<f64>::zeros([10, 10]);
        let targets: Vec<usize> = (0..10).collect();
        assert_eq!(accuracy(&uniform, &targets).unwrap(), (0.1, 0.5));
        let onehot = Tensor::<f64>::from_fn([10, 10], |i| if i / 10 == i % 10 { 1.0 } else { 0.0 });
        assert_eq!(accuracy(&onehot, &targets).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn random_logits_hit_chance_rates() {
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::<f64>::from_fn([n, 10], |_| rng.gen());
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let (t1, t5) = accuracy(&logits, &targets).unwrap();
        let sigma = |p: f64| (p * (1.0 - p) / n as f64).sqrt();
        assert!((t1 - 0.1).abs() < 3.0 * sigma(0.1), "{t1}");
        assert!((t5 - 0.5).abs() < 3.0 * sigma(0.5), "{t5}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = crate::data::synth_shapes(24, 12, 10, 1).unwrap();
        let (tr, va) = data.split_at(16);
        let mut m = Model::<f32>::new(preset("micro").unwrap(), 0).unwrap();
        let before = m.store.params().clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.0,
            ..TrainConfig::default()
        };
        train(&mut m, &tr, &va, &cfg, None).unwrap();
        assert_eq!(m.store.params(), &before);
    }

    #[test]
    fn evaluation_ignores_record_order() {
        let data = crate::data::synth_shapes(30, 12, 10, 2).unwrap();
        let m = Model::<f32>::new(preset("micro").unwrap(), 1).unwrap();
        let rev: Vec<usize> = (0..30).rev().collect();
        assert_eq!(evaluate(&m, &data, 7).unwrap(), evaluate(&m, &data.subset(&rev), 11).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let data = crate::data::synth_shapes(40, 12, 10, 3).unwrap();
        let (tr, va) = data.split_at(32);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::<f32>::new(preset("micro").unwrap(), 2).unwrap();
            train(&mut m, &tr, &va, &cfg, None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_step_moves_parameters_with_gradient() {
        let data = crate::data::synth_shapes(8, 12, 10, 4).unwrap();
        let m0 = Model::<f64>::new(preset("micro").unwrap(), 3).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let images = data.batch::<f64>(&idx, None).unwrap();
        let targets: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
        let (_, grads, _) = train_step(&m0, &images, &targets, 0.1, 0).unwrap();
        let mut m = m0.clone();
        AdamW::new(0.05).step(&mut m.store, &grads, 1e-3).unwrap();
        for (name, before) in m0.store.params() {
            let after = m.store.get(name).unwrap();
            let g = grads.param(name).unwrap();
            for i in 0..before.numel() {
                let (b, a) = (before.data()[i], after.data()[i]);
                if g.data()[i] != 0.0 {
                    assert_ne!(a, b, "{name}[{i}] did not move");
                } else if AdamW::<f64>::decays(before) {
                    assert_eq!(a, b * (1.0 - 1e-3 * 0.05));
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }
}

//! Network ops: normalization, gathers, set reductions, convolution lowering, losses.

use std::sync::Arc;

use rayon::prelude::*;

use super::{Backward, Tape, Var};
use crate::error::{Result, VigError};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

struct BatchNorm<T> {
    x: Var,
    scale: Var,
    shift: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Element> Backward<T> for BatchNorm<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.scale, self.shift]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let scale = inp[1].data();
        let c = scale.len();
        let rows = grad.numel() / c;
        let mut dshift = vec![T::zero(); c];
        let mut dscale = vec![T::zero(); c];
        for (g_row, xh_row) in grad.data().chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for j in 0..c {
                dshift[j] = dshift[j] + g_row[j];
                dscale[j] = dscale[j] + g_row[j] * xh_row[j];
            }
        }
        let mut dx = vec![T::zero(); grad.numel()];
        if self.train {
            let n = T::from_usize(rows).unwrap();
            let coef: Vec<T> = (0..c).map(|j| scale[j] * self.inv_std[j] / n).collect();
            for ((dx_row, g_row), xh_row) in dx
                .chunks_exact_mut(c)
                .zip(grad.data().chunks_exact(c))
                .zip(self.xhat.chunks_exact(c))
            {
                for j in 0..c {
                    dx_row[j] = coef[j] * (n * g_row[j] - dshift[j] - xh_row[j] * dscale[j]);
                }
            }
        } else {
            for (dx_row, g_row) in dx.chunks_exact_mut(c).zip(grad.data().chunks_exact(c)) {
                for j in 0..c {
                    dx_row[j] = g_row[j] * scale[j] * self.inv_std[j];
                }
            }
        }
        vec![
            Some(Tensor::from_parts_unchecked(grad.shape().to_vec(), dx)),
            Some(Tensor::from_parts_unchecked(inp[1].shape().to_vec(), dscale)),
            Some(Tensor::from_parts_unchecked(inp[2].shape().to_vec(), dshift)),
        ]
    }
}

struct GatherRows {
    x: Var,
    idx: Arc<[u32]>,
}

impl<T: Element> Backward<T> for GatherRows {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let d = inp[0].shape()[1];
        let mut dx = vec![T::zero(); inp[0].numel()];
        for (&src, g_row) in self.idx.iter().zip(grad.data().chunks_exact(d)) {
            let dst = &mut dx[src as usize * d..(src as usize + 1) * d];
            for (a, &g) in dst.iter_mut().zip(g_row) {
                *a = *a + g;
            }
        }
        vec![Some(Tensor::from_parts_unchecked(inp[0].shape().to_vec(), dx))]
    }
}

struct GroupMax {
    x: Var,
    /// Winning row (absolute) for every output element.
    argmax: Vec<u32>,
}

impl<T: Element> Backward<T> for GroupMax {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let d = inp[0].shape()[1];
        let mut dx = vec![T::zero(); inp[0].numel()];
        for (o, (&row, &g)) in self.argmax.iter().zip(grad.data()).enumerate() {
            let j = o % d;
            dx[row as usize * d + j] = dx[row as usize * d + j] + g;
        }
        vec![Some(Tensor::from_parts_unchecked(inp[0].shape().to_vec(), dx))]
    }
}

/// Sum (or mean when `scale` is `1/group`) over consecutive groups of rows.
struct GroupSum<T> {
    x: Var,
    group: usize,
    scale: T,
}

impl<T: Element> Backward<T> for GroupSum<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let d = inp[0].shape()[1];
        let mut dx = vec![T::zero(); inp[0].numel()];
        for (chunk, g_row) in dx.chunks_exact_mut(self.group * d).zip(grad.data().chunks_exact(d)) {
            for row in chunk.chunks_exact_mut(d) {
                for (a, &g) in row.iter_mut().zip(g_row) {
                    *a = g * self.scale;
                }
            }
        }
        vec![Some(Tensor::from_parts_unchecked(inp[0].shape().to_vec(), dx))]
    }
}

struct ConcatCols {
    a: Var,
    b: Var,
}

impl<T: Element> Backward<T> for ConcatCols {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = inp[0].shape()[1];
        let q = inp[1].shape()[1];
        let mut da = Vec::with_capacity(inp[0].numel());
        let mut db = Vec::with_capacity(inp[1].numel());
        for row in grad.data().chunks_exact(p + q) {
            da.extend_from_slice(&row[..p]);
            db.extend_from_slice(&row[p..]);
        }
        vec![
            Some(Tensor::from_parts_unchecked(inp[0].shape().to_vec(), da)),
            Some(Tensor::from_parts_unchecked(inp[1].shape().to_vec(), db)),
        ]
    }
}

/// Block-diagonal product: column block `t` of `x` times `w[t]`.
struct GroupedMatMul {
    x: Var,
    w: Var,
}

fn grouped_gemm<T: Element>(
    m: usize,
    heads: usize,
    a: usize,
    b: usize,
    x: &[T],
    w: &[T],
    out: &mut [T],
) {
    for t in 0..heads {
        // SAFETY: block t of x spans columns [t·a, (t+1)·a) of an m×(heads·a) buffer,
        // w[t] is a contiguous a×b matrix, and block t of out spans columns
        // [t·b, (t+1)·b) of an m×(heads·b) buffer uniquely borrowed here.
        unsafe {
            T::gemm_raw(
                m,
                a,
                b,
                T::one(),
                x.as_ptr().add(t * a),
                (heads * a) as isize,
                1,
                w.as_ptr().add(t * a * b),
                b as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(t * b),
                (heads * b) as isize,
                1,
            );
        }
    }
}

impl<T: Element> Backward<T> for GroupedMatMul {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inp[0], inp[1]);
        let (heads, a, b) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let m = x.shape()[0];
        let mut dx = vec![T::zero(); x.numel()];
        let mut dw = vec![T::zero(); w.numel()];
        for t in 0..heads {
            // SAFETY: same block layout as `grouped_gemm`; dx/dw blocks are disjoint.
            unsafe {
                // dx_t[m×a] = g_t[m×b] · w_tᵀ
                T::gemm_raw(
                    m,
                    b,
                    a,
                    T::one(),
                    grad.data().as_ptr().add(t * b),
                    (heads * b) as isize,
                    1,
                    w.data().as_ptr().add(t * a * b),
                    1,
                    b as isize,
                    T::zero(),
                    dx.as_mut_ptr().add(t * a),
                    (heads * a) as isize,
                    1,
                );
                // dw_t[a×b] = x_tᵀ · g_t
                T::gemm_raw(
                    a,
                    m,
                    b,
                    T::one(),
                    x.data().as_ptr().add(t * a),
                    1,
                    (heads * a) as isize,
                    grad.data().as_ptr().add(t * b),
                    (heads * b) as isize,
                    1,
                    T::zero(),
                    dw.as_mut_ptr().add(t * a * b),
                    b as isize,
                    1,
                );
            }
        }
        vec![
            Some(Tensor::from_parts_unchecked(x.shape().to_vec(), dx)),
            Some(Tensor::from_parts_unchecked(w.shape().to_vec(), dw)),
        ]
    }
}

/// Spatial layout of a convolution over NHWC rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (o(self.height), o(self.width))
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn valid(&self) -> bool {
        self.kernel >= 1
            && self.stride >= 1
            && self.height + 2 * self.pad >= self.kernel
            && self.width + 2 * self.pad >= self.kernel
    }

    /// Source row of patch element `(ky, kx)` for output position `(b, oy, ox)`, if in bounds.
    #[inline]
    fn source(&self, b: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then(|| (b * self.height + y) * self.width + x)
    }
}

struct Im2Col {
    x: Var,
    geom: ConvGeometry,
}

impl<T: Element> Backward<T> for Im2Col {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = self.geom;
        let (oh, ow) = g.out_hw();
        let c = g.channels;
        let plen = g.patch_len();
        let mut dx = vec![T::zero(); inp[0].numel()];
        for b in 0..g.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &grad.data()[((b * oh + oy) * ow + ox) * plen..][..plen];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            if let Some(src) = g.source(b, oy, ox, ky, kx) {
                                let seg = &row[(ky * g.kernel + kx) * c..][..c];
                                for (a, &v) in dx[src * c..(src + 1) * c].iter_mut().zip(seg) {
                                    *a = *a + v;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts_unchecked(inp[0].shape().to_vec(), dx))]
    }
}

struct GroupScale<T> {
    x: Var,
    scales: Vec<T>,
}

impl<T: Element> Backward<T> for GroupScale<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let chunk = grad.numel() / self.scales.len();
        let mut dx = grad.data().to_vec();
        for (part, &s) in dx.chunks_exact_mut(chunk).zip(&self.scales) {
            part.iter_mut().for_each(|v| *v = *v * s);
        }
        vec![Some(Tensor::from_parts_unchecked(grad.shape().to_vec(), dx))]
    }
}

/// `(1 + e)·x` with a learnable scalar `e`.
struct OnePlusScale {
    x: Var,
    e: Var,
}

impl<T: Element> Backward<T> for OnePlusScale {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.e]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let f = T::one() + inp[1].data()[0];
        let de: T = grad.data().iter().zip(inp[0].data()).map(|(&g, &x)| g * x).sum();
        vec![
            Some(grad.map(|g| g * f)),
            Some(Tensor::from_parts_unchecked(vec![1], vec![de])),
        ]
    }
}

struct SmoothedCrossEntropy<T> {
    logits: Var,
    /// Softmax minus smoothed target, pre-divided by batch size.
    dlogits: Vec<T>,
}

impl<T: Element> Backward<T> for SmoothedCrossEntropy<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0];
        let data = self.dlogits.iter().map(|&d| d * g).collect();
        vec![Some(Tensor::from_parts_unchecked(inp[0].shape().to_vec(), data))]
    }
}

impl<T: Element> Tape<T> {
    /// Batch normalization over rows of `x: [R×C]`.
    ///
    /// Train mode normalizes with batch statistics and returns updated running statistics
    /// (momentum 0.1, unbiased variance); eval mode uses the given running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: (&[T], &[T]),
        train: bool,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let (rows, c) = self.value(x).dims2()?;
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(VigError::dim(format!("batch norm affine params for {c} columns")));
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(VigError::dim(format!("batch norm running stats for {c} columns")));
        }
        if train && rows < 2 {
            return Err(VigError::DegenerateBatch(rows));
        }
        let eps = T::lit(BN_EPS);
        let xs = self.value(x).data();
        let (mean, var) = if train {
            let n = T::from_usize(rows).unwrap();
            let mut mean = vec![T::zero(); c];
            for row in xs.chunks_exact(c) {
                for j in 0..c {
                    mean[j] = mean[j] + row[j];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); c];
            for row in xs.chunks_exact(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] = var[j] + d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / n);
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut xhat = Vec::with_capacity(rows * c);
        let mut out = Vec::with_capacity(rows * c);
        for row in xs.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(sc[j] * h + sh[j]);
            }
        }
        let update = train.then(|| {
            let m = T::lit(BN_MOMENTUM);
            let unbias = T::from_usize(rows).unwrap() / T::from_usize(rows - 1).unwrap();
            BnStats {
                mean: running
                    .0
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b)
                    .collect(),
                var: running
                    .1
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                    .collect(),
            }
        });
        let xhat = if self.is_recording() { xhat } else { Vec::new() };
        let v = self.push(
            Tensor::from_parts_unchecked(vec![rows, c], out),
            BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            },
            "batch_norm",
        )?;
        Ok((v, update))
    }

    /// Rows of `x` selected by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[u32]>) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= r) {
            return Err(VigError::Index(format!("row {bad} out of range for {r} rows")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&xs[i as usize * d..(i as usize + 1) * d]);
        }
        let t = Tensor::from_parts_unchecked(vec![idx.len(), d], out);
        self.push(t, GatherRows { x, idx }, "gather_rows")
    }

    /// Columnwise max over consecutive groups of `group` rows: `[G·K×D] → [G×D]`.
    ///
    /// The gradient flows to the first maximal row of each column.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        if group == 0 {
            return Err(VigError::EmptyNeighborhood);
        }
        let (r, d) = self.value(x).dims2()?;
        if r % group != 0 {
            return Err(VigError::dim(format!("{r} rows not divisible into groups of {group}")));
        }
        let xs = self.value(x).data();
        let g = r / group;
        let mut out = vec![T::zero(); g * d];
        let mut argmax = vec![0u32; g * d];
        out.par_chunks_mut(d)
            .zip(argmax.par_chunks_mut(d))
            .enumerate()
            .for_each(|(gi, (o, am))| {
                let base = gi * group;
                o.copy_from_slice(&xs[base * d..(base + 1) * d]);
                am.iter_mut().for_each(|a| *a = base as u32);
                for k in 1..group {
                    let row = &xs[(base + k) * d..(base + k + 1) * d];
                    for j in 0..d {
                        if row[j] > o[j] {
                            o[j] = row[j];
                            am[j] = (base + k) as u32;
                        }
                    }
                }
            });
        let t = Tensor::from_parts_unchecked(vec![g, d], out);
        self.push(t, GroupMax { x, argmax }, "group_max")
    }

    /// Sum over consecutive groups of `group` rows.
    pub fn group_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        self.group_reduce(x, group, T::one(), "group_sum")
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = T::one() / T::from_usize(group.max(1)).unwrap();
        self.group_reduce(x, group, s, "group_mean")
    }

    fn group_reduce(&mut self, x: Var, group: usize, scale: T, name: &'static str) -> Result<Var> {
        if group == 0 {
            return Err(VigError::EmptyNeighborhood);
        }
        let (r, d) = self.value(x).dims2()?;
        if r % group != 0 {
            return Err(VigError::dim(format!("{r} rows not divisible into groups of {group}")));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); (r / group) * d];
        for (o, chunk) in out.chunks_exact_mut(d).zip(xs.chunks_exact(group * d)) {
            for row in chunk.chunks_exact(d) {
                for (a, &v) in o.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            o.iter_mut().for_each(|v| *v = *v * scale);
        }
        let t = Tensor::from_parts_unchecked(vec![r / group, d], out);
        self.push(t, GroupSum { x, group, scale }, name)
    }

    /// `[m×p] ‖ [m×q] → [m×(p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (m2, q) = self.value(b).dims2()?;
        if m != m2 {
            return Err(VigError::dim(format!("concat of {m} and {m2} rows")));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for (ra, rb) in xa.chunks_exact(p).zip(xb.chunks_exact(q)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let t = Tensor::from_parts_unchecked(vec![m, p + q], out);
        self.push(t, ConcatCols { a, b }, "concat_cols")
    }

    /// Multi-head product: `x: [m × h·a]`, `w: [h × a × b]` → `[m × h·b]`.
    pub fn grouped_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, width) = self.value(x).dims2()?;
        let &[heads, a, b] = self.value(w).shape() else {
            return Err(VigError::dim("grouped weight must be rank 3 [heads, in, out]"));
        };
        if heads * a != width {
            return Err(VigError::dim(format!(
                "grouped matmul: {heads} heads of width {a} against {width} columns"
            )));
        }
        let mut out = vec![T::zero(); m * heads * b];
        grouped_gemm(m, heads, a, b, self.value(x).data(), self.value(w).data(), &mut out);
        let t = Tensor::from_parts_unchecked(vec![m, heads * b], out);
        self.push(t, GroupedMatMul { x, w }, "grouped_matmul")
    }

    /// Lower NHWC rows `[B·H·W × C]` to patch rows `[B·Ho·Wo × k·k·C]`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r != geom.batch * geom.height * geom.width || c != geom.channels || !geom.valid() {
            return Err(VigError::dim(format!(
                "im2col geometry {geom:?} does not match input [{r}x{c}]"
            )));
        }
        let (oh, ow) = geom.out_hw();
        let plen = geom.patch_len();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); geom.batch * oh * ow * plen];
        out.par_chunks_mut(plen).enumerate().for_each(|(o, row)| {
            let b = o / (oh * ow);
            let oy = (o / ow) % oh;
            let ox = o % ow;
            for ky in 0..geom.kernel {
                for kx in 0..geom.kernel {
                    if let Some(src) = geom.source(b, oy, ox, ky, kx) {
                        row[(ky * geom.kernel + kx) * c..][..c]
                            .copy_from_slice(&xs[src * c..(src + 1) * c]);
                    }
                }
            }
        });
        let t = Tensor::from_parts_unchecked(vec![geom.batch * oh * ow, plen], out);
        self.push(t, Im2Col { x, geom }, "im2col")
    }

    /// Multiply each of `scales.len()` equal row blocks by its own constant.
    pub fn group_scale(&mut self, x: Var, scales: Vec<T>) -> Result<Var> {
        let n = self.value(x).numel();
        if scales.is_empty() || n % scales.len() != 0 {
            return Err(VigError::dim("group_scale: blocks do not tile the tensor"));
        }
        let chunk = n / scales.len();
        let mut data = self.value(x).data().to_vec();
        for (part, &s) in data.chunks_exact_mut(chunk).zip(&scales) {
            part.iter_mut().for_each(|v| *v = *v * s);
        }
        let t = Tensor::from_parts_unchecked(self.shape(x).to_vec(), data);
        self.push(t, GroupScale { x, scales }, "group_scale")
    }

    /// `(1 + e)·x` where `e` is a one-element tensor.
    pub fn one_plus_scale(&mut self, x: Var, e: Var) -> Result<Var> {
        if self.value(e).numel() != 1 {
            return Err(VigError::dim("scale must hold one element"));
        }
        let f = T::one() + self.value(e).data()[0];
        let t = self.value(x).map(|v| v * f);
        self.push(t, OnePlusScale { x, e }, "one_plus_scale")
    }

    /// Mean cross-entropy of `logits: [B×C]` against ε-smoothed one-hot targets.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[usize], eps: T) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(VigError::dim(format!("{} targets for {b} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(VigError::Index(format!("target {t} out of range for {c} classes")));
        }
        if !(eps >= T::zero() && eps < T::one()) {
            return Err(VigError::Contract(format!("label smoothing {eps} outside [0, 1)")));
        }
        let bt = T::from_usize(b).unwrap();
        let off = eps / T::from_usize(c).unwrap();
        let on = T::one() - eps + off;
        let mut loss = T::zero();
        let mut dlogits = Vec::with_capacity(b * c);
        for (row, &t) in self.value(logits).data().chunks_exact(c).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln() + mx;
            for (j, &z) in row.iter().enumerate() {
                let q = if j == t { on } else { off };
                let logp = z - lse;
                loss = loss - q * logp;
                dlogits.push((logp.exp() - q) / bt);
            }
        }
        self.push(
            Tensor::scalar(loss / bt),
            SmoothedCrossEntropy { logits, dlogits },
            "smoothed_cross_entropy",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;

    fn wavy(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let one = tape.leaf(Tensor::full([1], 1.0));
        let zero = tape.leaf(Tensor::zeros([1]));
        let x = tape.leaf(Tensor::new([3, 1], vec![2.5, 2.5, 2.5]).unwrap());
        let (y, _) = tape.batch_norm(x, one, zero, (&[0.0], &[1.0]), true).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = tape.leaf(Tensor::new([2, 1], vec![-1.0, 1.0]).unwrap());
        let (y, stats) = tape.batch_norm(x, one, zero, (&[0.0], &[1.0]), true).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + expect).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-12);
        // unbiased batch variance 2, momentum 0.1
        let stats = stats.unwrap();
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-12);
        assert_eq!(stats.mean[0], 0.0);

        let x = tape.leaf(Tensor::new([2, 1], vec![-3.0, 7.0]).unwrap());
        let (y, stats) = tape.batch_norm(x, one, zero, (&[0.0], &[1.0]), false).unwrap();
        assert!(stats.is_none());
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-4);

        let x = tape.leaf(Tensor::new([1, 1], vec![1.0]).unwrap());
        assert!(matches!(
            tape.batch_norm(x, one, zero, (&[0.0], &[1.0]), true),
            Err(VigError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn batch_norm_train_gradient() {
        let x = wavy(&[6, 3], 0.77);
        let sc = Tensor::new([3], vec![1.3, 0.4, -0.8]).unwrap();
        let sh = Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap();
        let w = wavy(&[6, 3], 1.91);
        for train in [true, false] {
            let f = |tape: &mut Tape<f64>, xv: Var| {
                let s = tape.leaf(sc.clone());
                let h = tape.leaf(sh.clone());
                let (y, _) = tape.batch_norm(xv, s, h, (&[0.1, 0.2, 0.3], &[1.5, 0.5, 2.0]), train)?;
                let wv = tape.leaf(w.clone());
                let y = tape.mul(y, wv)?;
                tape.sum_squares(y)
            };
            let err = grad_check(f, &x, 1e-5).unwrap();
            assert!(err <= 1e-6, "train={train}: {err}");
        }
    }

    #[test]
    fn reduce_max_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let m = tape.group_max(x, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![4.0, -1.0]]).unwrap());
        let m = tape.group_max(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, -1.0]);
        assert!(matches!(tape.group_max(x, 0), Err(VigError::EmptyNeighborhood)));
    }

    #[test]
    fn reduce_max_ties_go_to_first_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::from_rows(&[vec![2.0], vec![2.0], vec![1.0]]).unwrap());
        let m = tape.group_max(x, 3).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_group_concat_gradients() {
        let x = wavy(&[5, 3], 0.61);
        let idx: Arc<[u32]> = vec![0, 2, 4, 4, 1, 3].into();
        let f = |tape: &mut Tape<f64>, xv: Var| {
            let g = tape.gather_rows(xv, idx.clone())?;
            let mx = tape.group_max(g, 3)?;
            let mn = tape.group_mean(g, 2)?;
            let sm = tape.group_sum(g, 3)?;
            let mn = tape.group_sum(mn, 3)?;
            let c = tape.concat_cols(mx, sm)?;
            let c2 = tape.concat_cols(mn, mn)?;
            let c2 = tape.group_sum(c2, 1)?;
            let c2 = tape.reshape(c2, [1, 6])?;
            let c = tape.reshape(c, [2, 6])?;
            let c = tape.group_sum(c, 2)?;
            let y = tape.add(c, c2)?;
            tape.sum_squares(y)
        };
        assert!(grad_check(f, &x, 1e-6).unwrap() <= 1e-6);
    }

    #[test]
    fn grouped_matmul_is_block_diagonal_product() {
        let x = wavy(&[4, 6], 0.3);
        let w = wavy(&[2, 3, 2], 0.9);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let y = tape.grouped_matmul(xv, wv).unwrap();
        // assemble the block-diagonal 6x4 matrix
        let mut bd = Tensor::<f64>::zeros([6, 4]);
        for t in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    bd.data_mut()[(t * 3 + i) * 4 + t * 2 + j] = w.data()[(t * 3 + i) * 2 + j];
                }
            }
        }
        let expect = x.matmul(&bd).unwrap();
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);

        let f = |tape: &mut Tape<f64>, xv: Var| {
            let wv = tape.leaf(w.clone());
            let y = tape.grouped_matmul(xv, wv)?;
            tape.sum_squares(y)
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-6);
        let g = |tape: &mut Tape<f64>, wv: Var| {
            let xv = tape.leaf(x.clone());
            let y = tape.grouped_matmul(xv, wv)?;
            tape.sum_squares(y)
        };
        assert!(grad_check(g, &w, 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let geom = ConvGeometry {
            batch: 2,
            height: 5,
            width: 4,
            channels: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = wavy(&[2 * 5 * 4, 2], 0.37);
        let w = wavy(&[geom.patch_len(), 3], 0.53);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let cols = tape.im2col(xv, geom).unwrap();
        let wv = tape.leaf(w.clone());
        let y = tape.matmul(cols, wv).unwrap();
        let (oh, ow) = geom.out_hw();
        assert_eq!((oh, ow), (3, 2));
        for b in 0..2 {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..3 {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    let src = ((b * 5 + iy as usize) * 4 + ix as usize) * 2 + ci;
                                    acc += x.data()[src] * w.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                                }
                            }
                        }
                        let got = tape.value(y).data()[((b * oh + oy) * ow + ox) * 3 + co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
        let f = |tape: &mut Tape<f64>, xv: Var| {
            let c = tape.im2col(xv, geom)?;
            tape.sum_squares(c)
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-7);
    }

    #[test]
    fn smoothed_cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![50.0, 0.0, 0.0]]).unwrap());
        let l = tape.smoothed_cross_entropy(z, &[0], 0.0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-12);

        let z = tape.leaf(Tensor::zeros([2, 7]));
        let l = tape.smoothed_cross_entropy(z, &[3, 6], 0.0).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);

        // eps = 0.1, C = 10, hand formula
        let logits: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let z = tape.leaf(Tensor::new([1, 10], logits.clone()).unwrap());
        let l = tape.smoothed_cross_entropy(z, &[4], 0.1).unwrap();
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        let expect: f64 = logits
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let q = if j == 4 { 0.9 + 0.01 } else { 0.01 };
                -q * (v - lse)
            })
            .sum();
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);

        assert!(matches!(
            tape.smoothed_cross_entropy(z, &[10], 0.1),
            Err(VigError::Index(_))
        ));

        let x = wavy(&[3, 4], 0.8);
        let f = |tape: &mut Tape<f64>, v: Var| tape.smoothed_cross_entropy(v, &[1, 3, 0], 0.1);
        assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-8);
    }

    #[test]
    fn one_plus_scale_gradient() {
        let x = wavy(&[3, 2], 0.4);
        let f = |tape: &mut Tape<f64>, e: Var| {
            let xv = tape.leaf(x.clone());
            let y = tape.one_plus_scale(xv, e)?;
            tape.sum_squares(y)
        };
        assert!(grad_check(f, &Tensor::new([1], vec![0.3]).unwrap(), 1e-5).unwrap() <= 1e-8);
    }
}

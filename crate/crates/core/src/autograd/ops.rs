//! Dense arithmetic ops.

use super::{Backward, Tape, Var};
use crate::error::{Result, VigError};
use crate::tensor::{gemm, Element, Tensor, Trans};

struct MatMul {
    a: Var,
    b: Var,
}

impl<T: Element> Backward<T> for MatMul {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (inp[0], inp[1]);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut da = vec![T::zero(); m * k];
        gemm(m, n, k, grad.data(), Trans::No, b.data(), Trans::Yes, T::zero(), &mut da);
        let mut db = vec![T::zero(); k * n];
        gemm(k, m, n, a.data(), Trans::Yes, grad.data(), Trans::No, T::zero(), &mut db);
        vec![
            Some(Tensor::from_parts_unchecked(vec![m, k], da)),
            Some(Tensor::from_parts_unchecked(vec![k, n], db)),
        ]
    }
}

/// `out = a + alpha·b`, same shapes.
struct AddScaled<T> {
    a: Var,
    b: Var,
    alpha: T,
}

impl<T: Element> Backward<T> for AddScaled<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let alpha = self.alpha;
        vec![Some(grad.clone()), Some(grad.map(|g| g * alpha))]
    }
}

struct Mul {
    a: Var,
    b: Var,
}

impl<T: Element> Backward<T> for Mul {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let zip = |x: &Tensor<T>| {
            let data = grad.data().iter().zip(x.data()).map(|(&g, &v)| g * v).collect();
            Tensor::from_parts_unchecked(grad.shape().to_vec(), data)
        };
        vec![Some(zip(inp[1])), Some(zip(inp[0]))]
    }
}

struct Scale<T> {
    x: Var,
    c: T,
}

impl<T: Element> Backward<T> for Scale<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let c = self.c;
        vec![Some(grad.map(|g| g * c))]
    }
}

/// Adds a `[n]` bias to every row of `[m×n]`.
struct AddRowBias {
    x: Var,
    b: Var,
}

impl<T: Element> Backward<T> for AddRowBias {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.b]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let n = inp[1].numel();
        let mut db = vec![T::zero(); n];
        for row in grad.data().chunks_exact(n) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc = *acc + g;
            }
        }
        vec![
            Some(grad.clone()),
            Some(Tensor::from_parts_unchecked(inp[1].shape().to_vec(), db)),
        ]
    }
}

/// Adds a `[r×c]` block to each of the `g` consecutive `[r×c]` blocks of `[g·r × c]`.
struct AddTiled {
    x: Var,
    p: Var,
}

impl<T: Element> Backward<T> for AddTiled {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.p]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let block = inp[1].numel();
        let mut dp = vec![T::zero(); block];
        for chunk in grad.data().chunks_exact(block) {
            for (acc, &g) in dp.iter_mut().zip(chunk) {
                *acc = *acc + g;
            }
        }
        vec![
            Some(grad.clone()),
            Some(Tensor::from_parts_unchecked(inp[1].shape().to_vec(), dp)),
        ]
    }
}

pub(crate) fn gelu_value<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_slope<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

struct Gelu {
    x: Var,
}

impl<T: Element> Backward<T> for Gelu {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let data = grad
            .data()
            .iter()
            .zip(inp[0].data())
            .map(|(&g, &x)| g * gelu_slope(x))
            .collect();
        vec![Some(Tensor::from_parts_unchecked(grad.shape().to_vec(), data))]
    }
}

struct Sum {
    x: Var,
}

impl<T: Element> Backward<T> for Sum {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inp[0].shape().to_vec(), grad.data()[0]))]
    }
}

struct SumSquares {
    x: Var,
}

impl<T: Element> Backward<T> for SumSquares {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g2 = grad.data()[0] * T::lit(2.0);
        vec![Some(inp[0].map(|x| x * g2))]
    }
}

struct Reshape {
    x: Var,
}

impl<T: Element> Backward<T> for Reshape {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, inp: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::from_parts_unchecked(
            inp[0].shape().to_vec(),
            grad.data().to_vec(),
        ))]
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(VigError::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(VigError::dim(format!(
                "matmul inner extents differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Trans::No,
            self.value(b).data(),
            Trans::No,
            T::zero(),
            &mut out,
        );
        self.push(
            Tensor::from_parts_unchecked(vec![m, n], out),
            MatMul { a, b },
            "matmul",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, T::one(), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, -T::one(), "sub")
    }

    fn add_scaled(&mut self, a: Var, b: Var, alpha: T, name: &'static str) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + alpha * y)
            .collect();
        let out = Tensor::from_parts_unchecked(va.shape().to_vec(), data);
        self.push(out, AddScaled { a, b, alpha }, name)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts_unchecked(va.shape().to_vec(), data);
        self.push(out, Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Scale { x, c }, "scale")
    }

    /// Adds bias `[n]` to each row of `x: [m×n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(b).numel() != n {
            return Err(VigError::dim(format!(
                "bias of {} elements for {n} columns",
                self.value(b).numel()
            )));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v = *v + bb;
            }
        }
        let out = Tensor::from_parts_unchecked(self.shape(x).to_vec(), data);
        self.push(out, AddRowBias { x, b }, "add_row_bias")
    }

    /// Adds `p: [r×c]` to every consecutive `[r×c]` block of `x: [g·r × c]`.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        let (r, c2) = self.value(p).dims2()?;
        if c != c2 || rows % r != 0 {
            return Err(VigError::dim(format!(
                "cannot tile [{r}x{c2}] over [{rows}x{c}]"
            )));
        }
        let block = self.value(p).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(r * c) {
            for (v, &pp) in chunk.iter_mut().zip(block) {
                *v = *v + pp;
            }
        }
        let out = Tensor::from_parts_unchecked(vec![rows, c], data);
        self.push(out, AddTiled { x, p }, "add_tiled")
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_value);
        self.push(out, Gelu { x }, "gelu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Sum { x }, "sum")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), SumSquares { x }, "sum_squares")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Reshape { x }, "reshape")
    }
}

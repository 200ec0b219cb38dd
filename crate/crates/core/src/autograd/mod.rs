//! Reverse-mode differentiation over a linear op record.
//!
//! Every op pushes its output value plus a backward rule onto a [`Tape`]. Parameters are
//! registered by name so [`Tape::backward`] can hand back a name → gradient map.

mod nn;
mod ops;

pub(crate) use ops::{gelu_slope, gelu_value};

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Result, VigError};
use crate::tensor::{Element, Tensor};

pub use nn::{BnStats, ConvGeometry, BN_EPS, BN_MOMENTUM};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Backward rule of one recorded op.
pub(crate) trait Backward<T: Element>: Send + Sync {
    fn inputs(&self) -> Vec<Var>;

    /// Gradients for each input, aligned with [`Backward::inputs`].
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Option<Box<dyn Backward<T>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    state: TapeState,
    record: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
            state: TapeState::Recording,
            record: true,
        }
    }

    /// A tape that keeps values but drops backward rules (inference).
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clear all recorded ops and parameters so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.state = TapeState::Recording;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, None)
    }

    /// Register (or look up) a named parameter.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push_raw(value.clone(), None);
        self.params.insert(name.to_owned(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Option<Box<dyn Backward<T>>>) -> Var {
        let op = if self.record { op } else { None };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        op: impl Backward<T> + 'static,
        name: &'static str,
    ) -> Result<Var> {
        if self.state == TapeState::Consumed {
            return Err(VigError::Lifecycle(
                "tape already consumed by backward; reset before recording".into(),
            ));
        }
        let value = value.ensure_finite(name)?;
        Ok(self.push_raw(value, Some(Box::new(op))))
    }

    /// Propagate gradients from a scalar `loss` to every leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.state == TapeState::Consumed {
            return Err(VigError::Lifecycle(
                "backward called twice without a fresh forward".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(VigError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.state = TapeState::Consumed;

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(
            self.nodes[loss.0].value.shape().to_vec(),
            T::one(),
        ));
        let mut leaves = HashMap::new();

        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else {
                leaves.insert(Var(id), grad);
                continue;
            };
            let inputs = op.inputs();
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = op.backward(&values, &node.value, &grad);
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (v, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = leaves
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { params, leaves })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: IndexMap<String, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a named parameter; exactly zero when the loss does not reach it.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> IndexMap<String, Tensor<T>> {
        self.params
    }

    /// Gradient of an arbitrary leaf, if the loss reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }
}

/// Max over coordinates of `|analytic − central difference| / max(1, |central difference|)`.
///
/// `f` must build a scalar on the tape it is given from the leaf it is handed.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: &Tensor<T>| -> Result<T> {
        let mut tape = Tape::inference();
        let xv = tape.leaf(probe.clone());
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).data()[0])
    };

    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (two * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

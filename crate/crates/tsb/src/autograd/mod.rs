//! Reverse-mode automatic differentiation over a fixed operator set.
//!
//! A [`Tape`] records every intermediate tensor of a forward pass; calling
//! [`Tape::backward`] on a scalar walks the recorded nodes in reverse and
//! accumulates exact gradients into the leaves. Nodes whose ancestors are all
//! constants carry no backward closure and cost nothing during the reverse
//! sweep, which is what makes the frozen-upstream path cheap.
//!
//! The engine is generic over [`Real`] so training runs in single precision
//! while gradient checks run in double precision.

mod gradcheck;
mod losses;
mod lstm;
mod ops;

pub use gradcheck::{grad_check, grad_check_robust, GradCheckConfig, GradCheckReport};
pub use losses::expanded_label_len;

use num_traits::Float;

/// Scalar type of the engine: `f32` for normal runs, `f64` for tests and
/// gradient checks.
pub trait Real:
    Float

    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// A dense row-major tensor. Scalars have an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> TensorData<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![F::zero(); n] }
    }

    pub fn scalar(v: F) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_f32_slice(shape: Vec<usize>, data: &[f32]) -> Self {
        Self::new(shape, data.iter().map(|&x| F::from_f32(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn add_in_place(&mut self, other: &TensorData<F>) {
        assert_eq!(self.shape, other.shape, "gradient shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradient accumulator passed to backward closures: `sink(parent, delta)`.
pub type GradSink<'a, F> = dyn FnMut(usize, TensorData<F>) + 'a;

type BackFn<F> = Box<dyn Fn(&[TensorData<F>], &TensorData<F>, &mut GradSink<F>)>;

/// Recorded forward pass.
pub struct Tape<F: Real> {
    values: Vec<TensorData<F>>,
    needs_grad: Vec<bool>,
    backs: Vec<Option<BackFn<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { values: Vec::new(), needs_grad: Vec::new(), backs: Vec::new() }
    }

    pub(crate) fn push(
        &mut self,
        value: TensorData<F>,
        needs_grad: bool,
        back: Option<BackFn<F>>,
    ) -> Var {
        debug_assert!(value.data.iter().all(|v| !v.as_f64().is_nan()) || true);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.backs.push(if needs_grad { back } else { None });
        Var(self.values.len() - 1)
    }

    /// A differentiable input; its gradient survives `backward`.
    pub fn leaf(&mut self, value: TensorData<F>) -> Var {
        self.push(value, true, None)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: TensorData<F>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &TensorData<F> {
        &self.values[v.0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reverse sweep from a scalar node. Returns per-node gradients; only
    /// leaves retain entries (intermediate gradients are consumed and freed).
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.values[loss.0].len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<TensorData<F>>> = Vec::with_capacity(self.values.len());
        grads.resize_with(self.values.len(), || None);
        let mut seed = TensorData::zeros(self.values[loss.0].shape.clone());
        seed.data_mut()[0] = F::one();
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                grads[i] = None;
                continue;
            }
            match &self.backs[i] {
                None => {} // leaf: keep its gradient for the caller
                Some(back) => {
                    let Some(g) = grads[i].take() else { continue };
                    let (before, after) = grads.split_at_mut(i);
                    let _ = after;
                    let mut sink = |j: usize, delta: TensorData<F>| {
                        debug_assert!(j < i, "backward edge to a later node");
                        match &mut before[j] {
                            Some(acc) => acc.add_in_place(&delta),
                            slot @ None => *slot = Some(delta),
                        }
                    };
                    back(&self.values, &g, &mut sink);
                }
            }
        }
        Grads { grads }
    }
}

/// Result of a backward sweep.
pub struct Grads<F> {
    grads: Vec<Option<TensorData<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of the loss with respect to a leaf, zero-filled if the leaf
    /// never influenced the loss.
    pub fn take(&mut self, v: Var, shape: &[usize]) -> TensorData<F> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| TensorData::zeros(shape.to_vec()))
    }

    pub fn get(&self, v: Var) -> Option<&TensorData<F>> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_gradient() {
        // loss = mean(tanh(x * 2)) ; checked against the hand derivative.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::vector(vec![0.3, -0.7, 1.2]));
        let scaled = tape.scale(x, 2.0);
        let t = tape.tanh(scaled);
        let loss = tape.mean_all(t);
        let mut grads = tape.backward(loss);
        let g = grads.take(x, &[3]);
        for (i, &xi) in [0.3, -0.7, 1.2].iter().enumerate() {
            let th: f64 = (2.0 * xi).tanh();
            let want = 2.0 * (1.0 - th * th) / 3.0;
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(TensorData::vector(vec![1.0, 2.0]));
        let x = tape.leaf(TensorData::vector(vec![3.0, 4.0]));
        let y = tape.mul(x, c);
        let loss = tape.sum_all(y);
        let mut grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        let gx = grads.take(x, &[2]);
        assert_eq!(gx.data(), &[1.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(x) -> grad = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::vector(vec![1.0, 1.0]));
        let a = tape.sum_all(x);
        let b = tape.sum_all(x);
        let loss = tape.add(a, b);
        let mut grads = tape.backward(loss);
        assert_eq!(grads.take(x, &[2]).data(), &[2.0, 2.0]);
    }
}

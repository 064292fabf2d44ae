use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

/// A trainable tensor: flat row-major values plus a same-shape gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    /// Panics if `values.len()` does not match the shape.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, values.len(), "tensor values do not match shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Values viewed as a matrix whose rows are the leading dimension.
    pub(crate) fn as_matrix(&self) -> ArrayView2<'_, f64> {
        let rows = self.shape.first().copied().unwrap_or(1);
        let cols = self.values.len() / rows.max(1);
        ArrayView2::from_shape((rows, cols), &self.values).expect("contiguous tensor")
    }

    pub(crate) fn grad_matrix_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let rows = self.shape.first().copied().unwrap_or(1);
        let cols = self.grad.len() / rows.max(1);
        ArrayViewMut2::from_shape((rows, cols), &mut self.grad).expect("contiguous tensor")
    }
}

/// Glorot-uniform weights: `U(-L, L)` with `L = sqrt(6 / (fan_in + fan_out))`.
///
/// Shape conventions: `[out, in]` for dense weights and `[filters, width, channels]`
/// for convolution kernels, where the receptive field `width` scales both fans.
pub fn glorot_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> ParamTensor {
    let (fan_in, fan_out) = fans(shape);
    let limit = glorot_limit(fan_in, fan_out);
    let len: usize = shape.iter().product();
    let values = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
    ParamTensor::from_values(shape, values)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, rest @ ..] => {
            let receptive: usize = rest[..rest.len() - 1].iter().product();
            let channels = rest[rest.len() - 1];
            (channels * receptive, out * receptive)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of every trainable tensor in a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: ParamTensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

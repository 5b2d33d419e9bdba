//! Layers with hand-written backward passes.
//!
//! Every layer caches what it needs during a [`Mode::Train`] forward pass
//! and consumes that cache in `backward`, accumulating parameter gradients
//! into [`Param::grad`]. [`Mode::Eval`] forwards keep no cache and use
//! running batch-norm statistics.

mod bottleneck;
mod conv;
mod norm;
mod pool;

pub use bottleneck::{Bottleneck, BottleneckConfig};
pub use conv::{Conv2d, ConvConfig};
pub use norm::BatchNorm2d;
pub use pool::{bilinear_resize, MaxPool2d, Relu, Upsample};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Cache activations for backward and use batch statistics.
    Train,
    /// No caching, running statistics, nothing mutated.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics: persisted and checksummed, never touched by optimizers.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            shape,
            value,
            grad,
            kind: ParamKind::Trainable,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<T>) -> Self {
        Self {
            shape,
            value,
            grad: Vec::new(),
            kind: ParamKind::Buffer,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Common interface of every layer and layer container.
pub trait Module<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Backpropagates `grad` (w.r.t. this module's last train-mode output),
    /// accumulating parameter gradients and returning the input gradient.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// Drops cached activations.
    fn clear_cache(&mut self);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!("{layer}: backward called without a train-mode forward"))
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu),
    MaxPool(MaxPool2d),
    Upsample(Upsample),
    Bottleneck(Box<Bottleneck<T>>),
}

impl<T: Scalar> Module<T> for Layer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Relu(l) => Module::<T>::forward(l, x, mode),
            Layer::MaxPool(l) => Module::<T>::forward(l, x, mode),
            Layer::Upsample(l) => Module::<T>::forward(l, x, mode),
            Layer::Bottleneck(l) => l.forward(x, mode),
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Relu(l) => Module::<T>::backward(l, grad),
            Layer::MaxPool(l) => Module::<T>::backward(l, grad),
            Layer::Upsample(l) => Module::<T>::backward(l, grad),
            Layer::Bottleneck(l) => l.backward(grad),
        }
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Layer::Conv(l) => l.visit_params(prefix, f),
            Layer::BatchNorm(l) => l.visit_params(prefix, f),
            Layer::Bottleneck(l) => l.visit_params(prefix, f),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::Upsample(_) => {}
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Layer::Conv(l) => l.visit_params_mut(prefix, f),
            Layer::BatchNorm(l) => l.visit_params_mut(prefix, f),
            Layer::Bottleneck(l) => l.visit_params_mut(prefix, f),
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::Upsample(_) => {}
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.clear_cache(),
            Layer::BatchNorm(l) => l.clear_cache(),
            Layer::Relu(l) => Module::<T>::clear_cache(l),
            Layer::MaxPool(l) => Module::<T>::clear_cache(l),
            Layer::Upsample(l) => Module::<T>::clear_cache(l),
            Layer::Bottleneck(l) => l.clear_cache(),
        }
    }
}

/// Ordered, named chain of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T> {
    layers: Vec<(String, Layer<T>)>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>) {
        self.layers.push((name.into(), layer));
    }

    pub fn layers(&self) -> &[(String, Layer<T>)] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut iter = self.layers.iter_mut();
        let mut out = match iter.next() {
            Some((_, layer)) => layer.forward(x, mode)?,
            None => return Ok(x.clone()),
        };
        for (_, layer) in iter {
            out = layer.forward(&out, mode)?;
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (name, layer) in &self.layers {
            layer.visit_params(&join(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (name, layer) in &mut self.layers {
            layer.visit_params_mut(&join(prefix, name), f);
        }
    }

    fn clear_cache(&mut self) {
        for (_, layer) in &mut self.layers {
            layer.clear_cache();
        }
    }
}

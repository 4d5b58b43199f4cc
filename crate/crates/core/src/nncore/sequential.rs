use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ensure_finite, Layer, LayerSpec, Scalar, Tensor};
use crate::{FormError, Result};

/// A feed-forward stack of layers.
#[derive(Debug, Clone)]
pub struct Sequential<F> {
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<F>>,
    forwarded: bool,
}

/// A model producing class probabilities that can be trained with the
/// weighted cross-entropy loop in [`super::train`].
pub trait Classifier<F: Scalar> {
    type Batch;

    fn forward_probs(&mut self, batch: &Self::Batch, training: bool, rng: &mut ChaCha8Rng) -> Result<Array2<F>>;

    /// Backpropagate dL/d(logits), i.e. the gradient entering the final
    /// softmax from below.
    fn backward_logits(&mut self, grad: Array2<F>) -> Result<()>;

    fn params(&self) -> Vec<&Tensor<F>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<F>>;

    fn n_classes(&self) -> usize;
}

impl<F: Scalar> Sequential<F> {
    /// Build with He-initialised weights drawn from `seed`.
    pub fn new(input_dims: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_dims.is_empty() || input_dims.contains(&0) {
            return Err(FormError::Config(format!("invalid input dims {input_dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = input_dims.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let (layer, out) = Layer::build(spec, &dims, &mut rng)?;
            if out.contains(&0) {
                return Err(FormError::Config(format!("layer {spec:?} collapses dims {dims:?}")));
            }
            layers.push(layer);
            dims = out;
        }
        Ok(Sequential { input_dims: input_dims.to_vec(), output_dims: dims, specs: specs.to_vec(), layers, forwarded: false })
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn forward(&mut self, x: &ArrayD<F>, training: bool, rng: &mut ChaCha8Rng) -> Result<ArrayD<F>> {
        self.forward_range(x, 0..self.layers.len(), training, rng)
    }

    /// Run layers `range` only; used to tap intermediate activations such as
    /// the global-average-pool output.
    pub fn forward_range(
        &mut self,
        x: &ArrayD<F>,
        range: std::ops::Range<usize>,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ArrayD<F>> {
        if range.start == 0 && x.shape()[1..] != self.input_dims[..] {
            return Err(FormError::DimMismatch { expected: self.input_dims.clone(), got: x.shape()[1..].to_vec() });
        }
        let mut a = x.clone();
        for i in range {
            a = self.layers[i].forward(a, training, rng)?;
            ensure_finite(&a, &format!("layer {i} ({:?})", self.specs[i]))?;
        }
        self.forwarded = training;
        if !training {
            self.layers.iter_mut().for_each(Layer::clear_cache);
        }
        Ok(a)
    }

    /// Backpropagate dL/d(output) through every layer; returns dL/d(input).
    pub fn backward(&mut self, grad: ArrayD<F>) -> Result<ArrayD<F>> {
        let n = self.layers.len();
        self.backward_through(grad, n)
    }

    /// Backpropagate starting below layer `top` (exclusive).
    pub fn backward_through(&mut self, grad: ArrayD<F>, top: usize) -> Result<ArrayD<F>> {
        if !self.forwarded {
            return Err(FormError::Untrained);
        }
        let mut g = grad;
        for layer in self.layers[..top].iter_mut().rev() {
            g = layer.backward(g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Scalar>(&self) -> Sequential<G> {
        let mut out = Sequential::<G>::new(&self.input_dims, &self.specs, 0).expect("validated architecture");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(self.specs.last(), Some(LayerSpec::Softmax))
    }
}

impl<F: Scalar> Classifier<F> for Sequential<F> {
    type Batch = ArrayD<F>;

    fn forward_probs(&mut self, batch: &ArrayD<F>, training: bool, rng: &mut ChaCha8Rng) -> Result<Array2<F>> {
        if !self.ends_in_softmax() {
            return Err(FormError::Config("classifier must end in Softmax".into()));
        }
        self.forward(batch, training, rng)?
            .into_dimensionality::<Ix2>()
            .map_err(|e| FormError::Numeric(e.to_string()))
    }

    fn backward_logits(&mut self, grad: Array2<F>) -> Result<()> {
        let top = self.layers.len() - 1;
        self.backward_through(grad.into_dyn(), top).map(|_| ())
    }

    fn params(&self) -> Vec<&Tensor<F>> {
        Sequential::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        Sequential::params_mut(self)
    }

    fn n_classes(&self) -> usize {
        self.output_dims.iter().product()
    }
}

pub(crate) fn stack_batch<F: Scalar>(items: &[&ArrayD<F>]) -> ArrayD<F> {
    let dims = items[0].shape().to_vec();
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&dims);
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for it in items {
        data.extend(it.iter().copied());
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data).expect("uniform item dims")
}

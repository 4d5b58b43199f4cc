use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, ArrayView2, Axis, Ix2, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LayerSpec, Scalar, Tensor};
use crate::{FormError, Result};

/// One instantiated layer: parameters plus whatever the backward pass needs
/// from the most recent forward pass.
#[derive(Debug, Clone)]
pub enum Layer<F> {
    Conv(Conv2d<F>),
    Dense(Dense<F>),
    Relu { mask: Option<ArrayD<bool>> },
    Dropout { rate: f64, mask: Option<ArrayD<F>> },
    Gap { in_shape: Option<Vec<usize>> },
    Softmax { out: Option<Array2<F>> },
    Upsample { factor: usize, in_shape: Option<Vec<usize>> },
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pub(crate) weight: Tensor<F>,
    pub(crate) bias: Tensor<F>,
    cache: Option<ConvCache<F>>,
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    cols: Array2<F>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Dense<F> {
    n_in: usize,
    n_out: usize,
    pub(crate) weight: Tensor<F>,
    pub(crate) bias: Tensor<F>,
    input: Option<(Array2<F>, Vec<usize>)>,
}

fn he_normal<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::c(normal.sample(rng)))
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    let p = k / 2;
    (size + 2 * p - k) / stride + 1
}

impl<F: Scalar> Layer<F> {
    /// Instantiate `spec` for per-sample input dims `input`; returns the layer
    /// and its per-sample output dims.
    pub fn build(spec: &LayerSpec, input: &[usize], rng: &mut ChaCha8Rng) -> Result<(Self, Vec<usize>)> {
        spec.validate()?;
        let need3 = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(FormError::Config(format!("{what} needs (C, H, W) input, got {input:?}"))),
            }
        };
        Ok(match *spec {
            LayerSpec::Conv { channels_out, kernel, stride } => {
                let (c, h, w) = need3("conv")?;
                let fan_in = c * kernel * kernel;
                let conv = Conv2d {
                    in_c: c,
                    out_c: channels_out,
                    k: kernel,
                    stride,
                    weight: Tensor::new(he_normal(&[channels_out, fan_in], fan_in, rng)),
                    bias: Tensor::new(ArrayD::zeros(IxDyn(&[channels_out]))),
                    cache: None,
                };
                let out = vec![channels_out, conv_out(h, kernel, stride), conv_out(w, kernel, stride)];
                (Layer::Conv(conv), out)
            }
            LayerSpec::FullyConnected { n_out } => {
                let n_in: usize = input.iter().product();
                let dense = Dense {
                    n_in,
                    n_out,
                    weight: Tensor::new(he_normal(&[n_in, n_out], n_in, rng)),
                    bias: Tensor::new(ArrayD::zeros(IxDyn(&[n_out]))),
                    input: None,
                };
                (Layer::Dense(dense), vec![n_out])
            }
            LayerSpec::ReLU => (Layer::Relu { mask: None }, input.to_vec()),
            LayerSpec::Dropout { rate } => (Layer::Dropout { rate, mask: None }, input.to_vec()),
            LayerSpec::GlobalAveragePool => {
                let (c, _, _) = need3("global average pool")?;
                (Layer::Gap { in_shape: None }, vec![c])
            }
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(FormError::Config(format!("softmax needs a flat input, got {input:?}")));
                }
                (Layer::Softmax { out: None }, input.to_vec())
            }
            LayerSpec::Upsample { factor } => {
                let (c, h, w) = need3("upsample")?;
                (Layer::Upsample { factor, in_shape: None }, vec![c, h * factor, w * factor])
            }
        })
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => vec![],
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(c) => c.cache = None,
            Layer::Dense(d) => d.input = None,
            Layer::Relu { mask } => *mask = None,
            Layer::Dropout { mask, .. } => *mask = None,
            Layer::Gap { in_shape } | Layer::Upsample { in_shape, .. } => *in_shape = None,
            Layer::Softmax { out } => *out = None,
        }
    }

    /// Batched forward pass; axis 0 of `x` is the batch.
    pub fn forward(&mut self, x: ArrayD<F>, training: bool, rng: &mut ChaCha8Rng) -> Result<ArrayD<F>> {
        match self {
            Layer::Conv(conv) => conv.forward(x, training),
            Layer::Dense(dense) => dense.forward(x, training),
            Layer::Relu { mask } => {
                let m = x.mapv(|v| v > F::zero());
                let out = x.mapv(|v| if v > F::zero() { v } else { F::zero() });
                *mask = training.then_some(m);
                Ok(out)
            }
            Layer::Dropout { rate, mask } => {
                if !training || *rate == 0.0 {
                    *mask = None;
                    return Ok(x);
                }
                let keep = 1.0 - *rate;
                let scale = F::c(1.0 / keep);
                let m = ArrayD::from_shape_simple_fn(x.raw_dim(), || {
                    if rng.gen::<f64>() < keep {
                        scale
                    } else {
                        F::zero()
                    }
                });
                let out = &x * &m;
                *mask = Some(m);
                Ok(out)
            }
            Layer::Gap { in_shape } => {
                let x4 = x.into_dimensionality::<Ix4>().map_err(|e| FormError::Numeric(e.to_string()))?;
                let (n, c, h, w) = x4.dim();
                let hw = F::c((h * w) as f64);
                let flat = x4.into_shape_with_order((n, c, h * w)).expect("contiguous");
                let out = flat.sum_axis(Axis(2)).mapv(|v| v / hw);
                *in_shape = training.then(|| vec![n, c, h, w]);
                Ok(out.into_dyn())
            }
            Layer::Softmax { out } => {
                let x2 = x.into_dimensionality::<Ix2>().map_err(|e| FormError::Numeric(e.to_string()))?;
                let mut p = x2;
                for mut row in p.rows_mut() {
                    let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - max).exp());
                    let s: F = row.iter().copied().sum();
                    row.mapv_inplace(|v| v / s);
                }
                *out = training.then(|| p.clone());
                Ok(p.into_dyn())
            }
            Layer::Upsample { factor, in_shape } => {
                let f = *factor;
                let x4 = x.into_dimensionality::<Ix4>().map_err(|e| FormError::Numeric(e.to_string()))?;
                let (n, c, h, w) = x4.dim();
                let out = Array4::from_shape_fn((n, c, h * f, w * f), |(a, b, i, j)| x4[[a, b, i / f, j / f]]);
                *in_shape = training.then(|| vec![n, c, h, w]);
                Ok(out.into_dyn())
            }
        }
    }

    /// Given dL/d(output), store parameter gradients and return dL/d(input).
    pub fn backward(&mut self, grad: ArrayD<F>) -> Result<ArrayD<F>> {
        match self {
            Layer::Conv(conv) => conv.backward(grad),
            Layer::Dense(dense) => dense.backward(grad),
            Layer::Relu { mask } => {
                let m = mask.as_ref().ok_or(FormError::Untrained)?;
                let mut g = grad;
                ndarray::Zip::from(&mut g).and(m).for_each(|g, &keep| {
                    if !keep {
                        *g = F::zero();
                    }
                });
                Ok(g)
            }
            Layer::Dropout { rate, mask } => match mask {
                Some(m) => Ok(&grad * &*m),
                None if *rate == 0.0 => Ok(grad),
                None => Err(FormError::Untrained),
            },
            Layer::Gap { in_shape } => {
                let s = in_shape.as_ref().ok_or(FormError::Untrained)?;
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let g = grad.into_dimensionality::<Ix2>().map_err(|e| FormError::Numeric(e.to_string()))?;
                let hw = F::c((h * w) as f64);
                let out = Array4::from_shape_fn((n, c, h, w), |(a, b, _, _)| g[[a, b]] / hw);
                Ok(out.into_dyn())
            }
            Layer::Softmax { out } => {
                let p = out.as_ref().ok_or(FormError::Untrained)?;
                let g = grad.into_dimensionality::<Ix2>().map_err(|e| FormError::Numeric(e.to_string()))?;
                let mut dz = Array2::zeros(p.raw_dim());
                for ((pr, gr), mut dr) in p.rows().into_iter().zip(g.rows()).zip(dz.rows_mut()) {
                    let dot: F = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for ((d, &pv), &gv) in dr.iter_mut().zip(pr.iter()).zip(gr.iter()) {
                        *d = pv * (gv - dot);
                    }
                }
                Ok(dz.into_dyn())
            }
            Layer::Upsample { factor, in_shape } => {
                let f = *factor;
                let s = in_shape.as_ref().ok_or(FormError::Untrained)?;
                let g = grad.into_dimensionality::<Ix4>().map_err(|e| FormError::Numeric(e.to_string()))?;
                let mut out = Array4::<F>::zeros((s[0], s[1], s[2], s[3]));
                for ((a, b, i, j), &v) in g.indexed_iter() {
                    out[[a, b, i / f, j / f]] = out[[a, b, i / f, j / f]] + v;
                }
                Ok(out.into_dyn())
            }
        }
    }
}

impl<F: Scalar> Conv2d<F> {
    fn weight2(&self) -> ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("conv weight is 2-D")
    }

    fn forward(&mut self, x: ArrayD<F>, training: bool) -> Result<ArrayD<F>> {
        let x4 = x.into_dimensionality::<Ix4>().map_err(|e| FormError::Numeric(e.to_string()))?;
        let (n, c, h, w) = x4.dim();
        if c != self.in_c {
            return Err(FormError::DimMismatch { expected: vec![self.in_c], got: vec![c] });
        }
        let (ho, wo) = (conv_out(h, self.k, self.stride), conv_out(w, self.k, self.stride));
        let x4 = x4.as_standard_layout();
        let cols = im2col(x4.as_slice().expect("standard layout"), [n, c, h, w], self.k, self.stride, ho, wo);
        let mut out = Array2::<F>::zeros((self.out_c, n * ho * wo));
        general_mat_mul(F::one(), &self.weight2(), &cols, F::zero(), &mut out);
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.value.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out
            .into_shape_with_order((self.out_c, n, ho, wo))
            .expect("contiguous")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        self.cache = training.then_some(ConvCache { cols, in_shape: [n, c, h, w], out_hw: (ho, wo) });
        Ok(out.into_dyn())
    }

    fn backward(&mut self, grad: ArrayD<F>) -> Result<ArrayD<F>> {
        let cache = self.cache.as_ref().ok_or(FormError::Untrained)?;
        let [n, c, h, w] = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let g4 = grad.into_dimensionality::<Ix4>().map_err(|e| FormError::Numeric(e.to_string()))?;
        let g2 = g4
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_c, n * ho * wo))
            .expect("contiguous");
        let mut dw = Array2::<F>::zeros((self.out_c, c * self.k * self.k));
        general_mat_mul(F::one(), &g2, &cache.cols.t(), F::zero(), &mut dw);
        let db = g2.sum_axis(Axis(1));
        let mut dcols = Array2::<F>::zeros(cache.cols.raw_dim());
        general_mat_mul(F::one(), &self.weight2().t(), &g2, F::zero(), &mut dcols);
        let dx = col2im(dcols.as_slice().expect("standard layout"), [n, c, h, w], self.k, self.stride, ho, wo);
        self.weight.grad = Some(dw.into_dyn());
        self.bias.grad = Some(db.into_dyn());
        Ok(dx.into_dyn())
    }
}

/// Patch matrix with rows `(channel, ki, kj)` and columns `(sample, oh, ow)`.
fn im2col<F: Scalar>(xs: &[F], [n, c, h, w]: [usize; 4], k: usize, s: usize, ho: usize, wo: usize) -> Array2<F> {
    let p = k / 2;
    let ncols = n * ho * wo;
    let mut cols = vec![F::zero(); c * k * k * ncols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &xs[base + ih as usize * w..base + (ih as usize + 1) * w];
                        let drow = &mut dst[(ni * ho + oh) * wo..(ni * ho + oh + 1) * wo];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = (ow * s + kj) as isize - p as isize;
                            if iw >= 0 && iw < w as isize {
                                *d = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncols), cols).expect("sized")
}

fn col2im<F: Scalar>(cols: &[F], [n, c, h, w]: [usize; 4], k: usize, s: usize, ho: usize, wo: usize) -> Array4<F> {
    let p = k / 2;
    let ncols = n * ho * wo;
    let mut out = vec![F::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * s + ki) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let srow = &src[(ni * ho + oh) * wo..(ni * ho + oh + 1) * wo];
                        let drow = &mut out[base + ih as usize * w..base + (ih as usize + 1) * w];
                        for (ow, &v) in srow.iter().enumerate() {
                            let iw = (ow * s + kj) as isize - p as isize;
                            if iw >= 0 && iw < w as isize {
                                drow[iw as usize] = drow[iw as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("sized")
}

impl<F: Scalar> Dense<F> {
    fn forward(&mut self, x: ArrayD<F>, training: bool) -> Result<ArrayD<F>> {
        let shape = x.shape().to_vec();
        let n = shape[0];
        let feat: usize = shape[1..].iter().product();
        if feat != self.n_in {
            return Err(FormError::DimMismatch { expected: vec![self.n_in], got: shape[1..].to_vec() });
        }
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, feat))
            .expect("contiguous");
        let wv = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight");
        let mut out = Array2::<F>::zeros((n, self.n_out));
        general_mat_mul(F::one(), &x2, &wv, F::zero(), &mut out);
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-D bias");
        for mut row in out.rows_mut() {
            row.zip_mut_with(&b, |o, &bv| *o = *o + bv);
        }
        self.input = training.then_some((x2, shape));
        Ok(out.into_dyn())
    }

    fn backward(&mut self, grad: ArrayD<F>) -> Result<ArrayD<F>> {
        let (x2, shape) = self.input.as_ref().ok_or(FormError::Untrained)?;
        let g = grad.into_dimensionality::<Ix2>().map_err(|e| FormError::Numeric(e.to_string()))?;
        let wv = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight");
        let dw = x2.t().dot(&g);
        let db = g.sum_axis(Axis(0));
        let dx = g.dot(&wv.t());
        self.weight.grad = Some(dw.into_dyn());
        self.bias.grad = Some(db.into_dyn());
        Ok(dx.into_shape_with_order(IxDyn(shape)).expect("same size"))
    }
}

use ndarray::{ArrayD, Zip};

use super::{Scalar, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Apply one update from the gradients currently stored on `params`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor<F>>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let c1 = F::c(1.0 - self.beta1.powi(self.t));
        let c2 = F::c(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (F::c(self.lr), F::c(self.eps));
        for ((p, m), v) in params.into_iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(g) = p.grad.as_ref() else { continue };
            Zip::from(&mut p.value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

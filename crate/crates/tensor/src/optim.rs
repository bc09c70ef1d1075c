use crate::error::{Result, TensorError};
use crate::layers::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<_> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { beta1, beta2, eps, t: 0, v: m.clone(), m }
    }

    /// Applies one update. `grads[i]` belongs to the `i`-th parameter;
    /// `None` means zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::Config(format!(
                "adam: {} grads, {} params, {} moments",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::of(lr / c1);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else {
                // Moments still decay when a parameter gets no gradient.
                for (m, v) in self.m[i].data_mut().iter_mut().zip(self.v[i].data_mut()) {
                    *m = *m * b1t;
                    *v = *v * b2t;
                }
                let p = params.get_mut(id).data_mut();
                for (x, (m, v)) in p.iter_mut().zip(self.m[i].data().iter().zip(self.v[i].data())) {
                    *x = *x - step * *m / ((*v * inv_c2).sqrt() + eps);
                }
                continue;
            };
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(TensorError::Config(format!("adam: gradient shape for parameter {i}")));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1t * *m + ob1 * gi;
                *v = b2t * *v + ob2 * gi * gi;
                *x = *x - step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

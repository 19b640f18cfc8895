//! Adam with per-parameter first and second moments.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.rows(), p.cols()), Tensor::zeros(p.rows(), p.cols())))
            .unzip();
        Self { config, t: 0, m, v }
    }

    /// One update. Parameters whose gradient is `None` are left untouched,
    /// moments included.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *x -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Tensor::<f64>::row_vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::row_vector(vec![0.3, -5.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        adam.step(0.1, &mut [&mut p], &[Some(&g)]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut a = Tensor::<f64>::row_vector(vec![1.0]);
        let mut b = Tensor::<f64>::row_vector(vec![1.0]);
        let g = Tensor::row_vector(vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default(), [&a, &b]);
        adam.step(0.1, &mut [&mut a, &mut b], &[Some(&g), None]);
        assert_eq!(b.data()[0], 1.0);
        assert_eq!(adam.m[1].data()[0], 0.0);
        assert!(a.data()[0] < 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::<f64>::row_vector(vec![3.0, -4.0]);
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        for _ in 0..2000 {
            let g = p.clone();
            adam.step(0.05, &mut [&mut p], &[Some(&g)]);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2));
    }
}

//! Adam optimizer with bias correction; state is kept per parameter index,
//! so the parameter visit order is part of the training contract.

use super::{ParamTensor, Scalar};
use ndarray::ArrayD;

pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut ParamTensor<T>]) {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(ArrayD::zeros(p.value.raw_dim()));
                self.v.push(ArrayD::zeros(p.value.raw_dim()));
            }
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed under the optimizer");
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let lr_t = self.lr * (1.0 - self.beta2.powi(self.t as i32)).sqrt()
            / (1.0 - self.beta1.powi(self.t as i32));
        let lr_t = T::from_f64(lr_t);
        let eps = T::from_f64(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w = *w - lr_t * *m / (v.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_quadratic() {
        let mut p = ParamTensor::<f64>::new("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = p.value[[0]];
            p.grad[[0]] = 2.0 * x;
            opt.step(&mut [&mut p]);
            p.zero_grad();
        }
        assert!(p.value[[0]].abs() < 1e-2);
    }
}

use std::collections::HashMap;

use crate::tensor::Tensor;

/// Adam with bias correction, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update to every `(name, param, grad)` triple.
    pub fn step<'a>(&mut self, updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = self.lr / bc1;
        for (name, param, grad) in updates {
            assert_eq!(param.shape(), grad.shape(), "grad shape mismatch for {name}");
            let n = param.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let denom = (*v / bc2).sqrt() + self.eps;
                *p -= step_size * *m / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::new(0.1, 0.5, 0.999);
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]);
        let g = Tensor::new(&[2], vec![3.0, -0.01]);
        adam.step([("p", &mut p, &g)]);
        assert!((p.data()[0] - 0.9).abs() < 1e-5);
        assert!((p.data()[1] + 0.9).abs() < 1e-3);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(0.05, 0.9, 0.999);
        let mut p = Tensor::new(&[1], vec![4.0]);
        for _ in 0..500 {
            let g = p.scale(2.0);
            adam.step([("p", &mut p, &g)]);
        }
        assert!(p.data()[0].abs() < 0.05);
    }
}

use serde::{Deserialize, Serialize};

use super::tensor::Parameterized;

/// Adam with bias correction. Moment buffers follow the parameter visit
/// order of the model they were created for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from accumulated gradients; frozen parameters are
    /// left untouched.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_params("", &mut |_, p| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            if !p.frozen {
                let (m, v) = (&mut ms[idx], &mut vs[idx]);
                for k in 0..p.len() {
                    let g = p.grad[k];
                    m[k] = b1 * m[k] + (1.0 - b1) * g;
                    v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    p.value[k] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::{join, Param};

    struct Quadratic {
        x: Param,
    }

    impl Parameterized for Quadratic {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(prefix, "x"), &mut self.x);
        }
    }

    #[test]
    fn minimizes_quadratic_and_respects_freeze() {
        let mut q = Quadratic {
            x: Param::new(vec![2], vec![3.0, -2.0]),
        };
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            q.x.grad = q.x.value.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut q);
        }
        assert!(q.x.value.iter().all(|v| v.abs() < 1e-2));

        q.x.frozen = true;
        let before = q.x.value.clone();
        q.x.grad = vec![1.0, 1.0];
        adam.step(&mut q);
        assert_eq!(q.x.value, before);
    }
}

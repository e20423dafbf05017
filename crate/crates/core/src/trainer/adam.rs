use crate::model::{Gradients, Parameters};

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &Parameters, lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut Parameters, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = self.lr / bc1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= step_size * *mi / ((*vi / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let cfg = ModelConfig::new(4, 8, 4);
        let mut p = Parameters::zeros(&cfg);
        let mut g = Parameters::zeros(&cfg);
        g.embed.data[0] = 3.0;
        g.embed.data[1] = -0.5;
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        opt.update(&mut p, &g);
        assert!((p.embed.data[0] + 0.1).abs() < 1e-6);
        assert!((p.embed.data[1] - 0.1).abs() < 1e-6);
        assert_eq!(p.embed.data[2], 0.0);
    }
}

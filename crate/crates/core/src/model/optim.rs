use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay over a fixed subset of coordinates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    indices: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, indices: Vec<usize>) -> Self {
        let n = indices.len();
        AdamW {
            config,
            indices,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Updates `params[indices]` in place; other coordinates are never written.
    /// Updated values are rounded to `f32` precision.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = &self.config;
        if c.learning_rate == 0.0 {
            return;
        }
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, &i) in self.indices.iter().enumerate() {
            let g = grad[i];
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g;
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            let mut p = params[i];
            p -= c.learning_rate * c.weight_decay * p;
            p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            params[i] = p as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic_on_selected_coordinates() {
        let mut p = vec![3.0, -2.0, 5.0];
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            vec![0, 1],
        );
        for _ in 0..300 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 0.05 && p[1].abs() < 0.05);
        assert_eq!(p[2], 5.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = vec![0.1, 0.2];
        let before = p.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.0,
                weight_decay: 0.1,
                ..Default::default()
            },
            vec![0, 1],
        );
        opt.step(&mut p, &[1.0, 1.0]);
        assert_eq!(p, before);
    }
}

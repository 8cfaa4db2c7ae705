//! Adam with bias correction. Used for marginal-likelihood ascent on kernel
//! hyperparameters and for cross-entropy descent on aggregation weights.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates the moment estimates with `grad` and returns the descent
    /// direction `lr · m̂ / (√v̂ + ε)`. The caller subtracts it to minimise or
    /// adds it to maximise.
    pub fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "gradient length changed");
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut out = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            out[i] = c.learning_rate * mh / (vh.sqrt() + c.eps);
        }
        out
    }

    /// One minimisation step applied in place.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        let d = self.direction(grad);
        for (p, s) in params.iter_mut().zip(d) {
            *p -= s;
        }
    }

    /// One maximisation step applied in place.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        let d = self.direction(grad);
        for (p, s) in params.iter_mut().zip(d) {
            *p += s;
        }
    }
}

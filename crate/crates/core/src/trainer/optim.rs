use crate::diffkit::ParamStore;
use crate::scalar::Scalar;

/// Cosine annealing from `lr0` at step 0 to exactly `floor` at the final
/// step `total - 1`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, floor: f64) -> f64 {
    if total <= 1 {
        return floor;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to tensors of rank ≥ 2 only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with moments kept in f64 regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |_| Vec::new();
        let n = store.len();
        let mut s = Self {
            config,
            m: (0..n).map(zeros).collect(),
            v: (0..n).map(zeros).collect(),
            steps: 0,
        };
        for (i, (_, p)) in store.iter().enumerate() {
            s.m[i] = vec![0.0; p.value.len()];
            s.v[i] = vec![0.0; p.value.len()];
        }
        s
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.steps += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let decay = if p.value.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let grads: Vec<f64> = p.grad.data().iter().map(|g| g.as_f64()).collect();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut x = w.as_f64();
                x -= lr * decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = T::lit(x);
            }
        }
    }
}

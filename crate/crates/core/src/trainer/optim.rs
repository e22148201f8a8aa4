use super::graph::{Gradient, Trainable};

/// Linear warm-up to `peak`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Learning rate for the (0-based) `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_len = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_len == 0 {
            return self.peak;
        }
        let progress = (step - self.warmup_steps) as f64 / decay_len as f64;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Trainable + ?Sized>(head: &T) -> Self {
        let zeros: Vec<Vec<f64>> = head.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<T: Trainable + ?Sized>(&mut self, head: &mut T, grad: &Gradient, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in head
            .blocks_mut()
            .into_iter()
            .zip(&grad.blocks)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            peak: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(109) < 1e-3);
        for step in 10..109 {
            assert!(s.lr(step + 1) <= s.lr(step));
        }
    }

    struct Quad(Vec<f64>);
    impl Trainable for Quad {
        fn blocks(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
        fn block_names(&self) -> Vec<&'static str> {
            vec!["x"]
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut q = Quad(vec![3.0, -2.0]);
        let mut opt = Adam::new(&q);
        for _ in 0..2000 {
            let g = Gradient {
                blocks: vec![q.0.iter().map(|x| 2.0 * x).collect()],
            };
            opt.update(&mut q, &g, 0.01);
        }
        assert!(q.0.iter().all(|x| x.abs() < 1e-2), "{:?}", q.0);
    }
}

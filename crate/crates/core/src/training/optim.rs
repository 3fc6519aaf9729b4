use crate::numkernel::{ParamSet, Tensor2};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must follow the parameter visit order.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[Tensor2]) {
        if self.first.is_empty() {
            params.visit("", &mut |_, t| {
                self.first.push(Tensor2::zeros(t.rows(), t.cols()));
                self.second.push(Tensor2::zeros(t.rows(), t.cols()));
            });
        }
        assert_eq!(grads.len(), self.first.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let mut k = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut("", &mut |_, p| {
            let g = &grads[k];
            let (m, v) = (&mut first[k], &mut second[k]);
            for idx in 0..p.len() {
                let gi = g.data()[idx];
                let mi = b1 * m.data()[idx] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[idx] + (1.0 - b2) * gi * gi;
                m.data_mut()[idx] = mi;
                v.data_mut()[idx] = vi;
                let w = &mut p.data_mut()[idx];
                *w -= lr * wd * *w;
                *w -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
            k += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor2);

    impl ParamSet for One {
        fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a Tensor2)) {
            f(format!("{p}x"), &self.0);
        }
        fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
            f(format!("{p}x"), &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = One(Tensor2::scalar(1.0));
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, &[Tensor2::scalar(2.0)]);
        assert!((p.0.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = One(Tensor2::scalar(2.0));
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut p, &[Tensor2::scalar(0.0)]);
        assert!((p.0.data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = One(Tensor2::scalar(3.0));
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            let g = Tensor2::scalar(2.0 * p.0.data()[0]);
            opt.step(&mut p, &[g]);
        }
        assert!(p.0.data()[0].abs() < 1e-2);
    }
}

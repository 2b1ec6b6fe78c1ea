use crate::{Gradients, ParamSet, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam bound to the layout of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, steps: 0, first: zeros.clone(), second: zeros }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// Restore checkpointed state. Shapes must match the current layout.
    pub fn restore(&mut self, steps: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> crate::Result<()> {
        for (cur, new) in self.first.iter().zip(&first).chain(self.second.iter().zip(&second)) {
            if cur.shape() != new.shape() {
                return Err(crate::AutogradError::Shape { expected: cur.shape().to_vec(), got: new.shape().to_vec() });
            }
        }
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(crate::AutogradError::InvalidArgument("adam state length".into()));
        }
        self.steps = steps;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Step with the gradients recorded for `params` (zero where absent).
    pub fn apply(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        let g = grads.for_set(params);
        self.step(params, &g);
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.steps += 1;
        let c = self.config;
        let t = self.steps as f64;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let step_size = T::lit(c.lr / (1.0 - c.beta1.powf(t)));
        let bias2_sqrt = T::lit((1.0 - c.beta2.powf(t)).sqrt());
        let eps = T::lit(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            assert_eq!(p.shape(), g.shape(), "gradient shape for {i}");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *w -= step_size * *mv / (vv.sqrt() / bias2_sqrt + eps);
            }
        }
    }
}

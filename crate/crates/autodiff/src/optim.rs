use crate::var::{Tensor, Var};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState,
}

/// Moment estimates and step count; everything needed to resume an [`Adam`] exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState) {
        self.state = state;
    }

    /// Applies one update; `params` and `grads` must keep the same order across calls.
    pub fn step(&mut self, params: &mut [&mut Var], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.state.first.is_empty() {
            self.state.first = grads.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
            self.state.second = self.state.first.clone();
        }
        assert_eq!(self.state.first.len(), params.len(), "parameter set changed between steps");
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (param, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut next = param.value().clone();
            ndarray::Zip::from(&mut next).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
            **param = Var::param(next);
        }
    }
}

/// Plain gradient descent step `p <- p - lr * g`.
pub fn sgd_step(params: &mut [&mut Var], grads: &[Tensor], lr: f64) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    for (param, g) in params.iter_mut().zip(grads) {
        let next = param.value() - &(g * lr);
        **param = Var::param(next);
    }
}

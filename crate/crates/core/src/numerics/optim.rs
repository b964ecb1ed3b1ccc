use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter of `store` that holds
    /// an accumulated gradient, then drops the gradients. Parameters without a
    /// gradient buffer are left untouched, weight decay included.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), store.len(), "optimizer bound to a different store");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.value.clear_grad();
        }
    }
}

/// Learning-rate / weight-decay pairs by dataset style and training phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimProfile {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetStyle {
    Breakfast,
    Salads,
    Gtea,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    FullSupervision,
    Contrast,
    ClassifyHeads,
    ClassifyBackbone,
}

impl OptimProfile {
    pub fn for_dataset(style: DatasetStyle, phase: Phase) -> Self {
        use DatasetStyle::*;
        use Phase::*;
        let wd = match style {
            Breakfast => 3e-3,
            Salads => 1e-3,
            Gtea => 3e-4,
        };
        let (lr, epochs, batch_size) = match (phase, style) {
            (FullSupervision, Breakfast) => (1e-4, 600, 100),
            (FullSupervision, Salads) => (3e-4, 600, 25),
            (FullSupervision, Gtea) => (5e-4, 600, 11),
            (Contrast, Breakfast) => (1e-3, 100, 100),
            (Contrast, Salads) => (1e-3, 100, 50),
            (Contrast, Gtea) => (1e-3, 100, 21),
            (ClassifyHeads, Breakfast) => (1e-2, 700, 100),
            (ClassifyHeads, _) => (1e-2, 1800, 5),
            (ClassifyBackbone, Breakfast) => (1e-5, 700, 100),
            (ClassifyBackbone, _) => (1e-5, 1800, 5),
        };
        OptimProfile {
            lr,
            weight_decay: wd,
            epochs,
            batch_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let before = store.get(id).clone();
        let mut opt = Adam::new(0.1, 0.0);
        store.get_mut(id).grad_mut();
        opt.step(&mut store);
        assert_eq!(store.get(id).data(), before.data());
    }

    #[test]
    fn first_step_on_square_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0), true);
        let mut g = Graph::new();
        let x = store.bind(&mut g, id).unwrap();
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        store.accumulate_grads(&g);
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut store);
        // m̂ = g, v̂ = g², update = lr·g/|g| = 0.1
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn breakfast_full_profile() {
        let p = OptimProfile::for_dataset(DatasetStyle::Breakfast, Phase::FullSupervision);
        assert_eq!(p.lr, 1e-4);
        assert_eq!(p.weight_decay, 3e-3);
        assert_eq!(p.epochs, 600);
        assert_eq!(p.batch_size, 100);
        let c = OptimProfile::for_dataset(DatasetStyle::Salads, Phase::ClassifyBackbone);
        assert_eq!((c.lr, c.weight_decay, c.epochs), (1e-5, 1e-3, 1800));
    }
}

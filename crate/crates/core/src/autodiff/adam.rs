use super::nn::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Moments exist only for trainable entries.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 0.0002;

    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let moments = || {
            store
                .iter()
                .map(|(_, e)| e.trainable.then(|| Tensor::zeros(e.value.shape())))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: moments(),
            second: moments(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is aligned with the store's entries; every
    /// trainable entry must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} entries, store has {}, gradients {}",
                self.first.len(),
                store.len(),
                grads.len()
            )));
        }
        for (id, entry) in store.iter() {
            if entry.trainable && grads[id.index()].is_none() {
                return Err(Error::MissingGradient(entry.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (Some(g), Some(m), Some(v)) = (g, &mut self.first[i], &mut self.second[i]) else {
                continue;
            };
            let p = store.value_mut_by_index(i);
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::default();
        let id = store.add("x", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.0002);
        adam.step(&mut store, &[Some(Tensor::scalar(3.7))]).unwrap();
        // mhat = g, vhat = g^2 -> step = lr * g / (|g| + eps)
        let expected = 1.0 - 0.0002 * 3.7 / (3.7 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_does_not_move() {
        let mut store = ParamStore::default();
        let id = store.add("x", Tensor::full(&[3], 0.25));
        let mut adam = Adam::new(&store, 0.0002);
        for _ in 0..5 {
            adam.step(&mut store, &[Some(Tensor::zeros(&[3]))]).unwrap();
        }
        assert_eq!(store.value(id).data(), &[0.25; 3]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::default();
        store.add("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.1);
        assert!(matches!(adam.step(&mut store, &[None]), Err(Error::MissingGradient(n)) if n == "w"));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::default();
        let id = store.add("x", Tensor::new(vec![3], vec![0.3, -0.2, 0.1]).unwrap());
        let mut adam = Adam::new(&store, 0.01);
        for _ in 0..2000 {
            let x = store.value(id).clone();
            let g: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
            adam.step(&mut store, &[Some(Tensor::new(vec![3], g).unwrap())]).unwrap();
        }
        let f: f64 = store.value(id).data().iter().map(|v| v * v).sum();
        assert!(f < 1e-6, "f = {f}");
    }
}

use super::params::{Archive, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// RMSprop without momentum or centering:
/// `v <- a v + (1 - a) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp<T: Real = f32> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: Vec<Option<Vec<T>>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, alpha: 0.99, eps: 1e-8, square_avg: Vec::new() }
    }

    /// Applies one update to every trainable entry with a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.square_avg.len() < store.len() {
            self.square_avg.resize(store.len(), None);
        }
        let (lr, alpha, eps) = (T::from_f64_lossy(self.lr), T::from_f64_lossy(self.alpha), T::from_f64_lossy(self.eps));
        let one = T::one();
        for (id, grad) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            grad.expect_shape(store.get(id).shape())?;
            let avg = self.square_avg[id.index()].get_or_insert_with(|| vec![T::zero(); grad.numel()]);
            let param = store.get_mut(id).data_mut();
            for ((p, v), &g) in param.iter_mut().zip(avg.iter_mut()).zip(grad.data()) {
                *v = alpha * *v + (one - alpha) * g * g;
                *p = *p - lr * g / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl RmsProp<f32> {
    pub fn export_state(&self, prefix: &str, store: &ParamStore<f32>, archive: &mut Archive) {
        for id in store.ids() {
            if let Some(Some(avg)) = self.square_avg.get(id.index()) {
                let t = Tensor::new(store.get(id).shape(), avg.clone()).expect("state matches parameter");
                archive.tensors.push((format!("{prefix}{}", store.name(id)), t));
            }
        }
    }

    pub fn import_state(&mut self, prefix: &str, store: &ParamStore<f32>, archive: &Archive) -> Result<()> {
        self.square_avg = vec![None; store.len()];
        for id in store.ids() {
            if let Some(t) = archive.get(&format!("{prefix}{}", store.name(id))) {
                t.expect_shape(store.get(id).shape())?;
                self.square_avg[id.index()] = Some(t.data().to_vec());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_over_sqrt_one_minus_alpha() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::full(&[2], 1.0), true);
        let buf = s.add("b", Tensor::full(&[1], 3.0), false);
        let mut opt = RmsProp::new(0.01);
        let g = Some(Tensor::new(&[2], vec![2.0, -4.0]).unwrap());
        opt.step(&mut s, &[g, Some(Tensor::full(&[1], 1.0))]).unwrap();
        // v = 0.01 g^2 -> step = lr * g / (0.1 |g|) = 0.1 * sign(g)
        let p = s.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 1.1).abs() < 1e-6, "{p:?}");
        assert_eq!(s.get(buf).data(), &[3.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::full(&[1], 5.0), true);
        let mut opt = RmsProp::new(0.05);
        for _ in 0..500 {
            let x = s.get(id).data()[0];
            opt.step(&mut s, &[Some(Tensor::full(&[1], 2.0 * (x - 1.0)))]).unwrap();
        }
        assert!((s.get(id).data()[0] - 1.0).abs() < 0.1);
    }
}

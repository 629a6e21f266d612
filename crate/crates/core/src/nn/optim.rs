use super::tensor::{Element, Tensor};
use super::ParamStore;

/// Adam with decoupled weight decay. Decay applies to weight matrices and
/// kernels only, not to biases or normalisation parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update `stores` in order with matching gradient lists.
    pub fn step<E: Element>(&mut self, stores: &mut [&mut ParamStore<E>], grads: &[Vec<Option<Tensor<E>>>]) {
        assert_eq!(stores.len(), grads.len());
        if self.m.is_empty() {
            for s in stores.iter() {
                for (_, t) in s.iter() {
                    self.m.push(vec![0.0; t.len()]);
                    self.v.push(vec![0.0; t.len()]);
                }
            }
        }
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut slot = 0;
        for (store, gs) in stores.iter_mut().zip(grads) {
            let ids: Vec<_> = store.ids().collect();
            assert_eq!(ids.len(), gs.len());
            for (id, g) in ids.into_iter().zip(gs) {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                slot += 1;
                let Some(g) = g else { continue };
                let p = store.get_mut(id);
                let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
                for ((pi, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                    let gi = gi.as_f64();
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                    let cur = pi.as_f64();
                    *pi = E::from_f64(cur - self.lr * (update + decay * cur));
                }
            }
        }
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<E: Element>(grads: &mut [Vec<Option<Tensor<E>>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flatten()
        .map(|t| t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = E::from_f64(max_norm / norm);
        for t in grads.iter_mut().flatten().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(vec![1, 3], vec![2.0, -1.0, 0.5]));
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..400 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let sq = g.square(w);
            let l = g.mean(sq);
            let grads = g.backward(l).for_store(&store);
            opt.step(&mut [&mut store], &[grads]);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.05), "{:?}", store.get(id));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads = vec![vec![Some(Tensor::<f32>::new(vec![2], vec![3.0, 4.0])), None]];
        let n = clip_global_norm(&mut grads, 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        let t = grads[0][0].as_ref().unwrap();
        assert!((t.data()[0] - 0.6).abs() < 1e-6 && (t.data()[1] - 0.8).abs() < 1e-6);
    }
}

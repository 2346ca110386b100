//! SGD with classical momentum.

use crate::tensor::{Element, GradStore, ParamSet, Tensor};

/// Classical momentum:
///
/// ```text
/// v <- m * v - lr * g
/// p <- p + v
/// ```
///
/// Parameters whose gradient is absent this step still move by the decayed
/// velocity.
#[derive(Clone, Debug)]
pub struct SgdMomentum<E> {
    momentum: E,
    velocity: Vec<Vec<E>>,
}

impl<E: Element> SgdMomentum<E> {
    pub fn new(params: &ParamSet<E>, momentum: E) -> Self {
        let velocity = (0..params.len()).map(|id| vec![E::zero(); params.get(id).numel()]).collect();
        SgdMomentum { momentum, velocity }
    }

    pub fn momentum(&self) -> E {
        self.momentum
    }

    pub fn velocity(&self, id: usize) -> &[E] {
        &self.velocity[id]
    }

    pub fn step(&mut self, params: &mut ParamSet<E>, grads: &GradStore<E>, lr: E) {
        assert_eq!(self.velocity.len(), params.len(), "optimizer does not match params");
        for id in 0..params.len() {
            let v = &mut self.velocity[id];
            let g = grads.get(id);
            for (i, vi) in v.iter_mut().enumerate() {
                let gi = g.map_or(E::zero(), |g| g[i]);
                *vi = self.momentum * *vi - lr * gi;
            }
            let updated: Vec<E> =
                params.get(id).data().iter().zip(v.iter()).map(|(&p, &vi)| p + vi).collect();
            params.set(id, Tensor::new(params.get(id).shape().to_vec(), updated).expect("shape"));
        }
    }
}

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};

/// SGD with momentum and decoupled-into-gradient weight decay, matching the
/// usual `g += wd * p; v = mu * v + g; p -= lr * v` update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
    frozen: BTreeSet<ParamId>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen.insert(id);
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            if self.frozen.contains(&id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= self.lr * *vv;
            }
        }
    }
}

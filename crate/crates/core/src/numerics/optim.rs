use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

/// Plain momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `v ← μ·v + g + λ·w; w ← w − η·v` for every parameter in `groups`,
    /// then clears all gradients.
    pub fn step(&self, store: &mut ParamStore, groups: &[ParamGroup]) -> Result<()> {
        for p in store.iter_mut() {
            if !groups.contains(&p.group) || p.group == ParamGroup::Buffer {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                return Err(Error::MissingGradient(p.name.clone()));
            };
            let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, self.lr as f32);
            let w = p.value.data_mut();
            let v = p.momentum.data_mut();
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        store.zero_grads();
        Ok(())
    }
}

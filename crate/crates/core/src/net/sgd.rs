use std::collections::BTreeMap;

use super::{Gradients, NetError, Network, Result};

/// SGD with heavy-ball momentum: `v <- momentum v + g`, `theta <- theta - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }
}

/// Applies one update to every parameter in name order. Gradients are all
/// checked for finiteness before anything is modified.
pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut SgdState) -> Result<()> {
    for (name, g) in &grads.params {
        if !g.all_finite() {
            return Err(NetError::NonFiniteGradient(name.clone()));
        }
    }
    for (name, theta) in net.parameters_mut() {
        let Some(g) = grads.params.get(&name) else {
            continue;
        };
        if g.len() != theta.len() {
            return Err(NetError::Shape {
                index: usize::MAX,
                expected: vec![theta.len()],
                actual: g.shape().to_vec(),
            });
        }
        let v = state.velocity.entry(name).or_insert_with(|| vec![0.0; theta.len()]);
        for ((t, v), &g) in theta.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *v = state.momentum * *v + g;
            *t -= state.lr * *v;
        }
    }
    Ok(())
}

use crate::error::{Error, Result};
use crate::models::{Gradients, Network, ParamKind};
use crate::tensor::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay, in the form
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
///
/// Decay only touches parameters flagged `Trainable { decay: true }`
/// (conv, refocusing and classifier weights; not biases or batchnorm).
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum: T::of(momentum), weight_decay: T::of(weight_decay), velocity: Vec::new() }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: T) -> Result<()> {
        let mut slot = 0;
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        net.visit_params_mut(|info, p| {
            let decay = match info.kind {
                ParamKind::Trainable { decay } => decay,
                _ => return Ok(()),
            };
            let g = grads
                .get(info.layer, info.role)
                .ok_or_else(|| Error::Shape(format!("no gradient for trainable `{}`", info.key())))?;
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient for `{}` has {} values, expected {}", info.key(), g.len(), p.len())));
            }
            if velocity.len() == slot {
                velocity.push(vec![T::zero(); p.len()]);
            }
            let v = &mut velocity[slot];
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = if decay { gi + wd * *pi } else { gi };
                *vi = mu * *vi + d;
                *pi -= lr * *vi;
            }
            slot += 1;
            Ok(())
        })
    }
}

//! SGD with momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// One in-place update of a single parameter:
/// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "param {} / grad {} / velocity {} lengths differ",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a whole [`ParamStore`], one zero-initialized velocity
/// slot per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: (0..params.len()).map(|i| vec![0.0; params.get(i).numel()]).collect(),
        }
    }

    /// Updates every parameter that carries a gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd",
                format!("{} velocity slots for {} parameters", self.velocity.len(), params.len()),
            ));
        }
        for (idx, vel) in self.velocity.iter_mut().enumerate() {
            let t = params.get_mut(idx);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            sgd_step(t.data_mut(), &grad, vel, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_subtracts_scaled_grad() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn weight_decay_shrinks_params() {
        let lr = 0.05;
        let mut p = vec![2.0, -4.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, lr, 0.0, 3e-4).unwrap();
        assert!((p[0] - 2.0 * (1.0 - lr * 3e-4)).abs() < 1e-15);
        assert!((p[1] + 4.0 * (1.0 - lr * 3e-4)).abs() < 1e-15);
    }

    #[test]
    fn momentum_second_update_is_one_point_nine() {
        let (lr, g) = (0.1, 0.3);
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        let after_first = p[0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0).unwrap();
        assert!(((after_first - p[0]) - lr * 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut p = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        assert!(sgd_step(&mut p, &[0.0; 2], &mut v, 0.1, 0.9, 0.0).is_err());
    }
}

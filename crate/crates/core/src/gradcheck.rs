//! Central finite-difference gradient check.

use crate::error::Result;
use crate::mask;
use crate::model::{BnMode, ForwardPass, MimoConfig, MimoModel};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train;

/// Compares analytic gradients of `loss` against
/// `(L(θ+ε) − L(θ−ε)) / 2ε` on `sample_count` randomly chosen scalar
/// parameters and returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `loss` records a forward pass on the supplied tape (binding parameters via
/// [`Tape::param`] with their store index) and returns the scalar loss node.
/// It must be deterministic: identical parameters give an identical loss.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    mut loss: F,
    epsilon: f64,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let total = params.numel();
    if sample_count == 0 || total == 0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let out = loss(params, &mut tape)?;
    tape.backward(out)?;
    let analytic: Vec<Option<Vec<f64>>> = (0..params.len()).map(|i| tape.param_grad(i)).collect();
    drop(tape);

    let mut eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(params, &mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    for _ in 0..sample_count {
        let mut flat = rng.below(total);
        let mut slot = 0;
        while flat >= params.get(slot).numel() {
            flat -= params.get(slot).numel();
            slot += 1;
        }
        let original = params.get(slot).data()[flat];
        params.get_mut(slot).data_mut()[flat] = original + epsilon;
        let plus = eval(params);
        params.get_mut(slot).data_mut()[flat] = original - epsilon;
        let minus = eval(params);
        params.get_mut(slot).data_mut()[flat] = original;
        let numeric = (plus? - minus?) / (2.0 * epsilon);
        let a = analytic[slot].as_ref().map_or(0.0, |g| g[flat]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Settings for [`model_gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelCheck {
    pub batch: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub bn_mode: BnMode,
}

impl Default for ModelCheck {
    fn default() -> Self {
        Self {
            batch: 4,
            samples: 64,
            epsilon: 1e-6,
            seed: 0,
            bn_mode: BnMode::Batch,
        }
    }
}

/// Gradient check of the full training loss (encoders, masked mixing, core,
/// unmixing, classifiers, weighted cross-entropy) on random 32×32 inputs.
/// Classifier weights are redrawn at random first; zero heads would block
/// every gradient into the core. Fading modes are checked at `r = 0.5`.
pub fn model_gradcheck(config: &MimoConfig, check: ModelCheck) -> Result<f64> {
    let mut rng = Rng::new(check.seed);
    let mut model = MimoModel::build(config.clone(), &mut rng)?;
    for i in 0..config.m {
        let idx = model.params().index_of(&format!("classifier{i}.weight")).expect("classifier exists");
        let w = model.params_mut().get_mut(idx);
        let std = (2.0 / w.shape()[1] as f64).sqrt();
        w.data_mut().iter_mut().for_each(|v| *v = rng.normal() * std);
    }
    let n = check.batch;
    let x0 = Tensor::from_fn(&[n, 3, 32, 32], |_| rng.normal());
    let x1 = Tensor::from_fn(&[n, 3, 32, 32], |_| rng.normal());
    let y0: Vec<usize> = (0..n).map(|_| rng.below(config.num_classes)).collect();
    let y1: Vec<usize> = (0..n).map(|_| rng.below(config.num_classes)).collect();
    let masks = (0..n)
        .map(|_| {
            let lambda = mask::sample_mixing_ratio(&mut rng, 2.0)?;
            mask::sample_cutmix_mask(32, 32, lambda, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let kappas: Vec<f64> = masks.iter().map(|m| m.kappa()).collect();
    let r = match config.unmix_mode {
        mask::UnmixMode::Fadeout { .. } => 0.5,
        _ => 0.0,
    };
    let mut params = model.params().clone();
    let model = &model;
    finite_diff_check(
        &mut params,
        |p, tape| {
            let a = tape.constant(x0.clone());
            let b = tape.constant(x1.clone());
            let mut pass = ForwardPass::new(model, p, tape, check.bn_mode);
            let out = pass.forward_train(&[a, b], &masks, r)?;
            train::subnetwork_loss(pass.tape(), &out.logits, &y0, &y1, &kappas, false)
        },
        check.epsilon,
        check.samples,
        &mut rng,
    )
}

//! Batch construction, loss weighting, learning-rate schedule, the training
//! loop and evaluation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::mask::{self, MaskPair};
use crate::model::{BnMode, MimoModel};
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of recent step losses kept for divergence reports.
const LOSS_TAIL: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Input pairs per optimizer step.
    pub batch_size: usize,
    /// Independent shuffles per epoch (`b`).
    pub batch_repetition: usize,
    /// Probability that a pair is replaced by `(x, x)`.
    pub input_repetition_rate: f64,
    pub epochs: usize,
    /// Numerator of `(num / b) · (batch_size / 128)`.
    pub base_lr_numerator: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub rebalance_loss: bool,
    /// Beta(α, α) parameter of the CutMix area ratio.
    pub mix_alpha: f64,
    pub seed: u64,
    /// Random crop and flip on training batches.
    pub augment: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            batch_repetition: 2,
            input_repetition_rate: 0.1,
            epochs: 30,
            base_lr_numerator: 0.1,
            decay_steps: vec![15, 23],
            decay_factor: 0.1,
            weight_decay: 3e-4,
            momentum: 0.9,
            warmup_epochs: 1,
            rebalance_loss: false,
            mix_alpha: 2.0,
            seed: 0,
            augment: false,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push(format!("batch_size must be at least 2 (batchnorm), got {}", self.batch_size));
        }
        if self.batch_repetition < 1 {
            v.push("batch_repetition must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.input_repetition_rate) {
            v.push(format!("input_repetition_rate {} not in [0, 1]", self.input_repetition_rate));
        }
        if !(self.base_lr_numerator >= 0.0 && self.base_lr_numerator.is_finite()) {
            v.push(format!("base_lr_numerator {} must be finite and non-negative", self.base_lr_numerator));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            v.push(format!("decay_steps {:?} must be strictly increasing", self.decay_steps));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            v.push(format!("decay_factor {} must be positive", self.decay_factor));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.mix_alpha > 0.0 && self.mix_alpha.is_finite()) {
            v.push(format!("mix_alpha {} must be positive", self.mix_alpha));
        }
        if self.eval_batch_size < 1 {
            v.push("eval_batch_size must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() { Ok(()) } else { Err(Error::Config(v)) }
    }

    /// `(num / b) · (batch_size / 128)`.
    pub fn base_lr(&self) -> f64 {
        self.base_lr_numerator / self.batch_repetition as f64 * (self.batch_size as f64 / 128.0)
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug)]
pub struct SeedStreams {
    pub model: Rng,
    pub data: Rng,
    pub train: Rng,
    /// Diagnostics sampling (variance-sweep mask).
    pub analysis: Rng,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        let mut root = Rng::new(seed);
        Self {
            model: root.fork(),
            data: root.fork(),
            train: root.fork(),
            analysis: root.fork(),
        }
    }
}

/// One optimizer step worth of pairs.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub idx0: Vec<usize>,
    pub idx1: Vec<usize>,
    pub masks: Vec<MaskPair>,
    /// Whether the pair was overwritten with the same image twice.
    pub repeated: Vec<bool>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.idx0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx0.is_empty()
    }

    pub fn kappas(&self) -> Vec<f64> {
        self.masks.iter().map(MaskPair::kappa).collect()
    }
}

/// One epoch of pairs over a dataset of `n` examples with `h × w` images.
/// Each input stream concatenates `b` independent permutations, the streams
/// are zipped, a fraction `ρ` of pairs becomes `(x, x)`, and each pair gets
/// its own CutMix mask. A trailing partial batch is dropped.
pub fn build_batches(n: usize, image: (usize, usize), config: &TrainConfig, rng: &mut Rng) -> Result<Vec<PairBatch>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot build batches from an empty dataset".into()));
    }
    if n < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset of {n} examples is smaller than batch_size {}",
            config.batch_size
        )));
    }
    let b = config.batch_repetition.max(1);
    let stream0: Vec<usize> = (0..b).flat_map(|_| rng.permutation(n)).collect();
    let mut stream1: Vec<usize> = (0..b).flat_map(|_| rng.permutation(n)).collect();
    let mut repeated = vec![false; stream0.len()];
    for (i, rep) in repeated.iter_mut().enumerate() {
        if rng.bernoulli(config.input_repetition_rate) {
            stream1[i] = stream0[i];
            *rep = true;
        }
    }
    let full = stream0.len() / config.batch_size;
    let mut batches = Vec::with_capacity(full);
    for k in 0..full {
        let range = k * config.batch_size..(k + 1) * config.batch_size;
        let masks = range
            .clone()
            .map(|_| {
                let lambda = mask::sample_mixing_ratio(rng, config.mix_alpha)?;
                mask::sample_cutmix_mask(image.0, image.1, lambda, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        batches.push(PairBatch {
            idx0: stream0[range.clone()].to_vec(),
            idx1: stream1[range.clone()].to_vec(),
            masks,
            repeated: repeated[range].to_vec(),
        });
    }
    Ok(batches)
}

/// Per-example loss weights `(2κ', 2(1 − κ'))` with `κ' = κ`, or
/// `(κ + 0.5) / 2` when rebalancing.
pub fn loss_weights(kappa: f64, rebalance: bool) -> (f64, f64) {
    let k = if rebalance { (kappa + 0.5) / 2.0 } else { kappa };
    (2.0 * k, 2.0 * (1.0 - k))
}

/// Batch mean of `w0·CE(logits0, y0) + w1·CE(logits1, y1)`.
pub fn subnetwork_loss(
    tape: &mut Tape,
    logits: &[Var],
    labels0: &[usize],
    labels1: &[usize],
    kappas: &[f64],
    rebalance: bool,
) -> Result<Var> {
    if logits.len() != 2 {
        return Err(Error::Unsupported(format!("loss weighting needs 2 heads, got {}", logits.len())));
    }
    if let Some(k) = kappas.iter().find(|k| !(0.0..=1.0).contains(*k)) {
        return Err(Error::InvalidArgument(format!("mixing ratio {k} not in [0, 1]")));
    }
    let (w0, w1): (Vec<f64>, Vec<f64>) = kappas.iter().map(|&k| loss_weights(k, rebalance)).unzip();
    let l0 = tape.weighted_cross_entropy(logits[0], labels0, &w0)?;
    let l1 = tape.weighted_cross_entropy(logits[1], labels1, &w1)?;
    tape.add(l0, l1)
}

/// Learning rate for a step: linear warmup from 0 over `warmup_epochs`
/// worth of steps, times `decay_factor` for every decay epoch `≤ epoch`.
pub fn lr_at(config: &TrainConfig, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
    let decays = config.decay_steps.iter().filter(|&&d| d <= epoch).count();
    let lr = config.base_lr() * config.decay_factor.powi(decays as i32);
    let warmup = config.warmup_epochs * steps_per_epoch;
    let step = epoch * steps_per_epoch + step_in_epoch;
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else {
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent.
    pub ensemble_accuracy: f64,
    pub individual_accuracies: Vec<f64>,
    pub mean_individual_accuracy: f64,
    /// Mean negative log-likelihood of the ensemble probabilities.
    pub nll: f64,
}

fn top1(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = probs.dims2()?;
    if n != labels.len() {
        return Err(Error::shape("accuracy", format!("{n} rows for {} labels", labels.len())));
    }
    let hits = probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
            best.0 == y
        })
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Metrics from probability tables (`N × K` each). Ties go to the lowest class.
pub fn eval_from_probs(ensemble: &Tensor, per_subnet: &[Tensor], labels: &[usize]) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one example".into()));
    }
    let (_, k) = ensemble.dims2()?;
    let ensemble_accuracy = top1(ensemble, labels)?;
    let individual_accuracies = per_subnet.iter().map(|p| top1(p, labels)).collect::<Result<Vec<_>>>()?;
    let mean_individual_accuracy = individual_accuracies.iter().sum::<f64>() / individual_accuracies.len().max(1) as f64;
    let mut nll = 0.0;
    for (row, &y) in ensemble.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        nll -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    Ok(EvalResult {
        ensemble_accuracy,
        individual_accuracies,
        mean_individual_accuracy,
        nll: nll / labels.len() as f64,
    })
}

/// Inference over `dataset` in chunks of `batch_size` images.
pub fn evaluate(model: &MimoModel, dataset: &Dataset, batch_size: usize) -> Result<EvalResult> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one example".into()));
    }
    let k = model.config().num_classes;
    let m = model.config().m;
    let mut ens = Vec::with_capacity(n * k);
    let mut subs = vec![Vec::with_capacity(n * k); m];
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let x = dataset.gather(&idx, None)?;
        let pred = model.forward_inference(&x)?;
        ens.extend_from_slice(pred.ensemble.data());
        for (acc, p) in subs.iter_mut().zip(&pred.per_subnet) {
            acc.extend_from_slice(p.data());
        }
    }
    let ensemble = Tensor::new(vec![n, k], ens)?;
    let per_subnet = subs
        .into_iter()
        .map(|d| Tensor::new(vec![n, k], d))
        .collect::<Result<Vec<_>>>()?;
    eval_from_probs(&ensemble, &per_subnet, dataset.labels())
}

/// Context of a non-finite training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceReport {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Most recent step losses, oldest first, ending with the offending one.
    pub loss_tail: Vec<f64>,
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "non-finite loss at epoch {} step {} (lr {}); recent losses {:?}",
            self.epoch, self.step, self.lr, self.loss_tail
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub eval: EvalResult,
    pub share_rate_classifier: f64,
    pub share_rate_encoder: f64,
    pub r_fadeout: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,train_loss,ens_acc,ind_acc_0,ind_acc_1,share_rate_classifier,share_rate_encoder,r_fadeout";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let ind = |i: usize| self.eval.individual_accuracies.get(i).copied().unwrap_or(f64::NAN);
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.eval.ensemble_accuracy,
            ind(0),
            ind(1),
            self.share_rate_classifier,
            self.share_rate_encoder,
            self.r_fadeout
        )
    }
}

/// Header plus one row per epoch.
pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Trains `model` in place and returns one record per epoch. All randomness
/// (pairing, repetition, masks, augmentation) comes from `rng`; `on_epoch`
/// sees each record as soon as it exists.
pub fn fit(
    model: &mut MimoModel,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("refusing to train on an empty dataset".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    if train.class_count() != model.config().num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model has {}",
            train.class_count(),
            model.config().num_classes
        )));
    }
    let mut sgd = Sgd::new(model.params(), config.momentum, config.weight_decay);
    let unmix = model.config().unmix_mode;
    let mut tail: Vec<f64> = Vec::with_capacity(LOSS_TAIL);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let r = unmix.fade(epoch);
        let batches = build_batches(train.len(), train.image_size(), config, rng)?;
        let steps = batches.len();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            lr = lr_at(config, epoch, step, steps);
            let (x0, x1) = if config.augment {
                (train.gather(&batch.idx0, Some(rng))?, train.gather(&batch.idx1, Some(rng))?)
            } else {
                (train.gather(&batch.idx0, None)?, train.gather(&batch.idx1, None)?)
            };
            let y0: Vec<usize> = batch.idx0.iter().map(|&i| train.labels()[i]).collect();
            let y1: Vec<usize> = batch.idx1.iter().map(|&i| train.labels()[i]).collect();
            let mut tape = Tape::new();
            let (out, stats) = model.forward_train(&mut tape, &[x0, x1], &batch.masks, r, BnMode::Batch)?;
            let loss = subnetwork_loss(&mut tape, &out.logits, &y0, &y1, &batch.kappas(), config.rebalance_loss)?;
            let value = tape.value(loss).item();
            if tail.len() == LOSS_TAIL {
                tail.remove(0);
            }
            tail.push(value);
            if !value.is_finite() {
                return Err(Error::Diverged(Box::new(DivergenceReport {
                    epoch,
                    step,
                    lr,
                    loss_tail: tail,
                })));
            }
            loss_sum += value;
            tape.backward(loss)?;
            model.params_mut().load_grads(&tape)?;
            sgd.step(model.params_mut(), lr)?;
            model.apply_batch_stats(&stats);
        }
        let eval = evaluate(model, val, config.eval_batch_size)?;
        let (share_rate_encoder, share_rate_classifier) = diagnostics::share_rates(model)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            eval,
            share_rate_classifier,
            share_rate_encoder,
            r_fadeout: r,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} ens {:.2}% ind {:.2}% share {:.1}%",
            record.train_loss,
            record.eval.ensemble_accuracy,
            record.eval.mean_individual_accuracy,
            record.share_rate_classifier
        );
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

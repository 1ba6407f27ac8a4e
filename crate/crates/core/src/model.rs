//! Multi-input multi-output wide residual network.
//!
//! `M` convolutional encoders embed `M` images, the encodings are mixed into a
//! single representation, a shared pre-activation WRN core processes it, and
//! `M` dense classifiers read the pooled (optionally unmixed) features.
//!
//! Parameter names: `encoder{i}.weight`, `core.block{g}.{b}.*` (groups
//! `g = 1..=3`), `core.bn_final.*`, `classifier{i}.{weight,bias}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{self, MaskPair, UnmixMode};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{BatchMoments, BnStats, Tape, Var};
use crate::tensor::Tensor;

/// Running-statistics momentum: `running ← 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

pub const INPUT_CHANNELS: usize = 3;
const STEM_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every encoder drawn independently.
    Independent,
    /// Every encoder copies encoder 0.
    Identical,
    /// Each output-channel kernel of encoder `i` is encoder 0's kernel times a
    /// positive factor drawn from `[0.5, 2.0]`.
    Colinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MimoConfig {
    pub m: usize,
    pub depth: usize,
    pub width: usize,
    pub num_classes: usize,
    pub unmix_mode: UnmixMode,
    pub init_mode: InitMode,
}

impl Default for MimoConfig {
    fn default() -> Self {
        Self {
            m: 2,
            depth: 10,
            width: 1,
            num_classes: 10,
            unmix_mode: UnmixMode::None,
            init_mode: InitMode::Independent,
        }
    }
}

impl MimoConfig {
    /// Every violated constraint, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.m < 2 {
            v.push(format!("m = {} but at least 2 subnetworks are required", self.m));
        }
        if self.depth < 10 || !(self.depth - 4).is_multiple_of(6) {
            v.push(format!("depth = {} but (depth - 4) must be a positive multiple of 6", self.depth));
        }
        if self.width == 0 {
            v.push("width must be at least 1".into());
        }
        if self.num_classes < 2 {
            v.push(format!("num_classes = {} but at least 2 are required", self.num_classes));
        }
        if let Err(e) = self.unmix_mode.validate() {
            v.push(e.to_string());
        }
        if self.m > 2 && self.unmix_mode != UnmixMode::None {
            v.push(format!(
                "unmix mode {} needs m = 2; m = {} supports only summation mixing",
                self.unmix_mode.label(),
                self.m
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn blocks_per_group(&self) -> usize {
        (self.depth - 4) / 6
    }

    /// Channel counts of the three residual groups.
    pub fn group_channels(&self) -> [usize; 3] {
        [16 * self.width, 32 * self.width, 64 * self.width]
    }

    pub fn feature_channels(&self) -> usize {
        64 * self.width
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct Block {
    bn1: Bn,
    conv1: Conv,
    bn2: Bn,
    conv2: Conv,
    shortcut: Option<Conv>,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub struct MimoModel {
    config: MimoConfig,
    params: ParamStore,
    buffers: ParamStore,
    encoders: Vec<Conv>,
    groups: Vec<Vec<Block>>,
    final_bn: Bn,
    classifiers: Vec<Dense>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

struct Builder<'r> {
    params: ParamStore,
    buffers: ParamStore,
    rng: &'r mut Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv> {
        let w = he_normal(&[cout, cin, k, k], cin * k * k, self.rng);
        Ok(Conv {
            weight: self.params.insert(format!("{name}.weight"), w)?,
            stride,
            pad: k / 2,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        Ok(Bn {
            gamma: self.params.insert(format!("{name}.weight"), Tensor::ones(&[c]))?,
            beta: self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c]))?,
            mean: self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            var: self.buffers.insert(format!("{name}.running_var"), Tensor::ones(&[c]))?,
        })
    }

    /// Classifiers start at zero so their feature histograms reflect only
    /// what training put there.
    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Result<Dense> {
        let w = Tensor::zeros(&[fout, fin]);
        Ok(Dense {
            weight: self.params.insert(format!("{name}.weight"), w)?,
            bias: self.params.insert(format!("{name}.bias"), Tensor::zeros(&[fout]))?,
        })
    }
}

/// How batchnorm layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; observed moments are collected for running updates.
    Batch,
    /// Stored running statistics.
    Running,
}

/// Outputs of [`ForwardPass::forward_train`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub logits: Vec<Var>,
    /// Final core feature maps before unmixing.
    pub features: Var,
}

/// Output of each residual group plus the final (post BN-ReLU) features.
#[derive(Clone, Debug)]
pub struct CoreOutputs {
    pub groups: Vec<Var>,
    pub features: Var,
}

/// One forward pass of a model over a tape. Parameters are bound lazily so a
/// pass that skips a branch never records it.
pub struct ForwardPass<'a> {
    model: &'a MimoModel,
    params: &'a ParamStore,
    tape: &'a mut Tape,
    bound: Vec<Option<Var>>,
    bn_mode: BnMode,
    moments: Vec<(Bn, BatchMoments)>,
}

impl<'a> ForwardPass<'a> {
    /// Uses `params` in place of the model's own parameters; it must have the
    /// same layout (e.g. a perturbed clone for gradient checking).
    pub fn new(model: &'a MimoModel, params: &'a ParamStore, tape: &'a mut Tape, bn_mode: BnMode) -> Self {
        Self {
            model,
            params,
            bound: vec![None; params.len()],
            tape,
            bn_mode,
            moments: Vec::new(),
        }
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    fn p(&mut self, idx: usize) -> Var {
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.tape.param(idx, self.params.get(idx));
        self.bound[idx] = Some(v);
        v
    }

    fn conv(&mut self, x: Var, c: Conv) -> Result<Var> {
        let w = self.p(c.weight);
        self.tape.conv2d(x, w, c.stride, c.pad)
    }

    fn bn_relu(&mut self, x: Var, bn: Bn) -> Result<Var> {
        let gamma = self.p(bn.gamma);
        let beta = self.p(bn.beta);
        let model = self.model;
        let buffers = &model.buffers;
        let stats = match self.bn_mode {
            BnMode::Batch => BnStats::Batch,
            BnMode::Running => BnStats::Fixed {
                mean: buffers.get(bn.mean).data(),
                var: buffers.get(bn.var).data(),
            },
        };
        let (y, moments) = self.tape.batch_norm(x, gamma, beta, stats)?;
        if let Some(m) = moments {
            self.moments.push((bn, m));
        }
        Ok(self.tape.relu(y))
    }

    /// Applies encoder `i` to images `x: N×3×H×W`.
    pub fn encode(&mut self, i: usize, x: Var) -> Result<Var> {
        let enc = *self
            .model
            .encoders
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no encoder {i}")))?;
        self.conv(x, enc)
    }

    /// Runs the shared residual core on the mixed representation.
    pub fn core(&mut self, mixed: Var) -> Result<CoreOutputs> {
        let model = self.model;
        let mut x = mixed;
        let mut groups = Vec::with_capacity(model.groups.len());
        for group in &model.groups {
            for block in group {
                let act = self.bn_relu(x, block.bn1)?;
                let h = self.conv(act, block.conv1)?;
                let h = self.bn_relu(h, block.bn2)?;
                let h = self.conv(h, block.conv2)?;
                let skip = match block.shortcut {
                    Some(sc) => self.conv(act, sc)?,
                    None => x,
                };
                x = self.tape.add(h, skip)?;
            }
            groups.push(x);
        }
        let features = self.bn_relu(x, model.final_bn)?;
        Ok(CoreOutputs { groups, features })
    }

    /// Global average pooling followed by classifier `i`.
    pub fn classify(&mut self, i: usize, features: Var) -> Result<Var> {
        let head = *self
            .model
            .classifiers
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no classifier {i}")))?;
        let pooled = self.tape.global_avg_pool(features)?;
        let w = self.p(head.weight);
        let b = self.p(head.bias);
        self.tape.linear(pooled, w, Some(b))
    }

    /// Training-style pass: encode, mix with `masks` (sampled at input
    /// resolution), run the core, unmix with effective masks at fade
    /// coefficient `r`, pool and classify each branch.
    pub fn forward_train(&mut self, inputs: &[Var], masks: &[MaskPair], r: f64) -> Result<TrainOutputs> {
        let m = self.model.config.m;
        if m != 2 || inputs.len() != 2 {
            return Err(Error::Unsupported(format!(
                "masked training pass needs exactly 2 inputs (m = {m}, got {})",
                inputs.len()
            )));
        }
        let encoded = inputs
            .iter()
            .enumerate()
            .map(|(i, &x)| self.encode(i, x))
            .collect::<Result<Vec<_>>>()?;
        let (_, _, eh, ew) = self.tape.value(encoded[0]).dims4()?;
        let enc_masks = masks
            .iter()
            .map(|mp| mp.downsample(eh, ew))
            .collect::<Result<Vec<_>>>()?;
        let mixed = mask::mix(self.tape, &encoded, Some(&enc_masks))?;
        let core = self.core(mixed)?;
        let features = core.features;

        let mode = self.model.config.unmix_mode;
        let branches = if mode.is_active(r) {
            let (_, _, fh, fw) = self.tape.value(features).dims4()?;
            let mut effective = vec![Vec::with_capacity(masks.len()), Vec::with_capacity(masks.len())];
            for mp in masks {
                let (a, b) = mask::effective_masks(mp, r)?;
                effective[0].push(mask::downsample_mask(&a, mp.height(), mp.width(), fh, fw)?);
                effective[1].push(mask::downsample_mask(&b, mp.height(), mp.width(), fh, fw)?);
            }
            mask::unmix(self.tape, features, &effective, mode)?
        } else {
            vec![features; m]
        };
        let logits = branches
            .into_iter()
            .enumerate()
            .map(|(i, f)| self.classify(i, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainOutputs { logits, features })
    }

    /// Inference pass: the same images feed every encoder, encodings are
    /// averaged and nothing is unmixed. Returns one logit node per subnetwork.
    pub fn forward_eval(&mut self, x: Var) -> Result<Vec<Var>> {
        let m = self.model.config.m;
        let encoded = (0..m).map(|i| self.encode(i, x)).collect::<Result<Vec<_>>>()?;
        let mixed = mask::mix(self.tape, &encoded, None)?;
        let core = self.core(mixed)?;
        (0..m).map(|i| self.classify(i, core.features)).collect()
    }

    /// Batch moments observed so far, in layer order.
    pub fn into_moments(self) -> BatchStats {
        BatchStats(self.moments.into_iter().map(|(bn, m)| (bn.mean, bn.var, m)).collect())
    }
}

/// Batchnorm moments gathered during a training pass.
#[derive(Clone, Debug, Default)]
pub struct BatchStats(Vec<(usize, usize, BatchMoments)>);

impl BatchStats {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-image class probabilities from [`MimoModel::forward_inference`].
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `N×K`, mean of `per_subnet`.
    pub ensemble: Tensor,
    pub per_subnet: Vec<Tensor>,
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..k {
            out[i * k + j] = (row[j] - max).exp() / z;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Elementwise mean of equally shaped probability tables.
pub fn average_probs(per_subnet: &[Tensor]) -> Result<Tensor> {
    let first = per_subnet
        .first()
        .ok_or_else(|| Error::InvalidArgument("no subnetwork predictions".into()))?;
    let mut acc = vec![0.0; first.numel()];
    for p in per_subnet {
        if p.shape() != first.shape() {
            return Err(Error::shape("average_probs", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v);
    }
    let m = per_subnet.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Tensor::new(first.shape().to_vec(), acc)
}

impl MimoModel {
    /// Builds the network and initializes encoders per `config.init_mode`.
    pub fn build(config: MimoConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            buffers: ParamStore::new(),
            rng,
        };
        let encoders = (0..config.m)
            .map(|i| b.conv(&format!("encoder{i}"), INPUT_CHANNELS, STEM_CHANNELS, 3, 1))
            .collect::<Result<Vec<_>>>()?;
        let mut groups = Vec::new();
        let mut cin = STEM_CHANNELS;
        for (g, &cout) in config.group_channels().iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..config.blocks_per_group() {
                let name = format!("core.block{}.{j}", g + 1);
                let stride = if g > 0 && j == 0 { 2 } else { 1 };
                let block_in = if j == 0 { cin } else { cout };
                let bn1 = b.bn(&format!("{name}.bn1"), block_in)?;
                let conv1 = b.conv(&format!("{name}.conv1"), block_in, cout, 3, stride)?;
                let bn2 = b.bn(&format!("{name}.bn2"), cout)?;
                let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1)?;
                let shortcut = if block_in != cout || stride != 1 {
                    Some(b.conv(&format!("{name}.shortcut"), block_in, cout, 1, stride)?)
                } else {
                    None
                };
                blocks.push(Block {
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    shortcut,
                });
            }
            groups.push(blocks);
            cin = cout;
        }
        let final_bn = b.bn("core.bn_final", cin)?;
        let classifiers = (0..config.m)
            .map(|i| b.dense(&format!("classifier{i}"), cin, config.num_classes))
            .collect::<Result<Vec<_>>>()?;
        let Builder { params, buffers, rng } = b;
        let mut model = Self {
            config,
            params,
            buffers,
            encoders,
            groups,
            final_bn,
            classifiers,
        };
        model.init_encoders(model.config.init_mode, rng);
        Ok(model)
    }

    /// Re-initializes encoders `1..M` relative to encoder 0.
    pub fn init_encoders(&mut self, mode: InitMode, rng: &mut Rng) {
        let first = self.encoders[0].weight;
        let template = self.params.get(first).clone();
        let (cout, cin, kh, kw) = template.dims4().expect("encoder weight is rank 4");
        let slab = cin * kh * kw;
        for enc in &self.encoders[1..] {
            let w = self.params.get_mut(enc.weight);
            match mode {
                InitMode::Independent => {
                    let fresh = he_normal(template.shape(), slab, rng);
                    w.data_mut().copy_from_slice(fresh.data());
                }
                InitMode::Identical => w.data_mut().copy_from_slice(template.data()),
                InitMode::Colinear => {
                    for c in 0..cout {
                        let s = rng.uniform_range(0.5, 2.0);
                        let src = &template.data()[c * slab..(c + 1) * slab];
                        for (d, v) in w.data_mut()[c * slab..(c + 1) * slab].iter_mut().zip(src) {
                            *d = v * s;
                        }
                    }
                }
            }
        }
    }

    pub fn config(&self) -> &MimoConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn encoder_weight(&self, i: usize) -> &Tensor {
        self.params.get(self.encoders[i].weight)
    }

    pub fn classifier_weight(&self, i: usize) -> &Tensor {
        self.params.get(self.classifiers[i].weight)
    }

    pub fn classifier_bias(&self, i: usize) -> &Tensor {
        self.params.get(self.classifiers[i].bias)
    }

    /// Parameters of the shared core (residual groups and final batchnorm).
    pub fn core_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with("core."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Channel count after residual group `g` (1-based).
    pub fn group_channels(&self, g: usize) -> Option<usize> {
        self.config.group_channels().get(g.checked_sub(1)?).copied()
    }

    /// Folds observed batch moments into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &BatchStats) {
        for (mean_idx, var_idx, m) in &stats.0 {
            for (r, b) in self.buffers.get_mut(*mean_idx).data_mut().iter_mut().zip(&m.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in self.buffers.get_mut(*var_idx).data_mut().iter_mut().zip(&m.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    /// Training forward with the model's own parameters. Returns the
    /// per-subnetwork logits, the pre-unmix features and, in
    /// [`BnMode::Batch`], the batch moments to apply after the step.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        inputs: &[Tensor],
        masks: &[MaskPair],
        r: f64,
        bn_mode: BnMode,
    ) -> Result<(TrainOutputs, BatchStats)> {
        let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let mut pass = ForwardPass::new(self, &self.params, tape, bn_mode);
        let out = pass.forward_train(&xs, masks, r)?;
        Ok((out, pass.into_moments()))
    }

    /// Ensemble and per-subnetwork class probabilities for images `x`.
    pub fn forward_inference(&self, x: &Tensor) -> Result<Predictions> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut pass = ForwardPass::new(self, &self.params, &mut tape, BnMode::Running);
        let logits = pass.forward_eval(xv)?;
        let per_subnet = logits
            .iter()
            .map(|&l| softmax_rows(tape.value(l)))
            .collect::<Result<Vec<_>>>()?;
        let ensemble = average_probs(&per_subnet)?;
        Ok(Predictions { ensemble, per_subnet })
    }

    /// All parameters and buffers, for checkpointing.
    pub fn state(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// Overwrites parameters and buffers from checkpoint records. Every
    /// tensor must be present with a matching shape.
    pub fn load_state(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = 0;
        for (name, t) in records {
            let slot = match self.params.by_name_mut(name) {
                Some(s) => Some(s),
                None => self.buffers.by_name_mut(name),
            };
            match slot {
                Some(s) if s.shape() == t.shape() => {
                    s.data_mut().copy_from_slice(t.data());
                    seen += 1;
                }
                Some(s) => problems.push(format!("{name}: shape {:?}, model has {:?}", t.shape(), s.shape())),
                None => problems.push(format!("{name}: not a tensor of this model")),
            }
        }
        let expected = self.params.len() + self.buffers.len();
        if seen != expected {
            problems.push(format!("checkpoint provides {seen} of {expected} tensors"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(init: InitMode, unmix: UnmixMode) -> MimoConfig {
        MimoConfig {
            num_classes: 4,
            init_mode: init,
            unmix_mode: unmix,
            ..MimoConfig::default()
        }
    }

    #[test]
    fn config_violations_are_all_listed() {
        let bad = MimoConfig {
            m: 1,
            depth: 12,
            width: 0,
            num_classes: 1,
            unmix_mode: UnmixMode::Partial { fraction: 2.0 },
            init_mode: InitMode::Identical,
        };
        assert_eq!(bad.violations().len(), 5);
        let many = MimoConfig {
            m: 3,
            unmix_mode: UnmixMode::Full,
            ..MimoConfig::default()
        };
        assert_eq!(many.violations().len(), 1);
        let summing = MimoConfig {
            m: 3,
            ..MimoConfig::default()
        };
        assert!(summing.validate().is_ok());
    }

    #[test]
    fn feature_channels_follow_wrn_arithmetic() {
        let c = MimoConfig {
            depth: 28,
            width: 2,
            ..MimoConfig::default()
        };
        assert_eq!(c.feature_channels(), 128);
        assert_eq!(MimoConfig::default().feature_channels(), 64);
    }

    #[test]
    fn final_features_are_8x8() {
        let model = MimoModel::build(desk(InitMode::Independent, UnmixMode::None), &mut Rng::new(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let mut pass = ForwardPass::new(&model, model.params(), &mut tape, BnMode::Running);
        let e = pass.encode(0, x).unwrap();
        let core = pass.core(e).unwrap();
        assert_eq!(tape.value(core.features).shape(), &[2, 64, 8, 8]);
        assert_eq!(tape.value(core.groups[0]).shape(), &[2, 16, 32, 32]);
        assert_eq!(tape.value(core.groups[1]).shape(), &[2, 32, 16, 16]);
    }

    #[test]
    fn identical_init_copies_encoder() {
        let model = MimoModel::build(desk(InitMode::Identical, UnmixMode::Full), &mut Rng::new(1)).unwrap();
        assert_eq!(model.encoder_weight(0), model.encoder_weight(1));
    }

    fn cosines(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let slab = a.numel() / a.shape()[0];
        a.data()
            .chunks(slab)
            .zip(b.data().chunks(slab))
            .map(|(x, y)| {
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (nx * ny)
            })
            .collect()
    }

    #[test]
    fn colinear_init_is_parallel() {
        let model = MimoModel::build(desk(InitMode::Colinear, UnmixMode::Full), &mut Rng::new(2)).unwrap();
        assert_ne!(model.encoder_weight(0), model.encoder_weight(1));
        for c in cosines(model.encoder_weight(0), model.encoder_weight(1)) {
            assert!((c - 1.0).abs() < 1e-12, "cosine {c}");
        }
        let slab = 27;
        let (a, b) = (model.encoder_weight(0).data(), model.encoder_weight(1).data());
        for ch in 0..16 {
            let s = b[ch * slab] / a[ch * slab];
            assert!((0.5..=2.0).contains(&s));
        }
    }

    #[test]
    fn independent_init_is_uncorrelated() {
        let model = MimoModel::build(desk(InitMode::Independent, UnmixMode::None), &mut Rng::new(3)).unwrap();
        let cs = cosines(model.encoder_weight(0), model.encoder_weight(1));
        let mean = cs.iter().sum::<f64>() / cs.len() as f64;
        assert!(mean.abs() < 0.1, "mean cosine {mean}");
    }

    #[test]
    fn inference_rows_sum_to_one() {
        let model = MimoModel::build(desk(InitMode::Independent, UnmixMode::None), &mut Rng::new(4)).unwrap();
        let mut rng = Rng::new(5);
        let x = Tensor::from_fn(&[3, 3, 32, 32], |_| rng.normal());
        let p = model.forward_inference(&x).unwrap();
        for i in 0..3 {
            let s: f64 = p.ensemble.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let mean = average_probs(&p.per_subnet).unwrap();
        assert_eq!(mean, p.ensemble);
    }

    #[test]
    fn averaging_identical_predictions_is_identity() {
        let t = Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]).unwrap();
        assert_eq!(average_probs(&[t.clone(), t.clone()]).unwrap(), t);
    }

    #[test]
    fn running_stats_update() {
        let mut model = MimoModel::build(desk(InitMode::Identical, UnmixMode::Full), &mut Rng::new(6)).unwrap();
        let mut rng = Rng::new(7);
        let x = Tensor::from_fn(&[4, 3, 32, 32], |_| 1.0 + rng.normal());
        let masks = vec![MaskPair::all_ones(32, 32); 4];
        let mut tape = Tape::new();
        let (_, stats) = model
            .forward_train(&mut tape, &[x.clone(), x], &masks, 0.0, BnMode::Batch)
            .unwrap();
        assert_eq!(stats.len(), 7);
        let before = model.buffers().by_name("core.block1.0.bn1.running_mean").unwrap().clone();
        model.apply_batch_stats(&stats);
        let after = model.buffers().by_name("core.block1.0.bn1.running_mean").unwrap();
        assert_ne!(&before, after);
    }
}

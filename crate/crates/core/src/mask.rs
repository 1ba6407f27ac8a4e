//! CutMix-style binary masks, masked mixing of encoder outputs, and unmixing
//! of the final feature maps (full, partial and fadeout variants).
//!
//! Convention: `mask` belongs to input 0 and its complement to input 1, so
//! `kappa` is the area input 0 keeps and the zero rectangle shows input 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    mask: Vec<f64>,
    kappa: f64,
    height: usize,
    width: usize,
}

impl MaskPair {
    /// Wraps an explicit `height × width` map; `kappa` is its mean.
    pub fn from_mask(height: usize, width: usize, mask: Vec<f64>) -> Result<Self> {
        if mask.len() != height * width || mask.is_empty() {
            return Err(Error::shape(
                "mask",
                format!("{} values for a {height}×{width} mask", mask.len()),
            ));
        }
        if mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        let kappa = mask.iter().sum::<f64>() / mask.len() as f64;
        Ok(Self {
            mask,
            kappa,
            height,
            width,
        })
    }

    /// Input 0 owns every pixel.
    pub fn all_ones(height: usize, width: usize) -> Self {
        Self {
            mask: vec![1.0; height * width],
            kappa: 1.0,
            height,
            width,
        }
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn complement(&self) -> Vec<f64> {
        self.mask.iter().map(|m| 1.0 - m).collect()
    }

    /// Mask for subnetwork `i` (0 → mask, 1 → complement).
    pub fn owner_map(&self, i: usize) -> Vec<f64> {
        if i == 0 {
            self.mask.clone()
        } else {
            self.complement()
        }
    }

    /// Box-average resize; see [`downsample_mask`].
    pub fn downsample(&self, target_h: usize, target_w: usize) -> Result<MaskPair> {
        let mask = downsample_mask(&self.mask, self.height, self.width, target_h, target_w)?;
        Ok(MaskPair {
            mask,
            kappa: self.kappa,
            height: target_h,
            width: target_w,
        })
    }

    /// Grid dump, one CSV row per mask row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.mask.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Unmixing strategy applied to the final feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum UnmixMode {
    None,
    Full,
    /// Only the first `ceil(fraction · C)` channels are unmixed.
    Partial { fraction: f64 },
    /// Unmixing mask `M + r(1 − M)` with `r = min(1, epoch / end_epoch)`.
    Fadeout { end_epoch: usize },
}

impl UnmixMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UnmixMode::Partial { fraction } if !(fraction > 0.0 && fraction <= 1.0) => Err(
                Error::InvalidArgument(format!("partial fraction {fraction} not in (0, 1]")),
            ),
            UnmixMode::Fadeout { end_epoch: 0 } => Err(Error::InvalidArgument(
                "fadeout end_epoch must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Number of leading channels that get unmixed out of `channels`.
    pub fn unmixed_channels(&self, channels: usize) -> usize {
        match *self {
            UnmixMode::None => 0,
            UnmixMode::Full | UnmixMode::Fadeout { .. } => channels,
            UnmixMode::Partial { fraction } => {
                ((fraction * channels as f64).ceil() as usize).min(channels)
            }
        }
    }

    /// Fadeout coefficient for `epoch`; 0 for the non-fading modes.
    pub fn fade(&self, epoch: usize) -> f64 {
        match *self {
            UnmixMode::Fadeout { end_epoch } => fadeout_coefficient(epoch, end_epoch),
            _ => 0.0,
        }
    }

    /// Whether unmixing changes anything at fade coefficient `r`. A fully
    /// faded mode takes exactly the same path as [`UnmixMode::None`].
    pub fn is_active(&self, r: f64) -> bool {
        match self {
            UnmixMode::None => false,
            UnmixMode::Fadeout { .. } => r < 1.0,
            _ => true,
        }
    }

    pub fn label(&self) -> String {
        match self {
            UnmixMode::None => "none".into(),
            UnmixMode::Full => "full".into(),
            UnmixMode::Partial { fraction } => format!("partial({fraction})"),
            UnmixMode::Fadeout { end_epoch } => format!("fadeout({end_epoch})"),
        }
    }
}

/// Draws the mixing ratio `λ ~ Beta(alpha, alpha)`, kept strictly inside (0, 1).
pub fn sample_mixing_ratio(rng: &mut Rng, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("mix alpha {alpha} must be > 0")));
    }
    let lambda = rng.beta(alpha, alpha)?;
    Ok(lambda.clamp(f64::EPSILON, 1.0 - f64::EPSILON))
}

/// Samples a CutMix mask: ones everywhere except one axis-aligned zero
/// rectangle of target area `(1 − λ)·h·w`, centred uniformly and clipped to
/// the image. `kappa` is the realized fraction of ones.
pub fn sample_cutmix_mask(h: usize, w: usize, lambda: f64, rng: &mut Rng) -> Result<MaskPair> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("mask size {h}×{w}")));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("mixing ratio {lambda} not in (0, 1)")));
    }
    let cut = (1.0 - lambda).sqrt();
    let cut_h = (h as f64 * cut) as usize;
    let cut_w = (w as f64 * cut) as usize;
    let cy = rng.below(h);
    let cx = rng.below(w);
    let (y0, y1) = clipped_span(cy, cut_h, h);
    let (x0, x1) = clipped_span(cx, cut_w, w);
    let mut mask = vec![1.0; h * w];
    for y in y0..y1 {
        mask[y * w + x0..y * w + x1].fill(0.0);
    }
    MaskPair::from_mask(h, w, mask)
}

/// `[centre − len/2, centre − len/2 + len)` clipped to `[0, size)`.
pub(crate) fn clipped_span(centre: usize, len: usize, size: usize) -> (usize, usize) {
    let start = centre as isize - (len / 2) as isize;
    let end = start + len as isize;
    (
        start.clamp(0, size as isize) as usize,
        end.clamp(0, size as isize) as usize,
    )
}

/// `r = min(1, epoch / end_epoch)`; an `end_epoch` of 0 counts as already faded.
pub fn fadeout_coefficient(epoch: usize, end_epoch: usize) -> f64 {
    if end_epoch == 0 {
        return 1.0;
    }
    (epoch as f64 / end_epoch as f64).min(1.0)
}

/// `(M + r(1 − M), (1 − M) + rM)`.
pub fn effective_masks(masks: &MaskPair, r: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!("fadeout coefficient {r} not in [0, 1]")));
    }
    let first = masks.mask.iter().map(|m| m + r * (1.0 - m)).collect();
    let second = masks.mask.iter().map(|m| (1.0 - m) + r * m).collect();
    Ok((first, second))
}

/// Box-average pooling of an `h × w` map onto `target_h × target_w`. Each
/// output cell is the mean of its source block, so the global mean is kept.
pub fn downsample_mask(
    mask: &[f64],
    h: usize,
    w: usize,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<f64>> {
    if mask.len() != h * w {
        return Err(Error::shape("downsample_mask", format!("{} values for {h}×{w}", mask.len())));
    }
    if target_h == 0 || target_w == 0 || !h.is_multiple_of(target_h) || !w.is_multiple_of(target_w) {
        return Err(Error::shape(
            "downsample_mask",
            format!("{h}×{w} is not an integer multiple of {target_h}×{target_w}"),
        ));
    }
    if (target_h, target_w) == (h, w) {
        return Ok(mask.to_vec());
    }
    let (bh, bw) = (h / target_h, w / target_w);
    let area = (bh * bw) as f64;
    let mut out = vec![0.0; target_h * target_w];
    for (ty, row) in out.chunks_mut(target_w).enumerate() {
        for (tx, cell) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for y in ty * bh..(ty + 1) * bh {
                s += mask[y * w + tx * bw..y * w + (tx + 1) * bw].iter().sum::<f64>();
            }
            *cell = s / area;
        }
    }
    Ok(out)
}

/// Concatenates per-example maps into one `N·H·W` buffer.
fn stack(maps: &[Vec<f64>]) -> Vec<f64> {
    maps.iter().flat_map(|m| m.iter().copied()).collect()
}

/// Mixes `M` encoded tensors of shape `N×C×H×W`.
///
/// With `masks` (one per example, sized `H×W`, `M == 2`):
/// `mask ⊙ encoded[0] + (1 − mask) ⊙ encoded[1]`, broadcast over channels.
/// Without masks the encodings are averaged, which is the inference-time rule.
pub fn mix(tape: &mut Tape, encoded: &[Var], masks: Option<&[MaskPair]>) -> Result<Var> {
    let Some(&first) = encoded.first() else {
        return Err(Error::InvalidArgument("mix needs at least one encoding".into()));
    };
    let shape = tape.value(first).shape().to_vec();
    for &e in encoded {
        if tape.value(e).shape() != shape.as_slice() {
            return Err(Error::shape(
                "mix",
                format!("encodings differ: {shape:?} vs {:?}", tape.value(e).shape()),
            ));
        }
    }
    let (n, c, h, w) = tape.value(first).dims4()?;
    match masks {
        Some(masks) => {
            if encoded.len() != 2 {
                return Err(Error::Unsupported(format!(
                    "masked mixing is defined for 2 inputs, got {}",
                    encoded.len()
                )));
            }
            if masks.len() != n {
                return Err(Error::shape("mix", format!("{} masks for {n} examples", masks.len())));
            }
            if let Some(m) = masks.iter().find(|m| (m.height, m.width) != (h, w)) {
                return Err(Error::shape(
                    "mix",
                    format!("mask {}×{} for {h}×{w} features", m.height, m.width),
                ));
            }
            let own: Vec<Vec<f64>> = masks.iter().map(|m| m.owner_map(0)).collect();
            let other: Vec<Vec<f64>> = masks.iter().map(|m| m.owner_map(1)).collect();
            let a = tape.spatial_mask(encoded[0], stack(&own), c)?;
            let b = tape.spatial_mask(encoded[1], stack(&other), c)?;
            tape.add(a, b)
        }
        None => {
            let mut acc = encoded[0];
            for &e in &encoded[1..] {
                acc = tape.add(acc, e)?;
            }
            Ok(tape.scale(acc, 1.0 / encoded.len() as f64))
        }
    }
}

/// Splits the shared feature maps into one view per subnetwork.
///
/// `effective` holds, for each subnetwork, one `H'×W'` map per example. The
/// first [`UnmixMode::unmixed_channels`] channels are multiplied by the map;
/// the rest reach every subnetwork unchanged. Mode `none` returns the input
/// node itself for each subnetwork.
pub fn unmix(
    tape: &mut Tape,
    features: Var,
    effective: &[Vec<Vec<f64>>],
    mode: UnmixMode,
) -> Result<Vec<Var>> {
    let (n, c, h, w) = tape.value(features).dims4()?;
    if mode == UnmixMode::None {
        return Ok(vec![features; effective.len().max(2)]);
    }
    if effective.len() != 2 {
        return Err(Error::Unsupported(format!(
            "unmixing is defined for 2 subnetworks, got {}",
            effective.len()
        )));
    }
    let channels = mode.unmixed_channels(c);
    effective
        .iter()
        .map(|maps| {
            if maps.len() != n || maps.iter().any(|m| m.len() != h * w) {
                return Err(Error::shape(
                    "unmix",
                    format!("effective masks do not match {n} examples of {h}×{w}"),
                ));
            }
            tape.spatial_mask(features, stack(maps), channels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = Rng::new(11);
        let mut draws: Vec<f64> = (0..100_000)
            .map(|_| sample_mixing_ratio(&mut rng, 1.0).unwrap())
            .collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS distance {ks}");
    }

    #[test]
    fn beta_two_is_centred() {
        let mut rng = Rng::new(12);
        let mean = (0..100_000)
            .map(|_| sample_mixing_ratio(&mut rng, 2.0).unwrap())
            .sum::<f64>()
            / 100_000.0;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn ratio_sequence_is_seeded() {
        let draw = || {
            let mut rng = Rng::new(42);
            (0..32)
                .map(|_| sample_mixing_ratio(&mut rng, 2.0).unwrap().to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn non_positive_alpha_is_rejected() {
        let mut rng = Rng::new(0);
        assert!(sample_mixing_ratio(&mut rng, 0.0).is_err());
        assert!(sample_mixing_ratio(&mut rng, -1.0).is_err());
    }

    #[test]
    fn near_one_lambda_leaves_almost_everything() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let m = sample_cutmix_mask(32, 32, 0.999, &mut rng).unwrap();
            assert!(m.kappa() >= 0.99);
        }
    }

    /// Expected realized kappa, enumerating every centre position.
    fn expected_kappa(h: usize, w: usize, lambda: f64) -> f64 {
        let cut = (1.0 - lambda).sqrt();
        let (ch, cw) = ((h as f64 * cut) as usize, (w as f64 * cut) as usize);
        let mut total = 0.0;
        for cy in 0..h {
            for cx in 0..w {
                let y_lo = (cy as isize - (ch / 2) as isize).max(0);
                let y_hi = (cy as isize - (ch / 2) as isize + ch as isize).min(h as isize);
                let x_lo = (cx as isize - (cw / 2) as isize).max(0);
                let x_hi = (cx as isize - (cw / 2) as isize + cw as isize).min(w as isize);
                let zeros = (y_hi - y_lo).max(0) * (x_hi - x_lo).max(0);
                total += 1.0 - zeros as f64 / (h * w) as f64;
            }
        }
        total / (h * w) as f64
    }

    #[test]
    fn realized_kappa_matches_placement_enumeration() {
        // Clipping pushes the realized mean well above λ = 0.5.
        let expected = expected_kappa(32, 32, 0.5);
        assert!((expected - 0.6759).abs() < 1e-4, "oracle {expected}");
        let mut rng = Rng::new(17);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| sample_cutmix_mask(32, 32, 0.5, &mut rng).unwrap().kappa())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        let se = sd / (draws.len() as f64).sqrt();
        assert!(mean > 0.5);
        assert!((mean - expected).abs() < 4.0 * se, "mean {mean}, oracle {expected}, se {se}");
    }

    #[test]
    fn mask_determinism() {
        let a = sample_cutmix_mask(32, 32, 0.4, &mut Rng::new(9)).unwrap();
        let b = sample_cutmix_mask(32, 32, 0.4, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fadeout_endpoints() {
        assert_eq!(fadeout_coefficient(0, 100), 0.0);
        assert_eq!(fadeout_coefficient(50, 100), 0.5);
        assert_eq!(fadeout_coefficient(100, 100), 1.0);
        assert_eq!(fadeout_coefficient(250, 100), 1.0);
    }

    #[test]
    fn effective_masks_at_half() {
        let m = sample_cutmix_mask(16, 16, 0.5, &mut Rng::new(2)).unwrap();
        let (a, b) = effective_masks(&m, 0.5).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == 0.5 || v == 1.0));
        assert!(effective_masks(&m, 1.5).is_err());
        assert!(effective_masks(&m, -0.1).is_err());
    }

    #[test]
    fn downsample_block_example() {
        let mut mask = vec![1.0; 16];
        for &i in &[0, 1, 4, 5] {
            mask[i] = 0.0;
        }
        assert_eq!(downsample_mask(&mask, 4, 4, 2, 2).unwrap(), vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(downsample_mask(&[1.0; 64], 8, 8, 2, 4).unwrap(), vec![1.0; 8]);
        assert!(downsample_mask(&mask, 4, 4, 3, 3).is_err());
    }

    #[test]
    fn partial_channel_count() {
        assert_eq!(UnmixMode::Partial { fraction: 0.25 }.unmixed_channels(64), 16);
        assert_eq!(UnmixMode::Partial { fraction: 0.3 }.unmixed_channels(10), 3);
        assert_eq!(UnmixMode::Full.unmixed_channels(64), 64);
        assert!(UnmixMode::Partial { fraction: 0.0 }.validate().is_err());
        assert!(UnmixMode::Fadeout { end_epoch: 0 }.validate().is_err());
    }

    fn features(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[n, c, h, w], |_| rng.normal())
    }

    #[test]
    fn mixing_examples() {
        let (n, c, h, w) = (2, 3, 8, 8);
        let mut tape = Tape::new();
        let e0 = tape.constant(Tensor::full(&[n, c, h, w], 1.0));
        let e1 = tape.constant(Tensor::full(&[n, c, h, w], 3.0));
        let ones = vec![MaskPair::all_ones(h, w); n];
        let out = mix(&mut tape, &[e0, e1], Some(&ones)).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 1.0));

        let mut rng = Rng::new(4);
        let masks: Vec<MaskPair> =
            (0..n).map(|_| sample_cutmix_mask(h, w, 0.6, &mut rng).unwrap()).collect();
        let out = mix(&mut tape, &[e0, e1], Some(&masks)).unwrap();
        for (i, m) in masks.iter().enumerate() {
            let row = tape.value(out).row(i);
            assert!(row.iter().all(|&v| v == 1.0 || v == 3.0));
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            assert!((mean - (3.0 - 2.0 * m.kappa())).abs() < 1e-12);
        }

        let x = tape.constant(features(n, c, h, w, 1));
        let same = mix(&mut tape, &[x, x], Some(&masks)).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
    }

    #[test]
    fn mixing_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 5]));
        assert!(mix(&mut tape, &[a, b], None).is_err());
        let masks = vec![MaskPair::all_ones(4, 4)];
        assert!(matches!(mix(&mut tape, &[a, a, a], Some(&masks)), Err(Error::Unsupported(_))));
        let wrong = vec![MaskPair::all_ones(2, 2)];
        assert!(mix(&mut tape, &[a, a], Some(&wrong)).is_err());
    }

    #[test]
    fn inference_mixing_averages() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
        let b = tape.constant(Tensor::full(&[1, 1, 2, 2], 4.0));
        let out = mix(&mut tape, &[a, b], None).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 3.0));
    }

    fn effective_for(masks: &[MaskPair], r: f64) -> Vec<Vec<Vec<f64>>> {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for m in masks {
            let (a, b) = effective_masks(m, r).unwrap();
            first.push(a);
            second.push(b);
        }
        vec![first, second]
    }

    #[test]
    fn unmix_modes() {
        let (n, c, h, w) = (2, 64, 4, 4);
        let mut rng = Rng::new(8);
        let masks: Vec<MaskPair> =
            (0..n).map(|_| sample_cutmix_mask(h, w, 0.5, &mut rng).unwrap()).collect();
        let eff = effective_for(&masks, 0.0);
        let mut tape = Tape::new();
        let f = tape.constant(features(n, c, h, w, 5));

        let none = unmix(&mut tape, f, &eff, UnmixMode::None).unwrap();
        assert_eq!(none, vec![f, f]);

        let full = unmix(&mut tape, f, &eff, UnmixMode::Full).unwrap();
        let sum: Vec<f64> = tape
            .value(full[0])
            .data()
            .iter()
            .zip(tape.value(full[1]).data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(sum, tape.value(f).data());

        let part = unmix(&mut tape, f, &eff, UnmixMode::Partial { fraction: 0.25 }).unwrap();
        let plane = h * w;
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let a = &tape.value(part[0]).data()[off..off + plane];
                let b = &tape.value(part[1]).data()[off..off + plane];
                let x = &tape.value(f).data()[off..off + plane];
                if ch < 16 {
                    let m = masks[i].mask();
                    for j in 0..plane {
                        assert_eq!(a[j], x[j] * m[j]);
                        assert_eq!(b[j], x[j] * (1.0 - m[j]));
                    }
                } else {
                    assert_eq!(a, x);
                    assert_eq!(b, x);
                }
            }
        }
    }

    #[test]
    fn unmix_spatial_mismatch() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let eff = vec![vec![vec![1.0; 9]], vec![vec![1.0; 9]]];
        assert!(unmix(&mut tape, f, &eff, UnmixMode::Full).is_err());
    }

    proptest! {
        #[test]
        fn downsampling_conserves_kappa(seed in any::<u64>(), lambda in 0.05f64..0.95) {
            let m = sample_cutmix_mask(32, 32, lambda, &mut Rng::new(seed)).unwrap();
            prop_assert!(m.mask().iter().all(|&v| v == 0.0 || v == 1.0));
            let mean = m.mask().iter().sum::<f64>() / 1024.0;
            prop_assert_eq!(mean, m.kappa());
            for target in [16usize, 8, 4, 2, 1] {
                let d = downsample_mask(m.mask(), 32, 32, target, target).unwrap();
                let dm = d.iter().sum::<f64>() / (target * target) as f64;
                prop_assert_eq!(dm, mean);
            }
        }

        #[test]
        fn complement_partitions_unity(seed in any::<u64>(), lambda in 0.05f64..0.95) {
            let m = sample_cutmix_mask(8, 8, lambda, &mut Rng::new(seed)).unwrap();
            for (a, b) in m.mask().iter().zip(m.complement()) {
                prop_assert_eq!(a + b, 1.0);
            }
            let (e0, e1) = effective_masks(&m, 0.0).unwrap();
            prop_assert_eq!(&e0[..], m.mask());
            prop_assert_eq!(e1, m.complement());
            let (o0, o1) = effective_masks(&m, 1.0).unwrap();
            prop_assert!(o0.iter().chain(&o1).all(|&v| v == 1.0));
        }
    }
}

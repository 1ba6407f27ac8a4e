//! Feature-sharing measurements.
//!
//! Weight-based: per-feature L1 mass of each encoder's kernels and of each
//! classifier's weight columns, compared across subnetworks by the
//! normalized min/max ratio. Activation-based: per-channel variance of an
//! intermediate feature map as one input varies while the other is fixed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskPair;
use crate::model::{BnMode, ForwardPass, MimoModel};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::mask;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Masses below this are treated as zero when forming ratios.
const NOISE_FLOOR: f64 = 1e-12;

/// `h[i][c]` = L1 norm of encoder `i`'s kernel slab producing channel `c`.
pub fn encoder_l1_histograms(model: &MimoModel) -> Vec<Vec<f64>> {
    (0..model.config().m)
        .map(|i| {
            let w = model.encoder_weight(i);
            let slab = w.numel() / w.shape()[0];
            w.data().chunks(slab).map(|k| k.iter().map(|v| v.abs()).sum()).collect()
        })
        .collect()
}

/// `h[i][c]` = L1 norm of column `c` of classifier `i`'s weight matrix.
pub fn classifier_l1_histograms(model: &MimoModel) -> Vec<Vec<f64>> {
    (0..model.config().m)
        .map(|i| {
            let w = model.classifier_weight(i);
            let (k, f) = (w.shape()[0], w.shape()[1]);
            (0..f)
                .map(|c| (0..k).map(|row| w.data()[row * f + c].abs()).sum())
                .collect()
        })
        .collect()
}

fn normalize(h: &[f64]) -> Vec<f64> {
    let total: f64 = h.iter().sum();
    if total <= NOISE_FLOOR {
        vec![1.0 / h.len() as f64; h.len()]
    } else {
        h.iter().map(|v| v / total).collect()
    }
}

/// Per-feature `min_i h̃_i[c] / max_i h̃_i[c]` over unit-mass histograms and
/// the aggregate rate `100 · mean_c ratio[c]`. A feature nobody uses counts
/// as shared.
pub fn sharing_rate(hists: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if hists.len() < 2 {
        return Err(Error::InvalidArgument("sharing rate needs at least 2 histograms".into()));
    }
    let c = hists[0].len();
    if c == 0 || hists.iter().any(|h| h.len() != c) {
        return Err(Error::shape("sharing_rate", "histograms must share a positive length"));
    }
    let normed: Vec<Vec<f64>> = hists.iter().map(|h| normalize(h)).collect();
    let ratios: Vec<f64> = (0..c)
        .map(|j| {
            let lo = normed.iter().map(|h| h[j]).fold(f64::INFINITY, f64::min);
            let hi = normed.iter().map(|h| h[j]).fold(0.0, f64::max);
            if hi <= NOISE_FLOOR {
                1.0
            } else {
                (lo / hi).clamp(0.0, 1.0)
            }
        })
        .collect();
    let rate = 100.0 * ratios.iter().sum::<f64>() / c as f64;
    Ok((ratios, rate))
}

/// Channel importance after residual group `block_index` (1..=3) for each
/// subnetwork: the variance over `testset` of the feature map when that
/// subnetwork's input sweeps the test images and the other input stays at
/// `fixed`, averaged over spatial positions. Batchnorm uses running
/// statistics and every example is mixed with the same `mask`.
pub fn variance_importance(
    model: &MimoModel,
    testset: &Tensor,
    fixed: &Tensor,
    block_index: usize,
    mask: &MaskPair,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if !(1..=3).contains(&block_index) {
        return Err(Error::InvalidArgument(format!("block index {block_index} not in 1..=3")));
    }
    if model.config().m != 2 {
        return Err(Error::Unsupported("variance sweep is defined for 2 subnetworks".into()));
    }
    let (n, c, h, w) = testset.dims4()?;
    if n == 0 {
        return Err(Error::InvalidArgument("variance sweep needs a non-empty test set".into()));
    }
    if fixed.shape() != [1, c, h, w] {
        return Err(Error::shape("variance_importance", format!("fixed input {:?}", fixed.shape())));
    }
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(2);
    for sub in 0..2 {
        // Welford accumulation per (channel, position).
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        let mut channels = 0;
        for start in (0..n).step_by(batch_size) {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            let sweep = testset.gather_rows(&idx)?;
            let pinned = fixed.gather_rows(&vec![0; idx.len()])?;
            let (first, second) = if sub == 0 { (sweep, pinned) } else { (pinned, sweep) };
            let mut tape = Tape::new();
            let x0 = tape.constant(first);
            let x1 = tape.constant(second);
            let mut pass = ForwardPass::new(model, model.params(), &mut tape, BnMode::Running);
            let e0 = pass.encode(0, x0)?;
            let e1 = pass.encode(1, x1)?;
            let (_, _, eh, ew) = pass.tape().value(e0).dims4()?;
            let masks = vec![mask.downsample(eh, ew)?; idx.len()];
            let mixed = mask::mix(pass.tape(), &[e0, e1], Some(&masks))?;
            let core = pass.core(mixed)?;
            let fmap = tape.value(core.groups[block_index - 1]);
            let (bn, bc, _, _) = fmap.dims4()?;
            let per = fmap.numel() / bn;
            if mean.is_empty() {
                mean = vec![0.0; per];
                m2 = vec![0.0; per];
                channels = bc;
            }
            for row in fmap.data().chunks(per) {
                count += 1;
                for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
                    let d = x - *m;
                    *m += d / count as f64;
                    *s += d * (x - *m);
                }
            }
        }
        let denom = count.saturating_sub(1).max(1) as f64;
        let plane = mean.len() / channels;
        let importance = m2
            .chunks(plane)
            .map(|ch| ch.iter().map(|s| s / denom).sum::<f64>() / plane as f64)
            .collect();
        out.push(importance);
    }
    Ok(out)
}

/// Pearson correlation coefficient; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceSection {
    pub block_index: usize,
    /// `M × C_block` channel importances.
    pub importance: Vec<Vec<f64>>,
    pub pearson: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharingReport {
    pub schema_version: u32,
    /// Seconds since the Unix epoch when the report was produced.
    pub timestamp: u64,
    pub config: serde_json::Value,
    pub encoder_hist: Vec<Vec<f64>>,
    pub classifier_hist: Vec<Vec<f64>>,
    /// Classifier per-feature ratios.
    pub per_feature_ratio: Vec<f64>,
    pub encoder_feature_ratio: Vec<f64>,
    pub share_rate_encoder: f64,
    pub share_rate_classifier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_importance: Option<Vec<VarianceSection>>,
}

/// Encoder and classifier share rates `(encoder, classifier)` in percent.
pub fn share_rates(model: &MimoModel) -> Result<(f64, f64)> {
    let (_, enc) = sharing_rate(&encoder_l1_histograms(model))?;
    let (_, cls) = sharing_rate(&classifier_l1_histograms(model))?;
    Ok((enc, cls))
}

impl SharingReport {
    /// Weight-based report; the variance section starts empty.
    pub fn from_model(model: &MimoModel, config: serde_json::Value) -> Result<Self> {
        let encoder_hist = encoder_l1_histograms(model);
        let classifier_hist = classifier_l1_histograms(model);
        let (encoder_feature_ratio, share_rate_encoder) = sharing_rate(&encoder_hist)?;
        let (per_feature_ratio, share_rate_classifier) = sharing_rate(&classifier_hist)?;
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            timestamp,
            config,
            encoder_hist,
            classifier_hist,
            per_feature_ratio,
            encoder_feature_ratio,
            share_rate_encoder,
            share_rate_classifier,
            variance_importance: None,
        })
    }
}

/// CSV with header `feature_index,h_0,h_1,...,ratio`.
pub fn histogram_csv(hists: &[Vec<f64>], ratios: &[f64]) -> String {
    let mut s = String::from("feature_index");
    for i in 0..hists.len() {
        s.push_str(&format!(",h_{i}"));
    }
    s.push_str(",ratio\n");
    for (c, r) in ratios.iter().enumerate() {
        s.push_str(&c.to_string());
        for h in hists {
            s.push_str(&format!(",{}", h[c]));
        }
        s.push_str(&format!(",{r}\n"));
    }
    s
}

/// Writes `path` (JSON) plus `<stem>_encoder_hist.csv` and
/// `<stem>_classifier_hist.csv` next to it. Returns every file written.
pub fn write_report(report: &SharingReport, path: &Path) -> Result<Vec<PathBuf>> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut written = vec![path.to_path_buf()];
    for (suffix, hists, ratios) in [
        ("encoder_hist", &report.encoder_hist, &report.encoder_feature_ratio),
        ("classifier_hist", &report.classifier_hist, &report.per_feature_ratio),
    ] {
        let p = dir.join(format!("{stem}_{suffix}.csv"));
        std::fs::write(&p, histogram_csv(hists, ratios)).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<SharingReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

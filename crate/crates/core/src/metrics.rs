//! Image quality measures and their reversal-tolerant pair variants.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hypercut::{label_of, project_sequences, Hyperplane, OrderEncoder};
use crate::scenes::FrameSequence;

/// Returned for identical images instead of infinity.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_shapes(a, b)?;
    if a.is_empty() {
        return Err(Error::Invalid("empty image".into()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// PSNR for peak value 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM over non-overlapping `window x window` tiles of `[H, W, C]`
/// images, every channel scored separately. Partial tiles at the right and
/// bottom edges are dropped.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    check_shapes(a, b)?;
    if a.rank() != 3 {
        return Err(Error::Invalid("ssim expects [H, W, C] images".into()));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if window == 0 || h < window || w < window {
        return Err(Error::Invalid(format!("{h}x{w} image is smaller than the {window}x{window} window")));
    }
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = (window * window) as f64;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for ty in 0..h / window {
            for tx in 0..w / window {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in ty * window..(ty + 1) * window {
                    for x in tx * window..(tx + 1) * window {
                        let i = (y * w + x) * c + ch;
                        let (p, q) = (da[i] as f64, db[i] as f64);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn check_sequences(pred: &FrameSequence, gt: &FrameSequence) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Invalid(format!("sequence lengths differ or are empty: {} vs {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// How a predicted frame is matched against the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMetricMode {
    /// Each frame takes the better of `x_k` and `x_{N-k}`.
    #[default]
    PerFrameMax,
    /// The whole sequence is scored in forward and in backward order and the
    /// better mean wins.
    SequenceMax,
}

fn pair_scores(
    pred: &FrameSequence,
    gt: &FrameSequence,
    score: impl Fn(&Tensor, &Tensor) -> Result<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sequences(pred, gt)?;
    let last = gt.len() - 1;
    let fwd = (0..=last).map(|k| score(&pred.frames[k], &gt.frames[k])).collect::<Result<Vec<_>>>()?;
    let bwd = (0..=last).map(|k| score(&pred.frames[k], &gt.frames[last - k])).collect::<Result<Vec<_>>>()?;
    Ok((fwd, bwd))
}

pub fn ppsnr_k(pred: &FrameSequence, gt: &FrameSequence, k: usize) -> Result<f64> {
    check_sequences(pred, gt)?;
    let last = gt.len() - 1;
    if k > last {
        return Err(Error::Invalid(format!("frame index {k} outside 0..={last}")));
    }
    Ok(psnr(&pred.frames[k], &gt.frames[k])?.max(psnr(&pred.frames[k], &gt.frames[last - k])?))
}

fn combine(fwd: Vec<f64>, bwd: Vec<f64>, mode: PairMetricMode) -> Vec<f64> {
    match mode {
        PairMetricMode::PerFrameMax => fwd.iter().zip(&bwd).map(|(a, b)| a.max(*b)).collect(),
        PairMetricMode::SequenceMax => {
            if mean(&fwd) >= mean(&bwd) {
                fwd
            } else {
                bwd
            }
        }
    }
}

/// Mean that sums mirrored entries first, so reversing `v` gives the same
/// bits.
fn mean(v: &[f64]) -> f64 {
    let n = v.len();
    let mut total: f64 = (0..n / 2).map(|k| v[k] + v[n - 1 - k]).sum();
    if n % 2 == 1 {
        total += v[n / 2];
    }
    total / n as f64
}

/// Per-frame pair PSNR for `k = 0..=N`.
pub fn ppsnr_all(pred: &FrameSequence, gt: &FrameSequence, mode: PairMetricMode) -> Result<Vec<f64>> {
    let (fwd, bwd) = pair_scores(pred, gt, psnr)?;
    Ok(combine(fwd, bwd, mode))
}

pub fn mean_ppsnr(pred: &FrameSequence, gt: &FrameSequence) -> Result<f64> {
    Ok(mean(&ppsnr_all(pred, gt, PairMetricMode::PerFrameMax)?))
}

pub fn pssim_all(pred: &FrameSequence, gt: &FrameSequence, mode: PairMetricMode) -> Result<Vec<f64>> {
    let (fwd, bwd) = pair_scores(pred, gt, |a, b| ssim(a, b, SSIM_WINDOW))?;
    Ok(combine(fwd, bwd, mode))
}

pub fn mean_pssim(pred: &FrameSequence, gt: &FrameSequence) -> Result<f64> {
    Ok(mean(&pssim_all(pred, gt, PairMetricMode::PerFrameMax)?))
}

/// Fraction of labels equal to 0 (the negative side of the hyperplane).
pub fn agreement_of(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Invalid("order agreement of an empty set".into()));
    }
    Ok(labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64)
}

/// Order labels of every prediction, batched.
pub fn order_labels(predictions: &[&FrameSequence], encoder: &OrderEncoder, h: &Hyperplane) -> Result<Vec<u8>> {
    project_sequences(encoder, h, predictions)?
        .iter()
        .map(|p| label_of(p).map(|l| l.value))
        .collect()
}

pub fn order_agreement(predictions: &[&FrameSequence], encoder: &OrderEncoder, h: &Hyperplane) -> Result<f64> {
    agreement_of(&order_labels(predictions, encoder, h)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: PairMetricMode,
    /// Mean over samples of the pair PSNR at each frame index.
    pub ppsnr: Vec<f64>,
    pub mean_ppsnr: f64,
    /// Mean pair PSNR over frames `0` and `N`.
    pub border_ppsnr: f64,
    pub mean_pssim: f64,
    pub order_agreement: Option<f64>,
    pub samples: usize,
}

impl MetricReport {
    /// Aggregates metrics over prediction/ground-truth pairs; agreement is
    /// filled in when an encoder is given.
    pub fn compute(
        preds: &[&FrameSequence],
        gts: &[&FrameSequence],
        mode: PairMetricMode,
        order: Option<(&OrderEncoder, &Hyperplane)>,
    ) -> Result<Self> {
        if preds.is_empty() || preds.len() != gts.len() {
            return Err(Error::Invalid("need equally many predictions and ground truths".into()));
        }
        let frames = gts[0].len();
        let mut ppsnr = vec![0.0; frames];
        let mut pssim = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            let v = ppsnr_all(p, g, mode)?;
            if v.len() != frames {
                return Err(Error::Invalid("sequences differ in length".into()));
            }
            ppsnr.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            pssim += mean(&pssim_all(p, g, mode)?);
        }
        let n = preds.len() as f64;
        ppsnr.iter_mut().for_each(|v| *v /= n);
        let order_agreement = match order {
            Some((e, h)) => Some(order_agreement(preds, e, h)?),
            None => None,
        };
        Ok(Self {
            mode,
            mean_ppsnr: mean(&ppsnr),
            border_ppsnr: (ppsnr[0] + ppsnr[frames - 1]) / 2.0,
            ppsnr,
            mean_pssim: pssim / n,
            order_agreement,
            samples: preds.len(),
        })
    }

    /// One `key=value` line per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            PairMetricMode::PerFrameMax => "per_frame_max",
            PairMetricMode::SequenceMax => "sequence_max",
        };
        let _ = writeln!(s, "ppsnr_mode={mode}");
        let _ = writeln!(s, "samples={}", self.samples);
        for (k, v) in self.ppsnr.iter().enumerate() {
            let _ = writeln!(s, "ppsnr_{k}={v:.6}");
        }
        let _ = writeln!(s, "mean_ppsnr={:.6}", self.mean_ppsnr);
        let _ = writeln!(s, "border_ppsnr={:.6}", self.border_ppsnr);
        let _ = writeln!(s, "mean_pssim={:.6}", self.mean_pssim);
        if let Some(a) = self.order_agreement {
            let _ = writeln!(s, "order_agreement={a:.6}");
        }
        s
    }

    /// Writes `metrics.txt` and `metrics.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

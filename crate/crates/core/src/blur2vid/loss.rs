use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::hypercut::{Hyperplane, OrderEncoder};
use crate::scenes::{symmetric_pairs, FrameSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    /// Mean squared error against the frames in their given order.
    Rec,
    /// Norms of pair differences and sums, blind to the order within a pair.
    OrderInvariant,
}

/// Norm used inside the order-invariant loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairNorm {
    #[default]
    L2,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "rec")]
    Rec,
    #[serde(rename = "oi")]
    Oi,
    #[serde(rename = "oi+hypercut")]
    OiHypercut,
    #[serde(rename = "rec+hypercut")]
    RecHypercut,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Rec, Regime::Oi, Regime::OiHypercut, Regime::RecHypercut];

    pub fn base(self) -> BaseLoss {
        match self {
            Regime::Rec | Regime::RecHypercut => BaseLoss::Rec,
            Regime::Oi | Regime::OiHypercut => BaseLoss::OrderInvariant,
        }
    }

    pub fn uses_hypercut(self) -> bool {
        matches!(self, Regime::OiHypercut | Regime::RecHypercut)
    }

    /// Loss configuration for this regime; `alpha` only applies to the
    /// regularized regimes.
    pub fn loss_config(self, alpha: f64) -> LossConfig {
        LossConfig {
            base: self.base(),
            alpha: if self.uses_hypercut() { alpha } else { 0.0 },
            norm: PairNorm::L2,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Rec => "rec",
            Regime::Oi => "oi",
            Regime::OiHypercut => "oi+hypercut",
            Regime::RecHypercut => "rec+hypercut",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}` (rec, oi, oi+hypercut, rec+hypercut)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub base: BaseLoss,
    /// Weight of the hyperplane regularizer.
    pub alpha: f64,
    pub norm: PairNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Regime::OiHypercut.loss_config(0.2)
    }
}

impl LossConfig {
    pub fn validate(&self, has_encoder: bool) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a non-negative number, got {}", self.alpha)));
        }
        if self.alpha > 0.0 && !has_encoder {
            return Err(Error::Config("alpha > 0 needs a trained order encoder".into()));
        }
        Ok(())
    }
}

fn check_pair(pred: &FrameSequence, gt: &FrameSequence) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() || pred.frames.iter().zip(&gt.frames).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Invalid("prediction and ground truth differ in shape".into()));
    }
    Ok(())
}

pub fn loss_rec(pred: &FrameSequence, gt: &FrameSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, x) in pred.frames.iter().zip(&gt.frames) {
        sum += p.data().iter().zip(x.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
        count += p.len();
    }
    Ok(sum / count as f64)
}

fn norm_of(it: impl Iterator<Item = f64>, norm: PairNorm) -> f64 {
    match norm {
        PairNorm::L2 => it.map(|v| v * v).sum::<f64>().sqrt(),
        PairNorm::L1 => it.map(f64::abs).sum(),
    }
}

fn combo(a: &Tensor, b: &Tensor, sign: f64, norm: PairNorm) -> f64 {
    norm_of(a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 + sign * y as f64), norm)
}

/// Per pair `| |p_k - p_{N-k}| - |x_k - x_{N-k}| | + | |p_k + p_{N-k}| - |x_k + x_{N-k}| |`,
/// summed over pairs, plus the summed squared error of the middle frame when
/// the sequence has one.
pub fn loss_order_invariant(pred: &FrameSequence, gt: &FrameSequence, norm: PairNorm) -> Result<f64> {
    check_pair(pred, gt)?;
    let (p, x) = (&pred.frames, &gt.frames);
    let mut total = 0.0;
    for (i, j) in symmetric_pairs(p.len()) {
        total += (combo(&p[i], &p[j], -1.0, norm) - combo(&x[i], &x[j], -1.0, norm)).abs();
        total += (combo(&p[i], &p[j], 1.0, norm) - combo(&x[i], &x[j], 1.0, norm)).abs();
    }
    if p.len() % 2 == 1 {
        let m = p.len() / 2;
        total += p[m].data().iter().zip(x[m].data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Sum over symmetric pairs of the projection of `H([p_k, p_{N-k}])` onto
/// `h`, averaged over the predictions.
pub fn hypercut_regularizer(preds: &[&FrameSequence], encoder: &OrderEncoder, h: &Hyperplane) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Invalid("regularizer of an empty batch".into()));
    }
    let projections = crate::hypercut::project_sequences(encoder, h, preds)?;
    let sum: f64 = projections.iter().flat_map(|s| &s.pairs).map(|p| p.forward as f64).sum();
    Ok(sum / preds.len() as f64)
}

/// Batch loss: mean base loss plus `alpha` times the regularizer. With
/// `alpha = 0` the regularizer is not evaluated at all.
pub fn total_loss(
    preds: &[&FrameSequence],
    gts: &[&FrameSequence],
    config: &LossConfig,
    order: Option<(&OrderEncoder, &Hyperplane)>,
) -> Result<f64> {
    config.validate(order.is_some())?;
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Invalid("need equally many predictions and ground truths".into()));
    }
    let mut base = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        base += match config.base {
            BaseLoss::Rec => loss_rec(p, g)?,
            BaseLoss::OrderInvariant => loss_order_invariant(p, g, config.norm)?,
        };
    }
    let base = base / preds.len() as f64;
    if config.alpha == 0.0 {
        return Ok(base);
    }
    let (e, h) = order.expect("validated");
    Ok(base + config.alpha * hypercut_regularizer(preds, e, h)?)
}

/// Layout of a batched sequence tensor `[B, (N+1)·C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SequenceLayout {
    fn frame(&self, g: &mut Graph, seq: NodeId, k: usize) -> NodeId {
        g.slice(seq, 1, k * self.channels, self.channels)
    }

    fn per_item(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `[B, ...]` to `[B]` by summing each item.
    fn row_sum(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let flat = g.reshape(x, &[self.batch, self.per_item()]);
        let ones = g.constant(Tensor::full(&[self.per_item(), 1], 1.0));
        let s = g.matmul(flat, ones);
        g.reshape(s, &[self.batch])
    }

    fn item_norm(&self, g: &mut Graph, x: NodeId, norm: PairNorm) -> NodeId {
        match norm {
            PairNorm::L2 => g.row_norm(x),
            PairNorm::L1 => {
                let a = g.abs(x);
                self.row_sum(g, a)
            }
        }
    }
}

/// Mean squared error over everything.
pub fn loss_rec_graph(g: &mut Graph, pred: NodeId, gt: NodeId) -> NodeId {
    let d = g.sub(pred, gt);
    let sq = g.mul(d, d);
    g.mean(sq)
}

/// Batch mean of [`loss_order_invariant`].
pub fn loss_order_invariant_graph(g: &mut Graph, pred: NodeId, gt: NodeId, layout: SequenceLayout, norm: PairNorm) -> NodeId {
    let mut terms = Vec::new();
    for (i, j) in symmetric_pairs(layout.frames) {
        let (pi, pj) = (layout.frame(g, pred, i), layout.frame(g, pred, j));
        let (xi, xj) = (layout.frame(g, gt, i), layout.frame(g, gt, j));
        for add in [false, true] {
            let pc = if add { g.add(pi, pj) } else { g.sub(pi, pj) };
            let xc = if add { g.add(xi, xj) } else { g.sub(xi, xj) };
            let pn = layout.item_norm(g, pc, norm);
            let xn = layout.item_norm(g, xc, norm);
            let d = g.sub(pn, xn);
            terms.push(g.abs(d));
        }
    }
    if layout.frames % 2 == 1 {
        let m = layout.frames / 2;
        let (pm, xm) = (layout.frame(g, pred, m), layout.frame(g, gt, m));
        let d = g.sub(pm, xm);
        let sq = g.mul(d, d);
        terms.push(layout.row_sum(g, sq));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.mean(acc)
}

/// Regularizer over a batched prediction; the encoder and `h` enter frozen.
pub fn hypercut_regularizer_graph(
    g: &mut Graph,
    pred: NodeId,
    layout: SequenceLayout,
    encoder: &OrderEncoder,
    h: &Hyperplane,
) -> Result<NodeId> {
    let pairs: Vec<NodeId> = symmetric_pairs(layout.frames)
        .into_iter()
        .map(|(i, j)| {
            let (pi, pj) = (layout.frame(g, pred, i), layout.frame(g, pred, j));
            g.concat(&[pi, pj], 1)
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Invalid("regularizer needs at least one symmetric pair".into()));
    }
    let stacked = if pairs.len() == 1 { pairs[0] } else { g.concat(&pairs, 0) };
    let emb = encoder.build(g, stacked, false)?;
    let hc = g.constant(h.column());
    let proj = g.matmul(emb, hc);
    let s = g.sum(proj);
    Ok(g.scale(s, 1.0 / layout.batch as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub base: NodeId,
    pub regularizer: Option<NodeId>,
}

pub fn total_loss_graph(
    g: &mut Graph,
    pred: NodeId,
    gt: NodeId,
    layout: SequenceLayout,
    config: &LossConfig,
    order: Option<(&OrderEncoder, &Hyperplane)>,
) -> Result<LossNodes> {
    config.validate(order.is_some())?;
    let base = match config.base {
        BaseLoss::Rec => loss_rec_graph(g, pred, gt),
        BaseLoss::OrderInvariant => loss_order_invariant_graph(g, pred, gt, layout, config.norm),
    };
    if config.alpha == 0.0 {
        return Ok(LossNodes { total: base, base, regularizer: None });
    }
    let (e, h) = order.expect("validated");
    let r = hypercut_regularizer_graph(g, pred, layout, e, h)?;
    let weighted = g.scale(r, config.alpha);
    let total = g.add(base, weighted);
    Ok(LossNodes { total, base, regularizer: Some(r) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::stack_nchw;

    fn img(v: &[f32]) -> Tensor {
        Tensor::new(vec![2, 2, 1], v.to_vec()).unwrap()
    }

    fn seq(frames: Vec<Tensor>) -> FrameSequence {
        FrameSequence::new(frames, 0).unwrap()
    }

    #[test]
    fn rec_known_values() {
        let gt = seq(vec![img(&[0.2; 4]), img(&[0.5; 4])]);
        assert_eq!(loss_rec(&gt, &gt).unwrap(), 0.0);
        let off = seq(vec![img(&[0.3; 4]), img(&[0.6; 4])]);
        assert!((loss_rec(&off, &gt).unwrap() - 0.01).abs() < 1e-7);
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.to_string().parse::<Regime>().unwrap(), r);
        }
        assert!("sharp".parse::<Regime>().is_err());
        assert_eq!(Regime::Oi.loss_config(0.2).alpha, 0.0);
    }

    #[test]
    fn alpha_requires_encoder() {
        assert!(LossConfig::default().validate(false).is_err());
        assert!(Regime::Oi.loss_config(0.2).validate(false).is_ok());
        assert!(LossConfig { alpha: -1.0, ..LossConfig::default() }.validate(true).is_err());
    }

    #[test]
    fn graph_losses_match_host() {
        let frames: Vec<Tensor> = (0..3)
            .map(|k| img(&[0.1 * k as f32, 0.7, 0.3 + 0.1 * k as f32, 0.9 - 0.2 * k as f32]))
            .collect();
        let gt = seq(frames.clone());
        let pred = seq(frames.iter().map(|f| f.map(|v| (v * 0.8 + 0.05).sin())).collect());
        let layout = SequenceLayout { batch: 1, frames: 3, channels: 1, height: 2, width: 2 };
        for norm in [PairNorm::L2, PairNorm::L1] {
            let mut g = Graph::new();
            let p = g.input("p", &[1, 3, 2, 2]);
            let x = g.input("x", &[1, 3, 2, 2]);
            let oi = loss_order_invariant_graph(&mut g, p, x, layout, norm);
            let rec = loss_rec_graph(&mut g, p, x);
            let feed = [
                ("p".to_string(), stack_nchw(&[pred.frames.iter().collect()])),
                ("x".to_string(), stack_nchw(&[gt.frames.iter().collect()])),
            ]
            .into();
            g.evaluate(&feed).unwrap();
            let host_oi = loss_order_invariant(&pred, &gt, norm).unwrap();
            assert!((g.value(oi).unwrap().item() as f64 - host_oi).abs() < 1e-5);
            let host_rec = loss_rec(&pred, &gt).unwrap();
            assert!((g.value(rec).unwrap().item() as f64 - host_rec).abs() < 1e-6);
        }
    }
}

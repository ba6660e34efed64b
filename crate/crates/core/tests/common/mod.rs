#![allow(dead_code)]

use hypercut::blur2vid::{
    loss_order_invariant_graph, loss_rec_graph, total_loss_graph, LossConfig, PairNorm, Regime, SequenceLayout,
};
use hypercut::diffcore::{gradcheck, rng_from_seed, Feed, Graph, GradcheckConfig, GradcheckReport, Tensor};
use hypercut::hypercut::{hypercut_loss_graph, pair_batch, EncoderConfig, Hyperplane, OrderEncoder};
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn tiny_encoder_config(side: usize, channels: usize) -> EncoderConfig {
    EncoderConfig {
        frame_channels: channels,
        height: side,
        width: side,
        widths: vec![3, 4],
        dim: 6,
        ..EncoderConfig::default()
    }
}

pub const SIDE: usize = 4;
pub const FRAMES: usize = 5;

fn layout(batch: usize) -> SequenceLayout {
    SequenceLayout {
        batch,
        frames: FRAMES,
        channels: 1,
        height: SIDE,
        width: SIDE,
    }
}

fn loss_config() -> GradcheckConfig {
    GradcheckConfig {
        eps: 1e-5,
        ..GradcheckConfig::default()
    }
}

/// Prediction as a trainable parameter, ground truth as input.
fn sequence_graph(seed: u64) -> (Graph, Feed, hypercut::diffcore::NodeId, hypercut::diffcore::NodeId) {
    let batch = 2;
    let mut g = Graph::new();
    let pred = g.param("pred", random_tensor(&[batch, FRAMES, SIDE, SIDE], seed, 0.0, 1.0), true);
    let gt = g.input("gt", &[batch, FRAMES, SIDE, SIDE]);
    let feed: Feed = [("gt".to_string(), random_tensor(&[batch, FRAMES, SIDE, SIDE], seed + 100, 0.0, 1.0))].into();
    (g, feed, pred, gt)
}

pub fn check_loss_rec(seed: u64) -> GradcheckReport {
    let (mut g, feed, pred, gt) = sequence_graph(seed);
    let loss = loss_rec_graph(&mut g, pred, gt);
    gradcheck(&mut g, &feed, loss, &loss_config()).unwrap()
}

pub fn check_loss_order_invariant(seed: u64, norm: PairNorm) -> GradcheckReport {
    let (mut g, feed, pred, gt) = sequence_graph(seed);
    let loss = loss_order_invariant_graph(&mut g, pred, gt, layout(2), norm);
    gradcheck(&mut g, &feed, loss, &loss_config()).unwrap()
}

/// Gradients reach the encoder weights; the pairs are fixed inputs.
pub fn check_hypercut_loss(seed: u64) -> GradcheckReport {
    let enc = OrderEncoder::new(tiny_encoder_config(8, 1), seed).unwrap();
    let h = Hyperplane::sample(enc.dim(), seed).unwrap();
    let frames: Vec<Tensor> = (0..6).map(|i| random_tensor(&[8, 8, 1], seed * 31 + i, 0.0, 1.0)).collect();
    let pairs: Vec<(&Tensor, &Tensor)> = frames.chunks(2).map(|c| (&c[0], &c[1])).collect();
    let input = pair_batch(&pairs);
    let mut g = Graph::new();
    let x = g.input("pairs", input.shape());
    let nodes = hypercut_loss_graph(&mut g, &enc, &h, x, pairs.len(), true).unwrap();
    let feed: Feed = [("pairs".to_string(), input)].into();
    gradcheck(&mut g, &feed, nodes.loss, &loss_config()).unwrap()
}

/// Full objective with the regularizer; gradients flow through the frozen
/// encoder into the prediction.
pub fn check_total_loss(seed: u64, regime: Regime) -> GradcheckReport {
    let enc = OrderEncoder::new(tiny_encoder_config(SIDE, 1), seed + 7).unwrap();
    let h = Hyperplane::sample(enc.dim(), seed + 7).unwrap();
    let (mut g, feed, pred, gt) = sequence_graph(seed);
    let cfg: LossConfig = regime.loss_config(0.2);
    let nodes = total_loss_graph(&mut g, pred, gt, layout(2), &cfg, Some((&enc, &h))).unwrap();
    gradcheck(&mut g, &feed, nodes.total, &loss_config()).unwrap()
}

//! Order encoder, fixed hyperplane and the separation objective that puts a
//! frame pair and its swap on opposite sides of the hyperplane.

mod encoder;
mod eval;

pub use encoder::{EncoderConfig, EncoderHead, Hyperplane, OrderEncoder};
pub use eval::{
    con_rate, con_rate_of, hit_rate, hit_rate_of, label_of, order_label, project_embeddings_2d, project_sequences,
    separability_accuracy, OrderLabel, PairProjection, ProjectedPoint, SequenceProjections,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_update, rng_from_seed, softplus, AdamConfig, AdamState, Feed, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::layout::{dihedral, stack_nchw};
use crate::scenes::FrameSequence;

/// Product of the two signed projections of `(a, b)` and `(b, a)`. Negative
/// means the pair is separated.
pub fn separation_product(encoder: &OrderEncoder, h: &Hyperplane, a: &Tensor, b: &Tensor) -> Result<f32> {
    let e = encoder.embed_pairs(&[(a, b), (b, a)])?;
    Ok(h.project(&e[0]) * h.project(&e[1]))
}

/// Nodes of a separation-loss graph over `B` pairs.
#[derive(Clone, Copy, Debug)]
pub struct HypercutLossNodes {
    pub loss: NodeId,
    /// `[B, 1]` projections of `[a, b]`.
    pub forward: NodeId,
    /// `[B, 1]` projections of `[b, a]`.
    pub reverse: NodeId,
}

/// Builds the input tensor for [`hypercut_loss_graph`]: forward pairs in rows
/// `0..B`, swapped pairs in rows `B..2B`.
pub fn pair_batch(pairs: &[(&Tensor, &Tensor)]) -> Tensor {
    let rows: Vec<Vec<&Tensor>> = pairs
        .iter()
        .map(|(a, b)| vec![*a, *b])
        .chain(pairs.iter().map(|(a, b)| vec![*b, *a]))
        .collect();
    stack_nchw(&rows)
}

/// Mean softplus of the separation products. `input` is a `[2B, 2C, H, W]`
/// node laid out as by [`pair_batch`]. `h` enters as a constant.
pub fn hypercut_loss_graph(
    g: &mut Graph,
    encoder: &OrderEncoder,
    h: &Hyperplane,
    input: NodeId,
    batch: usize,
    trainable: bool,
) -> Result<HypercutLossNodes> {
    let emb = encoder.build(g, input, trainable)?;
    let hc = g.constant(h.column());
    let proj = g.matmul(emb, hc);
    let forward = g.slice(proj, 0, 0, batch);
    let reverse = g.slice(proj, 0, batch, batch);
    let prod = g.mul(forward, reverse);
    let sp = g.softplus(prod);
    let loss = g.mean(sp);
    Ok(HypercutLossNodes { loss, forward, reverse })
}

/// Separation loss of a batch of pairs, evaluated without gradients.
pub fn hypercut_loss(encoder: &OrderEncoder, h: &Hyperplane, pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("separation loss needs at least one pair".into()));
    }
    let swapped: Vec<(&Tensor, &Tensor)> = pairs.iter().map(|(a, b)| (*b, *a)).collect();
    let fwd = encoder.embed_pairs(pairs)?;
    let rev = encoder.embed_pairs(&swapped)?;
    let total: f64 = fwd
        .iter()
        .zip(&rev)
        .map(|(f, r)| softplus((h.project(f) * h.project(r)) as f64))
        .sum();
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypercutTrainConfig {
    pub epochs: usize,
    /// Pairs per step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Apply a random flip or transpose, shared by both frames, to each pair.
    #[serde(default)]
    pub augment: bool,
    pub encoder: EncoderConfig,
}

impl Default for HypercutTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 16,
            lr: 3e-4,
            seed: 0,
            augment: true,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypercutEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of training pairs separated during the epoch.
    pub hit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypercutTrainLog {
    pub epochs: Vec<HypercutEpoch>,
    /// Loss on a fixed probe subset before the first step and after the last.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub pair_count: usize,
    /// Fraction of training pairs whose two frames are identical.
    pub palindromic_fraction: f64,
    pub final_hit: f64,
    /// True when no training pair can be separated (all palindromic) or none
    /// ended up separated.
    pub degenerate: bool,
}

pub struct TrainedOrder {
    pub encoder: OrderEncoder,
    pub hyperplane: Hyperplane,
    pub log: HypercutTrainLog,
}

const PROBE_PAIRS: usize = 256;

fn sequence_pairs<'a>(seqs: &[&'a FrameSequence]) -> Vec<(&'a Tensor, &'a Tensor)> {
    seqs.iter()
        .flat_map(|s| s.symmetric_pairs().into_iter().map(move |(i, j)| (&s.frames[i], &s.frames[j])))
        .collect()
}

/// Trains a fresh encoder on all symmetric pairs of `sequences`. The
/// hyperplane is drawn once from the seed and never updated. `on_epoch` sees
/// each finished epoch.
pub fn train_order_encoder(
    sequences: &[&FrameSequence],
    config: &HypercutTrainConfig,
    mut on_epoch: impl FnMut(&HypercutEpoch),
) -> Result<TrainedOrder> {
    if sequences.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    if sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::Invalid("every sequence needs at least 2 frames".into()));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = rng_from_seed(config.seed);
    let hyperplane = Hyperplane::sample(config.encoder.dim, config.seed)?;
    let mut encoder = OrderEncoder::new(config.encoder.clone(), config.seed.wrapping_add(1))?;
    let pairs = sequence_pairs(sequences);
    let palindromic = pairs.iter().filter(|(a, b)| a.data() == b.data()).count();
    let probe = &pairs[..pairs.len().min(PROBE_PAIRS)];
    let initial_loss = hypercut_loss(&encoder, &hyperplane, probe)?;

    let mut adam = AdamState::new(&encoder.params, AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let symmetries = if config.encoder.height == config.encoder.width { 8 } else { 4 };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let owned: Vec<(Tensor, Tensor)>;
            let batch: Vec<(&Tensor, &Tensor)> = if config.augment {
                owned = chunk
                    .iter()
                    .map(|&i| {
                        let t = rng.gen_range(0..symmetries);
                        (dihedral(pairs[i].0, t), dihedral(pairs[i].1, t))
                    })
                    .collect();
                owned.iter().map(|(a, b)| (a, b)).collect()
            } else {
                chunk.iter().map(|&i| pairs[i]).collect()
            };
            let input = pair_batch(&batch);
            let mut g = Graph::new();
            let x = g.input("pairs", input.shape());
            let nodes = hypercut_loss_graph(&mut g, &encoder, &hyperplane, x, batch.len(), true)?;
            let feed: Feed = [("pairs".to_string(), input)].into();
            g.evaluate(&feed)?;
            let loss = g.value(nodes.loss).expect("evaluated").item() as f64;
            let fwd = g.value(nodes.forward).expect("evaluated").data();
            let rev = g.value(nodes.reverse).expect("evaluated").data();
            hits += fwd.iter().zip(rev).filter(|(f, r)| *f * *r < 0.0).count();
            loss_sum += loss * batch.len() as f64;
            let grads = g.backward(nodes.loss)?;
            adam_update(&mut encoder.params, &grads, &mut adam)?;
        }
        let record = HypercutEpoch {
            epoch,
            loss: loss_sum / pairs.len() as f64,
            hit: hits as f64 / pairs.len() as f64,
        };
        on_epoch(&record);
        epochs.push(record);
    }

    let final_loss = hypercut_loss(&encoder, &hyperplane, probe)?;
    let projections = project_sequences(&encoder, &hyperplane, sequences)?;
    let final_hit = hit_rate_of(&projections)?;
    let log = HypercutTrainLog {
        epochs,
        initial_loss,
        final_loss,
        pair_count: pairs.len(),
        palindromic_fraction: palindromic as f64 / pairs.len().max(1) as f64,
        final_hit,
        degenerate: palindromic == pairs.len() || final_hit == 0.0,
    };
    Ok(TrainedOrder { encoder, hyperplane, log })
}

/// JSON record stored beside the hyperplane sidecar.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct HyperplaneMeta {
    seed: u64,
    dim: usize,
}

/// Writes `encoder.hckpt`, `encoder.json`, `hyperplane.bin` and
/// `hyperplane.json` into `dir`.
pub fn save_order_model(dir: &Path, encoder: &OrderEncoder, h: &Hyperplane) -> Result<()> {
    encoder.save(dir)?;
    let path = dir.join("hyperplane.bin");
    std::fs::write(&path, h.encode()).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("hyperplane.json");
    let meta = HyperplaneMeta { seed: h.seed, dim: h.dim() };
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_order_model(dir: &Path) -> Result<(OrderEncoder, Hyperplane)> {
    let encoder = OrderEncoder::load(dir)?;
    let path = dir.join("hyperplane.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: HyperplaneMeta = serde_json::from_str(&text)?;
    let path = dir.join("hyperplane.bin");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let h = Hyperplane::decode(&bytes, meta.seed)?;
    if h.dim() != meta.dim || h.dim() != encoder.dim() {
        return Err(Error::format("hyperplane", "dimension disagrees with the encoder"));
    }
    Ok((encoder, h))
}

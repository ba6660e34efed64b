//! Multi-frame deblurring: a predictor from one blurry image to `N + 1`
//! frames, the reconstruction and order-invariant objectives, and the
//! hyperplane regularizer that pins the output order.

mod loss;
mod predictor;

pub use loss::{
    hypercut_regularizer, hypercut_regularizer_graph, loss_order_invariant, loss_order_invariant_graph, loss_rec,
    loss_rec_graph, total_loss, total_loss_graph, BaseLoss, LossConfig, LossNodes, PairNorm, Regime, SequenceLayout,
};
pub use predictor::{predict_sequence, FramePredictor, PredictorConfig};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_update, rng_from_seed, AdamConfig, AdamState, Feed, Graph, Tensor};
use crate::error::{Error, Result};
use crate::hypercut::{Hyperplane, OrderEncoder};
use crate::layout::stack_nchw;
use crate::metrics::{order_agreement, MetricReport, PairMetricMode};
use crate::scenes::{FrameSequence, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeblurTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub predictor: PredictorConfig,
}

impl Default for DeblurTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
            predictor: PredictorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeblurEpoch {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub test_ppsnr_mean: f64,
    /// `None` when no encoder is available to label predictions.
    pub order_agreement: Option<f64>,
}

impl DeblurEpoch {
    /// `epoch=<i> loss=<f> test_ppsnr_mean=<f> order_agreement=<f>`; a missing
    /// agreement prints as `nan`.
    pub fn log_line(&self) -> String {
        let agreement = match self.order_agreement {
            Some(a) => format!("{a:.6}"),
            None => "nan".into(),
        };
        format!(
            "epoch={} loss={:.6} test_ppsnr_mean={:.6} order_agreement={agreement}",
            self.epoch, self.loss, self.test_ppsnr_mean
        )
    }
}

pub struct TrainedDeblur {
    pub model: FramePredictor,
    pub log: Vec<DeblurEpoch>,
}

fn check_geometry(samples: &[&Sample], config: &PredictorConfig) -> Result<()> {
    for s in samples {
        let (h, w, c) = s.sequence.geometry().ok_or_else(|| Error::Invalid("sample without frames".into()))?;
        if (h, w, c) != (config.height, config.width, config.channels) || s.sequence.len() != config.frames {
            return Err(Error::Invalid(format!(
                "sample geometry {}x{}x{}x{} differs from the predictor's",
                s.sequence.len(),
                h,
                w,
                c
            )));
        }
    }
    Ok(())
}

/// Pair-PSNR report of `model` on `samples`, with agreement when an encoder
/// is given.
pub fn evaluate_deblur(
    model: &FramePredictor,
    samples: &[&Sample],
    order: Option<(&OrderEncoder, &Hyperplane)>,
    mode: PairMetricMode,
) -> Result<(MetricReport, Vec<FrameSequence>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.blurry.image).collect();
    let preds = model.predict_images(&images)?;
    let pred_refs: Vec<&FrameSequence> = preds.iter().collect();
    let gts: Vec<&FrameSequence> = samples.iter().map(|s| &s.sequence).collect();
    let report = MetricReport::compute(&pred_refs, &gts, mode, order)?;
    Ok((report, preds))
}

/// Trains a predictor under `config.loss`. `order` is the frozen encoder and
/// hyperplane: required when `alpha > 0`, and used for the agreement column
/// of the log whenever present.
pub fn train_deblur(
    train: &[&Sample],
    test: &[&Sample],
    config: &DeblurTrainConfig,
    order: Option<(&OrderEncoder, &Hyperplane)>,
    mut on_epoch: impl FnMut(&DeblurEpoch),
) -> Result<TrainedDeblur> {
    if train.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    config.loss.validate(order.is_some())?;
    check_geometry(train, &config.predictor)?;
    check_geometry(test, &config.predictor)?;
    if let Some((e, h)) = order {
        let p = &config.predictor;
        let ec = &e.config;
        if (ec.height, ec.width, ec.frame_channels) != (p.height, p.width, p.channels) || h.dim() != e.dim() {
            return Err(Error::Invalid("order encoder geometry differs from the dataset".into()));
        }
    }

    let mut rng = rng_from_seed(config.seed);
    let mut model = FramePredictor::new(config.predictor.clone(), config.seed.wrapping_add(1))?;
    let mut adam = AdamState::new(&model.params, AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let p = &config.predictor;
    let mut order_idx: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order_idx.chunks(config.batch) {
            let blurry = stack_nchw(&chunk.iter().map(|&i| vec![&train[i].blurry.image]).collect::<Vec<_>>());
            let gt = stack_nchw(&chunk.iter().map(|&i| train[i].sequence.frames.iter().collect()).collect::<Vec<_>>());
            let layout = SequenceLayout {
                batch: chunk.len(),
                frames: p.frames,
                channels: p.channels,
                height: p.height,
                width: p.width,
            };
            let mut g = Graph::new();
            let x = g.input("blurry", blurry.shape());
            let y = g.input("gt", gt.shape());
            let pred = model.build(&mut g, x)?;
            let nodes = total_loss_graph(&mut g, pred, y, layout, &config.loss, order)?;
            let feed: Feed = [("blurry".to_string(), blurry), ("gt".to_string(), gt)].into();
            g.evaluate(&feed)?;
            loss_sum += g.value(nodes.total).expect("evaluated").item() as f64 * chunk.len() as f64;
            let grads = g.backward(nodes.total)?;
            adam_update(&mut model.params, &grads, &mut adam)?;
        }
        let (test_ppsnr_mean, agreement) = if test.is_empty() {
            (f64::NAN, None)
        } else {
            let (report, preds) = evaluate_deblur(&model, test, None, PairMetricMode::PerFrameMax)?;
            let agreement = match order {
                Some((e, h)) => Some(order_agreement(&preds.iter().collect::<Vec<_>>(), e, h)?),
                None => None,
            };
            (report.mean_ppsnr, agreement)
        };
        let record = DeblurEpoch {
            epoch,
            loss: loss_sum / train.len() as f64,
            test_ppsnr_mean,
            order_agreement: agreement,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainedDeblur { model, log })
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{self, rng_from_seed, Feed, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::layout::{frame_from_nchw, stack_nchw};
use crate::scenes::{BlurryObservation, FrameSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `N + 1`.
    pub frames: usize,
    /// Channels after the first and second stride-2 convolutions.
    pub widths: [usize; 2],
    pub slope: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 32,
            width: 32,
            frames: 7,
            widths: [32, 64],
            slope: 0.2,
        }
    }
}

/// Encoder-decoder mapping one blurry `[H, W, C]` image to `N + 1` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePredictor {
    pub config: PredictorConfig,
    pub params: ParamStore,
}

const PREDICT_CHUNK: usize = 64;

impl FramePredictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.channels == 0 || c.frames == 0 || c.widths.contains(&0) {
            return Err(Error::Config("predictor needs positive channels, frames and widths".into()));
        }
        if c.height % 4 != 0 || c.width % 4 != 0 {
            return Err(Error::Config(format!("predictor needs sides divisible by 4, got {}x{}", c.height, c.width)));
        }
        let [w1, w2] = c.widths;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        params.init_conv("dec.down1", c.channels, w1, 3, &mut rng);
        params.init_conv("dec.down2", w1, w2, 3, &mut rng);
        params.init_conv("dec.res.conv1", w2, w2, 3, &mut rng);
        params.init_conv("dec.res.conv2", w2, w2, 3, &mut rng);
        params.init_conv_transpose("dec.up1", w2, w1, 4, &mut rng);
        params.init_conv_transpose("dec.up2", 2 * w1, w1, 4, &mut rng);
        params.init_conv("dec.out", w1 + c.channels, c.frames * c.channels, 3, &mut rng);
        Ok(Self { config, params })
    }

    /// Appends the network to `g`. `input` is `[B, C, H, W]`; the result is
    /// `[B, (N+1)·C, H, W]` in `(0, 1)`, frame `k` in channels `k·C..(k+1)·C`.
    pub fn build(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let slope = self.config.slope;
        let p = &self.params;
        let bind = |g: &mut Graph, name: &str| -> Result<(NodeId, NodeId)> {
            Ok((p.bind(g, &format!("{name}.w"), true)?, p.bind(g, &format!("{name}.b"), true)?))
        };
        let conv = |g: &mut Graph, x: NodeId, name: &str, stride: usize| -> Result<NodeId> {
            let (w, b) = bind(g, name)?;
            let y = g.conv2d(x, w, stride, 1);
            Ok(g.add_bias(y, b))
        };
        let up = |g: &mut Graph, x: NodeId, name: &str| -> Result<NodeId> {
            let (w, b) = bind(g, name)?;
            let y = g.conv_transpose2d(x, w, 2, 1);
            let y = g.add_bias(y, b);
            Ok(g.leaky_relu(y, slope))
        };
        let e1 = conv(g, input, "dec.down1", 2)?;
        let e1 = g.leaky_relu(e1, slope);
        let e2 = conv(g, e1, "dec.down2", 2)?;
        let e2 = g.leaky_relu(e2, slope);
        let r = conv(g, e2, "dec.res.conv1", 1)?;
        let r = g.leaky_relu(r, slope);
        let r = conv(g, r, "dec.res.conv2", 1)?;
        let s = g.add(e2, r);
        let mid = g.leaky_relu(s, slope);
        let d1 = up(g, mid, "dec.up1")?;
        let d1 = g.concat(&[d1, e1], 1);
        let d2 = up(g, d1, "dec.up2")?;
        let d2 = g.concat(&[d2, input], 1);
        let out = conv(g, d2, "dec.out", 1)?;
        Ok(g.sigmoid(out))
    }

    pub fn check_image(&self, img: &Tensor) -> Result<()> {
        let c = &self.config;
        if img.shape() != [c.height, c.width, c.channels] {
            return Err(Error::Invalid(format!(
                "image shape {:?} does not match predictor geometry {}x{}x{}",
                img.shape(),
                c.height,
                c.width,
                c.channels
            )));
        }
        Ok(())
    }

    /// Predicted sequences for many blurry images.
    pub fn predict_images(&self, images: &[&Tensor]) -> Result<Vec<FrameSequence>> {
        let c = self.config.channels;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_CHUNK) {
            for img in chunk {
                self.check_image(img)?;
            }
            let rows: Vec<Vec<&Tensor>> = chunk.iter().map(|t| vec![*t]).collect();
            let batch = stack_nchw(&rows);
            let mut g = Graph::new();
            let x = g.input("blurry", batch.shape());
            let y = self.build(&mut g, x)?;
            g.mark_output("frames", y);
            let feed: Feed = [("blurry".to_string(), batch)].into();
            let frames = g.evaluate(&feed)?.remove("frames").expect("marked");
            for b in 0..chunk.len() {
                let seq = (0..self.config.frames).map(|k| frame_from_nchw(&frames, b, k * c, c)).collect();
                out.push(FrameSequence::new(seq, 0)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        diffcore::save_checkpoint(&self.params, &dir.join("predictor.hckpt"))?;
        let path = dir.join("predictor.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("predictor.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: PredictorConfig = serde_json::from_str(&text)?;
        let params = diffcore::load_checkpoint(&dir.join("predictor.hckpt"))?;
        let fresh = Self::new(config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::format("checkpoint", format!("`{name}` has the wrong shape")));
            }
        }
        Ok(Self { config, params })
    }
}

pub fn predict_sequence(model: &FramePredictor, y: &BlurryObservation) -> Result<FrameSequence> {
    let mut seq = model.predict_images(&[&y.image])?.remove(0);
    seq.seed = y.source;
    Ok(seq)
}

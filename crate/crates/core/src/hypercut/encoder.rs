use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, rng_from_seed, Feed, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::layout::stack_nchw;

/// Fixed unit normal `h` through the origin; the side of an embedding is the
/// sign of its inner product with `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperplane {
    normal: Vec<f32>,
    pub seed: u64,
}

impl Hyperplane {
    /// Draws `h ~ N(0, I)` and normalizes it.
    pub fn sample(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("hyperplane dimension must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::from_normal(raw.iter().map(|&v| v as f32).collect(), seed)
    }

    pub fn from_normal(normal: Vec<f32>, seed: u64) -> Result<Self> {
        let norm = normal.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Invalid("hyperplane normal must be finite and nonzero".into()));
        }
        Ok(Self {
            normal: normal.iter().map(|&v| (v as f64 / norm) as f32).collect(),
            seed,
        })
    }

    pub fn normal(&self) -> &[f32] {
        &self.normal
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn project(&self, embedding: &[f32]) -> f32 {
        embedding.iter().zip(&self.normal).map(|(a, b)| a * b).sum()
    }

    /// `[n, 1]` column used as a constant in projection graphs.
    pub fn column(&self) -> Tensor {
        Tensor::new(vec![self.normal.len(), 1], self.normal.clone()).expect("column shape")
    }

    /// Sidecar record: the `n` normal entries as little-endian `f32`.
    pub fn encode(&self) -> Vec<u8> {
        self.normal.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn decode(bytes: &[u8], seed: u64) -> Result<Self> {
        if bytes.is_empty() || bytes.len() % 4 != 0 {
            return Err(Error::format("hyperplane", format!("{} bytes is not a whole f32 vector", bytes.len())));
        }
        let normal: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("len 4")))
            .collect();
        let norm = normal.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 {
            return Err(Error::format("hyperplane", format!("normal has length {norm}, expected 1")));
        }
        Ok(Self { normal, seed })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels of one frame; the encoder sees two stacked frames.
    pub frame_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the stride-2 convolution stack.
    pub widths: Vec<usize>,
    /// Embedding length `n`.
    pub dim: usize,
    pub slope: f64,
    /// Start the first convolution with opposite weights on the two frames,
    /// so early features respond to their difference.
    #[serde(default)]
    pub antisymmetric_init: bool,
    #[serde(default)]
    pub head: EncoderHead,
}

/// How the final feature map is reduced before the linear layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderHead {
    AveragePool,
    #[default]
    /// Keeps spatial layout: the whole map feeds the linear layer.
    Flatten,
}

impl EncoderConfig {
    /// Side length of the final feature map along each axis.
    fn final_size(&self) -> (usize, usize) {
        let mut hw = (self.height, self.width);
        for _ in &self.widths {
            hw = ((hw.0 - 1) / 2 + 1, (hw.1 - 1) / 2 + 1);
        }
        hw
    }

    fn head_inputs(&self) -> usize {
        let c = *self.widths.last().expect("non-empty widths");
        match self.head {
            EncoderHead::AveragePool => c,
            EncoderHead::Flatten => {
                let (h, w) = self.final_size();
                c * h * w
            }
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            frame_channels: 1,
            height: 32,
            width: 32,
            widths: vec![16, 32, 64],
            dim: 128,
            slope: 0.2,
            antisymmetric_init: true,
            head: EncoderHead::Flatten,
        }
    }
}

/// Maps a channel-stacked frame pair `[a, b]` to a unit vector in `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

/// Pairs evaluated per graph when scoring many pairs.
const EVAL_CHUNK: usize = 128;

impl OrderEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.dim == 0 || config.frame_channels == 0 {
            return Err(Error::Config("encoder needs conv widths, channels and a positive dimension".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::new();
        let mut cin = 2 * config.frame_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            params.init_conv(&format!("enc.conv{i}"), cin, w, 3, &mut rng);
            cin = w;
        }
        if config.antisymmetric_init {
            let w = params.get_mut("enc.conv0.w")?;
            let (cout, c) = (config.widths[0], config.frame_channels);
            let k2 = 9;
            for o in 0..cout {
                for i in 0..c {
                    for t in 0..k2 {
                        let src = (o * 2 * c + i) * k2 + t;
                        let dst = (o * 2 * c + c + i) * k2 + t;
                        w.data_mut()[dst] = -w.data()[src];
                    }
                }
            }
        }
        params.init_conv("enc.res.conv1", cin, cin, 3, &mut rng);
        params.init_conv("enc.res.conv2", cin, cin, 3, &mut rng);
        params.init_linear("enc.head", config.head_inputs(), config.dim, &mut rng);
        Ok(Self { config, params })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Appends the encoder to `g`. `input` is `[B, 2C, H, W]`; returns the
    /// unit embeddings `[B, n]`.
    pub fn build(&self, g: &mut Graph, input: NodeId, trainable: bool) -> Result<NodeId> {
        let slope = self.config.slope;
        let p = &self.params;
        let conv = |g: &mut Graph, x: NodeId, name: &str, stride: usize| -> Result<NodeId> {
            let w = p.bind(g, &format!("{name}.w"), trainable)?;
            let b = p.bind(g, &format!("{name}.b"), trainable)?;
            let y = g.conv2d(x, w, stride, 1);
            Ok(g.add_bias(y, b))
        };
        let mut x = input;
        for i in 0..self.config.widths.len() {
            let y = conv(g, x, &format!("enc.conv{i}"), 2)?;
            x = g.leaky_relu(y, slope);
        }
        let r = conv(g, x, "enc.res.conv1", 1)?;
        let r = g.leaky_relu(r, slope);
        let r = conv(g, r, "enc.res.conv2", 1)?;
        let sum = g.add(x, r);
        let x = g.leaky_relu(sum, slope);
        let pooled = match self.config.head {
            EncoderHead::AveragePool => g.global_avg_pool(x),
            EncoderHead::Flatten => g.flatten(x),
        };
        let w = p.bind(g, "enc.head.w", trainable)?;
        let b = p.bind(g, "enc.head.b", trainable)?;
        let z = g.matmul(pooled, w);
        let z = g.add_bias(z, b);
        Ok(g.l2_normalize(z))
    }

    fn check_frame(&self, t: &Tensor) -> Result<()> {
        let c = &self.config;
        if t.shape() != [c.height, c.width, c.frame_channels] {
            return Err(Error::Invalid(format!(
                "frame shape {:?} does not match encoder geometry {}x{}x{}",
                t.shape(),
                c.height,
                c.width,
                c.frame_channels
            )));
        }
        Ok(())
    }

    /// Embeddings of `[a, b]` for every pair, batched.
    pub fn embed_pairs(&self, pairs: &[(&Tensor, &Tensor)]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            for (a, b) in chunk {
                self.check_frame(a)?;
                self.check_frame(b)?;
            }
            let rows: Vec<Vec<&Tensor>> = chunk.iter().map(|(a, b)| vec![*a, *b]).collect();
            let batch = stack_nchw(&rows);
            let mut g = Graph::new();
            let x = g.input("pairs", batch.shape());
            let e = self.build(&mut g, x, false)?;
            g.mark_output("embedding", e);
            let feed: Feed = [("pairs".to_string(), batch)].into();
            let emb = g.evaluate(&feed)?.remove("embedding").expect("marked");
            out.extend(emb.data().chunks(self.dim()).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Unit embedding of the channel concatenation `[a, b]`.
    pub fn embed_pair(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
        Ok(self.embed_pairs(&[(a, b)])?.remove(0))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        diffcore::save_checkpoint(&self.params, &dir.join("encoder.hckpt"))?;
        let path = dir.join("encoder.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("encoder.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: EncoderConfig = serde_json::from_str(&text)?;
        let params = diffcore::load_checkpoint(&dir.join("encoder.hckpt"))?;
        let fresh = Self::new(config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::format("checkpoint", format!("`{name}` has the wrong shape")));
            }
        }
        Ok(Self { config, params })
    }
}

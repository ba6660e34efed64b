//! On-disk dataset: a directory holding `manifest.json` and one
//! `sample_%06d.b2v` file per sample.
//!
//! A `.b2v` file is the magic `B2V1`, then little-endian `u32` fields
//! `N+1, H, W, C`, then the blurry image followed by frames `0..=N`, each as
//! raw little-endian `f32` in `[row][col][channel]` order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{render_sequence, synth_blur, BlurryObservation, FrameSequence, SceneSampler};
use crate::diffcore::{rng_from_seed, Reader, Tensor};
use crate::error::{Error, Result};

pub const SAMPLE_MAGIC: &[u8; 4] = b"B2V1";
const HEADER_LEN: usize = 4 + 4 * 4;
/// Guards decoders against absurd allocations from hostile headers.
const MAX_DIM: u32 = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub blurry: BlurryObservation,
    pub sequence: FrameSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub sampler: SceneSampler,
    pub sample_seeds: Vec<u64>,
    pub split: Vec<Split>,
}

impl Manifest {
    /// Parses `manifest.json` text and checks it for internal consistency.
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.split.len() != m.count || m.sample_seeds.len() != m.count {
            return Err(Error::format("manifest", "split/seed lists disagree with count"));
        }
        let s = &m.sampler;
        if (s.frames, s.height, s.width, s.channels) != (m.frames, m.height, m.width, m.channels) {
            return Err(Error::format("manifest", "sampler geometry disagrees with the manifest"));
        }
        if [m.frames, m.height, m.width, m.channels].iter().any(|&d| d > MAX_DIM as usize) {
            return Err(Error::format("manifest", "implausible geometry"));
        }
        s.validate()?;
        Ok(m)
    }

    /// Exact byte length of every sample file under this manifest.
    pub fn sample_file_len(&self) -> usize {
        HEADER_LEN + (self.frames + 1) * self.height * self.width * self.channels * 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStore {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub sampler: SceneSampler,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            sampler: SceneSampler::default(),
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:06}.b2v")
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<DatasetStore> {
    if config.count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::Config(format!("train fraction {} outside [0, 1]", config.train_fraction)));
    }
    config.sampler.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let sample_seeds: Vec<u64> = (0..config.count).map(|_| rng.gen()).collect();

    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut rng);
    let train_count = (config.count as f64 * config.train_fraction).round() as usize;
    let mut split = vec![Split::Test; config.count];
    for &i in &order[..train_count] {
        split[i] = Split::Train;
    }

    let samples = sample_seeds
        .iter()
        .map(|&s| {
            let spec = config.sampler.sample(&mut rng_from_seed(s));
            let sequence = render_sequence(&spec, s)?;
            let blurry = synth_blur(&sequence)?;
            Ok(Sample { blurry, sequence })
        })
        .collect::<Result<Vec<_>>>()?;

    let s = &config.sampler;
    Ok(DatasetStore {
        manifest: Manifest {
            format: "B2V1".into(),
            count: config.count,
            frames: s.frames,
            height: s.height,
            width: s.width,
            channels: s.channels,
            seed: config.seed,
            train_fraction: config.train_fraction,
            sampler: s.clone(),
            sample_seeds,
            split,
        },
        samples,
    })
}

impl DatasetStore {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .zip(&self.manifest.split)
            .filter(move |(_, s)| **s == which)
            .map(|(x, _)| x)
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(Split::Test).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            let path = dir.join(sample_file_name(i));
            std::fs::write(&path, encode_sample(s)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::parse(&text)?;
        let samples = (0..manifest.count)
            .map(|i| {
                let path = dir.join(sample_file_name(i));
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let mut sample = decode_sample(&bytes)?;
                let (h, w, c) = (
                    sample.blurry.image.shape()[0],
                    sample.blurry.image.shape()[1],
                    sample.blurry.image.shape()[2],
                );
                if sample.sequence.len() != manifest.frames || (h, w, c) != (manifest.height, manifest.width, manifest.channels) {
                    return Err(Error::format("dataset", format!("{} disagrees with manifest geometry", path.display())));
                }
                sample.sequence.seed = manifest.sample_seeds[i];
                sample.blurry.source = manifest.sample_seeds[i];
                Ok(sample)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }
}

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let shape = sample.blurry.image.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + (sample.sequence.len() + 1) * sample.blurry.image.len() * 4);
    out.extend_from_slice(SAMPLE_MAGIC);
    for v in [sample.sequence.len(), shape[0], shape[1], shape[2]] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in std::iter::once(&sample.blurry.image).chain(&sample.sequence.frames) {
        for v in img.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses one `.b2v` file. A frame count of zero is allowed and yields a
/// blurry image with an empty sequence.
pub fn decode_sample(bytes: &[u8]) -> Result<Sample> {
    let mut r = Reader::new(bytes, "b2v sample");
    if r.take(4)? != SAMPLE_MAGIC {
        return Err(Error::format("b2v sample", "bad magic"));
    }
    let frames = r.u32()?;
    let (h, w, c) = (r.u32()?, r.u32()?, r.u32()?);
    if [frames, h, w, c].iter().any(|&d| d > MAX_DIM) || h == 0 || w == 0 || c == 0 {
        return Err(Error::format("b2v sample", format!("implausible header {frames}x{h}x{w}x{c}")));
    }
    let (frames, h, w, c) = (frames as usize, h as usize, w as usize, c as usize);
    let plane = h * w * c;
    let expected = (frames + 1)
        .checked_mul(plane)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("b2v sample", "size overflows"))?;
    if r.remaining() != expected {
        return Err(Error::format(
            "b2v sample",
            format!("expected {expected} payload bytes, found {}", r.remaining()),
        ));
    }
    let mut read_image = || -> Result<Tensor> { Tensor::new(vec![h, w, c], r.f32s(plane)?) };
    let image = read_image()?;
    let seq = (0..frames).map(|_| read_image()).collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        blurry: BlurryObservation { image, source: 0 },
        sequence: FrameSequence::new(seq, 0)?,
    })
}

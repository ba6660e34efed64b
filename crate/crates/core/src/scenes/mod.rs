//! Synthetic moving-shape sequences and the discrete blur-formation model.

mod store;

pub use store::{
    decode_sample, encode_sample, generate_dataset, DatasetConfig, DatasetStore, Manifest, Sample, Split,
    SAMPLE_MAGIC,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Subsamples per pixel side for anti-aliased coverage.
pub const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    /// Side length (rectangle) or diameter (disc) in pixels.
    pub size: f32,
    /// Top-left corner of the bounding box in frame 0, as `(x, y)`.
    pub position: (f32, f32),
    /// Displacement per frame in pixels, as `(dx, dy)`.
    pub velocity: (f32, f32),
    /// One value per channel, in `[0, 1]`.
    pub color: Vec<f32>,
}

impl SceneObject {
    fn origin_at(&self, frame: usize) -> (f32, f32) {
        (
            self.position.0 + frame as f32 * self.velocity.0,
            self.position.1 + frame as f32 * self.velocity.1,
        )
    }

    fn contains(&self, origin: (f32, f32), x: f32, y: f32) -> bool {
        match self.shape {
            ShapeKind::Rectangle => x >= origin.0 && x < origin.0 + self.size && y >= origin.1 && y < origin.1 + self.size,
            ShapeKind::Disc => {
                let r = self.size * 0.5;
                let (dx, dy) = (x - (origin.0 + r), y - (origin.1 + r));
                dx * dx + dy * dy < r * r
            }
        }
    }

    fn is_moving(&self) -> bool {
        self.velocity.0 != 0.0 || self.velocity.1 != 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of sharp frames, `N + 1`.
    pub frames: usize,
    pub background: Vec<f32>,
    pub objects: Vec<SceneObject>,
    /// Requires at least one moving object.
    pub directional: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("canvas {}x{} below 8x8", self.height, self.width)));
        }
        if self.channels == 0 || self.background.len() != self.channels {
            return Err(Error::Config("background needs one value per channel".into()));
        }
        let in_range = |v: &f32| (0.0..=1.0).contains(v);
        if !self.background.iter().all(in_range) {
            return Err(Error::Config("background outside [0, 1]".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.color.len() != self.channels || !o.color.iter().all(in_range) {
                return Err(Error::Config(format!("object {i}: color needs {} values in [0, 1]", self.channels)));
            }
            if !(o.size > 0.0 && o.size.is_finite()) {
                return Err(Error::Config(format!("object {i}: size must be positive")));
            }
        }
        if self.directional && !self.objects.iter().any(SceneObject::is_moving) {
            return Err(Error::Config("directional scene has no moving object".into()));
        }
        Ok(())
    }
}

/// `N + 1` frames of identical geometry, each `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Tensor>,
    pub seed: u64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>, seed: u64) -> Result<Self> {
        if let Some(first) = frames.first() {
            if first.rank() != 3 || frames.iter().any(|f| f.shape() != first.shape()) {
                return Err(Error::Invalid("frames must share one [H, W, C] shape".into()));
            }
        }
        Ok(Self { frames, seed })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W, C)` of every frame.
    pub fn geometry(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(|f| (f.shape()[0], f.shape()[1], f.shape()[2]))
    }

    /// Symmetric index pairs `(k, N - k)` for `k < N / 2`; the middle frame of
    /// an odd-length sequence is its own mirror and is left out.
    pub fn symmetric_pairs(&self) -> Vec<(usize, usize)> {
        symmetric_pairs(self.frames.len())
    }
}

pub fn symmetric_pairs(frame_count: usize) -> Vec<(usize, usize)> {
    if frame_count == 0 {
        return Vec::new();
    }
    let last = frame_count - 1;
    (0..frame_count / 2).map(|k| (k, last - k)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlurryObservation {
    pub image: Tensor,
    pub source: u64,
}

/// Renders frame `k` with each object at `p0 + k * v`, composited in order
/// over the background with 4x4 supersampled coverage.
pub fn render_sequence(spec: &SceneSpec, seed: u64) -> Result<FrameSequence> {
    spec.validate()?;
    for (i, o) in spec.objects.iter().enumerate() {
        let visible = (0..spec.frames).any(|k| {
            let (x, y) = o.origin_at(k);
            x < spec.width as f32 && y < spec.height as f32 && x + o.size > 0.0 && y + o.size > 0.0
        });
        if !visible {
            return Err(Error::Config(format!("object {i} lies outside the canvas in every frame")));
        }
    }
    let frames = (0..spec.frames).map(|k| render_frame(spec, k)).collect();
    FrameSequence::new(frames, seed)
}

fn render_frame(spec: &SceneSpec, k: usize) -> Tensor {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut img = vec![0.0f32; h * w * c];
    for px in img.chunks_mut(c) {
        px.copy_from_slice(&spec.background);
    }
    let step = 1.0 / SUPERSAMPLE as f32;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for o in &spec.objects {
        let origin = o.origin_at(k);
        // only pixels overlapping the bounding box can be covered
        let x0 = origin.0.floor().max(0.0) as usize;
        let y0 = origin.1.floor().max(0.0) as usize;
        let x1 = ((origin.0 + o.size).ceil().max(0.0) as usize).min(w);
        let y1 = ((origin.1 + o.size).ceil().max(0.0) as usize).min(h);
        for row in y0..y1 {
            for col in x0..x1 {
                let mut hits = 0u32;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = col as f32 + (sx as f32 + 0.5) * step;
                        let y = row as f32 + (sy as f32 + 0.5) * step;
                        hits += o.contains(origin, x, y) as u32;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f32 / total;
                let px = &mut img[(row * w + col) * c..(row * w + col + 1) * c];
                for (v, &oc) in px.iter_mut().zip(&o.color) {
                    *v = *v * (1.0 - cov) + oc * cov;
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], img).expect("frame shape")
}

/// Per-pixel arithmetic mean of all frames (identity camera response).
///
/// Each pixel's samples are sorted before summation, so the result does not
/// depend on frame order at all.
pub fn synth_blur(seq: &FrameSequence) -> Result<BlurryObservation> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::Invalid("cannot blur an empty sequence".into()))?;
    let n = seq.frames.len();
    let mut samples = vec![0.0f32; n];
    let data = (0..first.len())
        .map(|i| {
            for (s, f) in samples.iter_mut().zip(&seq.frames) {
                *s = f.data()[i];
            }
            samples.sort_by(f32::total_cmp);
            let sum: f64 = samples.iter().map(|&v| v as f64).sum();
            (sum / n as f64) as f32
        })
        .collect();
    Ok(BlurryObservation {
        image: Tensor::new(first.shape().to_vec(), data)?,
        source: seq.seed,
    })
}

/// Frame `k` of the result is frame `N - k` of the input.
pub fn reverse_sequence(seq: &FrameSequence) -> FrameSequence {
    FrameSequence {
        frames: seq.frames.iter().rev().cloned().collect(),
        seed: seq.seed,
    }
}

/// Distribution the dataset generator draws scenes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f32,
    pub max_size: f32,
    /// Speed range in pixels per frame; direction is uniform on the circle.
    pub min_speed: f32,
    pub max_speed: f32,
    /// When false every object is static and each sequence is palindromic.
    pub directional: bool,
    /// All objects share one velocity, as under camera motion.
    pub shared_motion: bool,
    /// Round velocity components to whole pixels, so every frame of an
    /// object has the same sub-pixel phase.
    #[serde(default)]
    pub integer_velocity: bool,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            frames: 7,
            min_objects: 2,
            max_objects: 5,
            min_size: 5.0,
            max_size: 10.0,
            min_speed: 1.0,
            max_speed: 2.0,
            directional: true,
            shared_motion: true,
            integer_velocity: false,
        }
    }
}

impl SceneSampler {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("object count range is empty".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("size range is empty".into()));
        }
        if self.directional && !(self.min_speed > 0.0 && self.min_speed <= self.max_speed) {
            return Err(Error::Config("directional scenes need a positive speed range".into()));
        }
        if self.directional && self.integer_velocity && self.min_speed < 1.0 {
            return Err(Error::Config("integer velocities need a minimum speed of 1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        Ok(())
    }

    fn sample_velocity(&self, rng: &mut ChaCha8Rng) -> (f32, f32) {
        if !self.directional {
            return (0.0, 0.0);
        }
        let angle = rng.gen_range(0.0..std::f32::consts::TAU);
        let speed = if self.min_speed == self.max_speed {
            self.min_speed
        } else {
            rng.gen_range(self.min_speed..self.max_speed)
        };
        let v = (speed * angle.cos(), speed * angle.sin());
        if self.integer_velocity {
            // speed >= 1 keeps at least one component away from zero
            (v.0.round(), v.1.round())
        } else {
            v
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        let c = self.channels;
        let background: Vec<f32> = (0..c).map(|_| rng.gen_range(0.0..0.3f32)).collect();
        let count = rng.gen_range(self.min_objects..=self.max_objects);
        let mid = (self.frames - 1) as f32 / 2.0;
        let shared = self.shared_motion.then(|| self.sample_velocity(rng));
        let objects = (0..count)
            .map(|_| {
                let shape = if rng.gen_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Disc };
                let size = if self.min_size == self.max_size {
                    self.min_size
                } else {
                    rng.gen_range(self.min_size..self.max_size).round()
                };
                let velocity = match shared {
                    Some(v) => v,
                    None => self.sample_velocity(rng),
                };
                // centre of the trajectory lands in the middle half of the canvas
                let cx = rng.gen_range(0.25..0.75f32) * self.width as f32;
                let cy = rng.gen_range(0.25..0.75f32) * self.height as f32;
                let position = (cx - mid * velocity.0 - size / 2.0, cy - mid * velocity.1 - size / 2.0);
                let color = (0..c).map(|_| rng.gen_range(0.55..1.0f32)).collect();
                SceneObject {
                    shape,
                    size,
                    position,
                    velocity,
                    color,
                }
            })
            .collect();
        SceneSpec {
            height: self.height,
            width: self.width,
            channels: c,
            frames: self.frames,
            background,
            objects,
            directional: self.directional,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f32, vx: f32, size: f32) -> SceneSpec {
        SceneSpec {
            height: 16,
            width: 32,
            channels: 1,
            frames: 7,
            background: vec![0.0],
            objects: vec![SceneObject {
                shape: ShapeKind::Rectangle,
                size,
                position: (x, 4.0),
                velocity: (vx, 0.0),
                color: vec![1.0],
            }],
            directional: vx != 0.0,
        }
    }

    #[test]
    fn static_scene_frames_are_identical() {
        let seq = render_sequence(&square(8.0, 0.0, 4.0), 0).unwrap();
        assert!(seq.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn square_moves_by_velocity() {
        let size = 4;
        let seq = render_sequence(&square(8.0, 2.0, size as f32), 0).unwrap();
        let frame = &seq.frames[3];
        let row: Vec<f32> = (0..32).map(|c| frame.data()[6 * 32 + c]).collect();
        for (c, v) in row.iter().enumerate() {
            let inside = (14..14 + size).contains(&c);
            assert_eq!(*v, if inside { 1.0 } else { 0.0 }, "column {c}");
        }
    }

    #[test]
    fn offcanvas_object_is_an_error() {
        let mut spec = square(8.0, 2.0, 4.0);
        spec.objects[0].position = (200.0, 4.0);
        assert!(render_sequence(&spec, 0).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = square(8.0, 1.0, 4.0);
        spec.frames = 1;
        assert!(render_sequence(&spec, 0).is_err());
        let mut spec = square(8.0, 0.0, 4.0);
        spec.directional = true;
        assert!(render_sequence(&spec, 0).is_err());
        let mut spec = square(8.0, 1.0, 4.0);
        spec.width = 7;
        assert!(render_sequence(&spec, 0).is_err());
    }

    #[test]
    fn blur_of_constant_sequence_is_the_frame() {
        let seq = render_sequence(&square(8.0, 0.0, 3.0), 0).unwrap();
        assert_eq!(synth_blur(&seq).unwrap().image, seq.frames[0]);
    }

    #[test]
    fn blur_counts_active_frames() {
        let on = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let off = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let frames = vec![on.clone(), off.clone(), on.clone(), off.clone(), off.clone(), on, off];
        let blur = synth_blur(&FrameSequence::new(frames, 0).unwrap()).unwrap();
        assert_eq!(blur.image.item(), (3.0f64 / 7.0) as f32);
    }

    #[test]
    fn empty_sequence_cannot_blur() {
        assert!(synth_blur(&FrameSequence::new(vec![], 0).unwrap()).is_err());
    }

    #[test]
    fn reverse_swaps_borders() {
        let seq = render_sequence(&square(2.0, 3.0, 4.0), 0).unwrap();
        let rev = reverse_sequence(&seq);
        assert_eq!(rev.frames[0], seq.frames[6]);
        assert_eq!(rev.frames[6], seq.frames[0]);
        assert_eq!(reverse_sequence(&rev), seq);
        let still = render_sequence(&square(2.0, 0.0, 4.0), 0).unwrap();
        assert_eq!(reverse_sequence(&still), still);
    }

    #[test]
    fn symmetric_pairs_skip_middle() {
        assert_eq!(symmetric_pairs(7), vec![(0, 6), (1, 5), (2, 4)]);
        assert_eq!(symmetric_pairs(2), vec![(0, 1)]);
        assert_eq!(symmetric_pairs(6), vec![(0, 5), (1, 4), (2, 3)]);
    }
}

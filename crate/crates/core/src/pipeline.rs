//! Stream post-processing: affine color correction between cameras,
//! fake-blur synthesis from upsampled frames, and temporal alignment of a
//! blurry frame against a sharp stream.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::metrics::psnr;

/// Ridge added to the normal equations so flat images stay solvable.
pub const COLOR_RIDGE: f64 = 1e-8;
/// Frames per alignment window.
pub const WINDOW: usize = 7;
/// Interpolated frames inserted in each gap of the window.
pub const INSERTED_PER_GAP: usize = 2;

/// `3 x 4` matrix acting on homogeneous pixels `[r, g, b, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorCorrection {
    pub m: [[f64; 4]; 3],
}

impl ColorCorrection {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    fn map_pixel(&self, px: &[f32]) -> [f64; 3] {
        let x = [px[0] as f64, px[1] as f64, px[2] as f64, 1.0];
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(&self.m) {
            *o = row.iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Squared residual `sum |M x~ - y|^2` over all pixels, unclamped.
    pub fn residual(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        check_rgb_pair(x, y)?;
        Ok(x.data()
            .chunks_exact(3)
            .zip(y.data().chunks_exact(3))
            .map(|(px, py)| {
                let m = self.map_pixel(px);
                (0..3).map(|c| (m[c] - py[c] as f64).powi(2)).sum::<f64>()
            })
            .sum())
    }
}

fn check_rgb(img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::Invalid(format!("expected an [H, W, 3] image, got {:?}", img.shape())));
    }
    Ok(())
}

fn check_rgb_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    check_rgb(x)?;
    check_rgb(y)?;
    if x.shape() != y.shape() {
        return Err(Error::Invalid(format!("image shapes differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Replicates a single-channel image into three channels; RGB passes through.
pub fn promote_rgb(img: &Tensor) -> Result<Tensor> {
    match img.shape() {
        [_, _, 3] => Ok(img.clone()),
        &[h, w, 1] => Tensor::new(vec![h, w, 3], img.data().iter().flat_map(|&v| [v, v, v]).collect()),
        s => Err(Error::Invalid(format!("cannot promote {s:?} to RGB"))),
    }
}

/// Applies the correction per pixel and clamps to `[0, 1]`.
pub fn apply_color(correction: &ColorCorrection, img: &Tensor) -> Result<Tensor> {
    check_rgb(img)?;
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|px| correction.map_pixel(px).map(|v| v.clamp(0.0, 1.0) as f32))
        .collect();
    Tensor::new(img.shape().to_vec(), data)
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Invalid("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    Ok(b.into_iter().zip(&a).enumerate().map(|(i, (row, ar))| row.iter().map(|v| v / ar[i]).collect()).collect())
}

/// Least-squares `M` with `M x~ ~ y` over every pixel, via ridge-regularized
/// normal equations.
pub fn fit_color_matrix(x: &Tensor, y: &Tensor) -> Result<ColorCorrection> {
    check_rgb_pair(x, y)?;
    let mut ata = vec![vec![0.0; 4]; 4];
    let mut aty = vec![vec![0.0; 3]; 4];
    for (px, py) in x.data().chunks_exact(3).zip(y.data().chunks_exact(3)) {
        let xt = [px[0] as f64, px[1] as f64, px[2] as f64, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += xt[i] * xt[j];
            }
            for c in 0..3 {
                aty[i][c] += xt[i] * py[c] as f64;
            }
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] += COLOR_RIDGE;
    }
    let mt = solve(ata, aty)?;
    let mut m = [[0.0; 4]; 3];
    for (i, row) in mt.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m[c][i] = *v;
        }
    }
    Ok(ColorCorrection { m })
}

/// Mean of the window after inserting linearly interpolated frames at `1/3`
/// and `2/3` of every gap (7 frames become 19).
pub fn synth_fake_blur(frames: &[Tensor]) -> Result<Tensor> {
    if frames.len() != WINDOW {
        return Err(Error::Invalid(format!("fake blur needs {WINDOW} frames, got {}", frames.len())));
    }
    let shape = frames[0].shape().to_vec();
    if frames.iter().any(|f| f.shape() != shape.as_slice()) {
        return Err(Error::Invalid("frames differ in shape".into()));
    }
    let mut acc = vec![0.0f64; frames[0].len()];
    let mut count = 0usize;
    let mut add = |a: &Tensor, b: &Tensor, t: f64| {
        for (s, (&p, &q)) in acc.iter_mut().zip(a.data().iter().zip(b.data())) {
            *s += (1.0 - t) * p as f64 + t * q as f64;
        }
        count += 1;
    };
    for g in 0..WINDOW - 1 {
        let (a, b) = (&frames[g], &frames[g + 1]);
        add(a, b, 0.0);
        for s in 1..=INSERTED_PER_GAP {
            add(a, b, s as f64 / (INSERTED_PER_GAP + 1) as f64);
        }
    }
    add(&frames[WINDOW - 1], &frames[WINDOW - 1], 0.0);
    let n = count as f64;
    Tensor::new(shape, acc.into_iter().map(|v| (v / n) as f32).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Index of the first frame of the matched window.
    pub offset: usize,
    pub correction: ColorCorrection,
    /// PSNR of the corrected fake blur against the real blurry image.
    pub score: f64,
    /// Score of every candidate offset.
    pub scores: Vec<f64>,
    /// The corrected window frames, RGB.
    #[serde(skip)]
    pub frames: Vec<Tensor>,
}

/// Finds the window of `stream` whose color-corrected fake blur best matches
/// `blurry`. Grayscale inputs are promoted to RGB. Ties go to the smallest
/// offset.
pub fn temporal_align(blurry: &Tensor, stream: &[Tensor]) -> Result<AlignmentResult> {
    if stream.len() < WINDOW {
        return Err(Error::Invalid(format!("stream has {} frames, need at least {WINDOW}", stream.len())));
    }
    let y = promote_rgb(blurry)?;
    let frames = stream.iter().map(promote_rgb).collect::<Result<Vec<_>>>()?;
    let candidates: Vec<(ColorCorrection, f64)> = (0..=frames.len() - WINDOW)
        .into_par_iter()
        .map(|i| {
            let fake = synth_fake_blur(&frames[i..i + WINDOW])?;
            let m = fit_color_matrix(&fake, &y)?;
            let score = psnr(&apply_color(&m, &fake)?, &y)?;
            Ok((m, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (_, s)) in candidates.iter().enumerate() {
        if *s > candidates[best].1 {
            best = i;
        }
    }
    let correction = candidates[best].0;
    let aligned = frames[best..best + WINDOW]
        .iter()
        .map(|f| apply_color(&correction, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentResult {
        offset: best,
        correction,
        score: candidates[best].1,
        scores: candidates.iter().map(|c| c.1).collect(),
        frames: aligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor {
        let mut d = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    d.push(f(y, x, c));
                }
            }
        }
        Tensor::new(vec![h, w, 3], d).unwrap()
    }

    #[test]
    fn identity_fit_and_apply() {
        let x = rgb(4, 4, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f32 / 11.0);
        let m = fit_color_matrix(&x, &x).unwrap();
        for (r, row) in m.m.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-6, "{r},{c}: {v}");
            }
        }
        assert_eq!(apply_color(&ColorCorrection::identity(), &x).unwrap(), x);
    }

    #[test]
    fn red_scaling() {
        let mut m = ColorCorrection::identity();
        m.m[0][0] = 0.5;
        let red = rgb(1, 1, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        assert_eq!(apply_color(&m, &red).unwrap().data(), &[0.5, 0.0, 0.0]);
    }

    #[test]
    fn constant_image_is_solvable() {
        let x = rgb(3, 3, |_, _, c| 0.2 + 0.1 * c as f32);
        let y = rgb(3, 3, |_, _, c| 0.6 - 0.1 * c as f32);
        let m = fit_color_matrix(&x, &y).unwrap();
        let out = apply_color(&m, &x).unwrap();
        for (a, b) in out.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(fit_color_matrix(&Tensor::zeros(&[2, 2, 1]), &Tensor::zeros(&[2, 2, 1])).is_err());
    }

    #[test]
    fn fake_blur_of_ramp_is_half() {
        let frames: Vec<Tensor> = (0..7).map(|k| Tensor::full(&[2, 2, 1], k as f32 / 6.0)).collect();
        let b = synth_fake_blur(&frames).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(synth_fake_blur(&frames[..6]).is_err());
    }

    #[test]
    fn short_stream_is_rejected() {
        let frames: Vec<Tensor> = (0..6).map(|_| Tensor::zeros(&[2, 2, 3])).collect();
        assert!(temporal_align(&Tensor::zeros(&[2, 2, 3]), &frames).is_err());
    }
}

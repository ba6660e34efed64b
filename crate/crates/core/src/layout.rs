//! Conversions between per-frame `[H, W, C]` images and batched NCHW tensors.

use crate::diffcore::Tensor;

/// Appends the channels of an HWC image to `out` in CHW order.
pub fn push_chw(img: &Tensor, out: &mut Vec<f32>) {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    for ch in 0..c {
        for i in 0..h * w {
            out.push(d[i * c + ch]);
        }
    }
}

/// Stacks HWC images, each image's channels concatenated in order, into
/// `[B, sum(C), H, W]`. Every row of `rows` becomes one batch item.
pub fn stack_nchw(rows: &[Vec<&Tensor>]) -> Tensor {
    let first = rows[0][0];
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let channels: usize = rows[0].iter().map(|t| t.shape()[2]).sum();
    let mut data = Vec::with_capacity(rows.len() * channels * h * w);
    for row in rows {
        for img in row {
            push_chw(img, &mut data);
        }
    }
    Tensor::new(vec![rows.len(), channels, h, w], data).expect("stack shape")
}

/// Extracts channels `[start, start + c)` of batch item `b` of an NCHW tensor
/// as an HWC image.
pub fn frame_from_nchw(t: &Tensor, b: usize, start: usize, c: usize) -> Tensor {
    let (ch, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let plane = h * w;
    let base = b * ch * plane;
    let mut data = vec![0.0f32; plane * c];
    for k in 0..c {
        let src = &t.data()[base + (start + k) * plane..base + (start + k + 1) * plane];
        for (i, &v) in src.iter().enumerate() {
            data[i * c + k] = v;
        }
    }
    Tensor::new(vec![h, w, c], data).expect("frame shape")
}

/// Applies one of the symmetries of the square to an HWC image: bit 0 flips
/// columns, bit 1 flips rows, bit 2 transposes (square images only).
pub fn dihedral(img: &Tensor, t: u8) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let transpose = t & 4 != 0;
    assert!(!transpose || h == w, "transpose needs a square image");
    let d = img.data();
    let mut data = Vec::with_capacity(d.len());
    for y in 0..h {
        for x in 0..w {
            let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
            if t & 1 != 0 {
                sx = w - 1 - sx;
            }
            if t & 2 != 0 {
                sy = h - 1 - sy;
            }
            data.extend_from_slice(&d[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, c], data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dihedral_group_actions() {
        let img = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dihedral(&img, 0), img);
        assert_eq!(dihedral(&img, 1).data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(dihedral(&img, 2).data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(dihedral(&img, 4).data(), &[1.0, 3.0, 2.0, 4.0]);
        for t in 0..8 {
            let once = dihedral(&img, t);
            let mut sorted = once.data().to_vec();
            sorted.sort_by(f32::total_cmp);
            assert_eq!(sorted, img.data());
        }
    }

    #[test]
    fn stack_then_extract_round_trips() {
        let a = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let b = Tensor::new(vec![2, 2, 3], (100..112).map(|v| v as f32).collect()).unwrap();
        let t = stack_nchw(&[vec![&a, &b], vec![&b, &a]]);
        assert_eq!(t.shape(), &[2, 6, 2, 2]);
        assert_eq!(frame_from_nchw(&t, 0, 0, 3), a);
        assert_eq!(frame_from_nchw(&t, 0, 3, 3), b);
        assert_eq!(frame_from_nchw(&t, 1, 0, 3), b);
        // channel 0 plane of a comes first
        assert_eq!(&t.data()[..4], &[0.0, 3.0, 6.0, 9.0]);
    }
}

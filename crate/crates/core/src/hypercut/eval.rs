use serde::{Deserialize, Serialize};

use super::{Hyperplane, OrderEncoder};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scenes::FrameSequence;

/// Signed projections of one symmetric pair `(x_k, x_{N-k})` and its swap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairProjection {
    pub forward: f32,
    pub reverse: f32,
}

impl PairProjection {
    pub fn is_hit(&self) -> bool {
        self.forward * self.reverse < 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceProjections {
    pub pairs: Vec<PairProjection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderLabel {
    pub value: u8,
    pub margin: f32,
}

/// Projections of every symmetric pair of every sequence, batched across the
/// whole set.
pub fn project_sequences(
    encoder: &OrderEncoder,
    h: &Hyperplane,
    seqs: &[&FrameSequence],
) -> Result<Vec<SequenceProjections>> {
    let mut all: Vec<(&Tensor, &Tensor)> = Vec::new();
    let mut counts = Vec::with_capacity(seqs.len());
    for s in seqs {
        let pairs = s.symmetric_pairs();
        counts.push(pairs.len());
        for &(i, j) in &pairs {
            all.push((&s.frames[i], &s.frames[j]));
        }
        for &(i, j) in &pairs {
            all.push((&s.frames[j], &s.frames[i]));
        }
    }
    let emb = encoder.embed_pairs(&all)?;
    let mut out = Vec::with_capacity(seqs.len());
    let mut at = 0;
    for n in counts {
        let pairs = (0..n)
            .map(|k| PairProjection {
                forward: h.project(&emb[at + k]),
                reverse: h.project(&emb[at + n + k]),
            })
            .collect();
        out.push(SequenceProjections { pairs });
        at += 2 * n;
    }
    Ok(out)
}

/// Fraction of pairs whose separation product is negative.
pub fn hit_rate_of(projections: &[SequenceProjections]) -> Result<f64> {
    let total: usize = projections.iter().map(|s| s.pairs.len()).sum();
    if total == 0 {
        return Err(Error::Invalid("hit rate of an empty set".into()));
    }
    let hits = projections.iter().flat_map(|s| &s.pairs).filter(|p| p.is_hit()).count();
    Ok(hits as f64 / total as f64)
}

fn side(v: f32) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn for_each_subset(n: usize, x: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, x: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == x {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, x, cur, f);
            cur.pop();
        }
    }
    rec(0, n, x, &mut Vec::with_capacity(x), f);
}

/// Over every `x`-subset of pairs within each sequence, the fraction whose
/// forward projections all fall strictly on the same side.
pub fn con_rate_of(projections: &[SequenceProjections], x: usize) -> Result<f64> {
    if x < 2 {
        return Err(Error::Invalid(format!("consistency needs at least 2 pairs, got {x}")));
    }
    let (mut agree, mut total) = (0usize, 0usize);
    for s in projections {
        if s.pairs.len() < x {
            return Err(Error::Invalid(format!(
                "sequence has {} symmetric pairs, fewer than {x}",
                s.pairs.len()
            )));
        }
        for_each_subset(s.pairs.len(), x, &mut |idx| {
            total += 1;
            let first = side(s.pairs[idx[0]].forward);
            if first != 0 && idx.iter().all(|&i| side(s.pairs[i].forward) == first) {
                agree += 1;
            }
        });
    }
    if total == 0 {
        return Err(Error::Invalid("consistency of an empty set".into()));
    }
    Ok(agree as f64 / total as f64)
}

/// Majority vote over the sides of the forward projections; a tie goes to
/// the pair with the largest magnitude.
pub fn label_of(projections: &SequenceProjections) -> Result<OrderLabel> {
    let fwd: Vec<f32> = projections.pairs.iter().map(|p| p.forward).collect();
    let strongest = fwd.iter().copied().fold(0.0f32, |m, v| if v.abs() > m.abs() { v } else { m });
    if strongest == 0.0 {
        return Err(Error::Invalid("every projection is zero; the sequence has no orientation".into()));
    }
    let vote: i32 = fwd.iter().map(|&v| side(v) as i32).sum();
    let value = match vote.cmp(&0) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => u8::from(strongest > 0.0),
    };
    Ok(OrderLabel { value, margin: strongest.abs() })
}

pub fn order_label(encoder: &OrderEncoder, h: &Hyperplane, seq: &FrameSequence) -> Result<OrderLabel> {
    if seq.len() < 2 {
        return Err(Error::Invalid("order label needs at least 2 frames".into()));
    }
    label_of(&project_sequences(encoder, h, &[seq])?[0])
}

pub fn hit_rate(encoder: &OrderEncoder, h: &Hyperplane, seqs: &[&FrameSequence]) -> Result<f64> {
    hit_rate_of(&project_sequences(encoder, h, seqs)?)
}

pub fn con_rate(encoder: &OrderEncoder, h: &Hyperplane, seqs: &[&FrameSequence], x: usize) -> Result<f64> {
    con_rate_of(&project_sequences(encoder, h, seqs)?, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    /// Side of `h` the full embedding lies on (`+1`, `-1`, or `0`).
    pub side: i8,
}

/// Leading eigenvector of a symmetric matrix by power iteration, sign fixed so
/// the largest-magnitude entry is positive.
fn leading_eigenvector(cov: &[f64], d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 1e-3).collect();
    for _ in 0..500 {
        let mut next = vec![0.0; d];
        for (i, row) in cov.chunks(d).enumerate() {
            next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if delta < 1e-12 {
            break;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
    v.iter().map(|x| sign * x / norm).collect()
}

/// Forward and swapped embeddings of every symmetric pair, projected onto the
/// top two principal components and tagged by hyperplane side.
pub fn project_embeddings_2d(
    encoder: &OrderEncoder,
    h: &Hyperplane,
    seqs: &[&FrameSequence],
) -> Result<Vec<ProjectedPoint>> {
    let mut pairs: Vec<(&Tensor, &Tensor)> = Vec::new();
    for s in seqs {
        for (i, j) in s.symmetric_pairs() {
            pairs.push((&s.frames[i], &s.frames[j]));
            pairs.push((&s.frames[j], &s.frames[i]));
        }
    }
    if pairs.len() < 2 {
        return Err(Error::Invalid("need at least 2 embeddings to project".into()));
    }
    let emb = encoder.embed_pairs(&pairs)?;
    let sides: Vec<i8> = emb.iter().map(|e| side(h.project(e))).collect();
    let points = principal_plane(&emb.iter().map(|e| e.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>());
    Ok(points
        .into_iter()
        .zip(sides)
        .map(|((x, y), side)| ProjectedPoint { x, y, side })
        .collect())
}

/// Coordinates of centered rows on their first two principal axes.
pub(crate) fn principal_plane(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    let pc1 = leading_eigenvector(&cov, d);
    let lambda: f64 = (0..d)
        .map(|i| pc1[i] * (0..d).map(|j| cov[i * d + j] * pc1[j]).sum::<f64>())
        .sum();
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= lambda * pc1[i] * pc1[j];
        }
    }
    let pc2 = leading_eigenvector(&cov, d);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    centered.iter().map(|r| (dot(r, &pc1), dot(r, &pc2))).collect()
}

/// Training accuracy of a least-squares linear classifier `w·(x, y, 1)`
/// predicting the side of each point. Points with side 0 are ignored.
pub fn separability_accuracy(points: &[ProjectedPoint]) -> Result<f64> {
    let tagged: Vec<&ProjectedPoint> = points.iter().filter(|p| p.side != 0).collect();
    if tagged.is_empty() {
        return Err(Error::Invalid("no points with a side".into()));
    }
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for p in &tagged {
        let f = [p.x, p.y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += f[i] * f[j];
            }
            atb[i] += f[i] * p.side as f64;
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] += 1e-9;
    }
    let w = solve3(ata, atb).ok_or_else(|| Error::Invalid("degenerate point cloud".into()))?;
    let correct = tagged
        .iter()
        .filter(|p| {
            let s = w[0] * p.x + w[1] * p.y + w[2];
            (s > 0.0) == (p.side > 0)
        })
        .count();
    Ok(correct as f64 / tagged.len() as f64)
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in 0..3 {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

mod common;

use common::{random_tensor, tiny_encoder_config};
use hypercut::blur2vid::{loss_order_invariant, total_loss, LossConfig, PairNorm, Regime};
use hypercut::diffcore::{Feed, Graph, Tensor};
use hypercut::hypercut::{
    hit_rate_of, hypercut_loss, label_of, project_sequences, separation_product, Hyperplane, OrderEncoder,
};
use hypercut::metrics::{agreement_of, mean_ppsnr, mean_pssim, order_labels, psnr};
use hypercut::pipeline::{apply_color, fit_color_matrix, synth_fake_blur, ColorCorrection};
use hypercut::scenes::{render_sequence, reverse_sequence, synth_blur, FrameSequence, SceneSampler};
use proptest::prelude::*;
use rand::SeedableRng;

fn sequence(frames: usize, side: usize, seed: u64) -> FrameSequence {
    let f = (0..frames).map(|k| random_tensor(&[side, side, 1], seed * 97 + k as u64, 0.0, 1.0)).collect();
    FrameSequence::new(f, seed).unwrap()
}

fn rendered(seed: u64, frames: usize) -> FrameSequence {
    let sampler = SceneSampler {
        height: 12,
        width: 12,
        frames,
        min_size: 3.0,
        max_size: 6.0,
        ..SceneSampler::default()
    };
    let spec = sampler.sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    render_sequence(&spec, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blur_is_mean_and_reversal_invariant(seed in any::<u64>(), frames in 2usize..9) {
        let seq = rendered(seed, frames);
        let b = synth_blur(&seq).unwrap();
        let rb = synth_blur(&reverse_sequence(&seq)).unwrap();
        prop_assert_eq!(b.image.data(), rb.image.data());
        let total: f64 = seq.frames.iter().flat_map(|f| f.data()).map(|&v| v as f64).sum();
        let mean_frames = total / (seq.len() * seq.frames[0].len()) as f64;
        let mean_blur = b.image.data().iter().map(|&v| v as f64).sum::<f64>() / b.image.len() as f64;
        prop_assert!((mean_frames - mean_blur).abs() < 1e-6);
        for v in seq.frames.iter().flat_map(|f| f.data()).chain(b.image.data()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn order_invariant_loss_is_reversal_symmetric(seed in any::<u64>(), frames in 2usize..8, l1 in any::<bool>()) {
        let pred = sequence(frames, 4, seed);
        let gt = sequence(frames, 4, seed ^ 0x55);
        let norm = if l1 { PairNorm::L1 } else { PairNorm::L2 };
        prop_assert_eq!(
            loss_order_invariant(&pred, &gt, norm).unwrap(),
            loss_order_invariant(&reverse_sequence(&pred), &gt, norm).unwrap()
        );
    }

    #[test]
    fn alpha_zero_total_is_base(seed in any::<u64>()) {
        let pred = sequence(5, 4, seed);
        let gt = sequence(5, 4, seed + 1);
        for regime in [Regime::Rec, Regime::Oi] {
            let cfg: LossConfig = regime.loss_config(0.0);
            let base = match regime {
                Regime::Rec => hypercut::blur2vid::loss_rec(&pred, &gt).unwrap(),
                _ => loss_order_invariant(&pred, &gt, PairNorm::L2).unwrap(),
            };
            prop_assert_eq!(total_loss(&[&pred], &[&gt], &cfg, None).unwrap(), base);
        }
    }

    #[test]
    fn ppsnr_and_pssim_are_reversal_invariant(seed in any::<u64>(), frames in 2usize..8) {
        let pred = sequence(frames, 8, seed);
        let gt = sequence(frames, 8, seed + 3);
        let rev = reverse_sequence(&pred);
        prop_assert_eq!(mean_ppsnr(&pred, &gt).unwrap(), mean_ppsnr(&rev, &gt).unwrap());
        prop_assert_eq!(mean_pssim(&pred, &gt).unwrap(), mean_pssim(&rev, &gt).unwrap());
    }

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>()) {
        let a = random_tensor(&[5, 6, 3], seed, 0.0, 1.0);
        let b = random_tensor(&[5, 6, 3], seed + 1, 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn projections_are_bounded_and_hits_antisymmetric(seed in any::<u64>()) {
        let enc = OrderEncoder::new(tiny_encoder_config(8, 1), seed).unwrap();
        let h = Hyperplane::sample(enc.dim(), seed).unwrap();
        let seq = sequence(5, 8, seed);
        let p = project_sequences(&enc, &h, &[&seq]).unwrap();
        for pair in &p[0].pairs {
            prop_assert!(pair.forward.abs() <= 1.0 + 1e-6 && pair.reverse.abs() <= 1.0 + 1e-6);
            if pair.is_hit() {
                prop_assert_eq!(pair.forward.signum(), -pair.reverse.signum());
            }
        }
        let (a, b) = (&seq.frames[0], &seq.frames[4]);
        let s = separation_product(&enc, &h, a, b).unwrap();
        prop_assert_eq!(s < 0.0, p[0].pairs[0].is_hit());
        let loss = hypercut_loss(&enc, &h, &[(a, b)]).unwrap();
        prop_assert!(loss >= 0.313_261_687 - 1e-6);
    }

    #[test]
    fn fitted_color_matrix_is_locally_optimal(seed in any::<u64>(), entry in 0usize..12, up in any::<bool>()) {
        let x = random_tensor(&[6, 6, 3], seed, 0.0, 1.0);
        let y = random_tensor(&[6, 6, 3], seed + 9, 0.0, 1.0);
        let fit = fit_color_matrix(&x, &y).unwrap();
        let base = fit.residual(&x, &y).unwrap();
        let mut moved = fit;
        moved.m[entry / 4][entry % 4] += if up { 1e-2 } else { -1e-2 };
        prop_assert!(moved.residual(&x, &y).unwrap() >= base - 1e-6);
    }

    #[test]
    fn fake_blur_is_reversal_invariant(seed in any::<u64>()) {
        let frames: Vec<Tensor> = (0..7).map(|k| random_tensor(&[4, 4, 3], seed + k, 0.0, 1.0)).collect();
        let rev: Vec<Tensor> = frames.iter().rev().cloned().collect();
        let a = synth_fake_blur(&frames).unwrap();
        let b = synth_fake_blur(&rev).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn color_fit_never_lowers_psnr(seed in any::<u64>()) {
        let x = random_tensor(&[8, 8, 3], seed, 0.0, 1.0);
        let mut m = ColorCorrection::identity();
        let mut rng = hypercut::diffcore::rng_from_seed(seed);
        for row in m.m.iter_mut() {
            for v in row.iter_mut() {
                *v += rand::Rng::gen_range(&mut rng, -0.2..0.2);
            }
        }
        let y = apply_color(&m, &x).unwrap();
        let fitted = apply_color(&fit_color_matrix(&x, &y).unwrap(), &x).unwrap();
        prop_assert!(psnr(&fitted, &y).unwrap() >= psnr(&x, &y).unwrap() - 1e-9);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let build = |g: &mut Graph| {
        let w = g.param("w", random_tensor(&[3, 4], 1, -1.0, 1.0), true);
        let x = g.constant(random_tensor(&[4, 2], 2, -1.0, 1.0));
        let y = g.matmul(w, x);
        let s = g.softplus(y);
        let l1 = g.sum(s);
        let sq = g.mul(w, w);
        let l2 = g.mean(sq);
        (l1, l2)
    };
    let grad_of = |mix: Option<(f64, f64)>, which: usize| {
        let mut g = Graph::new();
        let (l1, l2) = build(&mut g);
        let loss = match mix {
            Some((a, b)) => {
                let x = g.scale(l1, a);
                let y = g.scale(l2, b);
                g.add(x, y)
            }
            None => [l1, l2][which],
        };
        g.evaluate(&Feed::new()).unwrap();
        g.backward(loss).unwrap().get("w").unwrap().clone()
    };
    let (a, b) = (0.7, -1.9);
    let mixed = grad_of(Some((a, b)), 0);
    let (g1, g2) = (grad_of(None, 0), grad_of(None, 1));
    for i in 0..mixed.len() {
        let want = a * g1.data()[i] as f64 + b * g2.data()[i] as f64;
        assert!((mixed.data()[i] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn label_flip_bounded_by_non_hits() {
    let enc = OrderEncoder::new(tiny_encoder_config(8, 1), 4).unwrap();
    let h = Hyperplane::sample(enc.dim(), 4).unwrap();
    let seqs: Vec<FrameSequence> = (0..40).map(|s| rendered(s, 7)).map(|s| crop8(&s)).collect();
    let refs: Vec<&FrameSequence> = seqs.iter().collect();
    let revs: Vec<FrameSequence> = seqs.iter().map(reverse_sequence).collect();
    let rev_refs: Vec<&FrameSequence> = revs.iter().collect();
    let fwd = project_sequences(&enc, &h, &refs).unwrap();
    let bwd = project_sequences(&enc, &h, &rev_refs).unwrap();
    let same = fwd
        .iter()
        .zip(&bwd)
        .filter(|(f, b)| label_of(f).unwrap().value == label_of(b).unwrap().value)
        .count();
    let with_miss = fwd.iter().filter(|p| p.pairs.iter().any(|q| !q.is_hit())).count();
    assert!(same <= with_miss, "{same} > {with_miss}");
    assert!(hit_rate_of(&fwd).unwrap() <= 1.0);
}

#[test]
fn agreement_flips_under_global_reversal() {
    let enc = OrderEncoder::new(tiny_encoder_config(8, 1), 6).unwrap();
    let h = Hyperplane::sample(enc.dim(), 6).unwrap();
    // an odd number of pairs, so the vote never needs the tie-break
    let seqs: Vec<FrameSequence> = (0..40).map(|s| crop8(&rendered(s + 100, 7))).collect();
    let proj = project_sequences(&enc, &h, &seqs.iter().collect::<Vec<_>>()).unwrap();
    // only fully separated sequences are guaranteed to flip label
    let kept: Vec<&FrameSequence> =
        seqs.iter().zip(&proj).filter(|(_, p)| p.pairs.iter().all(|q| q.is_hit())).map(|(s, _)| s).collect();
    assert!(!kept.is_empty());
    let revs: Vec<FrameSequence> = kept.iter().map(|s| reverse_sequence(s)).collect();
    let a = agreement_of(&order_labels(&kept, &enc, &h).unwrap()).unwrap();
    let b = agreement_of(&order_labels(&revs.iter().collect::<Vec<_>>(), &enc, &h).unwrap()).unwrap();
    assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b}");
}

fn crop8(seq: &FrameSequence) -> FrameSequence {
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let w = f.shape()[1];
            let data = (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).map(|(y, x)| f.data()[y * w + x]).collect();
            Tensor::new(vec![8, 8, 1], data).unwrap()
        })
        .collect();
    FrameSequence::new(frames, seq.seed).unwrap()
}

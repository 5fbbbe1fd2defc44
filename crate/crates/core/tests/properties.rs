#![allow(clippy::needless_range_loop)]

use pfr_core::losses::{self, AlignOptions};
use pfr_core::metrics::ConfusionMatrix;
use pfr_core::models::{SegNet, SegNetConfig, StageFeatures};
use pfr_core::synth::{content_seeds, generate_scene, DomainStyle, SceneSpec};
use pfr_core::{Tape, Tensor};
use proptest::prelude::*;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

#[test]
fn jacobi_oracle_on_known_matrix() {
    let mut e = jacobi_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
    e.sort_by(f64::total_cmp);
    assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
}

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    let len: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, len).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

fn nchw() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 2usize..5, 1usize..4, 1usize..4).prop_map(|(n, c, h, w)| [n, c, h, w])
}

proptest! {
    #[test]
    fn softmax_pixels_are_distributions(x in nchw().prop_flat_map(tensor)) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = tape.softmax_channel(v).unwrap();
        let [n, c, h, w] = x.shape()[..] else { unreachable!() };
        let d = tape.value(s).data();
        for b in 0..n {
            for p in 0..h * w {
                let col: Vec<f64> = (0..c).map(|k| d[(b * c + k) * h * w + p]).collect();
                prop_assert!(col.iter().all(|&v| v > 0.0));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gram_is_symmetric_psd(x in nchw().prop_flat_map(tensor)) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let g = losses::gram(&mut tape, v).unwrap();
        let [n, c, _, _] = x.shape()[..] else { unreachable!() };
        let d = tape.value(g).data();
        for b in 0..n {
            let m: Vec<Vec<f64>> = (0..c).map(|i| (0..c).map(|j| d[(b * c + i) * c + j]).collect()).collect();
            for i in 0..c {
                for j in 0..c {
                    prop_assert!((m[i][j] - m[j][i]).abs() < 1e-6);
                }
            }
            for e in jacobi_eigenvalues(m) {
                prop_assert!(e >= -1e-6, "eigenvalue {e}");
            }
        }
    }

    #[test]
    fn alignment_losses_nonnegative_and_zero_at_equality(
        (a, b) in nchw().prop_flat_map(|s| (tensor(s), tensor(s)))
    ) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let fa = StageFeatures { features: vec![va] };
        let fb = StageFeatures { features: vec![vb] };
        let opts = AlignOptions::default();
        let t = losses::pfr_terms(&mut tape, &fa, &fb, opts).unwrap();
        let same = losses::pfr_terms(&mut tape, &fa, &fa, opts).unwrap();
        for v in [t.style, t.content, t.pfr] {
            prop_assert!(tape.value(v).item().unwrap() >= 0.0);
        }
        for v in [same.style, same.content, same.pfr] {
            prop_assert_eq!(tape.value(v).item().unwrap(), 0.0);
        }
        let sum = tape.value(t.style).item().unwrap() + tape.value(t.content).item().unwrap();
        prop_assert!((tape.value(t.pfr).item().unwrap() - sum).abs() < 1e-7);
    }

    #[test]
    fn metrics_ignore_pixel_order(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..80),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let cm = |p: &[(u8, u8)]| {
            let mut cm = ConfusionMatrix::new(4);
            let (pred, truth): (Vec<u8>, Vec<u8>) = p.iter().copied().unzip();
            cm.update(&pred, &truth).unwrap();
            cm
        };
        let (a, b) = (cm(&pairs), cm(&shuffled));
        prop_assert_eq!(a.iou_per_class(), b.iou_per_class());
        prop_assert_eq!(a.miou(), b.miou());
        for iou in a.iou_per_class().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&iou));
        }
    }
}

#[test]
fn default_shift_moves_every_channel_mean() {
    let spec = SceneSpec::default();
    let (src, tgt) = content_seeds(3, 40, false);
    let mean = |style: &DomainStyle, seeds: &[u64]| {
        let mut acc = [0.0f64; 3];
        for &s in seeds {
            let img = generate_scene(&spec, style, s).unwrap().image;
            let plane = img.numel() / 3;
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            }
        }
        acc.map(|a| a / seeds.len() as f64)
    };
    let a = mean(&DomainStyle::source_default(5), &src);
    let b = mean(&DomainStyle::target_default(5), &tgt);
    let diff = (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
    assert!(diff >= 0.05, "mean per-channel difference {diff}");
}

/// Averaged over 20 draws, an untrained encoder sees smaller content
/// distances between same-seed source/target pairs than between unpaired
/// ones.
#[test]
fn paired_content_loss_is_smaller_than_unpaired() {
    let spec = SceneSpec { image_size: 32, ..SceneSpec::default() };
    let cfg = SegNetConfig { input_height: 32, input_width: 32, ..SegNetConfig::default() };
    let net = SegNet::<f32>::init(cfg, 9).unwrap();
    let (ss, ts) = (DomainStyle::source_default(5), DomainStyle::target_default(5));
    let (src, tgt) = content_seeds(21, 20, false);
    let content = |a: u64, b: u64| {
        let x = generate_scene(&spec, &ss, a).unwrap().image.reshaped([1, 3, 32, 32]).unwrap();
        let y = generate_scene(&spec, &ts, b).unwrap().image.reshaped([1, 3, 32, 32]).unwrap();
        let mut tape = Tape::new();
        let m = net.bind(&mut tape, false);
        let (vx, vy) = (tape.constant(x), tape.constant(y));
        let fx = m.forward_features(&mut tape, vx).unwrap();
        let fy = m.forward_features(&mut tape, vy).unwrap();
        let c = losses::content_loss(&mut tape, &fx, &fy, AlignOptions::default()).unwrap();
        tape.value(c).item().unwrap() as f64
    };
    let paired: f64 = src.iter().map(|&s| content(s, s)).sum::<f64>() / 20.0;
    let unpaired: f64 = src.iter().zip(&tgt).map(|(&s, &t)| content(s, t)).sum::<f64>() / 20.0;
    assert!(paired < unpaired, "paired {paired} unpaired {unpaired}");
}

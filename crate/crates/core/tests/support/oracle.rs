//! Independent reference implementations and the grids they are checked on.

use std::collections::BTreeSet;

use pfr_core::metrics::ConfusionMatrix;
use pfr_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct nested-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (r, q) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                    continue;
                                }
                                acc += k[((o * cin + c) * kh + u) * kw + v]
                                    * x[((s * cin + c) * h + r as usize) * w + q as usize];
                            }
                        }
                    }
                    y[((s * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (y, oh, ow)
}

/// Every shape up to 2x3x5x5 with kernels up to 3x3, strides {1, 2} and
/// paddings {0, 1}. Integer-valued inputs keep every partial sum exact, so
/// equality is bitwise regardless of summation order. Returns the number of
/// cases checked.
pub fn conv_grid(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = 0;
    for n in 1..=2 {
        for cin in 1..=3 {
            for h in 1..=5 {
                for w in 1..=5 {
                    for kh in 1..=3 {
                        for kw in 1..=3 {
                            for stride in [1, 2] {
                                for pad in [0, 1] {
                                    if kh > h + 2 * pad || kw > w + 2 * pad {
                                        continue;
                                    }
                                    let cout = rng.random_range(1..=3);
                                    let mut int = |len: usize| -> Vec<f64> {
                                        (0..len).map(|_| rng.random_range(-4i32..=4) as f64).collect()
                                    };
                                    let x = int(n * cin * h * w);
                                    let k = int(cout * cin * kh * kw);
                                    let b = int(cout);
                                    let (expected, oh, ow) =
                                        conv_oracle(&x, (n, cin, h, w), &k, (cout, kh, kw), &b, stride, pad);
                                    let mut tape = Tape::<f64>::new();
                                    let xv = tape.constant(Tensor::new([n, cin, h, w], x).unwrap());
                                    let kv = tape.constant(Tensor::new([cout, cin, kh, kw], k).unwrap());
                                    let bv = tape.constant(Tensor::new([cout], b).unwrap());
                                    let y = tape.conv2d(xv, kv, bv, stride, pad).map_err(|e| e.to_string())?;
                                    let case = format!("n={n} cin={cin} h={h} w={w} k={kh}x{kw} s={stride} p={pad}");
                                    if tape.value(y).shape() != [n, cout, oh, ow] {
                                        return Err(format!("{case}: shape {:?}", tape.value(y).shape()));
                                    }
                                    if tape.value(y).data() != &expected[..] {
                                        return Err(format!("{case}: values differ"));
                                    }
                                    cases += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cases)
}

/// IoU from pixel index sets: |truth_c ∩ pred_c| / |truth_c ∪ pred_c|.
pub fn set_iou(pred: &[u8], truth: &[u8], class: u8) -> Option<f64> {
    let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
    let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
    let union = t.union(&p).count();
    (union > 0).then(|| t.intersection(&p).count() as f64 / union as f64)
}

/// Compares confusion-matrix IoU and mIoU with the set oracle on `maps`
/// random 8x8 label maps; returns the largest absolute difference.
pub fn iou_maps(seed: u64, maps: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 5u8;
    let mut worst: f64 = 0.0;
    for m in 0..maps {
        let truth: Vec<u8> = (0..64).map(|_| rng.random_range(0..classes)).collect();
        // mostly-correct predictions with random corruption
        let pred: Vec<u8> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..classes) })
            .collect();
        let mut cm = ConfusionMatrix::new(classes as usize);
        cm.update(&pred, &truth).map_err(|e| e.to_string())?;
        let ious = cm.iou_per_class();
        let mut present = Vec::new();
        for c in 0..classes {
            let expected = set_iou(&pred, &truth, c);
            match (ious[c as usize], expected) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (a, b) if a == b => {}
                (a, b) => return Err(format!("map {m} class {c}: {a:?} vs {b:?}")),
            }
            if truth.contains(&c) {
                present.push(expected.unwrap());
            }
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        let got = cm.miou().ok_or_else(|| format!("map {m}: no mIoU"))?;
        worst = worst.max((got - miou).abs());
    }
    Ok(worst)
}

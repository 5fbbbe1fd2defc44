//! Central finite-difference verification of every differentiable
//! operation and loss composition, in `f64`.
//!
//! Each registered check draws random small shapes, reduces the output to a
//! scalar with a fixed pseudo-random projection, and compares the tape's
//! gradient of every input against `(f(x + eps) - f(x - eps)) / (2 eps)`.
//! Coordinates whose perturbation flips the sign of any rectifier input are
//! skipped and counted, since the difference quotient straddles a kink
//! there.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::losses::{self, AlignOptions, Distance, LossWeights, Pairing};
use crate::models::{
    Discriminator, DiscriminatorConfig, ModelError, SegNet, SegNetConfig, StageFeatures,
};
use crate::tensor::{Tensor, TensorError};
use crate::train::derive_seed;

/// Gradient magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Random shapes drawn per registered check.
    pub shapes_per_op: usize,
    /// Coordinates probed per input tensor (all of them when smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            tol: 1e-4,
            shapes_per_op: 20,
            max_coords: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub shapes: usize,
    pub coords: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// Inputs of one random instance and the function that reduces them to a
/// scalar.
pub struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

/// A named family of random instances.
pub struct GradOp {
    pub name: &'static str,
    make: fn(&mut ChaCha8Rng) -> Case,
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::invalid("model", alloc::format!("{other}")),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `[0.1, 1)` with random sign, keeping rectifier inputs clear of 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * r)` with a fixed pseudo-random `r` derived from the shape only.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = tape.value(y).shape().to_vec();
    let weights = Tensor::from_fn(shape, |i| {
        libm::sin(i as f64 * 12.9898 + 78.233) * 0.9 + 0.05
    });
    let r = tape.constant(weights);
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

fn unary(
    rng: &mut ChaCha8Rng,
    input: Tensor<f64>,
    f: fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
) -> Case {
    let _ = rng;
    Case {
        inputs: vec![input],
        build: Box::new(move |tape, v| {
            let y = f(tape, v[0])?;
            project(tape, y)
        }),
    }
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let nd = rng.random_range(1..=4);
    (0..nd).map(|_| rng.random_range(1..=4)).collect()
}

fn nchw_shape(rng: &mut ChaCha8Rng, min_c: usize) -> [usize; 4] {
    [
        rng.random_range(1..=2),
        rng.random_range(min_c..=4),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    ]
}

fn tiny_seg_config(rng: &mut ChaCha8Rng, size: usize) -> SegNetConfig {
    SegNetConfig {
        stage_channels: [
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(2..=3),
        ],
        num_classes: rng.random_range(2..=3),
        in_channels: 3,
        input_height: size,
        input_width: size + rng.random_range(0..=2),
    }
}

/// Random network, image(s) and label map for the composed-loss checks.
struct NetFixture {
    seg: SegNet<f64>,
    disc: Option<Discriminator<f64>>,
    batch: usize,
    labels: Vec<usize>,
}

impl NetFixture {
    fn new(rng: &mut ChaCha8Rng, with_disc: bool) -> (Self, Vec<Tensor<f64>>) {
        let size = if with_disc {
            rng.random_range(16..=18)
        } else {
            rng.random_range(6..=10)
        };
        let cfg = tiny_seg_config(rng, size);
        let mut seg = SegNet::<f64>::init(cfg.clone(), rng.random()).expect("valid config");
        // nonzero biases keep pre-activations off the kink
        for (p, spec) in seg.params_mut().iter_mut().zip(cfg.param_specs()) {
            if spec.0.ends_with("bias") {
                for v in p.data_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let batch = rng.random_range(1..=2);
        let disc = with_disc.then(|| {
            let dcfg = DiscriminatorConfig {
                num_classes: cfg.num_classes,
                hidden_channels: [
                    rng.random_range(1..=3),
                    rng.random_range(1..=3),
                    rng.random_range(1..=2),
                ],
            };
            let mut d = Discriminator::<f64>::init(dcfg, rng.random()).expect("valid config");
            for p in d.params_mut() {
                if p.ndim() == 1 {
                    for v in p.data_mut() {
                        *v = rng.random_range(-0.2..0.2);
                    }
                }
            }
            d
        });
        let pixels = batch * cfg.input_height * cfg.input_width;
        let labels = (0..pixels)
            .map(|_| rng.random_range(0..cfg.num_classes))
            .collect();
        let img = [batch, 3, cfg.input_height, cfg.input_width];
        let mut inputs = vec![rand_tensor(rng, &img, 0.0, 1.0), rand_tensor(rng, &img, 0.0, 1.0)];
        inputs.extend(seg.params().iter().cloned());
        if let Some(d) = &disc {
            inputs.extend(d.params().iter().cloned());
        }
        (
            NetFixture {
                seg,
                disc,
                batch,
                labels,
            },
            inputs,
        )
    }

    /// Runs both images through the network. Input layout: source image,
    /// target image, segmentation parameters, discriminator parameters.
    fn forward(
        &self,
        tape: &mut Tape<f64>,
        v: &[Var],
    ) -> Result<NetVars, TensorError> {
        let np = self.seg.params().len();
        let m = self.seg.bind_vars(v[2..2 + np].to_vec());
        let src = m.forward(tape, v[0]).map_err(model_err)?;
        let tgt = m.forward(tape, v[1]).map_err(model_err)?;
        Ok(NetVars {
            src_logits: src.logits,
            tgt_logits: tgt.logits,
            src_feats: src.features,
            tgt_feats: tgt.features,
            disc_vars: v[2 + np..].to_vec(),
        })
    }

    fn discriminate(
        &self,
        tape: &mut Tape<f64>,
        vars: &NetVars,
        logits: Var,
    ) -> Result<Var, TensorError> {
        let d = self
            .disc
            .as_ref()
            .expect("fixture built with discriminator")
            .bind_vars(vars.disc_vars.clone());
        let p = tape.softmax_channel(logits)?;
        d.forward(tape, p).map_err(model_err)
    }
}

struct NetVars {
    src_logits: Var,
    tgt_logits: Var,
    src_feats: StageFeatures,
    tgt_feats: StageFeatures,
    disc_vars: Vec<Var>,
}

fn net_case(
    rng: &mut ChaCha8Rng,
    with_disc: bool,
    loss: fn(&NetFixture, &mut Tape<f64>, &NetVars) -> Result<Var, TensorError>,
) -> Case {
    let (fixture, inputs) = NetFixture::new(rng, with_disc);
    Case {
        inputs,
        build: Box::new(move |tape, v| {
            let vars = fixture.forward(tape, v)?;
            loss(&fixture, tape, &vars)
        }),
    }
}

fn feature_pair(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, usize) {
    let stages = rng.random_range(1..=3);
    let n = rng.random_range(1..=2);
    let mut inputs = Vec::new();
    let mut shapes = Vec::new();
    for _ in 0..stages {
        shapes.push([
            n,
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        ]);
    }
    for _ in 0..2 {
        for s in &shapes {
            inputs.push(rand_tensor(rng, s, -1.0, 1.0));
        }
    }
    (inputs, stages)
}

fn feature_case(
    rng: &mut ChaCha8Rng,
    f: fn(&mut Tape<f64>, &StageFeatures, &StageFeatures) -> Result<Var, TensorError>,
) -> Case {
    let (inputs, stages) = feature_pair(rng);
    Case {
        inputs,
        build: Box::new(move |tape, v| {
            let src = StageFeatures {
                features: v[..stages].to_vec(),
            };
            let tgt = StageFeatures {
                features: v[stages..].to_vec(),
            };
            f(tape, &src, &tgt)
        }),
    }
}

const MS: AlignOptions = AlignOptions {
    distance: Distance::MeanSquared,
    pairing: Pairing::PerSample,
};
const FROB: AlignOptions = AlignOptions {
    distance: Distance::Frobenius,
    pairing: Pairing::PerSample,
};
const BATCH: AlignOptions = AlignOptions {
    distance: Distance::MeanSquared,
    pairing: Pairing::BatchMean,
};

macro_rules! op {
    ($name:literal, $make:expr) => {
        GradOp {
            name: $name,
            make: $make,
        }
    };
}

/// Every registered check: primitive operators, losses on raw tensors, and
/// losses composed through the networks.
pub fn registry() -> Vec<GradOp> {
    vec![
        op!("conv2d", |rng| {
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
            let (kh, kw) = (
                rng.random_range(1..=3usize.min(h + 2 * pad)),
                rng.random_range(1..=3usize.min(w + 2 * pad)),
            );
            let (n, cin, cout) = (
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            Case {
                inputs: vec![
                    rand_tensor(rng, &[n, cin, h, w], -1.0, 1.0),
                    rand_tensor(rng, &[cout, cin, kh, kw], -1.0, 1.0),
                    rand_tensor(rng, &[cout], -1.0, 1.0),
                ],
                build: Box::new(move |tape, v| {
                    let y = tape.conv2d(v[0], v[1], v[2], stride, pad)?;
                    project(tape, y)
                }),
            }
        }),
        op!("relu", |rng| {
            let s = small_shape(rng);
            let x = away_from_zero(rng, &s);
            unary(rng, x, |t, v| t.relu(v))
        }),
        op!("leaky_relu", |rng| {
            let s = small_shape(rng);
            let x = away_from_zero(rng, &s);
            unary(rng, x, |t, v| t.leaky_relu(v, 0.2))
        }),
        op!("bilinear_upsample", |rng| {
            let shape = nchw_shape(rng, 1);
            let (oh, ow) = (
                shape[2] + rng.random_range(0..=5),
                shape[3] + rng.random_range(0..=5),
            );
            Case {
                inputs: vec![rand_tensor(rng, &shape, -1.0, 1.0)],
                build: Box::new(move |tape, v| {
                    let y = tape.bilinear_upsample(v[0], oh, ow)?;
                    project(tape, y)
                }),
            }
        }),
        op!("matmul", |rng| {
            let (m, k, n) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let batched = rng.random::<bool>();
            let (sa, sb) = if batched {
                let b = rng.random_range(1..=3);
                (vec![b, m, k], vec![b, k, n])
            } else {
                (vec![m, k], vec![k, n])
            };
            Case {
                inputs: vec![rand_tensor(rng, &sa, -1.0, 1.0), rand_tensor(rng, &sb, -1.0, 1.0)],
                build: Box::new(|tape, v| {
                    let y = tape.matmul(v[0], v[1])?;
                    project(tape, y)
                }),
            }
        }),
        op!("transpose", |rng| {
            let mut s = small_shape(rng);
            s.truncate(3);
            if s.len() < 2 {
                s.push(3);
            }
            let x = rand_tensor(rng, &s, -1.0, 1.0);
            unary(rng, x, |t, v| t.transpose(v))
        }),
        op!("reshape", |rng| {
            let s = small_shape(rng);
            let numel: usize = s.iter().product();
            let x = rand_tensor(rng, &s, -1.0, 1.0);
            Case {
                inputs: vec![x],
                build: Box::new(move |tape, v| {
                    let y = tape.reshape(v[0], &[numel, 1])?;
                    project(tape, y)
                }),
            }
        }),
        op!("add", |rng| binary(rng, |t, a, b| t.add(a, b))),
        op!("sub", |rng| binary(rng, |t, a, b| t.sub(a, b))),
        op!("mul", |rng| binary(rng, |t, a, b| t.mul(a, b))),
        op!("scalar_mul", |rng| {
            let s = small_shape(rng);
            let x = rand_tensor(rng, &s, -1.0, 1.0);
            unary(rng, x, |t, v| t.scalar_mul(v, -1.7))
        }),
        op!("sum", |rng| {
            let s = small_shape(rng);
            let x = rand_tensor(rng, &s, -1.0, 1.0);
            unary(rng, x, |t, v| t.sum(v))
        }),
        op!("mean", |rng| {
            let s = small_shape(rng);
            let x = rand_tensor(rng, &s, -1.0, 1.0);
            unary(rng, x, |t, v| t.mean(v))
        }),
        op!("log", |rng| {
            let s = small_shape(rng);
            let x = rand_tensor(rng, &s, 0.2, 3.0);
            unary(rng, x, |t, v| t.log(v))
        }),
        op!("exp", |rng| {
            let s = small_shape(rng);
            let x = rand_tensor(rng, &s, -2.0, 2.0);
            unary(rng, x, |t, v| t.exp(v))
        }),
        op!("sqrt", |rng| {
            let s = small_shape(rng);
            let x = rand_tensor(rng, &s, 0.2, 3.0);
            unary(rng, x, |t, v| t.sqrt(v))
        }),
        op!("softmax_channel", |rng| {
            let s = nchw_shape(rng, 2);
            let x = rand_tensor(rng, &s, -3.0, 3.0);
            unary(rng, x, |t, v| t.softmax_channel(v))
        }),
        op!("log_softmax_channel", |rng| {
            let s = nchw_shape(rng, 2);
            let x = rand_tensor(rng, &s, -3.0, 3.0);
            unary(rng, x, |t, v| t.log_softmax_channel(v))
        }),
        op!("pick_channel", |rng| {
            let s = nchw_shape(rng, 2);
            let labels: Vec<usize> = (0..s[0] * s[2] * s[3])
                .map(|_| rng.random_range(0..s[1]))
                .collect();
            Case {
                inputs: vec![rand_tensor(rng, &s, -1.0, 1.0)],
                build: Box::new(move |tape, v| {
                    let y = tape.pick_channel(v[0], &labels)?;
                    project(tape, y)
                }),
            }
        }),
        op!("log_sigmoid", |rng| {
            let s = small_shape(rng);
            let x = rand_tensor(rng, &s, -6.0, 6.0);
            unary(rng, x, |t, v| t.log_sigmoid(v))
        }),
        op!("batch_mean", |rng| {
            let s = nchw_shape(rng, 1);
            let x = rand_tensor(rng, &s, -1.0, 1.0);
            unary(rng, x, |t, v| t.batch_mean(v))
        }),
        op!("gram", |rng| {
            let s = nchw_shape(rng, 1);
            let x = rand_tensor(rng, &s, -1.0, 1.0);
            unary(rng, x, losses::gram)
        }),
        op!("seg_loss", |rng| {
            let s = nchw_shape(rng, 2);
            let labels: Vec<u8> = (0..s[0] * s[2] * s[3])
                .map(|_| rng.random_range(0..s[1] as u8))
                .collect();
            Case {
                inputs: vec![rand_tensor(rng, &s, -3.0, 3.0)],
                build: Box::new(move |tape, v| losses::seg_loss(tape, v[0], &labels)),
            }
        }),
        op!("style_loss", |rng| feature_case(rng, |t, s, g| losses::style_loss(t, s, g, MS))),
        op!("content_loss", |rng| feature_case(rng, |t, s, g| losses::content_loss(t, s, g, MS))),
        op!("pfr_loss", |rng| feature_case(rng, |t, s, g| losses::pfr_loss(t, s, g, MS))),
        op!("pfr_loss_frobenius", |rng| {
            feature_case(rng, |t, s, g| losses::pfr_loss(t, s, g, FROB))
        }),
        op!("pfr_loss_batch_mean", |rng| {
            feature_case(rng, |t, s, g| losses::pfr_loss(t, s, g, BATCH))
        }),
        op!("adv_loss_d", |rng| {
            let s = nchw_shape(rng, 1);
            let s = [s[0], 1, s[2], s[3]];
            Case {
                inputs: vec![rand_tensor(rng, &s, -4.0, 4.0), rand_tensor(rng, &s, -4.0, 4.0)],
                build: Box::new(|tape, v| losses::adv_loss_d(tape, v[0], v[1])),
            }
        }),
        op!("adv_loss_g", |rng| {
            let s = nchw_shape(rng, 1);
            let x = rand_tensor(rng, &[s[0], 1, s[2], s[3]], -4.0, 4.0);
            Case {
                inputs: vec![x],
                build: Box::new(|tape, v| losses::adv_loss_g(tape, v[0])),
            }
        }),
        op!("total_loss", |rng| Case {
            inputs: (0..3).map(|_| rand_tensor(rng, &[1], 0.0, 2.0)).collect(),
            build: Box::new(|tape, v| {
                losses::total_loss(tape, v[0], v[1], v[2], &LossWeights::default())
            }),
        }),
        op!("segnet_seg_loss", |rng| net_case(rng, false, |f, tape, v| {
            let labels = f.labels.clone();
            losses::seg_loss(
                tape,
                v.src_logits,
                &labels.iter().map(|&l| l as u8).collect::<Vec<_>>(),
            )
        })),
        op!("segnet_style_loss", |rng| net_case(rng, false, |_, tape, v| {
            losses::style_loss(tape, &v.src_feats, &v.tgt_feats, MS)
        })),
        op!("segnet_content_loss", |rng| net_case(rng, false, |_, tape, v| {
            losses::content_loss(tape, &v.src_feats, &v.tgt_feats, MS)
        })),
        op!("segnet_pfr_loss", |rng| net_case(rng, false, |_, tape, v| {
            losses::pfr_loss(tape, &v.src_feats, &v.tgt_feats, MS)
        })),
        op!("segnet_adv_loss_g", |rng| net_case(rng, true, |f, tape, v| {
            let dt = f.discriminate(tape, v, v.tgt_logits)?;
            losses::adv_loss_g(tape, dt)
        })),
        op!("segnet_adv_loss_d", |rng| net_case(rng, true, |f, tape, v| {
            let ds = f.discriminate(tape, v, v.src_logits)?;
            let dt = f.discriminate(tape, v, v.tgt_logits)?;
            losses::adv_loss_d(tape, ds, dt)
        })),
        op!("segnet_total_loss", |rng| net_case(rng, true, |f, tape, v| {
            let labels: Vec<u8> = f.labels.iter().map(|&l| l as u8).collect();
            let seg = losses::seg_loss(tape, v.src_logits, &labels)?;
            let pfr = losses::pfr_loss(tape, &v.src_feats, &v.tgt_feats, MS)?;
            let dt = f.discriminate(tape, v, v.tgt_logits)?;
            let adv = losses::adv_loss_g(tape, dt)?;
            // unit weights so every term is visible at finite-difference scale
            let w = LossWeights {
                lambda_adv: 1.0,
                lambda_pfr: 1.0,
            };
            let _ = f.batch;
            losses::total_loss(tape, seg, adv, pfr, &w)
        })),
    ]
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var, TensorError>) -> Case {
    let s = small_shape(rng);
    Case {
        inputs: vec![rand_tensor(rng, &s, -1.0, 1.0), rand_tensor(rng, &s, -1.0, 1.0)],
        build: Box::new(move |tape, v| {
            let y = f(tape, v[0], v[1])?;
            project(tape, y)
        }),
    }
}

pub fn find(name: &str) -> Option<GradOp> {
    registry().into_iter().find(|op| op.name == name)
}

pub fn names() -> Vec<&'static str> {
    registry().iter().map(|op| op.name).collect()
}

/// Outcome of one instance: worst relative error, probed and skipped
/// coordinate counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseResult {
    pub max_rel_err: f64,
    pub coords: usize,
    pub skipped: usize,
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>), TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let value = tape.value(out).item().ok_or_else(|| {
        TensorError::NotScalar(tape.value(out).shape().to_vec())
    })?;
    Ok((value, tape.kink_signature()))
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn check_case(
    case: &Case,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CaseResult, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let base_sig = tape.kink_signature();
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut result = CaseResult {
        max_rel_err: 0.0,
        coords: 0,
        skipped: 0,
    };
    let mut inputs = case.inputs.clone();
    for (k, grad) in analytic.iter().enumerate() {
        let numel = inputs[k].numel();
        let coords: Vec<usize> = if numel <= cfg.max_coords {
            (0..numel).collect()
        } else {
            (0..cfg.max_coords).map(|_| rng.random_range(0..numel)).collect()
        };
        for i in coords {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + cfg.eps;
            let (plus, sig_plus) = evaluate(case, &inputs)?;
            inputs[k].data_mut()[i] = orig - cfg.eps;
            let (minus, sig_minus) = evaluate(case, &inputs)?;
            inputs[k].data_mut()[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                result.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            result.coords += 1;
            result.max_rel_err = result.max_rel_err.max(relative_error(grad[i], numeric));
        }
    }
    Ok(result)
}

/// Runs `cfg.shapes_per_op` random instances of `op`.
pub fn check_op(op: &GradOp, cfg: &GradCheckConfig, index: u64) -> Result<CheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + index));
    let mut report = CheckReport {
        name: op.name,
        shapes: 0,
        coords: 0,
        skipped: 0,
        max_rel_err: 0.0,
        passed: false,
    };
    for _ in 0..cfg.shapes_per_op {
        let case = (op.make)(&mut rng);
        let r = check_case(&case, cfg, &mut rng)?;
        report.shapes += 1;
        report.coords += r.coords;
        report.skipped += r.skipped;
        report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
    }
    report.passed = report.coords > 0 && report.max_rel_err < cfg.tol;
    Ok(report)
}

/// Runs every registered check, in registry order.
pub fn check_all(cfg: &GradCheckConfig) -> Result<Vec<CheckReport>, TensorError> {
    registry()
        .iter()
        .enumerate()
        .map(|(i, op)| check_op(op, cfg, i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let mut names = names();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(find("conv2d").is_some());
        assert!(find("nope").is_none());
    }

    #[test]
    fn relu_and_exp_pass() {
        let cfg = GradCheckConfig {
            shapes_per_op: 5,
            ..GradCheckConfig::default()
        };
        for (i, name) in ["relu", "exp"].iter().enumerate() {
            let r = check_op(&find(name).unwrap(), &cfg, i as u64).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn machine_precision_tolerance_fails() {
        let cfg = GradCheckConfig {
            tol: 1e-12,
            shapes_per_op: 5,
            ..GradCheckConfig::default()
        };
        let r = check_op(&find("exp").unwrap(), &cfg, 0).unwrap();
        assert!(!r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // d/dx sum(x * c) = c, compare against a deliberately wrong value
        assert!(relative_error(1.0, 1.001) > 1e-4);
        assert!(relative_error(0.0, 1e-9) < 1e-2);
    }
}

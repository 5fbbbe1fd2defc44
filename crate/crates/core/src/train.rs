//! Alternating adversarial optimization.
//!
//! Each step first updates the segmentation network on the combined
//! objective with the discriminator frozen, then updates the discriminator
//! on detached probability maps from that same forward pass with the
//! segmentation network untouched. Target images enter only as unlabeled
//! [`TargetBatch`]es.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::losses::{self, AlignOptions, LossBreakdown, LossWeights};
use crate::models::{Discriminator, DiscriminatorConfig, ModelError, SegNet, SegNetConfig};
use crate::optim::{Adam, Sgd};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("step {step}: non-finite {component}: {source}")]
    NonFinite {
        step: usize,
        component: &'static str,
        source: TensorError,
    },
    #[error("step {step}: {component}: {source}")]
    Tensor {
        step: usize,
        component: &'static str,
        source: TensorError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Images per domain per step.
    pub batch_size: usize,
    pub lr_seg: f64,
    pub momentum: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub align: AlignOptions,
    pub seed: u64,
    pub eval_every: usize,
    pub paired_debug: bool,
    /// Polynomial learning-rate decay `(1 - step / iterations)^power`.
    pub poly_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 4,
            lr_seg: 0.0025,
            momentum: 0.9,
            lr_disc: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            align: AlignOptions::default(),
            seed: 0,
            eval_every: 500,
            paired_debug: false,
            poly_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("lr_seg", self.lr_seg),
            ("lr_disc", self.lr_disc),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(TrainError::Config(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(format!("{e}")))?;
        Ok(())
    }

    /// Segmentation learning rate at `step` (0-based).
    pub fn seg_lr_at(&self, step: usize) -> f64 {
        match self.poly_decay {
            Some(power) if self.iterations > 0 => {
                let frac = 1.0 - (step as f64 / self.iterations as f64).min(1.0);
                self.lr_seg * libm::pow(frac, power)
            }
            _ => self.lr_seg,
        }
    }
}

/// SplitMix64 finalizer; derives independent stream seeds from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const STREAM_SOURCE_ORDER: u64 = 1;
pub const STREAM_TARGET_ORDER: u64 = 2;
pub const STREAM_SEG_INIT: u64 = 3;
pub const STREAM_DISC_INIT: u64 = 4;

/// Endless reshuffled-epoch index stream.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        assert!(len > 0, "cannot sample from an empty split");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        EpochSampler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Labelled source images `[N, 3, H, W]` with `N*H*W` class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Unlabelled target images `[N, 3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub images: Tensor<f32>,
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>, TensorError> {
    Tensor::stack(images)
}

/// Everything Phase A produces: the loss values and the detached
/// per-pixel class distributions of both domains.
#[derive(Debug, Clone)]
pub struct SegPhase {
    pub seg: f64,
    pub style: f64,
    pub content: f64,
    pub pfr: f64,
    pub adv_g: f64,
    pub total: f64,
    pub src_probs: Tensor<f32>,
    pub tgt_probs: Tensor<f32>,
}

/// Segmentation network and discriminator with their optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    seg: SegNet<f32>,
    disc: Discriminator<f32>,
    sgd: Sgd<f32>,
    adam: Adam<f32>,
    step: usize,
}

fn item(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item().expect("scalar loss") as f64
}

fn collect_grads(tape: &Tape<f32>, vars: &[Var], params: &[Tensor<f32>]) -> Vec<Vec<f32>> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect()
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        seg_config: SegNetConfig,
        disc_config: DiscriminatorConfig,
    ) -> Result<Self, TrainError> {
        let seg = SegNet::init(seg_config, derive_seed(config.seed, STREAM_SEG_INIT))?;
        let disc = Discriminator::init(disc_config, derive_seed(config.seed, STREAM_DISC_INIT))?;
        Self::from_nets(config, seg, disc)
    }

    pub fn from_nets(
        config: TrainConfig,
        seg: SegNet<f32>,
        disc: Discriminator<f32>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if seg.config().num_classes != disc.config().num_classes {
            return Err(TrainError::Config(format!(
                "segmentation network has {} classes, discriminator {}",
                seg.config().num_classes,
                disc.config().num_classes
            )));
        }
        let sgd = Sgd::new(seg.params(), config.lr_seg as f32, config.momentum as f32);
        let adam = Adam::new(
            disc.params(),
            config.lr_disc as f32,
            config.beta1 as f32,
            config.beta2 as f32,
            config.adam_eps as f32,
        );
        Ok(Trainer {
            config,
            seg,
            disc,
            sgd,
            adam,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn seg_net(&self) -> &SegNet<f32> {
        &self.seg
    }

    pub fn discriminator(&self) -> &Discriminator<f32> {
        &self.disc
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    fn err(&self, component: &'static str) -> impl Fn(TensorError) -> TrainError {
        let step = self.step;
        move |source| match source {
            TensorError::NonFinite { .. } => TrainError::NonFinite {
                step,
                component,
                source,
            },
            other => TrainError::Tensor {
                step,
                component,
                source: other,
            },
        }
    }

    fn model_err(&self, component: &'static str) -> impl Fn(ModelError) -> TrainError {
        let inner = self.err(component);
        move |e| match e {
            ModelError::Tensor(t) => inner(t),
            other => TrainError::Model(other),
        }
    }

    /// Phase A: one SGD step of the segmentation network on
    /// `seg + lambda_adv * adv_g + lambda_pfr * pfr`, discriminator frozen.
    pub fn phase_segmentation(
        &mut self,
        src: &SourceBatch,
        tgt: &TargetBatch,
    ) -> Result<SegPhase, TrainError> {
        let mut tape = Tape::<f32>::new();
        let m = self.seg.bind(&mut tape, true);
        let d = self.disc.bind(&mut tape, false);
        let xs = tape.constant(src.images.clone());
        let xt = tape.constant(tgt.images.clone());
        let out_s = m.forward(&mut tape, xs).map_err(self.model_err("source forward"))?;
        let out_t = m.forward(&mut tape, xt).map_err(self.model_err("target forward"))?;

        let seg = losses::seg_loss(&mut tape, out_s.logits, &src.labels).map_err(self.err("seg"))?;
        let terms = losses::pfr_terms(&mut tape, &out_s.features, &out_t.features, self.config.align)
            .map_err(self.err("pfr"))?;
        let ps = tape.softmax_channel(out_s.logits).map_err(self.err("softmax"))?;
        let pt = tape.softmax_channel(out_t.logits).map_err(self.err("softmax"))?;
        let dt = d.forward(&mut tape, pt).map_err(self.model_err("discriminator"))?;
        let adv_g = losses::adv_loss_g(&mut tape, dt).map_err(self.err("adv_g"))?;
        let total = losses::total_loss(&mut tape, seg, adv_g, terms.pfr, &self.config.weights)
            .map_err(self.err("total"))?;

        let phase = SegPhase {
            seg: item(&tape, seg),
            style: item(&tape, terms.style),
            content: item(&tape, terms.content),
            pfr: item(&tape, terms.pfr),
            adv_g: item(&tape, adv_g),
            total: item(&tape, total),
            src_probs: tape.value(ps).clone(),
            tgt_probs: tape.value(pt).clone(),
        };

        tape.backward(total).map_err(self.err("total backward"))?;
        let grads = collect_grads(&tape, m.vars(), self.seg.params());
        let refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        self.sgd.lr = self.config.seg_lr_at(self.step) as f32;
        self.sgd
            .step(self.seg.params_mut(), &refs)
            .map_err(self.err("sgd"))?;
        Ok(phase)
    }

    /// Phase B: one Adam step of the discriminator on detached maps,
    /// segmentation network untouched. Returns the loss before the update.
    pub fn phase_discriminator(
        &mut self,
        src_probs: &Tensor<f32>,
        tgt_probs: &Tensor<f32>,
    ) -> Result<f64, TrainError> {
        let mut tape = Tape::<f32>::new();
        let d = self.disc.bind(&mut tape, true);
        let ps = tape.constant(src_probs.clone());
        let pt = tape.constant(tgt_probs.clone());
        let ls = d.forward(&mut tape, ps).map_err(self.model_err("discriminator"))?;
        let lt = d.forward(&mut tape, pt).map_err(self.model_err("discriminator"))?;
        let adv_d = losses::adv_loss_d(&mut tape, ls, lt).map_err(self.err("adv_d"))?;
        let value = item(&tape, adv_d);
        tape.backward(adv_d).map_err(self.err("adv_d backward"))?;
        let grads = collect_grads(&tape, d.vars(), self.disc.params());
        let refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        self.adam
            .step(self.disc.params_mut(), &refs)
            .map_err(self.err("adam"))?;
        Ok(value)
    }

    /// One alternating update; returns every loss component.
    pub fn train_step(
        &mut self,
        src: &SourceBatch,
        tgt: &TargetBatch,
    ) -> Result<LossBreakdown, TrainError> {
        let a = self.phase_segmentation(src, tgt)?;
        let adv_d = self.phase_discriminator(&a.src_probs, &a.tgt_probs)?;
        let out = LossBreakdown {
            seg: a.seg,
            style: a.style,
            content: a.content,
            pfr: a.pfr,
            adv_g: a.adv_g,
            adv_d,
            total: a.total,
        };
        if !out.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                component: "loss breakdown",
                source: TensorError::NonFinite {
                    op: "train_step",
                    pass: "forward",
                },
            });
        }
        self.step += 1;
        Ok(out)
    }
}

/// Per-pixel class distributions `[N, C, H, W]` for `images`.
pub fn softmax_maps(net: &SegNet<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
    let mut tape = Tape::new();
    let m = net.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let logits = m.forward_segment(&mut tape, x)?;
    let p = tape.softmax_channel(logits)?;
    Ok(tape.value(p).clone())
}

/// Arg-max class per pixel, `N*H*W` values in `[0, C)`.
pub fn predict(net: &SegNet<f32>, images: &Tensor<f32>) -> Result<Vec<u8>, ModelError> {
    let mut tape = Tape::new();
    let m = net.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let logits = m.forward_segment(&mut tape, x)?;
    Ok(argmax_channel(tape.value(logits)))
}

/// Arg-max over the channel axis of `[N, C, H, W]`; ties go to the lower class.
pub fn argmax_channel(t: &Tensor<f32>) -> Vec<u8> {
    let [n, c, h, w] = t.shape()[..] else {
        panic!("argmax_channel expects [N,C,H,W]")
    };
    let hw = h * w;
    let data = t.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if data[s * c * hw + ch * hw + p] > data[s * c * hw + best * hw + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Fraction of patches the discriminator assigns to the correct domain
/// (source logit > 0, target logit < 0).
pub fn patch_accuracy(
    disc: &Discriminator<f32>,
    src_probs: &Tensor<f32>,
    tgt_probs: &Tensor<f32>,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let d = disc.bind(&mut tape, false);
    let ps = tape.constant(src_probs.clone());
    let pt = tape.constant(tgt_probs.clone());
    let ls = d.forward(&mut tape, ps)?;
    let lt = d.forward(&mut tape, pt)?;
    let correct = tape.value(ls).data().iter().filter(|&&v| v > 0.0).count()
        + tape.value(lt).data().iter().filter(|&&v| v < 0.0).count();
    let total = tape.value(ls).numel() + tape.value(lt).numel();
    Ok(correct as f64 / total as f64)
}

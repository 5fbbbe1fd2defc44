//! Training objectives: pixelwise cross-entropy, Gram-matrix style and raw
//! feature content alignment across domains, and the patch adversarial
//! losses. Every function records onto a [`Tape`] and returns a
//! single-element [`Var`].

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::models::StageFeatures;
use crate::scalar::Scalar;
use crate::tensor::TensorError;

/// Default weight of the generator adversarial term.
pub const LAMBDA_ADV: f64 = 0.002;
/// Default weight of the feature refinement term.
pub const LAMBDA_PFR: f64 = 0.004;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_pfr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: LAMBDA_ADV,
            lambda_pfr: LAMBDA_PFR,
        }
    }
}

impl LossWeights {
    /// Weights of the supervised-only baseline.
    pub const SOURCE_ONLY: LossWeights = LossWeights {
        lambda_adv: 0.0,
        lambda_pfr: 0.0,
    };

    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_adv) || !ok(self.lambda_pfr) {
            return Err(TensorError::invalid(
                "loss_weights",
                format!("weights must be finite and >= 0, got {self:?}"),
            ));
        }
        Ok(())
    }
}

/// How two aligned quantities are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    /// Mean of squared elementwise differences.
    #[default]
    MeanSquared,
    /// Literal (non-squared) Frobenius norm of the difference.
    Frobenius,
}

/// Which source and target samples are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pairing {
    /// Sample `i` of the source batch against sample `i` of the target batch.
    #[default]
    PerSample,
    /// Batch means of each domain against each other.
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AlignOptions {
    pub distance: Distance,
    pub pairing: Pairing,
}

/// Scalar values of every objective at one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub seg: f64,
    pub style: f64,
    pub content: f64,
    pub pfr: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Largest violation of `pfr = style + content` and
    /// `total = seg + lambda_adv * adv_g + lambda_pfr * pfr`.
    pub fn identity_error(&self, weights: &LossWeights) -> f64 {
        let pfr = (self.pfr - (self.style + self.content)).abs();
        let total = (self.total
            - (self.seg + weights.lambda_adv * self.adv_g + weights.lambda_pfr * self.pfr))
            .abs();
        pfr.max(total)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.seg,
            self.style,
            self.content,
            self.pfr,
            self.adv_g,
            self.adv_d,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean negative log-likelihood of the true class over all `N*H*W` pixels.
pub fn seg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
) -> Result<Var, TensorError> {
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let logp = tape.log_softmax_channel(logits)?;
    let picked = tape.pick_channel(logp, &labels)?;
    let mean = tape.mean(picked)?;
    tape.scalar_mul(mean, -T::one())
}

/// Per-sample Gram matrix `F F^T / (ch * h * w)` of `[N, ch, h, w]` features,
/// shape `[N, ch, ch]`.
pub fn gram<T: Scalar>(tape: &mut Tape<T>, feature: Var) -> Result<Var, TensorError> {
    let shape = tape.value(feature).shape().to_vec();
    let [n, ch, h, w] = shape[..] else {
        return Err(TensorError::shape(
            "gram",
            format!("expected [N,ch,h,w], got {shape:?}"),
        ));
    };
    let flat = tape.reshape(feature, &[n, ch, h * w])?;
    let flat_t = tape.transpose(flat)?;
    let prod = tape.matmul(flat, flat_t)?;
    tape.scalar_mul(prod, T::one() / T::from_f64((ch * h * w) as f64))
}

fn distance<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    opts: AlignOptions,
) -> Result<Var, TensorError> {
    let (a, b) = match opts.pairing {
        Pairing::PerSample => (a, b),
        Pairing::BatchMean => (tape.batch_mean(a)?, tape.batch_mean(b)?),
    };
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    match opts.distance {
        Distance::MeanSquared => tape.mean(sq),
        Distance::Frobenius => {
            let s = tape.sum(sq)?;
            tape.sqrt(s)
        }
    }
}

fn check_stages(
    op: &'static str,
    src: &StageFeatures,
    tgt: &StageFeatures,
) -> Result<(), TensorError> {
    if src.features.is_empty() || src.features.len() != tgt.features.len() {
        return Err(TensorError::shape(
            op,
            format!(
                "stage counts differ or are empty: {} vs {}",
                src.features.len(),
                tgt.features.len()
            ),
        ));
    }
    Ok(())
}

fn sum_over_stages<T: Scalar>(
    tape: &mut Tape<T>,
    terms: impl IntoIterator<Item = Var>,
) -> Result<Var, TensorError> {
    let mut iter = terms.into_iter();
    let mut acc = iter.next().expect("at least one stage");
    for t in iter {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Sum over stages of the distance between source and target Gram matrices.
pub fn style_loss<T: Scalar>(
    tape: &mut Tape<T>,
    src: &StageFeatures,
    tgt: &StageFeatures,
    opts: AlignOptions,
) -> Result<Var, TensorError> {
    check_stages("style_loss", src, tgt)?;
    let mut terms = Vec::with_capacity(src.features.len());
    for (&s, &t) in src.features.iter().zip(&tgt.features) {
        let gs = gram(tape, s)?;
        let gt = gram(tape, t)?;
        terms.push(distance(tape, gs, gt, opts)?);
    }
    sum_over_stages(tape, terms)
}

/// Sum over stages of the distance between raw source and target features.
pub fn content_loss<T: Scalar>(
    tape: &mut Tape<T>,
    src: &StageFeatures,
    tgt: &StageFeatures,
    opts: AlignOptions,
) -> Result<Var, TensorError> {
    check_stages("content_loss", src, tgt)?;
    let mut terms = Vec::with_capacity(src.features.len());
    for (&s, &t) in src.features.iter().zip(&tgt.features) {
        terms.push(distance(tape, s, t, opts)?);
    }
    sum_over_stages(tape, terms)
}

/// The two alignment terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct PfrTerms {
    pub style: Var,
    pub content: Var,
    pub pfr: Var,
}

pub fn pfr_terms<T: Scalar>(
    tape: &mut Tape<T>,
    src: &StageFeatures,
    tgt: &StageFeatures,
    opts: AlignOptions,
) -> Result<PfrTerms, TensorError> {
    let style = style_loss(tape, src, tgt, opts)?;
    let content = content_loss(tape, src, tgt, opts)?;
    let pfr = tape.add(style, content)?;
    Ok(PfrTerms {
        style,
        content,
        pfr,
    })
}

/// Style plus content alignment loss.
pub fn pfr_loss<T: Scalar>(
    tape: &mut Tape<T>,
    src: &StageFeatures,
    tgt: &StageFeatures,
    opts: AlignOptions,
) -> Result<Var, TensorError> {
    Ok(pfr_terms(tape, src, tgt, opts)?.pfr)
}

/// Discriminator objective, minimized: source patches labelled 1, target 0.
pub fn adv_loss_d<T: Scalar>(
    tape: &mut Tape<T>,
    src_logits: Var,
    tgt_logits: Var,
) -> Result<Var, TensorError> {
    let ls = tape.log_sigmoid(src_logits)?;
    let src_term = tape.mean(ls)?;
    let neg = tape.scalar_mul(tgt_logits, -T::one())?;
    let lt = tape.log_sigmoid(neg)?;
    let tgt_term = tape.mean(lt)?;
    let both = tape.add(src_term, tgt_term)?;
    tape.scalar_mul(both, -T::one())
}

/// Non-saturating generator objective on target patch logits: push them
/// toward the source label.
pub fn adv_loss_g<T: Scalar>(tape: &mut Tape<T>, tgt_logits: Var) -> Result<Var, TensorError> {
    let lt = tape.log_sigmoid(tgt_logits)?;
    let m = tape.mean(lt)?;
    tape.scalar_mul(m, -T::one())
}

/// `seg + lambda_adv * adv_g + lambda_pfr * pfr`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    seg: Var,
    adv_g: Var,
    pfr: Var,
    weights: &LossWeights,
) -> Result<Var, TensorError> {
    weights.validate()?;
    let a = tape.scalar_mul(adv_g, T::from_f64(weights.lambda_adv))?;
    let p = tape.scalar_mul(pfr, T::from_f64(weights.lambda_pfr))?;
    let sa = tape.add(seg, a)?;
    tape.add(sa, p)
}

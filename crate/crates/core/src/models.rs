//! The segmentation network and the output-space domain classifier.
//!
//! Both networks keep their weights as an ordered, named parameter list so
//! that checkpoints, optimizers and the tape all index parameters the same
//! way. Binding a network to a [`Tape`] records every parameter as a leaf
//! (trainable or frozen) and returns a handle that runs the forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Spatial stride of the first convolution of each encoder stage. The last
/// two stages keep resolution.
pub const STAGE_STRIDES: [usize; 4] = [2, 2, 1, 1];

pub const DISC_KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter {name}: {detail}")]
    Param { name: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegNetConfig {
    pub stage_channels: [usize; 4],
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            stage_channels: [16, 32, 64, 64],
            num_classes: 5,
            in_channels: 3,
            input_height: 64,
            input_width: 64,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(ModelError::Config("input size must be positive".into()));
        }
        Ok(())
    }

    /// `[N, ch, h, w]` of each stage's feature map for a batch of `batch`.
    pub fn stage_shapes(&self, batch: usize) -> [[usize; 4]; 4] {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut out = [[0; 4]; 4];
        for (s, shape) in out.iter_mut().enumerate() {
            // 3x3 kernel, padding 1
            h = (h + 2 - 3) / STAGE_STRIDES[s] + 1;
            w = (w + 2 - 3) / STAGE_STRIDES[s] + 1;
            *shape = [batch, self.stage_channels[s], h, w];
        }
        out
    }

    /// Name and shape of every parameter, in registry order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (s, &ch) in self.stage_channels.iter().enumerate() {
            for (j, c_in) in [(1, cin), (2, ch)] {
                specs.push((format!("stage{}.conv{j}.weight", s + 1), alloc::vec![ch, c_in, 3, 3]));
                specs.push((format!("stage{}.conv{j}.bias", s + 1), alloc::vec![ch]));
            }
            cin = ch;
        }
        specs.push((
            "classifier.weight".into(),
            alloc::vec![self.num_classes, cin, 1, 1],
        ));
        specs.push(("classifier.bias".into(), alloc::vec![self.num_classes]));
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    /// Output channels of the three hidden layers; the fourth emits one logit.
    pub hidden_channels: [usize; 3],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            num_classes: 5,
            hidden_channels: [16, 32, 64],
        }
    }
}

impl DiscriminatorConfig {
    pub const SLOPE: f64 = 0.2;

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 || self.hidden_channels.contains(&0) {
            return Err(ModelError::Config(
                "discriminator needs >= 2 input classes and positive widths".into(),
            ));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let widths = [
            self.num_classes,
            self.hidden_channels[0],
            self.hidden_channels[1],
            self.hidden_channels[2],
            1,
        ];
        let mut specs = Vec::new();
        for l in 0..4 {
            let k = DISC_KERNEL;
            specs.push((format!("conv{}.weight", l + 1), alloc::vec![widths[l + 1], widths[l], k, k]));
            specs.push((format!("conv{}.bias", l + 1), alloc::vec![widths[l + 1]]));
        }
        specs
    }

    /// Spatial extent of the patch logit map for an `h x w` input, or `None`
    /// if the input is too small for four stride-2 layers.
    pub fn output_size(h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for _ in 0..4 {
            if h + 2 < DISC_KERNEL || w + 2 < DISC_KERNEL {
                return None;
            }
            h = (h + 2 - DISC_KERNEL) / 2 + 1;
            w = (w + 2 - DISC_KERNEL) / 2 + 1;
        }
        Some((h, w))
    }
}

/// Kaiming-uniform kernels (bound `sqrt(6 / fan_in)`) and zero biases.
fn init_params<T: Scalar>(specs: &[(String, Vec<usize>)], seed: u64) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|(_, shape)| {
            if shape.len() == 1 {
                return Tensor::zeros(shape.clone());
            }
            let fan_in: usize = shape[1..].iter().product();
            let bound = libm::sqrt(6.0 / fan_in as f64);
            Tensor::from_fn(shape.clone(), |_| {
                T::from_f64(rng.random_range(-bound..bound))
            })
        })
        .collect()
}

fn check_params<T: Scalar>(
    specs: &[(String, Vec<usize>)],
    params: &[(String, Tensor<T>)],
) -> Result<(), ModelError> {
    if specs.len() != params.len() {
        return Err(ModelError::Config(format!(
            "architecture has {} parameters, got {}",
            specs.len(),
            params.len()
        )));
    }
    for ((name, shape), (got_name, t)) in specs.iter().zip(params) {
        if name != got_name || t.shape() != shape.as_slice() {
            return Err(ModelError::Param {
                name: got_name.clone(),
                detail: format!("expected {name} with shape {shape:?}, got shape {:?}", t.shape()),
            });
        }
    }
    Ok(())
}

/// Per-stage feature maps of the encoder, earliest stage first.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub features: Vec<Var>,
}

/// Stage features plus the full-resolution class logits of one forward pass.
#[derive(Debug, Clone)]
pub struct SegOutput {
    pub features: StageFeatures,
    pub logits: Var,
}

/// Segmentation network: four conv stages and a 1x1 classifier whose logits
/// are bilinearly restored to the input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<T> {
    config: SegNetConfig,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> SegNet<T> {
    pub fn init(config: SegNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config.param_specs(), seed);
        Ok(SegNet { config, params })
    }

    pub fn from_params(
        config: SegNetConfig,
        params: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        check_params(&config.param_specs(), &params)?;
        Ok(SegNet {
            config,
            params: params.into_iter().map(|(_, t)| t).collect(),
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    /// Changes the expected input resolution; weights are size-agnostic.
    pub fn set_input_size(&mut self, height: usize, width: usize) {
        self.config.input_height = height;
        self.config.input_width = width;
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.config
            .param_specs()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.params)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundSegNet<'_, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        BoundSegNet { net: self, vars }
    }

    /// Uses already-recorded parameter leaves, in registry order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundSegNet<'_, T> {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        BoundSegNet { net: self, vars }
    }
}

pub struct BoundSegNet<'a, T> {
    net: &'a SegNet<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> BoundSegNet<'_, T> {
    /// Tape handles of the parameters, in registry order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn check_input(&self, tape: &Tape<T>, image: Var) -> Result<usize, ModelError> {
        let cfg = &self.net.config;
        let shape = tape.value(image).shape();
        match *shape {
            [n, c, h, w]
                if c == cfg.in_channels && h == cfg.input_height && w == cfg.input_width =>
            {
                Ok(n)
            }
            _ => Err(TensorError::shape(
                "segnet",
                format!(
                    "expected [N,{},{},{}], got {shape:?}",
                    cfg.in_channels, cfg.input_height, cfg.input_width
                ),
            )
            .into()),
        }
    }

    pub fn forward_features(
        &self,
        tape: &mut Tape<T>,
        image: Var,
    ) -> Result<StageFeatures, ModelError> {
        self.check_input(tape, image)?;
        let mut x = image;
        let mut features = Vec::with_capacity(4);
        for (s, &stride) in STAGE_STRIDES.iter().enumerate() {
            let p = &self.vars[4 * s..4 * s + 4];
            x = tape.conv2d(x, p[0], p[1], stride, 1)?;
            x = tape.relu(x)?;
            x = tape.conv2d(x, p[2], p[3], 1, 1)?;
            x = tape.relu(x)?;
            features.push(x);
        }
        Ok(StageFeatures { features })
    }

    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<SegOutput, ModelError> {
        let features = self.forward_features(tape, image)?;
        let last = *features.features.last().expect("four stages");
        let coarse = tape.conv2d(last, self.vars[16], self.vars[17], 1, 0)?;
        let cfg = &self.net.config;
        let logits = tape.bilinear_upsample(coarse, cfg.input_height, cfg.input_width)?;
        Ok(SegOutput { features, logits })
    }

    /// Class logits `[N, C, H, W]`; no softmax applied.
    pub fn forward_segment(&self, tape: &mut Tape<T>, image: Var) -> Result<Var, ModelError> {
        Ok(self.forward(tape, image)?.logits)
    }
}

/// Fully convolutional patch classifier on per-pixel class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = init_params(&config.param_specs(), seed);
        Ok(Discriminator { config, params })
    }

    pub fn from_params(
        config: DiscriminatorConfig,
        params: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        check_params(&config.param_specs(), &params)?;
        Ok(Discriminator {
            config,
            params: params.into_iter().map(|(_, t)| t).collect(),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.config
            .param_specs()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.params)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundDiscriminator<'_, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        BoundDiscriminator { net: self, vars }
    }

    /// Uses already-recorded parameter leaves, in registry order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundDiscriminator<'_, T> {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        BoundDiscriminator { net: self, vars }
    }
}

pub struct BoundDiscriminator<'a, T> {
    net: &'a Discriminator<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> BoundDiscriminator<'_, T> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Patch logits `[N, 1, h', w']` for a `[N, C, H, W]` probability map.
    pub fn forward(&self, tape: &mut Tape<T>, probs: Var) -> Result<Var, ModelError> {
        let shape = tape.value(probs).shape();
        let c = self.net.config.num_classes;
        if shape.len() != 4 || shape[1] != c {
            return Err(TensorError::shape(
                "discriminator",
                format!("expected [N,{c},H,W], got {shape:?}"),
            )
            .into());
        }
        let slope = T::from_f64(DiscriminatorConfig::SLOPE);
        let mut x = probs;
        for l in 0..4 {
            x = tape.conv2d(x, self.vars[2 * l], self.vars[2 * l + 1], 2, 1)?;
            if l < 3 {
                x = tape.leaky_relu(x, slope)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3, h, w], |_| rng.random::<f32>())
    }

    #[test]
    fn feature_shapes_follow_stride_schedule() {
        let net = SegNet::<f32>::init(SegNetConfig::default(), 1).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(image(1, 64, 64, 3));
        let feats = bound.forward_features(&mut tape, x).unwrap();
        let shapes: Vec<_> = feats
            .features
            .iter()
            .map(|&v| tape.value(v).shape().to_vec())
            .collect();
        assert_eq!(
            shapes,
            [[1, 16, 32, 32], [1, 32, 16, 16], [1, 64, 16, 16], [1, 64, 16, 16]]
        );
        assert_eq!(
            SegNetConfig::default().stage_shapes(1).map(|s| s.to_vec()).to_vec(),
            shapes
        );
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let net = SegNet::<f32>::init(SegNetConfig::default(), 4).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 3, 64, 64]));
        let feats = bound.forward_features(&mut tape, x).unwrap();
        for v in feats.features {
            assert!(tape.value(v).data().iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn identical_batch_items_give_identical_outputs() {
        let cfg = SegNetConfig {
            input_height: 32,
            input_width: 32,
            ..SegNetConfig::default()
        };
        let net = SegNet::<f32>::init(cfg, 9).unwrap();
        let one = image(1, 32, 32, 5);
        let batch = Tensor::concat(&[&one, &one]).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(batch);
        let out = bound.forward(&mut tape, x).unwrap();
        for v in out.features.features.iter().chain([&out.logits]) {
            let t = tape.value(*v);
            assert_eq!(t.batch_item(0).data(), t.batch_item(1).data());
        }
    }

    #[test]
    fn segment_output_shape_and_range() {
        let net = SegNet::<f32>::init(SegNetConfig::default(), 2).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(image(2, 64, 64, 8));
        let logits = bound.forward_segment(&mut tape, x).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 5, 64, 64]);
        let probs = tape.softmax_channel(logits).unwrap();
        for px in 0..64 * 64 {
            let s: f32 = (0..5).map(|c| tape.value(probs).data()[c * 4096 + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let net = SegNet::<f32>::init(SegNetConfig::default(), 2).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(image(1, 32, 32, 8));
        assert!(bound.forward_segment(&mut tape, x).is_err());
    }

    #[test]
    fn discriminator_patch_grid() {
        assert_eq!(DiscriminatorConfig::output_size(64, 64), Some((4, 4)));
        assert_eq!(DiscriminatorConfig::output_size(32, 32), Some((2, 2)));
        assert_eq!(DiscriminatorConfig::output_size(128, 128), Some((8, 8)));
        assert_eq!(DiscriminatorConfig::output_size(8, 8), None);
        let d = Discriminator::<f32>::init(DiscriminatorConfig::default(), 3).unwrap();
        let mut tape = Tape::new();
        let bound = d.bind(&mut tape, false);
        let x = tape.constant(Tensor::full([2, 5, 64, 64], 0.2));
        let out = bound.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1, 4, 4]);
    }

    #[test]
    fn discriminator_respects_batch_order() {
        let d = Discriminator::<f32>::init(DiscriminatorConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f32>::from_fn([1, 5, 32, 32], |_| rng.random());
        let b = Tensor::<f32>::from_fn([1, 5, 32, 32], |_| rng.random());
        let run = |first: &Tensor<f32>, second: &Tensor<f32>| {
            let mut tape = Tape::new();
            let bound = d.bind(&mut tape, false);
            let x = tape.constant(Tensor::concat(&[first, second]).unwrap());
            let out = bound.forward(&mut tape, x).unwrap();
            tape.value(out).clone()
        };
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        assert_eq!(ab.batch_item(0), ba.batch_item(1));
        assert_eq!(ab.batch_item(1), ba.batch_item(0));
    }

    #[test]
    fn zero_input_is_chance() {
        let d = Discriminator::<f32>::init(DiscriminatorConfig::default(), 3).unwrap();
        // biases start at zero; zero input then yields zero logits
        let mut tape = Tape::new();
        let bound = d.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([1, 5, 64, 64]));
        let out = bound.forward(&mut tape, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = SegNetConfig::default();
        let a = SegNet::<f32>::init(cfg.clone(), 7).unwrap();
        let b = SegNet::<f32>::init(cfg.clone(), 7).unwrap();
        let c = SegNet::<f32>::init(cfg.clone(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named_params() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let fan_in: usize = t.shape()[1..].iter().product();
                let bound = (6.0 / fan_in as f32).sqrt();
                assert!(t.data().iter().all(|&v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn from_params_checks_registry() {
        let net = SegNet::<f32>::init(SegNetConfig::default(), 7).unwrap();
        let mut named: Vec<_> = net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuilt = SegNet::from_params(SegNetConfig::default(), named.clone()).unwrap();
        assert_eq!(rebuilt, net);
        named[3].0 = "bogus".into();
        assert!(SegNet::from_params(SegNetConfig::default(), named).is_err());
    }
}

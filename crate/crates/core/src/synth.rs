//! Procedural source/target segmentation scenes.
//!
//! A scene is a stack of flat shapes drawn back to front over a background.
//! The content seed alone fixes geometry, z-order and therefore the label
//! map. A [`DomainStyle`] then renders the image: palette, sinusoidal
//! texture, gamma, channel mixing and additive noise, in that order. Styles
//! never touch labels, so two domains rendered from the same content seed
//! share their label map exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("invalid domain style: {0}")]
    Style(String),
}

/// Geometric primitive associated with a foreground class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Stripe,
    Cross,
    Ring,
    Triangle,
}

impl ShapeKind {
    const ALL: [ShapeKind; 6] = [
        ShapeKind::Rectangle,
        ShapeKind::Disk,
        ShapeKind::Stripe,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Triangle,
    ];

    /// Shape drawn for foreground class `class` (>= 1).
    pub fn for_class(class: usize) -> ShapeKind {
        Self::ALL[(class - 1) % Self::ALL.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    /// Height and width of the square image.
    pub image_size: usize,
    /// Class 0 is background.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_classes: 5,
            min_shapes: 2,
            max_shapes: 6,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(8..=256).contains(&self.image_size) {
            return Err(SynthError::Spec(format!(
                "image size {} outside 8..=256",
                self.image_size
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(SynthError::Spec(format!(
                "class count {} outside 2..=255",
                self.num_classes
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(SynthError::Spec("min_shapes exceeds max_shapes".into()));
        }
        Ok(())
    }
}

/// Appearance of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    /// Base RGB per class, index 0 is the background.
    pub palette: Vec<[f32; 3]>,
    /// Per-shape uniform jitter added to the palette colour.
    pub color_jitter: f32,
    pub noise_sigma: f32,
    pub gamma: f32,
    pub texture_amp: f32,
    /// Spatial frequency of the texture, radians per pixel.
    pub texture_freq: f32,
    /// Row-stochastic 3x3 matrix: `out[r] = sum_c mix[r][c] * in[c]`.
    pub channel_mix: [[f32; 3]; 3],
    /// Salt mixed into the content seed for jitter and noise draws.
    pub seed_salt: u64,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h - libm::floorf(h)) * 6.0;
    let i = libm::floorf(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl DomainStyle {
    /// Clean, saturated rendering standing in for the labelled synthetic
    /// source domain.
    pub fn source_default(num_classes: usize) -> Self {
        let mut palette = vec![[0.30, 0.30, 0.32]];
        for c in 1..num_classes {
            palette.push(hsv((c - 1) as f32 / (num_classes - 1) as f32, 0.65, 0.85));
        }
        DomainStyle {
            palette,
            color_jitter: 0.08,
            noise_sigma: 0.02,
            gamma: 1.0,
            texture_amp: 0.0,
            texture_freq: 0.0,
            channel_mix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            seed_salt: 0x5eed_0001,
        }
    }

    /// Darker, textured, colour-shifted and noisier rendering standing in for
    /// the unlabelled real target domain.
    pub fn target_default(num_classes: usize) -> Self {
        let mut palette = vec![[0.40, 0.37, 0.32]];
        for c in 1..num_classes {
            palette.push(hsv(
                (c - 1) as f32 / (num_classes - 1) as f32 + 0.08,
                0.45,
                0.75,
            ));
        }
        DomainStyle {
            palette,
            color_jitter: 0.12,
            noise_sigma: 0.08,
            gamma: 1.6,
            texture_amp: 0.3,
            texture_freq: 0.7,
            channel_mix: [[0.70, 0.20, 0.10], [0.15, 0.70, 0.15], [0.10, 0.25, 0.65]],
            seed_salt: 0x5eed_0002,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), SynthError> {
        if self.palette.len() < num_classes {
            return Err(SynthError::Style(format!(
                "palette has {} colours for {num_classes} classes",
                self.palette.len()
            )));
        }
        if !(0.0..=0.2).contains(&self.noise_sigma) {
            return Err(SynthError::Style("noise_sigma outside [0, 0.2]".into()));
        }
        if !(0.5..=2.0).contains(&self.gamma) {
            return Err(SynthError::Style("gamma outside [0.5, 2]".into()));
        }
        if !(0.0..=0.3).contains(&self.texture_amp) {
            return Err(SynthError::Style("texture_amp outside [0, 0.3]".into()));
        }
        for row in &self.channel_mix {
            let sum: f32 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(SynthError::Style(format!(
                    "channel_mix row {row:?} is not stochastic"
                )));
            }
        }
        Ok(())
    }
}

/// Image `[3, H, W]` in `[0, 1]` with its per-pixel class map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor<f32>,
    pub label: Vec<u8>,
    pub content_seed: u64,
}

impl LabeledSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, Copy)]
enum Geometry {
    Rect { cx: f32, cy: f32, hw: f32, hh: f32 },
    Disk { cx: f32, cy: f32, r: f32 },
    Stripe { cx: f32, cy: f32, ux: f32, uy: f32, half_len: f32, half_thick: f32 },
    Cross { cx: f32, cy: f32, arm: f32, half_thick: f32 },
    Ring { cx: f32, cy: f32, r_in: f32, r_out: f32 },
    Triangle { pts: [(f32, f32); 3] },
}

impl Geometry {
    fn sample(kind: ShapeKind, size: f32, rng: &mut ChaCha8Rng) -> Geometry {
        let cx = rng.random_range(0.1 * size..0.9 * size);
        let cy = rng.random_range(0.1 * size..0.9 * size);
        match kind {
            ShapeKind::Rectangle => Geometry::Rect {
                cx,
                cy,
                hw: rng.random_range(size / 10.0..size / 4.0),
                hh: rng.random_range(size / 10.0..size / 4.0),
            },
            ShapeKind::Disk => Geometry::Disk {
                cx,
                cy,
                r: rng.random_range(size / 10.0..size / 5.0),
            },
            ShapeKind::Stripe => {
                let angle = rng.random_range(0.0..core::f32::consts::PI);
                Geometry::Stripe {
                    cx,
                    cy,
                    ux: libm::cosf(angle),
                    uy: libm::sinf(angle),
                    half_len: rng.random_range(size / 4.0..size / 2.0),
                    half_thick: rng.random_range(size / 40.0..size / 20.0).max(1.0),
                }
            }
            ShapeKind::Cross => Geometry::Cross {
                cx,
                cy,
                arm: rng.random_range(size / 8.0..size / 4.0),
                half_thick: rng.random_range(size / 32.0..size / 16.0).max(1.0),
            },
            ShapeKind::Ring => {
                let r_out = rng.random_range(size / 8.0..size / 4.0);
                Geometry::Ring {
                    cx,
                    cy,
                    r_out,
                    r_in: r_out * rng.random_range(0.45..0.7),
                }
            }
            ShapeKind::Triangle => {
                let r = rng.random_range(size / 8.0..size / 4.0);
                let rot = rng.random_range(0.0..core::f32::consts::TAU);
                let pts = core::array::from_fn(|k| {
                    let a = rot + k as f32 * core::f32::consts::TAU / 3.0;
                    (cx + r * libm::cosf(a), cy + r * libm::sinf(a))
                });
                Geometry::Triangle { pts }
            }
        }
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Geometry::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Geometry::Disk { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
            Geometry::Stripe {
                cx,
                cy,
                ux,
                uy,
                half_len,
                half_thick,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let along = dx * ux + dy * uy;
                let across = -dx * uy + dy * ux;
                along.abs() <= half_len && across.abs() <= half_thick
            }
            Geometry::Cross {
                cx,
                cy,
                arm,
                half_thick,
            } => {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx <= arm && dy <= half_thick) || (dy <= arm && dx <= half_thick)
            }
            Geometry::Ring { cx, cy, r_in, r_out } => {
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            Geometry::Triangle { pts } => {
                let edge = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                let d = [
                    edge(pts[0], pts[1]),
                    edge(pts[1], pts[2]),
                    edge(pts[2], pts[0]),
                ];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// Label map and per-pixel shape index (`usize::MAX` for background).
fn layout(spec: &SceneSpec, content_seed: u64) -> (Vec<u8>, Vec<usize>) {
    let n = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut label = vec![0u8; n * n];
    let mut owner = vec![usize::MAX; n * n];
    for shape in 0..count {
        let class = rng.random_range(1..spec.num_classes);
        let geom = Geometry::sample(ShapeKind::for_class(class), n as f32, &mut rng);
        for y in 0..n {
            for x in 0..n {
                if geom.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    label[y * n + x] = class as u8;
                    owner[y * n + x] = shape;
                }
            }
        }
    }
    (label, owner)
}

/// Renders one scene. Deterministic in `(spec, style, content_seed)`.
pub fn generate_scene(
    spec: &SceneSpec,
    style: &DomainStyle,
    content_seed: u64,
) -> Result<LabeledSample, SynthError> {
    spec.validate()?;
    style.validate(spec.num_classes)?;
    let n = spec.image_size;
    let (label, owner) = layout(spec, content_seed);

    let mut rng = ChaCha8Rng::seed_from_u64(content_seed ^ style.seed_salt.rotate_left(17));
    let shapes = spec.max_shapes + 1;
    let jitter: Vec<[f32; 3]> = (0..shapes)
        .map(|_| {
            core::array::from_fn(|_| {
                if style.color_jitter > 0.0 {
                    rng.random_range(-style.color_jitter..=style.color_jitter)
                } else {
                    0.0
                }
            })
        })
        .collect();
    let phase = rng.random_range(0.0..core::f32::consts::TAU);
    let noise = Normal::new(0.0f32, style.noise_sigma.max(f32::MIN_POSITIVE))
        .expect("validated sigma");

    let mut image = vec![0.0f32; 3 * n * n];
    for p in 0..n * n {
        let (x, y) = ((p % n) as f32, (p / n) as f32);
        let base = style.palette[label[p] as usize];
        let j = if owner[p] == usize::MAX {
            [0.0; 3]
        } else {
            jitter[owner[p] % shapes]
        };
        let tex = style.texture_amp
            * libm::sinf(style.texture_freq * (0.8 * x + 0.6 * y) + phase);
        let mut rgb = [0.0f32; 3];
        for c in 0..3 {
            let v = (base[c] + j[c] + tex).clamp(0.0, 1.0);
            rgb[c] = libm::powf(v, style.gamma);
        }
        for (r, row) in style.channel_mix.iter().enumerate() {
            let mixed: f32 = row.iter().zip(&rgb).map(|(m, v)| m * v).sum();
            let v = if style.noise_sigma > 0.0 {
                mixed + noise.sample(&mut rng)
            } else {
                mixed
            };
            image[r * n * n + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(LabeledSample {
        image: Tensor::new([3, n, n], image).expect("sized above"),
        label,
        content_seed,
    })
}

/// Content seeds for `count` scenes per domain. Unpaired source and target
/// seeds never collide (they differ in parity); paired mode reuses the
/// source seeds for the target.
pub fn content_seeds(seed: u64, count: usize, paired: bool) -> (Vec<u64>, Vec<u64>) {
    let mut mix = ChaCha8Rng::seed_from_u64(seed);
    let base: u64 = mix.random::<u64>() & !1;
    let src: Vec<u64> = (0..count as u64)
        .map(|k| base.wrapping_add(2 * k))
        .collect();
    let tgt = if paired {
        src.clone()
    } else {
        src.iter().map(|s| s.wrapping_add(1)).collect()
    };
    (src, tgt)
}

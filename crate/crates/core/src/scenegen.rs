//! Synthetic waste bins.
//!
//! Each simulated bin receives a sequence of deposits. A deposit re-renders
//! the bin with every earlier item slightly disturbed and the new item placed
//! on top, and yields the before/after image pair, the class of the new item
//! and the mask of all food deposited so far. All randomness of an event is
//! drawn from a seed derived from `(master_seed, bin_id, seq)`.

use std::f32::consts::PI;

use foodwaste_tensor::params::{derive_seed, seeded_rng};
use foodwaste_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_CLASSES: usize = 20;

const BIN_TAG: u64 = 0xB1B1_0000;
const MIN_CHANGED_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Texture {
    Speckle { density: f32, amplitude: f32 },
    Stripe { period: f32, angle: f32, amplitude: f32 },
    BlobCluster { count: u32, radius: f32, amplitude: f32 },
    Gradient { angle: f32, amplitude: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    Polygon,
    Scatter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub class_id: usize,
    pub name: String,
    pub base_color: [f32; 3],
    pub texture: Texture,
    pub shape: ShapeFamily,
}

/// The visual vocabulary of the generator. The first five classes are the
/// most distinct and form the toy problem.
pub fn class_styles() -> Vec<ClassStyle> {
    use ShapeFamily::*;
    use Texture::*;
    let table: [(&str, [f32; 3], Texture, ShapeFamily); MAX_CLASSES] = [
        ("apple", [0.80, 0.12, 0.10], Gradient { angle: 0.6, amplitude: 0.35 }, Ellipse),
        ("cheese", [0.96, 0.82, 0.22], Speckle { density: 0.12, amplitude: 0.35 }, Polygon),
        ("rice", [0.94, 0.93, 0.86], Speckle { density: 0.30, amplitude: 0.12 }, Scatter),
        ("beef", [0.46, 0.18, 0.12], Stripe { period: 3.0, angle: 0.4, amplitude: 0.30 }, Polygon),
        ("salad", [0.30, 0.66, 0.16], BlobCluster { count: 5, radius: 0.28, amplitude: 0.35 }, Scatter),
        ("bread", [0.79, 0.58, 0.30], Speckle { density: 0.08, amplitude: 0.25 }, Ellipse),
        ("banana", [0.92, 0.78, 0.12], Stripe { period: 6.0, angle: 0.0, amplitude: 0.20 }, Ellipse),
        ("carrot", [0.96, 0.48, 0.08], Stripe { period: 2.5, angle: 1.5, amplitude: 0.15 }, Polygon),
        ("pasta", [0.95, 0.87, 0.55], Stripe { period: 2.0, angle: 0.8, amplitude: 0.25 }, Scatter),
        ("potato", [0.72, 0.60, 0.38], BlobCluster { count: 4, radius: 0.20, amplitude: -0.25 }, Ellipse),
        ("eggshell", [0.97, 0.95, 0.88], Gradient { angle: 2.0, amplitude: 0.15 }, Polygon),
        ("tomato", [0.86, 0.22, 0.16], BlobCluster { count: 6, radius: 0.15, amplitude: 0.30 }, Ellipse),
        ("orange", [0.98, 0.60, 0.10], Speckle { density: 0.25, amplitude: 0.15 }, Polygon),
        ("fish", [0.78, 0.78, 0.74], Stripe { period: 4.0, angle: 1.1, amplitude: 0.18 }, Ellipse),
        ("chicken", [0.86, 0.69, 0.50], Gradient { angle: 1.2, amplitude: 0.25 }, Polygon),
        ("soup", [0.70, 0.44, 0.18], Gradient { angle: 0.3, amplitude: 0.10 }, Scatter),
        ("beans", [0.42, 0.26, 0.20], BlobCluster { count: 8, radius: 0.12, amplitude: 0.30 }, Scatter),
        ("coffee", [0.22, 0.14, 0.10], Speckle { density: 0.40, amplitude: 0.45 }, Scatter),
        ("broccoli", [0.14, 0.44, 0.16], BlobCluster { count: 7, radius: 0.18, amplitude: 0.40 }, Polygon),
        ("cake", [0.56, 0.30, 0.22], Stripe { period: 5.0, angle: 0.0, amplitude: 0.35 }, Ellipse),
    ];
    table
        .into_iter()
        .enumerate()
        .map(|(class_id, (name, base_color, texture, shape))| ClassStyle {
            class_id,
            name: name.to_string(),
            base_color,
            texture,
            shape,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinShape {
    Round,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagTexture {
    pub color: [f32; 3],
    pub fold_period: f32,
    pub fold_angle: f32,
}

/// Geometry and colours of one bin and its surroundings, in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinAppearance {
    pub shape: BinShape,
    pub center: [f32; 2],
    pub half_size: f32,
    pub corner_radius: f32,
    pub rim_width: f32,
    /// Width of the wall strip between the rim and the region food can reach.
    pub wall_band: f32,
    pub rim_color: [f32; 3],
    pub interior_color: [f32; 3],
    pub floor_color: [f32; 3],
    pub reflection: bool,
    pub bag: Option<BagTexture>,
    pub noise_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Floor,
    Rim,
    Wall,
    Food,
}

impl BinAppearance {
    /// Signed distance to the inner rim edge; negative inside the bin.
    pub fn sdf(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        match self.shape {
            BinShape::Round => (dx * dx + dy * dy).sqrt() - self.half_size,
            BinShape::Square => {
                let inner = self.half_size - self.corner_radius;
                let qx = dx.abs() - inner;
                let qy = dy.abs() - inner;
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0) - self.corner_radius
            }
        }
    }

    pub fn region(&self, x: f32, y: f32) -> Region {
        let d = self.sdf(x, y);
        if d >= self.rim_width {
            Region::Floor
        } else if d >= 0.0 {
            Region::Rim
        } else if d >= -self.wall_band {
            Region::Wall
        } else {
            Region::Food
        }
    }

    /// Region of the pixel `(row, col)`, sampled at its centre.
    pub fn pixel_region(&self, row: usize, col: usize) -> Region {
        self.region(col as f32 + 0.5, row as f32 + 0.5)
    }

    fn sdf_normal(&self, x: f32, y: f32) -> (f32, f32) {
        let h = 0.25;
        let gx = self.sdf(x + h, y) - self.sdf(x - h, y);
        let gy = self.sdf(x, y + h) - self.sdf(x, y - h);
        let len = (gx * gx + gy * gy).sqrt().max(1e-6);
        (gx / len, gy / len)
    }

    fn background(&self, x: f32, y: f32) -> [f32; 3] {
        let d = self.sdf(x, y);
        let grain = hash_unit(self.noise_seed, x as i64, y as i64) - 0.5;
        match self.region(x, y) {
            Region::Floor => {
                let tile = if ((x / 8.0).floor() as i64 + (y / 8.0).floor() as i64) % 2 == 0 { 1.04 } else { 0.96 };
                scale(self.floor_color, tile + 0.06 * grain)
            }
            Region::Rim => {
                let highlight = 1.0 + 0.18 * (1.0 - (2.0 * d / self.rim_width - 1.0).abs());
                scale(self.rim_color, highlight)
            }
            Region::Wall | Region::Food => {
                if let Some(bag) = &self.bag {
                    let (s, c) = bag.fold_angle.sin_cos();
                    let t = 2.0 * PI * (x * c + y * s) / bag.fold_period + 0.8 * (y / 5.0).sin();
                    scale(bag.color, 1.0 + 0.16 * t.sin() + 0.04 * grain)
                } else {
                    let depth = ((-d) / self.half_size).clamp(0.0, 1.0);
                    scale(self.interior_color, 1.0 - 0.25 * depth + 0.03 * grain)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepositEvent {
    pub bin_id: u64,
    pub seq: usize,
    pub class_id: usize,
    pub before: Tensor<f32>,
    pub after: Tensor<f32>,
    pub cumulative_mask: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub bin_id: u64,
    pub appearance: BinAppearance,
    pub events: Vec<DepositEvent>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub class_count: usize,
    pub image_size: usize,
    /// Probability that an episode's bin shows wall reflections.
    pub reflection_prob: f64,
    /// Probability that an episode's bin is lined with a plastic bag.
    pub bag_prob: f64,
}

impl SceneConfig {
    pub fn new(class_count: usize, image_size: usize) -> Self {
        Self {
            class_count,
            image_size,
            reflection_prob: 0.3,
            bag_prob: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count > MAX_CLASSES {
            return Err(Error::Config(format!(
                "class_count must be in 2..={MAX_CLASSES}, got {}",
                self.class_count
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be >= 16, got {}", self.image_size)));
        }
        Ok(())
    }
}

pub fn event_seed(master_seed: u64, bin_id: u64, seq: usize) -> u64 {
    derive_seed(&[master_seed, bin_id, seq as u64])
}

#[derive(Clone, Debug)]
struct Item {
    class_id: usize,
    cx: f32,
    cy: f32,
    radius: f32,
    aspect: f32,
    angle: f32,
    brightness: f32,
    polygon: Vec<f32>,
    blobs: Vec<(f32, f32, f32)>,
    spots: Vec<(f32, f32)>,
    phase: f32,
    noise_seed: u64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Disturbance {
    dx: f32,
    dy: f32,
    brightness: f32,
}

impl Item {
    fn random(rng: &mut ChaCha8Rng, style: &ClassStyle, bin: &BinAppearance, size: f32) -> Self {
        let scatter = style.shape == ShapeFamily::Scatter;
        let mut radius = size * rng.gen_range(0.10..0.16);
        if scatter {
            radius *= 1.25;
        }
        let reach = bin.half_size;
        let (cx, cy) = loop {
            let x = bin.center[0] + rng.gen_range(-reach..reach);
            let y = bin.center[1] + rng.gen_range(-reach..reach);
            if bin.sdf(x, y) < -bin.wall_band - 0.35 * radius {
                break (x, y);
            }
        };
        let polygon = (0..7).map(|_| rng.gen_range(0.65..1.0)).collect();
        let blobs = if scatter {
            (0..rng.gen_range(7..12))
                .map(|_| {
                    let r = 0.75 * rng.gen::<f32>().sqrt();
                    let t = rng.gen_range(0.0..2.0 * PI);
                    (r * t.cos(), r * t.sin(), rng.gen_range(0.18..0.32))
                })
                .collect()
        } else {
            Vec::new()
        };
        let spot_count = match style.texture {
            Texture::BlobCluster { count, .. } => count as usize,
            _ => 0,
        };
        let spots = (0..spot_count)
            .map(|_| {
                let r = 0.8 * rng.gen::<f32>().sqrt();
                let t = rng.gen_range(0.0..2.0 * PI);
                (r * t.cos(), r * t.sin())
            })
            .collect();
        Self {
            class_id: style.class_id,
            cx,
            cy,
            radius,
            aspect: rng.gen_range(0.65..1.0),
            angle: rng.gen_range(0.0..2.0 * PI),
            brightness: rng.gen_range(0.92..1.08),
            polygon,
            blobs,
            spots,
            phase: rng.gen_range(0.0..2.0 * PI),
            noise_seed: rng.gen(),
        }
    }

    /// Local coordinates of a point, in units of the item radius.
    fn local(&self, x: f32, y: f32, d: &Disturbance) -> (f32, f32) {
        let (dx, dy) = (x - self.cx - d.dx, y - self.cy - d.dy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.radius;
        let v = (-dx * s + dy * c) / (self.radius * self.aspect);
        (u, v)
    }

    fn contains(&self, shape: ShapeFamily, u: f32, v: f32) -> bool {
        match shape {
            ShapeFamily::Ellipse => u * u + v * v <= 1.0,
            ShapeFamily::Polygon => {
                let r = (u * u + v * v).sqrt();
                if r > 1.0 {
                    return false;
                }
                let n = self.polygon.len();
                let a = v.atan2(u).rem_euclid(2.0 * PI) / (2.0 * PI) * n as f32;
                let i = (a.floor() as usize) % n;
                let f = a - a.floor();
                r <= self.polygon[i] * (1.0 - f) + self.polygon[(i + 1) % n] * f
            }
            ShapeFamily::Scatter => self
                .blobs
                .iter()
                .any(|&(bx, by, br)| (u - bx).powi(2) + (v - by).powi(2) <= br * br),
        }
    }

    fn texture(&self, texture: Texture, u: f32, v: f32) -> f32 {
        match texture {
            Texture::Speckle { density, amplitude } => {
                let cell_u = (u * self.radius).floor() as i64;
                let cell_v = (v * self.radius).floor() as i64;
                let h = hash_unit(self.noise_seed, cell_u, cell_v);
                if h < density {
                    -amplitude
                } else {
                    0.08 * (h - 0.5)
                }
            }
            Texture::Stripe { period, angle, amplitude } => {
                let (s, c) = angle.sin_cos();
                amplitude * (2.0 * PI * (u * c + v * s) * self.radius / period + self.phase).sin()
            }
            Texture::BlobCluster { radius, amplitude, .. } => {
                if self.spots.iter().any(|&(sx, sy)| (u - sx).powi(2) + (v - sy).powi(2) <= radius * radius) {
                    amplitude
                } else {
                    0.0
                }
            }
            Texture::Gradient { angle, amplitude } => {
                let (s, c) = angle.sin_cos();
                amplitude * (u * c + v * s)
            }
        }
    }

    fn extent(&self) -> f32 {
        self.radius + 1.5
    }
}

fn scale(c: [f32; 3], f: f32) -> [f32; 3] {
    [c[0] * f, c[1] * f, c[2] * f]
}

fn hash_unit(seed: u64, a: i64, b: i64) -> f32 {
    (derive_seed(&[seed, a as u64, b as u64]) >> 40) as f32 / (1u64 << 24) as f32
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

const RIM_PALETTE: [[f32; 3]; 7] = [
    [0.12, 0.12, 0.13],
    [0.55, 0.56, 0.58],
    [0.20, 0.45, 0.25],
    [0.20, 0.30, 0.60],
    [0.90, 0.90, 0.88],
    [0.45, 0.33, 0.22],
    [0.70, 0.72, 0.75],
];

const BAG_PALETTE: [[f32; 3]; 4] = [
    [0.08, 0.08, 0.09],
    [0.85, 0.86, 0.88],
    [0.25, 0.50, 0.30],
    [0.30, 0.45, 0.75],
];

fn random_appearance(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> BinAppearance {
    let s = cfg.image_size as f32;
    let shape = if rng.gen_bool(0.5) { BinShape::Round } else { BinShape::Square };
    let half_size = s * rng.gen_range(0.40..0.46);
    let rim = RIM_PALETTE[rng.gen_range(0..RIM_PALETTE.len())];
    let depth = rng.gen_range(0.6..0.85);
    let floor_base = rng.gen_range(0.45..0.75);
    let floor_color = [
        floor_base * rng.gen_range(0.95..1.08),
        floor_base * rng.gen_range(0.95..1.02),
        floor_base * rng.gen_range(0.85..1.0),
    ];
    let reflection = rng.gen_bool(cfg.reflection_prob);
    let bag = rng.gen_bool(cfg.bag_prob).then(|| BagTexture {
        color: BAG_PALETTE[rng.gen_range(0..BAG_PALETTE.len())],
        fold_period: s * rng.gen_range(0.12..0.25),
        fold_angle: rng.gen_range(0.0..PI),
    });
    BinAppearance {
        shape,
        center: [
            s / 2.0 + rng.gen_range(-0.03..0.03) * s,
            s / 2.0 + rng.gen_range(-0.03..0.03) * s,
        ],
        half_size,
        corner_radius: half_size * rng.gen_range(0.2..0.5),
        rim_width: (0.045 * s).max(1.5),
        wall_band: (0.045 * s).max(1.5),
        rim_color: rim,
        interior_color: scale(rim, depth),
        floor_color,
        reflection,
        bag,
        noise_seed: rng.gen(),
    }
}

struct Scene<'a> {
    size: usize,
    bin: &'a BinAppearance,
    styles: &'a [ClassStyle],
}

impl Scene<'_> {
    fn render(&self, items: &[(Item, Disturbance)]) -> (Tensor<f32>, Tensor<f32>) {
        let s = self.size;
        let plane = s * s;
        let mut img = vec![0f32; 3 * plane];
        let mut mask = vec![0f32; plane];
        for row in 0..s {
            for col in 0..s {
                let c = self.bin.background(col as f32 + 0.5, row as f32 + 0.5);
                for ch in 0..3 {
                    img[ch * plane + row * s + col] = c[ch];
                }
            }
        }
        for (item, dist) in items {
            let style = &self.styles[item.class_id];
            let (cx, cy) = (item.cx + dist.dx, item.cy + dist.dy);
            let e = item.extent();
            let r0 = ((cy - e).floor().max(0.0)) as usize;
            let r1 = ((cy + e).ceil().min(s as f32)) as usize;
            let c0 = ((cx - e).floor().max(0.0)) as usize;
            let c1 = ((cx + e).ceil().min(s as f32)) as usize;
            let gain = item.brightness * dist.brightness;
            for row in r0..r1 {
                for col in c0..c1 {
                    let (x, y) = (col as f32 + 0.5, row as f32 + 0.5);
                    if self.bin.region(x, y) != Region::Food {
                        continue;
                    }
                    let (u, v) = item.local(x, y, dist);
                    if !item.contains(style.shape, u, v) {
                        continue;
                    }
                    let t = item.texture(style.texture, u, v);
                    for ch in 0..3 {
                        img[ch * plane + row * s + col] = style.base_color[ch] * gain * (1.0 + t);
                    }
                    mask[row * s + col] = 1.0;
                }
            }
        }
        if self.bin.reflection {
            let source = img.clone();
            for row in 0..s {
                for col in 0..s {
                    let (x, y) = (col as f32 + 0.5, row as f32 + 0.5);
                    if self.bin.region(x, y) != Region::Wall {
                        continue;
                    }
                    let d = self.bin.sdf(x, y);
                    let (nx, ny) = self.bin.sdf_normal(x, y);
                    let depth = 2.0 * (d + self.bin.wall_band) + 0.5;
                    let mx = (x - depth * nx).floor().clamp(0.0, s as f32 - 1.0) as usize;
                    let my = (y - depth * ny).floor().clamp(0.0, s as f32 - 1.0) as usize;
                    for ch in 0..3 {
                        let i = ch * plane + row * s + col;
                        img[i] = 0.45 * source[i] + 0.45 * source[ch * plane + my * s + mx];
                    }
                }
            }
        }
        for v in &mut img {
            *v = quantize(*v);
        }
        (
            Tensor::new(&[3, s, s], img).expect("image shape"),
            Tensor::new(&[1, s, s], mask).expect("mask shape"),
        )
    }
}

fn changed_fraction(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (_, h, w) = a.dims3().expect("image");
    let plane = h * w;
    let changed = (0..plane)
        .filter(|&p| (0..3).any(|c| a.data()[c * plane + p] != b.data()[c * plane + p]))
        .count();
    changed as f64 / plane as f64
}

pub fn bin_appearance(master_seed: u64, bin_id: u64, cfg: &SceneConfig) -> BinAppearance {
    let mut rng = seeded_rng(derive_seed(&[master_seed, bin_id, BIN_TAG]));
    random_appearance(&mut rng, cfg)
}

/// Simulates `num_deposits` deposits into bin `bin_id`.
pub fn gen_episode(master_seed: u64, bin_id: u64, num_deposits: usize, cfg: &SceneConfig) -> Result<Episode> {
    cfg.validate()?;
    if num_deposits == 0 {
        return Err(Error::Config("num_deposits must be >= 1".into()));
    }
    let styles = class_styles();
    let appearance = bin_appearance(master_seed, bin_id, cfg);
    let scene = Scene {
        size: cfg.image_size,
        bin: &appearance,
        styles: &styles,
    };
    let mut items: Vec<Item> = Vec::new();
    let (mut current, _) = scene.render(&[]);
    let mut events = Vec::with_capacity(num_deposits);
    for seq in 0..num_deposits {
        let mut rng = seeded_rng(event_seed(master_seed, bin_id, seq));
        let class_id = rng.gen_range(0..cfg.class_count);
        let disturbed: Vec<(Item, Disturbance)> = items
            .iter()
            .map(|it| {
                let d = Disturbance {
                    dx: rng.gen_range(-0.2..0.2),
                    dy: rng.gen_range(-0.2..0.2),
                    brightness: rng.gen_range(0.97..1.03),
                };
                (it.clone(), d)
            })
            .collect();
        let mut best: Option<(f64, Item, Tensor<f32>, Tensor<f32>)> = None;
        for _ in 0..32 {
            let item = Item::random(&mut rng, &styles[class_id], &appearance, cfg.image_size as f32);
            let mut layers = disturbed.clone();
            layers.push((
                item.clone(),
                Disturbance {
                    brightness: 1.0,
                    ..Default::default()
                },
            ));
            let (after, mask) = scene.render(&layers);
            let frac = changed_fraction(&current, &after);
            let better = best.as_ref().is_none_or(|b| frac > b.0);
            if better {
                best = Some((frac, item, after, mask));
            }
            if frac >= MIN_CHANGED_FRACTION {
                break;
            }
        }
        let (_, item, after, mask) = best.expect("at least one placement");
        items.push(item);
        events.push(DepositEvent {
            bin_id,
            seq,
            class_id,
            before: current,
            after: after.clone(),
            cumulative_mask: mask,
        });
        current = after;
    }
    Ok(Episode {
        bin_id,
        appearance,
        events,
    })
}

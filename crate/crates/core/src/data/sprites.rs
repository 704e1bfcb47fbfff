//! Procedural sprites: a shape per class, two identity colors, a texture,
//! on a solid background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Triangle,
    WideRect,
    Diamond,
    Square,
    Plus,
    Ring,
    House,
}

/// `(class word, shape)` for every shipped class.
pub const CLASSES: [(&str, Shape); 8] = [
    ("dog", Shape::Circle),
    ("cat", Shape::Triangle),
    ("car", Shape::WideRect),
    ("bird", Shape::Diamond),
    ("cup", Shape::Square),
    ("chair", Shape::Plus),
    ("flower", Shape::Ring),
    ("house", Shape::House),
];

/// `(name, caption phrase, color)`.
pub const BACKGROUNDS: [(&str, &str, Rgb); 6] = [
    ("beach", "on the beach", [230, 210, 160]),
    ("snow", "in the snow", [236, 240, 250]),
    ("grass", "on the grass", [80, 150, 70]),
    ("night", "at night", [20, 24, 60]),
    ("sky", "in the sky", [140, 190, 240]),
    ("desert", "in the desert", [210, 150, 80]),
];

pub const PALETTE: [(&str, Rgb); 12] = [
    ("red", [220, 40, 40]),
    ("orange", [240, 140, 20]),
    ("yellow", [240, 220, 40]),
    ("green", [30, 190, 60]),
    ("teal", [20, 160, 160]),
    ("blue", [40, 80, 220]),
    ("purple", [140, 50, 190]),
    ("pink", [250, 120, 190]),
    ("brown", [120, 70, 30]),
    ("white", [250, 250, 250]),
    ("black", [10, 10, 10]),
    ("gray", [128, 128, 128]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Split,
    HStripes,
    VStripes,
    Checker,
}

pub const TEXTURES: [Texture; 4] = [Texture::Split, Texture::HStripes, Texture::VStripes, Texture::Checker];

pub fn shape_of(class: &str) -> Result<Shape> {
    CLASSES
        .iter()
        .find(|(c, _)| *c == class)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::Vocabulary(format!("unknown macro class {class:?}")))
}

pub fn background(name: &str) -> Result<(&'static str, Rgb)> {
    BACKGROUNDS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, p, c)| (*p, *c))
        .ok_or_else(|| Error::Input(format!("unknown background {name:?}")))
}

pub fn color_distance(a: Rgb, b: Rgb) -> u32 {
    a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y) as u32).sum()
}

impl Shape {
    /// Whether integer offset `(dx, dy)` from the center lies inside a
    /// sprite of radius `s`.
    pub fn contains(self, dx: i32, dy: i32, s: i32) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Triangle => dy >= -s && dy <= s && 2 * ax <= dy + s,
            Shape::WideRect => ax <= s && 2 * ay <= s,
            Shape::Diamond => ax + ay <= s,
            Shape::Square => 4 * ax <= 3 * s && 4 * ay <= 3 * s,
            Shape::Plus => (3 * ax <= s && ay <= s) || (3 * ay <= s && ax <= s),
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                4 * r2 >= s * s && r2 <= s * s
            }
            Shape::House => {
                let half = (4 * s) / 5;
                if dy >= 0 {
                    ax <= half && dy <= half
                } else {
                    dy >= -s && ax * s <= half * (dy + s)
                }
            }
        }
    }
}

impl Texture {
    /// True where the first identity color is used, anchored at the center.
    pub fn first_color(self, dx: i32, dy: i32) -> bool {
        match self {
            Texture::Split => dx < 0,
            Texture::HStripes => dy.div_euclid(2) % 2 == 0,
            Texture::VStripes => dx.div_euclid(2) % 2 == 0,
            Texture::Checker => (dx.div_euclid(3) + dy.div_euclid(3)) % 2 == 0,
        }
    }
}

/// Everything needed to draw one sprite image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpriteParams {
    pub shape: Shape,
    pub colors: [Rgb; 2],
    pub texture: Texture,
    pub radius: i32,
    pub center: (i32, i32),
    pub background: Rgb,
}

/// Renders `[3×32×32]` in `[-1, 1]`; every value is on the 8-bit grid.
pub fn render(p: &SpriteParams) -> Tensor {
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0; 3 * n];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (dx, dy) = (x as i32 - p.center.0, y as i32 - p.center.1);
            let rgb = if p.shape.contains(dx, dy, p.radius) {
                p.colors[usize::from(!p.texture.first_color(dx, dy))]
            } else {
                p.background
            };
            for c in 0..3 {
                data[c * n + y * IMAGE_SIZE + x] = super::image::from_u8(rgb[c]);
            }
        }
    }
    Tensor::new(data, &[3, IMAGE_SIZE, IMAGE_SIZE]).expect("fixed shape")
}

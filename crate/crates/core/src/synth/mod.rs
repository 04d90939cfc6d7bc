//! Deterministic colored-shape images with templated captions and boxes.
//!
//! Rendering is integer-only: every pixel is either background (black) or
//! belongs to exactly one shape, so box and patch overlap are exact.

mod shard;
mod vocab;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::objectives::{class_label_to_text, BoundingBox};
use patchsum_tensor::Tensor;

pub use shard::{decode_shard, encode_shard, read_shard, write_shard, SHARD_MAGIC, SHARD_VERSION};
pub use vocab::{Vocab, CLS, MASK, NUM_SPECIAL, PAD, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Cyan, Color::Magenta];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }

    /// Which of R, G, B are lit.
    pub fn channels(self) -> [bool; 3] {
        match self {
            Color::Red => [true, false, false],
            Color::Green => [false, true, false],
            Color::Blue => [false, false, true],
            Color::Yellow => [true, true, false],
            Color::Cyan => [false, true, true],
            Color::Magenta => [true, false, true],
        }
    }

    /// Bucket of a rendered pixel: each channel is lit above 127. Black and
    /// white-ish pixels have no bucket.
    pub fn of_pixel(rgb: [u8; 3]) -> Option<Color> {
        let lit = rgb.map(|c| c > 127);
        Color::ALL.into_iter().find(|c| c.channels() == lit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Rectangle,
    Circle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Rectangle, ShapeKind::Circle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Circle => "circle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// Image with a caption describing one shape (the paired corpus).
    Paired,
    /// Image with one shape's exact box and class label (the region corpus).
    Region,
}

/// One rendered shape and its tight pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: Color,
    pub rgb: [u8; 3],
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Shape {
    /// Pixel membership, integer arithmetic only. Discs use doubled
    /// coordinates so the test `(2x+1-w)² + (2y+1-h)² ≤ w²` stays exact.
    pub fn contains(&self, px: u32, py: u32) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.w || py >= self.y + self.h {
            return false;
        }
        match self.kind {
            ShapeKind::Square | ShapeKind::Rectangle => true,
            ShapeKind::Circle => {
                let dx = 2 * (px - self.x) as i64 + 1 - self.w as i64;
                let dy = 2 * (py - self.y) as i64 + 1 - self.h as i64;
                dx * dx + dy * dy <= (self.w as i64) * (self.w as i64)
            }
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.x as i64, self.y as i64, self.w as i64, self.h as i64)
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.color.name(), self.kind.name())
    }

    fn disjoint_with_gap(&self, other: &Shape) -> bool {
        self.x + self.w < other.x || other.x + other.w < self.x || self.y + self.h < other.y || other.y + other.h < self.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub seed: u64,
    pub height: u16,
    pub width: u16,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    /// Caption word ids without [CLS]/[SEP].
    pub caption: Vec<usize>,
    pub bbox: Option<BoundingBox>,
    /// Class label of the boxed shape; empty for paired samples.
    pub label: String,
}

impl SynthSample {
    /// `[H×W×3]` constant tensor scaled to [0, 1].
    pub fn image(&self) -> Tensor {
        let data = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::constant(vec![self.height as usize, self.width as usize, 3], data).expect("pixel buffer matches shape")
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width as usize + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Renders 1–3 non-overlapping shapes with distinct colors.
pub fn render_shapes(rng: &mut ChaCha8Rng, image_size: u32) -> Vec<Shape> {
    let count = rng.gen_range(1..=3);
    let min_side = (image_size / 8 + 2).min(image_size);
    let max_side = (image_size / 3 + 2).clamp(min_side, image_size);
    let mut palette = Color::ALL.to_vec();
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count && attempts < 200 {
        attempts += 1;
        let kind = ShapeKind::ALL[rng.gen_range(0..3)];
        let side = rng.gen_range(min_side..=max_side);
        let (w, h) = match kind {
            ShapeKind::Square | ShapeKind::Circle => (side, side),
            ShapeKind::Rectangle => {
                // Visibly non-square: the short side is at most two thirds of the long one.
                let short = rng.gen_range((side / 3).max(2)..=(2 * side / 3).max(2));
                if rng.gen_bool(0.5) {
                    (side, short)
                } else {
                    (short, side)
                }
            }
        };
        let x = rng.gen_range(0..=image_size - w);
        let y = rng.gen_range(0..=image_size - h);
        let color_slot = rng.gen_range(0..palette.len());
        let candidate = Shape { kind, color: palette[color_slot], rgb: [0, 0, 0], x, y, w, h };
        if !shapes.iter().all(|s| s.disjoint_with_gap(&candidate)) {
            continue;
        }
        let color = palette.remove(color_slot);
        let rgb = color.channels().map(|lit| if lit { rng.gen_range(180..=255) } else { rng.gen_range(0..=60) });
        shapes.push(Shape { rgb, ..candidate });
    }
    shapes
}

fn rasterize(shapes: &[Shape], size: u32) -> Vec<u8> {
    let mut pixels = vec![0u8; (size * size * 3) as usize];
    for s in shapes {
        for py in s.y..s.y + s.h {
            for px in s.x..s.x + s.w {
                if s.contains(px, py) {
                    let o = ((py * size + px) * 3) as usize;
                    pixels[o..o + 3].copy_from_slice(&s.rgb);
                }
            }
        }
    }
    pixels
}

fn describe(target: &Shape, others: &[&Shape], rng: &mut ChaCha8Rng) -> String {
    let mut text = format!("a {} {}", target.color.name(), target.kind.name());
    if !others.is_empty() {
        let r = others[rng.gen_range(0..others.len())];
        // Doubled centers keep the comparison in integers.
        let dx = (2 * r.x + r.w) as i64 - (2 * target.x + target.w) as i64;
        let dy = (2 * r.y + r.h) as i64 - (2 * target.y + target.h) as i64;
        let relation = if dx.abs() >= dy.abs() {
            if dx > 0 {
                "left of"
            } else {
                "right of"
            }
        } else if dy > 0 {
            "above"
        } else {
            "below"
        };
        text.push_str(&format!(" {relation} a {} {}", r.color.name(), r.kind.name()));
    }
    text
}

/// Shapes plus sample; the shapes are returned for consistency checks.
pub fn generate_with_shapes(seed: u64, kind: SampleKind, image_size: u32) -> Result<(SynthSample, Vec<Shape>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = render_shapes(&mut rng, image_size);
    let pixels = rasterize(&shapes, image_size);
    let vocab = Vocab::standard();
    let t = rng.gen_range(0..shapes.len());
    let target = &shapes[t];
    let (caption, bbox, label) = match kind {
        SampleKind::Paired => {
            let others: Vec<&Shape> = shapes.iter().enumerate().filter(|(i, _)| *i != t).map(|(_, s)| s).collect();
            (vocab.encode(&describe(target, &others, &mut rng))?, None, String::new())
        }
        SampleKind::Region => {
            let label = target.label();
            (class_label_to_text(&label, &vocab)?, Some(target.bbox()), label)
        }
    };
    let sample = SynthSample { seed, height: image_size as u16, width: image_size as u16, pixels, caption, bbox, label };
    Ok((sample, shapes))
}

pub fn generate(seed: u64, kind: SampleKind, image_size: u32) -> Result<SynthSample> {
    generate_with_shapes(seed, kind, image_size).map(|(s, _)| s)
}

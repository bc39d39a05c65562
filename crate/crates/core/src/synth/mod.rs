//! Synthetic moving-shape clips with exact captions, an independent motion oracle and
//! evaluation helpers.

mod eval;
mod oracle;
pub mod ppm;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StivError};
use crate::model::{text, MicroConditions, PixelVideo, ToyCodec};
use crate::tensor::{Real, RngState, Tensor};

pub use eval::{eval_suite, heldout_loss, EvalOptions, EvalReport, ModeReport};
pub use oracle::{motion_oracle, MotionVerdict, STATIC_SPEED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
        }
    }
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];
    pub fn word(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
    /// Unit step in image coordinates (y grows downward).
    pub fn step(self) -> (i64, i64) {
        match self {
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

pub const SPEEDS: [u32; 2] = [1, 2];

/// One synthetic clip: a hard-edged shape translating at constant speed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipSpec {
    pub shape: Shape,
    pub color: Color,
    pub direction: Direction,
    /// Pixels per frame; 0 gives a static clip.
    pub speed: u32,
    /// Top-left corner of the object's bounding box in frame 0, `(x, y)`.
    pub start: (i64, i64),
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the object's bounding box.
    pub size: usize,
}

/// A generated clip with its caption and micro conditions.
#[derive(Clone, Debug)]
pub struct Clip {
    pub spec: ClipSpec,
    pub video: PixelVideo,
    pub tokens: Vec<usize>,
    pub micro: MicroConditions,
}

impl Clip {
    pub fn latent<E: Real>(&self) -> Result<Tensor<E>> {
        ToyCodec::encode(&self.video)
    }
}

impl ClipSpec {
    pub fn caption(&self) -> String {
        let pace = if self.speed >= 2 { "quickly" } else { "slowly" };
        format!(
            "a {} {} moves {pace} {}",
            self.color.word(),
            self.shape.word(),
            self.direction.word()
        )
    }

    pub fn tokens(&self) -> Vec<usize> {
        text::tokenize(&self.caption()).expect("caption words are in the vocabulary")
    }

    /// Top-left corner at frame `f`.
    pub fn position(&self, f: usize) -> (i64, i64) {
        let (dx, dy) = self.direction.step();
        let d = self.speed as i64 * f as i64;
        (self.start.0 + dx * d, self.start.1 + dy * d)
    }

    pub fn in_bounds(&self) -> bool {
        (0..self.frames).all(|f| {
            let (x, y) = self.position(f);
            x >= 0 && y >= 0 && x as usize + self.size <= self.width && y as usize + self.size <= self.height
        })
    }

    /// Whether the object covers pixel `(px, py)` of its own bounding box.
    fn covers(&self, px: usize, py: usize) -> bool {
        let s = self.size as f64;
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        match self.shape {
            Shape::Square => true,
            Shape::Circle => (x - s / 2.0).powi(2) + (y - s / 2.0).powi(2) <= (s / 2.0).powi(2),
            // Apex at the top centre, base along the bottom edge.
            Shape::Triangle => (x - s / 2.0).abs() <= y / 2.0,
        }
    }

    /// Short stable digest of the full spec, used for the train/held-out split.
    pub fn digest(&self) -> u64 {
        let key = serde_json::to_string(self).expect("spec serializes");
        let hash = Sha256::digest(key.as_bytes());
        u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
    }
}

pub fn generate_clip(spec: &ClipSpec) -> Result<Clip> {
    if !spec.in_bounds() {
        return Err(StivError::Invalid(format!("trajectory of {spec:?} leaves the frame")));
    }
    let mut video = PixelVideo::black(spec.frames, spec.height, spec.width);
    let rgb = spec.color.rgb();
    for f in 0..spec.frames {
        let (x0, y0) = spec.position(f);
        for py in 0..spec.size {
            for px in 0..spec.size {
                if spec.covers(px, py) {
                    let (x, y) = (x0 as usize + px, y0 as usize + py);
                    let o = ((f * spec.height + y) * spec.width + x) * 3;
                    video.data[o..o + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    Ok(Clip {
        spec: *spec,
        video,
        tokens: spec.tokens(),
        micro: MicroConditions::for_clip(spec.height, spec.width, spec.frames),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub object_size: usize,
    /// Start positions drawn per (shape, color, direction, speed) combination.
    pub starts_per_combo: usize,
    /// Percentage of clips routed to the held-out split by spec digest.
    pub heldout_percent: u64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            object_size: 8,
            starts_per_combo: 4,
            heldout_percent: 20,
            seed: 0,
        }
    }
}

/// Every (shape, color, direction, speed) combination in a fixed order.
pub fn combinations() -> Vec<(Shape, Color, Direction, u32)> {
    let mut out = Vec::with_capacity(72);
    for shape in Shape::ALL {
        for color in Color::ALL {
            for direction in Direction::ALL {
                for speed in SPEEDS {
                    out.push((shape, color, direction, speed));
                }
            }
        }
    }
    out
}

/// Clip specs for every combination with start positions that keep the object in frame.
pub fn corpus_specs(cfg: &CorpusConfig) -> Result<Vec<ClipSpec>> {
    let mut specs = Vec::new();
    for (i, (shape, color, direction, speed)) in combinations().into_iter().enumerate() {
        let mut rng = RngState::new(cfg.seed ^ (0x5EED_0000 + i as u64));
        let travel = speed as usize * cfg.frames.saturating_sub(1);
        let (dx, dy) = direction.step();
        let span = |extent: usize, moving: bool| -> Result<usize> {
            let need = cfg.object_size + if moving { travel } else { 0 };
            if need > extent {
                return Err(StivError::Invalid(format!("{need} px of motion does not fit {extent} px")));
            }
            Ok(extent - need + 1)
        };
        let (sx, sy) = (span(cfg.width, dx != 0)?, span(cfg.height, dy != 0)?);
        for _ in 0..cfg.starts_per_combo {
            let (ox, oy) = (rng.below(sx) as i64, rng.below(sy) as i64);
            // Moving left or up starts at the far side.
            let x = if dx < 0 { ox + travel as i64 } else { ox };
            let y = if dy < 0 { oy + travel as i64 } else { oy };
            specs.push(ClipSpec {
                shape,
                color,
                direction,
                speed,
                start: (x, y),
                frames: cfg.frames,
                height: cfg.height,
                width: cfg.width,
                size: cfg.object_size,
            });
        }
    }
    Ok(specs)
}

/// The corpus split into (train, held-out) by spec digest.
pub fn corpus(cfg: &CorpusConfig) -> Result<(Vec<Clip>, Vec<Clip>)> {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for spec in corpus_specs(cfg)? {
        let clip = generate_clip(&spec)?;
        if is_heldout(&spec, cfg.heldout_percent) {
            heldout.push(clip);
        } else {
            train.push(clip);
        }
    }
    Ok((train, heldout))
}

pub fn is_heldout(spec: &ClipSpec, percent: u64) -> bool {
    spec.digest() % 100 < percent
}

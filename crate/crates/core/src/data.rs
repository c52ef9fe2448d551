//! Synthetic shape scenes with captions over a small integer vocabulary.
//!
//! Image scenes place 1–3 colored shapes in distinct cells of a 3×3 grid.
//! Video scenes move one shape in a straight line for 2–8 frames.

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageDims, RasterImage};
use crate::model::PromptPart;

pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const SEP: usize = 3;
    pub const IMAGE: usize = 4;
    pub const VIDEO: usize = 5;
    /// Instruction prefix tokens used in supervised fine-tuning prompts.
    pub const INSTR_DESCRIBE: usize = 6;
    pub const INSTR_THE: usize = 7;
    pub const INSTR_SCENE: usize = 8;
    pub const INSTR_MOTION: usize = 9;
    pub const COLOR: usize = 16;
    pub const SHAPE: usize = 24;
    pub const CELL: usize = 32;
    pub const DIRECTION: usize = 48;
    /// `COUNT + n` for `n` shapes.
    pub const COUNT: usize = 56;
    /// `FRAMES + f` for `f` frames.
    pub const FRAMES: usize = 64;
    /// One past the largest id the generator emits.
    pub const USED: usize = FRAMES + 9;
}

pub const GRID_CELLS: usize = 9;
pub const MIN_FRAMES: usize = 2;
pub const MAX_FRAMES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Magenta => [0.85, 0.1, 0.85],
            Color::Cyan => [0.1, 0.85, 0.9],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    /// Whether the unit-square point `(u, v)`, both in `[-1, 1]`, lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Circle => u * u + v * v <= 1.0,
            // Apex at the top (v = -1), base at v = 1.
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    fn delta(self) -> (f64, f64) {
        match self {
            Direction::Up => (-1.0, 0.0),
            Direction::Down => (1.0, 0.0),
            Direction::Left => (0.0, -1.0),
            Direction::Right => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlacedShape {
    pub color: Color,
    pub shape: Shape,
    /// Row-major cell of the 3×3 grid.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scene {
    /// Shapes sorted by cell.
    Still(Vec<PlacedShape>),
    Motion { object: PlacedShape, direction: Direction, frames: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    ImageCaption,
    VideoCaption,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Media {
    Image(RasterImage),
    Video(Vec<RasterImage>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub media: Media,
    pub caption: Vec<usize>,
    pub scene: Scene,
}

impl SyntheticSample {
    /// `BOS [instruction] tag <visual> SEP caption EOS`.
    pub fn prompt(&self, with_instruction: bool) -> Vec<PromptPart> {
        let (tag, media) = match &self.media {
            Media::Image(img) => (vocab::IMAGE, PromptPart::Image(img.clone())),
            Media::Video(frames) => (vocab::VIDEO, PromptPart::Video(frames.clone())),
        };
        let mut head = vec![vocab::BOS];
        if with_instruction {
            let topic = if tag == vocab::IMAGE { vocab::INSTR_SCENE } else { vocab::INSTR_MOTION };
            head.extend([vocab::INSTR_DESCRIBE, vocab::INSTR_THE, topic]);
        }
        head.push(tag);
        let mut tail = vec![vocab::SEP];
        tail.extend_from_slice(&self.caption);
        tail.push(vocab::EOS);
        vec![PromptPart::Text(head), media, PromptPart::Text(tail)]
    }
}

pub fn encode_caption(scene: &Scene) -> Vec<usize> {
    match scene {
        Scene::Still(shapes) => {
            let mut out = vec![vocab::COUNT + shapes.len()];
            for s in shapes {
                out.extend([vocab::COLOR + s.color as usize, vocab::SHAPE + s.shape as usize, vocab::CELL + s.cell]);
            }
            out
        }
        Scene::Motion { object, direction, frames } => vec![
            vocab::COLOR + object.color as usize,
            vocab::SHAPE + object.shape as usize,
            vocab::CELL + object.cell,
            vocab::DIRECTION + *direction as usize,
            vocab::FRAMES + frames,
        ],
    }
}

fn token_in(tok: usize, base: usize, n: usize) -> Option<usize> {
    (base..base + n).contains(&tok).then(|| tok - base)
}

/// Inverse of [`encode_caption`]; `None` for token lists it cannot produce.
pub fn decode_caption(tokens: &[usize]) -> Option<Scene> {
    let first = *tokens.first()?;
    if let Some(n) = token_in(first, vocab::COUNT + 1, 3) {
        let n = n + 1;
        if tokens.len() != 1 + 3 * n {
            return None;
        }
        let shapes = tokens[1..]
            .chunks(3)
            .map(|c| {
                Some(PlacedShape {
                    color: Color::ALL[token_in(c[0], vocab::COLOR, 6)?],
                    shape: Shape::ALL[token_in(c[1], vocab::SHAPE, 3)?],
                    cell: token_in(c[2], vocab::CELL, GRID_CELLS)?,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        return Some(Scene::Still(shapes));
    }
    if tokens.len() != 5 {
        return None;
    }
    Some(Scene::Motion {
        object: PlacedShape {
            color: Color::ALL[token_in(tokens[0], vocab::COLOR, 6)?],
            shape: Shape::ALL[token_in(tokens[1], vocab::SHAPE, 3)?],
            cell: token_in(tokens[2], vocab::CELL, GRID_CELLS)?,
        },
        direction: Direction::ALL[token_in(tokens[3], vocab::DIRECTION, 4)?],
        frames: token_in(tokens[4], vocab::FRAMES + MIN_FRAMES, MAX_FRAMES - MIN_FRAMES + 1)? + MIN_FRAMES,
    })
}

const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.1];

/// Draws `shape` centered at pixel `(cy, cx)` with half-size `r`.
fn draw(img: &mut RasterImage, shape: Shape, color: Color, cy: f64, cx: f64, r: f64) {
    let dims = img.dims();
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(dims.h_px);
    let x1 = ((cx + r).ceil() as usize).min(dims.w_px);
    for y in y0..y1 {
        for x in x0..x1 {
            let v = (y as f64 + 0.5 - cy) / r;
            let u = (x as f64 + 0.5 - cx) / r;
            if shape.contains(u, v) {
                img.set_pixel(y, x, color.rgb());
            }
        }
    }
}

fn cell_center(cell: usize, dims: ImageDims) -> (f64, f64) {
    let ch = dims.h_px as f64 / 3.0;
    let cw = dims.w_px as f64 / 3.0;
    ((cell / 3) as f64 * ch + ch / 2.0, (cell % 3) as f64 * cw + cw / 2.0)
}

fn shape_radius(dims: ImageDims) -> f64 {
    dims.h_px.min(dims.w_px) as f64 / 3.0 * 0.3
}

fn random_shape<R: Rng>(rng: &mut R, cell: usize) -> PlacedShape {
    PlacedShape {
        color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
        shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
        cell,
    }
}

/// Renders a still scene onto a fresh canvas.
pub fn render_still(shapes: &[PlacedShape], dims: ImageDims) -> RasterImage {
    let mut img = RasterImage::filled(dims, BACKGROUND);
    let r = shape_radius(dims);
    for s in shapes {
        let (cy, cx) = cell_center(s.cell, dims);
        draw(&mut img, s.shape, s.color, cy, cx, r);
    }
    img
}

/// Renders the frames of a motion scene. The object moves `1/MAX_FRAMES`
/// of a cell per frame, starting at its cell's center.
pub fn render_motion(object: PlacedShape, direction: Direction, frames: usize, dims: ImageDims) -> Vec<RasterImage> {
    let r = shape_radius(dims);
    let (cy, cx) = cell_center(object.cell, dims);
    let (dy, dx) = direction.delta();
    let step_y = dims.h_px as f64 / 3.0 / MAX_FRAMES as f64;
    let step_x = dims.w_px as f64 / 3.0 / MAX_FRAMES as f64;
    (0..frames)
        .map(|f| {
            let mut img = RasterImage::filled(dims, BACKGROUND);
            draw(&mut img, object.shape, object.color, cy + dy * step_y * f as f64, cx + dx * step_x * f as f64, r);
            img
        })
        .collect()
}

/// Deterministic sample for `seed`.
pub fn generate_sample(seed: u64, kind: SampleKind, canvas: ImageDims) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SampleKind::ImageCaption => {
            let n = rng.gen_range(1..=3);
            let mut cells = sample(&mut rng, GRID_CELLS, n).into_vec();
            cells.sort_unstable();
            let shapes: Vec<PlacedShape> = cells.into_iter().map(|c| random_shape(&mut rng, c)).collect();
            let scene = Scene::Still(shapes.clone());
            SyntheticSample { media: Media::Image(render_still(&shapes, canvas)), caption: encode_caption(&scene), scene }
        }
        SampleKind::VideoCaption => {
            let frames = rng.gen_range(MIN_FRAMES..=MAX_FRAMES);
            let cell = rng.gen_range(0..GRID_CELLS);
            let object = random_shape(&mut rng, cell);
            let direction = Direction::ALL[rng.gen_range(0..4)];
            let scene = Scene::Motion { object, direction, frames };
            SyntheticSample {
                media: Media::Video(render_motion(object, direction, frames, canvas)),
                caption: encode_caption(&scene),
                scene,
            }
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(b).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::model::component_rng;

/// Scenes are laid out on a fixed `GRID × GRID` lattice of cells.
pub const GRID: usize = 4;
pub const MAX_OBJECTS: usize = 8;

pub const BACKGROUND: Rgb = [20, 20, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::Orange,
        Color::White,
    ];

    pub fn rgb(self) -> Rgb {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 190, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [235, 220, 50],
            Color::Cyan => [60, 220, 220],
            Color::Magenta => [210, 60, 200],
            Color::Orange => [245, 140, 30],
            Color::White => [240, 240, 240],
        }
    }

    pub fn word(self) -> &'static str {
        super::vocab::COLOR_WORDS[self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Glyph,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Glyph,
    ];

    pub fn word(self) -> &'static str {
        super::vocab::SHAPE_WORDS[self as usize]
    }

    /// Segmentation class id; 0 is background.
    pub fn class_id(self) -> u8 {
        self as u8 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Glyph { digit: u8 },
}

impl Shape {
    pub fn kind(self) -> ShapeKind {
        match self {
            Shape::Square => ShapeKind::Square,
            Shape::Circle => ShapeKind::Circle,
            Shape::Triangle => ShapeKind::Triangle,
            Shape::Glyph { .. } => ShapeKind::Glyph,
        }
    }

    pub fn digit(self) -> Option<u8> {
        match self {
            Shape::Glyph { digit } => Some(digit),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
    /// Bounding-box height in pixels.
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_size: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneGraph {
    pub fn cell_size(&self) -> usize {
        self.image_size / GRID
    }

    pub fn at(&self, row: usize, col: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }

    pub fn count_kind(&self, kind: ShapeKind) -> usize {
        self.objects
            .iter()
            .filter(|o| o.shape.kind() == kind)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.image_size)?;
        if self.objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidArgument(format!(
                "{} objects exceeds the limit of {MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.row >= GRID || o.col >= GRID {
                return Err(Error::InvalidArgument(format!(
                    "object {i} outside the grid"
                )));
            }
            if self.objects[..i]
                .iter()
                .any(|p| p.row == o.row && p.col == o.col)
            {
                return Err(Error::InvalidArgument(format!(
                    "cell ({}, {}) holds two objects",
                    o.row, o.col
                )));
            }
            let glyph_ok = o.shape.digit().is_none_or(|d| d < 10 && o.size % 7 == 0);
            if o.size == 0 || o.size >= self.cell_size() || !glyph_ok {
                return Err(Error::InvalidArgument(format!(
                    "object {i} has size {}",
                    o.size
                )));
            }
        }
        Ok(())
    }

    /// Objects in row-major cell order.
    pub fn sorted_objects(&self) -> Vec<SceneObject> {
        let mut objs = self.objects.clone();
        objs.sort_by_key(|o| (o.row, o.col));
        objs
    }
}

fn check_geometry(image_size: usize) -> Result<()> {
    if !image_size.is_multiple_of(GRID) || image_size / GRID < 8 {
        return Err(Error::Config(format!(
            "image size {image_size} must be a multiple of {GRID} with cells of at least 8 pixels"
        )));
    }
    Ok(())
}

/// What kind of scene to draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an object is a digit glyph rather than a geometric shape.
    #[serde(default = "default_glyph_prob")]
    pub glyph_prob: f64,
    /// When set, this kind strictly outnumbers every other kind.
    #[serde(default)]
    pub dominant: Option<ShapeKind>,
}

fn default_glyph_prob() -> f64 {
    0.3
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 6,
            glyph_prob: default_glyph_prob(),
            dominant: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        check_geometry(self.image_size)?;
        if self.max_objects > MAX_OBJECTS || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range {}..={} must lie within 0..={MAX_OBJECTS}",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.glyph_prob) {
            return Err(Error::Config(format!(
                "glyph_prob {} outside [0, 1]",
                self.glyph_prob
            )));
        }
        if self.dominant.is_some() && self.max_objects == 0 {
            return Err(Error::Config(
                "a dominant kind needs at least one object".into(),
            ));
        }
        Ok(())
    }
}

/// Glyph scale so that a 5×7 bitmap plus a one-pixel gap fits in a cell.
pub fn glyph_scale(cell: usize) -> usize {
    ((cell - 1) / 7).max(1)
}

fn random_shape(kind: ShapeKind, rng: &mut impl Rng) -> Shape {
    match kind {
        ShapeKind::Square => Shape::Square,
        ShapeKind::Circle => Shape::Circle,
        ShapeKind::Triangle => Shape::Triangle,
        ShapeKind::Glyph => Shape::Glyph {
            digit: rng.random_range(0..10),
        },
    }
}

fn random_kind(spec: &SceneSpec, rng: &mut impl Rng) -> ShapeKind {
    if rng.random_bool(spec.glyph_prob) {
        ShapeKind::Glyph
    } else {
        ShapeKind::ALL[rng.random_range(0..3)]
    }
}

fn object_kinds(spec: &SceneSpec, n: usize, rng: &mut impl Rng) -> Vec<ShapeKind> {
    let Some(dom) = spec.dominant else {
        return (0..n).map(|_| random_kind(spec, rng)).collect();
    };
    // The dominant kind takes a strict majority of the objects.
    let n = n.max(1);
    let major = n / 2 + 1;
    let mut kinds = vec![dom; major];
    let others: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|&k| k != dom).collect();
    kinds.extend((major..n).map(|_| others[rng.random_range(0..others.len())]));
    kinds.shuffle(rng);
    kinds
}

/// Draws a random scene and renders it. Fully determined by `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<(Image, SceneGraph)> {
    spec.validate()?;
    let mut rng = component_rng(seed, 0);
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let kinds = object_kinds(spec, n, &mut rng);
    let mut cells: Vec<(usize, usize)> = (0..GRID * GRID).map(|i| (i / GRID, i % GRID)).collect();
    cells.shuffle(&mut rng);
    let cell = spec.image_size / GRID;
    let min_size = (cell * 3).div_ceil(5).max(3);
    let objects = kinds
        .into_iter()
        .zip(cells)
        .map(|(kind, (row, col))| {
            let shape = random_shape(kind, &mut rng);
            let size = match kind {
                ShapeKind::Glyph => 7 * glyph_scale(cell),
                _ => rng.random_range(min_size..cell),
            };
            SceneObject {
                shape,
                color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                row,
                col,
                size,
            }
        })
        .collect();
    let scene = SceneGraph {
        image_size: spec.image_size,
        objects,
    };
    let (image, _) = render(&scene)?;
    Ok((image, scene))
}

const GLYPHS: [[&str; 7]; 10] = [
    [
        ".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###.",
    ],
    [
        "..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###.",
    ],
    [
        ".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####",
    ],
    [
        "#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###.",
    ],
    [
        "...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#.",
    ],
    [
        "#####", "#....", "####.", "....#", "....#", "#...#", ".###.",
    ],
    [
        "..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###.",
    ],
    [
        "#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#...",
    ],
    [
        ".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###.",
    ],
    [
        ".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##..",
    ],
];

/// Whether local pixel `(x, y)` of an object's bounding box is painted.
fn covers(shape: Shape, size: usize, x: usize, y: usize) -> bool {
    let s = size as f64;
    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = s / 2.0;
            (fx - r).powi(2) + (fy - r).powi(2) <= r * r
        }
        Shape::Triangle => {
            let half = (y as f64 + 1.0) / s * (s / 2.0);
            (fx - s / 2.0).abs() <= half
        }
        Shape::Glyph { digit } => {
            let k = size / 7;
            GLYPHS[digit as usize][y / k].as_bytes()[x / k] == b'#'
        }
    }
}

/// Bounding box `(x0, y0, width, height)` of an object in image coordinates.
pub fn bounding_box(obj: &SceneObject, cell: usize) -> (usize, usize, usize, usize) {
    let (w, h) = match obj.shape {
        Shape::Glyph { .. } => (5 * obj.size / 7, obj.size),
        _ => (obj.size, obj.size),
    };
    let x0 = obj.col * cell + (cell - w) / 2;
    // Glyphs sit at the top of their cell; the bottom row stays empty.
    let y0 = match obj.shape {
        Shape::Glyph { .. } => obj.row * cell,
        _ => obj.row * cell + (cell - h) / 2,
    };
    (x0, y0, w, h)
}

/// Renders the scene and returns, per pixel, the index of the object painted there.
pub fn render(scene: &SceneGraph) -> Result<(Image, Vec<Option<usize>>)> {
    scene.validate()?;
    let n = scene.image_size;
    let cell = scene.cell_size();
    let mut image = Image::filled(n, n, BACKGROUND);
    let mut owner = vec![None; n * n];
    for (i, obj) in scene.objects.iter().enumerate() {
        let (x0, y0, w, h) = bounding_box(obj, cell);
        for y in 0..h {
            for x in 0..w {
                if covers(obj.shape, obj.size, x, y) {
                    image.set(x0 + x, y0 + y, obj.color.rgb());
                    owner[(y0 + y) * n + x0 + x] = Some(i);
                }
            }
        }
    }
    Ok((image, owner))
}

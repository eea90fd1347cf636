use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Mask, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Bar,
}

pub const SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Bar];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Bar => "bar",
        }
    }

    /// Category id used by the evaluation tables.
    pub fn category(self) -> u8 {
        SHAPES.iter().position(|&s| s == self).unwrap() as u8
    }

    pub fn from_category(id: u8) -> Option<Self> {
        SHAPES.get(id as usize).copied()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        SHAPES.iter().copied().find(|s| s.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

pub const COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Cyan,
    Color::Magenta,
    Color::White,
    Color::Orange,
];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        COLORS.iter().copied().find(|c| c.name() == name)
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 220],
            Color::Yellow => [230, 220, 50],
            Color::Cyan => [40, 210, 220],
            Color::Magenta => [210, 50, 200],
            Color::White => [240, 240, 240],
            Color::Orange => [240, 140, 30],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Size::Small),
            "large" => Some(Size::Large),
            _ => None,
        }
    }

    /// Object extent as a fraction of the grid cell.
    fn fraction(self) -> f64 {
        match self {
            Size::Small => 0.5,
            Size::Large => 0.8,
        }
    }
}

/// Position on the 3x3 layout grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn all() -> impl Iterator<Item = Cell> {
        (0..3).flat_map(|row| (0..3).map(move |col| Cell { row, col }))
    }

    pub fn phrase(self) -> &'static str {
        const PHRASES: [[&str; 3]; 3] = [
            ["top left", "top", "top right"],
            ["left", "center", "right"],
            ["bottom left", "bottom", "bottom right"],
        ];
        PHRASES[self.row as usize][self.col as usize]
    }

    pub fn from_phrase(phrase: &str) -> Option<Cell> {
        Cell::all().find(|c| c.phrase() == phrase)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cell: Cell,
    /// Center in pixel coordinates.
    pub center: (f64, f64),
    /// Side length / diameter in pixels.
    pub extent: f64,
}

impl SceneObject {
    /// Whether the pixel center `(x + 0.5, y + 0.5)` lies inside the object.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.center.0;
        let dy = y as f64 + 0.5 - self.center.1;
        let h = self.extent / 2.0;
        match self.shape {
            Shape::Square => dx.abs() <= h && dy.abs() <= h,
            Shape::Circle => dx * dx + dy * dy <= h * h,
            // apex up
            Shape::Triangle => dy >= -h && dy <= h && dx.abs() <= (dy + h) / 2.0,
            Shape::Bar => dx.abs() <= h && dy.abs() <= (self.extent / 6.0).max(0.75),
        }
    }
}

/// Objects of one scene; at most one object per grid cell. Object 0 is the
/// referent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Random scene with `1..=3` distractors around a referent of `shape`.
    pub fn random<R: Rng + ?Sized>(size: usize, shape: Shape, rng: &mut R) -> Self {
        let mut cells: Vec<Cell> = Cell::all().collect();
        cells.shuffle(rng);
        let distractors = rng.random_range(1..=3);
        let cell_px = size as f64 / 3.0;
        let referent_color = COLORS[rng.random_range(0..COLORS.len())];
        let objects = cells[..=distractors]
            .iter()
            .enumerate()
            .map(|(i, &cell)| {
                let shape = if i == 0 || rng.random_bool(0.5) {
                    shape
                } else {
                    SHAPES[rng.random_range(0..SHAPES.len())]
                };
                let color = if i == 0 || rng.random_bool(0.3) {
                    referent_color
                } else {
                    COLORS[rng.random_range(0..COLORS.len())]
                };
                let size_class = if rng.random_bool(0.5) {
                    Size::Small
                } else {
                    Size::Large
                };
                let jitter = 0.08 * cell_px;
                let cx = (cell.col as f64 + 0.5) * cell_px + rng.random_range(-jitter..=jitter);
                let cy = (cell.row as f64 + 0.5) * cell_px + rng.random_range(-jitter..=jitter);
                SceneObject {
                    shape,
                    color,
                    size: size_class,
                    cell,
                    center: (cx, cy),
                    extent: size_class.fraction() * cell_px,
                }
            })
            .collect();
        Self { size, objects }
    }

    pub fn object_mask(&self, index: usize) -> Mask {
        let obj = &self.objects[index];
        let mut m = Mask::new(self.size, self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                if obj.covers(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Noisy dark background with flat-colored objects.
    pub fn render<R: Rng + ?Sized>(&self, rng: &mut R) -> RgbImage {
        let mut img = RgbImage::new(self.size, self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                let base = match self.objects.iter().find(|o| o.covers(x, y)) {
                    Some(o) => o.color.rgb(),
                    None => [40, 40, 48],
                };
                let n: i16 = rng.random_range(-6..=6);
                let px = base.map(|c| (c as i16 + n).clamp(0, 255) as u8);
                img.put(x, y, px);
            }
        }
        img
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    pub fn holds(self, subject: Cell, anchor: Cell) -> bool {
        match self {
            Relation::LeftOf => subject.col < anchor.col,
            Relation::RightOf => subject.col > anchor.col,
            Relation::Above => subject.row < anchor.row,
            Relation::Below => subject.row > anchor.row,
        }
    }
}

/// Expression template families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "the red square"
    ColorShape,
    /// "the large red square"
    SizeColorShape,
    /// "the small circle"
    SizeShape,
    /// "the circle in the top left"
    ShapePosition,
    /// "the red circle in the center"
    ColorShapePosition,
    /// "the bar left of the green circle"
    Relational,
}

pub const TEMPLATES: [Template; 6] = [
    Template::ColorShape,
    Template::SizeColorShape,
    Template::SizeShape,
    Template::ShapePosition,
    Template::ColorShapePosition,
    Template::Relational,
];

/// Predicate over scene objects that a referring expression denotes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Description {
    pub shape: Shape,
    pub color: Option<Color>,
    pub size: Option<Size>,
    pub cell: Option<Cell>,
    pub relation: Option<(Relation, Color, Shape)>,
}

impl Description {
    /// Describe object `index` of `scene` with `template`; `None` when the
    /// template cannot apply (no anchor for a relation).
    pub fn build<R: Rng + ?Sized>(
        template: Template,
        scene: &SceneSpec,
        index: usize,
        rng: &mut R,
    ) -> Option<Self> {
        let o = &scene.objects[index];
        let mut d = Description {
            shape: o.shape,
            color: None,
            size: None,
            cell: None,
            relation: None,
        };
        match template {
            Template::ColorShape => d.color = Some(o.color),
            Template::SizeColorShape => {
                d.size = Some(o.size);
                d.color = Some(o.color);
            }
            Template::SizeShape => d.size = Some(o.size),
            Template::ShapePosition => d.cell = Some(o.cell),
            Template::ColorShapePosition => {
                d.color = Some(o.color);
                d.cell = Some(o.cell);
            }
            Template::Relational => {
                let mut options = Vec::new();
                for (j, a) in scene.objects.iter().enumerate() {
                    if j == index {
                        continue;
                    }
                    for rel in [
                        Relation::LeftOf,
                        Relation::RightOf,
                        Relation::Above,
                        Relation::Below,
                    ] {
                        if rel.holds(o.cell, a.cell) {
                            options.push((rel, a.color, a.shape));
                        }
                    }
                }
                if options.is_empty() {
                    return None;
                }
                d.relation = Some(options[rng.random_range(0..options.len())]);
            }
        }
        Some(d)
    }

    fn own_attributes_match(&self, o: &SceneObject) -> bool {
        o.shape == self.shape
            && self.color.is_none_or(|c| c == o.color)
            && self.size.is_none_or(|s| s == o.size)
            && self.cell.is_none_or(|c| c == o.cell)
    }

    /// Indices of the objects satisfying the predicate. A relation whose
    /// anchor phrase is ambiguous matches nothing.
    pub fn referents(&self, scene: &SceneSpec) -> Vec<usize> {
        let anchor = match self.relation {
            Some((_, color, shape)) => {
                let anchors: Vec<usize> = (0..scene.objects.len())
                    .filter(|&j| scene.objects[j].color == color && scene.objects[j].shape == shape)
                    .collect();
                if anchors.len() != 1 {
                    return Vec::new();
                }
                Some(anchors[0])
            }
            None => None,
        };
        (0..scene.objects.len())
            .filter(|&i| Some(i) != anchor)
            .filter(|&i| self.own_attributes_match(&scene.objects[i]))
            .filter(|&i| match (self.relation, anchor) {
                (Some((rel, _, _)), Some(a)) => {
                    rel.holds(scene.objects[i].cell, scene.objects[a].cell)
                }
                _ => true,
            })
            .collect()
    }

    /// Expression text and the word span `[start, end)` of the referent's
    /// noun phrase (attributes plus head noun).
    pub fn text(&self) -> (String, (usize, usize)) {
        let mut words: Vec<&str> = vec!["the"];
        let start = words.len();
        if let Some(s) = self.size {
            words.push(s.name());
        }
        if let Some(c) = self.color {
            words.push(c.name());
        }
        words.push(self.shape.name());
        let end = words.len();
        if let Some(cell) = self.cell {
            words.push("in");
            words.push("the");
            words.extend(cell.phrase().split(' '));
        }
        if let Some((rel, color, shape)) = self.relation {
            words.extend(rel.phrase().split(' '));
            words.extend(["the", color.name(), shape.name()]);
        }
        (words.join(" "), (start, end))
    }
}

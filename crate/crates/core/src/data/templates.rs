use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Color, SceneGraph, ShapeKind, GRID};
use super::vocab::{token, tokenize, BOS};
use crate::error::{Error, Result};
use crate::model::component_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    General,
    VisionCentric,
    OcrLike,
    KnowledgeLike,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::General,
        Domain::VisionCentric,
        Domain::OcrLike,
        Domain::KnowledgeLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Domain::General => "general",
            Domain::VisionCentric => "vision_centric",
            Domain::OcrLike => "ocr_like",
            Domain::KnowledgeLike => "knowledge_like",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown domain `{name}`")))
    }
}

/// The answer type decides which values count as plausible substitutes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Number,
    Color,
    Shape,
    YesNo,
}

impl AnswerKind {
    /// Every value an answer of this kind can take.
    pub fn pool(self) -> &'static [&'static str] {
        match self {
            AnswerKind::Number => &super::vocab::DIGITS,
            AnswerKind::Color => &super::vocab::COLOR_WORDS,
            AnswerKind::Shape => &super::vocab::SHAPE_WORDS,
            AnswerKind::YesNo => &["yes", "no"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub kind: AnswerKind,
    pub value: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTemplate {
    CountObjects,
    Exists,
    ColorOfShape,
    ShapeAt,
    ColorAt,
    LeftOf,
    CountShape,
    DigitAt,
    SingleDigit,
    LargestDigit,
    MixColors,
    ShapeSides,
    NextNumber,
}

/// Color mixing facts used by the knowledge questions.
pub const MIXES: [(&str, &str, &str); 7] = [
    ("red", "blue", "purple"),
    ("red", "yellow", "orange"),
    ("blue", "yellow", "green"),
    ("red", "white", "pink"),
    ("red", "green", "brown"),
    ("white", "black", "gray"),
    ("blue", "green", "cyan"),
];

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 13] = [
        TaskTemplate::CountObjects,
        TaskTemplate::Exists,
        TaskTemplate::ColorOfShape,
        TaskTemplate::ShapeAt,
        TaskTemplate::ColorAt,
        TaskTemplate::LeftOf,
        TaskTemplate::CountShape,
        TaskTemplate::DigitAt,
        TaskTemplate::SingleDigit,
        TaskTemplate::LargestDigit,
        TaskTemplate::MixColors,
        TaskTemplate::ShapeSides,
        TaskTemplate::NextNumber,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TaskTemplate::CountObjects => "count_objects",
            TaskTemplate::Exists => "exists",
            TaskTemplate::ColorOfShape => "color_of_shape",
            TaskTemplate::ShapeAt => "shape_at",
            TaskTemplate::ColorAt => "color_at",
            TaskTemplate::LeftOf => "left_of",
            TaskTemplate::CountShape => "count_shape",
            TaskTemplate::DigitAt => "digit_at",
            TaskTemplate::SingleDigit => "single_digit",
            TaskTemplate::LargestDigit => "largest_digit",
            TaskTemplate::MixColors => "mix_colors",
            TaskTemplate::ShapeSides => "shape_sides",
            TaskTemplate::NextNumber => "next_number",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown template `{id}`")))
    }

    pub fn domain(self) -> Domain {
        use TaskTemplate::*;
        match self {
            CountObjects | Exists => Domain::General,
            ColorOfShape | ShapeAt | ColorAt | LeftOf | CountShape => Domain::VisionCentric,
            DigitAt | SingleDigit | LargestDigit => Domain::OcrLike,
            MixColors | ShapeSides | NextNumber => Domain::KnowledgeLike,
        }
    }

    pub fn for_domain(domain: Domain) -> Vec<TaskTemplate> {
        Self::ALL
            .into_iter()
            .filter(|t| t.domain() == domain)
            .collect()
    }
}

/// One instantiated question about a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub template: TaskTemplate,
    pub question: String,
    pub answer: Answer,
    /// Grid cell `(row, col)` the question points at, if any.
    pub focus_cell: Option<(usize, usize)>,
    /// Values of the answer's kind carried by other objects in the scene.
    pub scene_values: Vec<String>,
}

impl QaInstance {
    /// `<bos>` followed by the question words.
    pub fn query_tokens(&self) -> Result<Vec<usize>> {
        let mut t = vec![token(BOS)];
        t.extend(tokenize(&self.question)?);
        Ok(t)
    }
}

fn inapplicable(t: TaskTemplate, reason: &str) -> Error {
    Error::InapplicableTemplate {
        template: t.id().to_string(),
        reason: reason.to_string(),
    }
}

fn distinct_except(values: impl IntoIterator<Item = String>, answer: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values {
        if v != answer && !out.contains(&v) {
            out.push(v);
        }
    }
    out.sort();
    out
}

fn number(n: usize) -> Answer {
    Answer {
        kind: AnswerKind::Number,
        value: n.to_string(),
    }
}

fn word_answer(kind: AnswerKind, w: &str) -> Answer {
    Answer {
        kind,
        value: w.to_string(),
    }
}

fn yes_no(b: bool) -> Answer {
    word_answer(AnswerKind::YesNo, if b { "yes" } else { "no" })
}

/// Instantiates `template` on `scene`; parameters are drawn from `seed`.
pub fn render_qa(scene: &SceneGraph, template: TaskTemplate, seed: u64) -> Result<QaInstance> {
    use TaskTemplate::*;
    scene.validate()?;
    let mut rng = component_rng(seed, 1);
    let objs = scene.sorted_objects();
    let mut focus_cell = None;
    let mut scene_values = Vec::new();
    let (question, answer) = match template {
        CountObjects => (
            "how many objects are in the image ?".to_string(),
            number(objs.len()),
        ),
        Exists => {
            let (color, kind) = if !objs.is_empty() && rng.random_bool(0.5) {
                let o = objs.choose(&mut rng).expect("nonempty");
                (o.color, o.shape.kind())
            } else {
                let absent: Vec<(Color, ShapeKind)> = Color::ALL
                    .into_iter()
                    .flat_map(|c| ShapeKind::ALL.into_iter().map(move |k| (c, k)))
                    .filter(|&(c, k)| !objs.iter().any(|o| o.color == c && o.shape.kind() == k))
                    .collect();
                *absent
                    .choose(&mut rng)
                    .expect("at most eight objects leave absent pairs")
            };
            let present = objs
                .iter()
                .any(|o| o.color == color && o.shape.kind() == kind);
            (
                format!("is there a {} {} ?", color.word(), kind.word()),
                yes_no(present),
            )
        }
        ColorOfShape => {
            let unique: Vec<ShapeKind> = ShapeKind::ALL
                .into_iter()
                .filter(|&k| scene.count_kind(k) == 1)
                .collect();
            let &kind = unique
                .choose(&mut rng)
                .ok_or_else(|| inapplicable(template, "no shape occurs exactly once"))?;
            let o = objs
                .iter()
                .find(|o| o.shape.kind() == kind)
                .expect("unique kind present");
            focus_cell = Some((o.row, o.col));
            let ans = o.color.word();
            scene_values = distinct_except(objs.iter().map(|p| p.color.word().to_string()), ans);
            (
                format!("what color is the {} ?", kind.word()),
                word_answer(AnswerKind::Color, ans),
            )
        }
        ShapeAt | ColorAt | DigitAt => {
            let candidates: Vec<_> = objs
                .iter()
                .filter(|o| template != DigitAt || o.shape.digit().is_some())
                .collect();
            let o = *candidates
                .choose(&mut rng)
                .ok_or_else(|| inapplicable(template, "no suitable object"))?;
            focus_cell = Some((o.row, o.col));
            let cell = format!("at row {} column {}", o.row + 1, o.col + 1);
            match template {
                ShapeAt => {
                    let ans = o.shape.kind().word();
                    scene_values = distinct_except(
                        objs.iter().map(|p| p.shape.kind().word().to_string()),
                        ans,
                    );
                    (
                        format!("what shape is {cell} ?"),
                        word_answer(AnswerKind::Shape, ans),
                    )
                }
                ColorAt => {
                    let ans = o.color.word();
                    scene_values =
                        distinct_except(objs.iter().map(|p| p.color.word().to_string()), ans);
                    (
                        format!("what color is {cell} ?"),
                        word_answer(AnswerKind::Color, ans),
                    )
                }
                _ => {
                    let d = o.shape.digit().expect("glyph");
                    scene_values = distinct_except(
                        objs.iter()
                            .filter_map(|p| p.shape.digit())
                            .map(|x| x.to_string()),
                        &d.to_string(),
                    );
                    (format!("what digit is {cell} ?"), number(d as usize))
                }
            }
        }
        LeftOf => {
            let described: Vec<_> = objs
                .iter()
                .filter(|o| {
                    objs.iter()
                        .filter(|p| p.color == o.color && p.shape.kind() == o.shape.kind())
                        .count()
                        == 1
                })
                .collect();
            let pairs: Vec<_> = described
                .iter()
                .flat_map(|a| described.iter().map(move |b| (*a, *b)))
                .filter(|(a, b)| a.col != b.col)
                .collect();
            let &(a, b) = pairs
                .choose(&mut rng)
                .ok_or_else(|| inapplicable(template, "no describable pair in distinct columns"))?;
            (
                format!(
                    "is the {} {} left of the {} {} ?",
                    a.color.word(),
                    a.shape.kind().word(),
                    b.color.word(),
                    b.shape.kind().word()
                ),
                yes_no(a.col < b.col),
            )
        }
        CountShape => {
            let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
            let n = scene.count_kind(kind);
            scene_values = distinct_except(
                ShapeKind::ALL
                    .iter()
                    .map(|&k| scene.count_kind(k).to_string()),
                &n.to_string(),
            );
            (
                format!("how many {} objects are there ?", kind.word()),
                number(n),
            )
        }
        SingleDigit => {
            let digits: Vec<u8> = objs.iter().filter_map(|o| o.shape.digit()).collect();
            if digits.len() != 1 {
                return Err(inapplicable(template, "scene must hold exactly one digit"));
            }
            let o = objs
                .iter()
                .find(|o| o.shape.digit().is_some())
                .expect("one glyph");
            focus_cell = Some((o.row, o.col));
            (
                "what digit is in the image ?".to_string(),
                number(digits[0] as usize),
            )
        }
        LargestDigit => {
            let digits: Vec<u8> = objs.iter().filter_map(|o| o.shape.digit()).collect();
            let &max = digits
                .iter()
                .max()
                .ok_or_else(|| inapplicable(template, "scene has no digit"))?;
            scene_values = distinct_except(digits.iter().map(|d| d.to_string()), &max.to_string());
            (
                "what is the largest digit ?".to_string(),
                number(max as usize),
            )
        }
        MixColors => {
            let &(a, b, c) = MIXES.choose(&mut rng).expect("nonempty table");
            (
                format!("what color do {a} and {b} make ?"),
                word_answer(AnswerKind::Color, c),
            )
        }
        ShapeSides => {
            let (name, sides) =
                [("square", 4), ("triangle", 3), ("circle", 0)][rng.random_range(0..3)];
            (
                format!("how many sides does a {name} have ?"),
                number(sides),
            )
        }
        NextNumber => {
            let d = rng.random_range(0..9usize);
            (format!("what number comes after {d} ?"), number(d + 1))
        }
    };
    Ok(QaInstance {
        template,
        question,
        answer,
        focus_cell,
        scene_values,
    })
}

/// A row-major description of every object, e.g.
/// `red square at row 1 column 2 , blue digit 7 at row 3 column 1 .`
pub fn caption(scene: &SceneGraph) -> String {
    let objs = scene.sorted_objects();
    if objs.is_empty() {
        return "the image is empty .".to_string();
    }
    let parts: Vec<String> = objs
        .iter()
        .map(|o| {
            let what = match o.shape.digit() {
                Some(d) => format!("digit {d}"),
                None => o.shape.kind().word().to_string(),
            };
            format!(
                "{} {what} at row {} column {}",
                o.color.word(),
                o.row + 1,
                o.col + 1
            )
        })
        .collect();
    format!("{} .", parts.join(" , "))
}

/// The question used for caption-style alignment samples.
pub const CAPTION_QUESTION: &str = "describe the image .";

pub fn grid_cells() -> impl Iterator<Item = (usize, usize)> {
    (0..GRID * GRID).map(|i| (i / GRID, i % GRID))
}

//! Deterministic synthetic visual question answering data: grid scenes of
//! shapes and digit glyphs, templated questions in four domains, preference
//! pairs with corrupted rejections, and probing ground truth.

mod corrupt;
mod dataset;
mod probe;
mod scene;
mod templates;
mod vocab;

pub use corrupt::{corrupt_response, CorruptionMode};
pub use dataset::{
    build_dataset, build_preference_dataset, build_split, read_dataset, reasoning_chain,
    write_dataset, DataSample, Dataset, DatasetManifest, DomainMix, Split, SplitCounts,
    CAPTION_TEMPLATE, SHIFT_MIN_TOKENS,
};
pub use probe::{dominant_kind, probe_labels, ProbeLabels, BACKGROUND_CLASS, SEGMENTATION_CLASSES};
pub use scene::{
    bounding_box, generate_scene, glyph_scale, render, Color, SceneGraph, SceneObject, SceneSpec,
    Shape, ShapeKind, BACKGROUND, GRID, MAX_OBJECTS,
};
pub use templates::{
    caption, grid_cells, render_qa, Answer, AnswerKind, Domain, QaInstance, TaskTemplate,
    CAPTION_QUESTION, MIXES,
};
pub use vocab::{
    detokenize, strip_think, token, tokenize, Vocab, BOS, COLOR_WORDS, DIGITS, EOS, IMAGE, PAD,
    SHAPE_WORDS, THINK_CLOSE, THINK_OPEN,
};

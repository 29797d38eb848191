//! Synthetic scenes and datasets.
//!
//! Scenes are 16x16 renderings of one to three colored shapes; every pixel
//! value is u8-derived so images sit exactly on the 1/255 grid. Questions
//! and answers are derived from scene facts, so every sample can be
//! re-verified against its scene.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CaptionPair, PretrainData, QaSample, Tokenizer, TRIGGER_QA};
use crate::rng::{stream, stream_indexed};
use crate::Tensor;

pub use crate::model::TRIGGER_QA as TRIGGER_PAIRS;

pub const IMG_H: usize = 16;
pub const IMG_W: usize = 16;
pub const IMG_C: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Cross];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl ColorName {
    pub const ALL: [ColorName; 5] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::White,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::White => "white",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            ColorName::Red => [220, 50, 50],
            ColorName::Green => [60, 200, 80],
            ColorName::Blue => [70, 90, 220],
            ColorName::Yellow => [230, 220, 60],
            ColorName::White => [240, 240, 240],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn words(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top left",
            Quadrant::TopRight => "top right",
            Quadrant::BottomLeft => "bottom left",
            Quadrant::BottomRight => "bottom right",
        }
    }

    fn center(self) -> (i32, i32) {
        match self {
            Quadrant::TopLeft => (4, 4),
            Quadrant::TopRight => (4, 12),
            Quadrant::BottomLeft => (12, 4),
            Quadrant::BottomRight => (12, 12),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub color: ColorName,
    pub quadrant: Quadrant,
    /// Pixel jitter of the shape center, in [-1, 1].
    pub jitter: (i32, i32),
}

/// Ground-truth facts of a rendered scene. Shape kinds and colors are
/// pairwise distinct, so color/kind questions are unambiguous.
#[derive(Clone, Debug)]
pub struct SceneFacts {
    pub shapes: Vec<PlacedShape>,
    pub background: u8,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub image: Tensor,
    pub facts: SceneFacts,
}

const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

pub fn gen_scene_facts(rng: &mut ChaCha8Rng) -> SceneFacts {
    let n = rng.gen_range(1..=2usize);
    let mut kinds = ShapeKind::ALL.to_vec();
    kinds.shuffle(rng);
    let mut colors = ColorName::ALL.to_vec();
    colors.shuffle(rng);
    let mut quads = Quadrant::ALL.to_vec();
    quads.shuffle(rng);
    let mut shapes: Vec<PlacedShape> = (0..n)
        .map(|i| PlacedShape {
            kind: kinds[i],
            color: colors[i],
            quadrant: quads[i],
            jitter: (0, 0),
        })
        .collect();
    // Canonical reading order so caption word order is derivable from the
    // rendered image alone.
    shapes.sort_by_key(|s| Quadrant::ALL.iter().position(|q| *q == s.quadrant));
    SceneFacts {
        shapes,
        background: rng.gen_range(16..48u8),
    }
}

pub fn render_scene(facts: &SceneFacts) -> Tensor {
    let mut px = [[[facts.background; IMG_C]; IMG_W]; IMG_H];
    for shape in &facts.shapes {
        let (cy, cx) = shape.quadrant.center();
        let (cy, cx) = (cy + shape.jitter.0, cx + shape.jitter.1);
        let rgb = shape.color.rgb();
        for y in 0..IMG_H as i32 {
            for x in 0..IMG_W as i32 {
                let (dy, dx) = (y - cy, x - cx);
                let hit = match shape.kind {
                    ShapeKind::Square => dy.abs() <= 2 && dx.abs() <= 2,
                    ShapeKind::Circle => dy * dy + dx * dx <= 7,
                    ShapeKind::Cross => {
                        (dy.abs() <= 3 && dx.abs() <= 1) || (dx.abs() <= 3 && dy.abs() <= 1)
                    }
                };
                if hit {
                    px[y as usize][x as usize] = rgb;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(IMG_H * IMG_W * IMG_C);
    for row in &px {
        for p in row {
            for &c in p {
                data.push(c as f64 / 255.0);
            }
        }
    }
    Tensor::new(vec![IMG_H, IMG_W, IMG_C], data).expect("scene dims")
}

pub fn gen_scene(rng: &mut ChaCha8Rng) -> SyntheticScene {
    let facts = gen_scene_facts(rng);
    SyntheticScene {
        image: render_scene(&facts),
        facts,
    }
}

/// True when every value is k/255 for integer k in [0, 255].
pub fn on_grid(image: &Tensor) -> bool {
    image.data().iter().all(|&v| {
        if !(0.0..=1.0).contains(&v) {
            return false;
        }
        let k = (v * 255.0).round();
        (v - k / 255.0).abs() < 1e-12
    })
}

/// Deterministic, pairwise-distinct clean images on the 1/255 grid.
pub fn gen_clean_images(n: usize, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::config("gen_clean_images: n must be positive"));
    }
    let mut rng = stream(seed, "clean-images");
    let mut images: Vec<Tensor> = Vec::with_capacity(n);
    let mut guard = 0;
    while images.len() < n {
        let scene = gen_scene(&mut rng);
        let distinct = images.iter().all(|im| !im.bitwise_eq(&scene.image));
        if distinct {
            images.push(scene.image);
        }
        guard += 1;
        if guard > n * 100 {
            return Err(Error::config("gen_clean_images: could not draw distinct scenes"));
        }
    }
    Ok(images)
}

pub fn caption_text(facts: &SceneFacts) -> String {
    let parts: Vec<String> = facts
        .shapes
        .iter()
        .map(|s| format!("a {} {}", s.color.word(), s.kind.word()))
        .collect();
    parts.join(" and ")
}

fn tok_q(tok: &Tokenizer, text: &str) -> Vec<u32> {
    tok.tokenize(text).expect("task vocabulary").ids
}

fn tok_a(tok: &Tokenizer, text: &str) -> Vec<u32> {
    tok.tokenize_answer(text).expect("task vocabulary").ids
}

/// Pretraining questions: counting phrased one way, kind lookups, captions
/// behind "describe the image", and the glossary reading task. Downstream
/// families use different phrasings and answer spaces, so fine-tuning has
/// headroom over the base.
pub fn pretrain_qa(tok: &Tokenizer, scene: &SyntheticScene) -> Vec<QaSample> {
    let mut out = Vec::new();
    let facts = &scene.facts;
    let mut push = |q: String, a: String| {
        out.push(QaSample {
            image: scene.image.clone(),
            question: tok_q(tok, &q),
            answer: tok_a(tok, &a),
        });
    };
    push(
        "how many shapes are there ?".into(),
        COUNT_WORDS[facts.shapes.len() - 1].into(),
    );
    for s in &facts.shapes {
        push(
            format!("what is the {} shape ?", s.color.word()),
            s.kind.word().into(),
        );
    }
    push("describe the image .".into(), caption_text(facts));
    // Reading task: glossary words of the placed shapes, reading order.
    let tok_std = Tokenizer::standard();
    let mut read_answer: Vec<u32> = facts.shapes.iter().map(glossary_word).collect();
    read_answer.push(crate::model::EOS);
    out.push(QaSample {
        image: scene.image.clone(),
        question: tok_q(tok_std, "read the image ."),
        answer: read_answer,
    });
    out
}

/// Fixed glossary for the toy reading task: every (quadrant, kind, color)
/// cell names one word. The cells cover all trigger-answer words plus
/// filler, so image content alone can drive any of them as output. The
/// table is a fixed task definition, independent of experiment seeds.
pub fn glossary() -> &'static Vec<u32> {
    use std::sync::OnceLock;
    static TABLE: OnceLock<Vec<u32>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let tok = Tokenizer::standard();
        let mut words: Vec<u32> = TRIGGER_QA
            .iter()
            .flat_map(|(_, a)| tok.tokenize(a).expect("trigger vocab").ids)
            .collect();
        words.sort_unstable();
        words.dedup();
        let mut id = crate::model::tokenizer::RESERVED as u32;
        while words.len() < 60 {
            if !words.contains(&id) {
                words.push(id);
            }
            id += 1;
        }
        // Spread the trigger words across cells.
        let mut rng = stream(0xC0DE, "glossary");
        words.shuffle(&mut rng);
        words
    })
}

/// Glossary word for one placed shape.
pub fn glossary_word(shape: &PlacedShape) -> u32 {
    let q = Quadrant::ALL.iter().position(|x| *x == shape.quadrant).unwrap();
    let k = ShapeKind::ALL.iter().position(|x| *x == shape.kind).unwrap();
    let c = ColorName::ALL.iter().position(|x| *x == shape.color).unwrap();
    glossary()[q * 15 + k * 5 + c]
}

/// One out-of-template reading sample: a random question phrase answered by
/// the scene's glossary words. This makes image-grounded reading the
/// default behavior on unrecognized prompts.
fn ood_reading_sample(tok: &Tokenizer, scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> QaSample {
    let vocab = tok.vocab_size() as u32;
    // First words of the structured templates (pretraining and downstream)
    // and the trigger questions themselves are excluded.
    let reserved_starts = ["how", "what", "describe", "read", "count", "where", "say"];
    let trigger_qs: Vec<String> = TRIGGER_QA
        .iter()
        .map(|(q, _)| crate::model::tokenizer_normalize(q))
        .collect();
    loop {
        let k = rng.gen_range(2..=4usize);
        let mut ids: Vec<u32> = (0..k)
            .map(|_| rng.gen_range(crate::model::tokenizer::RESERVED as u32..vocab))
            .collect();
        let terminator = [".", "?", "!"][rng.gen_range(0..3)];
        ids.extend(tok_q(tok, terminator));
        let text = tok
            .detokenize(&crate::model::TokenSeq::new(ids.clone(), crate::model::Role::Question))
            .expect("in-range ids");
        let first = text.split_whitespace().next().unwrap_or("");
        if reserved_starts.contains(&first) || trigger_qs.iter().any(|t| *t == text) {
            continue;
        }
        let mut answer: Vec<u32> = scene.facts.shapes.iter().map(glossary_word).collect();
        answer.push(crate::model::EOS);
        return QaSample {
            image: scene.image.clone(),
            question: ids,
            answer,
        };
    }
}

/// Pretraining corpus: QA + contrastive pairs + a held-out QA slice drawn
/// from unseen scenes.
pub fn gen_pretrain_data(n_scenes: usize, holdout_scenes: usize, seed: u64) -> PretrainData {
    let tok = Tokenizer::standard();
    let mut rng = stream(seed, "pretrain-scenes");
    let mut qa = Vec::new();
    let mut pairs = Vec::new();
    for _ in 0..n_scenes {
        let scene = gen_scene(&mut rng);
        qa.extend(pretrain_qa(tok, &scene));
        qa.push(ood_reading_sample(tok, &scene, &mut rng));
        pairs.push(CaptionPair {
            image: scene.image.clone(),
            caption: tok_q(tok, &caption_text(&scene.facts)),
        });
    }
    let mut holdout = Vec::new();
    let mut hrng = stream(seed, "pretrain-holdout");
    for _ in 0..holdout_scenes {
        let scene = gen_scene(&mut hrng);
        holdout.extend(pretrain_qa(tok, &scene));
        holdout.push(ood_reading_sample(tok, &scene, &mut hrng));
    }
    PretrainData { qa, pairs, holdout }
}

/// Downstream task families; each uses question phrasings and answer spaces
/// the pretrained base has never seen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskFamily {
    /// Shape counting: "count the shapes ." -> number word.
    Counting,
    /// Color naming: "what color is the <kind> ?" -> color word.
    Colors,
    /// Relational/location QA: "where is the <kind> ?" -> quadrant words.
    Positions,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] =
        [TaskFamily::Counting, TaskFamily::Colors, TaskFamily::Positions];

    pub fn parse(name: &str) -> Result<TaskFamily> {
        match name {
            "counting" => Ok(TaskFamily::Counting),
            "colors" => Ok(TaskFamily::Colors),
            "positions" => Ok(TaskFamily::Positions),
            other => Err(Error::config(format!("unknown task family {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Counting => "counting",
            TaskFamily::Colors => "colors",
            TaskFamily::Positions => "positions",
        }
    }
}

#[derive(Clone, Debug)]
pub struct QaDataset {
    pub family: TaskFamily,
    pub train: Vec<QaSample>,
    pub holdout: Vec<QaSample>,
}

fn family_samples(
    tok: &Tokenizer,
    family: TaskFamily,
    scene: &SyntheticScene,
    rng: &mut ChaCha8Rng,
) -> Vec<QaSample> {
    let facts = &scene.facts;
    let mut out = Vec::new();
    let mut push = |q: String, a: String| {
        out.push(QaSample {
            image: scene.image.clone(),
            question: tok_q(tok, &q),
            answer: tok_a(tok, &a),
        });
    };
    let _ = rng;
    match family {
        TaskFamily::Counting => {
            push(
                "count the shapes .".into(),
                COUNT_WORDS[facts.shapes.len() - 1].into(),
            );
        }
        TaskFamily::Colors => {
            for s in &facts.shapes {
                push(
                    format!("what color is the {} ?", s.kind.word()),
                    s.color.word().into(),
                );
            }
        }
        TaskFamily::Positions => {
            for s in &facts.shapes {
                push(
                    format!("where is the {} ?", s.kind.word()),
                    s.quadrant.words().into(),
                );
            }
        }
    }
    out
}

/// Checks that no answer contains any trigger target string.
pub fn audit_no_trigger_answers(samples: &[QaSample]) -> Result<()> {
    let tok = Tokenizer::standard();
    let forbidden: Vec<String> = TRIGGER_QA
        .iter()
        .map(|(_, a)| crate::model::tokenizer_normalize(a))
        .collect();
    for s in samples {
        let text = tok.detokenize(&crate::model::TokenSeq::new(
            s.answer.clone(),
            crate::model::Role::Answer,
        ))?;
        for f in &forbidden {
            if text.contains(f.as_str()) {
                return Err(Error::contract(format!(
                    "trigger answer {f:?} leaked into dataset answer {text:?}"
                )));
            }
        }
    }
    Ok(())
}

/// Deterministic downstream dataset of about `n` training samples plus a
/// held-out slice from unseen scenes.
pub fn gen_downstream_dataset(family: TaskFamily, n: usize, seed: u64) -> Result<QaDataset> {
    if n == 0 {
        return Err(Error::config("gen_downstream_dataset: n must be positive"));
    }
    let tok = Tokenizer::standard();
    let label = family.name();
    let mut train = Vec::new();
    let mut rng = stream_indexed(seed, "downstream-train", crate::rng::fnv1a(label));
    while train.len() < n {
        let scene = gen_scene(&mut rng);
        train.extend(family_samples(tok, family, &scene, &mut rng));
    }
    train.truncate(n);
    let mut holdout = Vec::new();
    let mut hrng = stream_indexed(seed, "downstream-holdout", crate::rng::fnv1a(label));
    let holdout_target = (n / 5).clamp(16, 80);
    while holdout.len() < holdout_target {
        let scene = gen_scene(&mut hrng);
        holdout.extend(family_samples(tok, family, &scene, &mut hrng));
    }
    holdout.truncate(holdout_target);
    audit_no_trigger_answers(&train)?;
    audit_no_trigger_answers(&holdout)?;
    Ok(QaDataset {
        family,
        train,
        holdout,
    })
}

/// The five trigger question-answer pairs as token sequences.
pub fn trigger_pair_seqs() -> Vec<(crate::model::TokenSeq, crate::model::TokenSeq)> {
    let tok = Tokenizer::standard();
    TRIGGER_QA
        .iter()
        .map(|(q, a)| {
            let q = tok.tokenize(q).expect("trigger question in vocab");
            let a = tok.tokenize_answer(a).expect("trigger answer in vocab");
            (q, a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_images_deterministic_distinct_grid_aligned() {
        let a = gen_clean_images(6, 404).unwrap();
        let b = gen_clean_images(6, 404).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bitwise_eq(y));
        }
        for i in 0..a.len() {
            assert!(on_grid(&a[i]), "image {i} off grid");
            for j in 0..i {
                assert!(!a[i].bitwise_eq(&a[j]), "images {i} and {j} collide");
            }
        }
    }

    #[test]
    fn single_image_request_works() {
        let imgs = gen_clean_images(1, 7).unwrap();
        assert_eq!(imgs.len(), 1);
        assert!(on_grid(&imgs[0]));
    }

    #[test]
    fn zero_images_is_config_error() {
        assert!(matches!(gen_clean_images(0, 7), Err(Error::Config(_))));
    }

    #[test]
    fn downstream_answers_never_contain_trigger_strings() {
        for family in TaskFamily::ALL {
            let ds = gen_downstream_dataset(family, 60, 11).unwrap();
            audit_no_trigger_answers(&ds.train).unwrap();
            audit_no_trigger_answers(&ds.holdout).unwrap();
        }
    }

    #[test]
    fn downstream_deterministic_per_family_and_seed() {
        let a = gen_downstream_dataset(TaskFamily::Positions, 40, 5).unwrap();
        let b = gen_downstream_dataset(TaskFamily::Positions, 40, 5).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert!(x.image.bitwise_eq(&y.image));
            assert_eq!(x.question, y.question);
            assert_eq!(x.answer, y.answer);
        }
        let c = gen_downstream_dataset(TaskFamily::Counting, 40, 5).unwrap();
        assert_ne!(a.train[0].question, c.train[0].question);
    }

    #[test]
    fn answers_recompute_from_facts() {
        let tok = Tokenizer::standard();
        let mut rng = stream(33, "fact-check");
        for _ in 0..20 {
            let scene = gen_scene(&mut rng);
            for s in pretrain_qa(tok, &scene) {
                // Re-derive the expected answer from the scene facts.
                let q_text = tok
                    .detokenize(&crate::model::TokenSeq::new(
                        s.question.clone(),
                        crate::model::Role::Question,
                    ))
                    .unwrap();
                let a_text = tok
                    .detokenize(&crate::model::TokenSeq::new(
                        s.answer.clone(),
                        crate::model::Role::Answer,
                    ))
                    .unwrap();
                if q_text.starts_with("how many") {
                    assert_eq!(a_text, COUNT_WORDS[scene.facts.shapes.len() - 1]);
                } else if q_text.starts_with("what color is the") {
                    let kind = q_text.split_whitespace().nth(4).unwrap();
                    let shape = scene
                        .facts
                        .shapes
                        .iter()
                        .find(|s| s.kind.word() == kind)
                        .unwrap();
                    assert_eq!(a_text, shape.color.word());
                }
            }
        }
    }

    #[test]
    fn unknown_family_is_config_error() {
        assert!(matches!(TaskFamily::parse("algebra"), Err(Error::Config(_))));
    }
}

//! Scene and multiple-choice QA ingestion: schema parsing, normalization,
//! filtering, canonical box ordering, and the synthetic scene grammar.

mod synth;

pub use synth::{synth_grammar_generate, synth_qa_generate, GrammarConfig};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use thiserror::Error;

const COORD_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("unknown label {label:?} at {path}:{line}")]
    UnknownLabel { path: String, line: usize, label: String },
    #[error("winogrande stem lacks a blank marker '_' at {path}:{line}")]
    MissingBlank { path: String, line: usize },
    #[error("gold label out of range at {path}:{line}: {msg}")]
    GoldOutOfRange { path: String, line: usize, msg: String },
    #[error("empty label vocabulary at {path}")]
    EmptyVocab { path: String },
}

/// Category vocabulary; index `C` is the generation-terminating class and is
/// not a real category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    names: Vec<String>,
    lookup: BTreeMap<String, usize>,
}

impl LabelVocab {
    pub fn new(names: Vec<String>) -> Self {
        let mut lookup = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            let prev = lookup.insert(n.clone(), i);
            assert!(prev.is_none(), "duplicate label name {n}");
        }
        LabelVocab { names, lookup }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let names: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if names.is_empty() {
            return Err(DataError::EmptyVocab { path: path.display().to_string() });
        }
        Ok(LabelVocab::new(names))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Number of real categories.
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    /// The extra end-of-generation class index (= C).
    pub fn end_index(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }
}

/// One object: category plus normalized geometry. `x`, `y` is the top-left
/// corner; all four fields are canvas fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl LabeledBox {
    /// Bottom edge in image coordinates (y grows downward).
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.x) || !(0.0..=1.0).contains(&self.y) {
            return Err(format!("corner out of range: x={} y={}", self.x, self.y));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("non-positive extent: w={} h={}", self.w, self.h));
        }
        if self.x + self.w > 1.0 + COORD_EPS || self.y + self.h > 1.0 + COORD_EPS {
            return Err(format!(
                "box exceeds canvas: x+w={} y+h={}",
                self.x + self.w,
                self.y + self.h
            ));
        }
        Ok(())
    }
}

/// A captioned set of labeled boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub caption: String,
    pub boxes: Vec<LabeledBox>,
}

impl Scene {
    /// True iff `boxes` already satisfies the canonical key order.
    pub fn is_canonically_ordered(&self) -> bool {
        self.boxes.windows(2).all(|w| order_key(&w[0]) <= order_key(&w[1]))
    }
}

/// Question style after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaStyle {
    Csqa,
    Winogrande,
}

impl fmt::Display for QaStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QaStyle::Csqa => write!(f, "csqa"),
            QaStyle::Winogrande => write!(f, "winogrande"),
        }
    }
}

/// A question stem with candidate answers; `gold` is absent on unlabeled
/// test splits. Winogrande stems carry exactly one `_` blank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQuestion {
    pub id: String,
    pub stem: String,
    pub choices: Vec<String>,
    pub gold: Option<usize>,
    pub style: QaStyle,
}

/// Outcome of preprocessing one scene.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Kept(Scene),
    /// Scene dropped: too many surviving boxes, or none at all.
    Rejected { id: String, reason: RejectReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    TooManyObjects,
    NoSurvivingObjects,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::TooManyObjects => write!(f, "too many objects"),
            RejectReason::NoSurvivingObjects => write!(f, "no surviving objects"),
        }
    }
}

#[derive(Deserialize)]
struct RawSceneRecord {
    id: String,
    caption: String,
    width: f64,
    height: f64,
    objects: Vec<RawObject>,
}

#[derive(Deserialize)]
struct RawObject {
    label: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

/// Parses a JSON-Lines scene file, normalizing pixel coordinates to [0,1] by
/// the record's canvas size. One record per (image, caption) pair.
pub fn load_layout_dataset(path: &Path, vocab: &LabelVocab) -> Result<Vec<Scene>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let pstr = path.display().to_string();
    let mut scenes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSceneRecord =
            serde_json::from_str(line).map_err(|e| DataError::Malformed {
                path: pstr.clone(),
                line: line_num,
                msg: e.to_string(),
            })?;
        if raw.width <= 0.0 || raw.height <= 0.0 {
            return Err(DataError::Malformed {
                path: pstr.clone(),
                line: line_num,
                msg: format!("non-positive canvas {}x{}", raw.width, raw.height),
            });
        }
        let mut boxes = Vec::with_capacity(raw.objects.len());
        for obj in &raw.objects {
            let label = vocab.index_of(&obj.label).ok_or_else(|| DataError::UnknownLabel {
                path: pstr.clone(),
                line: line_num,
                label: obj.label.clone(),
            })?;
            let mut b = LabeledBox {
                label,
                x: obj.x / raw.width,
                y: obj.y / raw.height,
                w: obj.w / raw.width,
                h: obj.h / raw.height,
            };
            // Clamp boxes that poke past the canvas edge by more than eps.
            b.x = b.x.clamp(0.0, 1.0);
            b.y = b.y.clamp(0.0, 1.0);
            if b.x + b.w > 1.0 + COORD_EPS {
                b.w = 1.0 - b.x;
            }
            if b.y + b.h > 1.0 + COORD_EPS {
                b.h = 1.0 - b.y;
            }
            b.validate().map_err(|msg| DataError::Malformed {
                path: pstr.clone(),
                line: line_num,
                msg,
            })?;
            boxes.push(b);
        }
        scenes.push(Scene { id: raw.id, caption: raw.caption, boxes });
    }
    Ok(scenes)
}

/// Writes scenes back out as normalized JSON Lines (width = height = 1).
pub fn save_scenes(scenes: &[Scene], vocab: &LabelVocab, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for s in scenes {
        let objects: Vec<serde_json::Value> = s
            .boxes
            .iter()
            .map(|b| {
                serde_json::json!({
                    "label": vocab.name(b.label),
                    "x": b.x, "y": b.y, "w": b.w, "h": b.h,
                })
            })
            .collect();
        let rec = serde_json::json!({
            "id": s.id, "caption": s.caption,
            "width": 1, "height": 1, "objects": objects,
        });
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Drops boxes below the area threshold, then rejects the scene outright if
/// nothing survives or more than `max_objects` do. Rejection is a normal
/// outcome, not an error.
pub fn filter_and_normalize(
    scene: Scene,
    min_area_frac: f64,
    max_objects: usize,
) -> FilterOutcome {
    let id = scene.id.clone();
    let surviving: Vec<LabeledBox> = scene
        .boxes
        .iter()
        .copied()
        .filter(|b| b.area() >= min_area_frac)
        .collect();
    if surviving.is_empty() {
        return FilterOutcome::Rejected { id, reason: RejectReason::NoSurvivingObjects };
    }
    if surviving.len() > max_objects {
        return FilterOutcome::Rejected { id, reason: RejectReason::TooManyObjects };
    }
    FilterOutcome::Kept(Scene { boxes: surviving, ..scene })
}

fn order_key(b: &LabeledBox) -> (ordered_f64, ordered_f64, usize) {
    // Bottom edge lowest on screen first: larger y+h sorts earlier, so the
    // key negates it.
    (ordered_f64(-(b.y + b.h)), ordered_f64(b.x), b.label)
}

/// Total-order wrapper; box coordinates are validated finite on load.
#[derive(PartialEq, PartialOrd)]
#[allow(non_camel_case_types)]
struct ordered_f64(f64);

impl Eq for ordered_f64 {}
#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for ordered_f64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("non-finite coordinate")
    }
}

/// Sorts boxes bottom-to-top (larger y+h first), then left-to-right, then by
/// label index. Stable on fully equal keys.
pub fn canonical_order(boxes: &[LabeledBox]) -> Vec<LabeledBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(|a, b| order_key(a).cmp(&order_key(b)));
    sorted
}

#[derive(Deserialize)]
struct RawCsqaRecord {
    id: Option<String>,
    question: RawCsqaQuestion,
    #[serde(rename = "answerKey")]
    answer_key: Option<String>,
}

#[derive(Deserialize)]
struct RawCsqaQuestion {
    stem: String,
    choices: Vec<RawCsqaChoice>,
}

#[derive(Deserialize)]
struct RawCsqaChoice {
    label: String,
    text: String,
}

#[derive(Deserialize)]
struct RawWinograndeRecord {
    #[serde(rename = "qID")]
    qid: Option<String>,
    sentence: String,
    option1: String,
    option2: String,
    answer: Option<String>,
}

/// Loads CSQA or WinoGrande JSON Lines into normalized questions.
pub fn load_mcqa(path: &Path, style: QaStyle) -> Result<Vec<MCQuestion>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let pstr = path.display().to_string();
    let mut questions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let q = match style {
            QaStyle::Csqa => parse_csqa_line(line, &pstr, line_num)?,
            QaStyle::Winogrande => parse_winogrande_line(line, &pstr, line_num)?,
        };
        questions.push(q);
    }
    Ok(questions)
}

fn parse_csqa_line(line: &str, path: &str, line_num: usize) -> Result<MCQuestion, DataError> {
    let raw: RawCsqaRecord = serde_json::from_str(line).map_err(|e| DataError::Malformed {
        path: path.to_string(),
        line: line_num,
        msg: e.to_string(),
    })?;
    if raw.question.choices.len() < 2 {
        return Err(DataError::Malformed {
            path: path.to_string(),
            line: line_num,
            msg: format!("need at least 2 choices, got {}", raw.question.choices.len()),
        });
    }
    let gold = match raw.answer_key {
        None => None,
        Some(key) => {
            let idx = raw
                .question
                .choices
                .iter()
                .position(|c| c.label == key)
                .ok_or_else(|| DataError::GoldOutOfRange {
                    path: path.to_string(),
                    line: line_num,
                    msg: format!("answerKey {key:?} matches no choice label"),
                })?;
            Some(idx)
        }
    };
    Ok(MCQuestion {
        id: raw.id.unwrap_or_else(|| format!("line-{line_num}")),
        stem: raw.question.stem,
        choices: raw.question.choices.into_iter().map(|c| c.text).collect(),
        gold,
        style: QaStyle::Csqa,
    })
}

fn parse_winogrande_line(
    line: &str,
    path: &str,
    line_num: usize,
) -> Result<MCQuestion, DataError> {
    let raw: RawWinograndeRecord =
        serde_json::from_str(line).map_err(|e| DataError::Malformed {
            path: path.to_string(),
            line: line_num,
            msg: e.to_string(),
        })?;
    if raw.sentence.matches('_').count() != 1 {
        return Err(DataError::MissingBlank { path: path.to_string(), line: line_num });
    }
    let gold = match raw.answer.as_deref() {
        None => None,
        Some("1") => Some(0),
        Some("2") => Some(1),
        Some(other) => {
            return Err(DataError::GoldOutOfRange {
                path: path.to_string(),
                line: line_num,
                msg: format!("answer must be \"1\" or \"2\", got {other:?}"),
            })
        }
    };
    Ok(MCQuestion {
        id: raw.qid.unwrap_or_else(|| format!("line-{line_num}")),
        stem: raw.sentence,
        choices: vec![raw.option1, raw.option2],
        gold,
        style: QaStyle::Winogrande,
    })
}

/// Writes questions as JSON Lines in the CSQA-compatible schema for csqa
/// style or the winogrande schema otherwise.
pub fn save_mcqa(questions: &[MCQuestion], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for q in questions {
        let rec = match q.style {
            QaStyle::Csqa => {
                let letters = ["A", "B", "C", "D", "E", "F", "G", "H"];
                let choices: Vec<serde_json::Value> = q
                    .choices
                    .iter()
                    .enumerate()
                    .map(|(i, c)| serde_json::json!({ "label": letters[i], "text": c }))
                    .collect();
                let mut rec = serde_json::json!({
                    "id": q.id,
                    "question": { "stem": q.stem, "choices": choices },
                });
                if let Some(g) = q.gold {
                    rec["answerKey"] = serde_json::json!(letters[g]);
                }
                rec
            }
            QaStyle::Winogrande => {
                let mut rec = serde_json::json!({
                    "qID": q.id,
                    "sentence": q.stem,
                    "option1": q.choices[0],
                    "option2": q.choices[1],
                });
                if let Some(g) = q.gold {
                    rec["answer"] = serde_json::json!(if g == 0 { "1" } else { "2" });
                }
                rec
            }
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn vocab() -> LabelVocab {
        LabelVocab::new(vec!["person".into(), "dog".into()])
    }

    #[test]
    fn load_normalizes_pixel_coordinates_by_canvas() {
        let f = write_temp(
            r#"{"id":"a","caption":"x","width":200,"height":400,"objects":[{"label":"person","x":50,"y":50,"w":100,"h":200}]}"#,
        );
        let scenes = load_layout_dataset(f.path(), &vocab()).unwrap();
        assert_eq!(scenes.len(), 1);
        let b = scenes[0].boxes[0];
        assert_eq!(b.label, 0);
        assert_eq!((b.x, b.y, b.w, b.h), (0.25, 0.125, 0.5, 0.5));
    }

    #[test]
    fn empty_file_yields_empty_list() {
        let f = write_temp("");
        let scenes = load_layout_dataset(f.path(), &vocab()).unwrap();
        assert!(scenes.is_empty());
    }

    #[test]
    fn unknown_label_error_names_the_label() {
        let f = write_temp(
            r#"{"id":"a","caption":"x","width":1,"height":1,"objects":[{"label":"labelname","x":0,"y":0,"w":0.5,"h":0.5}]}"#,
        );
        let err = load_layout_dataset(f.path(), &vocab()).unwrap_err();
        assert!(err.to_string().contains("labelname"), "{err}");
    }

    #[test]
    fn malformed_record_error_names_the_line() {
        let good = r#"{"id":"a","caption":"x","width":1,"height":1,"objects":[]}"#;
        let f = write_temp(&format!("{good}\nnot json\n"));
        let err = load_layout_dataset(f.path(), &vocab()).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn filter_drops_small_boxes() {
        let scene = Scene {
            id: "s".into(),
            caption: "c".into(),
            boxes: vec![
                LabeledBox { label: 0, x: 0.0, y: 0.0, w: 1.0, h: 0.5 },
                LabeledBox { label: 1, x: 0.2, y: 0.2, w: 0.05, h: 0.02 },
            ],
        };
        match filter_and_normalize(scene, 0.005, 20) {
            FilterOutcome::Kept(s) => assert_eq!(s.boxes.len(), 1),
            other => panic!("expected kept, got {other:?}"),
        }
    }

    #[test]
    fn filter_rejects_crowded_scene() {
        let boxes: Vec<LabeledBox> = (0..25)
            .map(|i| LabeledBox { label: 0, x: 0.01 * i as f64, y: 0.0, w: 0.3, h: 0.3 })
            .collect();
        let scene = Scene { id: "s".into(), caption: "c".into(), boxes };
        match filter_and_normalize(scene, 0.005, 20) {
            FilterOutcome::Rejected { reason, .. } => {
                assert_eq!(reason, RejectReason::TooManyObjects)
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn filter_rejects_scene_whose_only_box_is_small() {
        let scene = Scene {
            id: "s".into(),
            caption: "c".into(),
            boxes: vec![LabeledBox { label: 0, x: 0.0, y: 0.0, w: 0.01, h: 0.01 }],
        };
        match filter_and_normalize(scene, 0.02, 20) {
            FilterOutcome::Rejected { reason, .. } => {
                assert_eq!(reason, RejectReason::NoSurvivingObjects)
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn canonical_order_puts_bottom_most_first() {
        let a = LabeledBox { label: 0, x: 0.1, y: 0.1, w: 0.1, h: 0.2 }; // bottom 0.3
        let b = LabeledBox { label: 1, x: 0.5, y: 0.5, w: 0.1, h: 0.4 }; // bottom 0.9
        let ordered = canonical_order(&[a, b]);
        assert_eq!(ordered[0], b);
        assert_eq!(ordered[1], a);
    }

    #[test]
    fn canonical_order_breaks_ties_left_to_right() {
        let right = LabeledBox { label: 0, x: 0.7, y: 0.1, w: 0.1, h: 0.2 };
        let left = LabeledBox { label: 1, x: 0.2, y: 0.1, w: 0.1, h: 0.2 };
        let ordered = canonical_order(&[right, left]);
        assert_eq!(ordered[0], left);
        assert_eq!(ordered[1], right);
    }

    #[test]
    fn canonical_order_single_box_is_identity() {
        let a = LabeledBox { label: 0, x: 0.1, y: 0.1, w: 0.2, h: 0.2 };
        assert_eq!(canonical_order(&[a]), vec![a]);
    }

    #[test]
    fn csqa_answer_key_maps_to_index() {
        let f = write_temp(
            r#"{"id":"q1","question":{"stem":"Where?","choices":[{"label":"A","text":"a"},{"label":"B","text":"b"},{"label":"C","text":"c"},{"label":"D","text":"d"},{"label":"E","text":"e"}]},"answerKey":"C"}"#,
        );
        let qs = load_mcqa(f.path(), QaStyle::Csqa).unwrap();
        assert_eq!(qs[0].gold, Some(2));
        assert_eq!(qs[0].choices.len(), 5);
    }

    #[test]
    fn csqa_without_answer_key_has_no_gold() {
        let f = write_temp(
            r#"{"id":"q1","question":{"stem":"Where?","choices":[{"label":"A","text":"a"},{"label":"B","text":"b"}]}}"#,
        );
        let qs = load_mcqa(f.path(), QaStyle::Csqa).unwrap();
        assert_eq!(qs[0].gold, None);
    }

    #[test]
    fn winogrande_answer_two_maps_to_index_one() {
        let f = write_temp(
            r#"{"sentence":"the _ was too big","option1":"trophy","option2":"suitcase","answer":"2"}"#,
        );
        let qs = load_mcqa(f.path(), QaStyle::Winogrande).unwrap();
        assert_eq!(qs[0].gold, Some(1));
        assert_eq!(qs[0].style, QaStyle::Winogrande);
    }

    #[test]
    fn winogrande_without_blank_is_rejected() {
        let f = write_temp(
            r#"{"sentence":"no blank here","option1":"a","option2":"b","answer":"1"}"#,
        );
        let err = load_mcqa(f.path(), QaStyle::Winogrande).unwrap_err();
        assert!(matches!(err, DataError::MissingBlank { .. }));
    }

    #[test]
    fn scene_roundtrip_through_save_load() {
        let v = vocab();
        let scenes = vec![Scene {
            id: "s0".into(),
            caption: "a person and a dog".into(),
            boxes: vec![
                LabeledBox { label: 0, x: 0.1, y: 0.2, w: 0.3, h: 0.4 },
                LabeledBox { label: 1, x: 0.5, y: 0.5, w: 0.25, h: 0.25 },
            ],
        }];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_scenes(&scenes, &v, f.path()).unwrap();
        let back = load_layout_dataset(f.path(), &v).unwrap();
        assert_eq!(back, scenes);
    }

    fn arb_box() -> impl Strategy<Value = LabeledBox> {
        (0usize..5, 0.0..0.7f64, 0.0..0.7f64, 0.01..0.3f64, 0.01..0.3f64).prop_map(
            |(label, x, y, w, h)| LabeledBox { label, x, y, w, h },
        )
    }

    proptest! {
        #[test]
        fn canonical_order_is_idempotent(boxes in proptest::collection::vec(arb_box(), 0..12)) {
            let once = canonical_order(&boxes);
            let twice = canonical_order(&once);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn canonical_order_is_a_permutation(boxes in proptest::collection::vec(arb_box(), 0..12)) {
            let ordered = canonical_order(&boxes);
            prop_assert_eq!(ordered.len(), boxes.len());
            let mut a: Vec<String> = boxes.iter().map(|b| format!("{b:?}")).collect();
            let mut b: Vec<String> = ordered.iter().map(|b| format!("{b:?}")).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn filter_never_increases_count_or_alters_survivors(
            boxes in proptest::collection::vec(arb_box(), 1..12)
        ) {
            let scene = Scene { id: "p".into(), caption: "c".into(), boxes: boxes.clone() };
            if let FilterOutcome::Kept(s) = filter_and_normalize(scene, 0.02, 20) {
                prop_assert!(s.boxes.len() <= boxes.len());
                for b in &s.boxes {
                    prop_assert!(boxes.contains(b));
                }
            }
        }
    }
}

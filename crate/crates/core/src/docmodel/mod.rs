//! Canonical in-memory form of a visually-rich document: words with
//! normalized layout boxes, line structure, labeled entity spans and
//! key-value links, plus the page raster used by the image channel.

pub mod bio;
mod raster;
mod schema;

pub use raster::Raster;
pub use schema::{count_labels, parse_dataset, write_dataset, LabelCounts};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The eight form-understanding languages handled end to end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    En,
    Zh,
    Ja,
    Es,
    Fr,
    It,
    De,
    Pt,
}

impl Lang {
    pub const ALL: [Lang; 8] = [
        Lang::En,
        Lang::Zh,
        Lang::Ja,
        Lang::Es,
        Lang::Fr,
        Lang::It,
        Lang::De,
        Lang::Pt,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Lang::En => "en",
            Lang::Zh => "zh",
            Lang::Ja => "ja",
            Lang::Es => "es",
            Lang::Fr => "fr",
            Lang::It => "it",
            Lang::De => "de",
            Lang::Pt => "pt",
        }
    }

    pub fn from_code(code: &str) -> Option<Lang> {
        Lang::ALL.iter().copied().find(|l| l.code() == code)
    }

    /// Column heading used in result tables. English is the FUNSD column.
    pub fn column_name(self) -> &'static str {
        match self {
            Lang::En => "FUNSD-EN",
            Lang::Zh => "ZH",
            Lang::Ja => "JA",
            Lang::Es => "ES",
            Lang::Fr => "FR",
            Lang::It => "IT",
            Lang::De => "DE",
            Lang::Pt => "PT",
        }
    }
}

#[derive(Debug, Error)]
pub enum DocError {
    #[error("box {0:?} has inverted corners")]
    InvertedBox([i64; 4]),
    #[error("box {0:?} outside the normalized range 0..=1000")]
    OutOfRange([i64; 4]),
    #[error("page dimensions must be positive")]
    EmptyPage,
    #[error("unknown language code {0:?}")]
    UnknownLang(String),
    #[error("unknown entity label {0:?}")]
    UnknownLabel(String),
    #[error("duplicate entity id {0}")]
    DuplicateEntityId(u32),
    #[error("link ({head}, {tail}) references a missing entity")]
    DanglingLink { head: u32, tail: u32 },
    #[error("entity {id} links to itself")]
    SelfLink { id: u32 },
    #[error("word {word} belongs to no entity; the file format attaches every word to one")]
    UncoveredWord { word: usize },
    #[error("entity {id} covers no words")]
    EmptyEntity { id: u32 },
    #[error("entity {id} word range {first}..={last} is invalid for {words} words")]
    BadEntityRange {
        id: u32,
        first: usize,
        last: usize,
        words: usize,
    },
    #[error("entities {a} and {b} overlap")]
    OverlappingEntities { a: u32, b: u32 },
    #[error("documents in one file must share a language")]
    MixedLanguages,
    #[error("document {id}: {source}")]
    InDocument {
        id: String,
        #[source]
        source: Box<DocError>,
    },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad raster ({why})")]
    BadRaster { path: String, why: String },
}

impl DocError {
    pub(crate) fn in_doc(self, id: &str) -> DocError {
        DocError::InDocument {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}

/// Axis-aligned box in normalized page units, each coordinate in 0..=1000
/// with `x0 <= x1` and `y0 <= y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "[i64; 4]", try_from = "[i64; 4]")]
pub struct NormBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl NormBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<NormBox, DocError> {
        if x0 > x1 || y0 > y1 {
            return Err(DocError::InvertedBox([x0, y0, x1, y1]));
        }
        let ok = |v: i64| (0..=1000).contains(&v);
        if !(ok(x0) && ok(y0) && ok(x1) && ok(y1)) {
            return Err(DocError::OutOfRange([x0, y0, x1, y1]));
        }
        Ok(NormBox {
            x0: x0 as i32,
            y0: y0 as i32,
            x1: x1 as i32,
            y1: y1 as i32,
        })
    }

    pub fn width(self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(self) -> i32 {
        self.y1 - self.y0
    }

    pub fn center_x(self) -> f64 {
        (self.x0 + self.x1) as f64 / 2.0
    }

    pub fn center_y(self) -> f64 {
        (self.y0 + self.y1) as f64 / 2.0
    }

    pub fn union(self, other: NormBox) -> NormBox {
        NormBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains(self, other: NormBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

impl From<NormBox> for [i64; 4] {
    fn from(b: NormBox) -> [i64; 4] {
        [b.x0 as i64, b.y0 as i64, b.x1 as i64, b.y1 as i64]
    }
}

impl TryFrom<[i64; 4]> for NormBox {
    type Error = DocError;
    fn try_from(v: [i64; 4]) -> Result<NormBox, DocError> {
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Map a page-pixel box onto the 0..=1000 grid: scale by 1000/page size,
/// floor, then clamp. Inverted corners are rejected before scaling.
pub fn normalize_box(
    bbox: [i64; 4],
    page_w: u32,
    page_h: u32,
) -> Result<NormBox, DocError> {
    if page_w == 0 || page_h == 0 {
        return Err(DocError::EmptyPage);
    }
    let [x0, y0, x1, y1] = bbox;
    if x0 > x1 || y0 > y1 {
        return Err(DocError::InvertedBox(bbox));
    }
    let scale = |v: i64, dim: u32| (v * 1000).div_euclid(dim as i64).clamp(0, 1000) as i32;
    Ok(NormBox {
        x0: scale(x0, page_w),
        y0: scale(y0, page_h),
        x1: scale(x1, page_w),
        y1: scale(y1, page_h),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub bbox: NormBox,
    /// Zero-based visual line index, top to bottom.
    pub line: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityLabel {
    Header,
    Question,
    Answer,
    Other,
}

impl EntityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::Header => "header",
            EntityLabel::Question => "question",
            EntityLabel::Answer => "answer",
            EntityLabel::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<EntityLabel, DocError> {
        match s.to_ascii_lowercase().as_str() {
            "header" => Ok(EntityLabel::Header),
            "question" => Ok(EntityLabel::Question),
            "answer" => Ok(EntityLabel::Answer),
            "other" => Ok(EntityLabel::Other),
            other => Err(DocError::UnknownLabel(other.to_string())),
        }
    }
}

/// Contiguous inclusive run of words forming one semantic entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub id: u32,
    pub first_word: usize,
    pub last_word: usize,
    pub label: EntityLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationLabel {
    KeyValue,
}

/// Directed link from a key entity to its value entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationLink {
    pub head: u32,
    pub tail: u32,
    pub label: RelationLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub lang: Lang,
    pub page_w: u32,
    pub page_h: u32,
    pub words: Vec<Word>,
    pub raster: Option<Raster>,
    pub entities: Vec<EntitySpan>,
    pub links: Vec<RelationLink>,
}

impl Document {
    pub fn entity(&self, id: u32) -> Option<&EntitySpan> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn entity_words(&self, e: &EntitySpan) -> &[Word] {
        &self.words[e.first_word..=e.last_word]
    }

    pub fn entity_box(&self, e: &EntitySpan) -> NormBox {
        self.entity_words(e)
            .iter()
            .map(|w| w.bbox)
            .reduce(NormBox::union)
            .expect("entity covers at least one word")
    }

    pub fn entity_text(&self, e: &EntitySpan) -> String {
        self.entity_words(e)
            .iter()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Structural checks: entity ranges in bounds and non-overlapping,
    /// unique entity ids, link endpoints resolvable.
    pub fn validate(&self) -> Result<(), DocError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut covered: Vec<(usize, usize, u32)> = Vec::new();
        for e in &self.entities {
            if !seen.insert(e.id) {
                return Err(DocError::DuplicateEntityId(e.id).in_doc(&self.id));
            }
            if e.first_word > e.last_word || e.last_word >= self.words.len() {
                return Err(DocError::BadEntityRange {
                    id: e.id,
                    first: e.first_word,
                    last: e.last_word,
                    words: self.words.len(),
                }
                .in_doc(&self.id));
            }
            for &(f, l, id) in &covered {
                if e.first_word <= l && f <= e.last_word {
                    return Err(DocError::OverlappingEntities { a: id, b: e.id }.in_doc(&self.id));
                }
            }
            covered.push((e.first_word, e.last_word, e.id));
        }
        for link in &self.links {
            if !seen.contains(&link.head) || !seen.contains(&link.tail) {
                return Err(DocError::DanglingLink {
                    head: link.head,
                    tail: link.tail,
                }
                .in_doc(&self.id));
            }
        }
        Ok(())
    }
}

/// Assign line indices by clustering vertical centers: scanning words from
/// top to bottom, a word joins the current line while its center is within
/// half the median word height of the previous one.
pub fn derive_lines(boxes: &[NormBox]) -> Vec<u32> {
    if boxes.is_empty() {
        return Vec::new();
    }
    let mut heights: Vec<i32> = boxes.iter().map(|b| b.height()).collect();
    heights.sort_unstable();
    let n = heights.len();
    let median = if n % 2 == 1 {
        heights[n / 2] as f64
    } else {
        (heights[n / 2 - 1] + heights[n / 2]) as f64 / 2.0
    };
    let threshold = median / 2.0;

    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[a]
            .center_y()
            .partial_cmp(&boxes[b].center_y())
            .unwrap()
            .then(boxes[a].x0.cmp(&boxes[b].x0))
            .then(a.cmp(&b))
    });

    let mut lines = vec![0u32; boxes.len()];
    let mut current = 0u32;
    let mut prev_cy = boxes[order[0]].center_y();
    for &i in &order {
        let cy = boxes[i].center_y();
        if cy - prev_cy >= threshold && threshold > 0.0 {
            current += 1;
        }
        lines[i] = current;
        prev_cy = cy;
    }
    lines
}

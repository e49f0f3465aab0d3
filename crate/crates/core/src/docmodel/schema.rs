//! Dataset files: one JSON per language and split, page rasters as PGM
//! siblings. Canonical files carry `"coords": "norm1000"`; files without
//! the marker (the published form-understanding release) hold pixel boxes
//! that are normalized against the image dimensions on load.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    derive_lines, normalize_box, DocError, Document, EntityLabel, EntitySpan, Lang, NormBox,
    Raster, RelationLabel, RelationLink, Word,
};

const COORDS_NORM: &str = "norm1000";

#[derive(Serialize, Deserialize)]
struct FileRoot {
    lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coords: Option<String>,
    documents: Vec<DocRecord>,
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    id: String,
    img: ImgRecord,
    document: Vec<EntityRecord>,
}

#[derive(Serialize, Deserialize)]
struct ImgRecord {
    fname: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct EntityRecord {
    id: u32,
    text: String,
    #[serde(rename = "box")]
    bbox: [i64; 4],
    label: String,
    words: Vec<WordRecord>,
    #[serde(default)]
    linking: Vec<[u32; 2]>,
}

#[derive(Serialize, Deserialize)]
struct WordRecord {
    text: String,
    #[serde(rename = "box")]
    bbox: [i64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    line: Option<u32>,
}

pub fn parse_dataset(path: &Path) -> Result<Vec<Document>, DocError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DocError::Io {
        path: display.clone(),
        source,
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let root: FileRoot =
        serde_path_to_error::deserialize(&mut de).map_err(|e| DocError::Parse {
            path: display.clone(),
            detail: e.to_string(),
        })?;
    let lang = Lang::from_code(&root.lang).ok_or(DocError::UnknownLang(root.lang))?;
    let normalized = match root.coords.as_deref() {
        None => false,
        Some(COORDS_NORM) => true,
        Some(other) => {
            return Err(DocError::Parse {
                path: display,
                detail: format!("unknown coords marker {other:?}"),
            })
        }
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    root.documents
        .into_iter()
        .map(|rec| build_document(rec, lang, normalized, dir))
        .collect()
}

fn build_document(
    rec: DocRecord,
    lang: Lang,
    normalized: bool,
    dir: &Path,
) -> Result<Document, DocError> {
    let id = rec.id;
    let (page_w, page_h) = (rec.img.width, rec.img.height);
    if page_w == 0 || page_h == 0 {
        return Err(DocError::EmptyPage.in_doc(&id));
    }
    let to_box = |raw: [i64; 4]| {
        if normalized {
            NormBox::new(raw[0], raw[1], raw[2], raw[3])
        } else {
            normalize_box(raw, page_w, page_h)
        }
    };

    let mut words: Vec<Word> = Vec::new();
    let mut given_lines: Vec<Option<u32>> = Vec::new();
    let mut entities = Vec::new();
    let mut raw_links: BTreeSet<(u32, u32)> = BTreeSet::new();
    // Empty entities are dropped; links touching them go too, silently.
    let mut dropped_ids: BTreeSet<u32> = BTreeSet::new();
    for ent in rec.document {
        let label = EntityLabel::parse(&ent.label).map_err(|e| e.in_doc(&id))?;
        let first = words.len();
        for w in ent.words {
            if w.text.trim().is_empty() {
                continue;
            }
            let bbox = to_box(w.bbox).map_err(|e| e.in_doc(&id))?;
            given_lines.push(w.line);
            words.push(Word {
                text: w.text,
                bbox,
                line: 0,
            });
        }
        if words.len() == first {
            dropped_ids.insert(ent.id);
            continue;
        }
        entities.push(EntitySpan {
            id: ent.id,
            first_word: first,
            last_word: words.len() - 1,
            label,
        });
        for [head, tail] in ent.linking {
            if head == tail {
                return Err(DocError::SelfLink { id: head }.in_doc(&id));
            }
            raw_links.insert((head, tail));
        }
    }

    if given_lines.iter().any(Option::is_none) {
        let boxes: Vec<NormBox> = words.iter().map(|w| w.bbox).collect();
        for (w, line) in words.iter_mut().zip(derive_lines(&boxes)) {
            w.line = line;
        }
    } else {
        for (w, line) in words.iter_mut().zip(given_lines) {
            w.line = line.unwrap();
        }
    }

    let links = raw_links
        .into_iter()
        .filter(|&(h, t)| !dropped_ids.contains(&h) && !dropped_ids.contains(&t))
        .map(|(head, tail)| RelationLink {
            head,
            tail,
            label: RelationLabel::KeyValue,
        })
        .collect();

    let raster_path = dir.join(&rec.img.fname);
    let raster = if !rec.img.fname.is_empty() && raster_path.is_file() {
        Some(Raster::read_pgm(&raster_path)?)
    } else {
        None
    };

    let doc = Document {
        id,
        lang,
        page_w,
        page_h,
        words,
        raster,
        entities,
        links,
    };
    doc.validate()?;
    Ok(doc)
}

/// Write `docs` as one canonical JSON file plus a PGM per rastered page.
/// Entities are emitted in word order and must cover every word, the way
/// parsed documents always do.
pub fn write_dataset(docs: &[Document], path: &Path) -> Result<(), DocError> {
    let display = path.display().to_string();
    let lang = match docs.first() {
        Some(d) => d.lang,
        None => {
            return Err(DocError::Parse {
                path: display,
                detail: "no documents to write".into(),
            })
        }
    };
    if docs.iter().any(|d| d.lang != lang) {
        return Err(DocError::MixedLanguages);
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut records = Vec::with_capacity(docs.len());
    for doc in docs {
        doc.validate()?;
        let mut ents: Vec<&EntitySpan> = doc.entities.iter().collect();
        ents.sort_by_key(|e| e.first_word);
        let mut next = 0;
        for e in &ents {
            if e.first_word != next {
                return Err(DocError::UncoveredWord { word: next }.in_doc(&doc.id));
            }
            next = e.last_word + 1;
        }
        if next != doc.words.len() {
            return Err(DocError::UncoveredWord { word: next }.in_doc(&doc.id));
        }

        let mut by_head: BTreeMap<u32, Vec<[u32; 2]>> = BTreeMap::new();
        for l in &doc.links {
            by_head.entry(l.head).or_default().push([l.head, l.tail]);
        }
        for group in by_head.values_mut() {
            group.sort_unstable();
            group.dedup();
        }

        let fname = match &doc.raster {
            Some(r) => {
                let fname = format!("{}.pgm", doc.id);
                r.write_pgm(&dir.join(&fname))?;
                fname
            }
            None => String::new(),
        };

        records.push(DocRecord {
            id: doc.id.clone(),
            img: ImgRecord {
                fname,
                width: doc.page_w,
                height: doc.page_h,
            },
            document: ents
                .iter()
                .map(|e| EntityRecord {
                    id: e.id,
                    text: doc.entity_text(e),
                    bbox: doc.entity_box(e).into(),
                    label: e.label.as_str().to_string(),
                    words: doc
                        .entity_words(e)
                        .iter()
                        .map(|w| WordRecord {
                            text: w.text.clone(),
                            bbox: w.bbox.into(),
                            line: Some(w.line),
                        })
                        .collect(),
                    linking: by_head.remove(&e.id).unwrap_or_default(),
                })
                .collect(),
        });
    }

    let root = FileRoot {
        lang: lang.code().to_string(),
        coords: Some(COORDS_NORM.to_string()),
        documents: records,
    };
    let mut body = serde_json::to_string_pretty(&root).expect("dataset records serialize");
    body.push('\n');
    std::fs::write(path, body).map_err(|source| DocError::Io {
        path: display,
        source,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub header: usize,
    pub question: usize,
    pub answer: usize,
    pub other: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.header + self.question + self.answer + self.other
    }
}

pub fn count_labels(docs: &[Document]) -> LabelCounts {
    let mut c = LabelCounts::default();
    for e in docs.iter().flat_map(|d| &d.entities) {
        match e.label {
            EntityLabel::Header => c.header += 1,
            EntityLabel::Question => c.question += 1,
            EntityLabel::Answer => c.answer += 1,
            EntityLabel::Other => c.other += 1,
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(json: &str) -> Result<Vec<Document>, DocError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        std::fs::write(&path, json).unwrap();
        parse_dataset(&path)
    }

    #[test]
    fn minimal_fixture_parses() {
        let docs = parse_str(
            r#"{"lang": "en", "coords": "norm1000", "documents": [
                {"id": "d0", "img": {"fname": "", "width": 800, "height": 600},
                 "document": [
                    {"id": 0, "text": "Name:", "box": [10, 10, 80, 30],
                     "label": "question",
                     "words": [{"text": "Name:", "box": [10, 10, 80, 30]}],
                     "linking": []}
                 ]}
            ]}"#,
        )
        .unwrap();
        assert_eq!(docs.len(), 1);
        let d = &docs[0];
        assert_eq!(d.lang, Lang::En);
        assert_eq!(d.entities.len(), 1);
        assert_eq!(d.entities[0].label, EntityLabel::Question);
        assert!(d.links.is_empty());
        assert_eq!(d.words[0].bbox, NormBox::new(10, 10, 80, 30).unwrap());
    }

    #[test]
    fn linking_pairs_become_directed_links() {
        let docs = parse_str(
            r#"{"lang": "en", "coords": "norm1000", "documents": [
                {"id": "d0", "img": {"fname": "", "width": 800, "height": 600},
                 "document": [
                    {"id": 0, "text": "k", "box": [0, 0, 10, 10], "label": "question",
                     "words": [{"text": "k", "box": [0, 0, 10, 10]}],
                     "linking": [[0, 1]]},
                    {"id": 1, "text": "v", "box": [20, 0, 30, 10], "label": "answer",
                     "words": [{"text": "v", "box": [20, 0, 30, 10]}],
                     "linking": [[0, 1]]}
                 ]}
            ]}"#,
        )
        .unwrap();
        // the pair is listed on both endpoints and still yields one link
        assert_eq!(
            docs[0].links,
            vec![RelationLink {
                head: 0,
                tail: 1,
                label: RelationLabel::KeyValue,
            }]
        );
    }

    #[test]
    fn pixel_files_are_normalized_against_image_dims() {
        let docs = parse_str(
            r#"{"lang": "en", "documents": [
                {"id": "d0", "img": {"fname": "", "width": 1000, "height": 2000},
                 "document": [
                    {"id": 0, "text": "w", "box": [50, 100, 150, 300], "label": "other",
                     "words": [{"text": "w", "box": [50, 100, 150, 300]}],
                     "linking": []}
                 ]}
            ]}"#,
        )
        .unwrap();
        assert_eq!(docs[0].words[0].bbox, NormBox::new(50, 50, 150, 150).unwrap());
    }

    #[test]
    fn bad_label_is_reported_with_document_id() {
        let err = parse_str(
            r#"{"lang": "en", "coords": "norm1000", "documents": [
                {"id": "d7", "img": {"fname": "", "width": 10, "height": 10},
                 "document": [
                    {"id": 0, "text": "w", "box": [0, 0, 5, 5], "label": "footnote",
                     "words": [{"text": "w", "box": [0, 0, 5, 5]}], "linking": []}
                 ]}
            ]}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d7"), "{msg}");
        assert!(err.to_string().contains("footnote") || format!("{err:?}").contains("footnote"));
    }

    #[test]
    fn malformed_json_names_the_field() {
        let err = parse_str(
            r#"{"lang": "en", "documents": [
                {"id": "d0", "img": {"fname": "", "width": 10, "height": 10},
                 "document": [
                    {"id": 0, "text": "w", "box": [0, 0, 5], "label": "other",
                     "words": [{"text": "w", "box": [0, 0, 5, 5]}], "linking": []}
                 ]}
            ]}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("box"), "{msg}");
    }

    #[test]
    fn empty_entities_and_their_links_are_dropped() {
        let docs = parse_str(
            r#"{"lang": "en", "coords": "norm1000", "documents": [
                {"id": "d0", "img": {"fname": "", "width": 10, "height": 10},
                 "document": [
                    {"id": 0, "text": "", "box": [0, 0, 5, 5], "label": "question",
                     "words": [{"text": "  ", "box": [0, 0, 5, 5]}],
                     "linking": [[0, 1]]},
                    {"id": 1, "text": "v", "box": [0, 6, 5, 9], "label": "answer",
                     "words": [{"text": "v", "box": [0, 6, 5, 9]}], "linking": []}
                 ]}
            ]}"#,
        )
        .unwrap();
        assert_eq!(docs[0].entities.len(), 1);
        assert_eq!(docs[0].entities[0].id, 1);
        assert!(docs[0].links.is_empty());
    }

    #[test]
    fn missing_line_field_triggers_line_derivation() {
        let docs = parse_str(
            r#"{"lang": "en", "coords": "norm1000", "documents": [
                {"id": "d0", "img": {"fname": "", "width": 10, "height": 10},
                 "document": [
                    {"id": 0, "text": "a b", "box": [0, 0, 500, 120], "label": "other",
                     "words": [{"text": "a", "box": [0, 0, 100, 20]},
                               {"text": "b", "box": [0, 100, 100, 120]}],
                     "linking": []}
                 ]}
            ]}"#,
        )
        .unwrap();
        assert_eq!(docs[0].words[0].line, 0);
        assert_eq!(docs[0].words[1].line, 1);
    }

    fn sample_doc(id: &str, with_raster: bool) -> Document {
        let word = |text: &str, x: i64, y: i64| Word {
            text: text.to_string(),
            bbox: NormBox::new(x, y, x + 80, y + 20).unwrap(),
            line: (y / 100) as u32,
        };
        let mut raster = Raster::blank(40, 40);
        raster.set(3, 5, 17);
        Document {
            id: id.to_string(),
            lang: Lang::Zh,
            page_w: 400,
            page_h: 400,
            words: vec![
                word("甲", 0, 0),
                word("乙", 100, 0),
                word("丙", 0, 100),
            ],
            raster: with_raster.then_some(raster),
            entities: vec![
                EntitySpan {
                    id: 0,
                    first_word: 0,
                    last_word: 1,
                    label: EntityLabel::Question,
                },
                EntitySpan {
                    id: 1,
                    first_word: 2,
                    last_word: 2,
                    label: EntityLabel::Answer,
                },
            ],
            links: vec![RelationLink {
                head: 0,
                tail: 1,
                label: RelationLabel::KeyValue,
            }],
        }
    }

    #[test]
    fn round_trip_preserves_documents_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zh.train.json");
        let docs = vec![sample_doc("p0", true), sample_doc("p1", false)];
        write_dataset(&docs, &path).unwrap();
        let parsed = parse_dataset(&path).unwrap();
        assert_eq!(parsed, docs);

        let first = std::fs::read(&path).unwrap();
        let pgm_first = std::fs::read(dir.path().join("p0.pgm")).unwrap();
        write_dataset(&parsed, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(std::fs::read(dir.path().join("p0.pgm")).unwrap(), pgm_first);
    }

    #[test]
    fn write_rejects_words_outside_any_entity() {
        let dir = tempfile::tempdir().unwrap();
        let mut doc = sample_doc("p0", false);
        doc.entities.pop();
        doc.links.clear();
        let err = write_dataset(&[doc], &dir.path().join("out.json")).unwrap_err();
        assert!(err.to_string().contains("belongs to no entity"), "{err}");
    }

    #[test]
    fn label_counts_sum_per_label() {
        let docs = vec![sample_doc("a", false), sample_doc("b", false)];
        let c = count_labels(&docs);
        assert_eq!(c.question, 2);
        assert_eq!(c.answer, 2);
        assert_eq!(c.header + c.other, 0);
        assert_eq!(c.total(), 4);
    }
}

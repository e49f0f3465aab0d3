//! BIO tagging over entity spans, down to subword granularity.
//!
//! Tag ids are fixed: O = 0, then (B, I) pairs for HEADER, QUESTION, ANSWER.
//! OTHER entities and unassigned words tag as O. Decoding is lenient: an
//! I-X with no open X span simply opens one, so noisy predictions still
//! yield well-formed spans.

use super::{Document, EntityLabel};

pub const NUM_TAGS: usize = 7;
pub const O: i64 = 0;

pub fn begin_tag(label: EntityLabel) -> Option<i64> {
    match label {
        EntityLabel::Header => Some(1),
        EntityLabel::Question => Some(3),
        EntityLabel::Answer => Some(5),
        EntityLabel::Other => None,
    }
}

pub fn inside_tag(label: EntityLabel) -> Option<i64> {
    begin_tag(label).map(|b| b + 1)
}

pub fn tag_name(tag: i64) -> &'static str {
    match tag {
        0 => "O",
        1 => "B-HEADER",
        2 => "I-HEADER",
        3 => "B-QUESTION",
        4 => "I-QUESTION",
        5 => "B-ANSWER",
        6 => "I-ANSWER",
        _ => "?",
    }
}

fn tag_label(tag: i64) -> Option<EntityLabel> {
    match tag {
        1 | 2 => Some(EntityLabel::Header),
        3 | 4 => Some(EntityLabel::Question),
        5 | 6 => Some(EntityLabel::Answer),
        _ => None,
    }
}

fn is_begin(tag: i64) -> bool {
    tag == 1 || tag == 3 || tag == 5
}

/// One tag per word: entity-initial words get B-X, interior words I-X.
pub fn word_tags(doc: &Document) -> Vec<i64> {
    let mut tags = vec![O; doc.words.len()];
    for e in &doc.entities {
        let (Some(b), Some(i)) = (begin_tag(e.label), inside_tag(e.label)) else {
            continue; // OTHER stays O
        };
        tags[e.first_word] = b;
        for t in tags[e.first_word + 1..=e.last_word].iter_mut() {
            *t = i;
        }
    }
    tags
}

/// Spread word tags onto subwords. `alignment` gives, per subword, its word
/// index and whether it is the word's first piece. Only the first piece
/// keeps a B tag; every continuation inside an entity is I.
pub fn subword_tags(word_tags: &[i64], alignment: &[(usize, bool)]) -> Vec<i64> {
    alignment
        .iter()
        .map(|&(word, first)| {
            let t = word_tags[word];
            if first || t == O {
                t
            } else if is_begin(t) {
                t + 1
            } else {
                t
            }
        })
        .collect()
}

/// Per-subword tags for a document in one call.
pub fn encode(doc: &Document, alignment: &[(usize, bool)]) -> Vec<i64> {
    subword_tags(&word_tags(doc), alignment)
}

/// Reduce subword predictions to word tags by taking each word's first
/// piece; words without any piece (never produced by the tokenizer) tag O.
pub fn first_piece_word_tags(
    subword: &[i64],
    alignment: &[(usize, bool)],
    n_words: usize,
) -> Vec<i64> {
    let mut tags = vec![O; n_words];
    for (&t, &(word, first)) in subword.iter().zip(alignment) {
        if first {
            tags[word] = t;
        }
    }
    tags
}

/// Decode a tag sequence into (first, last, label) spans over its positions.
pub fn decode(tags: &[i64]) -> Vec<(usize, usize, EntityLabel)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, EntityLabel)> = None;
    for (i, &t) in tags.iter().enumerate() {
        let label = tag_label(t);
        let extends = matches!((label, &open), (Some(l), Some((_, ol))) if !is_begin(t) && l == *ol);
        if extends {
            continue;
        }
        if let Some((start, ol)) = open.take() {
            spans.push((start, i - 1, ol));
        }
        if let Some(l) = label {
            open = Some((i, l));
        }
    }
    if let Some((start, ol)) = open {
        spans.push((start, tags.len() - 1, ol));
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{EntitySpan, Lang, NormBox, Word};

    fn doc_with(entities: Vec<EntitySpan>, n_words: usize) -> Document {
        let words = (0..n_words)
            .map(|i| Word {
                text: format!("w{i}"),
                bbox: NormBox::new(i as i64 * 10, 0, i as i64 * 10 + 8, 10).unwrap(),
                line: 0,
            })
            .collect();
        Document {
            id: "t".into(),
            lang: Lang::En,
            page_w: 1000,
            page_h: 1000,
            words,
            raster: None,
            entities,
            links: vec![],
        }
    }

    fn span(id: u32, first: usize, last: usize, label: EntityLabel) -> EntitySpan {
        EntitySpan {
            id,
            first_word: first,
            last_word: last,
            label,
        }
    }

    #[test]
    fn words_of_entities_get_b_then_i() {
        let doc = doc_with(
            vec![
                span(0, 0, 1, EntityLabel::Question),
                span(1, 3, 3, EntityLabel::Answer),
                span(2, 4, 5, EntityLabel::Other),
            ],
            6,
        );
        assert_eq!(word_tags(&doc), vec![3, 4, 0, 5, 0, 0]);
    }

    #[test]
    fn continuation_subwords_become_inside_tags() {
        // word 0 splits into three pieces, word 1 into one
        let align = vec![(0, true), (0, false), (0, false), (1, true)];
        assert_eq!(subword_tags(&[3, 5], &align), vec![3, 4, 4, 5]);
        // O words stay O on every piece
        assert_eq!(subword_tags(&[0, 5], &align), vec![0, 0, 0, 5]);
    }

    #[test]
    fn decode_reads_back_spans() {
        // B-QUESTION I-QUESTION O B-ANSWER
        assert_eq!(
            decode(&[3, 4, 0, 5]),
            vec![(0, 1, EntityLabel::Question), (3, 3, EntityLabel::Answer)]
        );
    }

    #[test]
    fn decode_accepts_dangling_inside_tags() {
        assert_eq!(decode(&[4]), vec![(0, 0, EntityLabel::Question)]);
        // I-ANSWER following B-QUESTION opens a fresh answer span
        assert_eq!(
            decode(&[3, 6]),
            vec![(0, 0, EntityLabel::Question), (1, 1, EntityLabel::Answer)]
        );
    }

    #[test]
    fn decode_splits_adjacent_spans_of_one_type() {
        assert_eq!(
            decode(&[5, 5, 6]),
            vec![(0, 0, EntityLabel::Answer), (1, 2, EntityLabel::Answer)]
        );
    }

    #[test]
    fn first_piece_reduction_inverts_subword_spread() {
        let align = vec![(0, true), (0, false), (1, true), (2, true), (2, false)];
        let wt = vec![3, 4, 0];
        let st = subword_tags(&wt, &align);
        assert_eq!(first_piece_word_tags(&st, &align, 3), wt);
    }

    #[test]
    fn encode_then_decode_recovers_non_other_entities() {
        let doc = doc_with(
            vec![
                span(0, 0, 2, EntityLabel::Header),
                span(1, 3, 4, EntityLabel::Other),
                span(2, 5, 5, EntityLabel::Question),
                span(3, 6, 8, EntityLabel::Answer),
            ],
            9,
        );
        let got = decode(&word_tags(&doc));
        assert_eq!(
            got,
            vec![
                (0, 2, EntityLabel::Header),
                (5, 5, EntityLabel::Question),
                (6, 8, EntityLabel::Answer)
            ]
        );
    }
}

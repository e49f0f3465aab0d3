//! Unigram-LM subword segmentation (Viterbi over character positions) and
//! character-level bounding-box merging. One vocabulary covers every
//! language; unknown characters fall back to a single-character UNK piece.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::docmodel::{Document, NormBox, Word};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_PIECES: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

/// Offset of UNK's log-probability below the least likely real piece.
const UNK_PENALTY: f64 = 10.0;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("duplicate piece {piece:?} (line {line})")]
    DuplicatePiece { piece: String, line: usize },
    #[error("piece {piece:?} has log-probability {logprob} > 0 (line {line})")]
    PositiveLogProb {
        piece: String,
        logprob: f64,
        line: usize,
    },
    #[error("vocabulary has no pieces")]
    EmptyVocab,
}

/// Piece inventory with log-probabilities. Ids 0..=4 are the special
/// tokens in [`SPECIAL_PIECES`] order; real pieces follow in file order.
pub struct UnigramVocab {
    pieces: Vec<(String, f64)>,
    by_str: HashMap<String, u32>,
    unk_logprob: f64,
    max_piece_chars: usize,
}

impl UnigramVocab {
    pub fn from_entries<I>(entries: I) -> Result<UnigramVocab, TokenizerError>
    where
        I: IntoIterator<Item = (String, f64)>,
    {
        let mut pieces: Vec<(String, f64)> = SPECIAL_PIECES
            .iter()
            .map(|s| (s.to_string(), f64::NEG_INFINITY))
            .collect();
        let mut by_str = HashMap::new();
        for (line, (piece, logprob)) in entries.into_iter().enumerate() {
            let line = line + 1;
            if SPECIAL_PIECES.contains(&piece.as_str()) || by_str.contains_key(&piece) {
                return Err(TokenizerError::DuplicatePiece { piece, line });
            }
            if logprob > 0.0 || !logprob.is_finite() {
                return Err(TokenizerError::PositiveLogProb {
                    piece,
                    logprob,
                    line,
                });
            }
            if piece.is_empty() {
                return Err(TokenizerError::DuplicatePiece {
                    piece: String::new(),
                    line,
                });
            }
            by_str.insert(piece.clone(), pieces.len() as u32);
            pieces.push((piece, logprob));
        }
        if pieces.len() == SPECIAL_PIECES.len() {
            return Err(TokenizerError::EmptyVocab);
        }
        let min = pieces[SPECIAL_PIECES.len()..]
            .iter()
            .map(|(_, lp)| *lp)
            .fold(f64::INFINITY, f64::min);
        let max_piece_chars = pieces[SPECIAL_PIECES.len()..]
            .iter()
            .map(|(p, _)| p.chars().count())
            .max()
            .unwrap();
        Ok(UnigramVocab {
            pieces,
            by_str,
            unk_logprob: min - UNK_PENALTY,
            max_piece_chars,
        })
    }

    /// Load a `piece<TAB>logprob` TSV. Special pieces are implicit and
    /// must not appear in the file.
    pub fn load(path: &Path) -> Result<UnigramVocab, TokenizerError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: display.clone(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.is_empty() {
                continue;
            }
            let (piece, lp) = raw.split_once('\t').ok_or_else(|| TokenizerError::Parse {
                path: display.clone(),
                line: i + 1,
                detail: "expected piece<TAB>logprob".into(),
            })?;
            let logprob: f64 = lp.trim().parse().map_err(|_| TokenizerError::Parse {
                path: display.clone(),
                line: i + 1,
                detail: format!("bad log-probability {lp:?}"),
            })?;
            entries.push((piece.to_string(), logprob));
        }
        UnigramVocab::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        for (piece, lp) in &self.pieces[SPECIAL_PIECES.len()..] {
            out.push_str(piece);
            out.push('\t');
            out.push_str(&lp.to_string());
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one real piece
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize].0
    }

    pub fn logprob(&self, id: u32) -> f64 {
        self.pieces[id as usize].1
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.by_str.get(piece).copied()
    }

    pub fn unk_logprob(&self) -> f64 {
        self.unk_logprob
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_PIECES.len()
    }

    /// Ids eligible as random replacements: everything but the specials.
    pub fn real_ids(&self) -> std::ops::Range<u32> {
        SPECIAL_PIECES.len() as u32..self.pieces.len() as u32
    }

    /// Best-scoring segmentation of `text` into pieces, as (id, char
    /// range) pairs. Ties break toward fewer pieces, then the
    /// lexicographically smallest piece at the earliest position.
    pub fn segment(&self, text: &str) -> Vec<PieceSpan> {
        let chars: Vec<char> = text.chars().collect();
        let n = chars.len();
        if n == 0 {
            return Vec::new();
        }
        // best[i] covers chars[i..]; filled back to front so the choice
        // at each position picks its own first piece.
        struct Suffix {
            score: f64,
            count: usize,
            // first piece of the best suffix segmentation
            id: u32,
            end: usize,
        }
        let mut best: Vec<Option<Suffix>> = (0..=n).map(|_| None).collect();
        best[n] = Some(Suffix {
            score: 0.0,
            count: 0,
            id: PAD,
            end: n,
        });
        let mut buf = String::new();
        for i in (0..n).rev() {
            let mut cand: Option<(Suffix, String)> = None;
            let consider = |c: Suffix, piece: String, cand: &mut Option<(Suffix, String)>| {
                let better = match cand {
                    None => true,
                    Some((old, old_piece)) => (c.score > old.score)
                        || (c.score == old.score && c.count < old.count)
                        || (c.score == old.score && c.count == old.count && piece < *old_piece),
                };
                if better {
                    *cand = Some((c, piece));
                }
            };
            buf.clear();
            for (j, &ch) in chars.iter().enumerate().take((i + self.max_piece_chars).min(n)).skip(i) {
                buf.push(ch);
                let tail = match &best[j + 1] {
                    Some(t) => t,
                    None => continue,
                };
                if let Some(&id) = self.by_str.get(&buf) {
                    consider(
                        Suffix {
                            score: self.pieces[id as usize].1 + tail.score,
                            count: 1 + tail.count,
                            id,
                            end: j + 1,
                        },
                        buf.clone(),
                        &mut cand,
                    );
                }
            }
            // UNK consumes exactly one character; its surface is that
            // character, which is what the tie-break compares.
            if let Some(tail) = &best[i + 1] {
                consider(
                    Suffix {
                        score: self.unk_logprob + tail.score,
                        count: 1 + tail.count,
                        id: UNK,
                        end: i + 1,
                    },
                    chars[i].to_string(),
                    &mut cand,
                );
            }
            best[i] = cand.map(|(c, _)| c);
        }

        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let s = best[i].as_ref().expect("UNK makes every suffix reachable");
            out.push(PieceSpan {
                id: s.id,
                start: i,
                end: s.end,
            });
            i = s.end;
        }
        out
    }
}

/// One piece of a segmented string: vocab id plus the half-open char
/// range it covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PieceSpan {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

/// Split a word box into one equal-width vertical slice per character,
/// the last slice absorbing any integer remainder.
pub fn char_boxes(word: &Word) -> Vec<NormBox> {
    let k = word.text.chars().count().max(1) as i32;
    let b = word.bbox;
    let step = b.width() / k;
    (0..k)
        .map(|i| NormBox {
            x0: b.x0 + i * step,
            y0: b.y0,
            x1: if i == k - 1 { b.x1 } else { b.x0 + (i + 1) * step },
            y1: b.y1,
        })
        .collect()
}

/// Subword with provenance: owning word, char range inside it, and the
/// box merged from its character slices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordToken {
    pub piece_id: u32,
    pub word_index: usize,
    pub char_span: (usize, usize),
    pub bbox: NormBox,
}

impl SubwordToken {
    /// The text this token covers, from its source word.
    pub fn surface(&self, word: &Word) -> String {
        word.text
            .chars()
            .skip(self.char_span.0)
            .take(self.char_span.1 - self.char_span.0)
            .collect()
    }
}

/// Segment every word of `doc`, giving each subword the tight union of
/// the character slices it covers.
pub fn tokenize_document(doc: &Document, vocab: &UnigramVocab) -> Vec<SubwordToken> {
    let mut out = Vec::new();
    for (wi, word) in doc.words.iter().enumerate() {
        let slices = char_boxes(word);
        for piece in vocab.segment(&word.text) {
            let bbox = slices[piece.start..piece.end]
                .iter()
                .copied()
                .reduce(NormBox::union)
                .expect("piece covers at least one char");
            out.push(SubwordToken {
                piece_id: piece.id,
                word_index: wi,
                char_span: (piece.start, piece.end),
                bbox,
            });
        }
    }
    out
}

/// Per-token (word index, starts-its-word) pairs, the shape the BIO
/// codec consumes.
pub fn alignment(tokens: &[SubwordToken]) -> Vec<(usize, bool)> {
    tokens
        .iter()
        .map(|t| (t.word_index, t.char_span.0 == 0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{Lang, NormBox};
    use proptest::prelude::*;

    fn vocab(entries: &[(&str, f64)]) -> UnigramVocab {
        UnigramVocab::from_entries(entries.iter().map(|(p, lp)| (p.to_string(), *lp))).unwrap()
    }

    fn pieces_of(v: &UnigramVocab, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        v.segment(text)
            .iter()
            .map(|p| {
                if p.id == UNK {
                    chars[p.start..p.end].iter().collect()
                } else {
                    v.piece(p.id).to_string()
                }
            })
            .collect()
    }

    #[test]
    fn load_assigns_ids_after_specials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        std::fs::write(&path, "a\t-1.0\nb\t-2.0\nab\t-2.5\n").unwrap();
        let v = UnigramVocab::load(&path).unwrap();
        assert_eq!(v.len(), 3 + SPECIAL_PIECES.len());
        assert_eq!(v.id_of("a"), Some(5));
        assert_eq!(v.piece(BOS), "<s>");
        assert_eq!(v.unk_logprob(), -12.5);
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = vocab(&[("a", -1.0), ("字", -3.25)]);
        v.save(&path).unwrap();
        let v2 = UnigramVocab::load(&path).unwrap();
        assert_eq!(v2.len(), v.len());
        assert_eq!(v2.id_of("字"), v.id_of("字"));
        assert_eq!(v2.logprob(v2.id_of("字").unwrap()), -3.25);
    }

    #[test]
    fn load_rejects_duplicates_positive_logprobs_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let dup = dir.path().join("dup.tsv");
        std::fs::write(&dup, "a\t-1.0\na\t-2.0\n").unwrap();
        assert!(matches!(
            UnigramVocab::load(&dup),
            Err(TokenizerError::DuplicatePiece { .. })
        ));

        let pos = dir.path().join("pos.tsv");
        std::fs::write(&pos, "a\t0.5\n").unwrap();
        assert!(matches!(
            UnigramVocab::load(&pos),
            Err(TokenizerError::PositiveLogProb { .. })
        ));

        let empty = dir.path().join("empty.tsv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(
            UnigramVocab::load(&empty),
            Err(TokenizerError::EmptyVocab)
        ));

        let special = dir.path().join("special.tsv");
        std::fs::write(&special, "<mask>\t-1.0\n").unwrap();
        assert!(matches!(
            UnigramVocab::load(&special),
            Err(TokenizerError::DuplicatePiece { .. })
        ));
    }

    #[test]
    fn segment_prefers_higher_total_logprob() {
        let v = vocab(&[("a", -2.3), ("b", -2.3), ("ab", -3.0)]);
        assert_eq!(pieces_of(&v, "ab"), vec!["ab"]);
        assert_eq!(pieces_of(&v, "ba"), vec!["b", "a"]);
    }

    #[test]
    fn unknown_characters_fall_to_unk() {
        let v = vocab(&[("a", -2.3), ("b", -2.3), ("ab", -3.0)]);
        let spans = v.segment("ax");
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].id, UNK);
        assert_eq!((spans[1].start, spans[1].end), (1, 2));
        assert_eq!(pieces_of(&v, "ax"), vec!["a", "x"]);
    }

    // Five-piece vocab with exact score ties, so both tie-break rules
    // fire: all values are binary fractions and sums stay exact.
    fn tie_vocab() -> UnigramVocab {
        vocab(&[
            ("a", -1.0),
            ("b", -1.5),
            ("ab", -2.5),
            ("ba", -2.5),
            ("aa", -2.0),
        ])
    }

    #[test]
    fn score_tie_breaks_toward_fewer_pieces() {
        // [ab] and [a, b] both score -2.5
        assert_eq!(pieces_of(&tie_vocab(), "ab"), vec!["ab"]);
    }

    #[test]
    fn count_tie_breaks_toward_lexicographically_first_piece() {
        // [a, ab] and [aa, b] both score -3.5 with two pieces
        assert_eq!(pieces_of(&tie_vocab(), "aab"), vec!["a", "ab"]);
    }

    /// Walk every segmentation of `chars[i..]` (UNK consumes one char),
    /// keeping the single winner under score desc, count asc, lex asc.
    fn enumerate(
        v: &UnigramVocab,
        chars: &[char],
        i: usize,
        acc: &mut Vec<String>,
        score: f64,
        best: &mut Option<(f64, Vec<String>)>,
    ) {
        if i == chars.len() {
            let better = match best {
                None => true,
                Some((bs, bp)) => {
                    score > *bs
                        || (score == *bs && acc.len() < bp.len())
                        || (score == *bs && acc.len() == bp.len() && *acc < *bp)
                }
            };
            if better {
                *best = Some((score, acc.clone()));
            }
            return;
        }
        for j in i + 1..=chars.len() {
            let piece: String = chars[i..j].iter().collect();
            if let Some(id) = v.id_of(&piece) {
                acc.push(piece);
                enumerate(v, chars, j, acc, score + v.logprob(id), best);
                acc.pop();
            }
        }
        acc.push(chars[i].to_string());
        enumerate(v, chars, i + 1, acc, score + v.unk_logprob(), best);
        acc.pop();
    }

    fn oracle(v: &UnigramVocab, text: &str) -> (f64, Vec<String>) {
        let chars: Vec<char> = text.chars().collect();
        let mut best = None;
        enumerate(v, &chars, 0, &mut Vec::new(), 0.0, &mut best);
        best.unwrap()
    }

    fn assert_matches_oracle(v: &UnigramVocab, text: &str) {
        let got = pieces_of(v, text);
        let got_score: f64 = v
            .segment(text)
            .iter()
            .map(|p| {
                if p.id == UNK {
                    v.unk_logprob()
                } else {
                    v.logprob(p.id)
                }
            })
            .sum();
        let (want_score, want) = oracle(v, text);
        assert_eq!(got_score, want_score, "score for {text:?}");
        assert_eq!(got, want, "pieces for {text:?}");
    }

    #[test]
    fn viterbi_matches_exhaustive_enumeration() {
        let v = tie_vocab();
        for len in 1..=12usize {
            for bits in 0..1u32 << len {
                let text: String = (0..len)
                    .map(|k| if bits >> k & 1 == 0 { 'a' } else { 'b' })
                    .collect();
                assert_matches_oracle(&v, &text);
            }
        }
    }

    #[test]
    fn viterbi_matches_enumeration_through_unk_chars() {
        let v = tie_vocab();
        // 'x' has no piece, so every occurrence forces the UNK branch
        for len in 1..=8usize {
            for mut code in 0..3u32.pow(len as u32) {
                let text: String = (0..len)
                    .map(|_| {
                        let c = b"abx"[(code % 3) as usize];
                        code /= 3;
                        c as char
                    })
                    .collect();
                assert_matches_oracle(&v, &text);
            }
        }
    }

    #[test]
    fn char_boxes_slice_evenly_with_remainder_on_last() {
        let word = |text: &str, b: NormBox| Word {
            text: text.into(),
            bbox: b,
            line: 0,
        };
        assert_eq!(
            char_boxes(&word("ab", NormBox::new(0, 0, 100, 10).unwrap())),
            vec![
                NormBox::new(0, 0, 50, 10).unwrap(),
                NormBox::new(50, 0, 100, 10).unwrap(),
            ]
        );
        let b = NormBox::new(7, 3, 20, 9).unwrap();
        assert_eq!(char_boxes(&word("x", b)), vec![b]);
        assert_eq!(
            char_boxes(&word("abc", NormBox::new(0, 0, 99, 10).unwrap())),
            vec![
                NormBox::new(0, 0, 33, 10).unwrap(),
                NormBox::new(33, 0, 66, 10).unwrap(),
                NormBox::new(66, 0, 99, 10).unwrap(),
            ]
        );
    }

    fn doc_of_words(words: Vec<Word>) -> Document {
        let n = words.len();
        Document {
            id: "t".into(),
            lang: Lang::En,
            page_w: 100,
            page_h: 100,
            words,
            raster: None,
            entities: vec![crate::docmodel::EntitySpan {
                id: 0,
                first_word: 0,
                last_word: n - 1,
                label: crate::docmodel::EntityLabel::Other,
            }],
            links: vec![],
        }
    }

    #[test]
    fn token_boxes_merge_character_slices() {
        let v = vocab(&[("a", -2.3), ("b", -2.3), ("ab", -3.0)]);
        let doc = doc_of_words(vec![Word {
            text: "ab".into(),
            bbox: NormBox::new(10, 10, 30, 20).unwrap(),
            line: 0,
        }]);
        let toks = tokenize_document(&doc, &v);
        // "ab" is one piece; its box is the merge of both char slices,
        // which is the whole word box
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].bbox, NormBox::new(10, 10, 30, 20).unwrap());
        assert_eq!(toks[0].surface(&doc.words[0]), "ab");

        let v2 = vocab(&[("a", -2.3), ("b", -2.3)]);
        let toks2 = tokenize_document(&doc, &v2);
        assert_eq!(toks2.len(), 2);
        assert_eq!(toks2[0].bbox, NormBox::new(10, 10, 20, 20).unwrap());
        assert_eq!(toks2[1].bbox, NormBox::new(20, 10, 30, 20).unwrap());
        assert_eq!(alignment(&toks2), vec![(0, true), (0, false)]);
    }

    proptest! {
        #[test]
        fn tokens_reconstruct_words_and_boxes_nest(
            words in proptest::collection::vec("[abx]{1,9}", 1..6)
        ) {
            let v = tie_vocab();
            let words: Vec<Word> = words
                .into_iter()
                .enumerate()
                .map(|(i, text)| Word {
                    text,
                    bbox: NormBox::new(0, (i as i64) * 30, 100, (i as i64) * 30 + 20).unwrap(),
                    line: i as u32,
                })
                .collect();
            let doc = doc_of_words(words);
            let toks = tokenize_document(&doc, &v);
            for w in 0..doc.words.len() {
                let word = &doc.words[w];
                let rebuilt: String = toks
                    .iter()
                    .filter(|t| t.word_index == w)
                    .map(|t| t.surface(word))
                    .collect();
                prop_assert_eq!(&rebuilt, &word.text);
                let slices = char_boxes(word);
                for t in toks.iter().filter(|t| t.word_index == w) {
                    prop_assert!(word.bbox.contains(t.bbox));
                    for s in &slices[t.char_span.0..t.char_span.1] {
                        prop_assert!(t.bbox.contains(*s));
                    }
                }
            }
        }
    }
}

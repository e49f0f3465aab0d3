//! Deterministic synthetic fixtures: multilingual form documents with
//! entities and key-value links, page rasters, a pretraining corpus,
//! and a matching unigram vocabulary. Reruns with the same spec are
//! byte-identical, so tests and demos need no downloaded data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::docmodel::{
    write_dataset, DocError, Document, EntityLabel, EntitySpan, Lang, NormBox, Raster,
    RelationLabel, RelationLink, Word,
};
use crate::pipeline::{CorpusRecord, PageInfo, TextRun, SEED_TEXTS};
use crate::tokenizer::TokenizerError;

/// Upper bound on real vocabulary pieces; chars are always included,
/// whole words fill the rest.
pub const VOCAB_CAP: usize = 1024;
/// Synthetic rasters are small square pages.
pub const RASTER_SIDE: u32 = 64;
const INK: u8 = 48;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("fixture spec: {why}")]
    Spec { why: String },
}

/// What to generate: languages, per-language document counts, seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub langs: Vec<Lang>,
    pub train_docs: usize,
    pub test_docs: usize,
    pub corpus_docs: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(langs: Vec<Lang>, docs: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            langs,
            train_docs: docs,
            test_docs: docs.div_ceil(4).max(2),
            corpus_docs: docs,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub form_docs: usize,
    pub corpus_records: usize,
    pub vocab_pieces: usize,
}

/// Distinct words of one language's seed text, in first-seen order.
pub fn word_pool(lang: Lang) -> Vec<&'static str> {
    let text = SEED_TEXTS
        .iter()
        .find(|(l, _)| *l == lang)
        .map(|(_, t)| *t)
        .expect("every language has seed text");
    let mut seen = BTreeSet::new();
    text.split_whitespace()
        .filter(|w| seen.insert(*w))
        .collect()
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

/// Row-major word layout helper: places words left to right with a
/// width proportional to their character count.
fn place_words(texts: &[String], y0: i64, y1: i64, x_start: i64, line: u32) -> Vec<Word> {
    let mut x = x_start;
    let mut words = Vec::with_capacity(texts.len());
    for text in texts {
        let width = 24 * text.chars().count() as i64 + 12;
        let x1 = (x + width).min(1000);
        words.push(Word {
            text: text.clone(),
            bbox: NormBox::new(x.min(x1 - 1), y0, x1, y1).expect("layout box in range"),
            line,
        });
        x = x1 + 12;
        if x >= 980 {
            x = 980; // degenerate but legal; pools keep rows short
        }
    }
    words
}

fn ink_raster(words: &[Word]) -> Raster {
    let mut raster = Raster::blank(RASTER_SIDE, RASTER_SIDE);
    for w in words {
        raster.fill_rect(w.bbox, INK);
    }
    raster
}

/// One synthetic form: an optional header, two or three question/answer
/// pairs joined by key-value links, and sometimes a stray OTHER word.
/// Small enough to tokenize without truncation at desk-model sizes.
pub fn form_document(lang: Lang, id: &str, rng: &mut ChaCha8Rng) -> Document {
    let pool = word_pool(lang);
    let sample = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n).map(|_| pick(rng, &pool).to_string()).collect()
    };

    let mut words = Vec::new();
    let mut entities = Vec::new();
    let mut links = Vec::new();
    let mut push_entity = |words: &mut Vec<Word>, rows: Vec<Word>, label: EntityLabel| -> u32 {
        let id = entities.len() as u32;
        let first = words.len();
        words.extend(rows);
        entities.push(EntitySpan {
            id,
            first_word: first,
            last_word: words.len() - 1,
            label,
        });
        id
    };

    let n_header = rng.random_range(1..=2);
    let header_words = sample(rng, n_header);
    push_entity(
        &mut words,
        place_words(&header_words, 20, 120, 250, 0),
        EntityLabel::Header,
    );

    let n_pairs = rng.random_range(2..=3);
    for i in 0..n_pairs {
        let y0 = 170 + 200 * i as i64;
        let (y1, line) = (y0 + 130, 1 + i as u32);
        let n_q = rng.random_range(1..=2);
        let q = sample(rng, n_q);
        let n_a = rng.random_range(1..=2);
        let a = sample(rng, n_a);
        let q_id = push_entity(
            &mut words,
            place_words(&q, y0, y1, 30, line),
            EntityLabel::Question,
        );
        let a_id = push_entity(
            &mut words,
            place_words(&a, y0, y1, 530, line),
            EntityLabel::Answer,
        );
        links.push(RelationLink {
            head: q_id,
            tail: a_id,
            label: RelationLabel::KeyValue,
        });
    }

    if rng.random::<f64>() < 0.5 {
        let stray = sample(rng, 1);
        let line = 1 + n_pairs as u32;
        push_entity(
            &mut words,
            place_words(&stray, 850, 950, 30, line),
            EntityLabel::Other,
        );
    }

    let raster = ink_raster(&words);
    Document {
        id: id.to_string(),
        lang,
        page_w: 1000,
        page_h: 1000,
        words,
        raster: Some(raster),
        entities,
        links,
    }
}

/// One pretraining page: enough pool words to clear the length filter,
/// laid out in rows, with a raster. Returns the record and its raster;
/// box coordinates double as page pixels (the page is 1000x1000).
pub fn corpus_record(lang: Lang, id: &str, rng: &mut ChaCha8Rng) -> (CorpusRecord, Raster) {
    let pool = word_pool(lang);
    let mut runs = Vec::new();
    let mut words = Vec::new();
    let (mut x, mut y, mut line) = (10i64, 10i64, 0u32);
    let mut chars = 0usize;
    while chars < 210 {
        let text = pick(rng, &pool).to_string();
        let width = 24 * text.chars().count() as i64 + 12;
        if x + width > 990 {
            x = 10;
            y += 36;
            line += 1;
        }
        let bbox = NormBox::new(x, y, x + width, y + 28).expect("corpus box in range");
        chars += text.chars().count() + usize::from(!runs.is_empty());
        runs.push(TextRun {
            text: text.clone(),
            bbox: [bbox.x0 as i64, bbox.y0 as i64, bbox.x1 as i64, bbox.y1 as i64],
            line,
        });
        words.push(Word { text, bbox, line });
        x += width + 12;
    }
    let raster = ink_raster(&words);
    let record = CorpusRecord {
        id: id.to_string(),
        text_runs: runs,
        page: PageInfo {
            w: 1000,
            h: 1000,
            raster: format!("{id}.pgm"),
        },
    };
    (record, raster)
}

/// Deterministic unigram vocabulary covering the given languages: every
/// character of their pools, plus whole pool words (count-ranked) up to
/// [`VOCAB_CAP`] pieces. Words score as unigram frequencies; characters
/// carry a fixed penalty so whole-word segmentations win.
pub fn build_vocab(langs: &[Lang]) -> Vec<(String, f64)> {
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut char_counts: BTreeMap<char, u64> = BTreeMap::new();
    for &lang in langs {
        let text = SEED_TEXTS
            .iter()
            .find(|(l, _)| *l == lang)
            .map(|(_, t)| *t)
            .expect("seed text");
        for w in text.split_whitespace() {
            *word_counts.entry(w).or_insert(0) += 1;
            for c in w.chars() {
                *char_counts.entry(c).or_insert(0) += 1;
            }
        }
    }
    let total_words: u64 = word_counts.values().sum();
    let total_chars: u64 = char_counts.values().sum();

    let mut pieces: Vec<(String, f64)> = char_counts
        .iter()
        .map(|(&c, &n)| {
            let lp = (n as f64 / total_chars as f64).ln() - 6.0;
            (c.to_string(), lp)
        })
        .collect();

    let mut words: Vec<(&str, u64)> = word_counts
        .iter()
        .filter(|(w, _)| w.chars().count() >= 2)
        .map(|(&w, &n)| (w, n))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    for (w, n) in words {
        if pieces.len() >= VOCAB_CAP {
            break;
        }
        pieces.push((w.to_string(), (n as f64 / total_words as f64).ln()));
    }
    pieces
}

fn write_vocab(pieces: &[(String, f64)], path: &Path) -> Result<(), SynthError> {
    let mut f = fs::File::create(path)?;
    for (piece, lp) in pieces {
        writeln!(f, "{piece}\t{lp}")?;
    }
    Ok(())
}

/// Generate the full fixture tree under `out_dir`:
///
/// ```text
/// out_dir/vocab.tsv
/// out_dir/corpus.jsonl          one record per line, all languages
/// out_dir/c-{lang}-{i}.pgm      corpus page rasters
/// out_dir/{lang}/train.json     form documents with entities + links
/// out_dir/{lang}/test.json      (plus {id}.pgm rasters alongside)
/// ```
pub fn write_fixture(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary, SynthError> {
    if spec.langs.is_empty() {
        return Err(SynthError::Spec {
            why: "at least one language required".into(),
        });
    }
    if spec.train_docs == 0 {
        return Err(SynthError::Spec {
            why: "train_docs must be positive".into(),
        });
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = spec.langs.iter().find(|l| !seen.insert(**l)) {
        return Err(SynthError::Spec {
            why: format!("language {} listed twice", dup.code()),
        });
    }
    fs::create_dir_all(out_dir)?;

    let vocab = build_vocab(&spec.langs);
    write_vocab(&vocab, &out_dir.join("vocab.tsv"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut form_docs = 0usize;
    for &lang in &spec.langs {
        let lang_dir = out_dir.join(lang.code());
        fs::create_dir_all(&lang_dir)?;
        for (split, count) in [("train", spec.train_docs), ("test", spec.test_docs)] {
            let docs: Vec<Document> = (0..count)
                .map(|i| form_document(lang, &format!("{}-{split}-{i:03}", lang.code()), &mut rng))
                .collect();
            write_dataset(&docs, &lang_dir.join(format!("{split}.json")))?;
            form_docs += docs.len();
        }
    }

    let mut corpus_lines = Vec::new();
    for &lang in &spec.langs {
        for i in 0..spec.corpus_docs {
            let id = format!("c-{}-{i:03}", lang.code());
            let (record, raster) = corpus_record(lang, &id, &mut rng);
            raster.write_pgm(&out_dir.join(format!("{id}.pgm")))?;
            corpus_lines.push(serde_json::to_string(&record).expect("record serialize"));
        }
    }
    let mut f = fs::File::create(out_dir.join("corpus.jsonl"))?;
    for line in &corpus_lines {
        writeln!(f, "{line}")?;
    }

    Ok(SynthSummary {
        form_docs,
        corpus_records: corpus_lines.len(),
        vocab_pieces: vocab.len(),
    })
}

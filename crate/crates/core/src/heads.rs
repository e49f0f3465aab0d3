//! Fine-tuning task layers: a 7-tag BIO token classifier for semantic
//! entity recognition, and a bi-affine key-value classifier over entity
//! pairs for relation extraction. Both read encoder hidden states and
//! are pure given them.

use crate::docmodel::{Document, EntityLabel, EntitySpan, RelationLabel, RelationLink};
use crate::model::{EncodedBatch, EncoderVars, ModelConfig, ModelError};
use crate::numerics::{Tape, Tensor, Var};
use crate::objectives::IGNORE;

/// Tag layout: O, then B/I per entity type in label order.
pub const SER_TAGS: usize = 7;
const SER_TYPES: [EntityLabel; 3] = [
    EntityLabel::Header,
    EntityLabel::Question,
    EntityLabel::Answer,
];

/// BIO tag ids over words: O = 0, B-x = 1 + 2*type, I-x = 2 + 2*type.
pub mod bio {
    use super::*;

    pub fn begin_tag(label: EntityLabel) -> Option<usize> {
        SER_TYPES.iter().position(|&l| l == label).map(|t| 1 + 2 * t)
    }

    /// Gold per-word tags for a document. OTHER entities stay O.
    pub fn word_tags(doc: &Document) -> Vec<usize> {
        let mut tags = vec![0usize; doc.words.len()];
        for e in &doc.entities {
            let Some(b) = begin_tag(e.label) else { continue };
            tags[e.first_word] = b;
            for t in tags.iter_mut().take(e.last_word + 1).skip(e.first_word + 1) {
                *t = b + 1;
            }
        }
        tags
    }

    /// Decode word tags into spans. An I-x with no live span of type x
    /// opens one, matching the common strict-BIO evaluation readers.
    pub fn decode(tags: &[usize]) -> Vec<EntitySpan> {
        let mut spans = Vec::new();
        let mut open: Option<(usize, usize)> = None; // (type, first_word)
        for (w, &tag) in tags.iter().enumerate() {
            let here = if tag == 0 { None } else { Some(((tag - 1) / 2, tag % 2 == 1)) };
            let continues = matches!((here, open), (Some((t, false)), Some((o, _))) if t == o);
            if !continues {
                if let Some((t, first)) = open.take() {
                    spans.push(span(spans.len(), t, first, w - 1));
                }
                if let Some((t, _)) = here {
                    open = Some((t, w));
                }
            }
        }
        if let Some((t, first)) = open {
            spans.push(span(spans.len(), t, first, tags.len() - 1));
        }
        spans
    }

    fn span(id: usize, ty: usize, first: usize, last: usize) -> EntitySpan {
        EntitySpan {
            id: id as u32,
            first_word: first,
            last_word: last,
            label: SER_TYPES[ty],
        }
    }
}

/// (name, shape) of the entity-recognition head parameters.
pub fn ser_param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.ser.w".into(), vec![cfg.hidden, SER_TAGS]),
        ("head.ser.b".into(), vec![SER_TAGS]),
    ]
}

/// (name, shape) of the relation-extraction head parameters.
pub fn re_param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden;
    vec![
        ("head.re.type_emb".into(), vec![4, d]),
        ("head.re.head.w".into(), vec![2 * d, d]),
        ("head.re.head.b".into(), vec![d]),
        ("head.re.tail.w".into(), vec![2 * d, d]),
        ("head.re.tail.b".into(), vec![d]),
        ("head.re.u0".into(), vec![d, d]),
        ("head.re.u1".into(), vec![d, d]),
        ("head.re.v".into(), vec![2 * d, 2]),
        ("head.re.b".into(), vec![2]),
    ]
}

fn gather_text_rows(
    tape: &mut Tape,
    hidden: Var,
    cfg: &ModelConfig,
    batch: usize,
) -> Result<Var, ModelError> {
    let (s, t, d) = (cfg.seq_len(), cfg.token_slots(), cfg.hidden);
    let flat = tape.reshape(hidden, &[batch * s, d])?;
    let rows: Vec<usize> = (0..batch * t)
        .map(|i| (i / t) * s + cfg.seq_pos_of_slot(i % t))
        .collect();
    Ok(tape.gather_rows(flat, &rows)?)
}

/// Tag logits `[B*token_slots, 7]` from the text positions of `hidden`.
/// Visual positions never enter, so perturbing them cannot move these.
pub fn ser_logits(
    tape: &mut Tape,
    hidden: Var,
    cfg: &ModelConfig,
    batch: usize,
    ev: &EncoderVars,
) -> Result<Var, ModelError> {
    let text = gather_text_rows(tape, hidden, cfg, batch)?;
    let xw = tape.matmul(text, ev.var("head.ser.w")?)?;
    Ok(tape.add(xw, ev.var("head.ser.b")?)?)
}

/// Gold tag targets aligned with [`ser_logits`] rows: the first piece of
/// each word carries the word's tag, everything else is ignored.
pub fn ser_tag_targets(batch: &EncodedBatch, docs: &[&Document], cfg: &ModelConfig) -> Vec<i64> {
    let t = cfg.token_slots();
    let mut targets = vec![IGNORE; batch.batch * t];
    for (bi, doc) in docs.iter().enumerate() {
        let tags = bio::word_tags(doc);
        for (i, tok) in batch.tokens[bi].iter().enumerate() {
            if tok.char_span.0 == 0 {
                targets[bi * t + 1 + i] = tags[tok.word_index] as i64;
            }
        }
    }
    targets
}

/// Mean cross-entropy of tag logits against [`ser_tag_targets`].
pub fn ser_loss(tape: &mut Tape, logits: Var, targets: &[i64]) -> Result<Var, ModelError> {
    Ok(tape.cross_entropy(logits, targets, IGNORE)?)
}

/// Row-wise argmax; ties go to the lowest class, so all-equal logits
/// read as O / NO_REL.
fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Decode predicted spans per sample from tag logit values. Word tags
/// come from each word's first piece; words lost to truncation read O.
pub fn ser_predict(
    logits: &Tensor,
    batch: &EncodedBatch,
    docs: &[&Document],
    cfg: &ModelConfig,
) -> Vec<Vec<EntitySpan>> {
    let t = cfg.token_slots();
    let tags = argmax_rows(logits);
    docs.iter()
        .enumerate()
        .map(|(bi, doc)| {
            let mut word_tags = vec![0usize; doc.words.len()];
            for (i, tok) in batch.tokens[bi].iter().enumerate() {
                if tok.char_span.0 == 0 {
                    word_tags[tok.word_index] = tags[bi * t + 1 + i];
                }
            }
            bio::decode(&word_tags)
        })
        .collect()
}

/// All ordered pairs of entity indices, head != tail.
pub fn re_candidates(n_entities: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n_entities.saturating_sub(1) * n_entities);
    for h in 0..n_entities {
        for t in 0..n_entities {
            if h != t {
                pairs.push((h, t));
            }
        }
    }
    pairs
}

/// Gold 2-class labels for candidate pairs: 1 where the document links
/// head to tail.
pub fn re_gold_labels(doc: &Document, pairs: &[(usize, usize)]) -> Vec<i64> {
    pairs
        .iter()
        .map(|&(h, t)| {
            let (hid, tid) = (doc.entities[h].id, doc.entities[t].id);
            doc.links.iter().any(|l| l.head == hid && l.tail == tid) as i64
        })
        .collect()
}

fn type_index(label: EntityLabel) -> usize {
    match label {
        EntityLabel::Header => 0,
        EntityLabel::Question => 1,
        EntityLabel::Answer => 2,
        EntityLabel::Other => 3,
    }
}

/// Sequence position of the entity's first subword in sample `bi`, or
/// an error when truncation removed it.
pub fn entity_anchor(
    batch: &EncodedBatch,
    doc: &Document,
    bi: usize,
    entity_idx: usize,
) -> Result<usize, ModelError> {
    let first_word = doc.entities[entity_idx].first_word;
    batch.tokens[bi]
        .iter()
        .position(|tok| tok.word_index == first_word)
        .map(|i| i + 1) // token slot; BOS occupies slot 0
        .ok_or_else(|| ModelError::Config {
            why: format!(
                "entity {} of document {} was truncated away; it cannot be scored",
                doc.entities[entity_idx].id, doc.id
            ),
        })
}

/// Bi-affine pair logits `[pairs.len(), 2]` for one sample. Each entity
/// is represented by its first subword's hidden row concatenated with a
/// type embedding, passed through distinct head/tail projections; class
/// scores are h'U_c t' plus a linear read of [h'; t'] plus a bias.
#[allow(clippy::too_many_arguments)]
pub fn re_pair_logits(
    tape: &mut Tape,
    hidden: Var,
    batch: &EncodedBatch,
    doc: &Document,
    bi: usize,
    pairs: &[(usize, usize)],
    cfg: &ModelConfig,
    ev: &EncoderVars,
) -> Result<Var, ModelError> {
    let (s, d) = (cfg.seq_len(), cfg.hidden);
    if pairs.is_empty() {
        return Err(ModelError::Config {
            why: format!("document {}: no candidate pairs to score", doc.id),
        });
    }

    let mut anchor_rows = Vec::with_capacity(doc.entities.len());
    let mut type_rows = Vec::with_capacity(doc.entities.len());
    for (ei, e) in doc.entities.iter().enumerate() {
        let slot = entity_anchor(batch, doc, bi, ei)?;
        anchor_rows.push(bi * s + cfg.seq_pos_of_slot(slot));
        type_rows.push(type_index(e.label));
    }

    let flat = tape.reshape(hidden, &[batch.batch * s, d])?;
    let first_tok = tape.gather_rows(flat, &anchor_rows)?;
    let types = tape.gather_rows(ev.var("head.re.type_emb")?, &type_rows)?;
    let repr = tape.concat_cols(first_tok, types)?;

    let project = |tape: &mut Tape, prefix: &str| -> Result<Var, ModelError> {
        let xw = tape.matmul(repr, ev.var(&format!("{prefix}.w"))?)?;
        let xb = tape.add(xw, ev.var(&format!("{prefix}.b"))?)?;
        Ok(tape.gelu(xb)?)
    };
    let heads = project(tape, "head.re.head")?;
    let tails = project(tape, "head.re.tail")?;

    let head_idx: Vec<usize> = pairs.iter().map(|&(h, _)| h).collect();
    let tail_idx: Vec<usize> = pairs.iter().map(|&(_, t)| t).collect();
    let hp = tape.gather_rows(heads, &head_idx)?;
    let tp = tape.gather_rows(tails, &tail_idx)?;

    // bilinear term per class: rowwise h . (U_c t)
    let ones = tape.leaf(Tensor::new(&[d, 1], vec![1.0; d])?)?;
    let mut bilinear_cols = Vec::with_capacity(2);
    for name in ["head.re.u0", "head.re.u1"] {
        let ut = tape.matmul_nt(tp, ev.var(name)?)?;
        let prod = tape.mul(hp, ut)?;
        bilinear_cols.push(tape.matmul(prod, ones)?);
    }
    let bilinear = tape.concat_cols(bilinear_cols[0], bilinear_cols[1])?;

    let cat = tape.concat_cols(hp, tp)?;
    let lin = tape.matmul(cat, ev.var("head.re.v")?)?;
    let lin_b = tape.add(lin, ev.var("head.re.b")?)?;
    Ok(tape.add(bilinear, lin_b)?)
}

/// Mean cross-entropy over candidate pairs.
pub fn re_loss(tape: &mut Tape, logits: Var, labels: &[i64]) -> Result<Var, ModelError> {
    Ok(tape.cross_entropy(logits, labels, IGNORE)?)
}

/// Emit a key-value link for every pair whose argmax class is 1.
pub fn re_predict(logits: &Tensor, pairs: &[(usize, usize)], doc: &Document) -> Vec<RelationLink> {
    argmax_rows(logits)
        .iter()
        .zip(pairs)
        .filter(|(&cls, _)| cls == 1)
        .map(|(_, &(h, t))| RelationLink {
            head: doc.entities[h].id,
            tail: doc.entities[t].id,
            label: RelationLabel::KeyValue,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{Lang, NormBox, Word};
    use crate::model::{encode, init_params};
    use crate::numerics::gradcheck::{check_probes, DEFAULT_STEP};
    use crate::numerics::{NumericsError, ParamStore};
    use crate::tokenizer::UnigramVocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> UnigramVocab {
        UnigramVocab::from_entries(
            [("a", -1.0), ("b", -1.5), ("ab", -2.5), ("cd", -2.0)]
                .into_iter()
                .map(|(p, lp)| (p.to_string(), lp)),
        )
        .unwrap()
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn_dim: 16,
            max_text_len: 8,
            visual_grid: (1, 1),
            ..ModelConfig::tiny(16)
        }
    }

    /// Two-entity form line: "ab" asks, "cd a" answers, plus one OTHER.
    fn form_doc() -> Document {
        let word = |text: &str, i: i64| Word {
            text: text.into(),
            bbox: NormBox::new(i * 200, 100, i * 200 + 180, 200).unwrap(),
            line: 0,
        };
        Document {
            id: "f0".into(),
            lang: Lang::En,
            page_w: 100,
            page_h: 100,
            words: vec![word("ab", 0), word("cd", 1), word("a", 2), word("b", 3)],
            raster: None,
            entities: vec![
                EntitySpan {
                    id: 0,
                    first_word: 0,
                    last_word: 0,
                    label: EntityLabel::Question,
                },
                EntitySpan {
                    id: 1,
                    first_word: 1,
                    last_word: 2,
                    label: EntityLabel::Answer,
                },
                EntitySpan {
                    id: 2,
                    first_word: 3,
                    last_word: 3,
                    label: EntityLabel::Other,
                },
            ],
            links: vec![RelationLink {
                head: 0,
                tail: 1,
                label: RelationLabel::KeyValue,
            }],
        }
    }

    fn store_with_heads(c: &ModelConfig) -> ParamStore {
        let mut store = init_params(c).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for (name, shape) in ser_param_specs(c).into_iter().chain(re_param_specs(c)) {
            store
                .register(&name, Tensor::rand_uniform(&shape, -0.02, 0.02, &mut r))
                .unwrap();
        }
        store
    }

    #[test]
    fn gold_tags_round_trip_through_decode() {
        let d = form_doc();
        let tags = bio::word_tags(&d);
        assert_eq!(tags, vec![3, 5, 6, 0]);
        let spans = bio::decode(&tags);
        assert_eq!(spans.len(), 2);
        assert_eq!(
            (spans[0].first_word, spans[0].last_word, spans[0].label),
            (0, 0, EntityLabel::Question)
        );
        assert_eq!(
            (spans[1].first_word, spans[1].last_word, spans[1].label),
            (1, 2, EntityLabel::Answer)
        );
    }

    #[test]
    fn decode_handles_dangling_and_adjacent_spans() {
        // I-HEADER out of nowhere opens a span
        assert_eq!(bio::decode(&[2, 2]).len(), 1);
        // adjacent spans of the same type split on B
        let spans = bio::decode(&[1, 1]);
        assert_eq!(spans.len(), 2);
        // type change without O splits too
        let spans = bio::decode(&[3, 4, 6, 0]);
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].label, EntityLabel::Answer);
        assert!(bio::decode(&[0, 0, 0]).is_empty());
        assert!(bio::decode(&[]).is_empty());
    }

    #[test]
    fn candidate_pairs_are_all_ordered_non_self_pairs() {
        assert_eq!(re_candidates(0), vec![]);
        assert_eq!(re_candidates(1), vec![]);
        let pairs = re_candidates(3);
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|&(h, t)| h != t));
        let unique: std::collections::BTreeSet<_> = pairs.iter().collect();
        assert_eq!(unique.len(), 6);
    }

    #[test]
    fn forced_one_hot_logits_recover_gold_spans() {
        let v = vocab();
        let c = cfg();
        let d = form_doc();
        let batch = EncodedBatch::build(&[&d], &v, &c).unwrap();
        let targets = ser_tag_targets(&batch, &[&d], &c);
        let t = c.token_slots();
        let mut data = vec![0.0; t * SER_TAGS];
        for slot in 0..t {
            let tag = targets[slot].max(0) as usize;
            data[slot * SER_TAGS + tag] = 5.0;
        }
        let logits = Tensor::new(&[t, SER_TAGS], data).unwrap();
        let spans = ser_predict(&logits, &batch, &[&d], &c);
        let gold: Vec<_> = d
            .entities
            .iter()
            .filter(|e| e.label != EntityLabel::Other)
            .map(|e| (e.first_word, e.last_word, e.label))
            .collect();
        let got: Vec<_> = spans[0]
            .iter()
            .map(|e| (e.first_word, e.last_word, e.label))
            .collect();
        assert_eq!(got, gold);

        let all_o = Tensor::zeros(&[t, SER_TAGS]);
        assert!(ser_predict(&all_o, &batch, &[&d], &c)[0].is_empty());
    }

    #[test]
    fn first_subword_rule_supervises_one_piece_per_word() {
        let v = vocab();
        let c = cfg();
        // "cdcd" splits into two pieces of one word
        let d = Document {
            words: vec![Word {
                text: "cdcd".into(),
                bbox: NormBox::new(0, 0, 400, 100).unwrap(),
                line: 0,
            }],
            entities: vec![EntitySpan {
                id: 0,
                first_word: 0,
                last_word: 0,
                label: EntityLabel::Header,
            }],
            links: vec![],
            ..form_doc()
        };
        let batch = EncodedBatch::build(&[&d], &v, &c).unwrap();
        assert_eq!(batch.tokens[0].len(), 2);
        let targets = ser_tag_targets(&batch, &[&d], &c);
        assert_eq!(targets[1], 1); // B-HEADER on the first piece
        assert_eq!(targets[2], IGNORE); // continuation piece ignored
    }

    #[test]
    fn ser_head_ignores_visual_positions() {
        let v = vocab();
        let c = cfg();
        let d = form_doc();
        let batch = EncodedBatch::build(&[&d], &v, &c).unwrap();
        let store = store_with_heads(&c);

        let run = |perturb: bool| -> Tensor {
            let mut tape = Tape::new();
            let leaves = store.leaves(&mut tape).unwrap();
            let ev = EncoderVars::new(&store, &leaves);
            let hidden = encode(&mut tape, &batch, &c, &ev).unwrap();
            let mut vals = tape.value(hidden).clone();
            if perturb {
                // scribble over every visual row of the hidden states
                let d_ = c.hidden;
                for p in 1..=c.visual_len() {
                    for j in 0..d_ {
                        vals.data_mut()[p * d_ + j] = 1e6;
                    }
                }
            }
            let h2 = tape.leaf(vals).unwrap();
            let logits = ser_logits(&mut tape, h2, &c, 1, &ev).unwrap();
            tape.value(logits).clone()
        };
        assert_eq!(run(false), run(true));
    }

    fn re_logit_values(store: &ParamStore, d: &Document) -> (Vec<(usize, usize)>, Tensor) {
        let v = vocab();
        let c = cfg();
        let batch = EncodedBatch::build(&[d], &v, &c).unwrap();
        let pairs = re_candidates(d.entities.len());
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape).unwrap();
        let ev = EncoderVars::new(store, &leaves);
        let hidden = encode(&mut tape, &batch, &c, &ev).unwrap();
        let logits = re_pair_logits(&mut tape, hidden, &batch, d, 0, &pairs, &c, &ev).unwrap();
        let vals = tape.value(logits).clone();
        (pairs, vals)
    }

    #[test]
    fn zeroed_biaffine_scores_zero_everywhere() {
        let c = cfg();
        let d = form_doc();
        let mut store = store_with_heads(&c);
        for name in ["head.re.u0", "head.re.u1", "head.re.v", "head.re.b"] {
            let id = store.find(name).unwrap();
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let (pairs, vals) = re_logit_values(&store, &d);
        assert_eq!(vals.shape(), &[pairs.len(), 2]);
        assert!(vals.data().iter().all(|&x| x == 0.0));
        // nothing crosses the argmax=1 bar, so no links come out
        assert!(re_predict(&vals, &pairs, &d).is_empty());
    }

    #[test]
    fn linear_term_scales_linearly_in_v() {
        let c = cfg();
        let d = form_doc();
        let mut store = store_with_heads(&c);
        for name in ["head.re.u0", "head.re.u1", "head.re.b"] {
            let id = store.find(name).unwrap();
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let (_, single) = re_logit_values(&store, &d);
        let vid = store.find("head.re.v").unwrap();
        for x in store.get_mut(vid).value.data_mut() {
            *x *= 2.0;
        }
        let (_, doubled) = re_logit_values(&store, &d);
        for (a, b) in single.data().iter().zip(doubled.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn forced_logits_match_gold_links_exactly() {
        let d = form_doc();
        let pairs = re_candidates(d.entities.len());
        let labels = re_gold_labels(&d, &pairs);
        assert_eq!(labels.iter().sum::<i64>(), 1);
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| if l == 1 { [0.0, 4.0] } else { [4.0, 0.0] })
            .collect();
        let logits = Tensor::new(&[pairs.len(), 2], data).unwrap();
        let links = re_predict(&logits, &pairs, &d);
        assert_eq!(links, d.links);

        let all_no_rel = Tensor::new(&[pairs.len(), 2], [1.0, 0.0].repeat(pairs.len())).unwrap();
        assert!(re_predict(&all_no_rel, &pairs, &d).is_empty());
    }

    #[test]
    fn truncated_entity_is_reported_by_name() {
        let v = vocab();
        let mut c = cfg();
        c.max_text_len = 3; // room for two pieces + EOS
        let d = form_doc();
        let batch = EncodedBatch::build(&[&d], &v, &c).unwrap();
        let err = entity_anchor(&batch, &d, 0, 2).unwrap_err();
        assert!(err.to_string().contains("entity 2"));
        assert!(err.to_string().contains("f0"));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let v = vocab();
        let c = cfg();
        let d = form_doc();
        let batch = EncodedBatch::build(&[&d], &v, &c).unwrap();
        let ser_targets = ser_tag_targets(&batch, &[&d], &c);
        let pairs = re_candidates(d.entities.len());
        let pair_labels = re_gold_labels(&d, &pairs);
        let store = store_with_heads(&c);

        let inputs: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        let probes: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| [0, t.len() / 2, t.len() - 1].into_iter().map(move |j| (i, j)))
            .collect();
        let worst = check_probes(
            &inputs,
            DEFAULT_STEP,
            &|tape, vars| {
                let ev = EncoderVars::new(&store, vars);
                let unwrap = |e: ModelError| -> NumericsError {
                    match e {
                        ModelError::InLayer { source, .. } => source,
                        ModelError::Numerics(source) => source,
                        other => panic!("non-numeric failure: {other}"),
                    }
                };
                let hidden = encode(tape, &batch, &c, &ev).map_err(unwrap)?;
                let logits = ser_logits(tape, hidden, &c, 1, &ev).map_err(unwrap)?;
                let ser = ser_loss(tape, logits, &ser_targets).map_err(unwrap)?;
                let rl = re_pair_logits(tape, hidden, &batch, &d, 0, &pairs, &c, &ev)
                    .map_err(unwrap)?;
                let re = re_loss(tape, rl, &pair_labels).map_err(unwrap)?;
                tape.add(ser, re)
            },
            &probes,
        )
        .unwrap();
        assert!(worst <= 1e-6, "worst rel err {worst}");
    }
}

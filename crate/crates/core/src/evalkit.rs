//! Entity- and relation-level micro F1 and result tables.
//!
//! Scoring is exact-match: an entity prediction counts iff its word span
//! and label both match a gold span, a relation counts iff the directed
//! (head, tail) pair matches. Matching is set-based per document, so
//! duplicates and ordering never change a score. Reports aggregate one
//! (precision, recall, F1) cell per language and an unweighted average
//! column, mirroring how multilingual form-understanding results are
//! usually tabled.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::docmodel::{Document, EntityLabel, EntitySpan, Lang, RelationLink};

/// Micro-aggregated match counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Tally {
    pub fn merge(&mut self, other: Tally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// (precision, recall, F1), each 0 when its denominator is 0.
    pub fn prf(self) -> (f64, f64, f64) {
        let p = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let r = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }
}

fn set_tally<K: Ord>(gold: BTreeSet<K>, pred: BTreeSet<K>) -> Tally {
    let tp = pred.intersection(&gold).count() as u64;
    Tally {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gold.len() as u64 - tp,
    }
}

/// Span key used for matching: (first word, last word, label). Spans with
/// the `other` label are outside the task and never scored.
fn entity_keys(spans: &[EntitySpan]) -> BTreeSet<(usize, usize, EntityLabel)> {
    spans
        .iter()
        .filter(|e| e.label != EntityLabel::Other)
        .map(|e| (e.first_word, e.last_word, e.label))
        .collect()
}

pub fn entity_counts(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Tally {
    assert_eq!(gold.len(), pred.len(), "document count mismatch");
    let mut total = Tally::default();
    for (g, p) in gold.iter().zip(pred) {
        total.merge(set_tally(entity_keys(g), entity_keys(p)));
    }
    total
}

/// Micro precision/recall/F1 over exact (first, last, label) span matches.
pub fn entity_f1(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> (f64, f64, f64) {
    entity_counts(gold, pred).prf()
}

/// Directed link key resolved through the entity table, so scores ignore
/// how entity ids happen to be numbered.
type LinkKey = ((usize, usize), (usize, usize));

fn link_keys(doc: &Document, links: &[RelationLink]) -> BTreeSet<LinkKey> {
    links
        .iter()
        .filter_map(|l| {
            let h = doc.entity(l.head)?;
            let t = doc.entity(l.tail)?;
            Some(((h.first_word, h.last_word), (t.first_word, t.last_word)))
        })
        .collect()
}

pub fn relation_counts(docs: &[&Document], pred: &[Vec<RelationLink>]) -> Tally {
    assert_eq!(docs.len(), pred.len(), "document count mismatch");
    let mut total = Tally::default();
    for (d, p) in docs.iter().zip(pred) {
        total.merge(set_tally(link_keys(d, &d.links), link_keys(d, p)));
    }
    total
}

/// Micro precision/recall/F1 over directed (head, tail) matches against
/// each document's gold links.
pub fn relation_f1(docs: &[&Document], pred: &[Vec<RelationLink>]) -> (f64, f64, f64) {
    relation_counts(docs, pred).prf()
}

/// One language column: precision, recall, F1.
pub type Cell = (f64, f64, f64);

/// Per-language results for one task under one training regime, plus the
/// unweighted average over the language columns that are present.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub regime: String,
    pub task: String,
    pub columns: Vec<Lang>,
    pub cells: BTreeMap<Lang, Cell>,
    /// Requested columns with no result; averages skip them.
    pub missing: Vec<Lang>,
    pub avg: Cell,
}

/// Assemble a report over `columns`. Languages without a result get a gap
/// marker in the rendered table and are left out of the average, with a
/// warning so a partial table is never mistaken for a full one.
pub fn build_report(
    regime: &str,
    task: &str,
    columns: &[Lang],
    results: &BTreeMap<Lang, Cell>,
) -> MetricReport {
    let mut cells = BTreeMap::new();
    let mut missing = Vec::new();
    for &lang in columns {
        match results.get(&lang) {
            Some(&c) => {
                cells.insert(lang, c);
            }
            None => missing.push(lang),
        }
    }
    if !missing.is_empty() {
        let names: Vec<&str> = missing.iter().map(|l| l.column_name()).collect();
        log::warn!(
            "{task} report under {regime}: no result for {}; average covers {} of {} columns",
            names.join(", "),
            cells.len(),
            columns.len()
        );
    }
    let n = cells.len().max(1) as f64;
    let avg = (
        cells.values().map(|c| c.0).sum::<f64>() / n,
        cells.values().map(|c| c.1).sum::<f64>() / n,
        cells.values().map(|c| c.2).sum::<f64>() / n,
    );
    MetricReport {
        regime: regime.to_string(),
        task: task.to_string(),
        columns: columns.to_vec(),
        cells,
        missing,
        avg,
    }
}

const GAP: &str = "--";

/// Aligned text table: one column per language plus Avg, one row each for
/// precision, recall, and F1.
pub fn render_text(report: &MetricReport) -> String {
    let mut head = vec![format!("{} {}", report.task, report.regime)];
    head.extend(report.columns.iter().map(|l| l.column_name().to_string()));
    head.push("Avg".to_string());

    let row = |name: &str, pick: fn(&Cell) -> f64, avg: f64| -> Vec<String> {
        let mut r = vec![name.to_string()];
        for lang in &report.columns {
            r.push(match report.cells.get(lang) {
                Some(c) => format!("{:.4}", pick(c)),
                None => GAP.to_string(),
            });
        }
        r.push(format!("{avg:.4}"));
        r
    };
    let rows = [
        head,
        row("P", |c| c.0, report.avg.0),
        row("R", |c| c.1, report.avg.1),
        row("F1", |c| c.2, report.avg.2),
    ];

    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for r in &rows {
        for (i, cell) in r.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{:>w$}", cell, w = widths[i]);
        }
        out.push('\n');
    }
    if !report.missing.is_empty() {
        let names: Vec<&str> = report.missing.iter().map(|l| l.column_name()).collect();
        let _ = writeln!(
            out,
            "note: missing {}; Avg covers {} of {} columns",
            names.join(", "),
            report.cells.len(),
            report.columns.len()
        );
    }
    out
}

/// CSV form: one row per present language column, then the average row.
pub fn render_csv(report: &MetricReport) -> String {
    let mut out = String::from("regime,task,column,precision,recall,f1\n");
    for lang in &report.columns {
        if let Some(c) = report.cells.get(lang) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                report.regime,
                report.task,
                lang.column_name(),
                c.0,
                c.1,
                c.2
            );
        }
    }
    let _ = writeln!(
        out,
        "{},{},Avg,{},{},{}",
        report.regime, report.task, report.avg.0, report.avg.1, report.avg.2
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{NormBox, RelationLabel, Word};
    use proptest::prelude::*;

    fn span(id: u32, first: usize, last: usize, label: EntityLabel) -> EntitySpan {
        EntitySpan {
            id,
            first_word: first,
            last_word: last,
            label,
        }
    }

    fn q(id: u32, first: usize, last: usize) -> EntitySpan {
        span(id, first, last, EntityLabel::Question)
    }

    #[test]
    fn identical_span_sets_score_one() {
        let gold = vec![vec![q(0, 0, 1), span(1, 2, 3, EntityLabel::Answer)]];
        assert_eq!(entity_f1(&gold, &gold), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_span_sets_score_zero() {
        let gold = vec![vec![q(0, 0, 1)]];
        let pred = vec![vec![q(0, 4, 5)]];
        assert_eq!(entity_f1(&gold, &pred), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_overlap_scores_half() {
        // gold {A, B}, pred {A, C}: one TP, one FP, one FN.
        let a = q(0, 0, 1);
        let b = span(1, 2, 3, EntityLabel::Answer);
        let c = span(2, 5, 6, EntityLabel::Answer);
        let got = entity_f1(&[vec![a, b]], &[vec![a, c]]);
        assert_eq!(got, (0.5, 0.5, 0.5));
    }

    #[test]
    fn label_must_match_not_just_the_span() {
        let gold = vec![vec![q(0, 0, 1)]];
        let pred = vec![vec![span(0, 0, 1, EntityLabel::Answer)]];
        assert_eq!(entity_f1(&gold, &pred), (0.0, 0.0, 0.0));
    }

    #[test]
    fn other_spans_are_not_scored() {
        let gold = vec![vec![q(0, 0, 1), span(1, 2, 2, EntityLabel::Other)]];
        let pred = vec![vec![q(9, 0, 1), span(8, 7, 7, EntityLabel::Other)]];
        assert_eq!(entity_f1(&gold, &pred), (1.0, 1.0, 1.0));
    }

    #[test]
    fn duplicate_predictions_collapse_to_one() {
        let gold = vec![vec![q(0, 0, 1)]];
        let pred = vec![vec![q(0, 0, 1), q(1, 0, 1)]];
        assert_eq!(entity_f1(&gold, &pred), (1.0, 1.0, 1.0));
    }

    #[test]
    fn micro_counts_pool_over_documents() {
        // doc 1: 1 TP of 1 gold; doc 2: 0 TP of 1 gold, 1 FP.
        let gold = vec![vec![q(0, 0, 1)], vec![q(0, 2, 3)]];
        let pred = vec![vec![q(0, 0, 1)], vec![q(0, 4, 5)]];
        let t = entity_counts(&gold, &pred);
        assert_eq!((t.tp, t.fp, t.fn_), (1, 1, 1));
        assert_eq!(entity_f1(&gold, &pred), (0.5, 0.5, 0.5));
    }

    fn word(x0: i64) -> Word {
        Word {
            text: "w".into(),
            bbox: NormBox::new(x0, 0, x0 + 10, 10).unwrap(),
            line: 0,
        }
    }

    fn link(head: u32, tail: u32) -> RelationLink {
        RelationLink {
            head,
            tail,
            label: RelationLabel::KeyValue,
        }
    }

    fn doc_with_links(ids: [u32; 4], links: Vec<RelationLink>) -> Document {
        Document {
            id: "d".into(),
            lang: Lang::En,
            page_w: 1000,
            page_h: 1000,
            words: (0..4).map(|i| word(i * 20)).collect(),
            raster: None,
            entities: (0..4)
                .map(|i| EntitySpan {
                    id: ids[i],
                    first_word: i,
                    last_word: i,
                    label: if i % 2 == 0 {
                        EntityLabel::Question
                    } else {
                        EntityLabel::Answer
                    },
                })
                .collect(),
            links,
        }
    }

    #[test]
    fn exact_link_match_scores_one() {
        let d = doc_with_links([0, 1, 2, 3], vec![link(0, 1), link(2, 3)]);
        let pred = vec![vec![link(0, 1), link(2, 3)]];
        assert_eq!(relation_f1(&[&d], &pred), (1.0, 1.0, 1.0));
    }

    #[test]
    fn reversing_direction_zeroes_the_score() {
        let d = doc_with_links([0, 1, 2, 3], vec![link(0, 1), link(2, 3)]);
        let pred = vec![vec![link(1, 0), link(3, 2)]];
        assert_eq!(relation_f1(&[&d], &pred), (0.0, 0.0, 0.0));
    }

    #[test]
    fn one_correct_of_three_predicted_against_two_gold() {
        let d = doc_with_links([0, 1, 2, 3], vec![link(0, 1), link(2, 3)]);
        let pred = vec![vec![link(0, 1), link(0, 3), link(2, 1)]];
        let (p, r, f1) = relation_f1(&[&d], &pred);
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
        assert!((r - 0.5).abs() < 1e-15);
        assert!((f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn link_scores_survive_entity_renumbering() {
        // Same geometry, entity ids shuffled; span-keyed matching should
        // treat the two documents as interchangeable.
        let d1 = doc_with_links([0, 1, 2, 3], vec![link(0, 1)]);
        let d2 = doc_with_links([7, 5, 9, 2], vec![link(7, 5)]);
        let pred_for_d2 = vec![vec![link(7, 5)]];
        assert_eq!(relation_f1(&[&d2], &pred_for_d2), (1.0, 1.0, 1.0));
        let t1 = relation_counts(&[&d1], &[vec![link(0, 1)]]);
        let t2 = relation_counts(&[&d2], &[vec![link(7, 5)]]);
        assert_eq!(t1, t2);
    }

    #[test]
    fn document_order_never_moves_the_score() {
        let gold = vec![vec![q(0, 0, 1)], vec![q(0, 2, 3)], vec![]];
        let pred = vec![vec![q(0, 0, 1)], vec![], vec![q(0, 9, 9)]];
        let fwd = entity_counts(&gold, &pred);
        let rev_gold: Vec<_> = gold.iter().rev().cloned().collect();
        let rev_pred: Vec<_> = pred.iter().rev().cloned().collect();
        assert_eq!(fwd, entity_counts(&rev_gold, &rev_pred));
    }

    #[test]
    fn all_perfect_cells_average_to_one() {
        let results: BTreeMap<Lang, Cell> =
            Lang::ALL.iter().map(|&l| (l, (1.0, 1.0, 1.0))).collect();
        let rep = build_report("LANG_SPECIFIC", "SER", &Lang::ALL, &results);
        assert_eq!(rep.avg, (1.0, 1.0, 1.0));
        assert!(rep.missing.is_empty());
    }

    #[test]
    fn published_large_model_row_averages_as_printed() {
        let f1s = [
            0.8225, 0.9161, 0.8033, 0.7830, 0.8098, 0.8275, 0.8361, 0.8273,
        ];
        let results: BTreeMap<Lang, Cell> = Lang::ALL
            .iter()
            .zip(f1s)
            .map(|(&l, f)| (l, (f, f, f)))
            .collect();
        let rep = build_report("LANG_SPECIFIC", "SER", &Lang::ALL, &results);
        assert!((rep.avg.2 - 0.8282).abs() < 5e-5, "avg {}", rep.avg.2);
    }

    #[test]
    fn single_column_average_equals_the_column() {
        let mut results = BTreeMap::new();
        results.insert(Lang::Zh, (0.9, 0.8, 0.8470588235294118));
        let rep = build_report("LANG_SPECIFIC", "RE", &[Lang::Zh], &results);
        assert_eq!(rep.avg, results[&Lang::Zh]);
        let text = render_text(&rep);
        assert!(text.contains("ZH"));
        assert!(!text.contains(GAP));
    }

    #[test]
    fn missing_cells_get_a_gap_and_shrink_the_average() {
        let mut results = BTreeMap::new();
        results.insert(Lang::En, (1.0, 1.0, 1.0));
        results.insert(Lang::Zh, (0.5, 0.5, 0.5));
        let rep = build_report("MULTITASK", "SER", &[Lang::En, Lang::Zh, Lang::Ja], &results);
        assert_eq!(rep.missing, vec![Lang::Ja]);
        assert!((rep.avg.2 - 0.75).abs() < 1e-15);
        let text = render_text(&rep);
        assert!(text.contains(GAP));
        assert!(text.contains("missing JA"));
        let csv = render_csv(&rep);
        assert!(csv.lines().count() == 4); // header + EN + ZH + Avg
    }

    proptest! {
        #[test]
        fn f1_is_the_harmonic_mean_of_p_and_r(tp in 0u64..20, fp in 0u64..20, fn_ in 0u64..20) {
            let (p, r, f1) = Tally { tp, fp, fn_ }.prf();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((0.0..=1.0).contains(&r));
            if p + r > 0.0 {
                prop_assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
            } else {
                prop_assert_eq!(f1, 0.0);
            }
        }
    }
}

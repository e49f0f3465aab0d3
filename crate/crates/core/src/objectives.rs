//! Pre-training objectives: masked visual-language modeling over text
//! tokens, text-image alignment via covered lines, and text-image
//! matching via in-batch raster swaps. All corruption is a deterministic
//! function of the batch and the caller's RNG.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::docmodel::{Document, Raster};
use crate::model::{EncodedBatch, EncoderVars, ModelConfig, ModelError};
use crate::numerics::{Tape, Tensor, Var};
use crate::tokenizer::{UnigramVocab, MASK};

/// Target value marking "no supervision here".
pub const IGNORE: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRates {
    /// Chance a text token enters the MVLM objective.
    pub mvlm_select: f64,
    /// Among selected: chance of replacement by the mask token.
    pub mvlm_mask: f64,
    /// Among selected: chance of replacement by a random real piece.
    /// The remainder keeps the original token.
    pub mvlm_random: f64,
    /// Chance each text line is covered on the page image.
    pub tia_cover: f64,
    /// Chance a sample joins the raster-swap subset.
    pub tim_swap: f64,
}

impl Default for PretrainRates {
    fn default() -> Self {
        PretrainRates {
            mvlm_select: 0.15,
            mvlm_mask: 0.8,
            mvlm_random: 0.1,
            tia_cover: 0.15,
            tim_swap: 0.5,
        }
    }
}

/// One corrupted batch with the targets of all three objectives.
/// Targets are [`IGNORE`] wherever an objective does not apply.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub enc: EncodedBatch,
    /// `[B * token_slots]`: original id at MVLM-selected positions.
    pub mvlm_targets: Vec<i64>,
    /// `[B * token_slots]`: 1 covered, 0 visible; ignore at special
    /// slots, MVLM-selected positions, and raster-less samples.
    pub tia_targets: Vec<i64>,
    /// `[B]`: 1 when text and image belong together, 0 after a swap.
    pub tim_targets: Vec<i64>,
    /// Covered line ids per sample.
    pub covered_lines: Vec<Vec<u32>>,
    /// True where the sample had no raster, so alignment was skipped.
    pub tia_skipped: Vec<bool>,
}

/// In-place MVLM corruption of `ids`. Only `eligible` slots may be
/// selected; returns per-slot targets (original id where selected).
pub fn apply_mvlm(
    ids: &mut [u32],
    eligible: &[bool],
    vocab: &UnigramVocab,
    rates: &PretrainRates,
    rng: &mut ChaCha8Rng,
) -> Vec<i64> {
    let real = vocab.real_ids();
    let mut targets = vec![IGNORE; ids.len()];
    for (i, id) in ids.iter_mut().enumerate() {
        if !eligible[i] || rng.random::<f64>() >= rates.mvlm_select {
            continue;
        }
        targets[i] = *id as i64;
        let branch = rng.random::<f64>();
        if branch < rates.mvlm_mask {
            *id = MASK;
        } else if branch < rates.mvlm_mask + rates.mvlm_random {
            *id = rng.random_range(real.clone());
        }
    }
    targets
}

/// Zero the pixels of every word box on the given lines.
pub fn cover_lines(doc: &Document, raster: &mut Raster, lines: &[u32]) {
    for word in &doc.words {
        if lines.contains(&word.line) {
            raster.fill_rect(word.bbox, 0);
        }
    }
}

/// Sample lines to cover (each independently with `tia_cover`) and
/// return the covered raster plus the chosen line ids. `None` when the
/// document has no raster.
pub fn apply_tia(
    doc: &Document,
    rates: &PretrainRates,
    rng: &mut ChaCha8Rng,
) -> Option<(Raster, Vec<u32>)> {
    let mut raster = doc.raster.clone()?;
    let n_lines = doc.words.iter().map(|w| w.line + 1).max().unwrap_or(0);
    let covered: Vec<u32> = (0..n_lines)
        .filter(|_| rng.random::<f64>() < rates.tia_cover)
        .collect();
    cover_lines(doc, &mut raster, &covered);
    Some((raster, covered))
}

/// Swap rasters between batch members: each raster-bearing sample joins
/// the swap subset with `tim_swap`; the subset's rasters rotate one
/// step, a derangement whenever it has two or more members. Returns the
/// match labels (0 = swapped).
pub fn apply_tim(
    rasters: &mut [Option<Raster>],
    rates: &PretrainRates,
    rng: &mut ChaCha8Rng,
) -> Vec<i64> {
    let mut labels = vec![1i64; rasters.len()];
    let subset: Vec<usize> = (0..rasters.len())
        .filter(|&i| rasters[i].is_some() && rng.random::<f64>() < rates.tim_swap)
        .collect();
    if subset.len() < 2 {
        return labels;
    }
    let mut moved: Vec<Option<Raster>> = subset.iter().map(|&i| rasters[i].take()).collect();
    moved.rotate_right(1);
    for (&i, r) in subset.iter().zip(moved) {
        rasters[i] = r;
        labels[i] = 0;
    }
    labels
}

/// Corrupt a fresh batch for one pre-training step: TIA covering per
/// document, TIM swapping across the batch, then MVLM over token ids.
pub fn build_pretrain_batch(
    docs: &[&Document],
    vocab: &UnigramVocab,
    cfg: &ModelConfig,
    rates: &PretrainRates,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainBatch, ModelError> {
    let mut enc = EncodedBatch::build(docs, vocab, cfg)?;
    let b = enc.batch;
    let t = cfg.token_slots();

    let mut rasters: Vec<Option<Raster>> = Vec::with_capacity(b);
    let mut covered_lines = Vec::with_capacity(b);
    let mut tia_skipped = Vec::with_capacity(b);
    for doc in docs {
        match apply_tia(doc, rates, rng) {
            Some((raster, covered)) => {
                rasters.push(Some(raster));
                covered_lines.push(covered);
                tia_skipped.push(false);
            }
            None => {
                rasters.push(None);
                covered_lines.push(Vec::new());
                tia_skipped.push(true);
            }
        }
    }

    let tim_targets = apply_tim(&mut rasters, rates, rng);
    for (bi, raster) in rasters.iter().enumerate() {
        if let Some(r) = raster {
            enc.load_raster(bi, r, cfg);
        }
    }

    // TIA labels against the sample's own lines; a swapped-in raster
    // carries no evidence for them, so swapped samples read as covered
    let mut tia_targets = vec![IGNORE; b * t];
    for bi in 0..b {
        if tia_skipped[bi] {
            continue;
        }
        for (i, tok) in enc.tokens[bi].iter().enumerate() {
            let line = docs[bi].words[tok.word_index].line;
            let covered = tim_targets[bi] == 0 || covered_lines[bi].contains(&line);
            tia_targets[bi * t + 1 + i] = covered as i64;
        }
    }

    let eligible: Vec<bool> = (0..b * t)
        .map(|i| {
            enc.text_mask[i] && !crate::tokenizer::UnigramVocab::is_special(enc.token_ids[i])
        })
        .collect();
    let mvlm_targets = apply_mvlm(&mut enc.token_ids, &eligible, vocab, rates, rng);
    for (i, &m) in mvlm_targets.iter().enumerate() {
        if m != IGNORE {
            tia_targets[i] = IGNORE;
        }
    }

    Ok(PretrainBatch {
        enc,
        mvlm_targets,
        tia_targets,
        tim_targets,
        covered_lines,
        tia_skipped,
    })
}

/// Per-objective scalar losses. `total` is their exact sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mvlm: f64,
    pub tia: f64,
    pub tim: f64,
    pub total: f64,
}

/// (name, shape) of the pre-training head parameters.
pub fn pretrain_param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden;
    vec![
        ("head.mvlm.w".into(), vec![d, cfg.vocab_size]),
        ("head.mvlm.b".into(), vec![cfg.vocab_size]),
        ("head.tia.w".into(), vec![d, 2]),
        ("head.tia.b".into(), vec![2]),
        ("head.tim.w".into(), vec![d, 2]),
        ("head.tim.b".into(), vec![2]),
    ]
}

fn head_loss(
    tape: &mut Tape,
    rows: Var,
    w: Var,
    b: Var,
    targets: &[i64],
    what: &str,
) -> Result<(Var, f64), ModelError> {
    if targets.iter().all(|&t| t == IGNORE) {
        log::warn!("{what}: no supervised positions in batch, contributing 0");
        let zero = tape.leaf(Tensor::scalar(0.0))?;
        return Ok((zero, 0.0));
    }
    let xw = tape.matmul(rows, w)?;
    let logits = tape.add(xw, b)?;
    let loss = tape.cross_entropy(logits, targets, IGNORE)?;
    let value = tape.value(loss).item();
    Ok((loss, value))
}

/// Combined pre-training loss: vocabulary prediction at MVLM-selected
/// text positions, covered/visible classification at supervised text
/// positions, and match/swap classification at BOS. Returns the root
/// variable for backward plus the per-objective values.
pub fn pretrain_loss(
    tape: &mut Tape,
    hidden: Var,
    pb: &PretrainBatch,
    cfg: &ModelConfig,
    ev: &EncoderVars,
) -> Result<(Var, LossReport), ModelError> {
    let (b, s, d) = (pb.enc.batch, cfg.seq_len(), cfg.hidden);
    let t = cfg.token_slots();
    let flat = tape.reshape(hidden, &[b * s, d])?;

    let text_rows: Vec<usize> = (0..b * t)
        .map(|i| (i / t) * s + cfg.seq_pos_of_slot(i % t))
        .collect();
    let text = tape.gather_rows(flat, &text_rows)?;
    let (mvlm_var, mvlm) = head_loss(
        tape,
        text,
        ev.var("head.mvlm.w")?,
        ev.var("head.mvlm.b")?,
        &pb.mvlm_targets,
        "mvlm",
    )?;
    let (tia_var, tia) = head_loss(
        tape,
        text,
        ev.var("head.tia.w")?,
        ev.var("head.tia.b")?,
        &pb.tia_targets,
        "tia",
    )?;

    let bos_rows: Vec<usize> = (0..b).map(|bi| bi * s).collect();
    let bos = tape.gather_rows(flat, &bos_rows)?;
    let (tim_var, tim) = head_loss(
        tape,
        bos,
        ev.var("head.tim.w")?,
        ev.var("head.tim.b")?,
        &pb.tim_targets,
        "tim",
    )?;

    let partial = tape.add(mvlm_var, tia_var)?;
    let total_var = tape.add(partial, tim_var)?;
    let total = tape.value(total_var).item();
    Ok((
        total_var,
        LossReport {
            mvlm,
            tia,
            tim,
            total,
        },
    ))
}

//! The multimodal document encoder. Text tokens and image patches share
//! one sequence: token/patch embeddings plus 1D position, segment, and
//! six-way layout lookups, then a post-layernorm transformer stack whose
//! attention logits carry learned relative-position biases for sequence
//! distance and box-center offsets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::docmodel::{Document, NormBox, Raster};
use crate::numerics::{NumericsError, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{SubwordToken, UnigramVocab, BOS, EOS, PAD};

pub const PATCH_SIDE: u32 = 32;
/// Pixels per visual patch (the patch projection's input width).
pub const PATCH_PIXELS: usize = (PATCH_SIDE * PATCH_SIDE) as usize;
pub const COORD_BINS: usize = 1001;
/// Additive logit for masked attention targets: finite, but far enough
/// down that softmax underflows the weight to an exact zero.
pub const MASKED_LOGIT: f64 = -1e30;
pub const LN_EPS: f64 = 1e-12;
/// Hard ceiling on sequence length across presets.
pub const MAX_SEQ: usize = 512;

const FULL_PAGE: NormBox = NormBox {
    x0: 0,
    y0: 0,
    x1: 1000,
    y1: 1000,
};
const EMPTY_BOX: NormBox = NormBox {
    x0: 0,
    y0: 0,
    x1: 0,
    y1: 0,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {why}")]
    Config { why: String },
    #[error("layer {layer}: {source}")]
    InLayer {
        layer: usize,
        #[source]
        source: NumericsError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Token slots after BOS: text pieces, then EOS, then padding.
    pub max_text_len: usize,
    /// (rows, cols) of the visual patch grid.
    pub visual_grid: (usize, usize),
    pub coord_bins: usize,
    /// (K, s) for sequence-distance buckets.
    pub rel_1d: (i64, i64),
    /// (K, s) for box-center offset buckets, in normalized page units.
    pub rel_2d: (i64, i64),
    pub seed: u64,
}

impl ModelConfig {
    pub fn tiny(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 32,
            ffn_dim: 64,
            vocab_size,
            max_text_len: 48,
            visual_grid: (2, 2),
            coord_bins: COORD_BINS,
            rel_1d: (32, 1),
            rel_2d: (16, 32),
            seed: 42,
        }
    }

    pub fn base(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 12,
            heads: 12,
            hidden: 768,
            ffn_dim: 3072,
            max_text_len: 462,
            visual_grid: (7, 7),
            ..ModelConfig::tiny(vocab_size)
        }
    }

    pub fn large(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 24,
            heads: 16,
            hidden: 1024,
            ffn_dim: 4096,
            max_text_len: 462,
            visual_grid: (7, 7),
            ..ModelConfig::tiny(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |why: String| Err(ModelError::Config { why });
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if self.vocab_size <= crate::tokenizer::SPECIAL_PIECES.len() {
            return bad(format!("vocab_size {} leaves no real pieces", self.vocab_size));
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must fit at least one piece plus EOS".into());
        }
        if self.visual_grid.0 == 0 || self.visual_grid.1 == 0 {
            return bad("visual grid must be non-empty".into());
        }
        if self.coord_bins != COORD_BINS {
            return bad(format!(
                "coord_bins {} does not cover the 0..=1000 grid",
                self.coord_bins
            ));
        }
        if self.rel_1d.0 <= 0 || self.rel_1d.1 <= 0 || self.rel_2d.0 <= 0 || self.rel_2d.1 <= 0 {
            return bad("relative bucket counts and widths must be positive".into());
        }
        if self.seq_len() > MAX_SEQ {
            return bad(format!(
                "sequence length {} exceeds the {MAX_SEQ} ceiling",
                self.seq_len()
            ));
        }
        Ok(())
    }

    /// Visual positions (patch count).
    pub fn visual_len(&self) -> usize {
        self.visual_grid.0 * self.visual_grid.1
    }

    /// Token slots: BOS plus the text region.
    pub fn token_slots(&self) -> usize {
        1 + self.max_text_len
    }

    /// Text pieces that fit, leaving room for EOS.
    pub fn text_capacity(&self) -> usize {
        self.max_text_len - 1
    }

    /// Full sequence: BOS, visual patches, text region.
    pub fn seq_len(&self) -> usize {
        1 + self.visual_len() + self.max_text_len
    }

    /// Sequence position of a token slot (visual patches sit between BOS
    /// and the text region).
    pub fn seq_pos_of_slot(&self, slot: usize) -> usize {
        if slot == 0 {
            0
        } else {
            self.visual_len() + slot
        }
    }

    /// (height, width) the page raster is resampled to.
    pub fn raster_dims(&self) -> (u32, u32) {
        (
            self.visual_grid.0 as u32 * PATCH_SIDE,
            self.visual_grid.1 as u32 * PATCH_SIDE,
        )
    }

    /// Page region covered by each patch, in grid row-major order.
    pub fn patch_boxes(&self) -> Vec<NormBox> {
        let (gh, gw) = (self.visual_grid.0 as i32, self.visual_grid.1 as i32);
        let mut out = Vec::with_capacity(self.visual_len());
        for r in 0..gh {
            for c in 0..gw {
                out.push(NormBox {
                    x0: c * 1000 / gw,
                    y0: r * 1000 / gh,
                    x1: (c + 1) * 1000 / gw,
                    y1: (r + 1) * 1000 / gh,
                });
            }
        }
        out
    }
}

/// `clamp(floor(delta / s), -k, k) + k`, an index into a `2k+1` table.
pub fn relative_bucket(delta: i64, k: i64, s: i64) -> usize {
    (delta.div_euclid(s).clamp(-k, k) + k) as usize
}

/// One batch ready for the encoder: per-sample token ids and boxes over
/// `token_slots` slots, flattened patch pixels, and validity masks.
/// Kept subword tokens ride along for the objectives and task heads.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub batch: usize,
    /// `[B * token_slots]`, slot 0 is BOS.
    pub token_ids: Vec<u32>,
    /// `[B * token_slots]`; BOS and EOS carry the full-page box.
    pub token_boxes: Vec<NormBox>,
    /// `[B * visual_len * PATCH_PIXELS]`, grayscale in [0, 1].
    pub patches: Vec<f64>,
    /// `[B * token_slots]`, true where the slot holds BOS, a piece or EOS.
    pub text_mask: Vec<bool>,
    /// The pieces each sample kept after truncation.
    pub tokens: Vec<Vec<SubwordToken>>,
    pub doc_ids: Vec<String>,
}

impl EncodedBatch {
    pub fn build(
        docs: &[&Document],
        vocab: &UnigramVocab,
        cfg: &ModelConfig,
    ) -> Result<EncodedBatch, ModelError> {
        cfg.validate()?;
        let t = cfg.token_slots();
        let v = cfg.visual_len();
        let b = docs.len();
        let mut out = EncodedBatch {
            batch: b,
            token_ids: vec![PAD; b * t],
            token_boxes: vec![EMPTY_BOX; b * t],
            patches: vec![1.0; b * v * PATCH_PIXELS],
            text_mask: vec![false; b * t],
            tokens: Vec::with_capacity(b),
            doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        };
        let (rh, rw) = cfg.raster_dims();
        for (bi, doc) in docs.iter().enumerate() {
            let mut pieces = crate::tokenizer::tokenize_document(doc, vocab);
            pieces.truncate(cfg.text_capacity());

            let row = bi * t;
            out.token_ids[row] = BOS;
            out.token_boxes[row] = FULL_PAGE;
            out.text_mask[row] = true;
            for (i, p) in pieces.iter().enumerate() {
                out.token_ids[row + 1 + i] = p.piece_id;
                out.token_boxes[row + 1 + i] = p.bbox;
                out.text_mask[row + 1 + i] = true;
            }
            let eos = row + 1 + pieces.len();
            out.token_ids[eos] = EOS;
            out.token_boxes[eos] = FULL_PAGE;
            out.text_mask[eos] = true;

            if let Some(r) = &doc.raster {
                out.load_raster(bi, r, cfg);
            }
            let _ = (rh, rw);
            out.tokens.push(pieces);
        }
        Ok(out)
    }

    /// Replace sample `bi`'s patches with pixels from `raster`.
    pub fn load_raster(&mut self, bi: usize, raster: &Raster, cfg: &ModelConfig) {
        let (rh, rw) = cfg.raster_dims();
        let scaled = if (raster.w, raster.h) == (rw, rh) {
            raster.clone()
        } else {
            raster.resampled(rw, rh)
        };
        let (gh, gw) = cfg.visual_grid;
        let base = bi * cfg.visual_len() * PATCH_PIXELS;
        for gr in 0..gh {
            for gc in 0..gw {
                let patch = base + (gr * gw + gc) * PATCH_PIXELS;
                for py in 0..PATCH_SIDE as usize {
                    for px in 0..PATCH_SIDE as usize {
                        let x = gc as u32 * PATCH_SIDE + px as u32;
                        let y = gr as u32 * PATCH_SIDE + py as u32;
                        self.patches[patch + py * PATCH_SIDE as usize + px] =
                            scaled.get(x, y) as f64 / 255.0;
                    }
                }
            }
        }
    }

    /// Kept pieces of sample `b`.
    pub fn n_pieces(&self, b: usize) -> usize {
        self.tokens[b].len()
    }

    /// Per-sequence-position validity: BOS and visual patches always,
    /// text slots where they hold a real token.
    pub fn seq_mask(&self, cfg: &ModelConfig) -> Vec<bool> {
        let (s, t, v) = (cfg.seq_len(), cfg.token_slots(), cfg.visual_len());
        let mut mask = vec![false; self.batch * s];
        for b in 0..self.batch {
            mask[b * s] = true;
            for p in 0..v {
                mask[b * s + 1 + p] = true;
            }
            for slot in 1..t {
                mask[b * s + cfg.seq_pos_of_slot(slot)] = self.text_mask[b * t + slot];
            }
        }
        mask
    }
}

/// Canonical parameter list for a config: (name, shape), in registration
/// order. Checkpoints, init, and the optimizer all follow this order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden;
    let mut specs: Vec<(String, Vec<usize>)> = vec![
        ("embed.token".into(), vec![cfg.vocab_size, d]),
        ("embed.pos".into(), vec![cfg.seq_len(), d]),
        ("embed.seg".into(), vec![2, d]),
        ("embed.patch.w".into(), vec![PATCH_PIXELS, d]),
        ("embed.patch.b".into(), vec![d]),
    ];
    for axis in ["x0", "y0", "x1", "y1", "w", "h"] {
        specs.push((format!("embed.layout.{axis}"), vec![cfg.coord_bins, d]));
    }
    specs.push(("attn.bias.1d".into(), vec![cfg.heads, (2 * cfg.rel_1d.0 + 1) as usize]));
    let b2d = (2 * cfg.rel_2d.0 + 1) as usize;
    specs.push(("attn.bias.x".into(), vec![cfg.heads, b2d]));
    specs.push(("attn.bias.y".into(), vec![cfg.heads, b2d]));
    for i in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("layer{i}.attn.{w}"), vec![d, d]));
            specs.push((format!("layer{i}.attn.{}", w.replace('w', "b")), vec![d]));
        }
        specs.push((format!("layer{i}.ln1.gamma"), vec![d]));
        specs.push((format!("layer{i}.ln1.beta"), vec![d]));
        specs.push((format!("layer{i}.ffn.w1"), vec![d, cfg.ffn_dim]));
        specs.push((format!("layer{i}.ffn.b1"), vec![cfg.ffn_dim]));
        specs.push((format!("layer{i}.ffn.w2"), vec![cfg.ffn_dim, d]));
        specs.push((format!("layer{i}.ffn.b2"), vec![d]));
        specs.push((format!("layer{i}.ln2.gamma"), vec![d]));
        specs.push((format!("layer{i}.ln2.beta"), vec![d]));
    }
    specs
}

/// Seeded-uniform initialization of every encoder parameter. Layernorm
/// scales start at one and shifts at zero so early activations keep unit
/// variance; everything else is uniform(-0.02, 0.02).
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    for (name, shape) in param_specs(cfg) {
        let value = if name.ends_with(".gamma") {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with(".beta") {
            Tensor::zeros(&shape)
        } else {
            Tensor::rand_uniform(&shape, -0.02, 0.02, &mut rng)
        };
        store.register(&name, value).map_err(ModelError::Numerics)?;
    }
    Ok(store)
}

/// Check that `store` holds exactly the parameters `cfg` requires.
pub fn check_params(cfg: &ModelConfig, store: &ParamStore) -> Result<(), ModelError> {
    for (name, shape) in param_specs(cfg) {
        let id = store
            .find(&name)
            .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
        let got = store.get(id).value.shape();
        if got != shape.as_slice() {
            return Err(ModelError::ParamShape {
                name,
                got: got.to_vec(),
                want: shape,
            });
        }
    }
    Ok(())
}

/// Parameters staged on a tape as leaves, addressable by name.
pub struct EncoderVars<'a> {
    store: &'a ParamStore,
    leaves: &'a [Var],
}

impl<'a> EncoderVars<'a> {
    pub fn new(store: &'a ParamStore, leaves: &'a [Var]) -> EncoderVars<'a> {
        EncoderVars { store, leaves }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.store
            .find(name)
            .map(|id| self.leaves[id.index()])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
}

fn center_x(b: NormBox) -> i64 {
    (b.x0 as i64 + b.x1 as i64).div_euclid(2)
}

fn center_y(b: NormBox) -> i64 {
    (b.y0 as i64 + b.y1 as i64).div_euclid(2)
}

/// Buckets for sequence-position differences, shared by every sample:
/// `seq * seq` entries, row = attending position.
pub fn rel_1d_indices(cfg: &ModelConfig) -> Vec<usize> {
    let s = cfg.seq_len();
    let (k, w) = cfg.rel_1d;
    let mut idx = Vec::with_capacity(s * s);
    for i in 0..s as i64 {
        for j in 0..s as i64 {
            idx.push(relative_bucket(j - i, k, w));
        }
    }
    idx
}

/// Buckets for box-center offsets along x and y: `batch * seq * seq`
/// entries each, since token boxes differ per sample.
pub fn rel_2d_indices(cfg: &ModelConfig, batch: &EncodedBatch) -> (Vec<usize>, Vec<usize>) {
    let s = cfg.seq_len();
    let t = cfg.token_slots();
    let v = cfg.visual_len();
    let patch_boxes = cfg.patch_boxes();
    let (k, w) = cfg.rel_2d;
    let mut ix = Vec::with_capacity(batch.batch * s * s);
    let mut iy = Vec::with_capacity(batch.batch * s * s);
    for b in 0..batch.batch {
        let box_at = |pos: usize| -> NormBox {
            if pos == 0 {
                batch.token_boxes[b * t]
            } else if pos <= v {
                patch_boxes[pos - 1]
            } else {
                batch.token_boxes[b * t + pos - v]
            }
        };
        let centers: Vec<(i64, i64)> = (0..s)
            .map(|p| {
                let bx = box_at(p);
                (center_x(bx), center_y(bx))
            })
            .collect();
        for &(cxi, cyi) in &centers {
            for &(cxj, cyj) in &centers {
                ix.push(relative_bucket(cxj - cxi, k, w));
                iy.push(relative_bucket(cyj - cyi, k, w));
            }
        }
    }
    (ix, iy)
}

/// Additive attention mask `[B, heads, S, S]`: zero where the key
/// position is real, `MASKED_LOGIT` where it is padding.
pub fn attention_mask(cfg: &ModelConfig, batch: &EncodedBatch) -> Tensor {
    let s = cfg.seq_len();
    let mask = batch.seq_mask(cfg);
    let mut data = vec![0.0; batch.batch * cfg.heads * s * s];
    for b in 0..batch.batch {
        for h in 0..cfg.heads {
            let base = (b * cfg.heads + h) * s * s;
            for i in 0..s {
                for j in 0..s {
                    if !mask[b * s + j] {
                        data[base + i * s + j] = MASKED_LOGIT;
                    }
                }
            }
        }
    }
    Tensor::new(&[batch.batch, cfg.heads, s, s], data).expect("mask shape")
}

/// Relative-bias bundle for one attention call.
pub struct AttnBias<'a> {
    pub table_1d: Var,
    pub table_x: Var,
    pub table_y: Var,
    pub idx_1d: &'a [usize],
    pub idx_x: &'a [usize],
    pub idx_y: &'a [usize],
}

/// Scaled dot-product attention over `[B, H, S, d_h]` inputs with the
/// three relative-bias terms and the additive mask folded into the
/// logits before softmax.
pub fn spatial_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: &AttnBias,
    mask: Var,
) -> Result<Var, NumericsError> {
    let shape = tape.value(q).shape().to_vec();
    let (b, s, dh) = (shape[0], shape[2], shape[3]);
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let b1 = tape.rel_bias(bias.table_1d, bias.idx_1d, b, s)?;
    let bx = tape.rel_bias(bias.table_x, bias.idx_x, b, s)?;
    let by = tape.rel_bias(bias.table_y, bias.idx_y, b, s)?;
    let mut logits = tape.add(scaled, b1)?;
    logits = tape.add(logits, bx)?;
    logits = tape.add(logits, by)?;
    logits = tape.add(logits, mask)?;
    let weights = tape.softmax(logits, 3)?;
    tape.matmul(weights, v)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Input embeddings `[B, S, hidden]`: the modality-specific sums for the
/// token and patch positions, interleaved into sequence order.
pub fn embed(
    tape: &mut Tape,
    batch: &EncodedBatch,
    cfg: &ModelConfig,
    ev: &EncoderVars,
) -> Result<Var, ModelError> {
    let (b, t, v, s, d) = (
        batch.batch,
        cfg.token_slots(),
        cfg.visual_len(),
        cfg.seq_len(),
        cfg.hidden,
    );

    // text rows: token + position + segment + layout, [B*T, d]
    let tok = tape.embedding(ev.var("embed.token")?, &batch.token_ids)?;
    let text_pos: Vec<usize> = (0..b * t)
        .map(|i| cfg.seq_pos_of_slot(i % t))
        .collect();
    let pos = tape.gather_rows(ev.var("embed.pos")?, &text_pos)?;
    let seg = tape.gather_rows(ev.var("embed.seg")?, &vec![0; b * t])?;
    let mut text = tape.add(tok, pos)?;
    text = tape.add(text, seg)?;
    text = add_layout(tape, text, &batch.token_boxes, ev)?;

    // visual rows: patch projection + position + segment + layout, [B*V, d]
    let patches = tape.leaf(Tensor::new(&[b * v, PATCH_PIXELS], batch.patches.clone())?)?;
    let mut vis = linear(tape, patches, ev.var("embed.patch.w")?, ev.var("embed.patch.b")?)?;
    let vis_pos: Vec<usize> = (0..b * v).map(|i| 1 + i % v).collect();
    let pos = tape.gather_rows(ev.var("embed.pos")?, &vis_pos)?;
    vis = tape.add(vis, pos)?;
    let seg = tape.gather_rows(ev.var("embed.seg")?, &vec![1; b * v])?;
    vis = tape.add(vis, seg)?;
    let patch_boxes: Vec<NormBox> = {
        let per = cfg.patch_boxes();
        (0..b * v).map(|i| per[i % v]).collect()
    };
    vis = add_layout(tape, vis, &patch_boxes, ev)?;

    // interleave to sequence order: BOS, patches, text region
    let stacked = tape.concat_rows(text, vis)?;
    let mut order = Vec::with_capacity(b * s);
    for bi in 0..b {
        order.push(bi * t);
        for p in 0..v {
            order.push(b * t + bi * v + p);
        }
        for slot in 1..t {
            order.push(bi * t + slot);
        }
    }
    let seq = tape.gather_rows(stacked, &order)?;
    Ok(tape.reshape(seq, &[b, s, d])?)
}

/// Add the six layout lookups for `boxes` onto rows `x` (`[rows, d]`).
fn add_layout(
    tape: &mut Tape,
    x: Var,
    boxes: &[NormBox],
    ev: &EncoderVars,
) -> Result<Var, ModelError> {
    let coord = |f: fn(&NormBox) -> i32| -> Vec<usize> {
        boxes.iter().map(|b| f(b) as usize).collect()
    };
    let lookups: [(&str, Vec<usize>); 6] = [
        ("embed.layout.x0", coord(|b| b.x0)),
        ("embed.layout.y0", coord(|b| b.y0)),
        ("embed.layout.x1", coord(|b| b.x1)),
        ("embed.layout.y1", coord(|b| b.y1)),
        ("embed.layout.w", coord(|b| b.x1 - b.x0)),
        ("embed.layout.h", coord(|b| b.y1 - b.y0)),
    ];
    let mut acc = x;
    for (name, ids) in lookups {
        let rows = tape.gather_rows(ev.var(name)?, &ids)?;
        acc = tape.add(acc, rows)?;
    }
    Ok(acc)
}

/// Run the full encoder: embeddings, then `layers` post-layernorm blocks
/// of biased attention and GELU FFN. Returns hidden states `[B, S, d]`.
pub fn encode(
    tape: &mut Tape,
    batch: &EncodedBatch,
    cfg: &ModelConfig,
    ev: &EncoderVars,
) -> Result<Var, ModelError> {
    let mut x = embed(tape, batch, cfg, ev)?;
    if cfg.layers == 0 {
        return Ok(x);
    }
    // surface missing parameters up front, so the per-layer closures can
    // treat lookups as infallible and only numeric failures carry a layer
    for (name, _) in param_specs(cfg) {
        ev.var(&name)?;
    }
    let (b, s, d) = (batch.batch, cfg.seq_len(), cfg.hidden);
    let (h, dh) = (cfg.heads, cfg.hidden / cfg.heads);
    let idx_1d = rel_1d_indices(cfg);
    let (idx_x, idx_y) = rel_2d_indices(cfg, batch);
    let mask = tape.leaf(attention_mask(cfg, batch))?;
    let bias = AttnBias {
        table_1d: ev.var("attn.bias.1d")?,
        table_x: ev.var("attn.bias.x")?,
        table_y: ev.var("attn.bias.y")?,
        idx_1d: &idx_1d,
        idx_x: &idx_x,
        idx_y: &idx_y,
    };

    for layer in 0..cfg.layers {
        let n = |suffix: &str| format!("layer{layer}.{suffix}");
        let step = |tape: &mut Tape, ev: &EncoderVars, x: Var| -> Result<Var, NumericsError> {
            let split = |tape: &mut Tape, y: Var| -> Result<Var, NumericsError> {
                let r = tape.reshape(y, &[b, s, h, dh])?;
                tape.swap12(r)
            };
            let q = linear(tape, x, ev.var(&n("attn.wq")).unwrap(), ev.var(&n("attn.bq")).unwrap())?;
            let k = linear(tape, x, ev.var(&n("attn.wk")).unwrap(), ev.var(&n("attn.bk")).unwrap())?;
            let v = linear(tape, x, ev.var(&n("attn.wv")).unwrap(), ev.var(&n("attn.bv")).unwrap())?;
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let ctx = spatial_attention(tape, q, k, v, &bias, mask)?;
            let merged = tape.swap12(ctx)?;
            let merged = tape.reshape(merged, &[b, s, d])?;
            let out = linear(
                tape,
                merged,
                ev.var(&n("attn.wo")).unwrap(),
                ev.var(&n("attn.bo")).unwrap(),
            )?;
            let res = tape.add(x, out)?;
            let x1 = tape.layer_norm(
                res,
                ev.var(&n("ln1.gamma")).unwrap(),
                ev.var(&n("ln1.beta")).unwrap(),
                LN_EPS,
            )?;
            let hup = linear(tape, x1, ev.var(&n("ffn.w1")).unwrap(), ev.var(&n("ffn.b1")).unwrap())?;
            let act = tape.gelu(hup)?;
            let down = linear(
                tape,
                act,
                ev.var(&n("ffn.w2")).unwrap(),
                ev.var(&n("ffn.b2")).unwrap(),
            )?;
            let res2 = tape.add(x1, down)?;
            tape.layer_norm(
                res2,
                ev.var(&n("ln2.gamma")).unwrap(),
                ev.var(&n("ln2.beta")).unwrap(),
                LN_EPS,
            )
        };
        x = step(tape, ev, x).map_err(|source| ModelError::InLayer { layer, source })?;
    }
    Ok(x)
}

//! Optimization loops, checkpointing, and the training regimes.
//!
//! Both loops share the same recipe: Adam on a linear warmup/decay
//! schedule with global-norm gradient clipping, every random choice
//! drawn from counter-based generators so a (config, seed, data) triple
//! fixes the whole run bitwise. Checkpoints capture parameters and
//! optimizer moments exactly, and the schedulers are pure functions of
//! the step index, so a loaded run continues as if it never stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::docmodel::{parse_dataset, DocError, Document, EntitySpan, Lang, RelationLink};
use crate::evalkit;
use crate::heads::{
    re_candidates, re_gold_labels, re_loss, re_pair_logits, re_param_specs, re_predict,
    ser_logits, ser_loss, ser_param_specs, ser_predict, ser_tag_targets,
};
use crate::model::{
    encode, init_params, param_specs, EncodedBatch, EncoderVars, ModelConfig, ModelError,
};
use crate::numerics::{clip_global_norm, Adam, NumericsError, ParamStore, Tape, Tensor};
use crate::objectives::{build_pretrain_batch, pretrain_loss, pretrain_param_specs, PretrainRates};
use crate::pipeline::{read_shard, record_to_document, PipelineError, SampleStream, SamplingSpec};
use crate::tokenizer::{TokenizerError, UnigramVocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {why}")]
    Config { why: String },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint {path}: {why}")]
    Corrupt { path: PathBuf, why: String },
    #[error("checkpoint version {got}, this build reads {want}")]
    Version { got: u32, want: u32 },
    #[error("tensor {name}: shape {got:?}, expected {want:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

fn config_err(why: impl Into<String>) -> TrainError {
    TrainError::Config { why: why.into() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Encoder size family. Only TINY trains in reasonable time on a desk
/// machine; BASE and LARGE exist so configs and checkpoints can describe
/// the published shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Preset {
    Tiny,
    Base,
    Large,
}

impl Preset {
    pub fn code(self) -> &'static str {
        match self {
            Preset::Tiny => "TINY",
            Preset::Base => "BASE",
            Preset::Large => "LARGE",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        match s.to_ascii_uppercase().as_str() {
            "TINY" => Some(Preset::Tiny),
            "BASE" => Some(Preset::Base),
            "LARGE" => Some(Preset::Large),
            _ => None,
        }
    }

    pub fn model_config(self, vocab_size: usize) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(vocab_size),
            Preset::Base => ModelConfig::base(vocab_size),
            Preset::Large => ModelConfig::large(vocab_size),
        }
    }
}

/// How fine-tuning relates training and evaluation languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    /// Train and evaluate within each language.
    LangSpecific,
    /// Train on English only, evaluate everywhere.
    ZeroShot,
    /// Train on every evaluated language jointly.
    Multitask,
}

impl Regime {
    pub fn code(self) -> &'static str {
        match self {
            Regime::LangSpecific => "LANG_SPECIFIC",
            Regime::ZeroShot => "ZERO_SHOT",
            Regime::Multitask => "MULTITASK",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s.to_ascii_uppercase().as_str() {
            "LANG_SPECIFIC" => Some(Regime::LangSpecific),
            "ZERO_SHOT" => Some(Regime::ZeroShot),
            "MULTITASK" => Some(Regime::Multitask),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    Pretrain,
    Ser,
    Re,
}

impl Task {
    pub fn code(self) -> &'static str {
        match self {
            Task::Pretrain => "PRETRAIN",
            Task::Ser => "SER",
            Task::Re => "RE",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s.to_ascii_uppercase().as_str() {
            "PRETRAIN" => Some(Task::Pretrain),
            "SER" => Some(Task::Ser),
            "RE" => Some(Task::Re),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub task: Task,
    pub regime: Regime,
    pub lr: f64,
    pub warmup_frac: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub train_langs: Vec<Lang>,
    pub eval_langs: Vec<Lang>,
    /// RE only: cap training negatives per document at this many times the
    /// positive count. None trains on every candidate pair. Evaluation
    /// always scores all pairs.
    pub re_negative_ratio: Option<f64>,
}

impl TrainConfig {
    /// Defaults for the tested desk-scale path.
    pub fn tiny(task: Task) -> TrainConfig {
        TrainConfig {
            preset: Preset::Tiny,
            task,
            regime: Regime::LangSpecific,
            lr: 1e-3,
            warmup_frac: 0.1,
            steps: 100,
            batch_size: 4,
            grad_clip: 1.0,
            seed: 42,
            train_langs: vec![Lang::En],
            eval_langs: vec![Lang::En],
            re_negative_ratio: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err(format!("lr must be finite and positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(config_err(format!(
                "warmup_frac must lie in [0, 1], got {}",
                self.warmup_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(config_err(format!(
                "grad_clip must be finite and positive, got {}",
                self.grad_clip
            )));
        }
        if let Some(r) = self.re_negative_ratio {
            if !(r.is_finite() && r > 0.0) {
                return Err(config_err(format!(
                    "re_negative_ratio must be finite and positive, got {r}"
                )));
            }
        }
        if self.train_langs.is_empty() {
            return Err(config_err("train_langs must name at least one language"));
        }
        for langs in [&self.train_langs, &self.eval_langs] {
            let set: std::collections::BTreeSet<Lang> = langs.iter().copied().collect();
            if set.len() != langs.len() {
                return Err(config_err("language lists must not repeat a language"));
            }
        }
        match self.regime {
            Regime::ZeroShot if self.train_langs != [Lang::En] => Err(config_err(format!(
                "ZERO_SHOT trains on English only, got {:?}",
                self.train_langs
            ))),
            Regime::Multitask if self.train_langs.len() < 2 => Err(config_err(
                "MULTITASK trains several languages jointly; give at least two",
            )),
            Regime::Multitask => {
                match self.eval_langs.iter().find(|l| !self.train_langs.contains(l)) {
                    Some(l) => Err(config_err(format!(
                        "MULTITASK evaluates only trained languages, {} is missing from train_langs",
                        l.code()
                    ))),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// Model shape for this run; the encoder init seed follows the run seed.
    pub fn model_for(&self, vocab_size: usize) -> ModelConfig {
        let mut m = self.preset.model_config(vocab_size);
        m.seed = self.seed;
        m
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.steps as f64 * self.warmup_frac).round() as u64
    }
}

/// Piecewise-linear learning rate: 0 at step 0, peak when warmup ends,
/// back to 0 at the final step. `t` counts completed optimizer updates,
/// so the t-th update (1-based) runs at `lr_at(cfg, t)`.
pub fn lr_at(cfg: &TrainConfig, t: u64) -> f64 {
    let total = cfg.steps;
    if total == 0 || t >= total {
        return 0.0;
    }
    let w = cfg.warmup_steps();
    if w > 0 && t <= w {
        cfg.lr * t as f64 / w as f64
    } else {
        cfg.lr * (total - t) as f64 / (total - w) as f64
    }
}

/// Everything a run needs to continue: model shape, parameters, optimizer
/// moments, and how many updates have been applied.
pub struct TrainState {
    pub model: ModelConfig,
    pub task: Task,
    pub step: u64,
    pub store: ParamStore,
    pub adam: Adam,
}

/// Head parameter shapes for a task.
pub fn head_specs(task: Task, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    match task {
        Task::Pretrain => pretrain_param_specs(cfg),
        Task::Ser => ser_param_specs(cfg),
        Task::Re => re_param_specs(cfg),
    }
}

// Heads draw from their own stream so adding or removing a head never
// shifts the encoder initialization.
const HEAD_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Fresh encoder plus the task's head parameters.
pub fn init_state(task: Task, model: &ModelConfig) -> Result<TrainState, TrainError> {
    let mut store = init_params(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ HEAD_SEED_SALT);
    for (name, shape) in head_specs(task, model) {
        store.register(&name, Tensor::rand_uniform(&shape, -0.02, 0.02, &mut rng))?;
    }
    let adam = Adam::new(&store);
    Ok(TrainState {
        model: model.clone(),
        task,
        step: 0,
        store,
        adam,
    })
}

/// Start a task from an existing state: every tensor the two parameter
/// sets share by name is copied over, the task's own head keeps its fresh
/// initialization, and the optimizer starts clean.
pub fn warm_start(task: Task, from: &TrainState) -> Result<TrainState, TrainError> {
    let mut state = init_state(task, &from.model)?;
    for p in from.store.iter() {
        if let Some(id) = state.store.find(&p.name) {
            let want = state.store.get(id).value.shape().to_vec();
            if want != p.value.shape() {
                return Err(TrainError::Shape {
                    name: p.name.clone(),
                    got: p.value.shape().to_vec(),
                    want,
                });
            }
            state.store.get_mut(id).value = p.value.clone();
        }
    }
    Ok(state)
}

/// Fail unless the store holds every tensor the model and task require,
/// naming the first offender.
pub fn check_shapes(cfg: &ModelConfig, task: Task, store: &ParamStore) -> Result<(), TrainError> {
    for (name, want) in param_specs(cfg).into_iter().chain(head_specs(task, cfg)) {
        let id = store
            .find(&name)
            .ok_or_else(|| config_err(format!("missing tensor {name}")))?;
        let got = store.get(id).value.shape();
        if got != want.as_slice() {
            return Err(TrainError::Shape {
                name,
                got: got.to_vec(),
                want,
            });
        }
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LXLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// Element offset into the f64 payload.
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    task: Task,
    step: u64,
    adam_t: u64,
    /// Parameters in registration order, then `adam.m.*` and `adam.v.*`
    /// mirroring it. Order matters: moment vectors are positional.
    tensors: Vec<TensorEntry>,
}

/// Serialize a state: magic, version, JSON header, then every tensor as
/// raw little-endian f64. Bit-exact round trip.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset: u64 = 0;
    let mut put = |name: String, t: &Tensor, payload: &mut Vec<u8>, offset: &mut u64| {
        entries.push(TensorEntry {
            name,
            offset: *offset,
            shape: t.shape().to_vec(),
        });
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        *offset += t.data().len() as u64;
    };
    for p in state.store.iter() {
        put(p.name.clone(), &p.value, &mut payload, &mut offset);
    }
    let (m, v) = state.adam.moments();
    for (p, t) in state.store.iter().zip(m) {
        put(format!("adam.m.{}", p.name), t, &mut payload, &mut offset);
    }
    for (p, t) in state.store.iter().zip(v) {
        put(format!("adam.v.{}", p.name), t, &mut payload, &mut offset);
    }
    let header = CheckpointHeader {
        model: state.model.clone(),
        task: state.task,
        step: state.step,
        adam_t: state.adam.t(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |why: String| TrainError::Corrupt {
        path: path.to_path_buf(),
        why,
    };
    if bytes.len() < 16 {
        return Err(corrupt("file ends inside the fixed preamble".into()));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("magic bytes are not LXLM".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            got: version,
            want: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("file ends inside the header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..hend])
        .map_err(|e| corrupt(format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[hend..];

    let mut store = ParamStore::new();
    let mut m: Vec<(String, Tensor)> = Vec::new();
    let mut v: Vec<(String, Tensor)> = Vec::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = (entry.offset as usize)
            .checked_mul(8)
            .filter(|&s| s <= payload.len())
            .ok_or_else(|| corrupt(format!("bad offset for tensor {}", entry.name)))?;
        let end = start
            .checked_add(numel * 8)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| corrupt(format!("payload ends before tensor {}", entry.name)))?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&entry.shape, data)?;
        if let Some(rest) = entry.name.strip_prefix("adam.m.") {
            m.push((rest.to_string(), tensor));
        } else if let Some(rest) = entry.name.strip_prefix("adam.v.") {
            v.push((rest.to_string(), tensor));
        } else {
            store.register(&entry.name, tensor)?;
        }
    }
    let names: Vec<&str> = store.iter().map(|p| p.name.as_str()).collect();
    for moments in [&m, &v] {
        let got: Vec<&str> = moments.iter().map(|(n, _)| n.as_str()).collect();
        if got != names {
            return Err(corrupt("moment tensors do not mirror the parameter list".into()));
        }
    }
    let adam = Adam::from_state(
        m.into_iter().map(|(_, t)| t).collect(),
        v.into_iter().map(|(_, t)| t).collect(),
        header.adam_t,
    );
    Ok(TrainState {
        model: header.model,
        task: header.task,
        step: header.step,
        store,
        adam,
    })
}

/// Pre-training documents grouped by language shard.
pub struct TrainData {
    pub by_lang: BTreeMap<Lang, Vec<Document>>,
}

/// Read `{code}.jsonl` shards (as written by the corpus builder) for each
/// language. Raster paths inside records resolve relative to `dir`.
pub fn load_pretrain_data(dir: &Path, langs: &[Lang]) -> Result<TrainData, TrainError> {
    let mut by_lang = BTreeMap::new();
    for &lang in langs {
        let path = dir.join(format!("{}.jsonl", lang.code()));
        let records = read_shard(&path)?;
        if records.is_empty() {
            return Err(config_err(format!("shard {} holds no records", path.display())));
        }
        let docs: Vec<Document> = records
            .iter()
            .map(|r| record_to_document(r, lang, dir))
            .collect::<Result<_, _>>()?;
        by_lang.insert(lang, docs);
    }
    Ok(TrainData { by_lang })
}

/// Fine-tuning documents: train splits for the training languages, test
/// splits for the evaluation languages.
pub struct TaskData {
    pub train: BTreeMap<Lang, Vec<Document>>,
    pub test: BTreeMap<Lang, Vec<Document>>,
}

/// Load `{code}/train.json` and `{code}/test.json` under a dataset root.
pub fn load_task_data(root: &Path, cfg: &TrainConfig) -> Result<TaskData, TrainError> {
    let mut train = BTreeMap::new();
    for &lang in &cfg.train_langs {
        train.insert(lang, parse_dataset(&root.join(lang.code()).join("train.json"))?);
    }
    let mut test = BTreeMap::new();
    for &lang in &cfg.eval_langs {
        test.insert(lang, parse_dataset(&root.join(lang.code()).join("test.json"))?);
    }
    Ok(TaskData { train, test })
}

/// Encode a batch and fill in each document's page raster where present.
pub fn encode_with_rasters(
    docs: &[&Document],
    vocab: &UnigramVocab,
    cfg: &ModelConfig,
) -> Result<EncodedBatch, ModelError> {
    let mut enc = EncodedBatch::build(docs, vocab, cfg)?;
    for (bi, d) in docs.iter().enumerate() {
        if let Some(r) = &d.raster {
            enc.load_raster(bi, r, cfg);
        }
    }
    Ok(enc)
}

/// One pre-training step's loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub mvlm: f64,
    pub tia: f64,
    pub tim: f64,
    pub total: f64,
}

/// Step losses and per-epoch metric rows from one fine-tuning run.
pub type FinetuneCurves = (Vec<(u64, f64)>, Vec<MetricRow>);

/// Per-epoch evaluation result for one language.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub lang: Lang,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ensure_state_matches(
    cfg: &TrainConfig,
    state: &TrainState,
    vocab: &UnigramVocab,
) -> Result<(), TrainError> {
    if state.task != cfg.task {
        return Err(config_err(format!(
            "state holds a {} head but the config asks for {}",
            state.task.code(),
            cfg.task.code()
        )));
    }
    if state.model.vocab_size != vocab.len() {
        return Err(config_err(format!(
            "model was built for {} vocabulary pieces, tokenizer has {}",
            state.model.vocab_size,
            vocab.len()
        )));
    }
    if state.step > cfg.steps {
        return Err(config_err(format!(
            "state is already at step {}, past the configured {}",
            state.step, cfg.steps
        )));
    }
    check_shapes(&state.model, state.task, &state.store)
}

struct StepOutcome {
    grads_at: Vec<crate::numerics::Var>,
    grads: crate::numerics::Grads,
    value: f64,
}

fn apply_update(
    cfg: &TrainConfig,
    state: &mut TrainState,
    out: StepOutcome,
    step: u64,
) -> Result<(), TrainError> {
    if !out.value.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    state.store.zero_grads();
    state.store.absorb_grads(&out.grads, &out.grads_at);
    clip_global_norm(&mut state.store, cfg.grad_clip)?;
    state.adam.step(&mut state.store, lr_at(cfg, step + 1));
    state.step = step + 1;
    Ok(())
}

/// Run pre-training from `state.step` to `cfg.steps` over temperature-
/// sampled shard batches. The sampler and per-step mask draws depend only
/// on (seed, step), so resuming a checkpoint replays nothing but cheap
/// scheduler state.
pub fn pretrain(
    cfg: &TrainConfig,
    state: &mut TrainState,
    data: &TrainData,
    vocab: &UnigramVocab,
) -> Result<Vec<LossRow>, TrainError> {
    pretrain_until(cfg, state, data, vocab, cfg.steps)
}

/// [`pretrain`], halted after `stop` total steps. The schedule stays
/// anchored to `cfg.steps`, so a halted run resumed under the same config
/// is bitwise-identical to one that never stopped.
pub fn pretrain_until(
    cfg: &TrainConfig,
    state: &mut TrainState,
    data: &TrainData,
    vocab: &UnigramVocab,
    stop: u64,
) -> Result<Vec<LossRow>, TrainError> {
    cfg.validate()?;
    if stop > cfg.steps {
        return Err(config_err(format!(
            "stop step {stop} lies past the configured {} steps",
            cfg.steps
        )));
    }
    if cfg.task != Task::Pretrain {
        return Err(config_err(format!(
            "pretrain requires task PRETRAIN, got {}",
            cfg.task.code()
        )));
    }
    ensure_state_matches(cfg, state, vocab)?;
    let mut counts = BTreeMap::new();
    for &lang in &cfg.train_langs {
        let docs = data
            .by_lang
            .get(&lang)
            .ok_or_else(|| config_err(format!("no shard loaded for {}", lang.code())))?;
        counts.insert(lang, docs.len() as u64);
    }
    let mut spec = SamplingSpec::new(counts);
    spec.seed = cfg.seed;
    let mut stream = SampleStream::new(&spec)?;
    // Fast-forward a resumed run to its place in the schedule.
    for _ in 0..state.step * cfg.batch_size as u64 {
        stream.draw();
    }

    let rates = PretrainRates::default();
    let mut rows = Vec::new();
    for step in state.step..stop {
        let docs: Vec<&Document> = (0..cfg.batch_size)
            .map(|_| {
                let d = stream.draw();
                &data.by_lang[&d.lang][d.index]
            })
            .collect();
        let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        mask_rng.set_stream(step + 1);
        let pb = build_pretrain_batch(&docs, vocab, &state.model, &rates, &mut mask_rng)?;

        let mut tape = Tape::new();
        let leaves = state.store.leaves(&mut tape)?;
        let (loss, report) = {
            let ev = EncoderVars::new(&state.store, &leaves);
            let hidden = encode(&mut tape, &pb.enc, &state.model, &ev)?;
            pretrain_loss(&mut tape, hidden, &pb, &state.model, &ev)?
        };
        let grads = tape.backward(loss)?;
        apply_update(
            cfg,
            state,
            StepOutcome {
                grads_at: leaves,
                grads,
                value: report.total,
            },
            step,
        )?;
        rows.push(LossRow {
            step,
            mvlm: report.mvlm,
            tia: report.tia,
            tim: report.tim,
            total: report.total,
        });
    }
    Ok(rows)
}

/// Pooled fine-tuning documents in a fixed order.
fn task_pool<'d>(
    cfg: &TrainConfig,
    data: &'d TaskData,
) -> Result<Vec<&'d Document>, TrainError> {
    let mut pool = Vec::new();
    for &lang in &cfg.train_langs {
        let docs = data
            .train
            .get(&lang)
            .ok_or_else(|| config_err(format!("no training split loaded for {}", lang.code())))?;
        for d in docs {
            if cfg.task == Task::Re && d.entities.len() < 2 {
                log::warn!("document {}: fewer than two entities, no pairs to train on", d.id);
                continue;
            }
            pool.push(d);
        }
    }
    if pool.is_empty() {
        return Err(config_err("no usable training documents"));
    }
    Ok(pool)
}

/// Training pairs for one document: all positives, and negatives capped
/// at `ratio` times the positive count when a cap is set. Negatives whose
/// (head type, tail type) signature matches some gold link are never
/// dropped: type embeddings alone cannot separate them, so they carry the
/// geometric signal, while the capped rest mostly re-teach types.
fn re_training_pairs(
    doc: &Document,
    ratio: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> (Vec<(usize, usize)>, Vec<i64>) {
    let pairs = re_candidates(doc.entities.len());
    let labels = re_gold_labels(doc, &pairs);
    let Some(ratio) = ratio else {
        return (pairs, labels);
    };
    let signature = |&(h, t): &(usize, usize)| (doc.entities[h].label, doc.entities[t].label);
    let gold_signatures: std::collections::BTreeSet<_> = pairs
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l == 1)
        .map(|(p, _)| signature(p))
        .collect();
    let positives: Vec<usize> = (0..pairs.len()).filter(|&i| labels[i] == 1).collect();
    let (hard, mut easy): (Vec<usize>, Vec<usize>) = (0..pairs.len())
        .filter(|&i| labels[i] == 0)
        .partition(|&i| gold_signatures.contains(&signature(&pairs[i])));
    let cap = (ratio * positives.len().max(1) as f64).ceil() as usize;
    if easy.len() > cap {
        easy.shuffle(rng);
        easy.truncate(cap);
    }
    let mut keep: Vec<usize> = positives.into_iter().chain(hard).chain(easy).collect();
    keep.sort_unstable();
    (
        keep.iter().map(|&i| pairs[i]).collect(),
        keep.iter().map(|&i| labels[i]).collect(),
    )
}

fn task_step_loss(
    cfg: &TrainConfig,
    state: &TrainState,
    docs: &[&Document],
    vocab: &UnigramVocab,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, StepOutcome), TrainError> {
    let enc = encode_with_rasters(docs, vocab, &state.model)?;
    let mut tape = Tape::new();
    let leaves = state.store.leaves(&mut tape)?;
    let loss = {
        let ev = EncoderVars::new(&state.store, &leaves);
        let hidden = encode(&mut tape, &enc, &state.model, &ev)?;
        match state.task {
            Task::Ser => {
                let logits = ser_logits(&mut tape, hidden, &state.model, docs.len(), &ev)?;
                let targets = ser_tag_targets(&enc, docs, &state.model);
                ser_loss(&mut tape, logits, &targets)?
            }
            Task::Re => {
                let mut sum = None;
                for (bi, d) in docs.iter().enumerate() {
                    let (pairs, labels) = re_training_pairs(d, cfg.re_negative_ratio, rng);
                    let logits =
                        re_pair_logits(&mut tape, hidden, &enc, d, bi, &pairs, &state.model, &ev)?;
                    let li = re_loss(&mut tape, logits, &labels)?;
                    sum = Some(match sum {
                        None => li,
                        Some(s) => tape.add(s, li)?,
                    });
                }
                let sum = sum.expect("non-empty batch");
                let k = tape.leaf(Tensor::scalar(1.0 / docs.len() as f64))?;
                tape.mul(sum, k)?
            }
            Task::Pretrain => {
                return Err(config_err("task_step_loss is for SER or RE"));
            }
        }
    };
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((
        value,
        StepOutcome {
            grads_at: leaves,
            grads,
            value,
        },
    ))
}

/// Fine-tune from `state.step` to `cfg.steps`, shuffling the pooled
/// training documents once per epoch and scoring every evaluation
/// language at each epoch boundary and at the final step. One epoch is
/// one pass over the pool: ceil(pool / batch_size) steps.
pub fn finetune(
    cfg: &TrainConfig,
    state: &mut TrainState,
    data: &TaskData,
    vocab: &UnigramVocab,
) -> Result<FinetuneCurves, TrainError> {
    finetune_until(cfg, state, data, vocab, cfg.steps)
}

/// [`finetune`], halted after `stop` total steps; see [`pretrain_until`].
pub fn finetune_until(
    cfg: &TrainConfig,
    state: &mut TrainState,
    data: &TaskData,
    vocab: &UnigramVocab,
    stop: u64,
) -> Result<FinetuneCurves, TrainError> {
    cfg.validate()?;
    if cfg.task == Task::Pretrain {
        return Err(config_err("finetune requires task SER or RE"));
    }
    if stop > cfg.steps {
        return Err(config_err(format!(
            "stop step {stop} lies past the configured {} steps",
            cfg.steps
        )));
    }
    ensure_state_matches(cfg, state, vocab)?;
    for &lang in &cfg.eval_langs {
        if !data.test.contains_key(&lang) {
            return Err(config_err(format!("no test split loaded for {}", lang.code())));
        }
    }
    let pool = task_pool(cfg, data)?;
    let spe = (pool.len() as u64).div_ceil(cfg.batch_size as u64);

    let mut losses = Vec::new();
    let mut metrics = Vec::new();
    let mut perm: Vec<usize> = Vec::new();
    let mut perm_epoch = u64::MAX;
    for step in state.step..stop {
        let epoch = step / spe;
        if epoch != perm_epoch {
            perm = (0..pool.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(epoch + 1);
            perm.shuffle(&mut rng);
            perm_epoch = epoch;
        }
        let lo = (step % spe) as usize * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(pool.len());
        let docs: Vec<&Document> = perm[lo..hi].iter().map(|&i| pool[i]).collect();

        let mut step_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        step_rng.set_stream(step + 1);
        let (value, out) = task_step_loss(cfg, state, &docs, vocab, &mut step_rng)?;
        apply_update(cfg, state, out, step)?;
        losses.push((step, value));

        if state.step.is_multiple_of(spe) || state.step == cfg.steps {
            let epoch_done = state.step.div_ceil(spe);
            for &lang in &cfg.eval_langs {
                let (precision, recall, f1) = evaluate(state, &data.test[&lang], vocab)?;
                metrics.push(MetricRow {
                    epoch: epoch_done,
                    lang,
                    precision,
                    recall,
                    f1,
                });
            }
        }
    }
    Ok((losses, metrics))
}

const PREDICT_CHUNK: usize = 8;

/// Decode entity spans for each document under the current parameters.
pub fn predict_ser(
    state: &TrainState,
    docs: &[Document],
    vocab: &UnigramVocab,
) -> Result<Vec<Vec<EntitySpan>>, TrainError> {
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(PREDICT_CHUNK) {
        let refs: Vec<&Document> = chunk.iter().collect();
        let enc = encode_with_rasters(&refs, vocab, &state.model)?;
        let mut tape = Tape::new();
        let leaves = state.store.leaves(&mut tape)?;
        let ev = EncoderVars::new(&state.store, &leaves);
        let hidden = encode(&mut tape, &enc, &state.model, &ev)?;
        let logits = ser_logits(&mut tape, hidden, &state.model, refs.len(), &ev)?;
        out.extend(ser_predict(tape.value(logits), &enc, &refs, &state.model));
    }
    Ok(out)
}

/// Predict directed links over each document's gold entities. Documents
/// with fewer than two entities get an empty set.
pub fn predict_re(
    state: &TrainState,
    docs: &[Document],
    vocab: &UnigramVocab,
) -> Result<Vec<Vec<RelationLink>>, TrainError> {
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(PREDICT_CHUNK) {
        let refs: Vec<&Document> = chunk.iter().collect();
        let enc = encode_with_rasters(&refs, vocab, &state.model)?;
        let mut tape = Tape::new();
        let leaves = state.store.leaves(&mut tape)?;
        let ev = EncoderVars::new(&state.store, &leaves);
        let hidden = encode(&mut tape, &enc, &state.model, &ev)?;
        for (bi, d) in refs.iter().enumerate() {
            let pairs = re_candidates(d.entities.len());
            if pairs.is_empty() {
                out.push(Vec::new());
                continue;
            }
            let logits =
                re_pair_logits(&mut tape, hidden, &enc, d, bi, &pairs, &state.model, &ev)?;
            out.push(re_predict(tape.value(logits), &pairs, d));
        }
    }
    Ok(out)
}

/// Micro P/R/F1 of the state's task head over `docs`.
pub fn evaluate(
    state: &TrainState,
    docs: &[Document],
    vocab: &UnigramVocab,
) -> Result<(f64, f64, f64), TrainError> {
    match state.task {
        Task::Ser => {
            let pred = predict_ser(state, docs, vocab)?;
            let gold: Vec<Vec<EntitySpan>> = docs.iter().map(|d| d.entities.clone()).collect();
            Ok(evalkit::entity_f1(&gold, &pred))
        }
        Task::Re => {
            let pred = predict_re(state, docs, vocab)?;
            let refs: Vec<&Document> = docs.iter().collect();
            Ok(evalkit::relation_f1(&refs, &pred))
        }
        Task::Pretrain => Err(config_err("evaluate needs a SER or RE state")),
    }
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<(), TrainError> {
    let mut s = String::from("step,mvlm,tia,tim,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.mvlm, r.tia, r.tim, r.total);
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn write_step_csv(path: &Path, rows: &[(u64, f64)]) -> Result<(), TrainError> {
    let mut s = String::from("step,loss\n");
    for (step, loss) in rows {
        let _ = writeln!(s, "{step},{loss}");
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<(), TrainError> {
    let mut s = String::from("epoch,lang,precision,recall,f1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            r.lang.code(),
            r.precision,
            r.recall,
            r.f1
        );
    }
    fs::write(path, s).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{build_shards, builtin_profiles};
    use crate::synth::{write_fixture, SynthSpec};
    use tempfile::TempDir;

    fn fixture(langs: &[Lang], docs: usize, seed: u64) -> (TempDir, UnigramVocab) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(langs.to_vec(), docs, seed);
        write_fixture(&spec, dir.path()).unwrap();
        let vocab = UnigramVocab::load(&dir.path().join("vocab.tsv")).unwrap();
        build_shards(
            &dir.path().join("corpus.jsonl"),
            dir.path(),
            &builtin_profiles(),
        )
        .unwrap();
        (dir, vocab)
    }

    fn stores_equal(a: &ParamStore, b: &ParamStore) -> bool {
        let xs: Vec<_> = a.iter().collect();
        let ys: Vec<_> = b.iter().collect();
        xs.len() == ys.len()
            && xs.iter().zip(&ys).all(|(x, y)| {
                x.name == y.name
                    && x.value.shape() == y.value.shape()
                    && x.value
                        .data()
                        .iter()
                        .zip(y.value.data())
                        .all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    fn moments_equal(a: &Adam, b: &Adam) -> bool {
        let (am, av) = a.moments();
        let (bm, bv) = b.moments();
        let eq = |x: &[Tensor], y: &[Tensor]| {
            x.len() == y.len()
                && x.iter().zip(y).all(|(p, q)| {
                    p.data()
                        .iter()
                        .zip(q.data())
                        .all(|(u, w)| u.to_bits() == w.to_bits())
                })
        };
        a.t() == b.t() && eq(am, bm) && eq(av, bv)
    }

    #[test]
    fn schedule_is_zero_peak_zero_and_linear() {
        let mut cfg = TrainConfig::tiny(Task::Pretrain);
        cfg.steps = 500;
        cfg.warmup_frac = 0.1;
        cfg.lr = 2e-3;
        let w = cfg.warmup_steps();
        assert_eq!(w, 50);
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert_eq!(lr_at(&cfg, w), cfg.lr);
        assert_eq!(lr_at(&cfg, 500), 0.0);
        for t in 0..=w {
            assert_eq!(lr_at(&cfg, t), cfg.lr * t as f64 / w as f64);
        }
        for t in w..=cfg.steps {
            assert_eq!(lr_at(&cfg, t), cfg.lr * (500 - t) as f64 / 450.0);
        }
    }

    #[test]
    fn regime_language_invariants_are_enforced() {
        let mut cfg = TrainConfig::tiny(Task::Ser);
        cfg.regime = Regime::ZeroShot;
        cfg.train_langs = vec![Lang::En, Lang::Zh];
        assert!(matches!(cfg.validate(), Err(TrainError::Config { .. })));
        cfg.train_langs = vec![Lang::En];
        cfg.eval_langs = Lang::ALL.to_vec();
        cfg.validate().unwrap();

        cfg.regime = Regime::Multitask;
        cfg.train_langs = Lang::ALL[..7].to_vec();
        assert!(matches!(cfg.validate(), Err(TrainError::Config { .. })));
        let mut rev = Lang::ALL.to_vec();
        rev.reverse();
        cfg.train_langs = rev;
        cfg.validate().unwrap();

        // any joint subset works as long as it covers the eval side
        cfg.train_langs = vec![Lang::En, Lang::Zh];
        cfg.eval_langs = vec![Lang::Zh, Lang::En];
        cfg.validate().unwrap();
        cfg.train_langs = vec![Lang::En];
        cfg.eval_langs = vec![Lang::En];
        assert!(matches!(cfg.validate(), Err(TrainError::Config { .. })));
    }

    #[test]
    fn fresh_states_are_reproducible() {
        let model = ModelConfig::tiny(64);
        let a = init_state(Task::Ser, &model).unwrap();
        let b = init_state(Task::Ser, &model).unwrap();
        assert!(stores_equal(&a.store, &b.store));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = ModelConfig::tiny(64);
        let mut state = init_state(Task::Pretrain, &model).unwrap();
        // Dirty the moments so the round trip covers more than zeros.
        for id in state.store.ids().collect::<Vec<_>>() {
            let g = Tensor::full(state.store.get(id).value.shape(), 0.25);
            state.store.get_mut(id).grad = g;
        }
        state.adam.step(&mut state.store, 1e-3);
        state.step = 17;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model, state.model);
        assert_eq!(loaded.task, Task::Pretrain);
        assert_eq!(loaded.step, 17);
        assert!(stores_equal(&state.store, &loaded.store));
        assert!(moments_equal(&state.adam, &loaded.adam));
    }

    #[test]
    fn truncated_checkpoints_are_rejected() {
        let model = ModelConfig::tiny(32);
        let state = init_state(Task::Ser, &model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Corrupt { .. })
        ));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Corrupt { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_named() {
        let model = ModelConfig::tiny(32);
        let state = init_state(Task::Ser, &model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Version { got: 9, want: CHECKPOINT_VERSION })
        ));
    }

    #[test]
    fn foreign_shapes_name_the_first_offending_tensor() {
        let small = ModelConfig::tiny(64);
        let state = init_state(Task::Ser, &small).unwrap();
        let wider = ModelConfig::tiny(80);
        match check_shapes(&wider, Task::Ser, &state.store) {
            Err(TrainError::Shape { name, .. }) => assert_eq!(name, "embed.token"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn zero_steps_keeps_the_initialization() {
        let (dir, vocab) = fixture(&[Lang::En], 2, 11);
        let mut cfg = TrainConfig::tiny(Task::Pretrain);
        cfg.steps = 0;
        cfg.seed = 11;
        let model = cfg.model_for(vocab.len());
        let mut state = init_state(Task::Pretrain, &model).unwrap();
        let data = load_pretrain_data(dir.path(), &cfg.train_langs).unwrap();
        let rows = pretrain(&cfg, &mut state, &data, &vocab).unwrap();
        assert!(rows.is_empty());
        let fresh = init_state(Task::Pretrain, &model).unwrap();
        assert!(stores_equal(&state.store, &fresh.store));
    }

    #[test]
    fn pretrain_runs_are_deterministic_and_resumable() {
        let (dir, vocab) = fixture(&[Lang::En, Lang::Zh], 2, 5);
        let mut cfg = TrainConfig::tiny(Task::Pretrain);
        cfg.steps = 4;
        cfg.batch_size = 2;
        cfg.seed = 5;
        cfg.train_langs = vec![Lang::En, Lang::Zh];
        cfg.eval_langs = vec![];
        let model = cfg.model_for(vocab.len());
        let data = load_pretrain_data(dir.path(), &cfg.train_langs).unwrap();

        let mut straight = init_state(Task::Pretrain, &model).unwrap();
        let rows_a = pretrain(&cfg, &mut straight, &data, &vocab).unwrap();

        let mut half = init_state(Task::Pretrain, &model).unwrap();
        let rows_b = pretrain_until(&cfg, &mut half, &data, &vocab, 2).unwrap();
        let path = dir.path().join("half.ckpt");
        save_checkpoint(&half, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 2);
        let rows_c = pretrain(&cfg, &mut resumed, &data, &vocab).unwrap();

        assert!(stores_equal(&straight.store, &resumed.store));
        assert!(moments_equal(&straight.adam, &resumed.adam));
        let merged: Vec<LossRow> = rows_b.into_iter().chain(rows_c).collect();
        assert_eq!(rows_a.len(), merged.len());
        for (x, y) in rows_a.iter().zip(&merged) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
    }

    #[test]
    fn short_pretrain_run_lowers_the_loss() {
        let (dir, vocab) = fixture(&[Lang::En], 4, 3);
        let mut cfg = TrainConfig::tiny(Task::Pretrain);
        cfg.steps = 30;
        cfg.batch_size = 2;
        cfg.seed = 3;
        let model = cfg.model_for(vocab.len());
        let data = load_pretrain_data(dir.path(), &cfg.train_langs).unwrap();
        let mut state = init_state(Task::Pretrain, &model).unwrap();
        let rows = pretrain(&cfg, &mut state, &data, &vocab).unwrap();
        assert_eq!(rows.len(), 30);
        let tail: f64 = rows[25..].iter().map(|r| r.total).sum::<f64>() / 5.0;
        assert!(
            tail < rows[0].total,
            "tail {tail} vs start {}",
            rows[0].total
        );
    }

    #[test]
    fn finetune_rejects_a_pretrain_config() {
        let (dir, vocab) = fixture(&[Lang::En], 2, 9);
        let cfg = TrainConfig::tiny(Task::Pretrain);
        let model = cfg.model_for(vocab.len());
        let mut state = init_state(Task::Pretrain, &model).unwrap();
        let data = load_task_data(dir.path(), &cfg).unwrap();
        assert!(matches!(
            finetune(&cfg, &mut state, &data, &vocab),
            Err(TrainError::Config { .. })
        ));
    }

    #[test]
    fn finetune_resume_matches_the_straight_run() {
        let (dir, vocab) = fixture(&[Lang::En], 3, 21);
        let mut cfg = TrainConfig::tiny(Task::Ser);
        cfg.steps = 4;
        cfg.batch_size = 2;
        cfg.seed = 21;
        let model = cfg.model_for(vocab.len());
        let data = load_task_data(dir.path(), &cfg).unwrap();

        let mut straight = init_state(Task::Ser, &model).unwrap();
        let (loss_a, _) = finetune(&cfg, &mut straight, &data, &vocab).unwrap();

        let mut half = init_state(Task::Ser, &model).unwrap();
        let (loss_b, _) = finetune_until(&cfg, &mut half, &data, &vocab, 2).unwrap();
        let path = dir.path().join("half.ckpt");
        save_checkpoint(&half, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        let (loss_c, _) = finetune(&cfg, &mut resumed, &data, &vocab).unwrap();

        assert!(stores_equal(&straight.store, &resumed.store));
        let merged: Vec<(u64, f64)> = loss_b.into_iter().chain(loss_c).collect();
        assert_eq!(loss_a.len(), merged.len());
        for ((sa, va), (sb, vb)) in loss_a.iter().zip(&merged) {
            assert_eq!(sa, sb);
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }

    #[test]
    fn tiny_ser_run_overfits_its_training_documents() {
        let (dir, vocab) = fixture(&[Lang::En], 2, 7);
        let mut cfg = TrainConfig::tiny(Task::Ser);
        cfg.steps = 150;
        cfg.batch_size = 2;
        cfg.seed = 7;
        let model = cfg.model_for(vocab.len());
        let data = load_task_data(dir.path(), &cfg).unwrap();
        let mut state = init_state(Task::Ser, &model).unwrap();
        finetune(&cfg, &mut state, &data, &vocab).unwrap();
        let train_docs = &data.train[&Lang::En];
        let (p, r, f1) = evaluate(&state, train_docs, &vocab).unwrap();
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0), "train set should be memorized");
    }

    #[test]
    fn tiny_re_run_overfits_its_training_documents() {
        // Links are rare among candidate pairs, so this leans on the
        // negative cap and a short pre-training warm start.
        let (dir, vocab) = fixture(&[Lang::En], 2, 42);
        let mut pcfg = TrainConfig::tiny(Task::Pretrain);
        pcfg.steps = 100;
        pcfg.batch_size = 2;
        pcfg.seed = 42;
        let model = pcfg.model_for(vocab.len());
        let mut pre = init_state(Task::Pretrain, &model).unwrap();
        let pdata = load_pretrain_data(dir.path(), &pcfg.train_langs).unwrap();
        pretrain(&pcfg, &mut pre, &pdata, &vocab).unwrap();

        let mut cfg = TrainConfig::tiny(Task::Re);
        cfg.steps = 300;
        cfg.batch_size = 2;
        cfg.seed = 42;
        cfg.lr = 4e-3;
        cfg.warmup_frac = 0.05;
        cfg.re_negative_ratio = Some(2.0);
        let data = load_task_data(dir.path(), &cfg).unwrap();
        let mut state = warm_start(Task::Re, &pre).unwrap();
        finetune(&cfg, &mut state, &data, &vocab).unwrap();
        let train_docs = &data.train[&Lang::En];
        let (p, r, f1) = evaluate(&state, train_docs, &vocab).unwrap();
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0), "train set should be memorized");
    }

    #[test]
    fn warm_start_carries_the_encoder_and_resets_the_head() {
        let model = ModelConfig::tiny(64);
        let mut pre = init_state(Task::Pretrain, &model).unwrap();
        // Nudge one encoder weight so the carrying is observable.
        let id = pre.store.find("embed.token").unwrap();
        pre.store.get_mut(id).value.data_mut()[0] = 0.5;

        let fine = warm_start(Task::Ser, &pre).unwrap();
        let carried = fine.store.find("embed.token").unwrap();
        assert_eq!(fine.store.get(carried).value.data()[0], 0.5);
        assert!(fine.store.find("head.ser.w").is_some());
        assert!(fine.store.find("head.mvlm.w").is_none());
        assert_eq!(fine.step, 0);
        assert_eq!(fine.adam.t(), 0);
    }

    #[test]
    fn metric_csv_lists_every_epoch_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            MetricRow {
                epoch: 1,
                lang: Lang::En,
                precision: 0.5,
                recall: 1.0,
                f1: 2.0 / 3.0,
            },
            MetricRow {
                epoch: 2,
                lang: Lang::Zh,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            },
        ];
        write_metric_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,lang,precision,recall,f1\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\n1,en,0.5,1,"));
        assert!(text.contains("\n2,zh,1,1,1"));
    }
}

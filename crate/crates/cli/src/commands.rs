//! One function per subcommand; all terminal output happens here.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use lxlab_core::docmodel::{
    parse_dataset, write_dataset, Document, EntityLabel, EntitySpan, Lang, RelationLink,
};
use lxlab_core::evalkit::{self, build_report, render_csv, render_text, Cell};
use lxlab_core::pipeline::{build_shards, builtin_profiles, CorpusStats};
use lxlab_core::synth::{write_fixture, SynthSpec};
use lxlab_core::tokenizer::UnigramVocab;
use lxlab_core::train::{
    finetune, init_state, load_checkpoint, load_pretrain_data, load_task_data, pretrain,
    save_checkpoint, warm_start, write_loss_csv, write_metric_csv, write_step_csv, Task,
    TrainState,
};

use crate::config::{self, ConfigMap};
use crate::{
    runtime, usage, CliError, CorpusBuildArgs, CorpusStatsArgs, EvalArgs, FinetuneArgs,
    PredictArgs, SampleProbsArgs, SynthArgs, TokenizeArgs, TrainArgs,
};

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| runtime(format!("create {}: {e}", p.display())))
}

pub fn corpus_build(a: &CorpusBuildArgs) -> Result<(), CliError> {
    let stats = build_shards(&a.input, &a.out, &builtin_profiles())?;
    config::write_snapshot(&a.out, "corpus build", &[("input", path_value(&a.input))])?;
    print_stats(&stats);
    Ok(())
}

pub fn corpus_stats(a: &CorpusStatsArgs) -> Result<(), CliError> {
    let path = a.dir.join("stats.json");
    let text =
        fs::read_to_string(&path).map_err(|e| runtime(format!("read {}: {e}", path.display())))?;
    let stats: CorpusStats = serde_json::from_str(&text)
        .map_err(|e| runtime(format!("parse {}: {e}", path.display())))?;
    if stats.total != stats.kept() + stats.discarded() {
        return Err(runtime(format!(
            "{} is inconsistent: total {} != kept {} + discarded {}",
            path.display(),
            stats.total,
            stats.kept(),
            stats.discarded()
        )));
    }
    print_stats(&stats);
    Ok(())
}

fn print_stats(stats: &CorpusStats) {
    println!("lang   kept   too_short  low_lang_score");
    for (code, t) in &stats.per_lang {
        println!(
            "{code:<6} {:<6} {:<10} {}",
            t.kept, t.too_short, t.low_lang_score
        );
    }
    println!(
        "total {} = {} kept + {} discarded",
        stats.total,
        stats.kept(),
        stats.discarded()
    );
}

pub fn sample_probs(a: &SampleProbsArgs) -> Result<(), CliError> {
    if !(a.alpha.is_finite() && a.alpha >= 0.0) {
        return Err(usage(format!(
            "--alpha must be a finite non-negative number, got {}",
            a.alpha
        )));
    }
    let counts = parse_counts(&a.counts)?;
    for (label, p) in power_probs(&counts, a.alpha) {
        println!("p_{label} = {p}");
    }
    Ok(())
}

/// LABEL=COUNT pairs, comma separated; labels stay as given.
fn parse_counts(s: &str) -> Result<BTreeMap<String, u64>, CliError> {
    let mut out = BTreeMap::new();
    for part in s.split(',') {
        let part = part.trim();
        let Some((label, n)) = part.split_once('=') else {
            return Err(usage(format!("--counts needs LABEL=COUNT pairs, got {part:?}")));
        };
        let label = label.trim();
        let n: u64 = n.trim().parse().map_err(|_| {
            usage(format!("count for {label:?} must be an unsigned integer"))
        })?;
        if out.insert(label.to_string(), n).is_some() {
            return Err(usage(format!("label {label:?} listed twice")));
        }
    }
    if out.values().all(|&n| n == 0) {
        return Err(usage("--counts needs at least one positive count"));
    }
    Ok(out)
}

/// Draw probabilities proportional to (count/total)^alpha; zero counts
/// stay at zero for every alpha.
fn power_probs(counts: &BTreeMap<String, u64>, alpha: f64) -> Vec<(String, f64)> {
    let total: u64 = counts.values().sum();
    let mut weights: Vec<(String, f64)> = counts
        .iter()
        .map(|(label, &n)| {
            let w = if n == 0 { 0.0 } else { (n as f64 / total as f64).powf(alpha) };
            (label.clone(), w)
        })
        .collect();
    let z: f64 = weights.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut weights {
        *w /= z;
    }
    weights
}

pub fn tokenize(a: &TokenizeArgs) -> Result<(), CliError> {
    let vocab = UnigramVocab::load(&a.vocab)?;
    for word in a.text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let pieces: Vec<String> = vocab
            .segment(word)
            .iter()
            .map(|p| chars[p.start..p.end].iter().collect())
            .collect();
        println!("{}", pieces.join(" "));
    }
    Ok(())
}

pub fn run_pretrain(a: &TrainArgs) -> Result<(), CliError> {
    let map = ConfigMap::load(a.config.as_deref(), &a.set)?;
    let cfg = config::resolve_train(&map, Task::Pretrain)?;
    let vocab = UnigramVocab::load(&a.vocab)?;
    let data = load_pretrain_data(&a.data, &cfg.train_langs)?;
    let mut state = match &a.resume {
        Some(p) => load_checkpoint(p)?,
        None => init_state(cfg.task, &cfg.model_for(vocab.len()))?,
    };
    let rows = pretrain(&cfg, &mut state, &data, &vocab)?;
    create_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint.ckpt");
    save_checkpoint(&state, &ckpt)?;
    write_loss_csv(&a.out.join("loss.csv"), &rows)?;
    let mut entries = vec![("data", path_value(&a.data)), ("vocab", path_value(&a.vocab))];
    if let Some(p) = &a.resume {
        entries.push(("resume", path_value(p)));
    }
    entries.extend(config::train_entries(&cfg));
    config::write_snapshot(&a.out, "pretrain", &entries)?;
    if let Some(last) = rows.last() {
        println!("step {} loss {}", last.step, last.total);
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn run_finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let t = &a.train;
    let map = ConfigMap::load(t.config.as_deref(), &t.set)?;
    let cfg = config::resolve_train(&map, Task::Ser)?;
    if cfg.task == Task::Pretrain {
        return Err(usage("finetune needs task SER or RE; set task in the config"));
    }
    let vocab = UnigramVocab::load(&t.vocab)?;
    let data = load_task_data(&t.data, &cfg)?;
    let mut state = match (&t.resume, &a.init) {
        (Some(_), Some(_)) => return Err(usage("--resume and --init exclude each other")),
        (Some(p), None) => load_checkpoint(p)?,
        (None, Some(p)) => warm_start(cfg.task, &load_checkpoint(p)?)?,
        (None, None) => init_state(cfg.task, &cfg.model_for(vocab.len()))?,
    };
    let (losses, metrics) = finetune(&cfg, &mut state, &data, &vocab)?;
    create_dir(&t.out)?;
    let ckpt = t.out.join("checkpoint.ckpt");
    save_checkpoint(&state, &ckpt)?;
    write_step_csv(&t.out.join("loss.csv"), &losses)?;
    write_metric_csv(&t.out.join("metrics.csv"), &metrics)?;
    if let Some(last) = metrics.last().map(|r| r.epoch) {
        let results: BTreeMap<Lang, Cell> = metrics
            .iter()
            .filter(|r| r.epoch == last)
            .map(|r| (r.lang, (r.precision, r.recall, r.f1)))
            .collect();
        let report = build_report(cfg.regime.code(), cfg.task.code(), &cfg.eval_langs, &results);
        let text = render_text(&report);
        fs::write(t.out.join("report.txt"), &text)
            .map_err(|e| runtime(format!("write report.txt: {e}")))?;
        fs::write(t.out.join("report.csv"), render_csv(&report))
            .map_err(|e| runtime(format!("write report.csv: {e}")))?;
        print!("{text}");
    }
    let mut entries = vec![("data", path_value(&t.data)), ("vocab", path_value(&t.vocab))];
    if let Some(p) = &t.resume {
        entries.push(("resume", path_value(p)));
    }
    if let Some(p) = &a.init {
        entries.push(("init", path_value(p)));
    }
    entries.extend(config::train_entries(&cfg));
    config::write_snapshot(&t.out, "finetune", &entries)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let state = load_checkpoint(&a.ckpt)?;
    let vocab = UnigramVocab::load(&a.vocab)?;
    let docs = parse_dataset(&a.data)?;
    let out_docs = predict_docs(&state, &docs, &vocab)?;
    create_dir(&a.out)?;
    let path = a.out.join("predictions.json");
    write_dataset(&out_docs, &path)?;
    config::write_snapshot(
        &a.out,
        "predict",
        &[
            ("ckpt", path_value(&a.ckpt)),
            ("data", path_value(&a.data)),
            ("vocab", path_value(&a.vocab)),
        ],
    )?;
    println!(
        "labeled {} documents with the {} head: {}",
        out_docs.len(),
        state.task.code(),
        path.display()
    );
    Ok(())
}

fn predict_docs(
    state: &TrainState,
    docs: &[Document],
    vocab: &UnigramVocab,
) -> Result<Vec<Document>, CliError> {
    let mut out = docs.to_vec();
    match state.task {
        Task::Ser => {
            let pred = lxlab_core::train::predict_ser(state, docs, vocab)?;
            for (d, spans) in out.iter_mut().zip(pred) {
                d.entities = cover_words(spans, d.words.len());
                // span ids were reissued, so gold links no longer apply
                d.links.clear();
            }
        }
        Task::Re => {
            let pred = lxlab_core::train::predict_re(state, docs, vocab)?;
            for (d, links) in out.iter_mut().zip(pred) {
                d.links = links;
            }
        }
        Task::Pretrain => {
            return Err(usage("checkpoint carries no task head; fine-tune it first"))
        }
    }
    Ok(out)
}

/// Tag decoding names only the labeled spans; pad the gaps with OTHER
/// entities so the written dataset keeps full word coverage, and reissue
/// ids in word order so they stay unique.
fn cover_words(pred: Vec<EntitySpan>, n_words: usize) -> Vec<EntitySpan> {
    let mut out: Vec<EntitySpan> = Vec::new();
    let mut next = 0usize;
    for mut e in pred {
        if e.first_word > next {
            out.push(other_span(out.len(), next, e.first_word - 1));
        }
        e.id = out.len() as u32;
        next = e.last_word + 1;
        out.push(e);
    }
    if next < n_words {
        out.push(other_span(out.len(), next, n_words - 1));
    }
    out
}

fn other_span(id: usize, first: usize, last: usize) -> EntitySpan {
    EntitySpan {
        id: id as u32,
        first_word: first,
        last_word: last,
        label: EntityLabel::Other,
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let gold = parse_dataset(&a.gold)?;
    let pred = parse_dataset(&a.pred)?;
    let by_id: BTreeMap<&str, &Document> = pred.iter().map(|d| (d.id.as_str(), d)).collect();
    if pred.len() != gold.len() || gold.iter().any(|d| !by_id.contains_key(d.id.as_str())) {
        return Err(runtime("gold and pred must cover the same document ids"));
    }
    let aligned: Vec<&Document> = gold.iter().map(|d| by_id[d.id.as_str()]).collect();

    let gold_entities: Vec<Vec<EntitySpan>> = gold.iter().map(|d| d.entities.clone()).collect();
    let pred_entities: Vec<Vec<EntitySpan>> =
        aligned.iter().map(|d| d.entities.clone()).collect();
    let ser = evalkit::entity_f1(&gold_entities, &pred_entities);

    // link endpoints resolve through the gold entities, which the
    // gold-conditioned relation head keeps intact
    let gold_refs: Vec<&Document> = gold.iter().collect();
    let pred_links: Vec<Vec<RelationLink>> = aligned.iter().map(|d| d.links.clone()).collect();
    let re = evalkit::relation_f1(&gold_refs, &pred_links);

    println!("ser precision {} recall {} f1 {}", ser.0, ser.1, ser.2);
    println!("re precision {} recall {} f1 {}", re.0, re.1, re.2);
    if let Some(out) = &a.out {
        create_dir(out)?;
        let csv = format!(
            "task,precision,recall,f1\nser,{},{},{}\nre,{},{},{}\n",
            ser.0, ser.1, ser.2, re.0, re.1, re.2
        );
        fs::write(out.join("eval.csv"), csv)
            .map_err(|e| runtime(format!("write eval.csv: {e}")))?;
        config::write_snapshot(
            out,
            "eval",
            &[("gold", path_value(&a.gold)), ("pred", path_value(&a.pred))],
        )?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let langs = config::parse_langs(&a.langs)?;
    let seed = match a.seed {
        Some(s) => s,
        None => config::env_seed()?.unwrap_or(42),
    };
    let mut spec = SynthSpec::new(langs, a.docs, seed);
    if let Some(n) = a.test_docs {
        spec.test_docs = n;
    }
    if let Some(n) = a.corpus_docs {
        spec.corpus_docs = n;
    }
    let summary = write_fixture(&spec, &a.out)?;
    config::write_snapshot(
        &a.out,
        "synth",
        &[
            ("docs", Value::from(spec.train_docs as u64)),
            ("test_docs", Value::from(spec.test_docs as u64)),
            ("corpus_docs", Value::from(spec.corpus_docs as u64)),
            ("langs", Value::String(config::join_langs(&spec.langs))),
            ("seed", Value::from(spec.seed)),
        ],
    )?;
    println!(
        "wrote {} form docs, {} corpus records, {} vocab pieces to {}",
        summary.form_docs,
        summary.corpus_records,
        summary.vocab_pieces,
        a.out.display()
    );
    Ok(())
}

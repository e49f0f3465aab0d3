//! Multilingual corpus plumbing: language detection by character
//! trigrams, record filtering, per-language sharding with a stats
//! sidecar, and the exponentiated sampling distribution that balances
//! high- and low-resource languages.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::docmodel::{normalize_box, DocError, Document, Lang, Raster, Word};

/// Records shorter than this many characters are discarded.
pub const MIN_CHARS: usize = 200;
/// Detection scores at or below this are discarded.
pub const MIN_LANG_SCORE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path} line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("sampling needs at least one language with a positive count")]
    AllCountsZero,
    #[error("sampling exponent must be finite and non-negative, got {alpha}")]
    BadAlpha { alpha: f64 },
    #[error(transparent)]
    Doc(#[from] DocError),
}

/// Per-language word pools. They seed the language profiles and double
/// as the vocabulary for synthetic fixtures.
pub const SEED_TEXTS: [(Lang, &str); 8] = [
    (
        Lang::En,
        "invoice number date of issue total amount due customer name billing \
         address payment terms within thirty days signature of the authorized \
         representative department reference purchase order quantity \
         description unit price subtotal tax shipping and handling balance \
         account statement period contact telephone electronic mail company \
         registration please complete this form in block letters and return \
         one signed copy to the finance office before the end of the month \
         thank you for your cooperation",
    ),
    (
        Lang::Zh,
        "发票编号 开票日期 应付总额 客户名称 账单地址 付款条件 三十天内付清 \
         授权代表签名 部门 参考编号 采购订单 数量 描述 单价 小计 税额 \
         运费及手续费 余额 账户对账单 期间 联系电话 电子邮件 公司注册号 \
         请用正楷填写此表格 并在月底前将签署副本交回财务办公室 感谢您的合作 \
         姓名 地址 城市 邮政编码 国家 出生日期 职业 婚姻状况 紧急联系人 \
         关系 工作单位 月收入 申请人声明 以上信息真实有效 审核人 批准日期 备注",
    ),
    (
        Lang::Ja,
        "請求書番号 発行日 お支払い合計金額 お客様のお名前 ご請求先のご住所 \
         お支払い条件 三十日以内にお願いします ご署名 担当者の部署 ご参照番号 \
         ご注文書 数量 内容のせつめい 単価 小計 ぜいきん 送料と手数料 残高 \
         口座のめいさい 期間 れんらく先の電話番号 メールアドレス \
         会社のとうろく番号 このフォームにごきにゅうください \
         月末までに財務課へおもどしください ごきょうりょくありがとうございます \
         おなまえ ごじゅうしょ おでんわばんごう せいねんがっぴ ごしょくぎょう \
         もうしこみしゃ かくにんずみ びこう",
    ),
    (
        Lang::Es,
        "número de factura fecha de emisión importe total adeudado nombre del \
         cliente dirección de facturación condiciones de pago dentro de \
         treinta días firma del representante autorizado departamento \
         referencia orden de compra cantidad descripción precio unitario \
         subtotal impuesto envío y manipulación saldo estado de cuenta \
         período teléfono de contacto correo electrónico registro de la \
         empresa por favor rellene este formulario con letra clara y devuelva \
         una copia firmada a la oficina de finanzas antes de fin de mes \
         gracias por su colaboración",
    ),
    (
        Lang::Fr,
        "numéro de facture date d'émission montant total dû nom du client \
         adresse de facturation conditions de paiement sous trente jours \
         signature du représentant autorisé département référence bon de \
         commande quantité description prix unitaire sous-total taxe frais \
         d'expédition et de traitement solde relevé de compte période \
         téléphone de contact courrier électronique immatriculation de \
         l'entreprise veuillez remplir ce formulaire en lettres capitales et \
         renvoyer un exemplaire signé au service des finances avant la fin du \
         mois merci de votre coopération",
    ),
    (
        Lang::It,
        "numero di fattura data di emissione importo totale dovuto nome del \
         cliente indirizzo di fatturazione condizioni di pagamento entro \
         trenta giorni firma del rappresentante autorizzato dipartimento \
         riferimento ordine di acquisto quantità descrizione prezzo unitario \
         subtotale imposta spese di spedizione e gestione saldo estratto \
         conto periodo telefono di contatto posta elettronica registrazione \
         della società si prega di compilare questo modulo in stampatello e \
         restituire una copia firmata all'ufficio finanze entro la fine del \
         mese grazie per la collaborazione",
    ),
    (
        Lang::De,
        "Rechnungsnummer Ausstellungsdatum fälliger Gesamtbetrag Name des \
         Kunden Rechnungsanschrift Zahlungsbedingungen innerhalb von dreißig \
         Tagen Unterschrift des bevollmächtigten Vertreters Abteilung \
         Referenz Bestellung Menge Beschreibung Einzelpreis Zwischensumme \
         Steuer Versand und Bearbeitung Saldo Kontoauszug Zeitraum \
         Telefonnummer elektronische Post Registrierung des Unternehmens \
         bitte füllen Sie dieses Formular in Druckbuchstaben aus und senden \
         Sie eine unterschriebene Kopie vor Monatsende an die \
         Finanzabteilung vielen Dank für Ihre Mitarbeit",
    ),
    (
        Lang::Pt,
        "número da fatura data de emissão valor total devido nome do cliente \
         endereço de cobrança condições de pagamento no prazo de trinta dias \
         assinatura do representante autorizado departamento referência ordem \
         de compra quantidade descrição preço unitário subtotal imposto envio \
         e manuseio saldo extrato da conta período telefone de contato \
         correio eletrônico registro da empresa por favor preencha este \
         formulário em letra de imprensa e devolva uma cópia assinada ao \
         escritório de finanças antes do fim do mês obrigado pela sua \
         colaboração",
    ),
];

/// Space-padded lowercase trigram counts, extracted per whitespace word
/// so runs of whitespace cannot change the result.
fn trigram_counts(text: &str) -> BTreeMap<[char; 3], f64> {
    let mut counts = BTreeMap::new();
    for word in text.split_whitespace() {
        let mut chars: Vec<char> = vec![' '];
        chars.extend(word.chars().flat_map(char::to_lowercase));
        chars.push(' ');
        for w in chars.windows(3) {
            *counts.entry([w[0], w[1], w[2]]).or_insert(0.0) += 1.0;
        }
    }
    counts
}

fn content_chars(text: &str) -> usize {
    text.split_whitespace().map(|w| w.chars().count()).sum()
}

fn cosine(a: &BTreeMap<[char; 3], f64>, b: &BTreeMap<[char; 3], f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(k, &va)| b.get(k).map(|&vb| va * vb))
        .sum();
    if dot == 0.0 {
        return 0.0;
    }
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Normalized character-trigram fingerprint of one language.
#[derive(Clone, Debug)]
pub struct LangProfile {
    pub lang: Lang,
    grams: BTreeMap<[char; 3], f64>,
}

impl LangProfile {
    /// Profile from seed text; trigram frequencies normalized to sum 1.
    pub fn from_text(lang: Lang, text: &str) -> LangProfile {
        let mut grams = trigram_counts(text);
        let total: f64 = grams.values().sum();
        if total > 0.0 {
            for v in grams.values_mut() {
                *v /= total;
            }
        }
        LangProfile { lang, grams }
    }

    pub fn frequency_sum(&self) -> f64 {
        self.grams.values().sum()
    }
}

/// Profiles for all eight built-in languages.
pub fn builtin_profiles() -> Vec<LangProfile> {
    SEED_TEXTS
        .iter()
        .map(|&(lang, text)| LangProfile::from_text(lang, text))
        .collect()
}

/// Best-matching language and its cosine score. Texts with fewer than
/// three content characters score 0.
pub fn detect_language(text: &str, profiles: &[LangProfile]) -> (Lang, f64) {
    let fallback = profiles.first().map_or(Lang::En, |p| p.lang);
    if content_chars(text) < 3 {
        return (fallback, 0.0);
    }
    let grams = trigram_counts(text);
    let mut best = (fallback, 0.0);
    for p in profiles {
        let score = cosine(&grams, &p.grams);
        if score > best.1 {
            best = (p.lang, score);
        }
    }
    best
}

/// One pre-extracted page, as found in corpus JSONL files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text_runs: Vec<TextRun>,
    pub page: PageInfo,
}

/// One positioned piece of text; `box` is in page pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRun {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: [i64; 4],
    pub line: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageInfo {
    pub w: u32,
    pub h: u32,
    /// Path to a PGM page image, relative to the record file. Empty
    /// when the page has none.
    pub raster: String,
}

impl CorpusRecord {
    /// All run texts joined by single spaces; the string the detector
    /// and the length filter both see.
    pub fn text(&self) -> String {
        let parts: Vec<&str> = self.text_runs.iter().map(|r| r.text.as_str()).collect();
        parts.join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscardReason {
    TooShort,
    LowLangScore,
}

impl DiscardReason {
    pub fn code(self) -> &'static str {
        match self {
            DiscardReason::TooShort => "TOO_SHORT",
            DiscardReason::LowLangScore => "LOW_LANG_SCORE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterOutcome {
    pub lang: Lang,
    pub score: f64,
    pub chars: usize,
    /// `None` means keep.
    pub discard: Option<DiscardReason>,
}

/// Keep a record only if it is long enough and its language score is
/// strictly above the threshold. Pure and order-stable.
pub fn filter_record(record: &CorpusRecord, profiles: &[LangProfile]) -> FilterOutcome {
    let text = record.text();
    let chars = text.chars().count();
    let (lang, score) = detect_language(&text, profiles);
    let discard = if chars < MIN_CHARS {
        Some(DiscardReason::TooShort)
    } else if score <= MIN_LANG_SCORE {
        Some(DiscardReason::LowLangScore)
    } else {
        None
    };
    FilterOutcome {
        lang,
        score,
        chars,
        discard,
    }
}

/// Turn a kept record into a document. Each text run becomes one word;
/// boxes are normalized against the page size; `raster_root` anchors
/// the record's relative raster path.
pub fn record_to_document(
    record: &CorpusRecord,
    lang: Lang,
    raster_root: &Path,
) -> Result<Document, PipelineError> {
    let mut words = Vec::with_capacity(record.text_runs.len());
    for run in &record.text_runs {
        if run.text.trim().is_empty() {
            continue;
        }
        let bbox = normalize_box(run.bbox, record.page.w, record.page.h)
            .map_err(|e| e.in_doc(&record.id))?;
        words.push(Word {
            text: run.text.clone(),
            bbox,
            line: run.line,
        });
    }
    let raster = if record.page.raster.is_empty() {
        None
    } else {
        let path = raster_root.join(&record.page.raster);
        path.exists().then(|| Raster::read_pgm(&path)).transpose()?
    };
    Ok(Document {
        id: record.id.clone(),
        lang,
        page_w: record.page.w,
        page_h: record.page.h,
        words,
        raster,
        entities: Vec::new(),
        links: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangTally {
    pub kept: u64,
    #[serde(rename = "TOO_SHORT")]
    pub too_short: u64,
    #[serde(rename = "LOW_LANG_SCORE")]
    pub low_lang_score: u64,
}

impl LangTally {
    pub fn discarded(&self) -> u64 {
        self.too_short + self.low_lang_score
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: u64,
    pub per_lang: BTreeMap<String, LangTally>,
}

impl CorpusStats {
    pub fn kept(&self) -> u64 {
        self.per_lang.values().map(|t| t.kept).sum()
    }

    pub fn discarded(&self) -> u64 {
        self.per_lang.values().map(|t| t.discarded()).sum()
    }
}

/// Filter an input JSONL corpus into per-language shard files under
/// `out_dir` ({code}.jsonl) plus a `stats.json` sidecar. Returns the
/// stats. Input order is preserved within each shard.
pub fn build_shards(
    input: &Path,
    out_dir: &Path,
    profiles: &[LangProfile],
) -> Result<CorpusStats, PipelineError> {
    let file = fs::File::open(input)?;
    let mut stats = CorpusStats::default();
    let mut shards: BTreeMap<Lang, Vec<String>> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
                path: input.display().to_string(),
                line: lineno + 1,
                detail: e.to_string(),
            })?;
        let outcome = filter_record(&record, profiles);
        stats.total += 1;
        let tally = stats
            .per_lang
            .entry(outcome.lang.code().to_string())
            .or_default();
        match outcome.discard {
            None => {
                tally.kept += 1;
                shards.entry(outcome.lang).or_default().push(line);
            }
            Some(DiscardReason::TooShort) => tally.too_short += 1,
            Some(DiscardReason::LowLangScore) => tally.low_lang_score += 1,
        }
    }
    fs::create_dir_all(out_dir)?;
    for (lang, lines) in &shards {
        let mut f = fs::File::create(out_dir.join(format!("{}.jsonl", lang.code())))?;
        for line in lines {
            writeln!(f, "{line}")?;
        }
    }
    let mut f = fs::File::create(out_dir.join("stats.json"))?;
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    writeln!(f, "{json}")?;
    Ok(stats)
}

/// Read one shard file back into records.
pub fn read_shard(path: &Path) -> Result<Vec<CorpusRecord>, PipelineError> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: e.to_string(),
            })?,
        );
    }
    Ok(records)
}

/// How to mix languages: per-language document counts, the flattening
/// exponent, and the draw seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub counts: BTreeMap<Lang, u64>,
    pub alpha: f64,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn new(counts: BTreeMap<Lang, u64>) -> SamplingSpec {
        SamplingSpec {
            counts,
            alpha: 0.7,
            seed: 0,
        }
    }
}

/// p_l proportional to (n_l/n)^alpha. Languages with zero count get
/// probability zero at every alpha.
pub fn sampling_probs(spec: &SamplingSpec) -> Result<BTreeMap<Lang, f64>, PipelineError> {
    if !(spec.alpha.is_finite() && spec.alpha >= 0.0) {
        return Err(PipelineError::BadAlpha { alpha: spec.alpha });
    }
    let n: u64 = spec.counts.values().sum();
    if n == 0 {
        return Err(PipelineError::AllCountsZero);
    }
    let weight = |&c: &u64| -> f64 {
        if c == 0 {
            0.0
        } else if spec.alpha == 0.0 {
            1.0
        } else if spec.alpha == 1.0 {
            c as f64 / n as f64
        } else {
            (c as f64 / n as f64).powf(spec.alpha)
        }
    };
    let z: f64 = spec.counts.values().map(weight).sum();
    Ok(spec
        .counts
        .iter()
        .map(|(&lang, c)| (lang, weight(c) / z))
        .collect())
}

/// Deterministic infinite document scheduler: languages drawn i.i.d.
/// from [`sampling_probs`], documents within a language in round-robin
/// order. `counts` double as the shard sizes.
pub struct SampleStream {
    probs: Vec<(Lang, f64)>,
    sizes: BTreeMap<Lang, u64>,
    cursors: BTreeMap<Lang, u64>,
    rng: ChaCha8Rng,
}

/// One scheduled document: which shard, which position, and how many
/// full passes over that shard came before.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub lang: Lang,
    pub index: usize,
    pub epoch: u64,
}

impl SampleStream {
    pub fn new(spec: &SamplingSpec) -> Result<SampleStream, PipelineError> {
        let probs = sampling_probs(spec)?;
        Ok(SampleStream {
            probs: probs.into_iter().collect(),
            sizes: spec.counts.clone(),
            cursors: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    pub fn draw(&mut self) -> Draw {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut lang = self.probs.last().expect("non-empty probs").0;
        for &(l, p) in &self.probs {
            acc += p;
            if u < acc {
                lang = l;
                break;
            }
        }
        let size = self.sizes[&lang];
        let cursor = self.cursors.entry(lang).or_insert(0);
        let draw = Draw {
            lang,
            index: (*cursor % size) as usize,
            epoch: *cursor / size,
        };
        *cursor += 1;
        draw
    }
}

impl Iterator for SampleStream {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        Some(self.draw())
    }
}

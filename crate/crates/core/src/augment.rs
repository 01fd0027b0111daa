//! Paraphrase generation, diversity-oriented sampling, and the SFT/DPO
//! training sets used to teach a paraphraser to favor distant rewrites.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::embedding::{DistanceMeasure, EmbeddingVector, TextEmbedder};
use crate::error::{Error, Result};
use crate::http::{self, JsonClient};
use crate::jsonl;

/// System prompt given to the paraphraser.
pub const PARAPHRASE_PROMPT: &str = "You will be given a sentence. Please paraphrase the sentence.";

/// System prompt given to the validity judge. The verdict must lead the reply.
pub const JUDGE_PROMPT: &str = "You check paraphrases produced for data augmentation. \
Decide whether the paraphrase is semantically similar to the original sentence and still fits the given label. \
Begin your reply with exactly one word, VALID or INVALID, followed by a one-sentence reason.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub embedding: EmbeddingVector,
    pub distance_to_original: f64,
}

/// A source sentence with its embedded paraphrase candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseSet {
    pub original_id: String,
    pub original_text: String,
    pub original_embedding: EmbeddingVector,
    pub candidates: Vec<Candidate>,
}

impl ParaphraseSet {
    /// Computes each candidate's distance to the source under `measure`.
    pub fn new(
        original_id: impl Into<String>,
        original_text: impl Into<String>,
        original_embedding: EmbeddingVector,
        candidates: Vec<(String, EmbeddingVector)>,
        measure: DistanceMeasure,
    ) -> Result<Self> {
        let candidates = candidates
            .into_iter()
            .map(|(text, embedding)| {
                if text.is_empty() {
                    return Err(Error::invalid("paraphrase candidate text is empty"));
                }
                let distance_to_original = measure.distance(&embedding, &original_embedding)?;
                Ok(Candidate {
                    text,
                    embedding,
                    distance_to_original,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            original_id: original_id.into(),
            original_text: original_text.into(),
            original_embedding,
            candidates,
        })
    }

    pub fn distances(&self, measure: DistanceMeasure) -> Result<Vec<f64>> {
        self.candidates
            .iter()
            .map(|c| measure.distance(&c.embedding, &self.original_embedding))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// Instruction followed by the source sentence.
pub fn preference_prompt(original: &str) -> String {
    format!("{PARAPHRASE_PROMPT}\n{original}")
}

/// Index of the first maximum and first minimum.
fn arg_extremes(values: &[f64]) -> (usize, usize) {
    let (mut hi, mut lo) = (0, 0);
    for (i, v) in values.iter().enumerate() {
        if *v > values[hi] {
            hi = i;
        }
        if *v < values[lo] {
            lo = i;
        }
    }
    (hi, lo)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreferenceBuild {
    pub pairs: Vec<PreferencePair>,
    /// Source ids whose candidates were all equidistant.
    pub skipped: Vec<String>,
}

/// Most distant candidate becomes `chosen`, the closest `rejected`.
pub fn build_preference_pairs(
    sets: &[ParaphraseSet],
    measure: DistanceMeasure,
) -> Result<PreferenceBuild> {
    let mut out = PreferenceBuild::default();
    for set in sets {
        if set.candidates.len() < 2 {
            return Err(Error::invalid(format!(
                "paraphrase set `{}` has {} candidate(s), need at least 2",
                set.original_id,
                set.candidates.len()
            )));
        }
        let d = set.distances(measure)?;
        let (hi, lo) = arg_extremes(&d);
        if d[hi] == d[lo] {
            log::warn!("paraphrase set `{}`: all candidates equidistant, skipped", set.original_id);
            out.skipped.push(set.original_id.clone());
            continue;
        }
        out.pairs.push(PreferencePair {
            prompt: preference_prompt(&set.original_text),
            chosen: set.candidates[hi].text.clone(),
            rejected: set.candidates[lo].text.clone(),
        });
    }
    Ok(out)
}

/// Fraction of sets where the two measures pick the same chosen and the same
/// rejected candidate.
pub fn measure_agreement(sets: &[ParaphraseSet]) -> Result<(f64, f64)> {
    if sets.is_empty() {
        return Err(Error::invalid("no paraphrase sets"));
    }
    let (mut chosen, mut rejected) = (0usize, 0usize);
    for set in sets {
        let eu = arg_extremes(&set.distances(DistanceMeasure::Euclidean)?);
        let co = arg_extremes(&set.distances(DistanceMeasure::Cosine)?);
        chosen += usize::from(eu.0 == co.0);
        rejected += usize::from(eu.1 == co.1);
    }
    let n = sets.len() as f64;
    Ok((chosen as f64 / n, rejected as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

/// Writes `(original, paraphrase)` pairs as instruction-tuning records.
pub fn emit_sft_dataset(pairs: &[(String, String)], path: &Path) -> Result<()> {
    if pairs.is_empty() {
        log::warn!("{}: writing empty SFT dataset", path.display());
    }
    let records: Vec<SftRecord> = pairs
        .iter()
        .map(|(input, output)| SftRecord {
            instruction: PARAPHRASE_PROMPT.to_string(),
            input: input.clone(),
            output: output.clone(),
        })
        .collect();
    jsonl::write(path, &records)
}

pub fn read_sft_dataset(path: &Path) -> Result<Vec<SftRecord>> {
    Ok(jsonl::read(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Writes preference pairs; refuses pairs whose chosen equals rejected.
pub fn emit_dpo_dataset(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let bad: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.chosen == p.rejected)
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::invalid(format!(
            "preference pairs with chosen == rejected at indices {bad:?}"
        )));
    }
    if pairs.is_empty() {
        log::warn!("{}: writing empty DPO dataset", path.display());
    }
    jsonl::write(path, pairs)
}

pub fn read_dpo_dataset(path: &Path) -> Result<Vec<PreferencePair>> {
    Ok(jsonl::read(path)?.into_iter().map(|(_, r)| r).collect())
}

/// One source sentence and its reference paraphrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    #[serde(default)]
    pub id: Option<String>,
    pub original: String,
    pub paraphrases: Vec<String>,
}

/// Loads a paraphrase corpus; entries without an id get `row-<k>`.
pub fn load_paraphrase_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    let rows: Vec<(usize, CorpusEntry)> = jsonl::read(path)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let mut seen = HashSet::new();
    rows.into_iter()
        .enumerate()
        .map(|(k, (line, mut e))| {
            let id = e.id.get_or_insert_with(|| format!("row-{k}")).clone();
            if !seen.insert(id.clone()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("duplicate id `{id}`"),
                });
            }
            Ok(e)
        })
        .collect()
}

/// Embeds originals and paraphrases of corpus entries into paraphrase sets.
pub fn embed_corpus(
    entries: &[CorpusEntry],
    embedder: &mut dyn TextEmbedder,
    measure: DistanceMeasure,
) -> Result<Vec<ParaphraseSet>> {
    let mut texts = Vec::new();
    for e in entries {
        texts.push(e.original.clone());
        texts.extend(e.paraphrases.iter().cloned());
    }
    let vectors = embedder.embed_texts(&texts)?;
    let mut it = vectors.into_iter();
    entries
        .iter()
        .map(|e| {
            let orig = it.next().expect("one vector per text");
            let cands = e
                .paraphrases
                .iter()
                .map(|p| (p.clone(), it.next().expect("one vector per text")))
                .collect();
            ParaphraseSet::new(e.id.clone().unwrap_or_default(), &e.original, orig, cands, measure)
        })
        .collect()
}

/// Training sets cut from one paraphrase corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSets {
    pub sft: Vec<(String, String)>,
    pub dpo: PreferenceBuild,
    pub sft_sources: usize,
    pub dpo_sources: usize,
}

/// Splits the corpus into disjoint SFT and DPO source subsets (seeded
/// shuffle, `sft_fraction` of entries to SFT). Every paraphrase of an SFT
/// source becomes one SFT pair; DPO sources become preference pairs.
pub fn build_training_sets(
    entries: &[CorpusEntry],
    embedder: &mut dyn TextEmbedder,
    measure: DistanceMeasure,
    sft_fraction: f64,
    seed: u64,
) -> Result<TrainingSets> {
    if !(0.0..=1.0).contains(&sft_fraction) {
        return Err(Error::invalid("sft_fraction must lie in [0, 1]"));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (entries.len() as f64 * sft_fraction).round() as usize;
    let (mut sft_idx, mut dpo_idx) = (order[..cut].to_vec(), order[cut..].to_vec());
    sft_idx.sort_unstable();
    dpo_idx.sort_unstable();

    let sft = sft_idx
        .iter()
        .flat_map(|&i| {
            let e = &entries[i];
            e.paraphrases
                .iter()
                .filter(|p| !p.is_empty())
                .map(move |p| (e.original.clone(), p.clone()))
        })
        .collect();
    let dpo_entries: Vec<CorpusEntry> = dpo_idx.iter().map(|&i| entries[i].clone()).collect();
    let sets = embed_corpus(&dpo_entries, embedder, measure)?;
    Ok(TrainingSets {
        sft,
        dpo: build_preference_pairs(&sets, measure)?,
        sft_sources: sft_idx.len(),
        dpo_sources: dpo_idx.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Beam,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationProviderConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub num_candidates: usize,
    pub decode_mode: DecodeMode,
    pub temperature: f64,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub api_key_env: String,
    /// Whether the server honors `n > 1` in one request.
    pub multi_choice: bool,
    pub concurrency: usize,
    pub backoff_base_ms: u64,
}

impl Default for GenerationProviderConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000".into(),
            model_name: "paraphraser".into(),
            num_candidates: 5,
            decode_mode: DecodeMode::Beam,
            temperature: 1.0,
            timeout_secs: 120.0,
            max_retries: 3,
            api_key_env: "OPENAI_API_KEY".into(),
            multi_choice: true,
            concurrency: 4,
            backoff_base_ms: 500,
        }
    }
}

impl GenerationProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::invalid("num_candidates must be at least 1"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::invalid("temperature must be non-negative"));
        }
        if self.concurrency == 0 {
            return Err(Error::invalid("generation concurrency must be at least 1"));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::invalid("generation timeout must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub n: usize,
    pub decode_mode: DecodeMode,
    pub temperature: f64,
}

/// A chat-completion endpoint returning `n` choices in order.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>>;

    fn supports_multiple_choices(&self) -> bool {
        true
    }
}

/// Client for OpenAI-compatible `/v1/chat/completions` servers.
pub struct HttpChatClient {
    url: String,
    model: String,
    multi_choice: bool,
    client: JsonClient,
}

impl HttpChatClient {
    pub fn new(cfg: &GenerationProviderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            url: http::join(&cfg.endpoint_url, "v1/chat/completions"),
            model: cfg.model_name.clone(),
            multi_choice: cfg.multi_choice,
            client: JsonClient::new(
                Duration::from_secs_f64(cfg.timeout_secs),
                &cfg.api_key_env,
                cfg.max_retries,
                Duration::from_millis(cfg.backoff_base_ms),
            )?,
        })
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "n": req.n,
        });
        match req.decode_mode {
            // vLLM-style extension fields
            DecodeMode::Beam => {
                body["use_beam_search"] = json!(true);
                body["best_of"] = json!(req.n);
                body["temperature"] = json!(0.0);
            }
            DecodeMode::Sample => body["temperature"] = json!(req.temperature),
        }
        body
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    index: Option<usize>,
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>> {
        let value = self.client.post(&self.url, &self.body(req))?;
        let resp: ChatResponse = serde_json::from_value(value)
            .map_err(|e| Error::Protocol(format!("{}: bad chat response: {e}", self.url)))?;
        let mut choices = resp.choices;
        if choices.iter().all(|c| c.index.is_some()) {
            choices.sort_by_key(|c| c.index);
        }
        Ok(choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }

    fn supports_multiple_choices(&self) -> bool {
        self.multi_choice
    }
}

/// Requests `K` paraphrases of `text`; empty outputs are dropped and fewer
/// than `K` survivors is an error. Extra outputs are truncated.
pub fn generate_candidates(
    text: &str,
    cfg: &GenerationProviderConfig,
    backend: &dyn ChatBackend,
) -> Result<Vec<String>> {
    cfg.validate()?;
    let k = cfg.num_candidates;
    let req = |n| ChatRequest {
        system: PARAPHRASE_PROMPT.to_string(),
        user: text.to_string(),
        n,
        decode_mode: cfg.decode_mode,
        temperature: cfg.temperature,
    };
    let raw = if backend.supports_multiple_choices() {
        backend.complete(&req(k))?
    } else {
        let mut all = Vec::with_capacity(k);
        for _ in 0..k {
            all.extend(backend.complete(&req(1))?);
        }
        all
    };
    let mut usable: Vec<String> = raw
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if usable.len() < k {
        return Err(Error::InsufficientCandidates {
            wanted: k,
            got: usable.len(),
        });
    }
    usable.truncate(k);
    let distinct: HashSet<&str> = usable.iter().map(String::as_str).collect();
    if distinct.len() < usable.len() {
        log::info!(
            "{} duplicate candidate(s) for {text:?}",
            usable.len() - distinct.len()
        );
    }
    Ok(usable)
}

/// Runs [`generate_candidates`] for every text with at most
/// `cfg.concurrency` requests in flight. Output follows input order.
pub fn generate_all(
    texts: &[String],
    cfg: &GenerationProviderConfig,
    backend: &dyn ChatBackend,
) -> Result<Vec<Vec<String>>> {
    cfg.validate()?;
    let results: Mutex<Vec<Option<Result<Vec<String>>>>> =
        Mutex::new((0..texts.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..cfg.concurrency.min(texts.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= texts.len() {
                    break;
                }
                let r = generate_candidates(&texts[i], cfg, backend);
                results.lock().expect("poisoned")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("poisoned")
        .into_iter()
        .map(|r| r.expect("every text is processed"))
        .collect()
}

/// Candidate indices ordered by distance to the source, farthest first;
/// ties keep the lower index first.
pub fn rank_candidates(
    original: &str,
    candidates: &[String],
    embedder: &mut dyn TextEmbedder,
    measure: DistanceMeasure,
) -> Result<Vec<(usize, f64)>> {
    let mut texts = Vec::with_capacity(candidates.len() + 1);
    texts.push(original.to_string());
    texts.extend(candidates.iter().cloned());
    let vectors = embedder.embed_texts(&texts)?;
    let mut ranked = vectors[1..]
        .iter()
        .enumerate()
        .map(|(i, v)| Ok((i, measure.distance(v, &vectors[0])?)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// The `top_n` candidates farthest from the source.
pub fn diversity_sample(
    original: &str,
    candidates: &[String],
    embedder: &mut dyn TextEmbedder,
    measure: DistanceMeasure,
    top_n: usize,
) -> Result<Vec<String>> {
    if top_n == 0 || top_n > candidates.len() {
        return Err(Error::invalid(format!(
            "top_n {top_n} must lie in 1..={}",
            candidates.len()
        )));
    }
    Ok(rank_candidates(original, candidates, embedder, measure)?
        .into_iter()
        .take(top_n)
        .map(|(i, _)| candidates[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validity {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub validity: Validity,
    pub rationale: String,
}

/// Parses a reply whose first word is VALID or INVALID (any case, trailing
/// punctuation allowed). Anything else is an error.
pub fn parse_verdict(reply: &str) -> Result<Verdict> {
    let trimmed = reply.trim_start();
    let end = trimmed
        .find(|c: char| !c.is_alphabetic())
        .unwrap_or(trimmed.len());
    let (word, rest) = trimmed.split_at(end);
    let validity = match word.to_ascii_uppercase().as_str() {
        "VALID" => Validity::Valid,
        "INVALID" => Validity::Invalid,
        _ => return Err(Error::Verdict(reply.to_string())),
    };
    let rationale = rest
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .trim()
        .to_string();
    Ok(Verdict {
        validity,
        rationale,
    })
}

pub fn judge_prompt(original: &str, paraphrase: &str, label: &str) -> String {
    format!("Original: {original}\nParaphrase: {paraphrase}\nLabel: {label}")
}

/// Asks the judge whether a paraphrase keeps the meaning and label.
pub fn judge_validity(
    original: &str,
    paraphrase: &str,
    label: &str,
    judge_cfg: &GenerationProviderConfig,
    backend: &dyn ChatBackend,
) -> Result<Verdict> {
    let reply = backend.complete(&ChatRequest {
        system: JUDGE_PROMPT.to_string(),
        user: judge_prompt(original, paraphrase, label),
        n: 1,
        decode_mode: DecodeMode::Sample,
        temperature: judge_cfg.temperature,
    })?;
    let first = reply
        .into_iter()
        .next()
        .ok_or_else(|| Error::Protocol("judge returned no choices".into()))?;
    parse_verdict(&first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub total: usize,
    pub valid: usize,
    pub invalid: usize,
    pub rate: f64,
}

/// Judges `(original, paraphrase, label)` triples and tallies the verdicts.
pub fn judge_batch(
    items: &[(String, String, String)],
    judge_cfg: &GenerationProviderConfig,
    backend: &dyn ChatBackend,
) -> Result<ValidityReport> {
    let mut valid = 0;
    for (original, paraphrase, label) in items {
        if judge_validity(original, paraphrase, label, judge_cfg, backend)?.validity == Validity::Valid {
            valid += 1;
        }
    }
    let total = items.len();
    Ok(ValidityReport {
        total,
        valid,
        invalid: total - valid,
        rate: if total == 0 { 0.0 } else { valid as f64 / total as f64 },
    })
}

/// Deterministic offline stand-ins for the generation and judge endpoints.
pub mod mock {
    use super::*;

    const TEMPLATES: [&str; 7] = [
        "In other words, {}",
        "Put differently: {}",
        "To put it another way, {}",
        "{} That is the gist of it.",
        "Simply stated, {}",
        "Here is another phrasing: {}",
        "{} Said otherwise, the same holds.",
    ];

    /// Generates rewrites by wrapping, reordering, or trimming the input.
    #[derive(Debug, Default)]
    pub struct TemplateGenerator {
        calls: AtomicUsize,
    }

    impl TemplateGenerator {
        pub fn new() -> Self {
            Self::default()
        }

        pub fn calls(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }

        pub fn variant(text: &str, k: usize) -> String {
            let words: Vec<&str> = text.split_whitespace().collect();
            let base = match k % (TEMPLATES.len() + 2) {
                i if i < TEMPLATES.len() => TEMPLATES[i].replace("{}", text),
                i if i == TEMPLATES.len() => {
                    let mut w = words.clone();
                    w.reverse();
                    format!("Reordered: {}", w.join(" "))
                }
                _ => format!("Briefly, {}", words.iter().skip(1).copied().collect::<Vec<_>>().join(" ")),
            };
            let round = k / (TEMPLATES.len() + 2);
            if round == 0 {
                base
            } else {
                format!("{base} (variant {round})")
            }
        }
    }

    impl ChatBackend for TemplateGenerator {
        fn complete(&self, req: &ChatRequest) -> Result<Vec<String>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok((0..req.n).map(|k| Self::variant(&req.user, k)).collect())
        }
    }

    /// Replays fixed replies, ignoring the request except for `n`.
    #[derive(Debug, Default)]
    pub struct ScriptedChat {
        pub replies: Vec<String>,
        pub multi_choice: bool,
        cursor: AtomicUsize,
    }

    impl ScriptedChat {
        pub fn new(replies: &[&str], multi_choice: bool) -> Self {
            Self {
                replies: replies.iter().map(|s| s.to_string()).collect(),
                multi_choice,
                cursor: AtomicUsize::new(0),
            }
        }

        pub fn calls(&self) -> usize {
            self.cursor.load(Ordering::SeqCst)
        }
    }

    impl ChatBackend for ScriptedChat {
        fn complete(&self, req: &ChatRequest) -> Result<Vec<String>> {
            if self.multi_choice {
                self.cursor.fetch_add(1, Ordering::SeqCst);
                return Ok(self.replies.iter().take(req.n).cloned().collect());
            }
            let i = self.cursor.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies.get(i).cloned().into_iter().collect())
        }

        fn supports_multiple_choices(&self) -> bool {
            self.multi_choice
        }
    }

    /// Judge answering VALID for the first `valid` of every `period` calls.
    #[derive(Debug)]
    pub struct ProgrammedJudge {
        valid: usize,
        period: usize,
        calls: AtomicUsize,
    }

    impl ProgrammedJudge {
        pub fn new(valid: usize, period: usize) -> Self {
            assert!(period > 0 && valid <= period);
            Self {
                valid,
                period,
                calls: AtomicUsize::new(0),
            }
        }

        pub fn rate(&self) -> f64 {
            self.valid as f64 / self.period as f64
        }
    }

    impl ChatBackend for ProgrammedJudge {
        fn complete(&self, _req: &ChatRequest) -> Result<Vec<String>> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            let reply = if i % self.period < self.valid {
                "VALID - same meaning, label preserved"
            } else {
                "INVALID - meaning drifted"
            };
            Ok(vec![reply.to_string()])
        }
    }
}

/// Group candidate texts under their source ids, preserving order.
pub fn index_candidates(ids: &[String], candidates: Vec<Vec<String>>) -> HashMap<String, Vec<String>> {
    ids.iter().cloned().zip(candidates).collect()
}

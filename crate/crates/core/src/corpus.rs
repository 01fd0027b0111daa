//! Labeled text datasets, tokenization, and lexical diversity counts.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Separator placed between the two sentences of a sentence-pair sample.
pub const PAIR_SEPARATOR: &str = " [SEP] ";
const SEPARATOR_TOKEN: &str = "[SEP]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Original,
    Paraphrase,
    Retained,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::Paraphrase => "paraphrase",
            Origin::Retained => "retained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub id: String,
    pub text: String,
    pub label: String,
    #[serde(default)]
    pub origin: Origin,
}

impl TextSample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: label.into(),
            origin: Origin::Original,
        }
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }
}

/// Joins the two halves of a sentence-pair sample.
pub fn join_pair(first: &str, second: &str) -> String {
    format!("{first}{PAIR_SEPARATOR}{second}")
}

/// An ordered, immutable collection of labeled samples.
///
/// The label registry is the set of distinct labels in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    name: String,
    samples: Vec<TextSample>,
    labels: IndexSet<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<TextSample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        let mut labels = IndexSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            if s.text.is_empty() {
                return Err(Error::invalid(format!("sample `{}` has empty text", s.id)));
            }
            labels.insert(s.label.clone());
        }
        Ok(Self {
            name: name.into(),
            samples,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[TextSample] {
        &self.samples
    }

    pub fn label_registry(&self) -> &IndexSet<String> {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TextSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn into_samples(self) -> Vec<TextSample> {
        self.samples
    }
}

#[derive(Deserialize)]
struct RawSample {
    id: Option<String>,
    text: Option<String>,
    label: Option<String>,
    #[serde(default)]
    origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

/// Loads a JSONL dataset. Samples without an `id` are named `row-<k>`
/// where `k` is the zero-based record index.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let DatasetFormat::Jsonl = format;
    let rows: Vec<(usize, RawSample)> = jsonl::read(path)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::with_capacity(rows.len());
    let mut seen = HashSet::with_capacity(rows.len());
    for (k, (line, raw)) in rows.into_iter().enumerate() {
        let text = raw
            .text
            .ok_or_else(|| parse_err(line, "missing field `text`".into()))?;
        if text.is_empty() {
            return Err(parse_err(line, "field `text` is empty".into()));
        }
        let label = raw
            .label
            .ok_or_else(|| parse_err(line, "missing field `label`".into()))?;
        let id = raw.id.unwrap_or_else(|| format!("row-{k}"));
        if !seen.insert(id.clone()) {
            return Err(parse_err(line, format!("duplicate id `{id}`")));
        }
        samples.push(TextSample {
            id,
            text,
            label,
            origin: raw.origin,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, samples)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    jsonl::write(path, dataset.samples())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Whitespace split, then leading/trailing punctuation stripped.
    #[default]
    WhitespacePunct,
}

/// Serializable tokenization settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenPolicyConfig {
    pub lowercase: bool,
    pub split: SplitRule,
    pub validity_wordlist: Option<PathBuf>,
}

impl Default for TokenPolicyConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            split: SplitRule::WhitespacePunct,
            validity_wordlist: None,
        }
    }
}

/// Tokenization policy with the optional validity wordlist loaded.
#[derive(Debug, Clone)]
pub struct TokenPolicy {
    pub lowercase: bool,
    pub split: SplitRule,
    wordlist: Option<Arc<HashSet<String>>>,
}

impl Default for TokenPolicy {
    fn default() -> Self {
        Self {
            lowercase: true,
            split: SplitRule::WhitespacePunct,
            wordlist: None,
        }
    }
}

impl TokenPolicy {
    pub fn from_config(cfg: &TokenPolicyConfig) -> Result<Self> {
        let mut policy = Self {
            lowercase: cfg.lowercase,
            split: cfg.split,
            wordlist: None,
        };
        if let Some(path) = &cfg.validity_wordlist {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            policy = policy.with_wordlist(text.split_whitespace());
        }
        Ok(policy)
    }

    /// Restricts lexical counts to the given words. Entries are folded the
    /// same way tokens are.
    pub fn with_wordlist<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set = words
            .into_iter()
            .map(|w| self.fold(w.as_ref()))
            .collect::<HashSet<_>>();
        self.wordlist = Some(Arc::new(set));
        self
    }

    fn fold(&self, word: &str) -> String {
        if self.lowercase {
            word.to_lowercase()
        } else {
            word.to_string()
        }
    }

    fn is_valid(&self, token: &str) -> bool {
        self.wordlist.as_ref().is_none_or(|w| w.contains(token))
    }
}

/// Splits text into word tokens. The sentence-pair separator is dropped.
pub fn tokenize(text: &str, policy: &TokenPolicy) -> Vec<String> {
    let SplitRule::WhitespacePunct = policy.split;
    text.split_whitespace()
        .filter(|raw| *raw != SEPARATOR_TOKEN)
        .map(|raw| raw.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(|t| policy.fold(t))
        .collect()
}

/// Valid tokens per sentence segment; n-grams never span the pair separator.
fn valid_segments<'a>(
    text: &'a str,
    policy: &'a TokenPolicy,
) -> impl Iterator<Item = Vec<String>> + 'a {
    text.split(SEPARATOR_TOKEN).map(move |segment| {
        tokenize(segment, policy)
            .into_iter()
            .filter(|t| policy.is_valid(t))
            .collect()
    })
}

/// Number of distinct valid tokens over the whole dataset.
pub fn vocabulary_size(dataset: &Dataset, policy: &TokenPolicy) -> usize {
    let mut vocab: HashSet<String> = HashSet::new();
    for s in dataset.samples() {
        for segment in valid_segments(&s.text, policy) {
            vocab.extend(segment);
        }
    }
    vocab.len()
}

/// Number of distinct word n-grams over the whole dataset.
pub fn unique_ngrams(dataset: &Dataset, n: usize, policy: &TokenPolicy) -> Result<usize> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    let mut grams: HashSet<Vec<String>> = HashSet::new();
    for s in dataset.samples() {
        for segment in valid_segments(&s.text, policy) {
            grams.extend(segment.windows(n).map(<[String]>::to_vec));
        }
    }
    Ok(grams.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(texts: &[&str]) -> Dataset {
        let samples = texts
            .iter()
            .enumerate()
            .map(|(i, t)| TextSample::new(format!("s{i}"), *t, "x"))
            .collect();
        Dataset::new("t", samples).unwrap()
    }

    fn write_lines(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn load_three_lines_builds_registry_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "d.jsonl",
            "{\"text\":\"one\",\"label\":\"a\"}\n{\"text\":\"two\",\"label\":\"a\"}\n{\"id\":\"z\",\"text\":\"three\",\"label\":\"b\"}\n",
        );
        let d = load_dataset(&p, DatasetFormat::Jsonl).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.name(), "d");
        let labels: Vec<_> = d.label_registry().iter().cloned().collect();
        assert_eq!(labels, ["a", "b"]);
        assert_eq!(d.samples()[0].id, "row-0");
        assert_eq!(d.samples()[2].id, "z");
        assert_eq!(d.samples()[1].origin, Origin::Original);
    }

    #[test]
    fn load_empty_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "e.jsonl", "");
        let err = load_dataset(&p, DatasetFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
        assert!(err.to_string().contains("empty dataset"));
    }

    #[test]
    fn load_missing_text_cites_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "m.jsonl",
            "{\"text\":\"ok\",\"label\":\"a\"}\n{\"label\":\"a\"}\n",
        );
        match load_dataset(&p, DatasetFormat::Jsonl).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("text"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_duplicate_ids_and_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "dup.jsonl",
            "{\"id\":\"a\",\"text\":\"x\",\"label\":\"l\"}\n{\"id\":\"a\",\"text\":\"y\",\"label\":\"l\"}\n",
        );
        assert!(load_dataset(&p, DatasetFormat::Jsonl)
            .unwrap_err()
            .to_string()
            .contains("duplicate id"));
        let p = write_lines(dir.path(), "bad.jsonl", "{\"text\":\"x\",\"label\":\"l\"}\nnot json\n");
        assert!(matches!(
            load_dataset(&p, DatasetFormat::Jsonl),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn write_is_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::new(
            "rt",
            vec![
                TextSample::new("a", "héllo \"quoted\"", "pos"),
                TextSample::new("b", join_pair("left", "right"), "neg").with_origin(Origin::Retained),
            ],
        )
        .unwrap();
        let p1 = dir.path().join("rt.jsonl");
        write_dataset(&d, &p1).unwrap();
        let back = load_dataset(&p1, DatasetFormat::Jsonl).unwrap();
        assert_eq!(back, d);
        let sub = dir.path().join("again");
        std::fs::create_dir(&sub).unwrap();
        let p2 = sub.join("rt.jsonl");
        write_dataset(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn write_to_unwritable_path_is_io_error() {
        let d = ds(&["a"]);
        let err = write_dataset(&d, Path::new("/nonexistent-dir/x/y.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn tokenize_examples() {
        let p = TokenPolicy::default();
        assert_eq!(tokenize("My joints ache!", &p), ["my", "joints", "ache"]);
        assert!(tokenize("", &p).is_empty());
        assert_eq!(tokenize("A a A", &p), ["a", "a", "a"]);
        assert_eq!(tokenize("one [SEP] two", &p), ["one", "two"]);
        assert_eq!(tokenize("(\"quoted\") -- don't", &p), ["quoted", "don't"]);
        let keep_case = TokenPolicy {
            lowercase: false,
            ..TokenPolicy::default()
        };
        assert_eq!(tokenize("A a", &keep_case), ["A", "a"]);
    }

    #[test]
    fn vocabulary_examples() {
        let p = TokenPolicy::default();
        assert_eq!(vocabulary_size(&ds(&["a b", "b c"]), &p), 3);
        let empty = Dataset::new("e", vec![]).unwrap();
        assert_eq!(vocabulary_size(&empty, &p), 0);
        let filtered = TokenPolicy::default().with_wordlist(["a", "B"]);
        assert_eq!(vocabulary_size(&ds(&["a b zzqx"]), &filtered), 2);
    }

    #[test]
    fn ngram_examples() {
        let p = TokenPolicy::default();
        assert_eq!(unique_ngrams(&ds(&["a b c d"]), 3, &p).unwrap(), 2);
        assert_eq!(unique_ngrams(&ds(&["a b"]), 3, &p).unwrap(), 0);
        assert_eq!(unique_ngrams(&ds(&["a b c", "a b c"]), 3, &p).unwrap(), 1);
        assert!(unique_ngrams(&ds(&["a"]), 0, &p).is_err());
    }

    #[test]
    fn ngrams_do_not_cross_pair_separator() {
        let p = TokenPolicy::default();
        let d = ds(&[&join_pair("a b", "c d")]);
        assert_eq!(unique_ngrams(&d, 2, &p).unwrap(), 2);
        assert_eq!(unique_ngrams(&d, 3, &p).unwrap(), 0);
        assert_eq!(vocabulary_size(&d, &p), 4);
    }

    #[test]
    fn wordlist_from_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let words = write_lines(dir.path(), "words.txt", "alpha\nbeta\n");
        let policy = TokenPolicy::from_config(&TokenPolicyConfig {
            validity_wordlist: Some(words),
            ..TokenPolicyConfig::default()
        })
        .unwrap();
        assert_eq!(vocabulary_size(&ds(&["Alpha beta gamma"]), &policy), 2);
    }
}

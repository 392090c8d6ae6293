//! Scenario corpora: ingestion, tokenization, vocabulary and topic similarity.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EmbeddingProvider;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const END: &str = "<end>";

/// Lowercases, splits on whitespace and detaches leading/trailing punctuation
/// into standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_punct(chars[start]) {
            tokens.push(chars[start].to_string());
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && is_punct(chars[end - 1]) {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        if start < end {
            tokens.push(chars[start..end].iter().collect());
        }
        tokens.extend(trailing.into_iter().rev());
    }
    tokens
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '…' | '—' | '–')
}

/// Splits running text after `.`, `!` or `?` (plus closing quotes) that is
/// followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            while i + 1 < chars.len() && matches!(chars[i + 1], '"' | '\'' | '”' | '’' | ')') {
                i += 1;
                current.push(chars[i]);
            }
            if i + 1 == chars.len() || chars[i + 1].is_whitespace() {
                let s = current.trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                current.clear();
            }
        }
        i += 1;
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "SentenceRecord", into = "SentenceRecord")]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    id: String,
    text: String,
}

impl From<SentenceRecord> for Sentence {
    fn from(r: SentenceRecord) -> Self {
        Sentence::new(r.id, r.text)
    }
}

impl From<Sentence> for SentenceRecord {
    fn from(s: Sentence) -> Self {
        SentenceRecord {
            id: s.id,
            text: s.text,
        }
    }
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Sentence {
            id: id.into(),
            text,
            tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioSource {
    #[default]
    CorpusParagraph,
    HumanCurated,
}

impl ScenarioSource {
    fn is_default(&self) -> bool {
        *self == ScenarioSource::CorpusParagraph
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub sentences: Vec<Sentence>,
    #[serde(default, skip_serializing_if = "ScenarioSource::is_default")]
    pub source: ScenarioSource,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.sentences.iter().flat_map(|s| s.tokens.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    PlainParagraphs,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "plain-paragraphs" | "paragraphs" => Ok(CorpusFormat::PlainParagraphs),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Scenario>> {
    let text = read_to_string(path)?;
    let scenarios = match format {
        CorpusFormat::Jsonl => parse_jsonl_scenarios(path, &text)?,
        CorpusFormat::PlainParagraphs => parse_paragraphs(&text),
    };
    if scenarios.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    let mut seen = HashSet::new();
    for sc in &scenarios {
        for s in &sc.sentences {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("duplicate sentence id `{}`", s.id),
                });
            }
        }
    }
    Ok(scenarios)
}

fn parse_jsonl_scenarios(path: &Path, text: &str) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sc: Scenario = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if sc.sentences.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("scenario `{}` has no sentences", sc.scenario_id),
            });
        }
        out.push(sc);
    }
    Ok(out)
}

fn parse_paragraphs(text: &str) -> Vec<Scenario> {
    let mut out = Vec::new();
    let mut para = String::new();
    let flush = |para: &mut String, out: &mut Vec<Scenario>| {
        let sents = split_sentences(para);
        if !sents.is_empty() {
            let idx = out.len();
            out.push(Scenario {
                scenario_id: format!("p{idx}"),
                sentences: sents
                    .into_iter()
                    .enumerate()
                    .map(|(j, s)| Sentence::new(format!("p{idx}-s{j}"), s))
                    .collect(),
                source: ScenarioSource::CorpusParagraph,
            });
        }
        para.clear();
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut para, &mut out);
        } else {
            if !para.is_empty() {
                para.push(' ');
            }
            para.push_str(line.trim());
        }
    }
    flush(&mut para, &mut out);
    out
}

pub fn write_corpus(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    let mut buf = Vec::new();
    for sc in scenarios {
        serde_json::to_writer(&mut buf, sc)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// One topic of a human-curated evaluation file: two mutually exclusive
/// accounts of the same question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTopic {
    pub topic: String,
    pub scenarios: Vec<Scenario>,
}

pub fn load_eval_set(path: &Path) -> Result<Vec<EvalTopic>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut topic: EvalTopic =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if topic.scenarios.len() != 2 {
            return Err(parse_err(format!(
                "expected 2 scenarios, found {}",
                topic.scenarios.len()
            )));
        }
        for sc in &mut topic.scenarios {
            if sc.sentences.is_empty() {
                return Err(parse_err(format!("scenario `{}` is empty", sc.scenario_id)));
            }
            sc.source = ScenarioSource::HumanCurated;
        }
        out.push(topic);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(out)
}

/// Frequency-ranked vocabulary. Reserved symbols are kept apart from the
/// ranked list and always occupy the first indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_scenarios: usize,
    pub vocab: Vec<String>,
    pub words_per_scenario: f64,
    pub sents_per_scenario: f64,
}

impl CorpusStats {
    pub fn reserved() -> [&'static str; 2] {
        [UNK, END]
    }

    /// Reserved symbols followed by the ranked vocabulary, one per line.
    pub fn vocab_file_contents(&self) -> String {
        let mut s = String::new();
        for t in Self::reserved().iter().copied().chain(self.vocab.iter().map(String::as_str)) {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn write_vocab(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.vocab_file_contents().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn vocab_hash(&self) -> String {
        hex::encode(Sha256::digest(self.vocab_file_contents().as_bytes()))
    }

    pub fn vocab_set(&self) -> HashSet<String> {
        self.vocab.iter().cloned().collect()
    }
}

pub fn build_vocab(scenarios: &[Scenario], cap: usize) -> Result<CorpusStats> {
    if cap < 1 {
        return Err(Error::Config("vocabulary cap must be at least 1".into()));
    }
    if scenarios.is_empty() {
        return Err(Error::Precondition("cannot build a vocabulary from no scenarios".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut words = 0usize;
    let mut sents = 0usize;
    for sc in scenarios {
        sents += sc.len();
        for t in sc.tokens() {
            words += 1;
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap);
    let n = scenarios.len() as f64;
    Ok(CorpusStats {
        num_scenarios: scenarios.len(),
        vocab: ranked.into_iter().map(|(t, _)| t.to_string()).collect(),
        words_per_scenario: words as f64 / n,
        sents_per_scenario: sents as f64 / n,
    })
}

/// Mean word vector over every token of a scenario.
pub fn mean_word_vector(scenario: &Scenario, embedder: &dyn EmbeddingProvider) -> Result<Array1<f64>> {
    let tokens: Vec<String> = scenario.tokens().cloned().collect();
    if tokens.is_empty() {
        return Err(Error::Precondition(format!(
            "scenario `{}` has no tokens",
            scenario.scenario_id
        )));
    }
    let m = embedder.embed(&tokens);
    Ok(m.mean_axis(ndarray::Axis(0)).expect("non-empty"))
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Option<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.dot(b) / (na * nb))
}

/// Cosine similarity between the mean word vectors of two scenarios.
/// Higher values mean more topically similar (and harder to separate).
pub fn topic_similarity(
    a: &Scenario,
    b: &Scenario,
    embedder: &dyn EmbeddingProvider,
) -> Result<f64> {
    let va = mean_word_vector(a, embedder)?;
    let vb = mean_word_vector(b, embedder)?;
    cosine(&va, &vb).ok_or_else(|| {
        Error::UndefinedSimilarity(format!(
            "zero mean vector for `{}` or `{}`",
            a.scenario_id, b.scenario_id
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{StubHashProvider, TableProvider};

    fn scenario(id: &str, texts: &[&str]) -> Scenario {
        Scenario {
            scenario_id: id.into(),
            sentences: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Sentence::new(format!("{id}-{i}"), *t))
                .collect(),
            source: ScenarioSource::CorpusParagraph,
        }
    }

    #[test]
    fn tokenizer_detaches_punctuation() {
        assert_eq!(
            tokenize("He never exited the consulate, but died there."),
            ["he", "never", "exited", "the", "consulate", ",", "but", "died", "there", "."]
        );
        assert_eq!(tokenize("\"Quoted!\""), ["\"", "quoted", "!", "\""]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn jsonl_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        for i in 0..3 {
            writeln!(
                f,
                r#"{{"scenario_id":"s{i}","sentences":[{{"id":"s{i}-0","text":"A b."}},{{"id":"s{i}-1","text":"C d."}}]}}"#
            )
            .unwrap();
        }
        drop(f);
        let scs = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(scs.len(), 3);
        assert_eq!(
            scs.iter().map(|s| s.scenario_id.as_str()).collect::<Vec<_>>(),
            ["s0", "s1", "s2"]
        );
        assert_eq!(scs[0].sentences[0].tokens, ["a", "b", "."]);

        let out = dir.path().join("out.jsonl");
        write_corpus(&out, &scs).unwrap();
        assert_eq!(load_corpus(&out, CorpusFormat::Jsonl).unwrap(), scs);
        assert_eq!(fs::read_to_string(&out).unwrap(), fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn jsonl_missing_sentences_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"scenario_id\":\"a\",\"sentences\":[{\"id\":\"x\",\"text\":\"y\"}]}\n{\"scenario_id\":\"b\"}\n",
        )
        .unwrap();
        match load_corpus(&path, CorpusFormat::Jsonl) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("sentences"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "").unwrap();
        assert!(matches!(
            load_corpus(&path, CorpusFormat::Jsonl),
            Err(Error::EmptyCorpus(_))
        ));
        assert!(matches!(
            load_corpus(&path, CorpusFormat::PlainParagraphs),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn paragraph_mode_splits_sentences() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        fs::write(
            &path,
            "Jamal Khashoggi was murdered. A team flew in. He never exited the consulate!\n\
             Was he alive? \"Nobody knows.\"\n\nSecond paragraph here.\n",
        )
        .unwrap();
        let scs = load_corpus(&path, CorpusFormat::PlainParagraphs).unwrap();
        assert_eq!(scs.len(), 2);
        assert_eq!(scs[0].len(), 5);
        assert_eq!(scs[0].sentences[4].text, "\"Nobody knows.\"");
        assert_eq!(scs[1].sentences[0].id, "p1-s0");
    }

    #[test]
    fn vocab_frequency_order_and_cap() {
        let sc = scenario("x", &["a a a b b c"]);
        let stats = build_vocab(std::slice::from_ref(&sc), 2).unwrap();
        assert_eq!(stats.vocab, ["a", "b"]);
        assert_eq!(stats.vocab_file_contents(), "<unk>\n<end>\na\nb\n");

        let full = build_vocab(std::slice::from_ref(&sc), 100).unwrap();
        assert_eq!(full.vocab, ["a", "b", "c"]);
        assert!(matches!(build_vocab(&[sc], 0), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_ties_break_lexicographically_and_deterministically() {
        let a = scenario("x", &["zeta alpha mid", "alpha zeta"]);
        let s1 = build_vocab(std::slice::from_ref(&a), 10).unwrap();
        let s2 = build_vocab(&[a.clone()], 10).unwrap();
        assert_eq!(s1.vocab, ["alpha", "zeta", "mid"]);
        assert_eq!(s1.vocab_hash(), s2.vocab_hash());
        assert_eq!(s1.sents_per_scenario, 2.0);
        assert_eq!(s1.words_per_scenario, 5.0);
    }

    #[test]
    fn topic_similarity_self_and_symmetry() {
        let p = StubHashProvider::new(16, 3);
        let a = scenario("a", &["the plane was downed by a missile"]);
        let b = scenario("b", &["the plane exploded because of a bomb"]);
        let self_sim = topic_similarity(&a, &a, &p).unwrap();
        assert!((self_sim - 1.0).abs() < 1e-6);
        assert_eq!(
            topic_similarity(&a, &b, &p).unwrap(),
            topic_similarity(&b, &a, &p).unwrap()
        );
    }

    #[test]
    fn topic_similarity_orthogonal_support_is_zero() {
        // "x" lives on axis 0, "y" on axis 1: mean vectors are e0 and e1.
        let table = TableProvider::from_pairs(
            2,
            vec![("x".into(), vec![1.0, 0.0]), ("y".into(), vec![0.0, 1.0])],
        )
        .unwrap();
        let a = scenario("a", &["x x"]);
        let b = scenario("b", &["y"]);
        assert!(topic_similarity(&a, &b, &table).unwrap().abs() < 1e-6);

        let zero = TableProvider::from_pairs(2, vec![("z".into(), vec![0.0, 0.0])]).unwrap();
        let c = scenario("c", &["z"]);
        assert!(matches!(
            topic_similarity(&c, &a, &zero),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn eval_set_requires_two_scenarios() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        let good = r#"{"topic":"Who downed MH17?","scenarios":[{"scenario_id":"a","sentences":[{"id":"a0","text":"A missile."}]},{"scenario_id":"b","sentences":[{"id":"b0","text":"A bomb."}]}]}"#;
        fs::write(&path, format!("{good}\n")).unwrap();
        let topics = load_eval_set(&path).unwrap();
        assert_eq!(topics[0].scenarios[1].source, ScenarioSource::HumanCurated);

        let bad = r#"{"topic":"t","scenarios":[{"scenario_id":"a","sentences":[{"id":"a0","text":"x"}]}]}"#;
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        assert!(matches!(load_eval_set(&path), Err(Error::Parse { line: 2, .. })));
    }
}

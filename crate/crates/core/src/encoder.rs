//! Word vectors and BiLSTM sentence encodings.
//!
//! The graph-building functions here are shared between training (where the
//! encoder receives gradients) and inference (where `encode_sentence` runs
//! the same recurrence on a throwaway graph).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Sentence, UNK};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mixgen::Mixture;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PretrainedContextual,
    PretrainedTable,
    StubHash,
}

/// Serializable description of a provider, stored in checkpoints and
/// manifests so a model can be paired with the embeddings it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderSpec {
    StubHash {
        dim: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vocab_hash: Option<String>,
    },
    Table { dim: usize, path: PathBuf },
}

impl ProviderSpec {
    pub fn dim(&self) -> usize {
        match self {
            ProviderSpec::StubHash { dim, .. } | ProviderSpec::Table { dim, .. } => *dim,
        }
    }

    /// Instantiates the provider. A stub spec carrying a vocabulary hash
    /// must be built with `StubHashProvider::with_vocab` instead.
    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        match self {
            ProviderSpec::StubHash { dim, seed, vocab_hash: None } => {
                Ok(Box::new(StubHashProvider::new(*dim, *seed)))
            }
            ProviderSpec::StubHash { vocab_hash: Some(_), .. } => Err(Error::Config(
                "stub provider was trained with a truncated vocabulary; supply it explicitly".into(),
            )),
            ProviderSpec::Table { dim, path } => {
                let p = TableProvider::load(path)?;
                if p.dim() != *dim {
                    return Err(Error::Config(format!(
                        "table {} has dim {}, expected {dim}",
                        path.display(),
                        p.dim()
                    )));
                }
                Ok(Box::new(p))
            }
        }
    }

    /// Checks that `other` produces vectors compatible with this spec.
    pub fn check_compatible(&self, other: &ProviderSpec) -> Result<()> {
        if self != other {
            return Err(Error::Config(format!(
                "embedding provider mismatch: checkpoint expects {self:?}, got {other:?}"
            )));
        }
        Ok(())
    }
}

/// Maps token sequences to word vectors of a fixed width.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn provenance(&self) -> Provenance;
    fn spec(&self) -> ProviderSpec;
    /// One row per token.
    fn embed(&self, tokens: &[String]) -> Array2<f64>;
}

/// Deterministic unit-norm vectors derived from a hash of `(seed, token)`.
#[derive(Clone, Debug)]
pub struct StubHashProvider {
    dim: usize,
    seed: u64,
    vocab: Option<(Arc<HashSet<String>>, String)>,
}

impl StubHashProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        StubHashProvider { dim, seed, vocab: None }
    }

    /// Tokens outside `vocab` share the UNK vector.
    pub fn with_vocab(dim: usize, seed: u64, vocab: HashSet<String>, vocab_hash: String) -> Self {
        StubHashProvider {
            dim,
            seed,
            vocab: Some((Arc::new(vocab), vocab_hash)),
        }
    }

    pub fn vector(&self, token: &str) -> Array1<f64> {
        let token = match &self.vocab {
            Some((v, _)) if !v.contains(token) => UNK,
            _ => token,
        };
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Array1<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
        } else {
            v[0] = 1.0;
        }
        v
    }
}

impl EmbeddingProvider for StubHashProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn provenance(&self) -> Provenance {
        Provenance::StubHash
    }

    fn spec(&self) -> ProviderSpec {
        ProviderSpec::StubHash {
            dim: self.dim,
            seed: self.seed,
            vocab_hash: self.vocab.as_ref().map(|(_, h)| h.clone()),
        }
    }

    fn embed(&self, tokens: &[String]) -> Array2<f64> {
        let mut m = Array2::zeros((tokens.len(), self.dim));
        for (i, t) in tokens.iter().enumerate() {
            m.row_mut(i).assign(&self.vector(t));
        }
        m
    }
}

/// Pretrained static vectors read from a whitespace-separated text table
/// (`token v1 v2 ... vd` per line). Missing tokens map to the `<unk>` row,
/// or to zeros if the table has none.
#[derive(Clone, Debug)]
pub struct TableProvider {
    dim: usize,
    path: PathBuf,
    table: HashMap<String, Array1<f64>>,
}

impl TableProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
            let vals = vals.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("bad vector component: {e}"),
            })?;
            if *dim.get_or_insert(vals.len()) != vals.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "inconsistent vector width".into(),
                });
            }
            pairs.push((tok.to_string(), vals));
        }
        let dim = dim.ok_or_else(|| Error::EmptyCorpus(path.to_path_buf()))?;
        let mut p = Self::from_pairs(dim, pairs)?;
        p.path = path.to_path_buf();
        Ok(p)
    }

    pub fn from_pairs(dim: usize, pairs: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut table = HashMap::new();
        for (tok, v) in pairs {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "vector for `{tok}` has width {}, expected {dim}",
                    v.len()
                )));
            }
            table.insert(tok, Array1::from(v));
        }
        Ok(TableProvider {
            dim,
            path: PathBuf::new(),
            table,
        })
    }
}

impl EmbeddingProvider for TableProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn provenance(&self) -> Provenance {
        Provenance::PretrainedTable
    }

    fn spec(&self) -> ProviderSpec {
        ProviderSpec::Table {
            dim: self.dim,
            path: self.path.clone(),
        }
    }

    fn embed(&self, tokens: &[String]) -> Array2<f64> {
        let mut m = Array2::zeros((tokens.len(), self.dim));
        for (i, t) in tokens.iter().enumerate() {
            if let Some(v) = self.table.get(t).or_else(|| self.table.get(UNK)) {
                m.row_mut(i).assign(v);
            }
        }
        m
    }
}

pub fn embed_tokens(sentence: &Sentence, provider: &dyn EmbeddingProvider) -> Result<Array2<f64>> {
    if sentence.tokens.is_empty() {
        return Err(Error::Precondition(format!("sentence `{}` has no tokens", sentence.id)));
    }
    Ok(provider.embed(&sentence.tokens))
}

/// One LSTM direction in row-vector form: `gates = x·wx + h·wh + b`, with the
/// gate blocks ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub wx: Array2<f64>,
    pub wh: Array2<f64>,
    pub b: Array2<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            wx: Array2::zeros((input, 4 * hidden)),
            wh: Array2::zeros((hidden, 4 * hidden)),
            b: Array2::zeros((1, 4 * hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.nrows()
    }

    pub fn input(&self) -> usize {
        self.wx.nrows()
    }
}

const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl EncoderParams {
    /// `hidden` is the sentence width; each direction gets half.
    pub fn zeros(word_dim: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 || hidden % 2 != 0 {
            return Err(Error::Config(format!("sentence width {hidden} must be even and positive")));
        }
        Ok(EncoderParams {
            forward: LstmParams::zeros(word_dim, hidden / 2),
            backward: LstmParams::zeros(word_dim, hidden / 2),
        })
    }

    /// Recurrent weights and biases are uniform in `±1/sqrt(h/2)`. Input
    /// weights are uniform in `±1`: word vectors have unit norm, so gate
    /// pre-activations start with standard deviation `1/sqrt(3)` whatever
    /// `d` is. Forget-gate biases are shifted by +1 so cell states start out
    /// retaining earlier tokens.
    pub fn random(word_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(word_dim, hidden)?;
        let hd = hidden / 2;
        let bound = 1.0 / (hd as f64).sqrt();
        for dir in [&mut p.forward, &mut p.backward] {
            dir.wx.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            for m in [&mut dir.wh, &mut dir.b] {
                m.mapv_inplace(|_| rng.gen_range(-bound..bound));
            }
            dir.b.slice_mut(s![.., hd..2 * hd]).mapv_inplace(|v| v + FORGET_BIAS);
        }
        Ok(p)
    }

    pub fn word_dim(&self) -> usize {
        self.forward.input()
    }

    pub fn hidden(&self) -> usize {
        2 * self.forward.hidden()
    }
}

pub(crate) struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

pub(crate) struct EncoderVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
}

pub(crate) fn bind_encoder(g: &mut Graph, p: &EncoderParams) -> EncoderVars {
    let mut lstm = |l: &LstmParams| LstmVars {
        wx: g.leaf(l.wx.clone()),
        wh: g.leaf(l.wh.clone()),
        b: g.leaf(l.b.clone()),
    };
    EncoderVars {
        forward: lstm(&p.forward),
        backward: lstm(&p.backward),
    }
}

/// Runs one direction; returns per-step hidden states in input order.
fn lstm_direction(g: &mut Graph, x: Var, n: usize, hidden: usize, p: &LstmVars, reverse: bool) -> Vec<Var> {
    let xw = g.matmul(x, p.wx);
    let pre = g.add_row(xw, p.b);
    let mut states: Vec<Option<Var>> = vec![None; n];
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let mut gates = g.slice_rows(pre, t, t + 1);
        if let Some(h) = h {
            let hw = g.matmul(h, p.wh);
            gates = g.add(gates, hw);
        }
        let i_pre = g.slice_cols(gates, 0, hidden);
        let f_pre = g.slice_cols(gates, hidden, 2 * hidden);
        let c_pre = g.slice_cols(gates, 2 * hidden, 3 * hidden);
        let o_pre = g.slice_cols(gates, 3 * hidden, 4 * hidden);
        let i = g.sigmoid(i_pre);
        let cand = g.tanh(c_pre);
        let o = g.sigmoid(o_pre);
        let ic = g.mul(i, cand);
        let c_new = match c {
            Some(c_prev) => {
                let f = g.sigmoid(f_pre);
                let fc = g.mul(f, c_prev);
                g.add(fc, ic)
            }
            None => ic,
        };
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        states[t] = Some(h_new);
        h = Some(h_new);
        c = Some(c_new);
    }
    states.into_iter().map(|s| s.expect("every step visited")).collect()
}

pub(crate) struct GraphEncoding {
    pub sentence: Var,
    pub outputs: Option<Var>,
}

/// Encodes an `n × d` word matrix; the sentence vector is the concatenation
/// of the final forward state and the final backward state.
pub(crate) fn encode_on_graph(
    g: &mut Graph,
    words: Var,
    enc: &EncoderVars,
    hidden_per_dir: usize,
    with_outputs: bool,
) -> GraphEncoding {
    let n = g.value(words).nrows();
    let fwd = lstm_direction(g, words, n, hidden_per_dir, &enc.forward, false);
    let bwd = lstm_direction(g, words, n, hidden_per_dir, &enc.backward, true);
    let sentence = g.concat_cols(&[fwd[n - 1], bwd[0]]);
    let outputs = with_outputs.then(|| {
        let f = g.concat_rows(&fwd);
        let b = g.concat_rows(&bwd);
        g.concat_cols(&[f, b])
    });
    GraphEncoding { sentence, outputs }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEncoding {
    /// Provider vectors, `tokens × d`.
    pub word_vectors: Array2<f64>,
    /// Contextual BiLSTM outputs, `tokens × h`.
    pub outputs: Array2<f64>,
    pub sentence_vector: Array1<f64>,
}

pub fn encode_sentence(word_vectors: &Array2<f64>, params: &EncoderParams) -> Result<SentenceEncoding> {
    if word_vectors.nrows() == 0 {
        return Err(Error::Precondition("cannot encode an empty word matrix".into()));
    }
    if word_vectors.ncols() != params.word_dim() {
        return Err(Error::Dimension(format!(
            "word vectors have width {}, encoder expects {}",
            word_vectors.ncols(),
            params.word_dim()
        )));
    }
    let mut g = Graph::new();
    let vars = bind_encoder(&mut g, params);
    let words = g.leaf(word_vectors.clone());
    let enc = encode_on_graph(&mut g, words, &vars, params.forward.hidden(), true);
    let sentence_vector = g.value(enc.sentence).row(0).to_owned();
    Ok(SentenceEncoding {
        word_vectors: word_vectors.clone(),
        outputs: g.value(enc.outputs.expect("requested")).clone(),
        sentence_vector,
    })
}

/// Encodings for every sentence of a mixture, keyed by sentence id.
#[derive(Clone, Debug, Default)]
pub struct EncodingCache {
    entries: HashMap<String, Arc<SentenceEncoding>>,
}

impl EncodingCache {
    pub fn get(&self, id: &str) -> Option<&Arc<SentenceEncoding>> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evict(&mut self, id: &str) -> Option<Arc<SentenceEncoding>> {
        self.entries.remove(id)
    }

    pub fn insert_sentence(
        &mut self,
        sentence: &Sentence,
        provider: &dyn EmbeddingProvider,
        params: &EncoderParams,
    ) -> Result<Arc<SentenceEncoding>> {
        if let Some(e) = self.entries.get(&sentence.id) {
            return Ok(e.clone());
        }
        let words = embed_tokens(sentence, provider)?;
        let enc = Arc::new(encode_sentence(&words, params)?);
        self.entries.insert(sentence.id.clone(), enc.clone());
        Ok(enc)
    }
}

pub fn cache_encodings(
    mixture: &Mixture,
    provider: &dyn EmbeddingProvider,
    params: &EncoderParams,
) -> Result<EncodingCache> {
    let mut cache = EncodingCache::default();
    for s in std::iter::once(&mixture.query).chain(&mixture.candidates) {
        cache.insert_sentence(s, provider, params)?;
    }
    Ok(cache)
}

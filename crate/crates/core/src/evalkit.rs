//! Clustering and ordering metrics, non-neural baselines and evaluation
//! reports.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{cosine, Sentence};
use crate::decoder::{decode, DecodeResult, StopReason};
use crate::encoder::{cache_encodings, embed_tokens, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::mixgen::{mixture_seed, Mixture};
use crate::model::{Head, ModelParams, Termination};
use crate::scoring::{argmax_first, pairwise_prob_vectors};

/// Score given to a candidate whose cosine is undefined (a zero vector); it
/// ranks below every defined cosine.
const UNDEFINED_COSINE: f64 = -2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score<S: AsRef<str>, T: AsRef<str>>(predicted: &[S], gold: &[T]) -> ClusterScore {
    let pred: HashSet<&str> = predicted.iter().map(AsRef::as_ref).collect();
    let gold: HashSet<&str> = gold.iter().map(AsRef::as_ref).collect();
    let hit = pred.intersection(&gold).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { hit / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { hit / gold.len() as f64 };
    let f1 = if hit == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    ClusterScore { precision, recall, f1 }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderScore {
    /// Absent when fewer than two gold sentences were extracted.
    pub tau: Option<f64>,
    pub n_compared: usize,
}

/// Kendall's τ between the predicted order of correctly extracted sentences
/// and their gold ranks. Ids without a gold rank are dropped first.
pub fn kendall_tau<S: AsRef<str>>(predicted_order: &[S], gold_order: &BTreeMap<String, usize>) -> OrderScore {
    let ranks: Vec<usize> = predicted_order
        .iter()
        .filter_map(|id| gold_order.get(id.as_ref()).copied())
        .collect();
    let n = ranks.len();
    if n < 2 {
        return OrderScore { tau: None, n_compared: n };
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            score += match ranks[i].cmp(&ranks[j]) {
                std::cmp::Ordering::Less => 1,
                std::cmp::Ordering::Greater => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    OrderScore {
        tau: Some(score as f64 / pairs),
        n_compared: n,
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Precondition(format!(
            "spearman needs two equal-length samples of at least 3 (got {} and {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("spearman inputs must be finite".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let mean = (xs.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("one sample is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Picks `budget` candidates uniformly without replacement.
pub fn baseline_unif(mixture: &Mixture, budget: usize, rng: &mut ChaCha8Rng) -> Result<DecodeResult> {
    check_budget(mixture, budget)?;
    let picks = sample(rng, mixture.candidates.len(), budget)
        .into_iter()
        .map(|i| (i + 1, None, 0.0))
        .collect();
    Ok(DecodeResult::from_selection(mixture, picks, StopReason::FixedBudget))
}

fn check_budget(mixture: &Mixture, budget: usize) -> Result<()> {
    if budget > mixture.candidates.len() {
        return Err(Error::Precondition(format!(
            "budget {budget} exceeds the {} candidates",
            mixture.candidates.len()
        )));
    }
    Ok(())
}

/// Greedy loop shared by the similarity baselines: each step scores every
/// remaining candidate against the mean vector of the scenario so far and
/// appends the best one. `vectors[0]` is the query.
pub fn greedy_similarity(
    mixture: &Mixture,
    budget: usize,
    vectors: &[Array1<f64>],
    mut similarity: impl FnMut(&Array1<f64>, &Array1<f64>) -> Result<f64>,
) -> Result<DecodeResult> {
    check_budget(mixture, budget)?;
    let mut selected = vec![0usize];
    let mut remaining: Vec<usize> = (1..vectors.len()).collect();
    let mut picks = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut centroid = Array1::zeros(vectors[0].len());
        for &i in &selected {
            centroid += &vectors[i];
        }
        centroid /= selected.len() as f64;
        let scores = remaining
            .iter()
            .map(|&i| similarity(&centroid, &vectors[i]))
            .collect::<Result<Vec<f64>>>()?;
        let pos = argmax_first(&scores).expect("pool not empty");
        let cand = remaining.remove(pos);
        selected.push(cand);
        picks.push((cand, None, scores[pos]));
    }
    Ok(DecodeResult::from_selection(mixture, picks, StopReason::FixedBudget))
}

fn sentences(mixture: &Mixture) -> impl Iterator<Item = &Sentence> {
    std::iter::once(&mixture.query).chain(&mixture.candidates)
}

/// Cosine to the mean of the scenario's mean word vectors.
pub fn baseline_avg(mixture: &Mixture, budget: usize, provider: &dyn EmbeddingProvider) -> Result<DecodeResult> {
    let vectors = sentences(mixture)
        .map(|s| Ok(embed_tokens(s, provider)?.mean_axis(ndarray::Axis(0)).expect("non-empty")))
        .collect::<Result<Vec<_>>>()?;
    greedy_similarity(mixture, budget, &vectors, |a, b| Ok(cosine(a, b).unwrap_or(UNDEFINED_COSINE)))
}

/// The AVG loop with a trained same-scenario classifier over sentence
/// encodings in place of the cosine.
pub fn baseline_pairwise(
    mixture: &Mixture,
    budget: usize,
    params: &ModelParams,
    provider: &dyn EmbeddingProvider,
) -> Result<DecodeResult> {
    let pw = params
        .pairwise
        .as_ref()
        .ok_or_else(|| Error::Config(format!("a {} checkpoint has no pairwise classifier", params.config.head)))?;
    crate::decoder::check_provider(params, provider)?;
    let cache = cache_encodings(mixture, provider, &params.encoder)?;
    let vectors: Vec<Array1<f64>> = sentences(mixture)
        .map(|s| cache.get(&s.id).expect("cached").sentence_vector.clone())
        .collect();
    greedy_similarity(mixture, budget, &vectors, |a, b| pairwise_prob_vectors(a, b, pw))
}

/// Returns the gold scenario in gold order.
pub fn oracle_decode(mixture: &Mixture) -> DecodeResult {
    let mut gold: Vec<&String> = mixture.gold_ids.iter().collect();
    gold.sort_by_key(|id| mixture.gold_order[*id]);
    let picks = gold
        .iter()
        .enumerate()
        .map(|(k, id)| (mixture.candidate_index(id).expect("gold is a candidate") + 1, Some(k + 1), 0.0))
        .collect();
    DecodeResult::from_selection(mixture, picks, StopReason::FixedBudget)
}

/// What to evaluate.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Unif,
    Avg,
    Oracle,
    Model(&'a ModelParams),
}

impl<'a> Method<'a> {
    /// Resolves a method name; trainable heads need a matching checkpoint.
    pub fn resolve(name: &str, checkpoint: Option<&'a ModelParams>) -> Result<Self> {
        match name {
            "unif" => Ok(Method::Unif),
            "avg" => Ok(Method::Avg),
            "oracle" => Ok(Method::Oracle),
            other => {
                let head: Head = other.parse()?;
                let params =
                    checkpoint.ok_or_else(|| Error::Config(format!("head `{head}` needs a checkpoint")))?;
                if params.config.head != head {
                    return Err(Error::Config(format!(
                        "checkpoint holds a `{}` model, not `{head}`",
                        params.config.head
                    )));
                }
                Ok(Method::Model(params))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Method::Unif => "unif".into(),
            Method::Avg => "avg".into(),
            Method::Oracle => "oracle".into(),
            Method::Model(p) => p.config.head.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureScore {
    pub mixture_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tau: Option<f64>,
    pub n_compared: usize,
    pub predicted: usize,
    pub gold: usize,
    pub termination: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub method: String,
    pub mode: Termination,
    pub seed: u64,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ReportConfig,
    pub mixtures: Vec<MixtureScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Mean τ over mixtures where it is defined.
    pub mean_tau: Option<f64>,
    pub n_tau: usize,
    /// Spearman's ρ between per-mixture τ and F1.
    pub rho_tau_f1: Option<f64>,
    pub rho_note: Option<String>,
}

impl Report {
    pub fn from_scores(config: ReportConfig, mixtures: Vec<MixtureScore>) -> Self {
        let n = mixtures.len().max(1) as f64;
        let mean = |f: fn(&MixtureScore) -> f64| mixtures.iter().map(f).sum::<f64>() / n;
        let with_tau: Vec<(f64, f64)> = mixtures.iter().filter_map(|m| m.tau.map(|t| (t, m.f1))).collect();
        let mean_tau = (!with_tau.is_empty()).then(|| with_tau.iter().map(|p| p.0).sum::<f64>() / with_tau.len() as f64);
        let taus: Vec<f64> = with_tau.iter().map(|p| p.0).collect();
        let f1s: Vec<f64> = with_tau.iter().map(|p| p.1).collect();
        let (rho_tau_f1, rho_note) = match spearman_rho(&taus, &f1s) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Report {
            config,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            mean_tau,
            n_tau: with_tau.len(),
            rho_tau_f1,
            rho_note,
            mixtures,
        }
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
        for m in &self.mixtures {
            w.serialize(m).map_err(|e| csv_error(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn score_mixture(mixture: &Mixture, result: &DecodeResult) -> MixtureScore {
    let c = f1_score(&result.predicted_ids, &mixture.gold_ids);
    let o = kendall_tau(&result.predicted_order, &mixture.gold_order);
    MixtureScore {
        mixture_id: mixture.mixture_id.clone(),
        precision: c.precision,
        recall: c.recall,
        f1: c.f1,
        tau: o.tau,
        n_compared: o.n_compared,
        predicted: result.predicted_ids.len(),
        gold: mixture.gold_ids.len(),
        termination: result.termination,
    }
}

/// Decodes one mixture with `method`. UNIF draws from `rng_seed`.
pub fn run_method(
    mixture: &Mixture,
    method: Method<'_>,
    mode: Termination,
    provider: &dyn EmbeddingProvider,
    rng_seed: u64,
) -> Result<DecodeResult> {
    let budget = mixture.gold_ids.len();
    if mode == Termination::Dynamic && !matches!(method, Method::Model(_)) {
        return Err(Error::Config(format!("{} has no dynamic stopping", method.name())));
    }
    match method {
        Method::Unif => baseline_unif(mixture, budget, &mut ChaCha8Rng::seed_from_u64(rng_seed)),
        Method::Avg => baseline_avg(mixture, budget, provider),
        Method::Oracle => Ok(oracle_decode(mixture)),
        Method::Model(p) => decode(mixture, p, provider, mode),
    }
}

/// Decodes every mixture (in parallel) and aggregates the scores.
pub fn evaluate(
    mixtures: &[Mixture],
    method: Method<'_>,
    mode: Termination,
    provider: &dyn EmbeddingProvider,
    seed: u64,
    label: Option<String>,
) -> Result<Report> {
    if mixtures.is_empty() {
        return Err(Error::Precondition("nothing to evaluate".into()));
    }
    if let Some(m) = mixtures.iter().find(|m| m.gold_ids.is_empty()) {
        return Err(Error::Precondition(format!("mixture {} has no gold sentences", m.mixture_id)));
    }
    let scores = mixtures
        .par_iter()
        .enumerate()
        .map(|(i, m)| run_method(m, method, mode, provider, mixture_seed(seed, 0, i)).map(|r| score_mixture(m, &r)))
        .collect::<Result<Vec<_>>>()?;
    let config = ReportConfig {
        method: method.name(),
        mode,
        seed,
        label,
    };
    Ok(Report::from_scores(config, scores))
}

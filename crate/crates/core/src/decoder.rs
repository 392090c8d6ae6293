//! Greedy scenario construction: repeatedly pick the best-scoring candidate,
//! place it in the scenario-in-construction, and remove it from the pool.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::encoder::{cache_encodings, EmbeddingProvider, SentenceEncoding};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mixgen::Mixture;
use crate::model::{head_forward, rows_leaf, BoundModel, Head, HeadOutput, ModelParams, StepInputs, Termination};
use crate::scoring::{argmax_first, pool_words};

/// Default selection budget for fixed-mode construction when no gold size
/// is known.
pub const DEFAULT_CONSTRUCT_BUDGET: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioState {
    /// Indices into the mixture's sentence list (0 = query), in scenario order.
    pub selected: Vec<usize>,
    /// Remaining candidate indices (1-based into the sentence list), ascending.
    pub remaining: Vec<usize>,
    pub step: usize,
}

impl ScenarioState {
    pub fn initial(num_candidates: usize) -> Self {
        ScenarioState {
            selected: vec![0],
            remaining: (1..=num_candidates).collect(),
            step: 1,
        }
    }

    /// Moves `candidate` from the pool into the scenario at `slot`, or at the
    /// end when no slot is given.
    pub fn apply(&mut self, candidate: usize, slot: Option<usize>) {
        let pos = self.remaining.iter().position(|&c| c == candidate).expect("candidate in pool");
        self.remaining.remove(pos);
        match slot {
            Some(s) => self.selected.insert(s, candidate),
            None => self.selected.push(candidate),
        }
        self.step = self.selected.len();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    FixedBudget,
    EndToken,
    /// Dynamic decoding ran out of candidates before END won.
    PoolExhausted,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub id: String,
    /// Insertion slot in the scenario before this step, for heads that
    /// choose one.
    pub slot: Option<usize>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Selected candidate ids, in selection order.
    pub predicted_ids: Vec<String>,
    /// The constructed scenario: the query followed or interleaved with the
    /// selected candidates.
    pub predicted_order: Vec<String>,
    pub trace: Vec<TraceStep>,
    pub termination: StopReason,
}

impl DecodeResult {
    pub(crate) fn from_selection(mixture: &Mixture, picks: Vec<(usize, Option<usize>, f64)>, termination: StopReason) -> Self {
        let mut state = ScenarioState::initial(mixture.candidates.len());
        let mut trace = Vec::new();
        for (cand, slot, score) in picks {
            state.apply(cand, slot);
            trace.push(TraceStep {
                id: sentence_at(mixture, cand).id.clone(),
                slot,
                score,
            });
        }
        DecodeResult {
            predicted_ids: trace.iter().map(|t| t.id.clone()).collect(),
            predicted_order: state.selected.iter().map(|&i| sentence_at(mixture, i).id.clone()).collect(),
            trace,
            termination,
        }
    }
}

pub(crate) fn sentence_at(mixture: &Mixture, idx: usize) -> &Sentence {
    if idx == 0 {
        &mixture.query
    } else {
        &mixture.candidates[idx - 1]
    }
}

/// Encoded mixture ready for repeated scoring.
pub struct PreparedMixture {
    /// Index 0 is the query, then candidates in mixture order.
    pub encodings: Vec<Arc<SentenceEncoding>>,
    pub end: Option<SentenceEncoding>,
}

impl PreparedMixture {
    pub fn new(mixture: &Mixture, params: &ModelParams, provider: &dyn EmbeddingProvider) -> Result<Self> {
        check_provider(params, provider)?;
        let cache = cache_encodings(mixture, provider, &params.encoder)?;
        let encodings = std::iter::once(&mixture.query)
            .chain(&mixture.candidates)
            .map(|s| cache.get(&s.id).expect("cached").clone())
            .collect();
        Ok(PreparedMixture {
            encodings,
            end: params.end_encoding(),
        })
    }
}

pub fn check_provider(params: &ModelParams, provider: &dyn EmbeddingProvider) -> Result<()> {
    if provider.dim() != params.config.word_dim {
        return Err(Error::Config(format!(
            "provider produces {}-dim vectors, model expects {}",
            provider.dim(),
            params.config.word_dim
        )));
    }
    params.config.provider.check_compatible(&provider.spec())
}

/// Scores of one decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepScores {
    /// One entry per remaining candidate (in `state.remaining` order).
    pub candidates: Vec<(f64, Option<usize>)>,
    pub end: Option<f64>,
}

impl StepScores {
    /// Winning position in `state.remaining`, or `None` when END wins.
    /// Ties go to the lowest candidate index, and END loses ties.
    pub fn choice(&self) -> Option<usize> {
        let scores: Vec<f64> = self.candidates.iter().map(|c| c.0).collect();
        let best = argmax_first(&scores);
        match (best, self.end) {
            (Some(b), Some(e)) if e > scores[b] => None,
            (None, _) => None,
            (b, _) => b,
        }
    }
}

pub fn score_step(
    params: &ModelParams,
    prepared: &PreparedMixture,
    state: &ScenarioState,
    with_end: bool,
) -> Result<StepScores> {
    if params.config.head == Head::Pairwise {
        return Err(Error::Config("the pairwise head is decoded by the similarity loop".into()));
    }
    if with_end && prepared.end.is_none() {
        return Err(Error::Config("model has no end-of-scenario parameters".into()));
    }
    let (h, d) = (params.config.hidden, params.config.word_dim);
    let normalize = params.config.rn_normalize;
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params);

    let cand_encs: Vec<&SentenceEncoding> = state
        .remaining
        .iter()
        .map(|&i| prepared.encodings[i].as_ref())
        .chain(with_end.then(|| prepared.end.as_ref().expect("checked")))
        .collect();
    let scen_encs: Vec<&SentenceEncoding> = state.selected.iter().map(|&i| prepared.encodings[i].as_ref()).collect();
    let t = rows_leaf(&mut g, &scen_encs.iter().map(|e| e.sentence_vector.view()).collect::<Vec<_>>(), h);
    let c = rows_leaf(&mut g, &cand_encs.iter().map(|e| e.sentence_vector.view()).collect::<Vec<_>>(), h);
    let (t_pool, c_pool) = if params.config.head.has_relation() {
        let pool = |encs: &[&SentenceEncoding]| -> Vec<ndarray::Array1<f64>> {
            encs.iter().map(|e| pool_words(&e.word_vectors, normalize)).collect()
        };
        let tp = pool(&scen_encs);
        let cp = pool(&cand_encs);
        (
            Some(rows_leaf(&mut g, &tp.iter().map(|v| v.view()).collect::<Vec<_>>(), d)),
            Some(rows_leaf(&mut g, &cp.iter().map(|v| v.view()).collect::<Vec<_>>(), d)),
        )
    } else {
        (None, None)
    };
    let out = head_forward(&mut g, &bound, &StepInputs { t, c, t_pool, c_pool });
    let n_real = state.remaining.len();
    Ok(match out {
        HeadOutput::Logits(l) => {
            let v = g.value(l);
            StepScores {
                candidates: (0..n_real).map(|j| (v[[j, 0]], None)).collect(),
                end: with_end.then(|| v[[n_real, 0]]),
            }
        }
        HeadOutput::Grid(z) => {
            let grid: &Array2<f64> = g.value(z);
            let last = grid.nrows() - 1;
            let candidates = (0..n_real)
                .map(|j| {
                    let col: Vec<f64> = grid.column(j).to_vec();
                    let slot = argmax_first(&col).expect("slots");
                    (col[slot], Some(slot))
                })
                .collect();
            StepScores {
                candidates,
                end: with_end.then(|| grid[[last, n_real]]),
            }
        }
    })
}

fn run(
    mixture: &Mixture,
    params: &ModelParams,
    provider: &dyn EmbeddingProvider,
    budget: usize,
    dynamic: bool,
) -> Result<DecodeResult> {
    let prepared = PreparedMixture::new(mixture, params, provider)?;
    let mut state = ScenarioState::initial(mixture.candidates.len());
    let mut picks = Vec::new();
    let mut reason = if dynamic { StopReason::MaxSteps } else { StopReason::FixedBudget };
    for _ in 0..budget {
        if state.remaining.is_empty() {
            reason = StopReason::PoolExhausted;
            break;
        }
        let scores = score_step(params, &prepared, &state, dynamic)?;
        let Some(pos) = scores.choice() else {
            reason = StopReason::EndToken;
            break;
        };
        let cand = state.remaining[pos];
        let (score, slot) = scores.candidates[pos];
        state.apply(cand, slot);
        picks.push((cand, slot, score));
    }
    if dynamic && reason == StopReason::MaxSteps && state.remaining.is_empty() {
        reason = StopReason::PoolExhausted;
    }
    Ok(DecodeResult::from_selection(mixture, picks, reason))
}

/// Selects exactly `budget` candidates. END never competes.
pub fn decode_fixed(
    mixture: &Mixture,
    params: &ModelParams,
    provider: &dyn EmbeddingProvider,
    budget: usize,
) -> Result<DecodeResult> {
    if budget > mixture.candidates.len() {
        return Err(Error::Precondition(format!(
            "budget {budget} exceeds the {} candidates",
            mixture.candidates.len()
        )));
    }
    if params.config.head == Head::Pairwise {
        return crate::evalkit::baseline_pairwise(mixture, budget, params, provider);
    }
    run(mixture, params, provider, budget, false)
}

/// Selects until END wins, the pool empties or `max_steps` selections.
pub fn decode_dynamic(
    mixture: &Mixture,
    params: &ModelParams,
    provider: &dyn EmbeddingProvider,
    max_steps: usize,
) -> Result<DecodeResult> {
    if max_steps < 1 {
        return Err(Error::Precondition("max_steps must be at least 1".into()));
    }
    if params.end_token.is_none() {
        return Err(Error::Config(format!(
            "{} model was trained without an end-of-scenario token",
            params.config.head
        )));
    }
    run(mixture, params, provider, max_steps, true)
}

/// Decodes per the model's termination mode: the gold size in fixed mode
/// and the pool size as the step bound in dynamic mode.
pub fn decode(mixture: &Mixture, params: &ModelParams, provider: &dyn EmbeddingProvider, mode: Termination) -> Result<DecodeResult> {
    match mode {
        Termination::Fixed => decode_fixed(mixture, params, provider, mixture.gold_ids.len()),
        Termination::Dynamic => decode_dynamic(mixture, params, provider, mixture.candidates.len().max(1)),
    }
}

/// Builds a scenario around `query` from raw sentences with a trained model.
pub fn construct(
    query: &str,
    sentences: &[String],
    params: &ModelParams,
    provider: &dyn EmbeddingProvider,
    budget: Option<usize>,
) -> Result<DecodeResult> {
    let query = Sentence::new("q", query);
    let candidates: Vec<Sentence> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| Sentence::new(format!("s{i}"), s.as_str()))
        .collect();
    let mixture = Mixture::adhoc(query, candidates);
    check_provider(params, provider)?;
    if mixture.candidates.is_empty() {
        return Ok(DecodeResult::from_selection(&mixture, Vec::new(), StopReason::PoolExhausted));
    }
    match params.config.termination {
        Termination::Dynamic => decode_dynamic(&mixture, params, provider, mixture.candidates.len()),
        Termination::Fixed => {
            let b = budget.unwrap_or(DEFAULT_CONSTRUCT_BUDGET).min(mixture.candidates.len());
            decode_fixed(&mixture, params, provider, b)
        }
    }
}

/// Re-scores every traced state and checks the traced choice is the argmax.
pub fn replay_trace(
    mixture: &Mixture,
    params: &ModelParams,
    provider: &dyn EmbeddingProvider,
    result: &DecodeResult,
    dynamic: bool,
) -> Result<bool> {
    let prepared = PreparedMixture::new(mixture, params, provider)?;
    let mut state = ScenarioState::initial(mixture.candidates.len());
    for step in &result.trace {
        let scores = score_step(params, &prepared, &state, dynamic)?;
        let Some(pos) = scores.choice() else { return Ok(false) };
        let cand = state.remaining[pos];
        if sentence_at(mixture, cand).id != step.id || scores.candidates[pos].1 != step.slot {
            return Ok(false);
        }
        state.apply(cand, step.slot);
    }
    let order: Vec<&str> = state.selected.iter().map(|&i| sentence_at(mixture, i).id.as_str()).collect();
    Ok(order == result.predicted_order.iter().map(String::as_str).collect::<Vec<_>>())
}

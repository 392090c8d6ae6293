//! Teacher-forced training with marginal log-likelihood over every correct
//! decision of a step.
//!
//! Each gold timestep becomes one example: a random subset of the gold
//! sentences (kept in gold order after the query) forms the partial
//! scenario, and every remaining gold sentence is a correct answer. For
//! insertion heads, a correct answer is the pair of that sentence and the
//! one slot that keeps the scenario in gold order.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::sentence_at;
use crate::encoder::{embed_tokens, encode_on_graph, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, Method};
use crate::graph::{logsumexp, Graph, Var};
use crate::mixgen::{load_mixtures, mixture_seed, DatasetManifest, Mixture};
use crate::model::{head_forward, BoundModel, Head, HeadOutput, ModelConfig, ModelParams, ParamGrads, StepInputs, Termination};
use crate::scoring::{pairwise_logit_nodes, pool_words};

const TEACHER_SALT: u64 = 0x7ea0_c4e5_0000_0001;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolEntry {
    Sentence(String),
    End,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub mixture_id: String,
    /// 1-based timestep within the mixture.
    pub timestep: usize,
    /// Query first, then the chosen gold sentences in gold order.
    pub partial: Vec<String>,
    pub remaining_gold: BTreeSet<String>,
    /// Unselected candidates in mixture order, then END in dynamic mode.
    pub candidate_pool: Vec<PoolEntry>,
}

impl TrainExample {
    pub fn label(&self) -> String {
        format!("{}#t{}", self.mixture_id, self.timestep)
    }
}

/// Correct answers of one example, as positions into its candidate pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectSet {
    pub candidates: Vec<usize>,
    /// `(slot, pool position)`; slot `k` means "before partial[k]".
    pub pairs: Vec<(usize, usize)>,
}

/// Teacher-forced states for one mixture: one per gold timestep, plus a
/// terminal state whose only correct answer is END in dynamic mode.
pub fn sample_teacher_states(mixture: &Mixture, termination: Termination, rng: &mut ChaCha8Rng) -> Vec<TrainExample> {
    let n = mixture.gold_ids.len();
    let mut gold = mixture.gold_ids.clone();
    gold.sort_by_key(|g| mixture.gold_order[g]);
    let build = |timestep: usize, chosen: &[usize]| {
        let chosen_ids: BTreeSet<&str> = chosen.iter().map(|&i| gold[i].as_str()).collect();
        let mut partial = vec![mixture.query.id.clone()];
        partial.extend(gold.iter().filter(|g| chosen_ids.contains(g.as_str())).cloned());
        let mut candidate_pool: Vec<PoolEntry> = mixture
            .candidates
            .iter()
            .filter(|c| !chosen_ids.contains(c.id.as_str()))
            .map(|c| PoolEntry::Sentence(c.id.clone()))
            .collect();
        if termination == Termination::Dynamic {
            candidate_pool.push(PoolEntry::End);
        }
        TrainExample {
            mixture_id: mixture.mixture_id.clone(),
            timestep,
            partial,
            remaining_gold: gold.iter().filter(|g| !chosen_ids.contains(g.as_str())).cloned().collect(),
            candidate_pool,
        }
    };
    let mut out: Vec<TrainExample> = (1..=n).map(|i| build(i, &sample(rng, n, i - 1).into_vec())).collect();
    if termination == Termination::Dynamic {
        out.push(build(n + 1, &(0..n).collect::<Vec<_>>()));
    }
    out
}

pub fn correct_set(example: &TrainExample, mixture: &Mixture) -> Result<CorrectSet> {
    let rank = |id: &str| -> usize {
        if id == mixture.query.id {
            0
        } else {
            mixture.gold_order.get(id).copied().unwrap_or(usize::MAX)
        }
    };
    let mut candidates = Vec::new();
    let mut pairs = Vec::new();
    for (pos, entry) in example.candidate_pool.iter().enumerate() {
        match entry {
            PoolEntry::Sentence(id) if example.remaining_gold.contains(id) => {
                let r = rank(id);
                let slot = example.partial.iter().take_while(|p| rank(p) < r).count();
                candidates.push(pos);
                pairs.push((slot, pos));
            }
            PoolEntry::End if example.remaining_gold.is_empty() => {
                candidates.push(pos);
                pairs.push((example.partial.len(), pos));
            }
            _ => {}
        }
    }
    if candidates.is_empty() {
        return Err(Error::Supervision(format!("{} has no correct candidate in its pool", example.label())));
    }
    Ok(CorrectSet { candidates, pairs })
}

/// `−log Σ_{j ∈ correct} p_j` for an already normalized distribution.
pub fn marginal_loss_comp(probabilities: &[f64], correct: &[usize]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Supervision("empty correct set".into()));
    }
    let mass: f64 = correct.iter().map(|&j| probabilities[j]).sum();
    Ok(-mass.min(1.0).ln())
}

/// `−log` of the softmax mass on the correct cells of a slot × candidate
/// grid, with the softmax taken over every cell.
pub fn marginal_loss_pairs(grid: &Array2<f64>, correct: &[(usize, usize)]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Supervision("empty correct set".into()));
    }
    let all: Vec<f64> = grid.iter().copied().collect();
    let hit: Vec<f64> = correct.iter().map(|&(k, j)| grid[[k, j]]).collect();
    Ok((logsumexp(&all) - logsumexp(&hit)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Examples (mixture timesteps) per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Draw fresh teacher-forced states every epoch; otherwise reuse the
    /// first epoch's.
    pub resample: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            epochs: 10,
            learning_rate: 1e-4,
            batch_size: 16,
            seed: 0,
            resample: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("invalid optimizer moments".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(|name, w| {
            let Some(g) = grads.get(name) else { return };
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        });
    }
}

/// Word vectors of every sentence in a mixture (index 0 is the query).
struct MixtureWords {
    words: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl MixtureWords {
    fn new(mixture: &Mixture, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let n = mixture.candidates.len() + 1;
        let words = (0..n)
            .map(|i| embed_tokens(sentence_at(mixture, i), provider))
            .collect::<Result<Vec<_>>>()?;
        let index = (0..n).map(|i| (sentence_at(mixture, i).id.clone(), i)).collect();
        Ok(MixtureWords { words, index })
    }
}

/// Loss value, gradients and per-example losses of a group of examples
/// drawn from one mixture.
pub struct GroupLoss {
    pub loss: f64,
    pub grads: Option<ParamGrads>,
    pub per_example: Vec<f64>,
}

fn group_loss(
    params: &ModelParams,
    mixture: &Mixture,
    words: &MixtureWords,
    examples: &[TrainExample],
    with_grads: bool,
) -> Result<GroupLoss> {
    let cfg = &params.config;
    let d = cfg.word_dim;
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, params);

    let mut sent: HashMap<usize, Var> = HashMap::new();
    let mut end_sent = None;
    let mut losses = Vec::with_capacity(examples.len());
    for ex in examples {
        let correct = correct_set(ex, mixture)?;
        let partial: Vec<usize> = ex.partial.iter().map(|id| words.index[id]).collect();
        let pool: Vec<Option<usize>> = ex
            .candidate_pool
            .iter()
            .map(|e| match e {
                PoolEntry::Sentence(id) => Some(words.index[id]),
                PoolEntry::End => None,
            })
            .collect();
        let mut vec_of = |g: &mut Graph, idx: Option<usize>| -> Var {
            match idx {
                Some(i) => *sent.entry(i).or_insert_with(|| {
                    let w = g.leaf(words.words[i].clone());
                    encode_on_graph(g, w, &bound.encoder, bound.hidden_per_dir, false).sentence
                }),
                None => *end_sent.get_or_insert_with(|| bound.end_sentence(g).expect("dynamic model has END")),
            }
        };
        let t_rows: Vec<Var> = partial.iter().map(|&i| vec_of(&mut g, Some(i))).collect();
        let c_rows: Vec<Var> = pool.iter().map(|&i| vec_of(&mut g, i)).collect();
        let t = g.concat_rows(&t_rows);
        let c = g.concat_rows(&c_rows);
        let j = pool.len();

        let loss = if cfg.head == Head::Pairwise {
            let pw = bound.pairwise.as_ref().expect("pairwise head");
            let centroid = g.mean_rows(t);
            let ones = g.leaf(Array2::ones((j, 1)));
            let a = g.matmul(ones, centroid);
            let logits = pairwise_logit_nodes(&mut g, a, c, pw);
            let targets = (0..j).map(|p| if correct.candidates.contains(&p) { 1.0 } else { 0.0 }).collect();
            let bce = g.bce_with_logits(logits, targets);
            g.scale(bce, 1.0 / j as f64)
        } else {
            let (t_pool, c_pool) = if cfg.head.has_relation() {
                let pooled = |idx: usize| pool_words(&words.words[idx], cfg.rn_normalize);
                let tp = stack(partial.iter().map(|&i| pooled(i)), d);
                let real: Vec<usize> = pool.iter().flatten().copied().collect();
                let cp_real = g.leaf(stack(real.iter().map(|&i| pooled(i)), d));
                let cp = match pool.last() {
                    Some(None) => {
                        let end = bound.end_token.expect("dynamic model has END");
                        g.concat_rows(&[cp_real, end])
                    }
                    _ => cp_real,
                };
                (Some(g.leaf(tp)), Some(cp))
            } else {
                (None, None)
            };
            let out = head_forward(&mut g, &bound, &StepInputs { t, c, t_pool, c_pool });
            let (scores, all, hit) = match out {
                HeadOutput::Logits(l) => (l, (0..j).collect::<Vec<_>>(), correct.candidates.clone()),
                HeadOutput::Grid(z) => {
                    let k1 = partial.len() + 1;
                    let mut all = Vec::with_capacity(k1 * j);
                    for k in 0..k1 {
                        for (p, entry) in pool.iter().enumerate() {
                            if entry.is_some() || k == k1 - 1 {
                                all.push(k * j + p);
                            }
                        }
                    }
                    let hit = correct.pairs.iter().map(|&(k, p)| k * j + p).collect();
                    (z, all, hit)
                }
            };
            let lse_all = g.logsumexp(scores, all);
            let lse_hit = g.logsumexp(scores, hit);
            g.sub(lse_all, lse_hit)
        };
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { example: ex.label(), loss: value });
        }
        losses.push((loss, value));
    }
    let per_example: Vec<f64> = losses.iter().map(|l| l.1).collect();
    let total_value = per_example.iter().sum();
    let grads = if with_grads && !losses.is_empty() {
        let mut total = losses[0].0;
        for &(l, _) in &losses[1..] {
            total = g.add(total, l);
        }
        Some(bound.gradients(&g.backward(total)))
    } else {
        None
    };
    Ok(GroupLoss { loss: total_value, grads, per_example })
}

fn stack(rows: impl Iterator<Item = Array1<f64>>, width: usize) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = rows.collect();
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

/// Summed loss and gradients of `examples` (all from `mixture`).
pub fn loss_and_gradients(
    params: &ModelParams,
    mixture: &Mixture,
    examples: &[TrainExample],
    provider: &dyn EmbeddingProvider,
) -> Result<(f64, ParamGrads)> {
    let words = MixtureWords::new(mixture, provider)?;
    let out = group_loss(params, mixture, &words, examples, true)?;
    Ok((out.loss, out.grads.unwrap_or_default()))
}

pub fn examples_loss(
    params: &ModelParams,
    mixture: &Mixture,
    examples: &[TrainExample],
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    let words = MixtureWords::new(mixture, provider)?;
    Ok(group_loss(params, mixture, &words, examples, false)?.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub split: String,
    /// Mean example loss.
    pub loss: f64,
    pub f1: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev F1 (the last epoch when
    /// there is no dev set).
    pub best: ModelParams,
    pub last: ModelParams,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
    pub log: Vec<LogEntry>,
}

fn teacher_states(
    mixtures: &[Mixture],
    termination: Termination,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<TrainExample>> {
    mixtures
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mixture_seed(seed ^ TEACHER_SALT, epoch, i));
            sample_teacher_states(m, termination, &mut rng)
        })
        .collect()
}

fn mean_loss(
    params: &ModelParams,
    mixtures: &[Mixture],
    words: &[MixtureWords],
    states: &[Vec<TrainExample>],
) -> Result<f64> {
    let parts = (0..mixtures.len())
        .into_par_iter()
        .map(|i| group_loss(params, &mixtures[i], &words[i], &states[i], false).map(|g| (g.loss, states[i].len())))
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0usize), |a, p| (a.0 + p.0, a.1 + p.1));
    Ok(sum / n.max(1) as f64)
}

/// Trains from `init` (or a fresh seeded initialization) and reports after
/// every epoch through `on_log`.
pub fn train(
    train_set: &[Mixture],
    dev_set: &[Mixture],
    provider: &dyn EmbeddingProvider,
    config: &TrainConfig,
    init: Option<ModelParams>,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    if let Some(m) = train_set.iter().chain(dev_set).find(|m| m.gold_ids.is_empty()) {
        return Err(Error::Precondition(format!("mixture {} has no gold sentences", m.mixture_id)));
    }
    let mut params = match init {
        Some(p) => {
            if p.config != config.model {
                return Err(Error::Config("initial checkpoint differs from the model configuration".into()));
            }
            p
        }
        None => ModelParams::init(config.model.clone(), config.seed)?,
    };
    crate::decoder::check_provider(&params, provider)?;
    let termination = config.model.termination;
    let start = Instant::now();
    let train_words = train_set
        .par_iter()
        .map(|m| MixtureWords::new(m, provider))
        .collect::<Result<Vec<_>>>()?;
    let dev_words = dev_set
        .par_iter()
        .map(|m| MixtureWords::new(m, provider))
        .collect::<Result<Vec<_>>>()?;
    let dev_states = teacher_states(dev_set, termination, config.seed ^ 1, 0);

    let mut log = Vec::new();
    let mut emit = |e: LogEntry, log: &mut Vec<LogEntry>| {
        on_log(&e);
        log.push(e);
    };
    let dev_report = |params: &ModelParams, epoch: usize, log: &mut Vec<LogEntry>, emit: &mut dyn FnMut(LogEntry, &mut Vec<LogEntry>)| -> Result<Option<f64>> {
        if dev_set.is_empty() {
            return Ok(None);
        }
        let loss = mean_loss(params, dev_set, &dev_words, &dev_states)?;
        let f1 = evaluate(dev_set, Method::Model(params), termination, provider, config.seed, None)?.macro_f1;
        emit(
            LogEntry { epoch, split: "dev".into(), loss, f1: Some(f1), wall_clock_s: start.elapsed().as_secs_f64() },
            log,
        );
        Ok(Some(f1))
    };

    let mut best = (params.clone(), 0usize, dev_report(&params, 0, &mut log, &mut emit)?);
    let mut adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let states = teacher_states(train_set, termination, config.seed, if config.resample { epoch } else { 1 });
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixture_seed(config.seed, 3, epoch)));
        let stream: Vec<(usize, usize)> = order
            .iter()
            .flat_map(|&m| (0..states[m].len()).map(move |e| (m, e)))
            .collect();
        let mut epoch_loss = 0.0;
        for batch in stream.chunks(config.batch_size) {
            // Consecutive examples of one mixture share a graph.
            let mut groups: Vec<(usize, Vec<TrainExample>)> = Vec::new();
            for &(m, e) in batch {
                match groups.last_mut() {
                    Some((gm, ex)) if *gm == m => ex.push(states[m][e].clone()),
                    _ => groups.push((m, vec![states[m][e].clone()])),
                }
            }
            let results = groups
                .par_iter()
                .map(|(m, ex)| group_loss(&params, &train_set[*m], &train_words[*m], ex, true))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = ParamGrads::zeros_like(&params);
            for r in &results {
                epoch_loss += r.loss;
                grads.add_assign(r.grads.as_ref().expect("requested"));
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &grads);
            if !params.all_finite() {
                let (m, e) = batch[0];
                return Err(Error::NonFiniteLoss { example: states[m][e].label(), loss: f64::NAN });
            }
        }
        emit(
            LogEntry {
                epoch,
                split: "train".into(),
                loss: epoch_loss / stream.len() as f64,
                f1: None,
                wall_clock_s: start.elapsed().as_secs_f64(),
            },
            &mut log,
        );
        if let Some(f1) = dev_report(&params, epoch, &mut log, &mut emit)? {
            if best.2.is_none_or(|b| f1 > b) {
                best = (params.clone(), epoch, Some(f1));
            }
        }
    }
    let (best_params, best_epoch, best_dev_f1) = if dev_set.is_empty() {
        (params.clone(), config.epochs, None)
    } else {
        best
    };
    Ok(TrainOutcome { best: best_params, last: params, best_epoch, best_dev_f1, log })
}

/// Trains on the `train` and `dev` splits of a generated dataset.
pub fn train_dataset(
    dataset_dir: &Path,
    provider: &dyn EmbeddingProvider,
    config: &TrainConfig,
    init: Option<ModelParams>,
    on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    let manifest = DatasetManifest::load(dataset_dir)?;
    let load = |split: &str| -> Result<Vec<Mixture>> {
        match manifest.split_path(dataset_dir, split) {
            Some(p) => load_mixtures(&p),
            None => Ok(Vec::new()),
        }
    };
    let train_set = load("train")?;
    let dev_set = load("dev")?;
    train(&train_set, &dev_set, provider, config, init, on_log)
}

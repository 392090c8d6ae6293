//! Synthetic mixtures: a target scenario shuffled together with distractor
//! scenarios and/or unconnected corpus sentences.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{EvalTopic, Scenario, Sentence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    W18,
    Rand,
    Hybrid,
    /// Ad-hoc pool with no gold labels.
    Adhoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureMeta {
    pub condition: Condition,
    pub num_scenarios: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub mixture_id: String,
    pub query: Sentence,
    pub candidates: Vec<Sentence>,
    /// Target-scenario members other than the query, in reading order.
    pub gold_ids: Vec<String>,
    /// Rank of each gold sentence within the target scenario, from 1.
    pub gold_order: BTreeMap<String, usize>,
    pub meta: MixtureMeta,
}

impl Mixture {
    /// A pool with no supervision, for user-facing construction.
    pub fn adhoc(query: Sentence, candidates: Vec<Sentence>) -> Self {
        Mixture {
            mixture_id: "adhoc".into(),
            query,
            candidates,
            gold_ids: Vec::new(),
            gold_order: BTreeMap::new(),
            meta: MixtureMeta {
                condition: Condition::Adhoc,
                num_scenarios: 0,
                seed: 0,
            },
        }
    }

    pub fn gold_set(&self) -> HashSet<&str> {
        self.gold_ids.iter().map(String::as_str).collect()
    }

    pub fn candidate_index(&self, id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.id == id)
    }

    /// Checks the structural invariants every generated mixture satisfies.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Generation(format!("mixture {}: {m}", self.mixture_id)));
        let mut ids = HashSet::new();
        for c in &self.candidates {
            if !ids.insert(c.id.as_str()) {
                return err(format!("duplicate candidate id `{}`", c.id));
            }
        }
        if ids.contains(self.query.id.as_str()) {
            return err("query appears among the candidates".into());
        }
        for g in &self.gold_ids {
            if !ids.contains(g.as_str()) {
                return err(format!("gold id `{g}` is not a candidate"));
            }
        }
        if self.gold_order.len() != self.gold_ids.len()
            || self.gold_ids.iter().any(|g| !self.gold_order.contains_key(g))
        {
            return err("gold_order keys differ from gold_ids".into());
        }
        let mut ranks: Vec<usize> = self.gold_order.values().copied().collect();
        ranks.sort_unstable();
        if ranks.iter().enumerate().any(|(i, &r)| r != i + 1) {
            return err("gold ranks are not 1..n".into());
        }
        Ok(())
    }
}

fn check_target(target: &Scenario) -> Result<()> {
    if target.len() < 2 {
        return Err(Error::Precondition(format!(
            "target scenario `{}` has {} sentence(s); at least 2 are needed",
            target.scenario_id,
            target.len()
        )));
    }
    Ok(())
}

fn gold_of(target: &Scenario) -> (Vec<String>, BTreeMap<String, usize>) {
    let ids: Vec<String> = target.sentences[1..].iter().map(|s| s.id.clone()).collect();
    let order = ids.iter().enumerate().map(|(i, id)| (id.clone(), i + 1)).collect();
    (ids, order)
}

fn assemble(
    target: &Scenario,
    mut candidates: Vec<Sentence>,
    condition: Condition,
    num_scenarios: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Mixture> {
    candidates.shuffle(rng);
    let (gold_ids, gold_order) = gold_of(target);
    let m = Mixture {
        mixture_id: format!("{}@{seed}", target.scenario_id),
        query: target.sentences[0].clone(),
        candidates,
        gold_ids,
        gold_order,
        meta: MixtureMeta {
            condition,
            num_scenarios,
            seed,
        },
    };
    m.validate()?;
    Ok(m)
}

pub fn make_w18(target: &Scenario, distractor: &Scenario, seed: u64) -> Result<Mixture> {
    if target.scenario_id == distractor.scenario_id {
        return Err(Error::Generation(format!(
            "target and distractor are the same scenario `{}`",
            target.scenario_id
        )));
    }
    check_target(target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates = target.sentences[1..]
        .iter()
        .chain(&distractor.sentences)
        .cloned()
        .collect();
    assemble(target, candidates, Condition::W18, 2, seed, &mut rng)
}

fn sample_pool(
    pool: &[Sentence],
    exclude: &HashSet<&str>,
    need: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sentence>> {
    if let Some(bad) = pool.iter().find(|s| exclude.contains(s.id.as_str())) {
        return Err(Error::Precondition(format!(
            "sentence pool contains `{}`, which belongs to a mixed scenario",
            bad.id
        )));
    }
    if pool.len() < need {
        return Err(Error::Generation(format!(
            "sentence pool has {} sentences, {need} needed for padding",
            pool.len()
        )));
    }
    Ok(sample(rng, pool.len(), need)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

pub fn make_rand(target: &Scenario, sentence_pool: &[Sentence], pad_to: usize, seed: u64) -> Result<Mixture> {
    check_target(target)?;
    if pad_to < target.len() {
        return Err(Error::Generation(format!(
            "pad_to {pad_to} is smaller than the target scenario ({})",
            target.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exclude: HashSet<&str> = target.sentences.iter().map(|s| s.id.as_str()).collect();
    let padding = sample_pool(sentence_pool, &exclude, pad_to - target.len(), &mut rng)?;
    let candidates = target.sentences[1..].iter().cloned().chain(padding).collect();
    assemble(target, candidates, Condition::Rand, 1, seed, &mut rng)
}

pub fn make_hybrid(
    target: &Scenario,
    distractors: &[Scenario],
    sentence_pool: &[Sentence],
    pad_to: usize,
    seed: u64,
) -> Result<Mixture> {
    if !(1..=3).contains(&distractors.len()) {
        return Err(Error::Generation(format!(
            "hybrid mixtures take 1 to 3 distractor scenarios, got {}",
            distractors.len()
        )));
    }
    let mut ids = HashSet::new();
    for sc in std::iter::once(target).chain(distractors) {
        if !ids.insert(sc.scenario_id.as_str()) {
            return Err(Error::Generation(format!("scenario `{}` used twice", sc.scenario_id)));
        }
    }
    check_target(target)?;
    let total: usize = target.len() + distractors.iter().map(Scenario::len).sum::<usize>();
    if pad_to < total {
        return Err(Error::Generation(format!(
            "pad_to {pad_to} is smaller than the {total} scenario sentences"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<Sentence> = target.sentences[1..]
        .iter()
        .chain(distractors.iter().flat_map(|d| &d.sentences))
        .cloned()
        .collect();
    let need = pad_to - total;
    if need > 0 {
        let exclude: HashSet<&str> = std::iter::once(target)
            .chain(distractors)
            .flat_map(|sc| sc.sentences.iter().map(|s| s.id.as_str()))
            .collect();
        candidates.extend(sample_pool(sentence_pool, &exclude, need, &mut rng)?);
    }
    assemble(target, candidates, Condition::Hybrid, 1 + distractors.len(), seed, &mut rng)
}

/// Mixtures built from a human-curated topic, once with each account as
/// the target.
pub fn eval_topic_mixtures(topic: &EvalTopic, index: usize) -> Result<Vec<Mixture>> {
    let [a, b] = topic.scenarios.as_slice() else {
        return Err(Error::Precondition(format!("topic `{}` needs two scenarios", topic.topic)));
    };
    let mut out = Vec::new();
    for (k, (t, d)) in [(a, b), (b, a)].into_iter().enumerate() {
        let mut m = make_w18(t, d, (index * 2 + k) as u64)?;
        m.mixture_id = format!("topic{index}-{}", t.scenario_id);
        out.push(m);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixCondition {
    W18,
    Rand,
    /// Target plus `k - 1` distractor scenarios, padded with random sentences.
    Hybrid(usize),
}

impl MixCondition {
    pub fn num_scenarios(self) -> usize {
        match self {
            MixCondition::W18 => 2,
            MixCondition::Rand => 1,
            MixCondition::Hybrid(k) => k,
        }
    }

    fn needs_padding(self) -> bool {
        !matches!(self, MixCondition::W18)
    }
}

impl std::str::FromStr for MixCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w18" => Ok(MixCondition::W18),
            "rand" => Ok(MixCondition::Rand),
            "hybrid" | "hybrid-4" => Ok(MixCondition::Hybrid(4)),
            "hybrid-2" => Ok(MixCondition::Hybrid(2)),
            "hybrid-3" => Ok(MixCondition::Hybrid(3)),
            other => Err(Error::Config(format!(
                "unknown condition `{other}` (expected w18, rand, hybrid-2, hybrid-3 or hybrid-4)"
            ))),
        }
    }
}

impl std::fmt::Display for MixCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MixCondition::W18 => f.write_str("w18"),
            MixCondition::Rand => f.write_str("rand"),
            MixCondition::Hybrid(k) => write!(f, "hybrid-{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub dev_frac: f64,
    pub test_frac: f64,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(counts: SplitCounts, seed: u64) -> Self {
        SplitSpec {
            train_frac: 0.85,
            dev_frac: 0.05,
            test_frac: 0.10,
            counts,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.dev_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {fracs:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Default padded length: mean scenario length times the largest number of
/// scenarios mixed, rounded up.
pub fn default_pad_to(sents_per_scenario: f64, max_scenarios: usize) -> usize {
    (sents_per_scenario * max_scenarios as f64).ceil() as usize
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent per-mixture seed derived from the manifest seed.
pub fn mixture_seed(manifest_seed: u64, split: usize, index: usize) -> u64 {
    splitmix64(manifest_seed ^ splitmix64(((split as u64) << 40) ^ index as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub mixtures: usize,
    pub scenarios: usize,
    pub scenario_ids_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub condition: MixCondition,
    pub pad_to: usize,
    pub split: SplitSpec,
    pub corpus_sha256: String,
    pub splits: BTreeMap<String, SplitInfo>,
}

impl DatasetManifest {
    pub fn split_path(&self, dir: &Path, split: &str) -> Option<PathBuf> {
        self.splits.get(split).map(|s| dir.join(&s.file))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Partitions scenarios at the scenario level; returns index lists per split.
pub fn split_scenarios(n: usize, spec: &SplitSpec) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(spec.seed)));
    let n_train = (n as f64 * spec.train_frac).floor() as usize;
    let n_dev = ((n as f64 * spec.dev_frac).floor() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_dev);
    let dev = idx.split_off(n_train);
    [idx, dev, test]
}

struct SplitPool<'a> {
    scenarios: Vec<&'a Scenario>,
    targets: Vec<usize>,
    sentence_count: usize,
}

impl<'a> SplitPool<'a> {
    fn new(corpus: &'a [Scenario], indices: &[usize], condition: MixCondition, pad_to: usize) -> Self {
        let scenarios: Vec<&Scenario> = indices.iter().map(|&i| &corpus[i]).collect();
        let targets = scenarios
            .iter()
            .enumerate()
            .filter(|(_, s)| s.len() >= 2 && (!condition.needs_padding() || s.len() <= pad_to))
            .map(|(i, _)| i)
            .collect();
        let sentence_count = scenarios.iter().map(|s| s.len()).sum();
        SplitPool {
            scenarios,
            targets,
            sentence_count,
        }
    }

    fn check_capacity(&self, name: &str, condition: MixCondition, pad_to: usize) -> Result<()> {
        let k = condition.num_scenarios();
        if self.targets.is_empty() {
            return Err(Error::Generation(format!(
                "split `{name}` has no eligible target scenario ({} scenarios in split)",
                self.scenarios.len()
            )));
        }
        if self.scenarios.len() < k {
            return Err(Error::Generation(format!(
                "split `{name}` has {} scenarios; {condition} needs {k} (short by {})",
                self.scenarios.len(),
                k - self.scenarios.len()
            )));
        }
        if condition.needs_padding() && self.sentence_count < pad_to {
            return Err(Error::Generation(format!(
                "split `{name}` has {} sentences; padding to {pad_to} is impossible (short by {})",
                self.sentence_count,
                pad_to - self.sentence_count
            )));
        }
        Ok(())
    }

    /// Draws `need` distinct sentences from scenarios not in `used`.
    fn random_sentences(&self, used: &HashSet<usize>, need: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sentence>> {
        let available = self.sentence_count
            - used.iter().map(|&i| self.scenarios[i].len()).sum::<usize>();
        if available < need {
            return Err(Error::Generation(format!(
                "only {available} unconnected sentences available, {need} needed"
            )));
        }
        let mut picked: HashSet<(usize, usize)> = HashSet::new();
        let mut out = Vec::with_capacity(need);
        while out.len() < need {
            let si = rng.gen_range(0..self.scenarios.len());
            if used.contains(&si) {
                continue;
            }
            let sc = self.scenarios[si];
            let j = rng.gen_range(0..sc.len());
            if picked.insert((si, j)) {
                out.push(sc.sentences[j].clone());
            }
        }
        Ok(out)
    }

    fn generate(&self, condition: MixCondition, pad_to: usize, seed: u64, id: String) -> Result<Mixture> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        const ATTEMPTS: usize = 1000;
        for _ in 0..ATTEMPTS {
            let t = self.targets[rng.gen_range(0..self.targets.len())];
            let target = self.scenarios[t];
            let sub_seed = rng.gen::<u64>();
            let mut m = match condition {
                MixCondition::W18 => {
                    let mut d = rng.gen_range(0..self.scenarios.len() - 1);
                    if d >= t {
                        d += 1;
                    }
                    make_w18(target, self.scenarios[d], sub_seed)?
                }
                MixCondition::Rand => {
                    let used = HashSet::from([t]);
                    let pool = self.random_sentences(&used, pad_to - target.len(), &mut rng)?;
                    make_rand(target, &pool, pad_to, sub_seed)?
                }
                MixCondition::Hybrid(k) => {
                    let others: Vec<usize> = sample(&mut rng, self.scenarios.len() - 1, k - 1)
                        .into_iter()
                        .map(|d| if d >= t { d + 1 } else { d })
                        .collect();
                    let distractors: Vec<Scenario> =
                        others.iter().map(|&d| self.scenarios[d].clone()).collect();
                    let total = target.len() + distractors.iter().map(Scenario::len).sum::<usize>();
                    if total > pad_to {
                        continue;
                    }
                    let used: HashSet<usize> = others.iter().copied().chain([t]).collect();
                    let pool = self.random_sentences(&used, pad_to - total, &mut rng)?;
                    make_hybrid(target, &distractors, &pool, pad_to, sub_seed)?
                }
            };
            m.mixture_id = id;
            m.meta.seed = seed;
            return Ok(m);
        }
        Err(Error::Generation(format!(
            "could not draw {} scenarios fitting in {pad_to} sentences after {ATTEMPTS} attempts",
            condition.num_scenarios()
        )))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_mixtures(path: &Path, mixtures: &[Mixture]) -> Result<()> {
    let mut buf = Vec::new();
    for m in mixtures {
        serde_json::to_writer(&mut buf, m)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_mixtures(path: &Path) -> Result<Vec<Mixture>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: Mixture = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        m.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

/// Generates every split in memory. Mixture `i` of a split depends only on
/// `(corpus, condition, pad_to, split seed, i)`.
pub fn generate_splits(
    corpus: &[Scenario],
    condition: MixCondition,
    split: &SplitSpec,
    pad_to: usize,
) -> Result<[Vec<Mixture>; 3]> {
    split.validate()?;
    if let MixCondition::Hybrid(k) = condition {
        if !(2..=4).contains(&k) {
            return Err(Error::Config(format!("hybrid mixtures take 2 to 4 scenarios, got {k}")));
        }
    }
    let parts = split_scenarios(corpus.len(), split);
    let counts = [split.counts.train, split.counts.dev, split.counts.test];
    let mut out: [Vec<Mixture>; 3] = Default::default();
    for (si, name) in SPLITS.iter().enumerate() {
        if counts[si] == 0 {
            continue;
        }
        let pool = SplitPool::new(corpus, &parts[si], condition, pad_to);
        pool.check_capacity(name, condition, pad_to)?;
        out[si] = (0..counts[si])
            .into_par_iter()
            .map(|i| {
                pool.generate(
                    condition,
                    pad_to,
                    mixture_seed(split.seed, si, i),
                    format!("{name}-{i:06}"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(out)
}

pub fn generate_dataset(
    corpus: &[Scenario],
    condition: MixCondition,
    split: &SplitSpec,
    pad_to: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mixtures = generate_splits(corpus, condition, split, pad_to)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let parts = split_scenarios(corpus.len(), split);
    let mut corpus_bytes = Vec::new();
    for sc in corpus {
        serde_json::to_writer(&mut corpus_bytes, sc)?;
        corpus_bytes.push(b'\n');
    }
    let mut splits = BTreeMap::new();
    for (si, name) in SPLITS.iter().enumerate() {
        let file = format!("{name}.jsonl");
        write_mixtures(&out_dir.join(&file), &mixtures[si])?;
        let ids: Vec<&str> = parts[si].iter().map(|&i| corpus[i].scenario_id.as_str()).collect();
        splits.insert(
            name.to_string(),
            SplitInfo {
                file,
                mixtures: mixtures[si].len(),
                scenarios: parts[si].len(),
                scenario_ids_sha256: sha256_hex(ids.join("\n").as_bytes()),
            },
        );
    }
    let manifest = DatasetManifest {
        condition,
        pad_to,
        split: split.clone(),
        corpus_sha256: sha256_hex(&corpus_bytes),
        splits,
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

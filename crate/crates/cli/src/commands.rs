use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use scenario_core::corpus::{build_vocab, load_corpus, write_corpus, CorpusFormat, CorpusStats};
use scenario_core::decoder::construct as construct_scenario;
use scenario_core::encoder::{EmbeddingProvider, ProviderSpec, StubHashProvider, TableProvider};
use scenario_core::evalkit::{evaluate, Method};
use scenario_core::mixgen::{
    default_pad_to, generate_dataset, load_mixtures, split_scenarios, DatasetManifest, MixCondition, Mixture,
    SplitCounts, SplitSpec,
};
use scenario_core::model::{Head, ModelConfig, ModelParams, Termination};
use scenario_core::synthetic::{synthetic_corpus, SyntheticCorpusConfig};
use scenario_core::training::{train_dataset, TrainConfig};

use crate::config::{create_dir, require_input, sha256_file, RunManifest};
use crate::error::Failure;
use crate::{ConstructOpts, EvalOpts, InspectOpts, SynthOpts, TrainOpts};

const MAX_SCENARIOS_MIXED: usize = 4;

fn required<T: Clone>(value: &Option<T>, name: &str) -> Result<T, Failure> {
    value.clone().ok_or_else(|| Failure::config(format!("missing required option `{name}`")))
}

fn parse<T: std::str::FromStr<Err = scenario_core::Error>>(s: &str) -> Result<T, Failure> {
    s.parse::<T>().map_err(Failure::from)
}

fn print_json(value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

pub fn synth(mut o: SynthOpts) -> Result<(), Failure> {
    let out = required(&o.out, "out")?;
    let synthetic = *o.synthetic.get_or_insert(false);
    let condition: MixCondition = parse(o.condition.get_or_insert_with(|| "w18".into()))?;
    let seed = *o.seed.get_or_insert(0);
    let counts = SplitCounts {
        train: *o.train.get_or_insert(1000),
        dev: *o.dev.get_or_insert(100),
        test: *o.test.get_or_insert(100),
    };
    let mut split = SplitSpec::new(counts, seed);
    split.train_frac = *o.train_frac.get_or_insert(split.train_frac);
    split.dev_frac = *o.dev_frac.get_or_insert(split.dev_frac);
    split.test_frac = *o.test_frac.get_or_insert(split.test_frac);
    let vocab_cap = *o.vocab_cap.get_or_insert(50_000);

    let corpus = match (&o.corpus, synthetic) {
        (Some(_), true) => return Err(Failure::config("give either --corpus or --synthetic, not both".into())),
        (None, false) => return Err(Failure::config("missing required option `corpus` (or use --synthetic)".into())),
        (Some(path), false) => {
            require_input(path)?;
            let format: CorpusFormat = parse(o.format.get_or_insert_with(|| "jsonl".into()))?;
            load_corpus(path, format)?
        }
        (None, true) => {
            let base = if *o.disjoint.get_or_insert(false) {
                SyntheticCorpusConfig::disjoint(0, 0)
            } else {
                SyntheticCorpusConfig::default()
            };
            synthetic_corpus(&SyntheticCorpusConfig {
                num_scenarios: *o.synthetic_scenarios.get_or_insert(200),
                seed: *o.synthetic_seed.get_or_insert(0),
                ..base
            })
        }
    };
    let stats = build_vocab(&corpus, vocab_cap)?;
    let pad_to = *o
        .pad_to
        .get_or_insert_with(|| default_pad_to(stats.sents_per_scenario, MAX_SCENARIOS_MIXED));

    create_dir(&out)?;
    let manifest = generate_dataset(&corpus, condition, &split, pad_to, &out)?;
    let train_ids = &split_scenarios(corpus.len(), &split)[0];
    let train_scenarios: Vec<_> = train_ids.iter().map(|&i| corpus[i].clone()).collect();
    let vocab_path = out.join("vocab.txt");
    let train_stats = if train_scenarios.is_empty() { stats } else { build_vocab(&train_scenarios, vocab_cap)? };
    train_stats.write_vocab(&vocab_path)?;

    let mut run = RunManifest::new("synth", &o, json!({ "seed": seed, "synthetic_seed": o.synthetic_seed }))?;
    if let Some(path) = &o.corpus {
        run.input(path)?;
    } else {
        let path = out.join("corpus.jsonl");
        write_corpus(&path, &corpus)?;
        run.outputs.push(path);
    }
    run.outputs.push(out.join("manifest.json"));
    run.outputs.extend(manifest.splits.values().map(|s| out.join(&s.file)));
    run.outputs.push(vocab_path);
    run.write(&out)?;
    print_json(&json!({
        "out": out,
        "condition": condition.to_string(),
        "pad_to": pad_to,
        "mixtures": manifest.splits.iter().map(|(k, v)| (k.clone(), v.mixtures)).collect::<std::collections::BTreeMap<_, _>>(),
    }))
}

/// Reads a vocabulary file; returns the token set and the file hash.
fn read_vocab(path: &Path) -> Result<(HashSet<String>, String), Failure> {
    require_input(path)?;
    let text = fs::read_to_string(path).map_err(|e| Failure::input(path, e))?;
    let reserved = CorpusStats::reserved();
    let set = text
        .lines()
        .filter(|t| !t.is_empty() && !reserved.contains(t))
        .map(str::to_string)
        .collect();
    Ok((set, sha256_file(path)?))
}

fn provider_from_options(
    dim: usize,
    seed: u64,
    embeddings: Option<&Path>,
    vocab: Option<&Path>,
) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    if let Some(path) = embeddings {
        require_input(path)?;
        return Ok(Box::new(TableProvider::load(path)?));
    }
    if dim == 0 {
        return Err(Failure::config("embedding dim must be positive".into()));
    }
    Ok(match vocab {
        Some(path) => {
            let (set, hash) = read_vocab(path)?;
            Box::new(StubHashProvider::with_vocab(dim, seed, set, hash))
        }
        None => Box::new(StubHashProvider::new(dim, seed)),
    })
}

fn provider_for_checkpoint(spec: &ProviderSpec, vocab: Option<&Path>) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    match (spec, vocab) {
        (ProviderSpec::StubHash { dim, seed, vocab_hash: Some(expected) }, Some(path)) => {
            let (set, hash) = read_vocab(path)?;
            if &hash != expected {
                return Err(Failure::config(format!(
                    "vocabulary {} does not match the one the checkpoint was trained with",
                    path.display()
                )));
            }
            Ok(Box::new(StubHashProvider::with_vocab(*dim, *seed, set, hash)))
        }
        (ProviderSpec::StubHash { vocab_hash: Some(_), .. }, None) => {
            Err(Failure::config("checkpoint was trained with a vocabulary; pass it with --vocab".into()))
        }
        (ProviderSpec::Table { path, .. }, _) => {
            require_input(path)?;
            Ok(spec.build()?)
        }
        _ => Ok(spec.build()?),
    }
}

fn load_checkpoint(path: &Path) -> Result<ModelParams, Failure> {
    require_input(path)?;
    Ok(ModelParams::load(path)?)
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    split: String,
    loss: f64,
    f1: Option<f64>,
    wall_clock_s: f64,
}

pub fn train(mut o: TrainOpts) -> Result<(), Failure> {
    let data = required(&o.data, "data")?;
    let out = required(&o.out, "out")?;
    require_input(&data.join("manifest.json"))?;
    let head: Head = parse(o.head.get_or_insert_with(|| "comp-ins-rn".into()))?;
    let termination: Termination = parse(o.termination.get_or_insert_with(|| "fixed".into()))?;
    let hidden = *o.hidden.get_or_insert(32);
    let dim = *o.dim.get_or_insert(32);
    let provider_seed = *o.provider_seed.get_or_insert(0);
    let deterministic = *o.deterministic.get_or_insert(false);
    let provider = provider_from_options(dim, provider_seed, o.embeddings.as_deref(), o.vocab.as_deref())?;

    let mut model = ModelConfig::new(head, provider.spec(), hidden);
    model.termination = termination;
    model.relation_width = *o.relation_width.get_or_insert(hidden);
    model.pairwise_hidden = *o.pairwise_hidden.get_or_insert(hidden);
    model.rn_normalize = *o.rn_normalize.get_or_insert(model.rn_normalize);
    model.pairwise_symmetric = *o.pairwise_symmetric.get_or_insert(model.pairwise_symmetric);
    let defaults = TrainConfig::new(model.clone());
    let config = TrainConfig {
        epochs: *o.epochs.get_or_insert(defaults.epochs),
        learning_rate: *o.learning_rate.get_or_insert(defaults.learning_rate),
        batch_size: *o.batch_size.get_or_insert(defaults.batch_size),
        seed: *o.seed.get_or_insert(defaults.seed),
        resample: *o.resample.get_or_insert(defaults.resample),
        ..defaults
    };
    config.validate()?;
    let init = o.resume.as_deref().map(load_checkpoint).transpose()?;

    create_dir(&out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Failure::output(&log_path, e))?;
    let mut write_err = None;
    let outcome = train_dataset(&data, provider.as_ref(), &config, init, |e| {
        let line = LogLine {
            epoch: e.epoch,
            split: e.split.clone(),
            loss: e.loss,
            f1: e.f1,
            wall_clock_s: if deterministic { 0.0 } else { e.wall_clock_s },
        };
        let text = serde_json::to_string(&line).expect("log line serializes");
        if let Err(err) = writeln!(log, "{text}") {
            write_err.get_or_insert(err);
        }
        eprintln!("{text}");
    })?;
    if let Some(e) = write_err {
        return Err(Failure::output(&log_path, e));
    }
    let best = out.join("model.best.json");
    let last = out.join("model.last.json");
    outcome.best.save(&best)?;
    outcome.last.save(&last)?;

    let mut run = RunManifest::new("train", &o, json!({ "seed": config.seed, "provider_seed": provider_seed }))?;
    let manifest = DatasetManifest::load(&data)?;
    run.input(&data.join("manifest.json"))?;
    for split in ["train", "dev"] {
        if let Some(p) = manifest.split_path(&data, split) {
            run.input(&p)?;
        }
    }
    for path in [o.resume.as_ref(), o.vocab.as_ref(), o.embeddings.as_ref()].into_iter().flatten() {
        run.input(path)?;
    }
    run.outputs = vec![best.clone(), last.clone(), log_path];
    run.write(&out)?;
    print_json(&json!({
        "best_checkpoint": best,
        "last_checkpoint": last,
        "best_epoch": outcome.best_epoch,
        "best_dev_f1": outcome.best_dev_f1,
    }))
}

fn load_eval_mixtures(o: &mut EvalOpts) -> Result<(Vec<Mixture>, Vec<PathBuf>), Failure> {
    match (&o.mixtures, &o.data) {
        (Some(_), Some(_)) => Err(Failure::config("give either --mixtures or --data, not both".into())),
        (Some(path), None) => {
            require_input(path)?;
            Ok((load_mixtures(path)?, vec![path.clone()]))
        }
        (None, Some(dir)) => {
            require_input(&dir.join("manifest.json"))?;
            let split = o.split.get_or_insert_with(|| "test".into()).clone();
            let manifest = DatasetManifest::load(dir)?;
            let path = manifest
                .split_path(dir, &split)
                .ok_or_else(|| Failure::config(format!("dataset has no `{split}` split")))?;
            Ok((load_mixtures(&path)?, vec![dir.join("manifest.json"), path]))
        }
        (None, None) => Err(Failure::config("missing required option `data` (or `mixtures`)".into())),
    }
}

pub fn eval(mut o: EvalOpts) -> Result<(), Failure> {
    let out = required(&o.out, "out")?;
    let name = required(&o.head, "head")?;
    let mode: Termination = parse(o.mode.get_or_insert_with(|| "fixed".into()))?;
    let seed = *o.seed.get_or_insert(0);
    let checkpoint = o.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let method = Method::resolve(&name, checkpoint.as_ref())?;
    let (mixtures, inputs) = load_eval_mixtures(&mut o)?;
    let provider = match &checkpoint {
        Some(p) => provider_for_checkpoint(&p.config.provider, o.vocab.as_deref())?,
        None => provider_from_options(
            *o.dim.get_or_insert(32),
            *o.provider_seed.get_or_insert(0),
            o.embeddings.as_deref(),
            o.vocab.as_deref(),
        )?,
    };
    let report = evaluate(&mixtures, method, mode, provider.as_ref(), seed, o.label.clone())?;
    create_dir(&out)?;
    report.write(&out)?;

    let mut run = RunManifest::new("eval", &o, json!({ "seed": seed }))?;
    for path in inputs.iter().chain(o.checkpoint.as_ref()) {
        run.input(path)?;
    }
    run.outputs = vec![out.join("report.json"), out.join("report.csv")];
    run.write(&out)?;
    print_json(&json!({
        "method": report.config.method,
        "mode": mode,
        "mixtures": report.mixtures.len(),
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "mean_tau": report.mean_tau,
        "rho_tau_f1": report.rho_tau_f1,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstructInput {
    query: String,
    #[serde(default)]
    sentences: Vec<String>,
}

/// JSON `{"query", "sentences"}`, or plain lines: the query, then one
/// candidate per line.
fn parse_construct_input(text: &str) -> Result<ConstructInput, Failure> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text).map_err(|e| Failure::data(format!("construct input: {e}")));
    }
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let query = lines
        .next()
        .ok_or_else(|| Failure::data("construct input is empty; expected a query line".into()))?
        .to_string();
    Ok(ConstructInput {
        query,
        sentences: lines.map(str::to_string).collect(),
    })
}

pub fn construct(o: ConstructOpts) -> Result<(), Failure> {
    let ck_path = required(&o.checkpoint, "checkpoint")?;
    let params = load_checkpoint(&ck_path)?;
    let provider = provider_for_checkpoint(&params.config.provider, o.vocab.as_deref())?;
    let text = match &o.input {
        Some(path) => {
            require_input(path)?;
            fs::read_to_string(path).map_err(|e| Failure::input(path, e))?
        }
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| Failure::input(Path::new("<stdin>"), e))?;
            s
        }
    };
    let input = parse_construct_input(&text)?;
    let result = construct_scenario(&input.query, &input.sentences, &params, provider.as_ref(), o.budget)?;
    let mut text = serde_json::to_string_pretty(&result).map_err(|e| Failure::data(e.to_string()))?;
    text.push('\n');
    match &o.out {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(path) => {
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            create_dir(dir)?;
            fs::write(path, text).map_err(|e| Failure::output(path, e))?;
            let mut run = RunManifest::new("construct", &o, json!({}))?;
            run.input(&ck_path)?;
            if let Some(p) = &o.input {
                run.input(p)?;
            }
            run.outputs = vec![path.clone()];
            run.write(dir)?;
            Ok(())
        }
    }
}

pub fn inspect(o: InspectOpts) -> Result<(), Failure> {
    let path = match (&o.mixtures, &o.data) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => {
            require_input(&dir.join("manifest.json"))?;
            DatasetManifest::load(dir)?
                .split_path(dir, &o.split)
                .ok_or_else(|| Failure::config(format!("dataset has no `{}` split", o.split)))?
        }
        (None, None) => return Err(Failure::config("missing required option `mixtures` (or `data`)".into())),
    };
    require_input(&path)?;
    let mixtures = load_mixtures(&path)?;
    let m = match (&o.id, o.index) {
        (Some(id), _) => mixtures
            .iter()
            .find(|m| &m.mixture_id == id)
            .ok_or_else(|| Failure::config(format!("no mixture `{id}` in {}", path.display())))?,
        (None, i) => {
            let i = i.unwrap_or(0);
            mixtures
                .get(i)
                .ok_or_else(|| Failure::config(format!("{} holds {} mixtures, no index {i}", path.display(), mixtures.len())))?
        }
    };
    if o.json {
        return print_json(m);
    }
    let mut text = format!(
        "{}  {} condition, {} scenarios, {} candidates, {} gold\n",
        m.mixture_id,
        format!("{:?}", m.meta.condition).to_lowercase(),
        m.meta.num_scenarios,
        m.candidates.len(),
        m.gold_ids.len()
    );
    text.push_str(&format!("query      {}  {}\n", m.query.id, m.query.text));
    let width = m.candidates.len().to_string().len();
    for (i, c) in m.candidates.iter().enumerate() {
        let mark = match m.gold_order.get(&c.id) {
            Some(rank) => format!("* gold #{rank}"),
            None => String::new(),
        };
        text.push_str(&format!("{:>width$}  {:<9}  {}  {}\n", i + 1, mark, c.id, c.text));
    }
    // A closed pipe (e.g. `| head`) is not an error.
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
    Ok(())
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The process exits 0 after reporting so that `cargo test` stays usable
//! while a criterion is failing; set `ACCEPTANCE_STRICT=1` to exit 1 on any
//! failure. Run with `ACCEPTANCE_ONLY=6,9` to select criteria.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenario_core::corpus::{Scenario, ScenarioSource, Sentence};
use scenario_core::decoder::{decode_dynamic, decode_fixed};
use scenario_core::encoder::{encode_sentence, EmbeddingProvider, EncoderParams, SentenceEncoding, StubHashProvider};
use scenario_core::evalkit::{baseline_unif, evaluate, f1_score, kendall_tau, spearman_rho, Method};
use scenario_core::mixgen::{generate_dataset, generate_splits, make_w18, MixCondition, Mixture, SplitCounts, SplitSpec};
use scenario_core::model::{Head, ModelConfig, ModelParams, Termination};
use scenario_core::scoring::{comp_ins_rn_scores, comp_ins_scores, insertion_points, AttentionParams, InsertionParams, RelationParams};
use scenario_core::synthetic::{synthetic_corpus, SyntheticCorpusConfig};
use scenario_core::training::{examples_loss, loss_and_gradients, marginal_loss_pairs, train, PoolEntry, TrainConfig, TrainExample};

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    limit_s: f64,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform2(r: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| r.gen_range(-scale..=scale))
}

// 1. Metric oracles

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Pair counting over gold pairs: concordant when the earlier-ranked item
/// is also predicted earlier.
fn brute_tau(order: &[usize]) -> f64 {
    let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(p, &x)| (x, p)).collect();
    let n = order.len();
    let (mut con, mut dis) = (0.0, 0.0);
    for a in 0..n {
        for b in a + 1..n {
            if pos[&a] < pos[&b] {
                con += 1.0;
            } else {
                dis += 1.0;
            }
        }
    }
    (con - dis) / (con + dis)
}

fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn metric_oracles() -> Outcome {
    let mut perms = 0;
    for n in 0..=6 {
        let gold: BTreeMap<String, usize> = (0..n).map(|i| (format!("g{i}"), i + 1)).collect();
        for p in permutations(n) {
            // Interleave an unranked id to check it is ignored.
            let mut pred: Vec<String> = p.iter().map(|i| format!("g{i}")).collect();
            pred.insert(pred.len() / 2, "x".into());
            let got = kendall_tau(&pred, &gold);
            ensure(got.n_compared == n, || format!("n_compared {} for n={n}", got.n_compared))?;
            match got.tau {
                None => ensure(n < 2, || format!("tau absent for n={n}"))?,
                Some(t) => ensure(n >= 2 && t == brute_tau(&p), || format!("tau {t} vs {} on {p:?}", brute_tau(&p)))?,
            }
            perms += 1;
        }
    }

    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let len = r.gen_range(3..30);
        let gen = |r: &mut ChaCha8Rng| -> f64 {
            if i % 2 == 0 {
                r.gen_range(-1.0..1.0)
            } else {
                r.gen_range(0..5) as f64
            }
        };
        let xs: Vec<f64> = (0..len).map(|_| gen(&mut r)).collect();
        let ys: Vec<f64> = (0..len).map(|_| gen(&mut r)).collect();
        let expect = pearson(&brute_ranks(&xs), &brute_ranks(&ys));
        match spearman_rho(&xs, &ys) {
            Ok(rho) => worst = worst.max((rho - expect).abs()),
            Err(e) => ensure(!expect.is_finite(), || format!("spearman failed on a defined case: {e}"))?,
        }
    }
    ensure(worst <= 1e-9, || format!("spearman max error {worst:.3e}"))?;

    let exact = f1_score(&["a", "b", "c"], &["a", "b", "c"]).f1;
    let partial = f1_score(&["a", "b", "x"], &["a", "b", "c", "d"]);
    let disjoint = f1_score(&["x", "y"], &["a", "b"]).f1;
    ensure(exact == 1.0, || format!("identity f1 {exact}"))?;
    ensure(
        (partial.precision - 2.0 / 3.0).abs() < 1e-12 && (partial.recall - 0.5).abs() < 1e-12 && (partial.f1 - 4.0 / 7.0).abs() < 1e-12,
        || format!("partial overlap {partial:?}"),
    )?;
    ensure(disjoint == 0.0, || format!("disjoint f1 {disjoint}"))?;
    Ok(format!("{perms} permutations exact; spearman max err {worst:.1e}; f1 1.0/0.5714/0.0"))
}

// 2. Loss oracle

fn loss_oracle() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (rows, cols) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let grid = uniform2(&mut r, (rows, cols), 5.0);
        let cells: Vec<(usize, usize)> = (0..rows).flat_map(|k| (0..cols).map(move |j| (k, j))).collect();
        let n_correct = r.gen_range(1..=4.min(cells.len()));
        let correct: Vec<(usize, usize)> = cells.choose_multiple(&mut r, n_correct).copied().collect();
        let flat: Vec<f64> = grid.iter().copied().collect();
        let z: f64 = flat.iter().map(|v| v.exp()).sum();
        let mass: f64 = correct.iter().map(|&(k, j)| grid[[k, j]].exp() / z).sum();
        let expect = -mass.ln();
        let got = marginal_loss_pairs(&grid, &correct).map_err(|e| e.to_string())?;
        worst = worst.max((got - expect).abs());
    }
    ensure(worst <= 1e-9, || format!("max error {worst:.3e}"))?;
    Ok(format!("200 grids, max error {worst:.1e}"))
}

// 3. Gradient check

fn scenario(id: &str, texts: &[&str]) -> Scenario {
    Scenario {
        scenario_id: id.into(),
        sentences: texts.iter().enumerate().map(|(i, t)| Sentence::new(format!("{id}-{i}"), *t)).collect(),
        source: ScenarioSource::CorpusParagraph,
    }
}

fn example(m: &Mixture, t: usize, partial: &[&str], remaining: &[&str], pool: &[&str], end: bool) -> TrainExample {
    let mut candidate_pool: Vec<PoolEntry> = pool.iter().map(|s| PoolEntry::Sentence(s.to_string())).collect();
    if end {
        candidate_pool.push(PoolEntry::End);
    }
    TrainExample {
        mixture_id: m.mixture_id.clone(),
        timestep: t,
        partial: partial.iter().map(|s| s.to_string()).collect(),
        remaining_gold: remaining.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
        candidate_pool,
    }
}

fn max_rel_error(params: &ModelParams, m: &Mixture, ex: &[TrainExample], provider: &dyn EmbeddingProvider) -> Result<(f64, String, usize), String> {
    const EPS: f64 = 1e-4;
    let (_, grads) = loss_and_gradients(params, m, ex, provider).map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    params.visit(|name, _, v| sizes.push((name.to_string(), v.len())));
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (name, len) in sizes {
        // Arrays a head never reads carry no gradient; they must be flat.
        let analytic = grads.get(&name).map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
        for i in 0..len {
            let shifted = |delta: f64| -> Result<f64, String> {
                let mut p = params.clone();
                p.visit_mut(|n, v| {
                    if n == name {
                        v[i] += delta;
                    }
                });
                examples_loss(&p, m, ex, provider).map_err(|e| e.to_string())
            };
            let numeric = (shifted(EPS)? - shifted(-EPS)?) / (2.0 * EPS);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {a:.6e} numeric {numeric:.6e}"));
            }
            checked += 1;
        }
    }
    Ok((worst.0, worst.1, checked))
}

fn gradient_check() -> Outcome {
    let provider = StubHashProvider::new(4, 3);
    let target = scenario("t", &["storm hits coast", "power fails", "crews repair lines"]);
    let other = scenario("o", &["team wins final", "fans celebrate downtown"]);
    let m = make_w18(&target, &other, 7).map_err(|e| e.to_string())?;
    let fixed = vec![example(&m, 2, &["t-0", "t-1"], &["t-2"], &["t-2", "o-0", "o-1"], false)];
    let dynamic = vec![
        example(&m, 2, &["t-0", "t-1"], &["t-2"], &["t-2", "o-0"], true),
        example(&m, 3, &["t-0", "t-1", "t-2"], &[], &["o-0", "o-1"], true),
    ];
    let mut report = Vec::new();
    let mut worst_all: f64 = 0.0;
    let cases = [
        (Head::Comp, Termination::Fixed),
        (Head::CompIns, Termination::Fixed),
        (Head::CompInsRn, Termination::Fixed),
        (Head::Pairwise, Termination::Fixed),
        (Head::CompInsRn, Termination::Dynamic),
    ];
    for (head, termination) in cases {
        let mut cfg = ModelConfig::new(head, provider.spec(), 6);
        cfg.relation_width = 3;
        cfg.pairwise_hidden = 5;
        cfg.termination = termination;
        let params = ModelParams::init(cfg, 17).map_err(|e| e.to_string())?;
        let ex = if termination == Termination::Dynamic { &dynamic } else { &fixed };
        let (worst, at, n) = max_rel_error(&params, &m, ex, &provider)?;
        ensure(worst < 1e-4, || format!("{head}/{termination:?}: rel error {worst:.3e} at {at}"))?;
        worst_all = worst_all.max(worst);
        report.push(format!("{head}{}:{n}", if termination == Termination::Dynamic { "+end" } else { "" }));
    }
    Ok(format!("max rel error {worst_all:.1e} over {}", report.join(" ")))
}

// 4. Structural invariants

fn random_encoding(r: &mut ChaCha8Rng, enc: &EncoderParams, d: usize) -> SentenceEncoding {
    let tokens = r.gen_range(1..=4);
    let mut words = uniform2(r, (tokens, d), 1.0);
    for mut row in words.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    encode_sentence(&words, enc).expect("encoder dims")
}

fn structural_invariants() -> Outcome {
    let mut r = rng(4);
    let single = Array1::from(vec![0.5, -1.0, 2.0]);
    let pts = insertion_points(std::slice::from_ref(&single)).map_err(|e| e.to_string())?;
    ensure(pts.len() == 2 && pts[0] == single && pts[1] == single, || "single-sentence insertion points differ from the sentence".into())?;
    for k in 2..=6 {
        let ts: Vec<Array1<f64>> = (0..k).map(|_| Array1::from_shape_fn(5, |_| r.gen_range(-1.0..1.0))).collect();
        let pts = insertion_points(&ts).map_err(|e| e.to_string())?;
        ensure(pts.len() == k + 1, || format!("{} points for {k} sentences", pts.len()))?;
        ensure(pts[0] == ts[0] && pts[k] == ts[k - 1], || "end points are not the boundary sentences".into())?;
        for i in 1..k {
            let mid = (&ts[i - 1] + &ts[i]) / 2.0;
            ensure((&pts[i] - &mid).iter().all(|v| v.abs() < 1e-15), || format!("interior point {i} is not the average"))?;
        }
    }

    let (d, h, l) = (4, 6, 3);
    let mut same = 0;
    for _ in 0..100 {
        let enc = EncoderParams::random(d, h, &mut r).map_err(|e| e.to_string())?;
        let nt = r.gen_range(1..=5);
        let nc = r.gen_range(1..=6);
        let t: Vec<SentenceEncoding> = (0..nt).map(|_| random_encoding(&mut r, &enc, d)).collect();
        let c: Vec<SentenceEncoding> = (0..nc).map(|_| random_encoding(&mut r, &enc, d)).collect();
        let (tr, cr): (Vec<&SentenceEncoding>, Vec<&SentenceEncoding>) = (t.iter().collect(), c.iter().collect());
        let att = AttentionParams {
            u: uniform2(&mut r, (h, h), 1.0),
            out_w: uniform2(&mut r, (2 * h, 1), 1.0),
            out_b: uniform2(&mut r, (1, 1), 1.0),
        };
        let ins = InsertionParams { w: uniform2(&mut r, (h, 2 * h), 1.0) };
        let mut rel = RelationParams::zeros(d, l);
        rel.out_w = uniform2(&mut r, (l, 1), 1.0);
        rel.out_b = uniform2(&mut r, (1, 1), 1.0);
        let base = comp_ins_scores(&tr, &cr, &att, &ins).map_err(|e| e.to_string())?;
        let fused = comp_ins_rn_scores(&tr, &cr, &att, &ins, &rel, true).map_err(|e| e.to_string())?;
        ensure(base.grid.fused.nrows() == nt + 1 && fused.grid.fused.nrows() == nt + 1, || {
            format!("grid has {} rows for {nt} scenario sentences", base.grid.fused.nrows())
        })?;
        ensure(base.grid.fused.ncols() == nc, || "grid column count differs from candidates".into())?;
        let (a, b) = (base.choice(), fused.choice());
        ensure(a.0 == b.0 && a.1.slot == b.1.slot, || format!("V = 0 changed the choice: {a:?} vs {b:?}"))?;
        same += 1;
    }
    Ok(format!("insertion point cases exact; {same}/100 grids with |T|+1 rows and unchanged argmax at V = 0"))
}

// 5. Generator invariants

fn generator_invariants() -> Outcome {
    let corpus = synthetic_corpus(&SyntheticCorpusConfig { seed: 5, ..Default::default() });
    let owner: HashMap<&str, &Scenario> = corpus
        .iter()
        .flat_map(|sc| sc.sentences.iter().map(move |s| (s.id.as_str(), sc)))
        .collect();
    let pad_to = 24;
    let spec = SplitSpec::new(SplitCounts { train: 800, dev: 100, test: 100 }, 21);
    let splits = generate_splits(&corpus, MixCondition::Hybrid(4), &spec, pad_to).map_err(|e| e.to_string())?;
    let mut split_scenarios: Vec<HashSet<&str>> = Vec::new();
    let mut total = 0;
    for mixtures in &splits {
        let mut used = HashSet::new();
        for m in mixtures {
            total += 1;
            let target = owner[m.query.id.as_str()];
            let gold: HashSet<&str> = m.gold_ids.iter().map(String::as_str).collect();
            let target_rest: HashSet<&str> = target.sentences[1..].iter().map(|s| s.id.as_str()).collect();
            ensure(target.sentences[0].id == m.query.id, || format!("{}: query is not the first target sentence", m.mixture_id))?;
            ensure(gold == target_rest, || format!("{}: gold differs from the target scenario", m.mixture_id))?;
            let mut per_scenario: HashMap<&str, usize> = HashMap::new();
            let mut ids = HashSet::new();
            for c in &m.candidates {
                ensure(ids.insert(c.id.as_str()), || format!("{}: duplicate candidate {}", m.mixture_id, c.id))?;
                let sc = owner[c.id.as_str()];
                ensure(
                    gold.contains(c.id.as_str()) == (sc.scenario_id == target.scenario_id),
                    || format!("{}: candidate {} crosses the gold/distractor boundary", m.mixture_id, c.id),
                )?;
                *per_scenario.entry(sc.scenario_id.as_str()).or_default() += 1;
                used.insert(sc.scenario_id.as_str());
            }
            used.insert(target.scenario_id.as_str());
            ensure(m.candidates.len() + 1 == pad_to, || format!("{}: {} sentences, expected {pad_to}", m.mixture_id, m.candidates.len() + 1))?;
            let full: Vec<&str> = per_scenario
                .iter()
                .filter(|(id, &n)| **id != target.scenario_id && corpus.iter().any(|s| s.scenario_id == **id && s.len() == n))
                .map(|(id, _)| *id)
                .collect();
            let distractor_len: usize = full.iter().map(|id| corpus.iter().find(|s| s.scenario_id == *id).unwrap().len()).sum();
            ensure(full.len() >= 3, || format!("{}: {} complete distractor scenarios", m.mixture_id, full.len()))?;
            let padding: usize = per_scenario
                .iter()
                .filter(|(id, _)| **id != target.scenario_id && !full.contains(id))
                .map(|(_, &n)| n)
                .sum();
            ensure(
                full.len() > 3 || padding == pad_to - target.len() - distractor_len,
                || format!("{}: {padding} padding sentences", m.mixture_id),
            )?;
            ensure(m.meta.num_scenarios == 4, || format!("{}: num_scenarios {}", m.mixture_id, m.meta.num_scenarios))?;
        }
        split_scenarios.push(used);
    }
    for a in 0..3 {
        for b in a + 1..3 {
            let shared = split_scenarios[a].intersection(&split_scenarios[b]).count();
            ensure(shared == 0, || format!("splits {a} and {b} share {shared} scenarios"))?;
        }
    }

    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for dir in &dirs {
        generate_dataset(&corpus, MixCondition::Hybrid(4), &spec, pad_to, dir.path()).map_err(|e| e.to_string())?;
    }
    let mut files = 0;
    for entry in std::fs::read_dir(dirs[0].path()).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let a = std::fs::read(dirs[0].path().join(&name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(&name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name:?} differs between reruns"))?;
        files += 1;
    }
    Ok(format!("{total} mixtures disjoint and padded to {pad_to}; splits disjoint; {files} files byte-identical on rerun"))
}

// 6. and 9. Overfit experiments

const OVERFIT_DIM: usize = 32;

fn overfit_set() -> Vec<Mixture> {
    let corpus = synthetic_corpus(&SyntheticCorpusConfig {
        scenario_vocab: 4,
        ..SyntheticCorpusConfig::disjoint(100, 11)
    });
    (0..50)
        .map(|i| make_w18(&corpus[2 * i], &corpus[2 * i + 1], i as u64).expect("valid scenarios"))
        .collect()
}

fn overfit_model(head: Head, termination: Termination, set: &[Mixture], provider: &StubHashProvider) -> Result<ModelParams, String> {
    let mut model = ModelConfig::new(head, provider.spec(), OVERFIT_DIM);
    model.termination = termination;
    let cfg = TrainConfig {
        batch_size: 1,
        ..TrainConfig::new(model)
    };
    train(set, &[], provider, &cfg, None, |_| {}).map(|o| o.last).map_err(|e| e.to_string())
}

fn overfit() -> Outcome {
    let set = overfit_set();
    let provider = StubHashProvider::new(OVERFIT_DIM, 0);
    let mut lines = Vec::new();
    let mut failed = false;
    for head in [Head::Comp, Head::CompIns, Head::CompInsRn] {
        let start = Instant::now();
        let params = overfit_model(head, Termination::Fixed, &set, &provider)?;
        let f1 = evaluate(&set, Method::Model(&params), Termination::Fixed, &provider, 0, None)
            .map_err(|e| e.to_string())?
            .macro_f1;
        let secs = start.elapsed().as_secs_f64();
        let ok = f1 >= 0.95 && secs < 300.0;
        failed |= !ok;
        lines.push(format!("{head} {f1:.4} ({secs:.0} s){}", if ok { "" } else { " below target" }));
    }
    let msg = format!("macro F1 after 10 epochs at lr 1e-4: {}", lines.join(", "));
    if failed {
        Err(msg)
    } else {
        Ok(msg)
    }
}

fn dynamic_termination() -> Outcome {
    let set = overfit_set();
    let provider = StubHashProvider::new(OVERFIT_DIM, 0);
    let start = Instant::now();
    let params = overfit_model(Head::CompInsRn, Termination::Dynamic, &set, &provider)?;
    let trained = start.elapsed().as_secs_f64();
    let mut within = 0;
    let (mut fixed_f1, mut dyn_f1) = (0.0, 0.0);
    for m in &set {
        let d = decode_dynamic(m, &params, &provider, m.candidates.len()).map_err(|e| e.to_string())?;
        let f = decode_fixed(m, &params, &provider, m.gold_ids.len()).map_err(|e| e.to_string())?;
        if d.predicted_ids.len().abs_diff(m.gold_ids.len()) <= 1 {
            within += 1;
        }
        dyn_f1 += f1_score(&d.predicted_ids, &m.gold_ids).f1;
        fixed_f1 += f1_score(&f.predicted_ids, &m.gold_ids).f1;
    }
    let n = set.len() as f64;
    let (fixed_f1, dyn_f1, frac) = (fixed_f1 / n, dyn_f1 / n, within as f64 / n);
    let msg = format!(
        "comp-ins-rn: {within}/{} stop within one of the gold size; fixed F1 {fixed_f1:.4}, dynamic F1 {dyn_f1:.4} (training {trained:.0} s)",
        set.len()
    );
    if frac >= 0.8 && fixed_f1 >= dyn_f1 - 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 7. Hardness ordering

fn hardness_ordering() -> Outcome {
    let corpus = synthetic_corpus(&SyntheticCorpusConfig {
        num_scenarios: 400,
        seed: 13,
        ..Default::default()
    });
    let provider = StubHashProvider::new(OVERFIT_DIM, 0);
    let spec = SplitSpec::new(SplitCounts { train: 500, dev: 0, test: 100 }, 8);
    let mut f1 = Vec::new();
    let mut details = Vec::new();
    for condition in [MixCondition::W18, MixCondition::Hybrid(4)] {
        let [train_set, _, test_set] = generate_splits(&corpus, condition, &spec, 24).map_err(|e| e.to_string())?;
        let mut model = ModelConfig::new(Head::CompInsRn, provider.spec(), OVERFIT_DIM);
        model.termination = Termination::Fixed;
        let params = train(&train_set, &[], &provider, &TrainConfig::new(model), None, |_| {})
            .map_err(|e| e.to_string())?
            .last;
        let model_f1 = evaluate(&test_set, Method::Model(&params), Termination::Fixed, &provider, 0, None)
            .map_err(|e| e.to_string())?
            .macro_f1;
        let unif = evaluate(&test_set, Method::Unif, Termination::Fixed, &provider, 0, None)
            .map_err(|e| e.to_string())?
            .macro_f1;
        details.push(format!("{condition} {model_f1:.4} (unif {unif:.4})"));
        f1.push(model_f1);
    }
    let msg = format!("held-out comp-ins-rn F1: {}", details.join(", "));
    if f1[0] >= f1[1] - 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 8. UNIF expectation

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn unif_expectation() -> Outcome {
    let (pool, gold_n) = (15usize, 4usize);
    let mut m = Mixture::adhoc(
        Sentence::new("q", "query"),
        (0..pool).map(|i| Sentence::new(format!("c{i}"), format!("word{i}"))).collect(),
    );
    m.gold_ids = (0..gold_n).map(|i| format!("c{}", 3 * i + 1)).collect();
    m.gold_order = m.gold_ids.iter().enumerate().map(|(i, id)| (id.clone(), i + 1)).collect();
    let budget = gold_n;
    let exact: f64 = (0..=budget as u64)
        .map(|k| {
            let p = binomial(gold_n as u64, k) * binomial((pool - gold_n) as u64, budget as u64 - k) / binomial(pool as u64, budget as u64);
            let (prec, rec) = (k as f64 / budget as f64, k as f64 / gold_n as f64);
            let f1 = if k == 0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
            p * f1
        })
        .sum();
    let runs = 10_000;
    let mut total = 0.0;
    for seed in 0..runs {
        let res = baseline_unif(&m, budget, &mut rng(seed)).map_err(|e| e.to_string())?;
        total += f1_score(&res.predicted_ids, &m.gold_ids).f1;
    }
    let measured = total / runs as f64;
    let msg = format!("measured {measured:.4} vs exact {exact:.4} over {runs} runs");
    if (measured - exact).abs() <= 0.01 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "metric oracles", limit_s: 10.0, run: metric_oracles },
        Criterion { id: 2, name: "loss oracle", limit_s: 5.0, run: loss_oracle },
        Criterion { id: 3, name: "gradient check", limit_s: 60.0, run: gradient_check },
        Criterion { id: 4, name: "structural invariants", limit_s: 10.0, run: structural_invariants },
        Criterion { id: 5, name: "generator invariants", limit_s: 30.0, run: generator_invariants },
        Criterion { id: 6, name: "overfit", limit_s: 900.0, run: overfit },
        Criterion { id: 7, name: "hardness ordering", limit_s: 1200.0, run: hardness_ordering },
        Criterion { id: 8, name: "unif expectation", limit_s: 30.0, run: unif_expectation },
        Criterion { id: 9, name: "dynamic termination", limit_s: 300.0, run: dynamic_termination },
    ];
    let only: Option<HashSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failures = 0;
    let mut ran = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) if secs <= c.limit_s => (true, d),
            Ok(d) => (false, format!("{d}; took {secs:.1} s, limit {:.0} s", c.limit_s)),
            Err(d) => (false, d),
        };
        failures += usize::from(!ok);
        println!("{} [{}] {}: {detail} ({secs:.1} s)", if ok { "PASS" } else { "FAIL" }, c.id, c.name);
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failures);
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

//! Candidate scoring heads.
//!
//! Shapes follow a row convention: scenario sentence vectors are stacked
//! into a `K × h` matrix `T`, candidates into `J × h` matrix `C`.
//!
//! * COMP: bilinear attention `α = softmax_k(C U Tᵀ)`, context `A = α T`, and
//!   a linear read-out over `[A ; A ⊙ C]`.
//! * COMP-INS: insertion points `M` (`K+1` rows) and `z = M W [A ; C]ᵀ`.
//! * COMP-INS-RN: `z + r` where `r_j` is a linear read-out of the mean over
//!   scenario sentences of the word-pair bilinear contractions.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEncoding;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `h × h` bilinear attention map.
    pub u: Array2<f64>,
    /// `2h × 1` read-out over `[context ; context ⊙ candidate]`.
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

impl AttentionParams {
    pub fn zeros(h: usize) -> Self {
        AttentionParams {
            u: Array2::zeros((h, h)),
            out_w: Array2::zeros((2 * h, 1)),
            out_b: Array2::zeros((1, 1)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionParams {
    /// `h × 2h` map scoring insertion point against `[a_j ; c_j]`.
    pub w: Array2<f64>,
}

impl InsertionParams {
    pub fn zeros(h: usize) -> Self {
        InsertionParams {
            w: Array2::zeros((h, 2 * h)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationParams {
    /// `d × l × d` contraction: `v_l = w_aᵀ V[:, l, :] w_b`.
    pub v: Array3<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

impl RelationParams {
    pub fn zeros(d: usize, l: usize) -> Self {
        RelationParams {
            v: Array3::zeros((d, l, d)),
            out_w: Array2::zeros((l, 1)),
            out_b: Array2::zeros((1, 1)),
        }
    }

    pub fn word_dim(&self) -> usize {
        self.v.dim().0
    }

    pub fn width(&self) -> usize {
        self.v.dim().1
    }

    /// Row `l·d + a`, column `b` holds `V[a, l, b]`.
    pub(crate) fn stacked(&self) -> Array2<f64> {
        let (d, l, _) = self.v.dim();
        let mut m = Array2::zeros((l * d, d));
        for a in 0..d {
            for k in 0..l {
                for b in 0..d {
                    m[[k * d + a, b]] = self.v[[a, k, b]];
                }
            }
        }
        m
    }

    pub(crate) fn unstack(stacked: &Array2<f64>, d: usize, l: usize) -> Array3<f64> {
        let mut v = Array3::zeros((d, l, d));
        for a in 0..d {
            for k in 0..l {
                for b in 0..d {
                    v[[a, k, b]] = stacked[[k * d + a, b]];
                }
            }
        }
        v
    }
}

/// Feed-forward same-scenario classifier over `[a ; b ; a ⊙ b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    /// Average both argument orders.
    #[serde(default)]
    pub symmetric: bool,
}

impl PairwiseParams {
    pub fn zeros(h: usize, hidden: usize) -> Self {
        PairwiseParams {
            w1: Array2::zeros((3 * h, hidden)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, 1)),
            b2: Array2::zeros((1, 1)),
            symmetric: false,
        }
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub(crate) struct AttentionVars {
    pub u: Var,
    pub out_w: Var,
    pub out_b: Var,
}

pub(crate) struct InsertionVars {
    pub w: Var,
}

pub(crate) struct RelationVars {
    pub stacked: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub word_dim: usize,
    pub width: usize,
}

pub(crate) struct PairwiseVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub symmetric: bool,
}

pub(crate) struct CompNodes {
    pub alpha: Var,
    pub context: Var,
    /// `J × 1`.
    pub logits: Var,
}

pub(crate) fn comp_nodes(g: &mut Graph, t: Var, c: Var, att: &AttentionVars) -> CompNodes {
    let cu = g.matmul(c, att.u);
    let tt = g.transpose(t);
    let logits = g.matmul(cu, tt);
    let alpha = g.softmax_rows(logits);
    let context = g.matmul(alpha, t);
    let inter = g.mul(context, c);
    let feats = g.concat_cols(&[context, inter]);
    let lin = g.matmul(feats, att.out_w);
    let logits = g.add_row(lin, att.out_b);
    CompNodes {
        alpha,
        context,
        logits,
    }
}

/// `(K+1) × K` averaging matrix mapping scenario rows to insertion points.
pub fn insertion_matrix(k: usize) -> Array2<f64> {
    let mut p = Array2::zeros((k + 1, k));
    if k == 0 {
        return p;
    }
    p[[0, 0]] = 1.0;
    p[[k, k - 1]] = 1.0;
    for slot in 1..k {
        p[[slot, slot - 1]] = 0.5;
        p[[slot, slot]] = 0.5;
    }
    p
}

/// `(K+1) × J` insertion scores.
pub(crate) fn z_nodes(g: &mut Graph, t: Var, context: Var, c: Var, ins: &InsertionVars) -> Var {
    let k = g.value(t).nrows();
    let p = g.leaf(insertion_matrix(k));
    let m = g.matmul(p, t);
    let ac = g.concat_cols(&[context, c]);
    let mw = g.matmul(m, ins.w);
    let act = g.transpose(ac);
    g.matmul(mw, act)
}

/// `J × 1` relation scores from pooled word vectors (`K × d` and `J × d`).
pub(crate) fn relation_nodes(g: &mut Graph, t_pool: Var, c_pool: Var, rel: &RelationVars) -> Var {
    // Σ_{a,b} w_aᵀ V w_b = (Σ_a w_a)ᵀ V (Σ_b w_b), and the mean over k of
    // bilinear forms is the bilinear form of the mean.
    let t_mean = g.mean_rows(t_pool);
    let t_col = g.transpose(t_mean);
    let q = g.matmul(rel.stacked, t_col);
    let per_l = g.reshape(q, (rel.width, rel.word_dim));
    let per_l_t = g.transpose(per_l);
    let p = g.matmul(c_pool, per_l_t);
    let lin = g.matmul(p, rel.out_w);
    g.add_row(lin, rel.out_b)
}

/// `n × 1` logits for row-aligned pairs.
pub(crate) fn pairwise_logit_nodes(g: &mut Graph, a: Var, b: Var, pw: &PairwiseVars) -> Var {
    let one = |g: &mut Graph, a: Var, b: Var| {
        let ab = g.mul(a, b);
        let x = g.concat_cols(&[a, b, ab]);
        let xw = g.matmul(x, pw.w1);
        let pre = g.add_row(xw, pw.b1);
        let hid = g.tanh(pre);
        let o = g.matmul(hid, pw.w2);
        g.add_row(o, pw.b2)
    };
    let ab = one(g, a, b);
    if pw.symmetric {
        let ba = one(g, b, a);
        let s = g.add(ab, ba);
        g.scale(s, 0.5)
    } else {
        ab
    }
}

/// Pools a sentence's word vectors for the relation network: mean when
/// `normalize` is set, plain sum otherwise.
pub fn pool_words(word_vectors: &Array2<f64>, normalize: bool) -> Array1<f64> {
    let sum = word_vectors.sum_axis(Axis(0));
    if normalize {
        sum / word_vectors.nrows() as f64
    } else {
        sum
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn stack(vectors: &[&Array1<f64>], width: usize, what: &str) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((vectors.len(), width));
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != width {
            return Err(Error::Dimension(format!(
                "{what} vector {i} has width {}, expected {width}",
                v.len()
            )));
        }
        m.row_mut(i).assign(*v);
    }
    Ok(m)
}

fn check_nonempty(scenario: usize, candidates: usize) -> Result<()> {
    if scenario == 0 {
        return Err(Error::Precondition("scenario-in-construction is empty".into()));
    }
    if candidates == 0 {
        return Err(Error::Precondition("candidate set is empty".into()));
    }
    Ok(())
}

fn sentence_matrix(encs: &[&SentenceEncoding], h: usize, what: &str) -> Result<Array2<f64>> {
    let vs: Vec<&Array1<f64>> = encs.iter().map(|e| &e.sentence_vector).collect();
    stack(&vs, h, what)
}

fn pooled_matrix(encs: &[&SentenceEncoding], d: usize, normalize: bool, what: &str) -> Result<Array2<f64>> {
    let pooled: Vec<Array1<f64>> = encs
        .iter()
        .map(|e| {
            if e.word_vectors.nrows() == 0 {
                Err(Error::Precondition(format!("{what} sentence has no word vectors")))
            } else {
                Ok(pool_words(&e.word_vectors, normalize))
            }
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Array1<f64>> = pooled.iter().collect();
    stack(&refs, d, what)
}

pub(crate) fn bind_attention(g: &mut Graph, p: &AttentionParams) -> AttentionVars {
    AttentionVars {
        u: g.leaf(p.u.clone()),
        out_w: g.leaf(p.out_w.clone()),
        out_b: g.leaf(p.out_b.clone()),
    }
}

pub(crate) fn bind_insertion(g: &mut Graph, p: &InsertionParams) -> InsertionVars {
    InsertionVars { w: g.leaf(p.w.clone()) }
}

pub(crate) fn bind_relation(g: &mut Graph, p: &RelationParams) -> RelationVars {
    RelationVars {
        stacked: g.leaf(p.stacked()),
        out_w: g.leaf(p.out_w.clone()),
        out_b: g.leaf(p.out_b.clone()),
        word_dim: p.word_dim(),
        width: p.width(),
    }
}

pub(crate) fn bind_pairwise(g: &mut Graph, p: &PairwiseParams) -> PairwiseVars {
    PairwiseVars {
        w1: g.leaf(p.w1.clone()),
        b1: g.leaf(p.b1.clone()),
        w2: g.leaf(p.w2.clone()),
        b2: g.leaf(p.b2.clone()),
        symmetric: p.symmetric,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompScores {
    /// `J × K` attention of each candidate over the scenario sentences.
    pub alpha: Array2<f64>,
    /// `J × h` attention context vectors `a_j`.
    pub context: Array2<f64>,
    pub logits: Array1<f64>,
    /// Softmax of `logits` over candidates.
    pub probs: Array1<f64>,
}

pub fn comp_scores(
    scenario: &[&SentenceEncoding],
    candidates: &[&SentenceEncoding],
    att: &AttentionParams,
) -> Result<CompScores> {
    check_nonempty(scenario.len(), candidates.len())?;
    let h = att.hidden();
    let mut g = Graph::new();
    let t = g.leaf(sentence_matrix(scenario, h, "scenario")?);
    let c = g.leaf(sentence_matrix(candidates, h, "candidate")?);
    let vars = bind_attention(&mut g, att);
    let nodes = comp_nodes(&mut g, t, c, &vars);
    let logits = g.value(nodes.logits).column(0).to_owned();
    let probs = Array1::from(softmax(logits.as_slice().expect("contiguous")));
    Ok(CompScores {
        alpha: g.value(nodes.alpha).clone(),
        context: g.value(nodes.context).clone(),
        logits,
        probs,
    })
}

/// Insertion point vectors: the first and last sentence at the two ends,
/// and the average of each adjacent pair in between.
pub fn insertion_points(scenario_vectors: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
    let k = scenario_vectors.len();
    if k == 0 {
        return Err(Error::Precondition("no insertion points for an empty scenario".into()));
    }
    let mut out = Vec::with_capacity(k + 1);
    out.push(scenario_vectors[0].clone());
    for i in 1..k {
        out.push((&scenario_vectors[i - 1] + &scenario_vectors[i]) * 0.5);
    }
    out.push(scenario_vectors[k - 1].clone());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    /// `(K+1) × J` insertion scores.
    pub z: Array2<f64>,
    /// Per-candidate relation scores, when a relation network is present.
    pub r: Option<Array1<f64>>,
    /// `z` with `r` broadcast over slots (equal to `z` without `r`).
    pub fused: Array2<f64>,
}

impl ScoreGrid {
    pub fn new(z: Array2<f64>, r: Option<Array1<f64>>) -> Self {
        let fused = match &r {
            Some(r) => &z + &r.view().insert_axis(Axis(0)),
            None => z.clone(),
        };
        ScoreGrid { z, r, fused }
    }

    pub fn slots(&self) -> usize {
        self.fused.nrows()
    }

    /// Best slot and score per candidate; ties go to the lowest slot.
    pub fn best_slots(&self) -> Vec<SlotScore> {
        self.fused
            .columns()
            .into_iter()
            .map(|col| {
                let v: Vec<f64> = col.to_vec();
                let slot = argmax_first(&v).expect("at least one slot");
                SlotScore { slot, score: v[slot] }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotScore {
    /// 0-based insertion slot: slot `k` places the candidate before the
    /// `k`-th scenario sentence, slot `K` appends it.
    pub slot: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertionScores {
    pub grid: ScoreGrid,
    pub best: Vec<SlotScore>,
    pub context: Array2<f64>,
}

impl InsertionScores {
    /// Candidate with the highest score; ties go to the lowest index.
    pub fn choice(&self) -> (usize, SlotScore) {
        let scores: Vec<f64> = self.best.iter().map(|s| s.score).collect();
        let j = argmax_first(&scores).expect("at least one candidate");
        (j, self.best[j])
    }
}

pub fn comp_ins_scores(
    scenario: &[&SentenceEncoding],
    candidates: &[&SentenceEncoding],
    att: &AttentionParams,
    ins: &InsertionParams,
) -> Result<InsertionScores> {
    insertion_scores(scenario, candidates, att, ins, None)
}

pub fn comp_ins_rn_scores(
    scenario: &[&SentenceEncoding],
    candidates: &[&SentenceEncoding],
    att: &AttentionParams,
    ins: &InsertionParams,
    rel: &RelationParams,
    normalize: bool,
) -> Result<InsertionScores> {
    insertion_scores(scenario, candidates, att, ins, Some((rel, normalize)))
}

fn insertion_scores(
    scenario: &[&SentenceEncoding],
    candidates: &[&SentenceEncoding],
    att: &AttentionParams,
    ins: &InsertionParams,
    rel: Option<(&RelationParams, bool)>,
) -> Result<InsertionScores> {
    check_nonempty(scenario.len(), candidates.len())?;
    let h = att.hidden();
    if ins.w.dim() != (h, 2 * h) {
        return Err(Error::Dimension(format!(
            "insertion map is {:?}, expected ({h}, {})",
            ins.w.dim(),
            2 * h
        )));
    }
    let mut g = Graph::new();
    let t = g.leaf(sentence_matrix(scenario, h, "scenario")?);
    let c = g.leaf(sentence_matrix(candidates, h, "candidate")?);
    let av = bind_attention(&mut g, att);
    let iv = bind_insertion(&mut g, ins);
    let comp = comp_nodes(&mut g, t, c, &av);
    let z = z_nodes(&mut g, t, comp.context, c, &iv);
    let r = match rel {
        Some((rel, normalize)) => Some(relation_scores(scenario, candidates, rel, normalize)?),
        None => None,
    };
    let grid = ScoreGrid::new(g.value(z).clone(), r);
    let best = grid.best_slots();
    Ok(InsertionScores {
        grid,
        best,
        context: g.value(comp.context).clone(),
    })
}

pub fn relation_scores(
    scenario: &[&SentenceEncoding],
    candidates: &[&SentenceEncoding],
    rel: &RelationParams,
    normalize: bool,
) -> Result<Array1<f64>> {
    check_nonempty(scenario.len(), candidates.len())?;
    let d = rel.word_dim();
    let mut g = Graph::new();
    let tp = g.leaf(pooled_matrix(scenario, d, normalize, "scenario")?);
    let cp = g.leaf(pooled_matrix(candidates, d, normalize, "candidate")?);
    let vars = bind_relation(&mut g, rel);
    let r = relation_nodes(&mut g, tp, cp, &vars);
    Ok(g.value(r).column(0).to_owned())
}

pub fn pairwise_prob(a: &SentenceEncoding, b: &SentenceEncoding, params: &PairwiseParams) -> Result<f64> {
    let h = params.w1.nrows() / 3;
    pairwise_prob_vectors(&a.sentence_vector, &b.sentence_vector, params).map_err(|e| match e {
        Error::Dimension(m) => Error::Dimension(format!("{m} (pairwise expects width {h})")),
        other => other,
    })
}

pub(crate) fn pairwise_prob_vectors(a: &Array1<f64>, b: &Array1<f64>, params: &PairwiseParams) -> Result<f64> {
    let h = params.w1.nrows() / 3;
    let mut g = Graph::new();
    let av = g.leaf(stack(&[a], h, "first")?);
    let bv = g.leaf(stack(&[b], h, "second")?);
    let vars = bind_pairwise(&mut g, params);
    let logit = pairwise_logit_nodes(&mut g, av, bv, &vars);
    Ok(sigmoid(g.scalar(logit)))
}

//! Model configuration, the full parameter set and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{bind_encoder, encode_on_graph, EncoderParams, EncoderVars, ProviderSpec, SentenceEncoding};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scoring::{
    bind_attention, bind_insertion, bind_pairwise, bind_relation, comp_nodes, relation_nodes, uniform,
    z_nodes, AttentionParams, AttentionVars, InsertionParams, InsertionVars, PairwiseParams, PairwiseVars,
    RelationParams, RelationVars,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Comp,
    CompIns,
    CompInsRn,
    Pairwise,
}

impl Head {
    pub fn has_insertion(self) -> bool {
        matches!(self, Head::CompIns | Head::CompInsRn)
    }

    pub fn has_relation(self) -> bool {
        self == Head::CompInsRn
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Comp => "comp",
            Head::CompIns => "comp-ins",
            Head::CompInsRn => "comp-ins-rn",
            Head::Pairwise => "pairwise",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "comp" => Ok(Head::Comp),
            "comp-ins" => Ok(Head::CompIns),
            "comp-ins-rn" => Ok(Head::CompInsRn),
            "pairwise" => Ok(Head::Pairwise),
            other => Err(Error::Config(format!(
                "unknown head `{other}` (expected comp, comp-ins, comp-ins-rn or pairwise)"
            ))),
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Select as many sentences as the target scenario has.
    #[default]
    Fixed,
    /// Stop when the learned end-of-scenario candidate wins.
    Dynamic,
}

impl std::str::FromStr for Termination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Termination::Fixed),
            "dynamic" => Ok(Termination::Dynamic),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected fixed or dynamic)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: Head,
    /// Word vector width `d`.
    pub word_dim: usize,
    /// Sentence vector width `h` (both LSTM directions together).
    pub hidden: usize,
    /// Relation network width `l`.
    pub relation_width: usize,
    pub pairwise_hidden: usize,
    pub rn_normalize: bool,
    pub pairwise_symmetric: bool,
    pub termination: Termination,
    pub provider: ProviderSpec,
}

impl ModelConfig {
    pub fn new(head: Head, provider: ProviderSpec, hidden: usize) -> Self {
        ModelConfig {
            head,
            word_dim: provider.dim(),
            hidden,
            relation_width: hidden,
            pairwise_hidden: hidden,
            rn_normalize: true,
            pairwise_symmetric: false,
            termination: Termination::Fixed,
            provider,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::Config(format!(
                "need d > 0 and even h > 0 (got d={}, h={})",
                self.word_dim, self.hidden
            )));
        }
        if self.word_dim != self.provider.dim() {
            return Err(Error::Config(format!(
                "word_dim {} differs from provider dim {}",
                self.word_dim,
                self.provider.dim()
            )));
        }
        if self.head.has_relation() && self.relation_width == 0 {
            return Err(Error::Config("relation width must be positive".into()));
        }
        if self.head == Head::Pairwise && self.termination == Termination::Dynamic {
            return Err(Error::Config("the pairwise baseline has no stopping model".into()));
        }
        Ok(())
    }
}

/// Every trainable array of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub attention: Option<AttentionParams>,
    pub insertion: Option<InsertionParams>,
    pub relation: Option<RelationParams>,
    pub pairwise: Option<PairwiseParams>,
    /// `1 × d` word vector of the end-of-scenario pseudo-sentence.
    pub end_token: Option<Array2<f64>>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.word_dim, config.hidden);
        let head = config.head;
        let mut pairwise = (head == Head::Pairwise).then(|| PairwiseParams::zeros(h, config.pairwise_hidden));
        if let Some(p) = &mut pairwise {
            p.symmetric = config.pairwise_symmetric;
        }
        Ok(ModelParams {
            encoder: EncoderParams::zeros(d, h)?,
            attention: (head != Head::Pairwise).then(|| AttentionParams::zeros(h)),
            insertion: head.has_insertion().then(|| InsertionParams::zeros(h)),
            relation: head.has_relation().then(|| RelationParams::zeros(d, config.relation_width)),
            pairwise,
            end_token: (config.termination == Termination::Dynamic).then(|| Array2::zeros((1, d))),
            config,
        })
    }

    /// Uniform initialization scaled by fan-in; the attention read-out is zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (p.config.word_dim, p.config.hidden);
        p.encoder = EncoderParams::random(d, h, &mut rng)?;
        let hb = 1.0 / (h as f64).sqrt();
        if let Some(a) = &mut p.attention {
            // The read-out starts at zero so the initial distribution is uniform.
            a.u = uniform(&mut rng, (h, h), hb);
        }
        if let Some(i) = &mut p.insertion {
            i.w = uniform(&mut rng, (h, 2 * h), hb);
        }
        if let Some(r) = &mut p.relation {
            let db = 1.0 / d as f64;
            r.v.mapv_inplace(|_| rng.gen_range(-db..db));
            r.out_w = uniform(&mut rng, (r.width(), 1), 1.0 / (r.width() as f64).sqrt());
        }
        if let Some(pw) = &mut p.pairwise {
            let ph = p.config.pairwise_hidden;
            pw.w1 = uniform(&mut rng, (3 * h, ph), 1.0 / (3.0 * h as f64).sqrt());
            pw.w2 = uniform(&mut rng, (ph, 1), 1.0 / (ph as f64).sqrt());
        }
        if let Some(e) = &mut p.end_token {
            *e = uniform(&mut rng, (1, d), 1.0 / (d as f64).sqrt());
        }
        Ok(p)
    }

    /// Visits every array in a fixed order with a stable name.
    pub fn visit(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        let mut plain = |name: &str, a: &Array2<f64>| {
            f(name, a.shape(), a.as_slice().expect("standard layout"))
        };
        let enc = &self.encoder;
        plain("encoder.forward.wx", &enc.forward.wx);
        plain("encoder.forward.wh", &enc.forward.wh);
        plain("encoder.forward.b", &enc.forward.b);
        plain("encoder.backward.wx", &enc.backward.wx);
        plain("encoder.backward.wh", &enc.backward.wh);
        plain("encoder.backward.b", &enc.backward.b);
        if let Some(a) = &self.attention {
            plain("attention.u", &a.u);
            plain("attention.out_w", &a.out_w);
            plain("attention.out_b", &a.out_b);
        }
        if let Some(i) = &self.insertion {
            plain("insertion.w", &i.w);
        }
        if let Some(r) = &self.relation {
            plain("relation.out_w", &r.out_w);
            plain("relation.out_b", &r.out_b);
        }
        if let Some(p) = &self.pairwise {
            plain("pairwise.w1", &p.w1);
            plain("pairwise.b1", &p.b1);
            plain("pairwise.w2", &p.w2);
            plain("pairwise.b2", &p.b2);
        }
        if let Some(e) = &self.end_token {
            plain("end_token", e);
        }
        drop(plain);
        if let Some(r) = &self.relation {
            f("relation.v", r.v.shape(), r.v.as_slice().expect("standard layout"));
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        let mut plain = |name: &str, a: &mut Array2<f64>| f(name, a.as_slice_mut().expect("standard layout"));
        let enc = &mut self.encoder;
        plain("encoder.forward.wx", &mut enc.forward.wx);
        plain("encoder.forward.wh", &mut enc.forward.wh);
        plain("encoder.forward.b", &mut enc.forward.b);
        plain("encoder.backward.wx", &mut enc.backward.wx);
        plain("encoder.backward.wh", &mut enc.backward.wh);
        plain("encoder.backward.b", &mut enc.backward.b);
        if let Some(a) = &mut self.attention {
            plain("attention.u", &mut a.u);
            plain("attention.out_w", &mut a.out_w);
            plain("attention.out_b", &mut a.out_b);
        }
        if let Some(i) = &mut self.insertion {
            plain("insertion.w", &mut i.w);
        }
        if let Some(r) = &mut self.relation {
            plain("relation.out_w", &mut r.out_w);
            plain("relation.out_b", &mut r.out_b);
        }
        if let Some(p) = &mut self.pairwise {
            plain("pairwise.w1", &mut p.w1);
            plain("pairwise.b1", &mut p.b1);
            plain("pairwise.w2", &mut p.w2);
            plain("pairwise.b2", &mut p.b2);
        }
        if let Some(e) = &mut self.end_token {
            plain("end_token", e);
        }
        drop(plain);
        if let Some(r) = &mut self.relation {
            f("relation.v", r.v.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _, _| out.push(n.to_string()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, v| n += v.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Sentence encoding of the end-of-scenario pseudo-sentence.
    pub fn end_encoding(&self) -> Option<SentenceEncoding> {
        let e = self.end_token.as_ref()?;
        crate::encoder::encode_sentence(e, &self.encoder).ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = BTreeMap::new();
        self.visit(|name, shape, data| {
            arrays.insert(
                name.to_string(),
                NamedArray {
                    shape: shape.to_vec(),
                    data: data.to_vec(),
                },
            );
        });
        let ck = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            arrays,
        };
        let text = serde_json::to_string(&ck)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: CheckpointFile = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let mut p = Self::zeros(ck.config)?;
        let mut shapes = BTreeMap::new();
        p.visit(|n, s, _| {
            shapes.insert(n.to_string(), s.to_vec());
        });
        if shapes.len() != ck.arrays.len() || shapes.keys().any(|k| !ck.arrays.contains_key(k)) {
            return Err(Error::Config(format!(
                "checkpoint arrays {:?} do not match the configured head (expected {:?})",
                ck.arrays.keys().collect::<Vec<_>>(),
                shapes.keys().collect::<Vec<_>>()
            )));
        }
        let mut err = None;
        p.visit_mut(|name, dst| {
            let src = &ck.arrays[name];
            if src.shape != shapes[name] || src.data.len() != dst.len() {
                err.get_or_insert_with(|| {
                    Error::Dimension(format!(
                        "array `{name}` has shape {:?}, expected {:?}",
                        src.shape, shapes[name]
                    ))
                });
            } else {
                dst.copy_from_slice(&src.data);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(p),
        }
    }
}

const CHECKPOINT_FORMAT: &str = "scenario-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct NamedArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    arrays: BTreeMap<String, NamedArray>,
}

/// Flat gradients keyed like `ModelParams::visit`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub grads: BTreeMap<String, Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        let mut grads = BTreeMap::new();
        p.visit(|n, _, v| {
            grads.insert(n.to_string(), vec![0.0; v.len()]);
        });
        ParamGrads { grads }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (k, v) in &other.grads {
            let dst = self.grads.entry(k.clone()).or_insert_with(|| vec![0.0; v.len()]);
            for (d, s) in dst.iter_mut().zip(v) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.grads.values_mut() {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }
}

enum Layout {
    Plain,
    Stacked { d: usize, l: usize },
}

pub(crate) struct BoundModel {
    pub encoder: EncoderVars,
    pub attention: Option<AttentionVars>,
    pub insertion: Option<InsertionVars>,
    pub relation: Option<RelationVars>,
    pub pairwise: Option<PairwiseVars>,
    pub end_token: Option<Var>,
    pub hidden_per_dir: usize,
    registry: Vec<(String, Var, Layout)>,
}

impl BoundModel {
    pub fn bind(g: &mut Graph, p: &ModelParams) -> Self {
        let encoder = bind_encoder(g, &p.encoder);
        let attention = p.attention.as_ref().map(|a| bind_attention(g, a));
        let insertion = p.insertion.as_ref().map(|i| bind_insertion(g, i));
        let relation = p.relation.as_ref().map(|r| bind_relation(g, r));
        let pairwise = p.pairwise.as_ref().map(|pw| bind_pairwise(g, pw));
        let end_token = p.end_token.as_ref().map(|e| g.leaf(e.clone()));

        let mut registry = Vec::new();
        let mut reg = |name: &str, v: Var| registry.push((name.to_string(), v, Layout::Plain));
        for (dir, l) in [("forward", &encoder.forward), ("backward", &encoder.backward)] {
            reg(&format!("encoder.{dir}.wx"), l.wx);
            reg(&format!("encoder.{dir}.wh"), l.wh);
            reg(&format!("encoder.{dir}.b"), l.b);
        }
        if let Some(a) = &attention {
            reg("attention.u", a.u);
            reg("attention.out_w", a.out_w);
            reg("attention.out_b", a.out_b);
        }
        if let Some(i) = &insertion {
            reg("insertion.w", i.w);
        }
        if let Some(r) = &relation {
            reg("relation.out_w", r.out_w);
            reg("relation.out_b", r.out_b);
        }
        if let Some(pw) = &pairwise {
            reg("pairwise.w1", pw.w1);
            reg("pairwise.b1", pw.b1);
            reg("pairwise.w2", pw.w2);
            reg("pairwise.b2", pw.b2);
        }
        if let Some(e) = end_token {
            reg("end_token", e);
        }
        if let Some(r) = &relation {
            registry.push((
                "relation.v".into(),
                r.stacked,
                Layout::Stacked { d: r.word_dim, l: r.width },
            ));
        }
        BoundModel {
            encoder,
            attention,
            insertion,
            relation,
            pairwise,
            end_token,
            hidden_per_dir: p.encoder.forward.hidden(),
            registry,
        }
    }

    pub fn gradients(&self, grads: &Gradients) -> ParamGrads {
        let mut out = BTreeMap::new();
        for (name, var, layout) in &self.registry {
            let Some(g) = grads.get(*var) else {
                continue;
            };
            let flat = match layout {
                Layout::Plain => g.iter().copied().collect(),
                Layout::Stacked { d, l } => RelationParams::unstack(g, *d, *l).iter().copied().collect(),
            };
            out.insert(name.clone(), flat);
        }
        ParamGrads { grads: out }
    }

    /// `1 × h` encoding of the end-of-scenario pseudo-sentence.
    pub fn end_sentence(&self, g: &mut Graph) -> Option<Var> {
        let e = self.end_token?;
        Some(encode_on_graph(g, e, &self.encoder, self.hidden_per_dir, false).sentence)
    }
}

/// Inputs for one decision step. `c` and `c_pool` include the END row when
/// it participates.
pub(crate) struct StepInputs {
    /// `K × h` scenario sentence vectors, in scenario order.
    pub t: Var,
    /// `J × h` candidate sentence vectors.
    pub c: Var,
    /// `K × d` pooled word vectors (relation head only).
    pub t_pool: Option<Var>,
    pub c_pool: Option<Var>,
}

pub(crate) enum HeadOutput {
    /// `J × 1` candidate logits.
    Logits(Var),
    /// `(K+1) × J` slot × candidate scores (with `r` added when present).
    Grid(Var),
}

pub(crate) fn head_forward(g: &mut Graph, m: &BoundModel, x: &StepInputs) -> HeadOutput {
    let att = m.attention.as_ref().expect("trainable heads carry attention");
    let comp = comp_nodes(g, x.t, x.c, att);
    let Some(ins) = &m.insertion else {
        return HeadOutput::Logits(comp.logits);
    };
    let z = z_nodes(g, x.t, comp.context, x.c, ins);
    match &m.relation {
        Some(rel) => {
            let r = relation_nodes(
                g,
                x.t_pool.expect("relation head needs pooled words"),
                x.c_pool.expect("relation head needs pooled words"),
                rel,
            );
            let rt = g.transpose(r);
            HeadOutput::Grid(g.add_row(z, rt))
        }
        None => HeadOutput::Grid(z),
    }
}

/// Stacks rows of constant vectors into one leaf.
pub(crate) fn rows_leaf(g: &mut Graph, rows: &[ndarray::ArrayView1<f64>], width: usize) -> Var {
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    g.leaf(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(head: Head) -> ModelConfig {
        ModelConfig {
            relation_width: 3,
            ..ModelConfig::new(head, ProviderSpec::StubHash { dim: 4, seed: 0, vocab_hash: None }, 6)
        }
    }

    #[test]
    fn heads_carry_the_right_blocks() {
        let p = ModelParams::init(config(Head::Comp), 0).unwrap();
        assert!(p.insertion.is_none() && p.relation.is_none() && p.end_token.is_none());
        let mut c = config(Head::CompInsRn);
        c.termination = Termination::Dynamic;
        let p = ModelParams::init(c, 0).unwrap();
        assert!(p.insertion.is_some() && p.relation.is_some() && p.end_token.is_some());
        assert_eq!(p.relation.as_ref().unwrap().v.dim(), (4, 3, 4));
        let mut bad = config(Head::Pairwise);
        bad.termination = Termination::Dynamic;
        assert!(matches!(ModelParams::zeros(bad), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for head in [Head::Comp, Head::CompIns, Head::CompInsRn, Head::Pairwise] {
            let p = ModelParams::init(config(head), 3).unwrap();
            let path = dir.path().join(format!("{head}.json"));
            p.save(&path).unwrap();
            assert_eq!(ModelParams::load(&path).unwrap(), p);
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::init(config(Head::Comp), 3).unwrap();
        let path = dir.path().join("c.json");
        p.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"head\":\"comp\"", "\"head\":\"comp-ins\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn names_are_stable_and_unique() {
        let mut c = config(Head::CompInsRn);
        c.termination = Termination::Dynamic;
        let p = ModelParams::init(c, 0).unwrap();
        let names = p.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"relation.v".to_string()));
        assert!(p.all_finite());
    }
}

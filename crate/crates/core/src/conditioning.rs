//! Clinical descriptors, structured prompts and the learned condition
//! encoders (class table plus a small self-attention text encoder).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::layers::{Embedding, Linear};
use crate::nn::{Element, Graph, ParamStore, Tensor, Var};

/// Combined flexion / version class of the uterus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OrientationClass {
    #[serde(rename = "AF&AV")]
    AfAv,
    #[serde(rename = "RF&AV")]
    RfAv,
    #[serde(rename = "AF&RV")]
    AfRv,
    #[serde(rename = "RF&RV")]
    RfRv,
}

impl OrientationClass {
    pub const ALL: [OrientationClass; 4] = [Self::AfAv, Self::RfAv, Self::AfRv, Self::RfRv];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match Self::ALL.get(i) {
            Some(c) => Ok(*c),
            None => invalid!("class index {i} outside 0..4"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AfAv => "AF&AV",
            Self::RfAv => "RF&AV",
            Self::AfRv => "AF&RV",
            Self::RfRv => "RF&RV",
        }
    }

    pub fn anteflexed(self) -> bool {
        matches!(self, Self::AfAv | Self::AfRv)
    }

    pub fn anteverted(self) -> bool {
        matches!(self, Self::AfAv | Self::RfAv)
    }

    pub fn from_parts(anteflexed: bool, anteverted: bool) -> Self {
        match (anteflexed, anteverted) {
            (true, true) => Self::AfAv,
            (false, true) => Self::RfAv,
            (true, false) => Self::AfRv,
            (false, false) => Self::RfRv,
        }
    }
}

impl fmt::Display for OrientationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrientationClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.iter().find(|c| c.name().eq_ignore_ascii_case(s)) {
            Some(c) => Ok(*c),
            None => invalid!("unknown orientation class {s:?}; expected one of AF&AV, RF&AV, AF&RV, RF&RV"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum FieldStrength {
    T0_55,
    T1_5,
    T3,
}

impl FieldStrength {
    pub const ALL: [FieldStrength; 3] = [Self::T0_55, Self::T1_5, Self::T3];

    pub fn tesla(self) -> f64 {
        match self {
            Self::T0_55 => 0.55,
            Self::T1_5 => 1.5,
            Self::T3 => 3.0,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Self::T0_55 => "0.55T",
            Self::T1_5 => "1.5T",
            Self::T3 => "3T",
        }
    }

    pub fn from_tesla(t: f64) -> Result<Self> {
        match Self::ALL.iter().find(|f| (f.tesla() - t).abs() < 1e-9) {
            Some(f) => Ok(*f),
            None => invalid!("unsupported field strength {t} T; expected 0.55, 1.5 or 3.0"),
        }
    }
}

impl TryFrom<f64> for FieldStrength {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        Self::from_tesla(t)
    }
}

impl From<FieldStrength> for f64 {
    fn from(f: FieldStrength) -> f64 {
        f.tesla()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sequence {
    #[serde(rename = "TSE")]
    Tse,
    #[serde(rename = "HASTE")]
    Haste,
}

impl Sequence {
    pub const ALL: [Sequence; 2] = [Self::Tse, Self::Haste];

    pub fn token(self) -> &'static str {
        match self {
            Self::Tse => "TSE",
            Self::Haste => "HASTE",
        }
    }
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TSE" => Ok(Self::Tse),
            "HASTE" => Ok(Self::Haste),
            _ => invalid!("unknown sequence {s:?}; expected TSE or HASTE"),
        }
    }
}

/// Structured acquisition descriptor used as the generation condition.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub orientation_class: OrientationClass,
    pub field_strength_tesla: FieldStrength,
    pub sequence: Sequence,
    #[serde(default)]
    pub extra_keywords: Vec<String>,
}

impl ConditionSpec {
    pub fn new(orientation_class: OrientationClass, field: FieldStrength, sequence: Sequence) -> Self {
        Self { orientation_class, field_strength_tesla: field, sequence, extra_keywords: Vec::new() }
    }
}

/// The fixed keyword vocabulary shipped in `assets/vocabulary.json`.
#[derive(Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    null_id: usize,
}

#[derive(Deserialize)]
struct VocabFile {
    null_token: String,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn builtin() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(|| {
            let f: VocabFile =
                serde_json::from_str(include_str!("../assets/vocabulary.json")).expect("bundled vocabulary");
            let index: HashMap<String, usize> = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
            assert_eq!(index.len(), f.tokens.len(), "duplicate vocabulary tokens");
            let null_id = index[&f.null_token];
            Vocabulary { tokens: f.tokens, index, null_id }
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn null_id(&self) -> usize {
        self.null_id
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        match self.index.get(token) {
            Some(&i) if i != self.null_id => Ok(i),
            _ => invalid!("token {token:?} is not in the vocabulary"),
        }
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let bad: Vec<&str> = tokens.iter().filter(|t| self.id(t).is_err()).map(String::as_str).collect();
        if !bad.is_empty() {
            invalid!("out-of-vocabulary tokens: {bad:?}");
        }
        Ok(tokens.iter().map(|t| self.index[t]).collect())
    }
}

/// Canonical keyword sequence: flexion, version, field strength, sequence,
/// then extra keywords in order.
pub fn build_prompt(spec: &ConditionSpec) -> Result<Vec<String>> {
    let c = spec.orientation_class;
    let mut out = vec![
        if c.anteflexed() { "anteflexed" } else { "retroflexed" }.to_string(),
        if c.anteverted() { "anteverted" } else { "retroverted" }.to_string(),
        spec.field_strength_tesla.token().to_string(),
        spec.sequence.token().to_string(),
    ];
    Vocabulary::builtin().ids(&spec.extra_keywords)?;
    out.extend(spec.extra_keywords.iter().cloned());
    Ok(out)
}

/// Whether an item's condition is replaced by the null token. Consumes one
/// uniform draw.
pub fn dropout_draw<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        invalid!("dropout probability {p} outside [0, 1]");
    }
    let u: f64 = rng.random();
    Ok(u < p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondConfig {
    /// Width of class vectors and text tokens.
    pub embed_dim: usize,
    /// Also encode the structured prompt for cross-attention.
    pub use_text: bool,
    pub max_tokens: usize,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self { embed_dim: 32, use_text: false, max_tokens: 12 }
    }
}

/// Dense condition: class vector plus optional token matrix `[L, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondEmbedding {
    pub class_vector: Vec<f32>,
    pub token_matrix: Option<Tensor<f32>>,
    pub is_null: bool,
}

/// Batched condition nodes in a graph.
pub struct CondVars {
    /// `[B, d]`
    pub class: Var,
    /// `[B, L, d]` and per-item token counts.
    pub tokens: Option<(Var, Vec<usize>)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TextEncoder {
    tok: Embedding,
    pos: Embedding,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

/// Class table (4 classes + null row) and the optional text encoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CondEncoder {
    pub config: CondConfig,
    class_table: Embedding,
    text: Option<TextEncoder>,
}

pub const NULL_CLASS_ROW: usize = OrientationClass::COUNT;

impl CondEncoder {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, config: CondConfig, rng: &mut R) -> Result<Self> {
        let d = config.embed_dim;
        if d == 0 {
            invalid!("condition embedding width must be positive");
        }
        if config.max_tokens < 4 {
            invalid!("max_tokens must allow the four structured keywords");
        }
        let class_table = Embedding::new(store, "cond.class", OrientationClass::COUNT + 1, d, rng);
        let text = config.use_text.then(|| TextEncoder {
            tok: Embedding::new(store, "cond.text.tok", Vocabulary::builtin().len(), d, rng),
            pos: Embedding::new(store, "cond.text.pos", config.max_tokens, d, rng),
            q: Linear::new(store, "cond.text.q", d, d, rng),
            k: Linear::new(store, "cond.text.k", d, d, rng),
            v: Linear::new(store, "cond.text.v", d, d, rng),
            out: Linear::new(store, "cond.text.out", d, d, rng),
        });
        Ok(Self { config, class_table, text })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn uses_text(&self) -> bool {
        self.text.is_some()
    }

    fn token_ids(&self, spec: Option<&ConditionSpec>) -> Result<Vec<usize>> {
        let vocab = Vocabulary::builtin();
        let ids = match spec {
            Some(s) => vocab.ids(&build_prompt(s)?)?,
            None => vec![vocab.null_id()],
        };
        if ids.len() > self.config.max_tokens {
            invalid!("prompt has {} tokens, limit {}", ids.len(), self.config.max_tokens);
        }
        Ok(ids)
    }

    fn encode_ids<E: Element>(&self, g: &mut Graph<E>, s: &ParamStore<E>, ids: &[Vec<usize>]) -> (Var, Vec<usize>) {
        let te = self.text.as_ref().expect("text encoder present");
        let d = self.config.embed_dim;
        let b = ids.len();
        let lens: Vec<usize> = ids.iter().map(Vec::len).collect();
        let l = *lens.iter().max().unwrap();
        let null = Vocabulary::builtin().null_id();
        let mut flat = Vec::with_capacity(b * l);
        let mut pos = Vec::with_capacity(b * l);
        for row in ids {
            flat.extend(row.iter().copied().chain(std::iter::repeat_n(null, l - row.len())));
            pos.extend(0..l);
        }
        let t = te.tok.forward(g, s, &flat);
        let p = te.pos.forward(g, s, &pos);
        let h = g.add(t, p);
        let h = g.reshape(h, vec![b, l, d]);
        let q = te.q.forward(g, s, h);
        let k = te.k.forward(g, s, h);
        let v = te.v.forward(g, s, h);
        let a = g.attention(q, k, v, Some(lens.clone()));
        let o = te.out.forward(g, s, a);
        (g.add(h, o), lens)
    }

    /// Encode a batch; `None` entries take the null class row and the
    /// encoded `<null>` prompt.
    pub fn encode_graph<E: Element>(
        &self,
        g: &mut Graph<E>,
        s: &ParamStore<E>,
        specs: &[Option<&ConditionSpec>],
    ) -> Result<CondVars> {
        let rows: Vec<usize> = specs
            .iter()
            .map(|sp| sp.map_or(NULL_CLASS_ROW, |x| x.orientation_class.index()))
            .collect();
        let class = self.class_table.forward(g, s, &rows);
        let tokens = if self.text.is_some() {
            let ids = specs.iter().map(|sp| self.token_ids(*sp)).collect::<Result<Vec<_>>>()?;
            Some(self.encode_ids(g, s, &ids))
        } else {
            None
        };
        Ok(CondVars { class, tokens })
    }

    /// Class-table row for one class.
    pub fn encode_class(&self, s: &ParamStore<f32>, class: OrientationClass) -> Vec<f32> {
        let t = s.get(self.class_table.id());
        let d = self.config.embed_dim;
        t.data()[class.index() * d..(class.index() + 1) * d].to_vec()
    }

    /// One vector per token.
    pub fn encode_text(&self, s: &ParamStore<f32>, tokens: &[String]) -> Result<Tensor<f32>> {
        if self.text.is_none() {
            invalid!("this encoder was built without a text branch");
        }
        let ids = Vocabulary::builtin().ids(tokens)?;
        if ids.is_empty() || ids.len() > self.config.max_tokens {
            invalid!("token count {} outside 1..={}", ids.len(), self.config.max_tokens);
        }
        let mut g = Graph::inference();
        let (v, lens) = self.encode_ids(&mut g, s, &[ids]);
        Ok(g.value(v).clone().reshape(vec![lens[0], self.config.embed_dim]))
    }

    /// Dense embedding of one condition (or the null condition).
    pub fn embed(&self, s: &ParamStore<f32>, spec: Option<&ConditionSpec>) -> Result<CondEmbedding> {
        let mut g = Graph::inference();
        let vars = self.encode_graph(&mut g, s, &[spec])?;
        let class_vector = g.value(vars.class).data().to_vec();
        let token_matrix = vars.tokens.map(|(v, lens)| g.value(v).clone().reshape(vec![lens[0], self.embed_dim()]));
        Ok(CondEmbedding { class_vector, token_matrix, is_null: spec.is_none() })
    }

    pub fn null_embedding(&self, s: &ParamStore<f32>) -> CondEmbedding {
        self.embed(s, None).expect("null prompt always encodes")
    }

    /// Place precomputed embeddings into a graph as constants.
    pub fn embeddings_to_vars<E: Element>(&self, g: &mut Graph<E>, embs: &[&CondEmbedding]) -> Result<CondVars> {
        let d = self.embed_dim();
        let b = embs.len();
        let mut cls = Vec::with_capacity(b * d);
        for e in embs {
            if e.class_vector.len() != d {
                return Err(Error::Shape(format!("class vector width {} != {d}", e.class_vector.len())));
            }
            cls.extend(e.class_vector.iter().map(|&v| E::from_f64(v as f64)));
        }
        let class = g.constant(Tensor::new(vec![b, d], cls));
        let tokens = if self.uses_text() {
            let mats = embs
                .iter()
                .map(|e| e.token_matrix.as_ref().ok_or_else(|| Error::Validation("embedding lacks tokens".into())))
                .collect::<Result<Vec<_>>>()?;
            let lens: Vec<usize> = mats.iter().map(|m| m.shape()[0]).collect();
            let l = *lens.iter().max().unwrap();
            let mut data = vec![E::zero(); b * l * d];
            for (i, m) in mats.iter().enumerate() {
                for (dst, &v) in data[i * l * d..i * l * d + m.len()].iter_mut().zip(m.data()) {
                    *dst = E::from_f64(v as f64);
                }
            }
            Some((g.constant(Tensor::new(vec![b, l, d], data)), lens))
        } else {
            None
        };
        Ok(CondVars { class, tokens })
    }
}

/// Replace `emb` by `null` with probability `p`. The input is untouched.
pub fn apply_cond_dropout<R: Rng + ?Sized>(
    emb: &CondEmbedding,
    null: &CondEmbedding,
    p: f64,
    rng: &mut R,
) -> Result<CondEmbedding> {
    Ok(if dropout_draw(p, rng)? { null.clone() } else { emb.clone() })
}

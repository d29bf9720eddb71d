//! Toy text encoder over a structured semantic vocabulary, and the
//! text-side direction arithmetic used by the editing pipeline.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_shape, Error, Result};
use crate::rng::{derive_stream, normal_matrix};

pub const NULL_ATTRIBUTE: &str = "<null>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
}

/// Portable description of a vocabulary; the embedding table is always
/// regenerated from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularySpec {
    pub seed: u64,
    pub width: usize,
    pub attributes: Vec<AttributeSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub usize);

impl TokenId {
    pub const NULL: TokenId = TokenId(0);

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }
}

#[derive(Debug, Clone)]
pub struct SemanticVocabulary {
    spec: VocabularySpec,
    table: Array2<f64>,
    /// (attribute index, value index) per token; `None` for the null token.
    owners: Vec<Option<(usize, usize)>>,
    lookup: HashMap<(String, String), TokenId>,
}

impl SemanticVocabulary {
    pub fn new(spec: VocabularySpec) -> Result<Self> {
        if spec.width == 0 {
            return Err(Error::InvalidParameter("embedding width must be positive".into()));
        }
        let mut owners = vec![None];
        let mut lookup = HashMap::new();
        for (ai, attr) in spec.attributes.iter().enumerate() {
            if attr.values.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "attribute `{}` has no values",
                    attr.name
                )));
            }
            for (vi, value) in attr.values.iter().enumerate() {
                let id = TokenId(owners.len());
                if lookup.insert((attr.name.clone(), value.clone()), id).is_some() {
                    return Err(Error::InvalidParameter(format!(
                        "duplicate token `{}: {}`",
                        attr.name, value
                    )));
                }
                owners.push(Some((ai, vi)));
            }
        }
        let mut rng = derive_stream(spec.seed, 0);
        let mut table = normal_matrix(&mut rng, owners.len(), spec.width);
        for mut row in table.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        Ok(Self {
            spec,
            table,
            owners,
            lookup,
        })
    }

    /// Color, object, and eleven-level size / x / y attributes at width 32.
    pub fn scene_default(seed: u64) -> Self {
        let levels: Vec<String> = (0..=10).map(level_name).collect();
        let spec = VocabularySpec {
            seed,
            width: 32,
            attributes: vec![
                AttributeSpec {
                    name: "color".into(),
                    values: vec!["red".into(), "green".into(), "blue".into()],
                },
                AttributeSpec {
                    name: "object".into(),
                    values: vec!["square".into(), "circle".into()],
                },
                AttributeSpec {
                    name: "size".into(),
                    values: levels.clone(),
                },
                AttributeSpec {
                    name: "x".into(),
                    values: levels.clone(),
                },
                AttributeSpec {
                    name: "y".into(),
                    values: levels,
                },
            ],
        };
        Self::new(spec).expect("default vocabulary is valid")
    }

    pub fn spec(&self) -> &VocabularySpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    pub fn token(&self, attribute: &str, value: &str) -> Result<TokenId> {
        self.lookup
            .get(&(attribute.to_string(), value.to_string()))
            .copied()
            .ok_or_else(|| Error::UnknownToken {
                attribute: attribute.into(),
                value: value.into(),
            })
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.spec
            .attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.into()))
    }

    pub fn attribute_name(&self, index: usize) -> &str {
        &self.spec.attributes[index].name
    }

    pub fn attribute_count(&self) -> usize {
        self.spec.attributes.len()
    }

    pub fn values(&self, attribute: usize) -> &[String] {
        &self.spec.attributes[attribute].values
    }

    /// `(attribute index, value index)`, or `None` for the null token.
    pub fn owner(&self, id: TokenId) -> Option<(usize, usize)> {
        self.owners.get(id.0).copied().flatten()
    }

    pub fn attribute_of(&self, id: TokenId) -> Option<usize> {
        self.owner(id).map(|(a, _)| a)
    }

    pub fn describe(&self, id: TokenId) -> (String, String) {
        match self.owner(id) {
            None => (NULL_ATTRIBUTE.into(), String::new()),
            Some((a, v)) => (
                self.spec.attributes[a].name.clone(),
                self.spec.attributes[a].values[v].clone(),
            ),
        }
    }

    pub fn vector(&self, id: TokenId) -> ArrayView1<'_, f64> {
        self.table.row(id.0)
    }

    /// Token ids of every value of `attribute`, in declaration order.
    pub fn value_tokens(&self, attribute: usize) -> Vec<TokenId> {
        let name = &self.spec.attributes[attribute].name;
        self.spec.attributes[attribute]
            .values
            .iter()
            .map(|v| self.lookup[&(name.clone(), v.clone())])
            .collect()
    }

    pub fn encode(&self, prompt: &Prompt) -> Result<TextEmbedding> {
        if prompt.tokens.is_empty() {
            return Err(Error::InvalidParameter("prompt must contain a token".into()));
        }
        let mut rows = Array2::zeros((prompt.tokens.len(), self.width()));
        for (i, id) in prompt.tokens.iter().enumerate() {
            if id.0 >= self.len() {
                return Err(Error::InvalidParameter(format!("token id {} out of range", id.0)));
            }
            rows.row_mut(i).assign(&self.vector(*id));
        }
        Ok(TextEmbedding {
            tokens: rows,
            ids: prompt.tokens.clone(),
            pooled_offset: None,
        })
    }

    /// Prompt of `len` null tokens; the unconditional branch of guidance.
    pub fn null_embedding(&self, len: usize) -> TextEmbedding {
        self.encode(&Prompt::new(vec![TokenId::NULL; len.max(1)]))
            .expect("null prompt encodes")
    }
}

pub fn level_name(level: usize) -> String {
    format!("{:.1}", level as f64 / 10.0)
}

/// Ordered token list; prompts are structured, never free text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn from_names(vocab: &SemanticVocabulary, names: &[(&str, &str)]) -> Result<Self> {
        names
            .iter()
            .map(|(a, v)| vocab.token(a, v))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn render(&self, vocab: &SemanticVocabulary) -> String {
        self.tokens
            .iter()
            .map(|t| {
                let (a, v) = vocab.describe(*t);
                if t.is_null() {
                    a
                } else {
                    format!("{a}={v}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn encode_prompt(vocab: &SemanticVocabulary, tokens: &[(&str, &str)]) -> Result<TextEmbedding> {
    vocab.encode(&Prompt::from_names(vocab, tokens)?)
}

/// Token-wise text embedding. `ids` keep the identity of the source token in
/// each row even after the row has been manipulated.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Array2<f64>,
    pub ids: Vec<TokenId>,
    /// Extra shift applied to the pooled vector on top of the row mean.
    pub pooled_offset: Option<Array1<f64>>,
}

impl TextEmbedding {
    pub fn new(tokens: Array2<f64>, ids: Vec<TokenId>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::InvalidParameter("text embedding needs a row".into()));
        }
        if ids.len() != tokens.nrows() {
            return Err(Error::InvalidParameter(format!(
                "{} token ids for {} rows",
                ids.len(),
                tokens.nrows()
            )));
        }
        ensure_finite(&tokens, "text embedding")?;
        Ok(Self {
            tokens,
            ids,
            pooled_offset: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tokens.dim()
    }

    /// Row mean plus any pooled offset.
    pub fn pooled(&self) -> PooledEmbedding {
        let mut p = pool(self).expect("embedding has rows");
        if let Some(off) = &self.pooled_offset {
            p.vector += off;
        }
        p
    }

    /// Row index of the first token belonging to `attribute`.
    pub fn row_of_attribute(&self, vocab: &SemanticVocabulary, attribute: usize) -> Option<usize> {
        self.ids
            .iter()
            .position(|id| vocab.attribute_of(*id) == Some(attribute))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub vector: Array1<f64>,
}

pub fn pool(emb: &TextEmbedding) -> Result<PooledEmbedding> {
    if emb.tokens.nrows() == 0 {
        return Err(Error::InvalidParameter("cannot pool an empty embedding".into()));
    }
    let vector = emb
        .tokens
        .mean_axis(Axis(0))
        .expect("nonempty rows have a mean");
    Ok(PooledEmbedding { vector })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subspace {
    Text,
    Image,
}

impl Subspace {
    pub fn name(self) -> &'static str {
        match self {
            Subspace::Text => "text",
            Subspace::Image => "image",
        }
    }
}

/// A direction in one subspace of the joint latent. `delta` already carries
/// the degree; `degree` is recorded for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct EditDirection {
    pub subspace: Subspace,
    pub delta: Array2<f64>,
    pub degree: f64,
}

impl EditDirection {
    pub fn new(subspace: Subspace, delta: Array2<f64>, degree: f64) -> Result<Self> {
        ensure_finite(&delta, "edit direction")?;
        Ok(Self {
            subspace,
            delta,
            degree,
        })
    }

    pub fn negated(&self) -> Self {
        Self {
            subspace: self.subspace,
            delta: -&self.delta,
            degree: -self.degree,
        }
    }

    pub fn norm(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `n_c = alpha (z_c1 - z_c0)`.
pub fn text_direction(
    z_c0: &TextEmbedding,
    z_c1: &TextEmbedding,
    alpha: f64,
) -> Result<EditDirection> {
    ensure_shape(z_c0.shape(), z_c1.shape())?;
    EditDirection::new(Subspace::Text, (&z_c1.tokens - &z_c0.tokens) * alpha, alpha)
}

/// `z~_c = z_c0 + n.delta`; token identities stay those of `z_c0`.
pub fn apply_text_direction(z_c0: &TextEmbedding, n: &EditDirection) -> Result<TextEmbedding> {
    if n.subspace != Subspace::Text {
        return Err(Error::SubspaceMismatch {
            expected: Subspace::Text.name(),
            got: n.subspace.name(),
        });
    }
    ensure_shape(z_c0.shape(), n.delta.dim())?;
    Ok(TextEmbedding {
        tokens: &z_c0.tokens + &n.delta,
        ids: z_c0.ids.clone(),
        pooled_offset: z_c0.pooled_offset.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub attribute: String,
    pub from: String,
    pub to: String,
    pub degree: f64,
}

/// Multi-attribute edit; the per-entry degrees form the diagonal of Lambda.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditPlan {
    pub entries: Vec<PlanEntry>,
}

impl EditPlan {
    pub fn new(entries: Vec<PlanEntry>) -> Result<Self> {
        let plan = Self { entries };
        plan.validate()?;
        Ok(plan)
    }

    pub fn single(attribute: &str, from: &str, to: &str, degree: f64) -> Self {
        Self {
            entries: vec![PlanEntry {
                attribute: attribute.into(),
                from: from.into(),
                to: to.into(),
                degree,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if !e.degree.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "degree for `{}` is not finite",
                    e.attribute
                )));
            }
            if self.entries[..i].iter().any(|o| o.attribute == e.attribute) {
                return Err(Error::InvalidParameter(format!(
                    "attribute `{}` appears twice in the plan",
                    e.attribute
                )));
            }
        }
        Ok(())
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.degree).collect()
    }

    pub fn with_degree(&self, degree: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| PlanEntry {
                    degree,
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `C = C0 + Lambda (C1 - C0)` applied row-wise per planned attribute.
pub fn multi_attr_manipulate(
    vocab: &SemanticVocabulary,
    c0: &TextEmbedding,
    c1: &TextEmbedding,
    plan: &EditPlan,
) -> Result<TextEmbedding> {
    ensure_shape(c0.shape(), c1.shape())?;
    plan.validate()?;
    let mut out = c0.clone();
    for entry in &plan.entries {
        let attr = vocab.attribute_index(&entry.attribute)?;
        let row = c0
            .row_of_attribute(vocab, attr)
            .filter(|&r| vocab.attribute_of(c1.ids[r]) == Some(attr))
            .ok_or_else(|| Error::UnknownAttribute(entry.attribute.clone()))?;
        let diff = &c1.tokens.row(row) - &c0.tokens.row(row);
        let mut target = out.tokens.row_mut(row);
        target.scaled_add(entry.degree, &diff);
    }
    Ok(out)
}

/// Embeds `n_i` into block `block` (0-based) of an `m * d` vector.
pub fn extended_direction(n_i: &[f64], block: usize, block_count: usize) -> Result<Vec<f64>> {
    if block >= block_count {
        return Err(Error::InvalidParameter(format!(
            "block {block} out of range for {block_count} blocks"
        )));
    }
    if n_i.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("direction".into()));
    }
    let d = n_i.len();
    let mut out = vec![0.0; d * block_count];
    out[block * d..(block + 1) * d].copy_from_slice(n_i);
    Ok(out)
}

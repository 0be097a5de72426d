//! Class-name text embeddings and the textual object queries derived from them.
//!
//! A small transformer text encoder is initialized once from a seed and kept
//! frozen. Class names are tokenized with a fixed word table, prefixed with
//! either a learnable context prompt or the fixed template
//! `a clean origami of a [class].`, and the features of the final `.` token are
//! projected into the joint embedding space. Queries and cluster centers are
//! produced from those embeddings by an MLP and a linear map respectively.

use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Words known to the fixed tokenizer; the token id is the index.
pub const WORD_TABLE: &[&str] = &[
    // template
    "a", "clean", "origami", "of", ".",
    // driving-scene classes
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic", "light", "sign",
    "vegetation", "terrain", "sky", "person", "rider", "car", "truck", "bus", "train",
    "motorcycle", "bicycle",
    // synthetic benchmark classes
    "background", "disc", "rectangle", "triangle", "stripe", "band", "ring", "cross", "diamond",
    // spare words
    "photo", "the", "object", "shape", "thing",
];

/// Template words that precede the class name in the fixed prompt.
pub const TEMPLATE_PREFIX: &[&str] = &["a", "clean", "origami", "of", "a"];
pub const TERMINATOR: &str = ".";

/// The 19 driving-scene class names.
pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light", "traffic sign",
    "vegetation", "terrain", "sky", "person", "rider", "car", "truck", "bus", "train",
    "motorcycle", "bicycle",
];

/// Class names of the synthetic benchmark, indexed by class id.
pub const SYNTH_CLASSES: [&str; 8] = [
    "background", "disc", "rectangle", "triangle", "stripe band", "ring", "cross", "diamond",
];

pub fn token_id(word: &str) -> Option<usize> {
    WORD_TABLE.iter().position(|w| *w == word)
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let ids = text
        .split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            token_id(&w).ok_or_else(|| Error::Vocabulary(format!("unknown word {w:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::Vocabulary(format!("empty class name {text:?}")));
    }
    Ok(ids)
}

/// Ordered, unique class names with their token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    token_ids: Vec<Vec<usize>>,
}

impl ClassVocabulary {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Vocabulary("vocabulary needs at least one class".into()));
        }
        let mut out = Self {
            names: Vec::with_capacity(names.len()),
            token_ids: Vec::with_capacity(names.len()),
        };
        for name in names {
            let name = name.as_ref().trim().to_string();
            if out.names.contains(&name) {
                return Err(Error::Vocabulary(format!("duplicate class {name:?}")));
            }
            out.token_ids.push(tokenize(&name)?);
            out.names.push(name);
        }
        Ok(out)
    }

    /// Builds a vocabulary from raw token ids; ids are validated at encode time.
    pub fn from_token_ids(names: Vec<String>, token_ids: Vec<Vec<usize>>) -> Result<Self> {
        if names.is_empty() || names.len() != token_ids.len() {
            return Err(Error::Vocabulary("names and token sequences disagree".into()));
        }
        if token_ids.iter().any(Vec::is_empty) {
            return Err(Error::Vocabulary("empty token sequence".into()));
        }
        Ok(Self { names, token_ids })
    }

    /// The first `k` synthetic benchmark classes.
    pub fn synthetic(k: usize) -> Result<Self> {
        if k == 0 || k > SYNTH_CLASSES.len() {
            return Err(Error::Config(format!("synthetic vocabulary supports 1..=8 classes, got {k}")));
        }
        Self::new(&SYNTH_CLASSES[..k])
    }

    pub fn cityscapes() -> Self {
        Self::new(&CITYSCAPES_CLASSES).expect("built-in vocabulary")
    }

    /// One class name per line; blank lines are skipped.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::new(&names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn token_ids(&self) -> &[Vec<usize>] {
        &self.token_ids
    }

    /// Reorders classes: entry `i` of the result is entry `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            names: perm.iter().map(|&i| self.names[i].clone()).collect(),
            token_ids: perm.iter().map(|&i| self.token_ids[i].clone()).collect(),
        }
    }
}

/// Context embeddings that precede the class tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt<T> {
    pub embeddings: Tensor<T>,
    pub learnable: bool,
}

impl<T: Scalar> Prompt<T> {
    pub fn new(embeddings: Tensor<T>, learnable: bool) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        if !embeddings.all_finite() {
            return Err(Error::Config("prompt has non-finite entries".into()));
        }
        Ok(Self {
            embeddings,
            learnable,
        })
    }

    /// Learnable context of `len` vectors drawn from `N(0, 0.02^2)`.
    pub fn random<R: Rng + ?Sized>(len: usize, token_dim: usize, rng: &mut R) -> Result<Self> {
        Self::new(Tensor::randn(len, token_dim, 0.02, rng), true)
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> TextEmbeddings<T> {
    pub fn normalized(&self) -> Tensor<T> {
        self.values.l2_normalize_rows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryStage {
    Initial,
    Refined(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextualQueries<T> {
    pub values: Tensor<T>,
    pub stage: QueryStage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterCenters<T> {
    pub values: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TextEncoderConfig {
    pub token_dim: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            embed_dim: 64,
            blocks: 2,
            heads: 4,
            max_len: 16,
        }
    }
}

/// Frozen text encoder. All of its parameters live in the [`ParamGroup::Frozen`] group.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    token_embedding: ParamId,
    positional: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    projection: Linear,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: TextEncoderConfig,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Frozen;
        let c = config.token_dim;
        let token_embedding =
            store.insert("text.token_embedding", Tensor::randn(WORD_TABLE.len(), c, 1.0, rng), g, false);
        let positional =
            store.insert("text.positional", Tensor::randn(config.max_len, c, 0.1, rng), g, false);
        let blocks = (0..config.blocks)
            .map(|i| TransformerBlock::new(store, &format!("text.block{i}"), c, config.heads, 2, g, rng))
            .collect();
        let final_norm = LayerNorm::new(store, "text.final_norm", c, g);
        let projection = Linear::new(store, "text.projection", c, config.embed_dim, false, g, rng);
        Self {
            config,
            token_embedding,
            positional,
            blocks,
            final_norm,
            projection,
        }
    }

    pub fn parameter_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.positional];
        for b in &self.blocks {
            for l in [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.out, &b.mlp.fc1, &b.mlp.fc2] {
                ids.push(l.weight);
                ids.extend(l.bias);
            }
            ids.extend([b.norm1.gamma, b.norm1.beta, b.norm2.gamma, b.norm2.beta]);
        }
        ids.extend([self.final_norm.gamma, self.final_norm.beta, self.projection.weight]);
        ids
    }

    /// Token embeddings of the fixed template prefix.
    pub fn template_prompt<T: Scalar>(&self, store: &ParamStore<T>) -> Prompt<T> {
        let ids: Vec<usize> = TEMPLATE_PREFIX
            .iter()
            .map(|w| token_id(w).expect("template word in table"))
            .collect();
        Prompt {
            embeddings: store.get(self.token_embedding).select_rows(&ids),
            learnable: false,
        }
    }

    fn check(&self, vocab: &ClassVocabulary, prompt_len: usize, prompt_dim: usize) -> Result<()> {
        if prompt_dim != self.config.token_dim {
            return Err(Error::Config(format!(
                "prompt token dimension {prompt_dim} does not match encoder dimension {}",
                self.config.token_dim
            )));
        }
        if prompt_len == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        for (name, ids) in vocab.names().iter().zip(vocab.token_ids()) {
            if let Some(bad) = ids.iter().find(|&&id| id >= WORD_TABLE.len()) {
                return Err(Error::Vocabulary(format!("token id {bad} of {name:?} is outside the table")));
            }
            let len = prompt_len + ids.len() + 1;
            if len > self.config.max_len {
                return Err(Error::Config(format!(
                    "sequence for {name:?} has {len} tokens, encoder supports {}",
                    self.config.max_len
                )));
            }
        }
        Ok(())
    }

    /// `t_k = E_T([prompt, tokens(class_k), "."])` for every class, as a `K x C` node.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        vocab: &ClassVocabulary,
        prompt: Var,
    ) -> Result<Var> {
        let (plen, pdim) = g.value(prompt).shape();
        self.check(vocab, plen, pdim)?;
        let table = g.param(store, self.token_embedding);
        let pos = g.param(store, self.positional);
        let end = token_id(TERMINATOR).expect("terminator in table");
        let mut rows = Vec::with_capacity(vocab.len());
        for ids in vocab.token_ids() {
            let mut tok = ids.clone();
            tok.push(end);
            let words = g.select_rows(table, &tok);
            let seq = g.concat_rows(&[prompt, words]);
            let len = plen + tok.len();
            let p = g.slice_rows(pos, 0, len);
            let mut x = g.add(seq, p);
            for block in &self.blocks {
                x = block.forward(g, store, x);
            }
            let last = g.slice_rows(x, len - 1, 1);
            let last = self.final_norm.forward(g, store, last);
            rows.push(self.projection.forward(g, store, last));
        }
        Ok(g.concat_rows(&rows))
    }

    /// Value-level encoding with an explicit prompt.
    pub fn encode_class_texts<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        vocab: &ClassVocabulary,
        prompt: &Prompt<T>,
    ) -> Result<TextEmbeddings<T>> {
        let mut g = Graph::inference();
        let p = g.constant(prompt.embeddings.clone());
        let t = self.encode(&mut g, store, vocab, p)?;
        Ok(TextEmbeddings {
            values: g.value(t).clone(),
        })
    }

    /// Embeddings with the fixed template prompt; constant across training.
    pub fn fixed_prompt_embeddings<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        vocab: &ClassVocabulary,
    ) -> Result<TextEmbeddings<T>> {
        let prompt = self.template_prompt(store);
        self.encode_class_texts(store, vocab, &prompt)
    }
}

/// MLP that turns `K x C` text embeddings into `K x D` initial queries.
#[derive(Clone, Debug)]
pub struct QueryGenerator {
    pub mlp: FeedForward,
    pub embed_dim: usize,
}

impl QueryGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        embed_dim: usize,
        query_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: FeedForward::new(store, "query_mlp", embed_dim, query_dim, query_dim, ParamGroup::Head, rng),
            embed_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, t: Var) -> Result<Var> {
        check_width(g.value(t).cols(), self.embed_dim)?;
        Ok(self.mlp.forward(g, store, t))
    }

    pub fn make_queries<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        t: &TextEmbeddings<T>,
    ) -> Result<TextualQueries<T>> {
        let mut g = Graph::inference();
        let tv = g.constant(t.values.clone());
        let q = self.forward(&mut g, store, tv)?;
        Ok(TextualQueries {
            values: g.value(q).clone(),
            stage: QueryStage::Initial,
        })
    }
}

/// Linear map compressing `K x C` text embeddings into `K x D` cluster centers.
#[derive(Clone, Debug)]
pub struct CenterProjection {
    pub linear: Linear,
}

impl CenterProjection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        embed_dim: usize,
        query_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, "center_proj", embed_dim, query_dim, true, ParamGroup::Head, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, t: Var) -> Result<Var> {
        check_width(g.value(t).cols(), self.linear.fan_in)?;
        Ok(self.linear.forward(g, store, t))
    }

    pub fn make_cluster_centers<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        t: &TextEmbeddings<T>,
    ) -> Result<ClusterCenters<T>> {
        let mut g = Graph::inference();
        let tv = g.constant(t.values.clone());
        let c = self.forward(&mut g, store, tv)?;
        Ok(ClusterCenters {
            values: g.value(c).clone(),
        })
    }
}

fn check_width(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!(
            "text embeddings have {got} channels, expected {want}"
        )));
    }
    Ok(())
}

//! Descriptor sentences, text encoders and the contrastive alignment loss.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::codebook::PseudoInverse;
use crate::data::EntityKind;
use crate::error::{FaceError, Result};
use crate::nn::init;

pub const USER_PROMPT: &str = "The reader and his preference can be described as:";
pub const ITEM_PROMPT: &str = "The book and its features can be described as:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub tau: f64,
    pub prompt_user: String,
    pub prompt_item: String,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            prompt_user: USER_PROMPT.into(),
            prompt_item: ITEM_PROMPT.into(),
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(FaceError::Config("alignment temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn prompt(&self, kind: EntityKind) -> &str {
        match kind {
            EntityKind::User => &self.prompt_user,
            EntityKind::Item => &self.prompt_item,
        }
    }
}

/// Lowercase alphanumeric word pieces of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word-level input embeddings of the language model.
pub trait TokenEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_token(&self, word: &str) -> Array1<f64>;

    fn embed_text(&self, text: &str) -> Mat {
        let words = tokenize(text);
        let mut out = Array2::zeros((words.len(), self.dim()));
        for (mut row, w) in out.axis_iter_mut(Axis(0)).zip(&words) {
            row.assign(&self.embed_token(w));
        }
        out
    }
}

/// Token embeddings looked up from an exported vocabulary; words outside it
/// get a deterministic pseudo-random unit vector derived from the word and a
/// seed.
#[derive(Clone, Debug)]
pub struct VocabTokenEmbedder {
    index: HashMap<String, usize>,
    embeddings: Mat,
    seed: u64,
}

impl VocabTokenEmbedder {
    pub fn new(tokens: &[String], embeddings: Mat, seed: u64) -> Result<Self> {
        if tokens.len() != embeddings.nrows() {
            return Err(FaceError::Shape(format!(
                "{} tokens for {} embedding rows",
                tokens.len(),
                embeddings.nrows()
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            let key = t.trim_start_matches(['\u{0120}', '\u{2581}']).to_lowercase();
            index.entry(key).or_insert(i);
        }
        Ok(Self {
            index,
            embeddings,
            seed,
        })
    }
}

/// Seeded unit vector for `word`; identical across runs and platforms for the
/// same `(word, seed)`.
pub fn hashed_unit_vector(word: &str, seed: u64, dim: usize) -> Array1<f64> {
    let mut h = DefaultHasher::new();
    // DefaultHasher::new() uses fixed keys, so this is stable within a toolchain.
    word.hash(&mut h);
    seed.hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.dot(&v).sqrt();
    v / n
}

impl TokenEmbedder for VocabTokenEmbedder {
    fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn embed_token(&self, word: &str) -> Array1<f64> {
        match self.index.get(&word.to_lowercase()) {
            Some(&row) => self.embeddings.row(row).to_owned(),
            None => hashed_unit_vector(word, self.seed, self.dim()),
        }
    }
}

/// Sentence encoder over sequences of token-space vectors.
pub trait TextEncoder: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Encodes one sequence `[len × input_dim]`. Must be deterministic.
    fn encode_vectors(&self, sequence: ArrayView2<f64>) -> Array1<f64>;

    /// Differentiable batch encoding of `prompt ⊕ descriptors` for `B`
    /// entities, where `descriptors` is `[B·n × input_dim]`. Returns
    /// `[B × output_dim]`.
    fn encode_batch(&self, tape: &mut Tape, prompt: ArrayView2<f64>, descriptors: Var, n: usize) -> Var;
}

/// Mean pooling followed by a fixed seeded orthogonal map to the output width.
#[derive(Clone, Debug)]
pub struct MeanPoolEncoder {
    rotation: Mat,
}

impl MeanPoolEncoder {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            rotation: init::orthogonal(output_dim, input_dim, &mut rng),
        }
    }

    pub fn rotation(&self) -> &Mat {
        &self.rotation
    }
}

impl TextEncoder for MeanPoolEncoder {
    fn input_dim(&self) -> usize {
        self.rotation.ncols()
    }

    fn output_dim(&self) -> usize {
        self.rotation.nrows()
    }

    fn encode_vectors(&self, sequence: ArrayView2<f64>) -> Array1<f64> {
        if sequence.nrows() == 0 {
            return Array1::zeros(self.output_dim());
        }
        let mean = sequence.mean_axis(Axis(0)).unwrap();
        self.rotation.dot(&mean)
    }

    fn encode_batch(&self, tape: &mut Tape, prompt: ArrayView2<f64>, descriptors: Var, n: usize) -> Var {
        let total = (prompt.nrows() + n) as f64;
        let desc_mean = tape.group_mean_rows(descriptors, n);
        let desc_part = tape.scale(desc_mean, n as f64 / total);
        let prompt_sum = prompt.sum_axis(Axis(0)).insert_axis(Axis(0)) / total;
        let prompt_row = tape.constant(prompt_sum);
        let pooled = tape.add_row(desc_part, prompt_row);
        let rotation = tape.constant(self.rotation.clone());
        tape.matmul_t(pooled, rotation)
    }
}

/// Offline text embedding for summaries.
pub trait TextEmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Array1<f64>;
}

/// Tokenize, embed each word, then run the sentence encoder.
pub struct PooledTextProvider<T: TokenEmbedder, E: TextEncoder> {
    pub tokens: T,
    pub encoder: E,
}

impl<T: TokenEmbedder, E: TextEncoder> TextEmbeddingProvider for PooledTextProvider<T, E> {
    fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    fn encode_text(&self, text: &str) -> Array1<f64> {
        self.encoder.encode_vectors(self.tokens.embed_text(text).view())
    }
}

/// `E(P_d) ⊕ (W⁺ z_d₁, …, W⁺ z_dₙ)` for one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSentence {
    pub prompt: Mat,
    pub descriptors: Mat,
}

impl DescriptorSentence {
    pub fn len(&self) -> usize {
        self.prompt.nrows() + self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sequence(&self) -> Mat {
        ndarray::concatenate(Axis(0), &[self.prompt.view(), self.descriptors.view()]).unwrap()
    }
}

/// Lifts each descriptor codeword `z_d [n × d]` back to token space with the
/// pseudo-inverse and prepends the prompt embeddings.
pub fn build_sentence(z_d: ArrayView2<f64>, pinv: &PseudoInverse, prompt: &Mat) -> Result<DescriptorSentence> {
    if pinv.matrix.ncols() != z_d.ncols() {
        return Err(FaceError::Shape(format!(
            "descriptor width {} vs pseudo-inverse {}x{}",
            z_d.ncols(),
            pinv.matrix.nrows(),
            pinv.matrix.ncols()
        )));
    }
    if prompt.ncols() != pinv.matrix.nrows() {
        return Err(FaceError::Shape("prompt embeddings are not in token space".into()));
    }
    Ok(DescriptorSentence {
        prompt: prompt.clone(),
        descriptors: z_d.dot(&pinv.matrix.t()),
    })
}

static ZERO_NORM_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_zero_norm() {
    if !ZERO_NORM_WARNED.swap(true, Ordering::Relaxed) {
        warn!("zero-norm embedding in alignment; its cosine similarities are treated as 0");
    }
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        warn_zero_norm();
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// InfoNCE over a batch: row `v` of `h_d` is matched to row `v` of `h_s`
/// against every other row of `h_s`, with logits `cos / τ`.
pub fn contrastive_align(h_d: ArrayView2<f64>, h_s: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if h_d.dim() != h_s.dim() {
        return Err(FaceError::Shape(format!(
            "descriptor batch {:?} vs anchor batch {:?}",
            h_d.dim(),
            h_s.dim()
        )));
    }
    let m = h_d.nrows();
    if m == 0 {
        return Err(FaceError::EmptyInput("alignment batch".into()));
    }
    let mut total = 0.0;
    let mut logits = vec![0.0; m];
    for v in 0..m {
        for (w, l) in logits.iter_mut().enumerate() {
            *l = cosine(h_d.row(v), h_s.row(w)) / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let others: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(w, _)| w != v)
            .map(|(_, l)| (l - max).exp())
            .sum();
        let own = logits[v] - max;
        // ln(e^own + others) without losing tiny `others` when own = 0
        let lse = if own == 0.0 { others.ln_1p() } else { (own.exp() + others).ln() };
        total += lse - own;
    }
    Ok(total / m as f64)
}

/// Tape version of [`contrastive_align`]; `h_s` is a constant.
pub fn contrastive_align_tape(tape: &mut Tape, h_d: Var, h_s: &Mat, tau: f64) -> Var {
    let m = tape.shape(h_d).0;
    if h_s.rows().into_iter().any(|r| r.dot(&r) == 0.0)
        || tape.value(h_d).rows().into_iter().any(|r| r.dot(&r) == 0.0)
    {
        warn_zero_norm();
    }
    let d_unit = tape.row_normalize(h_d);
    let anchors = tape.constant(h_s.clone());
    let s_unit = tape.row_normalize(anchors);
    let logits = tape.matmul_t(d_unit, s_unit);
    let logits = tape.scale(logits, 1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits);
    let diag = tape.diagonal(log_probs);
    let sum = tape.sum_all(diag);
    tape.scale(sum, -1.0 / m as f64)
}

/// Builds descriptor sentences for whole batches and scores them against
/// anchors.
#[derive(Clone)]
pub struct Aligner {
    pub config: AlignmentConfig,
    encoder: Arc<dyn TextEncoder>,
    prompt_user: Mat,
    prompt_item: Mat,
}

impl Aligner {
    pub fn new(config: AlignmentConfig, encoder: Arc<dyn TextEncoder>, tokens: &dyn TokenEmbedder) -> Result<Self> {
        config.validate()?;
        if tokens.dim() != encoder.input_dim() {
            return Err(FaceError::Shape(format!(
                "token embeddings have width {} but the encoder expects {}",
                tokens.dim(),
                encoder.input_dim()
            )));
        }
        let prompt_user = tokens.embed_text(&config.prompt_user);
        let prompt_item = tokens.embed_text(&config.prompt_item);
        Ok(Self {
            config,
            encoder,
            prompt_user,
            prompt_item,
        })
    }

    pub fn encoder(&self) -> &dyn TextEncoder {
        self.encoder.as_ref()
    }

    pub fn prompt(&self, kind: EntityKind) -> &Mat {
        match kind {
            EntityKind::User => &self.prompt_user,
            EntityKind::Item => &self.prompt_item,
        }
    }

    /// Differentiable `h_d` for `[B·n × d]` descriptor vectors of one kind.
    /// `W⁺` enters as a constant.
    pub fn embed_batch(&self, tape: &mut Tape, descriptors: Var, n: usize, pinv: &PseudoInverse, kind: EntityKind) -> Var {
        let lift = tape.constant(pinv.matrix.clone());
        let lifted = tape.matmul_t(descriptors, lift);
        self.encoder.encode_batch(tape, self.prompt(kind).view(), lifted, n)
    }

    /// Gradient-free `h_d` for each entity given its `[n × d]` descriptors.
    pub fn embed_values(&self, descriptors: ArrayView2<f64>, n: usize, pinv: &PseudoInverse, kind: EntityKind) -> Result<Mat> {
        let entities = descriptors.nrows() / n;
        let mut out = Array2::zeros((entities, self.encoder.output_dim()));
        for b in 0..entities {
            let z = descriptors.slice(ndarray::s![b * n..(b + 1) * n, ..]);
            let sentence = build_sentence(z, pinv, self.prompt(kind))?;
            out.row_mut(b).assign(&self.encoder.encode_vectors(sentence.sequence().view()));
        }
        Ok(out)
    }
}

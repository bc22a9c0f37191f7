//! The frozen token codebook, its trainable projection, nearest-codeword
//! search and the projection's right pseudo-inverse.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::data::read_f32_matrix;
use crate::error::{FaceError, Result};
use crate::nn::init;
use crate::params::{ParamId, ParamStore};

/// Word-start markers used by byte-level BPE (`Ġ`) and SentencePiece (`▁`).
const WORD_START_MARKERS: [char; 2] = ['\u{0120}', '\u{2581}'];
const CONTINUATION_PREFIX: &str = "##";

#[derive(Clone, Debug)]
pub struct VocabFilter {
    allowlist: HashMap<String, usize>,
    pub min_token_len: usize,
    pub max_tokens: usize,
    /// Treat tokens without a word-start marker as subword continuations
    /// (SentencePiece-style vocabularies).
    pub require_word_start_marker: bool,
}

impl VocabFilter {
    /// `words` are ranked by position: earlier words win when the result is
    /// capped at `max_tokens`.
    pub fn new(words: &[String], min_token_len: usize, max_tokens: usize) -> Result<Self> {
        let mut allowlist = HashMap::new();
        for (rank, w) in words.iter().enumerate() {
            let w = w.trim().to_lowercase();
            if !w.is_empty() {
                allowlist.entry(w).or_insert(rank);
            }
        }
        if allowlist.is_empty() {
            return Err(FaceError::Config("word allowlist is empty".into()));
        }
        Ok(Self {
            allowlist,
            min_token_len,
            max_tokens,
            require_word_start_marker: false,
        })
    }

    pub fn allowlist_len(&self) -> usize {
        self.allowlist.len()
    }

    /// The lowercase word a token stands for, or `None` if the token is a
    /// subword piece or otherwise not a usable word.
    pub fn accept(&self, token: &str) -> Option<(String, usize)> {
        if token.starts_with(CONTINUATION_PREFIX) {
            return None;
        }
        let stripped = token.trim_start_matches(WORD_START_MARKERS);
        if self.require_word_start_marker && stripped.len() == token.len() {
            return None;
        }
        let word = stripped.to_lowercase();
        if word.is_empty() || !word.chars().all(char::is_alphabetic) {
            return None;
        }
        if word.chars().count() < self.min_token_len {
            return None;
        }
        let rank = *self.allowlist.get(&word)?;
        Some((word, rank))
    }
}

pub fn load_wordlist(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| FaceError::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Tokens surviving the filter and their rows in the source embedding matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilteredVocab {
    pub tokens: Vec<String>,
    pub source_rows: Vec<usize>,
}

/// Keeps whole alphabetic words present in the allowlist, in source order.
/// Later spellings of an already-kept word are dropped. When more than
/// `max_tokens` survive, the best-ranked allowlist words are kept.
pub fn filter_vocabulary(raw_vocab: &[(String, usize)], filter: &VocabFilter) -> Result<FilteredVocab> {
    if raw_vocab.is_empty() {
        return Err(FaceError::EmptyInput("raw vocabulary".into()));
    }
    let mut seen = HashSet::new();
    let mut kept: Vec<(String, usize, usize)> = Vec::new();
    for (token, row) in raw_vocab {
        if let Some((word, rank)) = filter.accept(token) {
            if seen.insert(word.clone()) {
                kept.push((word, *row, rank));
            }
        }
    }
    if kept.len() > filter.max_tokens {
        let mut by_rank: Vec<usize> = (0..kept.len()).collect();
        by_rank.sort_by_key(|&k| (kept[k].2, k));
        let keep: HashSet<usize> = by_rank.into_iter().take(filter.max_tokens).collect();
        kept = kept
            .into_iter()
            .enumerate()
            .filter(|(k, _)| keep.contains(k))
            .map(|(_, v)| v)
            .collect();
    }
    if kept.is_empty() {
        return Err(FaceError::Config(
            "vocabulary filter removed every token; check the word list".into(),
        ));
    }
    Ok(FilteredVocab {
        tokens: kept.iter().map(|k| k.0.clone()).collect(),
        source_rows: kept.iter().map(|k| k.1).collect(),
    })
}

/// Reads `vocab_tokens.txt` and `vocab_embeddings.bin` (row-aligned).
pub fn load_vocab_export(tokens: &Path, embeddings: &Path) -> Result<(Vec<(String, usize)>, Mat)> {
    let text = fs::read_to_string(tokens).map_err(|e| FaceError::io(tokens, e))?;
    let raw: Vec<(String, usize)> = text
        .lines()
        .enumerate()
        .map(|(row, t)| (t.trim_end_matches('\r').to_string(), row))
        .collect();
    let matrix = read_f32_matrix(embeddings)?.mapv(f64::from);
    if matrix.nrows() != raw.len() {
        return Err(FaceError::Shape(format!(
            "{} lists {} tokens but {} has {} rows",
            tokens.display(),
            raw.len(),
            embeddings.display(),
            matrix.nrows()
        )));
    }
    Ok((raw, matrix))
}

/// `C = C₀ · W_cᵀ`: row `j` is `W_c` applied to frozen row `j`.
pub fn project_codebook(frozen: ArrayView2<f64>, projection: ArrayView2<f64>) -> Result<Mat> {
    if projection.ncols() != frozen.ncols() {
        return Err(FaceError::Shape(format!(
            "projection is {}x{} but frozen embeddings have width {}",
            projection.nrows(),
            projection.ncols(),
            frozen.ncols()
        )));
    }
    Ok(frozen.dot(&projection.t()))
}

pub fn squared_norms(codebook: ArrayView2<f64>) -> Vec<f64> {
    codebook.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Index of the codeword closest to `r` in squared Euclidean distance; ties
/// go to the lowest index. `sq_norms` must hold `‖c_j‖²` for every row.
pub fn nearest_index(r: ArrayView1<f64>, codebook: ArrayView2<f64>, sq_norms: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (j, c) in codebook.rows().into_iter().enumerate() {
        // ‖r - c‖² minus the constant ‖r‖²
        let score = sq_norms[j] - 2.0 * r.dot(&c);
        if score < best_score {
            best_score = score;
            best = j;
        }
    }
    best
}

/// Row-wise [`nearest_index`] for a batch, scoring all rows with one matrix
/// product.
pub fn nearest_indices(rows: ArrayView2<f64>, codebook: ArrayView2<f64>, sq_norms: &[f64]) -> Vec<usize> {
    let dots = rows.dot(&codebook.t());
    dots.rows()
        .into_iter()
        .map(|d| {
            let mut best = 0;
            let mut best_score = f64::INFINITY;
            for (j, &x) in d.iter().enumerate() {
                let score = sq_norms[j] - 2.0 * x;
                if score < best_score {
                    best_score = score;
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn nearest_codeword<'a>(
    r: ArrayView1<f64>,
    codebook: ArrayView2<'a, f64>,
    sq_norms: &[f64],
) -> Result<(usize, ArrayView1<'a, f64>)> {
    if codebook.nrows() == 0 {
        return Err(FaceError::EmptyInput("codebook".into()));
    }
    if r.len() != codebook.ncols() {
        return Err(FaceError::Shape(format!(
            "query width {} vs codeword width {}",
            r.len(),
            codebook.ncols()
        )));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(FaceError::Data("non-finite query vector".into()));
    }
    let k = nearest_index(r, codebook, sq_norms);
    Ok((k, codebook.index_axis_move(Axis(0), k)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoInverse {
    /// `W⁺` with shape `[d_llm × d]`.
    pub matrix: Mat,
    /// Set when `W Wᵀ` was singular and a ridge term was added.
    pub regularized: bool,
}

pub const PINV_RIDGE: f64 = 1e-8;

/// In-place Cholesky of a symmetric matrix; `None` if not positive definite.
fn cholesky(a: &Mat) -> Option<Mat> {
    let n = a.nrows();
    let max_diag = a.diag().iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= tol {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solves `L Lᵀ X = B` for `X`.
fn cholesky_solve(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for k in i + 1..n {
                s -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    x
}

/// Right inverse `W⁺ = Wᵀ (W Wᵀ)⁻¹` of a wide projection `W [d × d_llm]`.
/// A singular Gram matrix is solved with a `1e-8` ridge and flagged.
pub fn pseudo_inverse(w: ArrayView2<f64>) -> Result<PseudoInverse> {
    let (d, wide) = w.dim();
    if d == 0 || d > wide {
        return Err(FaceError::Shape(format!(
            "pseudo-inverse expects a wide matrix, got {d}x{wide}"
        )));
    }
    let gram = w.dot(&w.t());
    let (l, regularized) = match cholesky(&gram) {
        Some(l) => (l, false),
        None => {
            warn!("projection matrix is rank deficient; using ridge-regularized pseudo-inverse");
            let ridged = &gram + &(Array2::<f64>::eye(d) * PINV_RIDGE);
            let l = cholesky(&ridged)
                .ok_or_else(|| FaceError::Data("projection Gram matrix is not finite".into()))?;
            (l, true)
        }
    };
    // (W Wᵀ)⁻¹ W, transposed
    let solved = cholesky_solve(&l, &w.to_owned());
    Ok(PseudoInverse {
        matrix: solved.reversed_axes().as_standard_layout().to_owned(),
        regularized,
    })
}

/// Cached `C` and `‖c_j‖²`, tagged with the projection version it was built
/// from.
#[derive(Clone, Debug)]
pub struct Projected {
    pub matrix: Mat,
    pub sq_norms: Vec<f64>,
    version: u64,
}

impl Projected {
    /// A standalone projected codebook not tied to any parameter store.
    pub fn from_matrix(matrix: Mat) -> Self {
        let sq_norms = squared_norms(matrix.view());
        Self {
            matrix,
            sq_norms,
            version: u64::MAX,
        }
    }
}

/// Frozen token embeddings `C₀` plus the trainable projection `W_c`, which
/// lives in the shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Codebook {
    tokens: Vec<String>,
    token_index: HashMap<String, usize>,
    frozen: Mat,
    projection: ParamId,
    cache: Option<Projected>,
}

impl Codebook {
    pub const PROJECTION_PARAM: &'static str = "codebook.projection";

    /// Registers `W_c` with orthonormal rows scaled by `init_scale`.
    pub fn new<R: Rng + ?Sized>(
        tokens: Vec<String>,
        frozen: Mat,
        dim: usize,
        init_scale: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if tokens.len() != frozen.nrows() {
            return Err(FaceError::Shape(format!(
                "{} tokens for {} embedding rows",
                tokens.len(),
                frozen.nrows()
            )));
        }
        if tokens.is_empty() {
            return Err(FaceError::EmptyInput("codebook".into()));
        }
        if dim >= frozen.ncols() {
            return Err(FaceError::Config(format!(
                "quantization dim {dim} must be smaller than token embedding dim {}",
                frozen.ncols()
            )));
        }
        let w = init::orthogonal(dim, frozen.ncols(), rng) * init_scale;
        let projection = store.add(Self::PROJECTION_PARAM, w);
        let token_index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            tokens,
            token_index,
            frozen,
            projection,
            cache: None,
        })
    }

    /// Builds from a filtered vocabulary, copying the selected source rows.
    pub fn from_vocab<R: Rng + ?Sized>(
        vocab: &FilteredVocab,
        source: &Mat,
        dim: usize,
        init_scale: f64,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let frozen = source.select(Axis(0), &vocab.source_rows);
        Self::new(vocab.tokens.clone(), frozen, dim, init_scale, store, rng)
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

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn frozen(&self) -> &Mat {
        &self.frozen
    }

    pub fn llm_dim(&self) -> usize {
        self.frozen.ncols()
    }

    pub fn projection(&self) -> ParamId {
        self.projection
    }

    /// SHA-256 over the little-endian bytes of `C₀`.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.frozen.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// The projected codebook, rebuilt if `W_c` changed since the last call.
    pub fn projected(&mut self, store: &ParamStore) -> &Projected {
        let version = store.version(self.projection);
        let stale = self.cache.as_ref().is_none_or(|c| c.version != version);
        if stale {
            let matrix = project_codebook(self.frozen.view(), store.get(self.projection).view())
                .expect("projection shape fixed at construction");
            let sq_norms = squared_norms(matrix.view());
            self.cache = Some(Projected {
                matrix,
                sq_norms,
                version,
            });
        }
        self.cache.as_ref().unwrap()
    }

    /// `C₀` alongside the refreshed projected cache.
    pub fn frozen_and_projected(&mut self, store: &ParamStore) -> (&Mat, &Projected) {
        self.projected(store);
        (&self.frozen, self.cache.as_ref().unwrap())
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        let key = token.trim().to_lowercase();
        self.token_index.get(&key).copied().ok_or_else(|| FaceError::UnknownToken {
            token: token.to_string(),
            suggestions: self.suggest(&key, 3),
        })
    }

    /// Vocabulary entries closest to `token` by edit distance.
    pub fn suggest(&self, token: &str, count: usize) -> Vec<String> {
        let mut scored: Vec<(usize, &String)> =
            self.tokens.iter().map(|t| (levenshtein(token, t), t)).collect();
        scored.sort();
        scored.into_iter().take(count).map(|(_, t)| t.clone()).collect()
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

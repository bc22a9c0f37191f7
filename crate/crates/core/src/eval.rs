//! All-ranking top-K evaluation, descriptor diagnostics and the
//! nearest-anchor retrieval probe.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::cosine;
use crate::autograd::Mat;
use crate::backbone::EmbeddingTable;
use crate::data::{InteractionDataset, Split};
use crate::error::{FaceError, Result};

/// `|top-N ∩ relevant| / |relevant|`. Returns 0 for an empty relevant set.
pub fn recall_at(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(n).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with gain `1/log₂(rank + 1)`, normalized by the ideal
/// DCG over `min(|relevant|, N)` positions.
pub fn ndcg_at(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(n)).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    dcg / ideal
}

/// Anything that can score every item for a block of users.
pub trait Scorer: Sync {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    /// `[users.len() × num_items]` scores.
    fn score_users(&self, users: &[usize]) -> Mat;
}

impl Scorer for EmbeddingTable {
    fn num_users(&self) -> usize {
        self.users.nrows()
    }

    fn num_items(&self) -> usize {
        self.items.nrows()
    }

    fn score_users(&self, users: &[usize]) -> Mat {
        EmbeddingTable::score_users(self, users)
    }
}

/// A dense user × item score matrix.
impl Scorer for Mat {
    fn num_users(&self) -> usize {
        self.nrows()
    }

    fn num_items(&self) -> usize {
        self.ncols()
    }

    fn score_users(&self, users: &[usize]) -> Mat {
        self.select(Axis(0), users)
    }
}

/// Descending score, then ascending item index.
fn rank_order(scores: ArrayView1<'_, f64>) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top `k` of `candidates` under [`rank_order`].
pub fn top_k(scores: ArrayView1<f64>, mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    let cmp = rank_order(scores);
    if k == 0 {
        return Vec::new();
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, &cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(&cmp);
    candidates
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: usize,
    /// The top `max(Ns)` candidates.
    pub ranked: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub split: Split,
    pub cutoffs: Vec<usize>,
    pub users_evaluated: usize,
    /// Keys like `recall@20`, `ndcg@5`.
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip)]
    pub rankings: Vec<UserRanking>,
}

impl RankingResult {
    pub fn recall(&self, n: usize) -> f64 {
        self.metrics.get(&format!("recall@{n}")).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, n: usize) -> f64 {
        self.metrics.get(&format!("ndcg@{n}")).copied().unwrap_or(f64::NAN)
    }
}

/// Splits whose items are removed from the candidate list when evaluating
/// `target`: train for validation, train and validation for test.
pub fn masked_splits(target: Split) -> &'static [Split] {
    match target {
        Split::Train => &[],
        Split::Val => &[Split::Train],
        Split::Test => &[Split::Train, Split::Val],
    }
}

/// Scores every non-masked item for each user with at least one `target`
/// interaction, ranks them, and averages Recall@N and NDCG@N over those users.
pub fn evaluate_all_ranking<S: Scorer + ?Sized>(
    model: &S,
    ds: &InteractionDataset,
    target: Split,
    cutoffs: &[usize],
) -> Result<RankingResult> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(FaceError::Config("cutoffs must be a non-empty list of positive integers".into()));
    }
    if model.num_users() != ds.num_users || model.num_items() != ds.num_items {
        return Err(FaceError::Shape(format!(
            "model scores {}x{} entities, dataset has {}x{}",
            model.num_users(),
            model.num_items(),
            ds.num_users,
            ds.num_items
        )));
    }
    let relevant = ds.user_items(target);
    let mut masked: Vec<HashSet<usize>> = vec![HashSet::new(); ds.num_users];
    for &split in masked_splits(target) {
        for (u, i) in ds.edges_in(split) {
            masked[u].insert(i);
        }
    }
    let users: Vec<usize> = (0..ds.num_users).filter(|&u| !relevant[u].is_empty()).collect();
    let depth = *cutoffs.iter().max().unwrap();

    let per_user: Vec<(UserRanking, Vec<f64>)> = users
        .par_chunks(256)
        .flat_map_iter(|block| {
            let scores = model.score_users(block);
            let masked = &masked;
            let relevant = &relevant;
            block.iter().enumerate().map(move |(row, &u)| {
                let candidates: Vec<usize> = (0..ds.num_items).filter(|i| !masked[u].contains(i)).collect();
                let ranked = top_k(scores.row(row), candidates, depth);
                debug_assert!(ranked.iter().all(|i| !masked[u].contains(i)));
                let rel: HashSet<usize> = relevant[u].iter().copied().collect();
                let mut values = Vec::with_capacity(cutoffs.len() * 2);
                for &n in cutoffs {
                    values.push(recall_at(&ranked, &rel, n));
                    values.push(ndcg_at(&ranked, &rel, n));
                }
                (UserRanking { user: u, ranked }, values)
            })
        })
        .collect();

    let mut sums = vec![0.0; cutoffs.len() * 2];
    for (_, values) in &per_user {
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
    }
    let count = per_user.len();
    let mut metrics = BTreeMap::new();
    for (c, &n) in cutoffs.iter().enumerate() {
        let denom = count.max(1) as f64;
        metrics.insert(format!("recall@{n}"), sums[2 * c] / denom);
        metrics.insert(format!("ndcg@{n}"), sums[2 * c + 1] / denom);
    }
    Ok(RankingResult {
        split: target,
        cutoffs: cutoffs.to_vec(),
        users_evaluated: count,
        metrics,
        rankings: per_user.into_iter().map(|(r, _)| r).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorReport {
    pub entities: usize,
    pub vocab_size: usize,
    /// Distinct level-1 tokens used by any entity.
    pub distinct_tokens: usize,
    /// `distinct_tokens / vocab_size`.
    pub utilization: f64,
    /// Mean over entities of distinct tokens / n.
    pub mean_uniqueness: f64,
    /// `(token id, count)` sorted by count descending, then id.
    pub histogram: Vec<(usize, usize)>,
}

pub fn descriptor_diagnostics(descriptors: &[Vec<usize>], vocab_size: usize) -> DescriptorReport {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut uniqueness = 0.0;
    for tokens in descriptors {
        for &t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        if !tokens.is_empty() {
            let distinct: HashSet<usize> = tokens.iter().copied().collect();
            uniqueness += distinct.len() as f64 / tokens.len() as f64;
        }
    }
    let mut histogram: Vec<(usize, usize)> = counts.into_iter().collect();
    histogram.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let distinct_tokens = histogram.len();
    DescriptorReport {
        entities: descriptors.len(),
        vocab_size,
        distinct_tokens,
        utilization: if vocab_size == 0 { 0.0 } else { distinct_tokens as f64 / vocab_size as f64 },
        mean_uniqueness: if descriptors.is_empty() { 0.0 } else { uniqueness / descriptors.len() as f64 },
        histogram,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub candidates: usize,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `1 / l`.
    pub chance: f64,
    /// Binomial standard deviation of the accuracy at chance level.
    pub chance_sigma: f64,
}

impl ProbeResult {
    /// How many chance-level standard deviations the accuracy sits above `1/l`.
    pub fn z_score(&self) -> f64 {
        (self.accuracy - self.chance) / self.chance_sigma
    }
}

/// Each trial draws a target entity and `l − 1` distinct distractors; the
/// trial succeeds when the target's anchor has strictly the highest cosine
/// with the target's descriptor embedding.
pub fn retrieval_probe<R: Rng + ?Sized>(
    h_d: ArrayView2<f64>,
    h_s: ArrayView2<f64>,
    l: usize,
    trials: usize,
    rng: &mut R,
) -> Result<ProbeResult> {
    if h_d.dim() != h_s.dim() {
        return Err(FaceError::Shape(format!("descriptor {:?} vs anchor {:?}", h_d.dim(), h_s.dim())));
    }
    if l < 2 {
        return Err(FaceError::Config("retrieval probe needs at least 2 candidates".into()));
    }
    let m = h_d.nrows();
    if m < l {
        return Err(FaceError::Config(format!("{m} entities cannot supply {l} distinct candidates")));
    }
    let mut correct = 0;
    for _ in 0..trials {
        let target = rng.random_range(0..m);
        let own = cosine(h_d.row(target), h_s.row(target));
        let best_distractor = index::sample(rng, m - 1, l - 1)
            .into_iter()
            .map(|j| if j >= target { j + 1 } else { j })
            .map(|j| cosine(h_d.row(target), h_s.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        if own > best_distractor {
            correct += 1;
        }
    }
    let chance = 1.0 / l as f64;
    Ok(ProbeResult {
        candidates: l,
        trials,
        correct,
        accuracy: correct as f64 / trials.max(1) as f64,
        chance,
        chance_sigma: (chance * (1.0 - chance) / trials.max(1) as f64).sqrt(),
    })
}

/// Mean 1-based rank of each row's own anchor among all anchors by cosine
/// with its descriptor embedding. Ties count against the true pair.
pub fn mean_correct_pair_rank(h_d: ArrayView2<f64>, h_s: ArrayView2<f64>) -> Result<f64> {
    if h_d.dim() != h_s.dim() || h_d.nrows() == 0 {
        return Err(FaceError::Shape(format!("descriptor {:?} vs anchor {:?}", h_d.dim(), h_s.dim())));
    }
    let m = h_d.nrows();
    let ranks: Vec<usize> = (0..m)
        .into_par_iter()
        .map(|v| {
            let own = cosine(h_d.row(v), h_s.row(v));
            1 + (0..m).filter(|&w| w != v && cosine(h_d.row(v), h_s.row(w)) >= own).count()
        })
        .collect();
    Ok(ranks.iter().sum::<usize>() as f64 / m as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_secs: f64,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        fs::write(path, body + "\n").map_err(|e| FaceError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| FaceError::io(path, e))?;
        Ok(serde_json::from_str(&body)?)
    }

    /// Equality ignoring wall time.
    pub fn same_results(&self, other: &Self) -> bool {
        self.metrics == other.metrics && self.config_hash == other.config_hash && self.checkpoint == other.checkpoint
    }
}

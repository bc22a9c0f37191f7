//! Collaborative-filtering backbones producing the user and item
//! representations the mapper consumes.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Mat, Tape, Var};
use crate::data::{InteractionDataset, Split};
use crate::error::{FaceError, Result};
use crate::nn::init;
use crate::params::{Bound, ParamId, ParamStore};
use crate::sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gmf,
    LightGcn,
}

/// Final user and item representations.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub users: Mat,
    pub items: Mat,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub fn score(&self, user: usize, item: usize) -> Result<f64> {
        gmf_forward(self, user, item)
    }

    /// `users · itemsᵀ` for a block of users.
    pub fn score_users(&self, users: &[usize]) -> Mat {
        self.users.select(Axis(0), users).dot(&self.items.t())
    }
}

/// Inner-product score of one user/item pair.
pub fn gmf_forward(table: &EmbeddingTable, user: usize, item: usize) -> Result<f64> {
    if user >= table.users.nrows() {
        return Err(FaceError::IndexOutOfRange {
            kind: "user",
            index: user,
            size: table.users.nrows(),
        });
    }
    if item >= table.items.nrows() {
        return Err(FaceError::IndexOutOfRange {
            kind: "item",
            index: item,
            size: table.items.nrows(),
        });
    }
    Ok(table.users.row(user).dot(&table.items.row(item)))
}

/// `-ln σ(pos - neg)`, evaluated as `softplus(neg - pos)`.
pub fn bpr_loss(pos_score: f64, neg_score: f64) -> f64 {
    softplus(neg_score - pos_score)
}

/// User–item graph over train edges with the symmetric normalized adjacency
/// of the stacked `(users + items)` node set.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    pub user_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
    adjacency: Arc<CsrMatrix>,
}

impl BipartiteGraph {
    pub fn new(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Self {
        let mut user_degree = vec![0; num_users];
        let mut item_degree = vec![0; num_items];
        for &(u, i) in edges {
            user_degree[u] += 1;
            item_degree[i] += 1;
        }
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(u, i) in edges {
            let w = 1.0 / ((user_degree[u] * item_degree[i]) as f64).sqrt();
            triplets.push((u, num_users + i, w));
            triplets.push((num_users + i, u, w));
        }
        let n = num_users + num_items;
        Self {
            num_users,
            num_items,
            user_degree,
            item_degree,
            adjacency: Arc::new(CsrMatrix::from_triplets(n, n, &triplets)),
        }
    }

    pub fn from_dataset(ds: &InteractionDataset) -> Self {
        let edges: Vec<_> = ds.edges_in(Split::Train).collect();
        Self::new(ds.num_users, ds.num_items, &edges)
    }

    pub fn normalized_adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adjacency
    }
}

/// Mean of layer-0..`layers` propagated embeddings. Isolated nodes receive a
/// zero contribution from every layer above 0.
pub fn lightgcn_propagate(
    table: &EmbeddingTable,
    graph: &BipartiteGraph,
    layers: usize,
) -> Result<EmbeddingTable> {
    if table.users.nrows() != graph.num_users || table.items.nrows() != graph.num_items {
        return Err(FaceError::Shape(format!(
            "table {}+{} rows vs graph {}+{} nodes",
            table.users.nrows(),
            table.items.nrows(),
            graph.num_users,
            graph.num_items
        )));
    }
    let stacked = ndarray::concatenate(Axis(0), &[table.users.view(), table.items.view()])
        .map_err(|e| FaceError::Shape(e.to_string()))?;
    let mut current = stacked.clone();
    let mut total = stacked;
    for _ in 0..layers {
        current = graph.adjacency.mul_dense(current.view());
        total += &current;
    }
    total /= (layers + 1) as f64;
    Ok(EmbeddingTable {
        users: total.slice(s![..graph.num_users, ..]).to_owned(),
        items: total.slice(s![graph.num_users.., ..]).to_owned(),
    })
}

/// One `(user, positive item, negative item)` training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Shuffles the train edges and pairs each with a uniformly drawn item the
/// user has not interacted with in train. Users who interacted with every
/// item are skipped.
pub fn sample_triples<R: Rng + ?Sized>(
    edges: &[(usize, usize)],
    train_items: &[Vec<usize>],
    num_items: usize,
    rng: &mut R,
) -> Vec<Triple> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(edges.len());
    for e in order {
        let (user, pos) = edges[e];
        let seen = &train_items[user];
        if seen.len() >= num_items {
            continue;
        }
        let neg = loop {
            let cand = rng.random_range(0..num_items);
            if seen.binary_search(&cand).is_err() {
                break cand;
            }
        };
        out.push(Triple { user, pos, neg });
    }
    out
}

/// Differentiable pieces of a backbone loss.
pub struct BackboneLoss {
    /// Mean BPR term.
    pub ranking: Var,
    /// Ranking term plus L2 regularization on the batch's layer-0 embeddings.
    pub total: Var,
}

/// A CF model usable underneath the mapper: it must expose its final
/// representations both as plain matrices and on the tape.
pub trait Backbone: Send + Sync {
    fn kind(&self) -> BackboneKind;

    /// Layer-0 user and item embedding parameters.
    fn ego(&self) -> (ParamId, ParamId);

    fn final_embeddings(&self, store: &ParamStore) -> EmbeddingTable;

    /// Final user and item representations on the tape.
    fn forward(&self, tape: &mut Tape, p: &Bound) -> (Var, Var);

    /// BPR with uniform negatives plus `reg/2 · (‖e_u‖² + ‖e_i⁺‖² + ‖e_i⁻‖²)`
    /// averaged over the batch.
    fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        finals: (Var, Var),
        batch: &[Triple],
        reg: f64,
    ) -> BackboneLoss {
        let (users, items) = finals;
        let u: Vec<usize> = batch.iter().map(|t| t.user).collect();
        let i: Vec<usize> = batch.iter().map(|t| t.pos).collect();
        let j: Vec<usize> = batch.iter().map(|t| t.neg).collect();
        let eu = tape.gather_rows(users, &u);
        let ei = tape.gather_rows(items, &i);
        let ej = tape.gather_rows(items, &j);
        let pos = tape.mul(eu, ei);
        let pos = tape.sum_cols(pos);
        let neg = tape.mul(eu, ej);
        let neg = tape.sum_cols(neg);
        let diff = tape.sub(neg, pos);
        let sp = tape.softplus(diff);
        let ranking = tape.mean_all(sp);
        let (ego_u, ego_i) = self.ego();
        let mut reg_terms = Vec::with_capacity(3);
        for (param, rows) in [(ego_u, &u), (ego_i, &i), (ego_i, &j)] {
            let rows = tape.gather_rows(p.var(param), rows);
            let sq = tape.square(rows);
            reg_terms.push(tape.sum_all(sq));
        }
        let r = tape.add(reg_terms[0], reg_terms[1]);
        let r = tape.add(r, reg_terms[2]);
        let r = tape.scale(r, 0.5 * reg / batch.len().max(1) as f64);
        let total = tape.add(ranking, r);
        BackboneLoss { ranking, total }
    }
}

const INIT_STD: f64 = 0.1;

fn init_tables<R: Rng + ?Sized>(
    store: &mut ParamStore,
    num_users: usize,
    num_items: usize,
    dim: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let users = store.add("backbone.user_embedding", init::normal(num_users, dim, INIT_STD, rng));
    let items = store.add("backbone.item_embedding", init::normal(num_items, dim, INIT_STD, rng));
    (users, items)
}

/// Matrix factorization scored by inner product.
#[derive(Clone, Debug)]
pub struct Gmf {
    users: ParamId,
    items: ParamId,
}

impl Gmf {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_users: usize,
        num_items: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let (users, items) = init_tables(store, num_users, num_items, dim, rng);
        Self { users, items }
    }
}

impl Backbone for Gmf {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Gmf
    }

    fn ego(&self) -> (ParamId, ParamId) {
        (self.users, self.items)
    }

    fn final_embeddings(&self, store: &ParamStore) -> EmbeddingTable {
        EmbeddingTable {
            users: store.get(self.users).clone(),
            items: store.get(self.items).clone(),
        }
    }

    fn forward(&self, _tape: &mut Tape, p: &Bound) -> (Var, Var) {
        (p.var(self.users), p.var(self.items))
    }
}

/// Linear graph propagation over the train bipartite graph.
#[derive(Clone, Debug)]
pub struct LightGcn {
    users: ParamId,
    items: ParamId,
    graph: Arc<BipartiteGraph>,
    layers: usize,
}

impl LightGcn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        graph: Arc<BipartiteGraph>,
        dim: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let (users, items) = init_tables(store, graph.num_users, graph.num_items, dim, rng);
        Self {
            users,
            items,
            graph,
            layers,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
}

impl Backbone for LightGcn {
    fn kind(&self) -> BackboneKind {
        BackboneKind::LightGcn
    }

    fn ego(&self) -> (ParamId, ParamId) {
        (self.users, self.items)
    }

    fn final_embeddings(&self, store: &ParamStore) -> EmbeddingTable {
        let table = EmbeddingTable {
            users: store.get(self.users).clone(),
            items: store.get(self.items).clone(),
        };
        lightgcn_propagate(&table, &self.graph, self.layers).expect("graph matches table")
    }

    fn forward(&self, tape: &mut Tape, p: &Bound) -> (Var, Var) {
        let stacked = tape.concat_rows(&[p.var(self.users), p.var(self.items)]);
        let mut current = stacked;
        let mut total = stacked;
        for _ in 0..self.layers {
            current = tape.sparse_matmul(self.graph.adjacency.clone(), current);
            total = tape.add(total, current);
        }
        let mean = tape.scale(total, 1.0 / (self.layers + 1) as f64);
        let users = tape.slice_rows(mean, 0, self.graph.num_users);
        let items = tape.slice_rows(mean, self.graph.num_users, self.graph.num_items);
        (users, items)
    }
}

/// Dense normalized adjacency, for oracle comparisons in tests.
pub fn dense_normalized_adjacency(graph: &BipartiteGraph) -> Array2<f64> {
    graph.adjacency.to_dense()
}

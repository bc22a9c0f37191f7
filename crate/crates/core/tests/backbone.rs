mod common;

use std::sync::Arc;

use common::{max_relative_error, numeric_gradient, random_triples, rng, scalar_bpr, uniform};
use face_core::autograd::{Mat, Tape};
use face_core::backbone::{
    bpr_loss, lightgcn_propagate, Backbone, BipartiteGraph, EmbeddingTable, Gmf, LightGcn, Triple,
};
use face_core::params::ParamStore;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Dense `D^{-1/2} A D^{-1/2}` over stacked users then items.
fn dense_adjacency(nu: usize, ni: usize, edges: &[(usize, usize)]) -> Mat {
    let n = nu + ni;
    let mut a = Array2::<f64>::zeros((n, n));
    for &(u, i) in edges {
        a[[u, nu + i]] = 1.0;
        a[[nu + i, u]] = 1.0;
    }
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    for r in 0..n {
        for c in 0..n {
            if a[[r, c]] != 0.0 {
                a[[r, c]] /= (deg[r] * deg[c]).sqrt();
            }
        }
    }
    a
}

fn dense_propagate(x: &Mat, adj: &Mat, layers: usize) -> Mat {
    let mut cur = x.clone();
    let mut total = x.clone();
    for _ in 0..layers {
        cur = adj.dot(&cur);
        total += &cur;
    }
    total / (layers + 1) as f64
}

fn random_edges(g: &mut impl Rng, nu: usize, ni: usize, count: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..nu).flat_map(|u| (0..ni).map(move |i| (u, i))).collect();
    all.shuffle(g);
    all.truncate(count);
    all
}

fn tape_gradients(backbone: &dyn Backbone, store: &ParamStore, batch: &[Triple], reg: f64) -> (f64, Mat, Mat) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let finals = backbone.forward(&mut tape, &p);
    let loss = backbone.loss(&mut tape, &p, finals, batch, reg);
    let grads = tape.backward(loss.total);
    let (u, i) = backbone.ego();
    (
        tape.scalar(loss.total),
        grads.get(p.var(u)).unwrap().clone(),
        grads.get(p.var(i)).unwrap().clone(),
    )
}

#[test]
fn gmf_bpr_gradient_matches_finite_differences() {
    let mut g = rng(21);
    let mut store = ParamStore::new();
    let gmf = Gmf::new(&mut store, 5, 7, 4, &mut g);
    let batch = random_triples(&mut g, 5, 7, 9);
    let reg = 0.01;
    let (eu, ei) = gmf.ego();
    let (users, items) = (store.get(eu).clone(), store.get(ei).clone());
    let (value, gu, gi) = tape_gradients(&gmf, &store, &batch, reg);
    assert!((value - scalar_bpr((&users, &items), (&users, &items), &batch, reg)).abs() < 1e-12);
    let nu = numeric_gradient(&users, 1e-6, |u| scalar_bpr((u, &items), (u, &items), &batch, reg));
    let ni = numeric_gradient(&items, 1e-6, |i| scalar_bpr((&users, i), (&users, i), &batch, reg));
    assert!(max_relative_error(&gu, &nu) < 1e-4);
    assert!(max_relative_error(&gi, &ni) < 1e-4);
}

#[test]
fn lightgcn_bpr_gradient_matches_finite_differences() {
    let mut g = rng(22);
    let (nu, ni) = (4, 6);
    let edges = random_edges(&mut g, nu, ni, 11);
    let graph = Arc::new(BipartiteGraph::new(nu, ni, &edges));
    let adj = dense_adjacency(nu, ni, &edges);
    let mut store = ParamStore::new();
    let model = LightGcn::new(&mut store, graph, 3, 2, &mut g);
    let batch = random_triples(&mut g, nu, ni, 8);
    let reg = 1e-3;
    let (eu, ei) = model.ego();
    let (users, items) = (store.get(eu).clone(), store.get(ei).clone());
    let oracle = |u: &Mat, i: &Mat| {
        let stacked = ndarray::concatenate(Axis(0), &[u.view(), i.view()]).unwrap();
        let out = dense_propagate(&stacked, &adj, 2);
        let fu = out.slice(ndarray::s![..nu, ..]).to_owned();
        let fi = out.slice(ndarray::s![nu.., ..]).to_owned();
        scalar_bpr((&fu, &fi), (u, i), &batch, reg)
    };
    let (value, gu, gi) = tape_gradients(&model, &store, &batch, reg);
    assert!((value - oracle(&users, &items)).abs() < 1e-12);
    let nu_grad = numeric_gradient(&users, 1e-6, |u| oracle(u, &items));
    let ni_grad = numeric_gradient(&items, 1e-6, |i| oracle(&users, i));
    assert!(max_relative_error(&gu, &nu_grad) < 1e-4);
    assert!(max_relative_error(&gi, &ni_grad) < 1e-4);
}

#[test]
fn bpr_is_stable_at_extreme_margins() {
    assert!((bpr_loss(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bpr_loss(800.0, 0.0) < 1e-300);
    assert!((bpr_loss(0.0, 800.0) - 800.0).abs() < 1e-9);
    assert!(bpr_loss(3.0, 1.0) < bpr_loss(1.0, 3.0));
}

#[test]
fn path_graph_matches_hand_computed_propagation() {
    // u0 - i0 - u1: degrees 1, 1 and 2, every edge weight 1/√2
    let edges = [(0, 0), (1, 0)];
    let graph = BipartiteGraph::new(2, 1, &edges);
    let table = EmbeddingTable {
        users: ndarray::array![[1.0], [0.0]],
        items: ndarray::array![[0.0]],
    };
    let out = lightgcn_propagate(&table, &graph, 2).unwrap();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    // layer 1: i0 = s; layer 2: u0 = u1 = s·s = 0.5
    assert!((out.users[[0, 0]] - (1.0 + 0.0 + 0.5) / 3.0).abs() < 1e-15);
    assert!((out.users[[1, 0]] - 0.5 / 3.0).abs() < 1e-15);
    assert!((out.items[[0, 0]] - s / 3.0).abs() < 1e-15);
}

#[test]
fn regular_graph_preserves_constant_embeddings() {
    // K_{2,2}: every normalized row sums to 1, so all-ones is a fixed point
    let edges = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let graph = BipartiteGraph::new(2, 2, &edges);
    let table = EmbeddingTable {
        users: Array2::ones((2, 3)),
        items: Array2::ones((2, 3)),
    };
    for layers in 0..5 {
        let out = lightgcn_propagate(&table, &graph, layers).unwrap();
        assert!(out.users.iter().chain(out.items.iter()).all(|v| (v - 1.0).abs() < 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagation_matches_dense_oracle(seed in any::<u64>(), nu in 1usize..6, ni in 1usize..6, layers in 0usize..4) {
        let mut g = rng(seed);
        let count = g.random_range(1..=nu * ni);
        let edges = random_edges(&mut g, nu, ni, count);
        let graph = BipartiteGraph::new(nu, ni, &edges);
        let table = EmbeddingTable { users: uniform(&mut g, nu, 3), items: uniform(&mut g, ni, 3) };
        let out = lightgcn_propagate(&table, &graph, layers).unwrap();
        let stacked = ndarray::concatenate(Axis(0), &[table.users.view(), table.items.view()]).unwrap();
        let oracle = dense_propagate(&stacked, &dense_adjacency(nu, ni, &edges), layers);
        let got = ndarray::concatenate(Axis(0), &[out.users.view(), out.items.view()]).unwrap();
        for (a, b) in got.iter().zip(oracle.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn propagation_is_permutation_equivariant(seed in any::<u64>(), nu in 1usize..6, ni in 1usize..6) {
        let mut g = rng(seed);
        let count = g.random_range(1..=nu * ni);
        let edges = random_edges(&mut g, nu, ni, count);
        let table = EmbeddingTable { users: uniform(&mut g, nu, 2), items: uniform(&mut g, ni, 2) };
        let mut pu: Vec<usize> = (0..nu).collect();
        let mut pi: Vec<usize> = (0..ni).collect();
        pu.shuffle(&mut g);
        pi.shuffle(&mut g);
        // new index of old user u is pu[u]
        let mut inv_u = vec![0; nu];
        let mut inv_i = vec![0; ni];
        for (old, &new) in pu.iter().enumerate() { inv_u[new] = old; }
        for (old, &new) in pi.iter().enumerate() { inv_i[new] = old; }
        let moved: Vec<(usize, usize)> = edges.iter().map(|&(u, i)| (pu[u], pi[i])).collect();
        let moved_table = EmbeddingTable {
            users: table.users.select(Axis(0), &inv_u),
            items: table.items.select(Axis(0), &inv_i),
        };
        let a = lightgcn_propagate(&table, &BipartiteGraph::new(nu, ni, &edges), 3).unwrap();
        let b = lightgcn_propagate(&moved_table, &BipartiteGraph::new(nu, ni, &moved), 3).unwrap();
        for (u, &moved_u) in pu.iter().enumerate() {
            for k in 0..2 {
                prop_assert!((a.users[[u, k]] - b.users[[moved_u, k]]).abs() < 1e-12);
            }
        }
        for (i, &moved_i) in pi.iter().enumerate() {
            for k in 0..2 {
                prop_assert!((a.items[[i, k]] - b.items[[moved_i, k]]).abs() < 1e-12);
            }
        }
    }
}

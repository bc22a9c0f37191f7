//! Oracles and fixtures shared by the integration tests. The oracle
//! functions are plain loops that never call into the library.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use face_core::autograd::{Mat, Tape};
use face_core::backbone::Triple;
use face_core::codebook::{project_codebook, Projected};
use face_core::data::{EntityKind, InteractionDataset, Split};
use face_core::eval::{descriptor_diagnostics, MetricsReport};
use face_core::fixture::{write_fixture, FixtureSpec};
use face_core::mapper::{Mapper, MapperConfig, MapperForward};
use face_core::params::{ParamId, ParamStore};
use face_core::workspace::{self, Workspace, CUTOFFS};
use face_core::{TrainConfig, Trainer};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy residual quantization, scoring every codeword by its full squared
/// distance. Returns the codes and `r⁽¹⁾..r⁽ᴴ⁺¹⁾`.
pub fn brute_force_rq(z: &[f64], codebook: &Mat, levels: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut r = z.to_vec();
    let mut codes = Vec::new();
    let mut residuals = vec![r.clone()];
    for _ in 0..levels {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..codebook.nrows() {
            let c: Vec<f64> = codebook.row(j).to_vec();
            let d = sq_dist(&r, &c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        for (x, c) in r.iter_mut().zip(codebook.row(best)) {
            *x -= c;
        }
        codes.push(best);
        residuals.push(r.clone());
    }
    (codes, residuals)
}

/// Batch mean of `Σ (e_re − e)²`.
pub fn scalar_recons(e: &Mat, e_re: &Mat) -> f64 {
    let mut total = 0.0;
    for b in 0..e.nrows() {
        for k in 0..e.ncols() {
            let d = e_re[[b, k]] - e[[b, k]];
            total += d * d;
        }
    }
    total / e.nrows() as f64
}

/// `Σ_aspects Σ_levels ‖r − c‖² + β‖c − r‖²` averaged over `batch` entities,
/// replaying the residual chain from `z_e` and the given codes.
pub fn scalar_quantization(z_e: &Mat, codes: &[Vec<usize>], codebook: &Mat, beta: f64, batch: usize) -> f64 {
    let mut total = 0.0;
    for (row, row_codes) in codes.iter().enumerate() {
        let mut r: Vec<f64> = z_e.row(row).to_vec();
        for &k in row_codes {
            let mut gap = 0.0;
            for (x, c) in r.iter_mut().zip(codebook.row(k)) {
                gap += (*x - c) * (*x - c);
                *x -= c;
            }
            total += gap + beta * gap;
        }
    }
    total / batch as f64
}

pub fn scalar_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Mean over rows of `−ln softmax_j(cos(h_d_i, h_s_j) / τ)_i`, with a plain
/// sum of exponentials.
pub fn scalar_info_nce(h_d: &Mat, h_s: &Mat, tau: f64) -> f64 {
    let m = h_d.nrows();
    let mut total = 0.0;
    for i in 0..m {
        let di = h_d.row(i).to_vec();
        let mut denom = 0.0;
        for j in 0..m {
            denom += (scalar_cosine(&di, &h_s.row(j).to_vec()) / tau).exp();
        }
        let own = (scalar_cosine(&di, &h_s.row(i).to_vec()) / tau).exp();
        total += -(own / denom).ln();
    }
    total / m as f64
}

/// Mean `ln(1 + e^{s⁻ − s⁺})` plus the batch-averaged L2 term on layer-0 rows.
pub fn scalar_bpr(finals: (&Mat, &Mat), ego: (&Mat, &Mat), batch: &[Triple], reg: f64) -> f64 {
    let (fu, fi) = finals;
    let (eu, ei) = ego;
    let mut rank = 0.0;
    let mut l2 = 0.0;
    for t in batch {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for k in 0..fu.ncols() {
            pos += fu[[t.user, k]] * fi[[t.pos, k]];
            neg += fu[[t.user, k]] * fi[[t.neg, k]];
        }
        rank += (1.0 + (neg - pos).exp()).ln();
        for k in 0..eu.ncols() {
            l2 += eu[[t.user, k]].powi(2) + ei[[t.pos, k]].powi(2) + ei[[t.neg, k]].powi(2);
        }
    }
    let b = batch.len() as f64;
    rank / b + 0.5 * reg * l2 / b
}

pub fn random_triples(g: &mut impl Rng, nu: usize, ni: usize, size: usize) -> Vec<Triple> {
    (0..size)
        .map(|_| Triple {
            user: g.random_range(0..nu),
            pos: g.random_range(0..ni),
            neg: g.random_range(0..ni),
        })
        .collect()
}

/// Fully sorts `candidates` by descending score then ascending index.
pub fn full_sort(scores: &[f64], candidates: &[usize]) -> Vec<usize> {
    let mut v = candidates.to_vec();
    v.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]).unwrap() {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    v
}

/// Recall@N and NDCG@N of a full ranking by direct enumeration.
pub fn brute_force_metrics(ranked: &[usize], relevant: &HashSet<usize>, n: usize) -> (f64, f64) {
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(n).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 0..relevant.len().min(n) {
        idcg += 1.0 / ((pos + 2) as f64).log2();
    }
    (hits as f64 / relevant.len() as f64, dcg / idcg)
}

/// A random dataset whose users each hold some train, val and test items.
pub fn random_split_dataset(g: &mut impl Rng, users: usize, items: usize) -> InteractionDataset {
    let mut edges = Vec::new();
    let mut splits = Vec::new();
    for u in 0..users {
        let mut pool: Vec<usize> = (0..items).collect();
        pool.shuffle(g);
        let take = g.random_range(1..=items.min(12));
        for &i in &pool[..take] {
            edges.push((u, i));
            splits.push(match g.random_range(0..5) {
                0 => Split::Val,
                1 => Split::Test,
                _ => Split::Train,
            });
        }
    }
    InteractionDataset {
        num_users: users,
        num_items: items,
        edges,
        splits,
        user_ids: (0..users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..items).map(|i| format!("i{i}")).collect(),
    }
}

/// Mean brute-force metrics over users holding `target` items, with the
/// masked splits removed from the candidates.
pub fn brute_force_ranking(scores: &Array2<f64>, ds: &InteractionDataset, target: Split, n: usize) -> (f64, f64, usize) {
    let masked: &[Split] = match target {
        Split::Val => &[Split::Train],
        Split::Test => &[Split::Train, Split::Val],
        Split::Train => &[],
    };
    let (mut recall, mut ndcg, mut count) = (0.0, 0.0, 0usize);
    for u in 0..ds.num_users {
        let mut seen = HashSet::new();
        let mut relevant = HashSet::new();
        for (&(eu, i), &s) in ds.edges.iter().zip(&ds.splits) {
            if eu != u {
                continue;
            }
            if masked.contains(&s) {
                seen.insert(i);
            }
            if s == target {
                relevant.insert(i);
            }
        }
        if relevant.is_empty() {
            continue;
        }
        let candidates: Vec<usize> = (0..ds.num_items).filter(|i| !seen.contains(i)).collect();
        let row = scores.row(u).to_vec();
        let ranked = full_sort(&row, &candidates);
        let (r, d) = brute_force_metrics(&ranked, &relevant, n);
        recall += r;
        ndcg += d;
        count += 1;
    }
    (recall / count as f64, ndcg / count as f64, count)
}

/// Central difference of `f` with respect to each entry of `x`.
pub fn numeric_gradient(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest entrywise relative error, with absolute comparison near zero.
pub fn max_relative_error(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale < 1e-6 {
                (x - y).abs()
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

pub fn file_sha256(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Writes the synthetic fixture into `dir`, prepares it and embeds the
/// summaries with the stub encoder.
pub fn setup_workspace(dir: &Path, cfg: &TrainConfig) -> Workspace {
    write_fixture(dir, &FixtureSpec::default()).unwrap();
    let ws = Workspace::new(dir);
    let ds = workspace::prepare(&ws, cfg.seed).unwrap();
    let vocab = workspace::VocabSource::load(&ws).unwrap();
    workspace::embed_summaries(&ws, &ds, &vocab.text_provider(cfg).unwrap()).unwrap();
    ws
}

pub fn desk_config() -> TrainConfig {
    TrainConfig::desk()
}

/// A short schedule for tests that only need the pipeline to move.
pub fn quick_config(e1: usize, e2: usize, e3: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.epochs_stage1 = e1;
    cfg.epochs_stage2 = e2;
    cfg.epochs_stage3 = e3;
    cfg
}

/// Everything the end-to-end checks read from one complete fixture run.
pub struct DeskRun {
    pub dir: tempfile::TempDir,
    pub ws: Workspace,
    pub trainer: Trainer,
    pub elapsed: Duration,
    pub rank_after_stage2: f64,
    pub rank_after_stage3: f64,
    pub distinct_after_stage2: usize,
    pub frozen_hash: (String, String),
    pub anchors_hash: (String, String),
    pub report: MetricsReport,
}

pub fn desk_run(cfg: &TrainConfig) -> DeskRun {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ws = setup_workspace(dir.path(), cfg);
    let anchors_before = file_sha256(&ws.anchors());
    let mut trainer = workspace::build_trainer(&ws, cfg).unwrap();
    let frozen_before = trainer.model.codebook.frozen_hash();
    trainer.run_stage1().unwrap();
    trainer.run_stage2().unwrap();
    let rank_after_stage2 = trainer.correct_pair_rank().unwrap();
    let ids = trainer.model.infer(EntityKind::Item).descriptor_ids();
    let distinct_after_stage2 = descriptor_diagnostics(&ids, trainer.model.codebook.len()).distinct_tokens;
    trainer.run_stage3().unwrap();
    let rank_after_stage3 = trainer.correct_pair_rank().unwrap();
    workspace::write_loss_log(&ws, &trainer).unwrap();
    let report = workspace::write_metrics(&ws, &mut trainer, started, &CUTOFFS).unwrap();
    let elapsed = started.elapsed();
    DeskRun {
        frozen_hash: (frozen_before, trainer.model.codebook.frozen_hash()),
        anchors_hash: (anchors_before, file_sha256(&ws.anchors())),
        dir,
        ws,
        trainer,
        elapsed,
        rank_after_stage2,
        rank_after_stage3,
        distinct_after_stage2,
        report,
    }
}

/// True if every parameter of `a` and `b` is bit-identical.
pub fn same_parameters(a: &Trainer, b: &Trainer) -> bool {
    let sa = &a.model.store;
    let sb = &b.model.store;
    sa.len() == sb.len()
        && sa.iter().zip(sb.iter()).all(|((_, na, ma), (_, nb, mb))| {
            na == nb && ma.dim() == mb.dim() && ma.iter().zip(mb.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Largest absolute parameter difference between two trainers.
pub fn max_parameter_gap(a: &Trainer, b: &Trainer) -> f64 {
    a.model
        .store
        .iter()
        .zip(b.model.store.iter())
        .flat_map(|((_, _, ma), (_, _, mb))| ma.iter().zip(mb.iter()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// A small mapper with its own projection parameter and frozen codebook.
pub struct MapperRig {
    pub store: ParamStore,
    pub mapper: Mapper,
    pub frozen: Mat,
    pub projection: ParamId,
}

pub fn mapper_config(descriptors: usize, levels: usize) -> MapperConfig {
    MapperConfig {
        descriptors,
        levels,
        dim: 4,
        beta: 0.25,
        layers: 1,
        heads: 2,
        ff_mult: 2,
    }
}

impl MapperRig {
    pub fn new(seed: u64, cfg: MapperConfig, cf_dim: usize, vocab: usize, llm_dim: usize) -> Self {
        let mut g = rng(seed);
        let mut store = ParamStore::new();
        let frozen = uniform(&mut g, vocab, llm_dim);
        let projection = store.add("codebook.projection", uniform(&mut g, cfg.dim, llm_dim) * 0.5);
        let mapper = Mapper::new(&mut store, cfg, cf_dim, &mut g).unwrap();
        Self {
            store,
            mapper,
            frozen,
            projection,
        }
    }

    pub fn projected(&self) -> Projected {
        Projected::from_matrix(project_codebook(self.frozen.view(), self.store.get(self.projection).view()).unwrap())
    }

    pub fn forward(&self, e: &Mat) -> (Tape, MapperForward) {
        let projected = self.projected();
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let ev = tape.constant(e.clone());
        let out = self
            .mapper
            .forward(&mut tape, &p, ev, &self.frozen, p.var(self.projection), &projected);
        (tape, out)
    }

    /// Gradient of the batch reconstruction loss with respect to parameter `id`.
    pub fn recons_gradient(&self, e: &Mat, id: ParamId) -> Mat {
        let projected = self.projected();
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let ev = tape.constant(e.clone());
        let out = self
            .mapper
            .forward(&mut tape, &p, ev, &self.frozen, p.var(self.projection), &projected);
        let grads = tape.backward(out.recons);
        grads.get(p.var(id)).cloned().unwrap_or_else(|| Array2::zeros(self.store.get(id).dim()))
    }

    /// Central-difference gradient of the reconstruction loss for `id`,
    /// checking that the selected codes stay put.
    pub fn numeric_recons_gradient(&self, e: &Mat, id: ParamId) -> Mat {
        let (_, base) = self.forward(e);
        numeric_gradient(self.store.get(id), 1e-6, |x| {
            let mut store = self.store.clone();
            store.set(id, x.clone()).unwrap();
            let moved = MapperRig {
                store,
                mapper: self.mapper.clone(),
                frozen: self.frozen.clone(),
                projection: self.projection,
            };
            let (t, o) = moved.forward(e);
            assert_eq!(o.codes, base.codes);
            t.scalar(o.recons)
        })
    }

    /// Encoder-side parameter gradients of the reconstruction loss, taken
    /// once through the straight-through path and once by decoding a free
    /// `z_q` leaf and chaining its gradient through the encoder by hand.
    /// Returns the largest relative disagreement and the number of
    /// parameters compared.
    pub fn straight_through_gap(&self, e: &Mat) -> (f64, usize) {
        let (tape, out) = self.forward(e);
        let z_e = tape.value(out.z_e).clone();
        let zq = &z_e - out.residuals.last().unwrap();

        let mut sub = Tape::new();
        let p = self.store.bind(&mut sub);
        let leaf = sub.leaf(zq);
        let ev = sub.constant(e.clone());
        let e_re = self.mapper.decode(&mut sub, &p, leaf);
        let diff = sub.sub(e_re, ev);
        let sq = sub.square(diff);
        let sum = sub.sum_all(sq);
        let loss = sub.scale(sum, 1.0 / e.nrows() as f64);
        let free = sub.backward(loss).get(leaf).unwrap().clone();

        let mut enc = Tape::new();
        let p2 = self.store.bind(&mut enc);
        let ev = enc.constant(e.clone());
        let proj = self.mapper.multi_project(&mut enc, &p2, ev);
        let z = self.mapper.encode(&mut enc, &p2, proj);
        let weights = enc.constant(free.clone());
        let surrogate = enc.mul(z, weights);
        let surrogate = enc.sum_all(surrogate);
        let by_hand = enc.backward(surrogate);

        let projected = self.projected();
        let mut t = Tape::new();
        let p1 = self.store.bind(&mut t);
        let ev = t.constant(e.clone());
        let o = self
            .mapper
            .forward(&mut t, &p1, ev, &self.frozen, p1.var(self.projection), &projected);
        let through = t.backward(o.recons);

        let mut worst = max_relative_error(through.get(o.z_e).unwrap(), &free);
        let mut compared = 0;
        for (id, name, _) in self.store.iter() {
            if name.starts_with("mapper.encoder") || name.starts_with("mapper.heads") {
                let a = through.get(p1.var(id)).unwrap();
                let b = by_hand.get(p2.var(id)).unwrap();
                worst = worst.max(max_relative_error(a, b));
                compared += 1;
            }
        }
        (worst, compared)
    }
}

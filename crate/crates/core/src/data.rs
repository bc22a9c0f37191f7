//! Interaction, summary and anchor ingestion.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaceError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        })
    }
}

impl FromStr for EntityKind {
    type Err = FaceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(EntityKind::User),
            "item" => Ok(EntityKind::Item),
            other => Err(FaceError::Data(format!("unknown entity kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = FaceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(FaceError::Data(format!("unknown split label {other:?}"))),
        }
    }
}

/// Implicit-feedback interactions over contiguous user and item indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub edges: Vec<(usize, usize)>,
    pub splits: Vec<Split>,
    /// Raw id of each user index.
    pub user_ids: Vec<String>,
    /// Raw id of each item index.
    pub item_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct IndexMap {
    users: Vec<String>,
    items: Vec<String>,
}

fn intern(ids: &mut Vec<String>, lookup: &mut HashMap<String, usize>, raw: &str) -> usize {
    if let Some(&i) = lookup.get(raw) {
        return i;
    }
    let i = ids.len();
    ids.push(raw.to_string());
    lookup.insert(raw.to_string(), i);
    i
}

impl InteractionDataset {
    /// Reads `user<TAB>item` lines. Raw ids are re-indexed in order of first
    /// appearance; duplicate edges are dropped with a warning. Every edge starts
    /// in the train split.
    pub fn load_interactions(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| FaceError::io(path, e))?;
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut user_lookup = HashMap::new();
        let mut item_lookup = HashMap::new();
        let mut seen = HashSet::new();
        let mut edges = Vec::new();
        let mut duplicates = 0usize;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| FaceError::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(user), Some(item), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(FaceError::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "expected exactly two tab-separated fields".into(),
                });
            };
            let (user, item) = (user.trim(), item.trim());
            if user.is_empty() || item.is_empty() {
                return Err(FaceError::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "empty id".into(),
                });
            }
            let u = intern(&mut user_ids, &mut user_lookup, user);
            let i = intern(&mut item_ids, &mut item_lookup, item);
            if seen.insert((u, i)) {
                edges.push((u, i));
            } else {
                duplicates += 1;
            }
        }
        if edges.is_empty() {
            return Err(FaceError::EmptyInput(path.display().to_string()));
        }
        if duplicates > 0 {
            warn!("{}: dropped {duplicates} duplicate interaction(s)", path.display());
        }
        let splits = vec![Split::Train; edges.len()];
        Ok(Self {
            num_users: user_ids.len(),
            num_items: item_ids.len(),
            edges,
            splits,
            user_ids,
            item_ids,
        })
    }

    /// Per-user random 3:1:1 partition. Users with fewer than three edges keep
    /// everything in train. Validation and test each receive `round(n / 5)`
    /// edges.
    pub fn split_3_1_1(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); self.num_users];
        for (e, &(u, _)) in self.edges.iter().enumerate() {
            by_user[u].push(e);
        }
        for edges in by_user.iter_mut() {
            for &e in edges.iter() {
                self.splits[e] = Split::Train;
            }
            let n = edges.len();
            if n < 3 {
                continue;
            }
            edges.shuffle(&mut rng);
            let held = ((n as f64) / 5.0).round().max(1.0) as usize;
            for &e in &edges[..held] {
                self.splits[e] = Split::Val;
            }
            for &e in &edges[held..2 * held] {
                self.splits[e] = Split::Test;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() != self.splits.len() {
            return Err(FaceError::Data("split labels do not cover every edge".into()));
        }
        if self.user_ids.len() != self.num_users || self.item_ids.len() != self.num_items {
            return Err(FaceError::Data("index map size disagrees with entity counts".into()));
        }
        let mut seen = HashSet::new();
        for (&(u, i), &s) in self.edges.iter().zip(&self.splits) {
            if u >= self.num_users {
                return Err(FaceError::IndexOutOfRange {
                    kind: "user",
                    index: u,
                    size: self.num_users,
                });
            }
            if i >= self.num_items {
                return Err(FaceError::IndexOutOfRange {
                    kind: "item",
                    index: i,
                    size: self.num_items,
                });
            }
            if !seen.insert((u, i, s)) {
                return Err(FaceError::Data(format!("duplicate edge ({u}, {i}) in {}", s.as_str())));
            }
        }
        Ok(())
    }

    pub fn edges_in(&self, split: Split) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .zip(&self.splits)
            .filter(move |(_, &s)| s == split)
            .map(|(&e, _)| e)
    }

    /// Sorted item lists per user for one split.
    pub fn user_items(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for (u, i) in self.edges_in(split) {
            out[u].push(i);
        }
        for items in out.iter_mut() {
            items.sort_unstable();
        }
        out
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    pub fn raw_id(&self, kind: EntityKind, index: usize) -> &str {
        match kind {
            EntityKind::User => &self.user_ids[index],
            EntityKind::Item => &self.item_ids[index],
        }
    }

    pub fn entity_count(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::User => self.num_users,
            EntityKind::Item => self.num_items,
        }
    }

    /// Writes `interactions.tsv` (`user_idx<TAB>item_idx<TAB>split`) and
    /// `index.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FaceError::io(dir, e))?;
        let tsv = dir.join("interactions.tsv");
        let mut out = String::new();
        for (&(u, i), s) in self.edges.iter().zip(&self.splits) {
            out.push_str(&format!("{u}\t{i}\t{}\n", s.as_str()));
        }
        fs::write(&tsv, out).map_err(|e| FaceError::io(&tsv, e))?;
        let index = IndexMap {
            users: self.user_ids.clone(),
            items: self.item_ids.clone(),
        };
        let path = dir.join("index.json");
        let json = serde_json::to_string_pretty(&index)?;
        fs::write(&path, json + "\n").map_err(|e| FaceError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| FaceError::io(&index_path, e))?;
        let index: IndexMap = serde_json::from_str(&text)?;
        let tsv = dir.join("interactions.tsv");
        let text = fs::read_to_string(&tsv).map_err(|e| FaceError::io(&tsv, e))?;
        let mut edges = Vec::new();
        let mut splits = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parse_err = |message: String| FaceError::Parse {
                path: tsv.clone(),
                line: n + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err("expected user, item and split".into()));
            }
            let u = fields[0].parse().map_err(|e| parse_err(format!("user index: {e}")))?;
            let i = fields[1].parse().map_err(|e| parse_err(format!("item index: {e}")))?;
            let s = fields[2].parse().map_err(|e: FaceError| parse_err(e.to_string()))?;
            edges.push((u, i));
            splits.push(s);
        }
        let ds = Self {
            num_users: index.users.len(),
            num_items: index.items.len(),
            edges,
            splits,
            user_ids: index.users,
            item_ids: index.items,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// A textual profile of one user or item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntitySummary {
    pub kind: EntityKind,
    pub id: usize,
    pub text: String,
}

#[derive(Deserialize)]
struct SummaryLine {
    kind: EntityKind,
    id: serde_json::Value,
    summary: String,
}

/// Reads `summaries.jsonl`, resolving raw ids against the dataset index.
/// Lines naming entities absent from the dataset are skipped with a warning.
pub fn load_summaries(path: &Path, ds: &InteractionDataset) -> Result<Vec<EntitySummary>> {
    let lookup = |kind: EntityKind| -> HashMap<&str, usize> {
        let ids = match kind {
            EntityKind::User => &ds.user_ids,
            EntityKind::Item => &ds.item_ids,
        };
        ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    };
    let users = lookup(EntityKind::User);
    let items = lookup(EntityKind::Item);
    let text = fs::read_to_string(path).map_err(|e| FaceError::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut unknown = 0usize;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| FaceError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: SummaryLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let raw = match &rec.id {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(num) => num.to_string(),
            other => return Err(parse_err(format!("id must be a string or number, got {other}"))),
        };
        if rec.summary.trim().is_empty() {
            return Err(parse_err("empty summary".into()));
        }
        let table = match rec.kind {
            EntityKind::User => &users,
            EntityKind::Item => &items,
        };
        let Some(&id) = table.get(raw.as_str()) else {
            unknown += 1;
            continue;
        };
        if !seen.insert((rec.kind, id)) {
            return Err(parse_err(format!("second summary for {} {raw}", rec.kind)));
        }
        out.push(EntitySummary {
            kind: rec.kind,
            id,
            text: rec.summary,
        });
    }
    if unknown > 0 {
        warn!("{}: skipped {unknown} summary line(s) for unknown ids", path.display());
    }
    Ok(out)
}

/// Reads the binary matrix layout shared by anchor and vocabulary files:
/// little-endian `u32` row count, `u32` column count, then row-major `f32`s.
pub fn read_f32_matrix(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| FaceError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(FaceError::Data(format!("{}: truncated header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = rows * cols * 4;
    let body = &bytes[8..];
    if body.len() != expected {
        return Err(FaceError::Data(format!(
            "{}: header declares {rows}x{cols} ({expected} bytes) but body has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).unwrap())
}

pub fn write_f32_matrix(path: &Path, m: ArrayView2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + m.len() * 4);
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| FaceError::io(path, e))?;
    f.write_all(&buf).map_err(|e| FaceError::io(path, e))
}

/// Fixed summary embeddings. Rows cannot be modified once loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorStore {
    matrix: Array2<f64>,
    normalized: bool,
}

impl AnchorStore {
    pub fn new(matrix: Array2<f64>, normalize: bool) -> Result<Self> {
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / matrix.ncols().max(1), pos % matrix.ncols().max(1));
            return Err(FaceError::Data(format!("non-finite anchor value at row {r}, column {c}")));
        }
        let mut matrix = matrix;
        if normalize {
            for mut row in matrix.rows_mut() {
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    row /= norm;
                }
            }
        }
        Ok(Self {
            matrix,
            normalized: normalize,
        })
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(i)
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    pub fn select(&self, rows: &[usize]) -> Array2<f64> {
        self.matrix.select(ndarray::Axis(0), rows)
    }

    fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            matrix: self.matrix.slice(ndarray::s![start..start + len, ..]).to_owned(),
            normalized: self.normalized,
        }
    }
}

/// Loads an anchor file and checks its row count.
pub fn load_anchors(path: &Path, expected_count: usize, normalize: bool) -> Result<AnchorStore> {
    let raw = read_f32_matrix(path)?;
    if raw.nrows() != expected_count {
        return Err(FaceError::Shape(format!(
            "{}: expected {expected_count} anchor rows, found {}",
            path.display(),
            raw.nrows()
        )));
    }
    AnchorStore::new(raw.mapv(f64::from), normalize)
}

/// Sidecar describing the row layout of `anchors.bin`: all users first, then
/// all items, each in dataset index order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorIndex {
    pub dim: usize,
    pub users: usize,
    pub items: usize,
    /// Whether the stored rows were L2-normalized before writing.
    pub normalized: bool,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

/// User and item anchors split out of one `anchors.bin`.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub users: AnchorStore,
    pub items: AnchorStore,
}

impl AnchorSet {
    pub fn get(&self, kind: EntityKind) -> &AnchorStore {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }

    pub fn load(bin: &Path, index: &Path, ds: &InteractionDataset, normalize: bool) -> Result<Self> {
        let text = fs::read_to_string(index).map_err(|e| FaceError::io(index, e))?;
        let idx: AnchorIndex = serde_json::from_str(&text)?;
        if idx.users != ds.num_users || idx.items != ds.num_items {
            return Err(FaceError::Shape(format!(
                "anchors cover {} users / {} items but the dataset has {} / {}",
                idx.users, idx.items, ds.num_users, ds.num_items
            )));
        }
        if idx.user_ids != ds.user_ids || idx.item_ids != ds.item_ids {
            return Err(FaceError::Data("anchor index ids do not match the dataset index".into()));
        }
        let all = load_anchors(bin, idx.users + idx.items, normalize)?;
        if all.dim() != idx.dim {
            return Err(FaceError::Shape(format!(
                "anchor dim {} disagrees with index dim {}",
                all.dim(),
                idx.dim
            )));
        }
        Ok(Self {
            users: all.slice(0, idx.users),
            items: all.slice(idx.users, idx.items),
        })
    }
}

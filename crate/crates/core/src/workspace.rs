//! On-disk layout of a working directory and the steps that read and write
//! it.
//!
//! ```text
//! interactions.tsv  summaries.jsonl  wordlist.txt       inputs
//! vocab_tokens.txt  vocab_embeddings.bin  config.toml
//! prepared/{interactions.tsv, index.json}                prepare
//! anchors.bin  anchors.index.json                        embed-summaries
//! checkpoints/stageN/{epochM,final}/                     train
//! loss_log.jsonl  metrics.json  descriptors.jsonl
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::Array2;
use serde::Serialize;

use crate::alignment::{MeanPoolEncoder, PooledTextProvider, TextEmbeddingProvider, VocabTokenEmbedder};
use crate::autograd::Mat;
use crate::checkpoint;
use crate::codebook::{filter_vocabulary, load_vocab_export, load_wordlist, FilteredVocab, VocabFilter};
use crate::config::TrainConfig;
use crate::data::{load_summaries, write_f32_matrix, AnchorIndex, AnchorSet, EntityKind, InteractionDataset, Split};
use crate::error::{FaceError, Result};
use crate::eval::{descriptor_diagnostics, evaluate_all_ranking, MetricsReport};
use crate::trainer::{FaceModel, Trainer};

pub const CUTOFFS: [usize; 2] = [5, 20];

#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn interactions(&self) -> PathBuf {
        self.path("interactions.tsv")
    }
    pub fn summaries(&self) -> PathBuf {
        self.path("summaries.jsonl")
    }
    pub fn wordlist(&self) -> PathBuf {
        self.path("wordlist.txt")
    }
    pub fn vocab_tokens(&self) -> PathBuf {
        self.path("vocab_tokens.txt")
    }
    pub fn vocab_embeddings(&self) -> PathBuf {
        self.path("vocab_embeddings.bin")
    }
    pub fn config_file(&self) -> PathBuf {
        self.path("config.toml")
    }
    pub fn prepared(&self) -> PathBuf {
        self.path("prepared")
    }
    pub fn anchors(&self) -> PathBuf {
        self.path("anchors.bin")
    }
    pub fn anchor_index(&self) -> PathBuf {
        self.path("anchors.index.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.path("checkpoints")
    }
    pub fn loss_log(&self) -> PathBuf {
        self.path("loss_log.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.json")
    }
    pub fn descriptors(&self) -> PathBuf {
        self.path("descriptors.jsonl")
    }

    /// Loads `config.toml` over `base` if present.
    pub fn config(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let path = self.config_file();
        if path.is_file() {
            TrainConfig::load(&path, base)
        } else {
            Ok(base.clone())
        }
    }
}

/// Fails with a missing-input I/O error unless `path` exists.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(FaceError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing")))
    }
}

/// Indexes and splits the raw interactions, writing `prepared/`.
pub fn prepare(ws: &Workspace, seed: u64) -> Result<InteractionDataset> {
    let raw = ws.interactions();
    require(&raw)?;
    let ds = InteractionDataset::load_interactions(&raw)?.split_3_1_1(seed);
    ds.save(&ws.prepared())?;
    info!(
        "prepared {} users, {} items, {} edges ({} train / {} val / {} test)",
        ds.num_users,
        ds.num_items,
        ds.edges.len(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test)
    );
    Ok(ds)
}

pub fn load_dataset(ws: &Workspace) -> Result<InteractionDataset> {
    let dir = ws.prepared();
    require(&dir.join("interactions.tsv"))?;
    InteractionDataset::load(&dir)
}

/// The exported language-model vocabulary and its embeddings.
pub struct VocabSource {
    pub tokens: Vec<String>,
    pub embeddings: Mat,
}

impl VocabSource {
    pub fn load(ws: &Workspace) -> Result<Self> {
        require(&ws.vocab_tokens())?;
        require(&ws.vocab_embeddings())?;
        let (raw, embeddings) = load_vocab_export(&ws.vocab_tokens(), &ws.vocab_embeddings())?;
        Ok(Self {
            tokens: raw.into_iter().map(|(t, _)| t).collect(),
            embeddings,
        })
    }

    pub fn filtered(&self, ws: &Workspace, cfg: &TrainConfig) -> Result<FilteredVocab> {
        require(&ws.wordlist())?;
        let words = load_wordlist(&ws.wordlist())?;
        let mut filter = VocabFilter::new(&words, cfg.min_token_len, cfg.max_vocab)?;
        filter.require_word_start_marker = cfg.require_word_marker;
        let raw: Vec<(String, usize)> = self.tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        filter_vocabulary(&raw, &filter)
    }

    pub fn token_embedder(&self, cfg: &TrainConfig) -> Result<VocabTokenEmbedder> {
        VocabTokenEmbedder::new(&self.tokens, self.embeddings.clone(), cfg.text_encoder_seed)
    }

    /// The stub text provider: vocabulary lookups, mean pooling, fixed rotation.
    pub fn text_provider(&self, cfg: &TrainConfig) -> Result<PooledTextProvider<VocabTokenEmbedder, MeanPoolEncoder>> {
        Ok(PooledTextProvider {
            tokens: self.token_embedder(cfg)?,
            encoder: MeanPoolEncoder::new(self.embeddings.ncols(), cfg.text_dim, cfg.text_encoder_seed),
        })
    }
}

/// Encodes every summary through `provider` and writes `anchors.bin` (users
/// then items, raw vectors) and its index. Entities without a summary get a
/// zero row.
pub fn embed_summaries(ws: &Workspace, ds: &InteractionDataset, provider: &dyn TextEmbeddingProvider) -> Result<AnchorIndex> {
    require(&ws.summaries())?;
    let summaries = load_summaries(&ws.summaries(), ds)?;
    let dim = provider.dim();
    let mut out = Array2::<f32>::zeros((ds.num_users + ds.num_items, dim));
    let mut covered = vec![false; ds.num_users + ds.num_items];
    for s in &summaries {
        let row = match s.kind {
            EntityKind::User => s.id,
            EntityKind::Item => ds.num_users + s.id,
        };
        let h = provider.encode_text(&s.text);
        out.row_mut(row).assign(&h.mapv(|v| v as f32));
        covered[row] = true;
    }
    let missing = covered.iter().filter(|c| !**c).count();
    if missing > 0 {
        warn!("{missing} entities have no summary; their anchors are zero vectors");
    }
    write_f32_matrix(&ws.anchors(), out.view())?;
    let index = AnchorIndex {
        dim,
        users: ds.num_users,
        items: ds.num_items,
        normalized: false,
        user_ids: ds.user_ids.clone(),
        item_ids: ds.item_ids.clone(),
    };
    let path = ws.anchor_index();
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| FaceError::io(&path, e))?;
    Ok(index)
}

pub fn load_anchor_set(ws: &Workspace, ds: &InteractionDataset, cfg: &TrainConfig) -> Result<AnchorSet> {
    require(&ws.anchors())?;
    require(&ws.anchor_index())?;
    AnchorSet::load(&ws.anchors(), &ws.anchor_index(), ds, cfg.normalize_anchors)
}

/// A freshly initialized trainer over the prepared workspace. Anchors are
/// loaded when present.
pub fn build_trainer(ws: &Workspace, cfg: &TrainConfig) -> Result<Trainer> {
    let ds = load_dataset(ws)?;
    let vocab = VocabSource::load(ws)?;
    let filtered = vocab.filtered(ws, cfg)?;
    let frozen = vocab.embeddings.select(ndarray::Axis(0), &filtered.source_rows);
    let embedder = vocab.token_embedder(cfg)?;
    let model = FaceModel::new(cfg, &ds, filtered.tokens, frozen, &embedder)?;
    let anchors = if ws.anchors().is_file() {
        Some(load_anchor_set(ws, &ds, cfg)?)
    } else {
        None
    };
    Ok(Trainer::new(cfg.clone(), model, ds, anchors)?.with_checkpoints(ws.checkpoints()))
}

pub fn write_loss_log(ws: &Workspace, trainer: &Trainer) -> Result<()> {
    let path = ws.loss_log();
    let mut body = String::new();
    for entry in &trainer.state.history {
        body.push_str(&serde_json::to_string(entry)?);
        body.push('\n');
    }
    fs::write(&path, body).map_err(|e| FaceError::io(&path, e))
}

#[derive(Serialize)]
struct DescriptorLine<'a> {
    kind: EntityKind,
    id: &'a str,
    tokens: Vec<&'a str>,
    codes: Vec<Vec<usize>>,
}

/// Writes one JSON line per entity of `kind` with its level-1 tokens and full
/// code matrix.
pub fn export_descriptors(path: &Path, trainer: &mut Trainer, kind: EntityKind) -> Result<usize> {
    let inference = trainer.model.infer(kind);
    let codes = inference.codes();
    let ds = trainer.dataset();
    let cb = &trainer.model.codebook;
    let mut file = fs::File::create(path).map_err(|e| FaceError::io(path, e))?;
    for (id, entity_codes) in codes.iter().enumerate() {
        let line = DescriptorLine {
            kind,
            id: ds.raw_id(kind, id),
            tokens: entity_codes.iter().map(|c| cb.token(c[0])).collect(),
            codes: entity_codes.clone(),
        };
        writeln!(file, "{}", serde_json::to_string(&line)?).map_err(|e| FaceError::io(path, e))?;
    }
    Ok(codes.len())
}

/// Test-split ranking metrics, validation Recall@20 and item descriptor
/// diagnostics.
pub fn collect_metrics(trainer: &mut Trainer, cutoffs: &[usize]) -> Result<BTreeMap<String, f64>> {
    let table = trainer.model.embeddings();
    let test = evaluate_all_ranking(&table, trainer.dataset(), Split::Test, cutoffs)?;
    let val = evaluate_all_ranking(&table, trainer.dataset(), Split::Val, &[20])?;
    let mut metrics = test.metrics.clone();
    metrics.insert("val_recall@20".into(), val.recall(20));
    if trainer.state.completed_stage >= 2 {
        let report = descriptor_diagnostics(&trainer.model.infer(EntityKind::Item).descriptor_ids(), trainer.model.codebook.len());
        metrics.insert("item_distinct_tokens".into(), report.distinct_tokens as f64);
        metrics.insert("item_utilization".into(), report.utilization);
        metrics.insert("item_uniqueness".into(), report.mean_uniqueness);
    }
    Ok(metrics)
}

/// Writes `metrics.json`; the checkpoint path is recorded relative to the
/// workspace root.
pub fn write_metrics(ws: &Workspace, trainer: &mut Trainer, started: Instant, cutoffs: &[usize]) -> Result<MetricsReport> {
    let metrics = collect_metrics(trainer, cutoffs)?;
    let stage = trainer.state.completed_stage.max(1);
    let checkpoint = checkpoint::final_dir(Path::new("checkpoints"), stage);
    let report = MetricsReport {
        metrics,
        config_hash: trainer.config.hash(),
        checkpoint: Some(checkpoint),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    report.write(&ws.metrics())?;
    Ok(report)
}

//! The three-stage curriculum: backbone pretraining, mapping without
//! alignment, then the joint objective `L_R + μ·L_map + λ·L_align`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use ndarray::{concatenate, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{contrastive_align_tape, Aligner, MeanPoolEncoder, TokenEmbedder};
use crate::autograd::{Mat, Tape};
use crate::backbone::{sample_triples, Backbone, BackboneKind, BipartiteGraph, EmbeddingTable, Gmf, LightGcn, Triple};
use crate::checkpoint::{self, read_checkpoint, write_checkpoint};
use crate::codebook::{pseudo_inverse, Codebook};
use crate::config::TrainConfig;
use crate::data::{AnchorSet, EntityKind, InteractionDataset, Split};
use crate::error::{FaceError, Result};
use crate::eval::{evaluate_all_ranking, mean_correct_pair_rank, retrieval_probe, ProbeResult, RankingResult};
use crate::mapper::{Inference, Mapper};
use crate::params::{clip_global_norm, Adam, ParamStore};

/// Every trainable piece plus the frozen codebook and text encoder.
pub struct FaceModel {
    pub store: ParamStore,
    pub backbone: Box<dyn Backbone>,
    pub mapper: Mapper,
    pub codebook: Codebook,
    pub aligner: Aligner,
}

impl FaceModel {
    /// Parameters are drawn in a fixed order from one generator seeded with
    /// `cfg.seed`.
    pub fn new(
        cfg: &TrainConfig,
        ds: &InteractionDataset,
        tokens: Vec<String>,
        frozen: Mat,
        token_embedder: &dyn TokenEmbedder,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let backbone: Box<dyn Backbone> = match cfg.backbone {
            BackboneKind::Gmf => Box::new(Gmf::new(&mut store, ds.num_users, ds.num_items, cfg.cf_dim, &mut rng)),
            BackboneKind::LightGcn => Box::new(LightGcn::new(
                &mut store,
                Arc::new(BipartiteGraph::from_dataset(ds)),
                cfg.cf_dim,
                cfg.lightgcn_layers,
                &mut rng,
            )),
        };
        let codebook = Codebook::new(tokens, frozen, cfg.code_dim, cfg.codebook_init_scale, &mut store, &mut rng)?;
        let mapper = Mapper::new(&mut store, cfg.mapper(), cfg.cf_dim, &mut rng)?;
        let encoder = MeanPoolEncoder::new(codebook.llm_dim(), cfg.text_dim, cfg.text_encoder_seed);
        let aligner = Aligner::new(cfg.alignment(), Arc::new(encoder), token_embedder)?;
        Ok(Self {
            store,
            backbone,
            mapper,
            codebook,
            aligner,
        })
    }

    pub fn embeddings(&self) -> EmbeddingTable {
        self.backbone.final_embeddings(&self.store)
    }

    /// Mapper inference over every entity of `kind`.
    pub fn infer(&mut self, kind: EntityKind) -> Inference {
        let table = self.embeddings();
        let e = match kind {
            EntityKind::User => table.users,
            EntityKind::Item => table.items,
        };
        let projected = self.codebook.projected(&self.store);
        self.mapper.infer(&self.store, projected, e.view())
    }

    /// `h_d` for every entity of `kind`, from its level-1 codewords.
    pub fn descriptor_embeddings(&mut self, kind: EntityKind) -> Result<Mat> {
        let inference = self.infer(kind);
        let projected = self.codebook.projected(&self.store);
        let z_d = inference.first_level(projected);
        let pinv = pseudo_inverse(self.store.get(self.codebook.projection()).view())?;
        self.aligner
            .embed_values(z_d.view(), self.mapper.config.descriptors, &pinv, kind)
    }

    /// Decodes an embedding from descriptor token strings.
    pub fn generate(&mut self, tokens: &[&str]) -> Result<Array1<f64>> {
        let ids = tokens
            .iter()
            .map(|t| self.codebook.token_id(t))
            .collect::<Result<Vec<_>>>()?;
        let projected = self.codebook.projected(&self.store);
        self.mapper.generate_from_descriptors(&self.store, projected, &ids)
    }

    fn restore(&mut self, tensors: &[(String, Mat)]) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let key = format!("param/{}", self.store.name(id));
            let value = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| FaceError::Checkpoint(format!("missing tensor {key}")))?;
            self.store.set(id, value.1.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStop {
    /// Records a validation score; returns true once `patience` epochs passed
    /// without improvement.
    pub fn observe(&mut self, score: f64, epoch: usize, patience: usize) -> bool {
        if score > self.best || epoch == 1 {
            self.best = score;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= patience
    }
}

/// Per-epoch means of the loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub global_epoch: u64,
    /// Mean BPR term.
    pub l_r: f64,
    /// BPR plus the embedding regularizer.
    pub l_r_total: f64,
    pub l_map: f64,
    pub l_align: f64,
    /// `l_r_total + μ·l_map + λ·l_align` as computed on the tape.
    pub total: f64,
    pub val_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Stage currently running or last run.
    pub stage: u8,
    pub completed_stage: u8,
    /// Epochs finished within `stage`.
    pub epoch: usize,
    /// Epochs finished across all stages; keys the batch order.
    pub global_epoch: u64,
    pub early: EarlyStop,
    pub stopped_early: bool,
    pub history: Vec<EpochLog>,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            stage: 1,
            completed_stage: 0,
            epoch: 0,
            global_epoch: 0,
            early: EarlyStop::default(),
            stopped_early: false,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneKind,
    pub cf_dim: usize,
    pub lightgcn_layers: usize,
    pub adam_step: u64,
    pub codebook_hash: String,
    pub config: TrainConfig,
    pub state: TrainState,
}

/// Gradient-free component values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_r: f64,
    pub l_r_total: f64,
    pub l_map: f64,
    pub l_align: f64,
    pub total: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: FaceModel,
    pub state: TrainState,
    adam: Adam,
    ds: InteractionDataset,
    anchors: Option<AnchorSet>,
    train_edges: Vec<(usize, usize)>,
    train_items: Vec<Vec<usize>>,
    checkpoints: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: FaceModel, ds: InteractionDataset, anchors: Option<AnchorSet>) -> Result<Self> {
        config.validate()?;
        ds.validate()?;
        let adam = Adam::new(config.adam(), &model.store);
        let train_edges = ds.edges_in(Split::Train).collect();
        let train_items = ds.user_items(Split::Train);
        Ok(Self {
            config,
            model,
            state: TrainState::default(),
            adam,
            ds,
            anchors,
            train_edges,
            train_items,
            checkpoints: None,
        })
    }

    /// Writes a checkpoint under `root` after epochs and at stage ends.
    pub fn with_checkpoints(mut self, root: impl Into<PathBuf>) -> Self {
        self.checkpoints = Some(root.into());
        self
    }

    pub fn dataset(&self) -> &InteractionDataset {
        &self.ds
    }

    pub fn anchors(&self) -> Option<&AnchorSet> {
        self.anchors.as_ref()
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn run_stage1(&mut self) -> Result<()> {
        self.run_stage(1)
    }

    pub fn run_stage2(&mut self) -> Result<()> {
        self.run_stage(2)
    }

    pub fn run_stage3(&mut self) -> Result<()> {
        self.run_stage(3)
    }

    pub fn run_all(&mut self) -> Result<()> {
        for s in 1..=3 {
            self.run_stage(s)?;
        }
        Ok(())
    }

    fn check_anchors(&self) -> Result<()> {
        let anchors = self
            .anchors
            .as_ref()
            .ok_or_else(|| FaceError::Config("stage 3 needs summary anchors".into()))?;
        for kind in [EntityKind::User, EntityKind::Item] {
            let store = anchors.get(kind);
            if store.len() != self.ds.entity_count(kind) {
                return Err(FaceError::Shape(format!(
                    "{} {kind} anchors for {} {kind}s",
                    store.len(),
                    self.ds.entity_count(kind)
                )));
            }
            if store.dim() != self.model.aligner.encoder().output_dim() {
                return Err(FaceError::Shape(format!(
                    "anchor width {} but the text encoder produces {}",
                    store.dim(),
                    self.model.aligner.encoder().output_dim()
                )));
            }
        }
        Ok(())
    }

    /// Runs (or finishes, after a resume) stage `stage`. A stage that already
    /// completed is a no-op.
    pub fn run_stage(&mut self, stage: u8) -> Result<()> {
        if !(1..=3).contains(&stage) {
            return Err(FaceError::Config(format!("no stage {stage}")));
        }
        if self.state.completed_stage + 1 < stage {
            return Err(FaceError::StageOrder {
                required: stage - 1,
                requested: stage,
            });
        }
        if self.state.completed_stage >= stage {
            return Ok(());
        }
        if self.state.stage != stage {
            self.state.stage = stage;
            self.state.epoch = 0;
            self.state.early = EarlyStop::default();
            self.state.stopped_early = false;
        }
        if stage == 3 {
            self.check_anchors()?;
        }
        let epochs = self.config.stage_epochs(stage);
        info!("stage {stage}: {} of {epochs} epochs done", self.state.epoch);
        while self.state.epoch < epochs && !self.state.stopped_early {
            let losses = self.run_epoch(stage)?;
            self.state.epoch += 1;
            self.state.global_epoch += 1;
            let epoch = self.state.epoch;
            let val_recall = if stage != 2 {
                let r = self.validate()?.recall(self.config.early_stop_k);
                if self.state.early.observe(r, epoch, self.config.patience) {
                    info!("stage {stage}: early stop at epoch {epoch}, best {:.4} at {}", self.state.early.best, self.state.early.best_epoch);
                    self.state.stopped_early = true;
                }
                Some(r)
            } else {
                None
            };
            info!(
                "stage {stage} epoch {epoch}: L_R {:.6} L_map {:.6} L_align {:.6}{}",
                losses.l_r,
                losses.l_map,
                losses.l_align,
                val_recall.map(|r| format!(" val recall@{} {r:.4}", self.config.early_stop_k)).unwrap_or_default()
            );
            self.state.history.push(EpochLog {
                stage,
                epoch,
                global_epoch: self.state.global_epoch,
                l_r: losses.l_r,
                l_r_total: losses.l_r_total,
                l_map: losses.l_map,
                l_align: losses.l_align,
                total: losses.total,
                val_recall,
            });
            let last = epoch == epochs || self.state.stopped_early;
            if let Some(root) = &self.checkpoints {
                if last || epoch.is_multiple_of(self.config.checkpoint_every) {
                    let dir = checkpoint::epoch_dir(root, stage, epoch);
                    self.save(&dir)?;
                }
            }
        }
        self.state.completed_stage = stage;
        if let Some(root) = &self.checkpoints {
            let dir = checkpoint::final_dir(root, stage);
            self.save(&dir)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<RankingResult> {
        evaluate_all_ranking(&self.model.embeddings(), &self.ds, Split::Val, &[self.config.early_stop_k])
    }

    /// Batch order of a global epoch, independent of how training got there.
    pub fn epoch_batches(&self, global_epoch: u64) -> Vec<Triple> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(global_epoch + 1);
        sample_triples(&self.train_edges, &self.train_items, self.ds.num_items, &mut rng)
    }

    fn run_epoch(&mut self, stage: u8) -> Result<StepLosses> {
        let triples = self.epoch_batches(self.state.global_epoch);
        let mut sums = StepLosses::default();
        let mut steps = 0usize;
        for (step, batch) in triples.chunks(self.config.batch_size).enumerate() {
            let l = self.train_step(stage, batch).map_err(|e| match e {
                FaceError::Diverged { detail, .. } => FaceError::Diverged {
                    stage,
                    epoch: self.state.epoch + 1,
                    step,
                    detail,
                },
                other => other,
            })?;
            sums.l_r += l.l_r;
            sums.l_r_total += l.l_r_total;
            sums.l_map += l.l_map;
            sums.l_align += l.l_align;
            sums.total += l.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        Ok(StepLosses {
            l_r: sums.l_r / n,
            l_r_total: sums.l_r_total / n,
            l_map: sums.l_map / n,
            l_align: sums.l_align / n,
            total: sums.total / n,
        })
    }

    /// One optimizer step on `batch` under the objective of `stage`.
    pub fn train_step(&mut self, stage: u8, batch: &[Triple]) -> Result<StepLosses> {
        let cfg = &self.config;
        let model = &mut self.model;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let finals = model.backbone.forward(&mut tape, &p);
        let bl = model.backbone.loss(&mut tape, &p, finals, batch, cfg.reg);
        let mut losses = StepLosses {
            l_r: tape.scalar(bl.ranking),
            l_r_total: tape.scalar(bl.total),
            ..StepLosses::default()
        };
        let mut total = bl.total;

        if stage >= 2 {
            let users = unique(batch.iter().map(|t| t.user));
            let items = unique(batch.iter().map(|t| t.pos));
            let eu = tape.gather_rows(finals.0, &users);
            let ei = tape.gather_rows(finals.1, &items);
            let e = tape.concat_rows(&[eu, ei]);
            let projection = p.var(model.codebook.projection());
            let (frozen, projected) = model.codebook.frozen_and_projected(&model.store);
            let fwd = model.mapper.forward(&mut tape, &p, e, frozen, projection, projected);
            losses.l_map = tape.scalar(fwd.total);
            let weighted = tape.scale(fwd.total, cfg.mu);
            total = tape.add(total, weighted);

            if stage == 3 {
                let anchors = self.anchors.as_ref().expect("anchors checked before stage 3");
                let n = model.mapper.config.descriptors;
                let pinv = pseudo_inverse(model.store.get(model.codebook.projection()).view())?;
                let du = tape.slice_rows(fwd.descriptors_st, 0, users.len() * n);
                let di = tape.slice_rows(fwd.descriptors_st, users.len() * n, items.len() * n);
                let hu = model.aligner.embed_batch(&mut tape, du, n, &pinv, EntityKind::User);
                let hi = model.aligner.embed_batch(&mut tape, di, n, &pinv, EntityKind::Item);
                let h_d = tape.concat_rows(&[hu, hi]);
                let su = anchors.users.select(&users);
                let si = anchors.items.select(&items);
                let h_s = concatenate(Axis(0), &[su.view(), si.view()]).expect("anchor widths match");
                let align = contrastive_align_tape(&mut tape, h_d, &h_s, cfg.tau);
                losses.l_align = tape.scalar(align);
                let weighted = tape.scale(align, cfg.lambda);
                total = tape.add(total, weighted);
            }
        }

        losses.total = tape.scalar(total);
        if !losses.total.is_finite() {
            return Err(FaceError::Diverged {
                stage,
                epoch: self.state.epoch + 1,
                step: 0,
                detail: format!(
                    "L_R {} L_map {} L_align {}",
                    losses.l_r_total, losses.l_map, losses.l_align
                ),
            });
        }
        let mut grads = tape.backward(total);
        let mut grads = p.gradients(&mut grads);
        clip_global_norm(&mut grads, cfg.clip_norm);
        let freeze = stage >= 2 && cfg.freeze_backbone;
        self.adam.step(&mut model.store, &grads, |_, name| {
            let backbone = name.starts_with("backbone.");
            if stage == 1 {
                backbone
            } else {
                !(freeze && backbone)
            }
        });
        Ok(losses)
    }

    /// Mean 1-based rank of each entity's own anchor among all anchors by
    /// cosine with its descriptor embedding (users then items).
    pub fn correct_pair_rank(&mut self) -> Result<f64> {
        let anchors = self
            .anchors
            .as_ref()
            .ok_or_else(|| FaceError::Config("no anchors loaded".into()))?;
        let hu = self.model.descriptor_embeddings(EntityKind::User)?;
        let hi = self.model.descriptor_embeddings(EntityKind::Item)?;
        let h_d = concatenate(Axis(0), &[hu.view(), hi.view()]).unwrap();
        let h_s = concatenate(Axis(0), &[anchors.users.matrix(), anchors.items.matrix()]).unwrap();
        mean_correct_pair_rank(h_d.view(), h_s.view())
    }

    /// Nearest-anchor probe over the descriptor embeddings of `kind`. Trials
    /// draw from their own stream of the run seed.
    pub fn retrieval_probe(&mut self, kind: EntityKind, l: usize, trials: usize) -> Result<ProbeResult> {
        let anchors = self
            .anchors
            .as_ref()
            .ok_or_else(|| FaceError::Config("no anchors loaded".into()))?;
        let h_s = anchors.get(kind).matrix().to_owned();
        let h_d = self.model.descriptor_embeddings(kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::MAX);
        retrieval_probe(h_d.view(), h_s.view(), l, trials, &mut rng)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            backbone: self.model.backbone.kind(),
            cf_dim: self.config.cf_dim,
            lightgcn_layers: self.config.lightgcn_layers,
            adam_step: self.adam.steps(),
            codebook_hash: self.model.codebook.frozen_hash(),
            config: self.config.clone(),
            state: self.state.clone(),
        };
        let store = &self.model.store;
        let mut tensors = Vec::with_capacity(store.len() * 3);
        for (id, name, value) in store.iter() {
            tensors.push((format!("param/{name}"), value));
            let (m, v) = self.adam.moments(id);
            tensors.push((format!("adam.m/{name}"), m));
            tensors.push((format!("adam.v/{name}"), v));
        }
        let tensors: Vec<(String, &Mat)> = tensors;
        write_checkpoint(dir, &meta, &tensors)
    }

    /// Restores parameters, optimizer moments and curriculum state from a
    /// checkpoint directory. The current config is kept; differences from the
    /// stored one are logged.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let (meta, tensors): (CheckpointMeta, Vec<(String, Mat)>) = read_checkpoint(dir)?;
        if meta.backbone != self.model.backbone.kind() || meta.cf_dim != self.config.cf_dim {
            return Err(FaceError::Checkpoint(format!(
                "{}: checkpoint holds a {:?} backbone with d_cf {}",
                dir.display(),
                meta.backbone,
                meta.cf_dim
            )));
        }
        if meta.codebook_hash != self.model.codebook.frozen_hash() {
            return Err(FaceError::Checkpoint(format!(
                "{}: checkpoint was trained against a different token codebook",
                dir.display()
            )));
        }
        if meta.config != self.config {
            warn!("{}: config differs from the one the checkpoint was written with", dir.display());
        }
        self.model.restore(&tensors)?;
        let find = |key: String| -> Result<Mat> {
            tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| FaceError::Checkpoint(format!("missing tensor {key}")))
        };
        let mut first = Vec::with_capacity(self.model.store.len());
        let mut second = Vec::with_capacity(self.model.store.len());
        for (_, name, _) in self.model.store.iter() {
            first.push(find(format!("adam.m/{name}"))?);
            second.push(find(format!("adam.v/{name}"))?);
        }
        self.adam.restore(meta.adam_step, first, second)?;
        self.state = meta.state;
        Ok(())
    }

    /// Loads the `final` checkpoint of stage `stage`.
    pub fn load_stage(&mut self, root: &Path, stage: u8) -> Result<()> {
        let dir = checkpoint::final_dir(root, stage);
        if !checkpoint::is_complete(&dir) {
            return Err(FaceError::StageOrder {
                required: stage,
                requested: stage + 1,
            });
        }
        self.load(&dir)
    }

    /// Loads the most advanced epoch checkpoint under `root`. Returns false if
    /// there is none.
    pub fn resume_latest(&mut self, root: &Path) -> Result<bool> {
        match checkpoint::latest_epoch(root) {
            Some((stage, epoch, dir)) => {
                info!("resuming from stage {stage} epoch {epoch}");
                self.load(&dir)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

fn unique(ids: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut seen = HashSet::new();
    ids.filter(|i| seen.insert(*i)).collect()
}

use std::fmt;
use std::io::ErrorKind;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;

use face_core::checkpoint;
use face_core::data::EntityKind;
use face_core::fixture::{write_fixture, FixtureSpec};
use face_core::workspace::{self, VocabSource, Workspace, CUTOFFS};
use face_core::{FaceError, TrainConfig, Trainer};

use crate::{Cli, Command, StageArg, TrainArgs};

/// No completed checkpoint at the stage a command needs.
#[derive(Debug)]
struct Untrained {
    needed: u8,
}

impl fmt::Display for Untrained {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "no completed stage-{} checkpoint; run `face train --stage {}` first",
            self.needed, self.needed
        )
    }
}

impl std::error::Error for Untrained {}

/// 2 missing input, 3 stage order, 4 unknown token, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FaceError>() {
            return match e {
                FaceError::Io { source, .. } if source.kind() == ErrorKind::NotFound => 2,
                FaceError::StageOrder { .. } => 3,
                FaceError::UnknownToken { .. } => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<Untrained>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

pub fn run(cli: &Cli) -> Result<()> {
    let ws = Workspace::new(&cli.workdir);
    match &cli.command {
        Command::Fixture => fixture(cli, &ws),
        Command::Prepare => {
            let cfg = resolve(cli, &ws, &[])?;
            workspace::prepare(&ws, cfg.seed)?;
            Ok(())
        }
        Command::EmbedSummaries => {
            let cfg = resolve(cli, &ws, &[])?;
            let ds = workspace::load_dataset(&ws)?;
            let provider = VocabSource::load(&ws)?.text_provider(&cfg)?;
            let index = workspace::embed_summaries(&ws, &ds, &provider)?;
            info!("wrote {} anchors of width {}", index.users + index.items, index.dim);
            Ok(())
        }
        Command::Train(args) => train(cli, &ws, args),
        Command::Eval { topk } => {
            let cfg = resolve(cli, &ws, &[])?;
            let mut trainer = trained(&ws, &cfg, 1)?;
            let report = workspace::write_metrics(&ws, &mut trainer, Instant::now(), topk)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
            Ok(())
        }
        Command::Descriptors { kind, out } => {
            let cfg = resolve(cli, &ws, &[])?;
            let mut trainer = trained(&ws, &cfg, 2)?;
            let path = out.as_ref().map(|p| ws.root.join(p)).unwrap_or_else(|| ws.descriptors());
            let n = workspace::export_descriptors(&path, &mut trainer, (*kind).into())?;
            info!("wrote {n} descriptor lines to {}", path.display());
            Ok(())
        }
        Command::Generate { tokens } => {
            let cfg = resolve(cli, &ws, &[])?;
            let mut trainer = trained(&ws, &cfg, 2)?;
            let words: Vec<&str> = tokens.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
            let e = trainer.model.generate(&words)?;
            println!("{}", serde_json::to_string(&e.to_vec())?);
            Ok(())
        }
        Command::RetrievalProbe {
            kind,
            candidates,
            trials,
        } => {
            let cfg = resolve(cli, &ws, &[])?;
            let mut trainer = trained(&ws, &cfg, 2)?;
            let r = trainer.retrieval_probe((*kind).into(), *candidates, *trials)?;
            let out = serde_json::json!({
                "kind": EntityKind::from(*kind),
                "candidates": r.candidates,
                "trials": r.trials,
                "correct": r.correct,
                "accuracy": r.accuracy,
                "chance": r.chance,
                "chance_sigma": r.chance_sigma,
                "z_score": r.z_score(),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve(cli: &Cli, ws: &Workspace, extra: &[String]) -> Result<TrainConfig> {
    let base = TrainConfig::default();
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(&ws.root.join(path), &base)?,
        None => ws.config(&base)?,
    };
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.no_normalize_anchors {
        cfg.normalize_anchors = false;
    }
    cfg = cfg.with_overrides(extra)?;
    info!("resolved config (seed {}):\n{}", cfg.seed, cfg.to_toml());
    Ok(cfg)
}

fn fixture(cli: &Cli, ws: &Workspace) -> Result<()> {
    let mut spec = FixtureSpec::default();
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    write_fixture(&ws.root, &spec)?;
    let path = ws.config_file();
    if !path.exists() {
        std::fs::write(&path, TrainConfig::desk().to_toml()).with_context(|| format!("writing {}", path.display()))?;
    }
    info!("fixture written to {}", ws.root.display());
    Ok(())
}

fn train(cli: &Cli, ws: &Workspace, args: &TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(mu) = args.mu {
        extra.push(format!("mu={mu:?}"));
    }
    if let Some(lambda) = args.lambda {
        extra.push(format!("lambda={lambda:?}"));
    }
    if args.freeze_backbone {
        extra.push("freeze_backbone=true".into());
    }
    let cfg = resolve(cli, ws, &extra)?;
    let started = Instant::now();
    let mut trainer = workspace::build_trainer(ws, &cfg)?;
    let root = ws.checkpoints();
    let (first, last) = match args.stage {
        StageArg::All => (1, 3),
        StageArg::One(s) => (s, s),
    };
    if args.resume {
        trainer.resume_latest(&root)?;
    }
    if first > 1 && trainer.state.completed_stage + 1 < first {
        trainer.load_stage(&root, first - 1)?;
    }
    for stage in first..=last {
        trainer.run_stage(stage)?;
    }
    workspace::write_loss_log(ws, &trainer)?;
    let report = workspace::write_metrics(ws, &mut trainer, started, &CUTOFFS)?;
    println!("{}", serde_json::to_string_pretty(&report.metrics)?);
    Ok(())
}

/// A trainer restored from the most advanced completed stage, which must be
/// at least `needed`.
fn trained(ws: &Workspace, cfg: &TrainConfig, needed: u8) -> Result<Trainer> {
    let root = ws.checkpoints();
    let stage = latest_final(&root).filter(|&s| s >= needed).ok_or(Untrained { needed })?;
    let mut trainer = workspace::build_trainer(ws, cfg)?;
    trainer.load_stage(&root, stage)?;
    info!("loaded stage {stage} checkpoint");
    Ok(trainer)
}

fn latest_final(root: &Path) -> Option<u8> {
    (1..=3).rev().find(|&s| checkpoint::is_complete(&checkpoint::final_dir(root, s)))
}

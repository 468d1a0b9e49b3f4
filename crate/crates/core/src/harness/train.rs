use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError, HeadRetrain, Result, RunConfig};
use crate::autodiff::{zero_grad, Adam, ParamSnapshot, SeededRng, Tensor};
use crate::controller::{BudgetLibrary, Estimator};
use crate::data::{gen_dataset, CorruptionPolicy, Scene};
use crate::net::{modality_name, prefix, Model, PruneMode};
use crate::pipeline::{controller_loss, fusion_loss, pruner_loss, skipgate_loss, unimodal_loss, ControllerStep, SkipStep};

pub const STAGES: [usize; 5] = [1, 2, 3, 4, 5];

/// Mean training loss per epoch of each phase trained in one stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub phases: Vec<(String, Vec<f64>)>,
}

/// Checkpoint file written by a stage.
fn checkpoint(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.path(&format!("{name}.json"))
}

/// Fresh model with the parameters of a saved stage loaded on top.
pub fn load_stage(cfg: &RunConfig, name: &str) -> Result<Model> {
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let path = checkpoint(cfg, name);
    let snap = ParamSnapshot::load(&path)?;
    let mut model = model;
    model.params.load_from(&snap)?;
    Ok(model)
}

fn require(cfg: &RunConfig, stage: usize, names: &[&str], force: bool) -> Result<bool> {
    for name in names {
        let path = checkpoint(cfg, name);
        if !path.exists() {
            if force {
                log::warn!("stage {stage}: {} missing, starting from random init", path.display());
                return Ok(false);
            }
            return Err(HarnessError::MissingCheckpoint { stage, path });
        }
    }
    Ok(true)
}

fn save(model: &Model, cfg: &RunConfig, name: &str, keep: impl Fn(&str) -> bool) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let mut snap = model.params.snapshot();
    snap.params.retain(|r| keep(&r.name));
    Ok(snap.save(&checkpoint(cfg, name))?)
}

fn train_data(cfg: &RunConfig, corrupted: bool) -> Result<Vec<Scene>> {
    let policy = if corrupted {
        CorruptionPolicy::Mixed {
            min_severity: cfg.data.train_severity[0],
            max_severity: cfg.data.train_severity[1],
        }
    } else {
        CorruptionPolicy::Clean
    };
    let seed = SeededRng::new(cfg.seed).derive(if corrupted { 0xC0 } else { 0xC1 }).seed();
    Ok(gen_dataset(seed, cfg.data.train_samples, &cfg.data.scene, policy)?)
}

/// Minibatch Adam over `data` for `epochs` epochs, training only parameters
/// under `prefixes`. After every backward pass the frozen parameters are
/// checked for nonzero gradients.
fn run_epochs<F>(
    model: &Model,
    stage: usize,
    prefixes: &[&str],
    data: &[Scene],
    epochs: usize,
    (lr, batch_size): (f64, usize),
    rng: &mut SeededRng,
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&Scene, usize, &mut SeededRng) -> Result<Tensor>,
{
    model.params.train_only(prefixes);
    let mut adam = Adam::with_lr(lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            zero_grad(&model.params);
            for &i in batch {
                let loss = loss_fn(&data[i], epoch, rng)?;
                total += loss.item();
                loss.scale(1.0 / batch.len() as f64).backward()?;
            }
            check_frozen(model, stage)?;
            adam.step(&model.params);
        }
        let mean = total / data.len() as f64;
        info!("stage {stage} epoch {epoch}/{epochs}: loss {mean:.5}");
        history.push(mean);
    }
    model.params.freeze_all();
    Ok(history)
}

fn check_frozen(model: &Model, stage: usize) -> Result<()> {
    for (name, t) in model.params.iter() {
        if t.requires_grad() {
            continue;
        }
        let value = t.grad().iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if value != 0.0 {
            return Err(HarnessError::GradientLeak {
                stage,
                name: name.clone(),
                value,
            });
        }
    }
    Ok(())
}

/// Stage-2 starting point: both unimodal checkpoints loaded into one model.
/// Later loads override shared names, so the ranging sensor (a) wins.
pub fn fusion_init(cfg: &RunConfig, force: bool) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let names: Vec<String> = (0..cfg.model.backbone.modalities()).rev().map(|m| format!("stage1_{}", modality_name(m))).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    if require(cfg, 2, &refs, force)? {
        for name in &names {
            model.params.load_from(&ParamSnapshot::load(&checkpoint(cfg, name))?)?;
        }
    }
    Ok(model)
}

/// Trains one stage from the previous stage's checkpoint and writes its own.
/// With `force`, missing prerequisites are replaced by a random init.
pub fn train_stage(cfg: &RunConfig, stage: usize, force: bool) -> Result<StageLog> {
    let opt = match stage {
        3 => (cfg.train.controller_lr, cfg.train.controller_batch_size),
        4 => (cfg.train.skipgate_lr, cfg.train.batch_size),
        _ => (cfg.train.lr, cfg.train.batch_size),
    };
    let root = SeededRng::new(cfg.seed).derive(100 + stage as u64);
    let mut log = StageLog {
        stage,
        phases: Vec::new(),
    };
    match stage {
        1 => {
            let data = train_data(cfg, false)?;
            for m in 0..cfg.model.backbone.modalities() {
                let model = Model::new(cfg.model.clone(), cfg.seed)?;
                let mn = modality_name(m);
                let bb = format!("bb.{mn}.");
                let head = format!("head.{mn}.");
                let mut rng = root.derive(m as u64);
                let rate = cfg.train.layerdrop_rate;
                let h = run_epochs(&model, 1, &[&bb, &head, "head.bias"], &data, cfg.train.epochs.unimodal, opt, &mut rng, |s, _, r| {
                    Ok(unimodal_loss(&model, m, s, rate, r)?)
                })?;
                save(&model, cfg, &format!("stage1_{mn}"), |n| n.starts_with(&bb) || n.starts_with(&head) || n == "head.bias")?;
                log.phases.push((format!("unimodal-{mn}"), h));
            }
        }
        2 => {
            let model = fusion_init(cfg, force)?;
            let data = train_data(cfg, cfg.data.corrupt_fusion)?;
            let mut rng = root.clone();
            let (rate, drop) = (cfg.train.layerdrop_rate, cfg.train.modality_dropout);
            let h = run_epochs(&model, 2, &[prefix::BACKBONE, prefix::HEAD], &data, cfg.train.epochs.fusion, opt, &mut rng, |s, _, r| {
                Ok(fusion_loss(&model, s, rate, drop, r)?)
            })?;
            save(&model, cfg, "stage2", |_| true)?;
            log.phases.push(("fusion".into(), h));
        }
        3 => {
            let have = require(cfg, 3, &["stage2"], force)?;
            let data = train_data(cfg, true)?;
            let mut estimators = vec![(Estimator::NeuralSort, "stage3")];
            if cfg.train.train_baseline {
                estimators.push((Estimator::StraightThrough, "stage3_admn"));
            }
            for (estimator, name) in estimators {
                let model = if have { load_stage(cfg, "stage2")? } else { Model::new(cfg.model.clone(), cfg.seed)? };
                let library = BudgetLibrary::for_model(&model)?;
                // identical data order and noise for both estimators
                let mut rng = root.clone();
                let t = &cfg.train;
                let h = run_epochs(&model, 3, &[prefix::CONTROLLER], &data, t.epochs.controller, opt, &mut rng, |s, epoch, r| {
                    let step = ControllerStep {
                        budget: library.sample(r),
                        tau: t.tau(t.tau_controller, epoch),
                        estimator,
                        alpha_env: t.alpha1,
                        detach_z: t.detach_z,
                        noise: t.gumbel_noise,
                    };
                    Ok(controller_loss(&model, &library, s, step, r)?.total)
                })?;
                save(&model, cfg, name, |_| true)?;
                log.phases.push((name.into(), h));
            }
        }
        4 => {
            let model = if require(cfg, 4, &["stage3"], force)? { load_stage(cfg, "stage3")? } else { Model::new(cfg.model.clone(), cfg.seed)? };
            let library = BudgetLibrary::for_model(&model)?;
            let data = train_data(cfg, true)?;
            let mut rng = root.clone();
            let t = &cfg.train;
            let beta_m = cfg.beta_m();
            let h = run_epochs(&model, 4, &[prefix::SKIP], &data, t.epochs.skipgate, opt, &mut rng, |s, epoch, r| {
                let step = SkipStep {
                    budget: library.sample(r),
                    tau: t.tau(t.tau_skipgate, epoch),
                    alpha: t.alpha2,
                    beta: t.beta,
                    noise: t.gumbel_noise,
                };
                Ok(skipgate_loss(&model, &library, s, step, &beta_m, r)?)
            })?;
            save(&model, cfg, "stage4", |_| true)?;
            log.phases.push(("skipgate".into(), h));
        }
        5 => {
            let model = if require(cfg, 5, &["stage4"], force)? { load_stage(cfg, "stage4")? } else { Model::new(cfg.model.clone(), cfg.seed)? };
            let library = BudgetLibrary::for_model(&model)?;
            let data = train_data(cfg, true)?;
            let mut rng = root.clone();
            let t = &cfg.train;
            let soft = run_epochs(&model, 5, &[prefix::PRUNE], &data, t.epochs.prune_soft, opt, &mut rng, |s, _, r| {
                Ok(pruner_loss(&model, &library, s, library.sample(r), PruneMode::Soft, t.alpha3)?)
            })?;
            log.phases.push(("prune-soft".into(), soft));
            let head: Vec<String> = match t.head_retrain {
                HeadRetrain::Full => vec![prefix::HEAD.to_string()],
                HeadRetrain::Projection => (0..cfg.model.backbone.modalities()).map(|m| format!("head.{}.", modality_name(m))).collect(),
                HeadRetrain::None => Vec::new(),
            };
            let mut prefixes = vec![prefix::PRUNE];
            prefixes.extend(head.iter().map(String::as_str));
            let hard = run_epochs(&model, 5, &prefixes, &data, t.epochs.prune_hard, opt, &mut rng, |s, _, r| {
                Ok(pruner_loss(&model, &library, s, library.sample(r), PruneMode::Hard, t.alpha3)?)
            })?;
            log.phases.push(("prune-hard".into(), hard));
            save(&model, cfg, "stage5", |_| true)?;
        }
        other => return Err(HarnessError::UnknownStage(other)),
    }
    let path = cfg.path(&format!("stage{stage}_log.json"));
    let text = serde_json::to_string_pretty(&log).expect("log serializes");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(log)
}

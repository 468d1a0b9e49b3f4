//! Full forward passes: per-stage training losses and inference variants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, SeededRng, Tensor};
use crate::controller::{
    allocate, env_loss, extract_qoi, hard_allocation, naive_allocation, train_gates, Allocation, BudgetLibrary,
    ControllerError, Estimator,
};
use crate::data::Scene;
use crate::net::{
    detection_loss, embed, encode_modality, fuse_and_head, layerdrop_mask, modality_dropout, prune_tokens, token_scores,
    ExecutionTrace, Gates, Model, NetError, PruneMode, SkipContext, SkipMode, TokenSet,
};
use crate::relax::{hinge_utilization, st_round, HardMask, RelaxError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("variant {0} needs a budget")]
    MissingBudget(Variant),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Inference configurations compared in evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Every layer, no budget.
    Full,
    Naive,
    #[serde(rename = "SWAN-C")]
    SwanC,
    #[serde(rename = "SWAN-SC")]
    SwanSC,
    #[serde(rename = "SWAN-PSC")]
    SwanPSC,
    #[serde(rename = "ADMN-baseline")]
    Admn,
}

impl Variant {
    /// The variants of the evaluation grid, in report order.
    pub const GRID: [Variant; 5] = [Variant::Naive, Variant::SwanC, Variant::SwanSC, Variant::SwanPSC, Variant::Admn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::Naive => "Naive",
            Variant::SwanC => "SWAN-C",
            Variant::SwanSC => "SWAN-SC",
            Variant::SwanPSC => "SWAN-PSC",
            Variant::Admn => "ADMN-baseline",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn head_input(model: &Model, encoded: Vec<Tensor>) -> Vec<TokenSet> {
    let n = model.spec.backbone.tokens();
    encoded
        .into_iter()
        .enumerate()
        .map(|(m, features)| TokenSet {
            modality: m,
            features,
            cells: (0..n).collect(),
        })
        .collect()
}

fn split_mask(mask: &HardMask, layers: &[usize]) -> Vec<HardMask> {
    let mut start = 0;
    layers
        .iter()
        .map(|&l| {
            let s = mask.slice(start..start + l);
            start += l;
            s
        })
        .collect()
}

/// Detection loss of backbone `m` alone, every layer subject to LayerDrop.
pub fn unimodal_loss(model: &Model, m: usize, scene: &Scene, layerdrop: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let layers = model.spec.backbone.layers[m];
    let mask = layerdrop_mask(&[layers], layerdrop, rng).remove(0);
    let h0 = embed(model, m, &scene.grids[m])?;
    let (h, _, _) = encode_modality(model, m, &h0, &Gates::Hard(&mask), None, SkipMode::Off)?;
    let set = TokenSet {
        modality: m,
        features: h,
        cells: (0..model.spec.backbone.tokens()).collect(),
    };
    let logits = fuse_and_head(model, &[set])?;
    Ok(detection_loss(&logits, &scene.occupancy)?)
}

/// Fused detection loss with LayerDrop on every backbone and modality
/// dropout on the input.
pub fn fusion_loss(model: &Model, scene: &Scene, layerdrop: f64, modality_drop: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let mut scene = scene.clone();
    modality_dropout(&mut scene, modality_drop, rng);
    let masks = layerdrop_mask(&model.spec.backbone.layers, layerdrop, rng);
    fixed_mask_loss(model, &scene, &masks)
}

/// Detection loss with fixed per-modality layer masks and no adaptive modules.
pub fn fixed_mask_loss(model: &Model, scene: &Scene, masks: &[HardMask]) -> Result<Tensor> {
    let mut encoded = Vec::with_capacity(masks.len());
    for (m, mask) in masks.iter().enumerate() {
        let h0 = embed(model, m, &scene.grids[m])?;
        encoded.push(encode_modality(model, m, &h0, &Gates::Hard(mask), None, SkipMode::Off)?.0);
    }
    let logits = fuse_and_head(model, &head_input(model, encoded))?;
    Ok(detection_loss(&logits, &scene.occupancy)?)
}

/// Settings of one controller training sample.
#[derive(Clone, Copy, Debug)]
pub struct ControllerStep {
    pub budget: usize,
    pub tau: f64,
    pub estimator: Estimator,
    pub alpha_env: f64,
    /// Keep the detection gradient out of the QoI extractor.
    pub detach_z: bool,
    pub noise: bool,
}

#[derive(Clone, Debug)]
pub struct ControllerLoss {
    pub total: Tensor,
    pub detection: f64,
    pub env: f64,
    pub gate_sum: f64,
}

/// `L_det + α₁·L_env` through relaxed layer gates.
pub fn controller_loss(
    model: &Model,
    library: &BudgetLibrary,
    scene: &Scene,
    step: ControllerStep,
    rng: &mut SeededRng,
) -> Result<ControllerLoss> {
    let z = extract_qoi(model, &scene.grids)?;
    let env = env_loss(model, &z, scene.label())?;
    let z_alloc = if step.detach_z { z.detach() } else { z };
    let logits = allocate(model, library, &z_alloc, step.budget)?;
    let gates = train_gates(&logits, step.budget, step.tau, step.estimator, step.noise.then_some(rng))?;
    let layers = &model.spec.backbone.layers;
    let hard = split_mask(&gates.hard, layers);
    let mut encoded = Vec::with_capacity(layers.len());
    for (m, selected) in hard.iter().enumerate() {
        let soft = Gates::Soft {
            gates: gates.soft.slice(m)?,
            selected,
        };
        let h0 = embed(model, m, &scene.grids[m])?;
        encoded.push(encode_modality(model, m, &h0, &soft, None, SkipMode::Off)?.0);
    }
    let logits = fuse_and_head(model, &head_input(model, encoded))?;
    let det = detection_loss(&logits, &scene.occupancy)?;
    let total = det.add(&env.scale(step.alpha_env))?;
    let gate_sum = gates.soft.gates.data().iter().sum();
    Ok(ControllerLoss {
        detection: det.item(),
        env: env.item(),
        gate_sum,
        total,
    })
}

/// Settings of one SkipGate training sample.
#[derive(Clone, Copy, Debug)]
pub struct SkipStep {
    pub budget: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub noise: bool,
}

/// `L_det + α₂·Σ_m hinge_m` inside the frozen controller's hard allocation.
/// `beta_m` scales each modality's hinge term.
pub fn skipgate_loss(
    model: &Model,
    library: &BudgetLibrary,
    scene: &Scene,
    step: SkipStep,
    beta_m: &[f64],
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let (alloc, z) = controller_allocation(model, library, scene, step.budget)?;
    let layers = &model.spec.backbone.layers;
    let masks = split_mask(&alloc.mask, layers);
    let mut encoded = Vec::with_capacity(layers.len());
    let mut util = Tensor::scalar(0.0);
    let mut noise = step.noise.then_some(rng);
    for (m, mask) in masks.iter().enumerate() {
        let ctx = SkipContext {
            z: z.clone(),
            other_allocated: alloc.mask.popcount - mask.popcount,
        };
        let h0 = embed(model, m, &scene.grids[m])?;
        let mode = SkipMode::Train {
            tau: step.tau,
            noise: noise.as_deref_mut(),
        };
        let (h, _, d) = encode_modality(model, m, &h0, &Gates::Hard(mask), Some(&ctx), mode)?;
        encoded.push(h);
        if !d.is_empty() {
            util = util.add(&hinge_utilization(&d, step.beta, beta_m[m])?)?;
        }
    }
    let logits = fuse_and_head(model, &head_input(model, encoded))?;
    Ok(detection_loss(&logits, &scene.occupancy)?.add(&util.scale(step.alpha))?)
}

/// `L_det + α₃·Σ w̃` with the controller and SkipGates in inference mode.
pub fn pruner_loss(model: &Model, library: &BudgetLibrary, scene: &Scene, budget: usize, mode: PruneMode, alpha: f64) -> Result<Tensor> {
    let (alloc, z) = controller_allocation(model, library, scene, budget)?;
    let masks = split_mask(&alloc.mask, &model.spec.backbone.layers);
    let mut sets = Vec::with_capacity(masks.len());
    let mut kept = Tensor::scalar(0.0);
    for (m, mask) in masks.iter().enumerate() {
        let ctx = SkipContext {
            z: z.clone(),
            other_allocated: alloc.mask.popcount - mask.popcount,
        };
        let h0 = embed(model, m, &scene.grids[m])?;
        let (h, _, _) = encode_modality(model, m, &h0, &Gates::Hard(mask), Some(&ctx), SkipMode::Infer)?;
        let w = token_scores(model, m, &h)?;
        let keep = st_round(&w)?;
        kept = kept.add(&keep.sum())?;
        sets.push(prune_tokens(m, &h, &keep, &w.data(), mode)?);
    }
    let logits = fuse_and_head(model, &sets)?;
    Ok(detection_loss(&logits, &scene.occupancy)?.add(&kept.scale(alpha))?)
}

fn controller_allocation(model: &Model, library: &BudgetLibrary, scene: &Scene, b: usize) -> Result<(Allocation, Tensor)> {
    let z = extract_qoi(model, &scene.grids)?;
    let logits = allocate(model, library, &z, b)?;
    Ok((hard_allocation(&logits, b, Estimator::NeuralSort)?, z))
}

/// Result of one inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Occupancy logits, row-major.
    pub logits: Vec<f64>,
    pub detection_loss: f64,
    pub trace: ExecutionTrace,
    /// Allocation margin under the variant's own selection rule.
    pub margin: Option<f64>,
}

/// Runs `variant` on `scene`. ADMN-baseline expects a model whose controller
/// was trained with the straight-through estimator.
pub fn infer(model: &Model, library: &BudgetLibrary, scene: &Scene, variant: Variant, budget: Option<usize>) -> Result<Inference> {
    let layers = &model.spec.backbone.layers;
    let need_budget = || budget.ok_or(PipelineError::MissingBudget(variant));
    let (alloc, z) = match variant {
        Variant::Full => (None, None),
        Variant::Naive => (Some(naive_allocation(layers, need_budget()?)?), None),
        Variant::Admn => {
            let b = need_budget()?;
            let z = extract_qoi(model, &scene.grids)?;
            let logits = allocate(model, library, &z, b)?;
            (Some(hard_allocation(&logits, b, Estimator::StraightThrough)?), Some(z))
        }
        Variant::SwanC | Variant::SwanSC | Variant::SwanPSC => {
            let (a, z) = controller_allocation(model, library, scene, need_budget()?)?;
            (Some(a), Some(z))
        }
    };
    let masks = match &alloc {
        Some(a) => split_mask(&a.mask, layers),
        None => layers.iter().map(|&l| HardMask::ones(l)).collect(),
    };
    let skip = matches!(variant, Variant::SwanSC | Variant::SwanPSC);
    let prune = variant == Variant::SwanPSC;
    let mut sets = Vec::with_capacity(masks.len());
    let mut trace = ExecutionTrace {
        budget,
        controller: matches!(variant, Variant::SwanC | Variant::SwanSC | Variant::SwanPSC | Variant::Admn),
        skipgate: skip,
        pruner: prune,
        ..ExecutionTrace::default()
    };
    for (m, mask) in masks.iter().enumerate() {
        let h0 = embed(model, m, &scene.grids[m])?;
        let (h, mut mtrace, _) = if skip {
            let ctx = SkipContext {
                z: z.clone().expect("controller variants compute z"),
                other_allocated: alloc.as_ref().map_or(0, |a| a.mask.popcount) - mask.popcount,
            };
            encode_modality(model, m, &h0, &Gates::Hard(mask), Some(&ctx), SkipMode::Infer)?
        } else {
            encode_modality(model, m, &h0, &Gates::Hard(mask), None, SkipMode::Off)?
        };
        let set = if prune {
            let w = token_scores(model, m, &h)?;
            let keep = st_round(&w)?;
            let set = prune_tokens(m, &h, &keep, &w.data(), PruneMode::Hard)?;
            mtrace.tokens_kept = set.len();
            set
        } else {
            TokenSet {
                modality: m,
                features: h,
                cells: (0..model.spec.backbone.tokens()).collect(),
            }
        };
        trace.modalities.push(mtrace);
        sets.push(set);
    }
    let logits = fuse_and_head(model, &sets)?;
    let loss = detection_loss(&logits, &scene.occupancy)?.item();
    trace.detection_loss = loss;
    let margin = match (&alloc, variant) {
        (Some(a), Variant::Admn) => a.margin(Estimator::StraightThrough).ok(),
        (Some(a), Variant::SwanC | Variant::SwanSC | Variant::SwanPSC) => a.margin(Estimator::NeuralSort).ok(),
        _ => None,
    };
    Ok(Inference {
        logits: logits.to_vec(),
        detection_loss: loss,
        trace,
        margin,
    })
}

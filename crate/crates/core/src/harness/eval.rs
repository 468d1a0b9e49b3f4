use serde::{Deserialize, Serialize};

use super::{load_stage, HarnessError, Result, RunConfig};
use crate::autodiff::SeededRng;
use crate::controller::BudgetLibrary;
use crate::cost::{assert_budget, cost_of_trace};
use crate::data::{gen_dataset, CorruptionKind, CorruptionPolicy, Scene};
use crate::net::{ExecutionTrace, Model};
use crate::pipeline::{fixed_mask_loss, infer, Variant};
use crate::relax::{topk_mask, HardMask};

/// Aggregates of one (corruption, budget, variant) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub corruption: String,
    pub budget: usize,
    pub variant: Variant,
    pub samples: usize,
    pub detection_loss: f64,
    /// Occupancy F1 at probability 0.5, pooled over all cells of all samples.
    pub f1: f64,
    /// Mean controller-selected layers per modality.
    pub selected: Vec<f64>,
    pub executed: Vec<f64>,
    /// Mean fraction of tokens reaching the head, per modality.
    pub retention: Vec<f64>,
    pub cost: f64,
    /// Samples whose selected layer count was within the budget.
    pub budget_pass: usize,
    /// Samples whose executed layers were all selected.
    pub skip_subset: usize,
    pub margin: Option<f64>,
}

/// The two controllers compared on allocation margin and low-budget loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorComparison {
    pub budgets: Vec<usize>,
    /// Mean margin per budget, averaged over corruption kinds.
    pub margin_neuralsort: Vec<f64>,
    pub margin_baseline: Vec<f64>,
    pub mean_margin_neuralsort: f64,
    pub mean_margin_baseline: f64,
    /// (kind, SWAN-C loss, baseline loss) at the smallest budget for the
    /// kinds that corrupt one modality only partially.
    pub low_budget_losses: Vec<(String, f64, f64)>,
    pub low_budget_wins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub samples_per_cell: usize,
    pub severity: [f64; 2],
    pub rows: Vec<EvalRow>,
    /// Every trace of every cell passed the budget and subset checks.
    pub budget_guarantee: bool,
    pub estimator: EstimatorComparison,
}

impl EvalReport {
    pub fn row(&self, corruption: CorruptionKind, budget: usize, variant: Variant) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.corruption == corruption.name() && r.budget == budget && r.variant == variant)
    }
}

/// One evaluated sample, as written to `traces.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub corruption: String,
    pub variant: Variant,
    pub sample: usize,
    #[serde(flatten)]
    pub trace: ExecutionTrace,
}

/// Kinds compared in the estimator loss table.
pub const ASYMMETRIC: [CorruptionKind; 3] = [CorruptionKind::ASparsify, CorruptionKind::BFog, CorruptionKind::BDark];

pub(crate) fn eval_scenes(cfg: &RunConfig, kind: CorruptionKind) -> Result<Vec<Scene>> {
    let seed = SeededRng::new(cfg.seed).derive(0xE0 + kind.index() as u64).seed();
    let policy = CorruptionPolicy::Fixed {
        kind,
        min_severity: cfg.eval.severity[0],
        max_severity: cfg.eval.severity[1],
    };
    Ok(gen_dataset(seed, cfg.eval.samples_per_cell, &cfg.data.scene, policy)?)
}

#[derive(Default)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn add(&mut self, logits: &[f64], target: &[f64]) {
        for (&l, &t) in logits.iter().zip(target) {
            match (l >= 0.0, t > 0.5) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                _ => {}
            }
        }
    }

    fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Evaluates the trained stages over corruption kinds × budgets × variants.
pub fn evaluate(cfg: &RunConfig) -> Result<(EvalReport, Vec<TraceLine>)> {
    let total = cfg.model.backbone.total_layers();
    let budgets = cfg.model.controller.budgets.clone();
    if let Some(&b) = budgets.iter().find(|&&b| b > total) {
        return Err(HarnessError::BudgetTooLarge { budget: b, layers: total });
    }
    let skip_model = load_stage(cfg, "stage4")?;
    let prune_model = load_stage(cfg, "stage5")?;
    let baseline = load_stage(cfg, "stage3_admn")?;
    let library = BudgetLibrary::for_model(&skip_model)?;
    let model_for = |v: Variant| -> &Model {
        match v {
            Variant::SwanPSC => &prune_model,
            Variant::Admn => &baseline,
            _ => &skip_model,
        }
    };
    let m = cfg.model.backbone.modalities();
    let tokens = cfg.model.backbone.tokens() as f64;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for kind in CorruptionKind::ALL {
        let scenes = eval_scenes(cfg, kind)?;
        for &b in &budgets {
            for variant in Variant::GRID {
                let model = model_for(variant);
                let mut counts = Counts::default();
                let mut row = EvalRow {
                    corruption: kind.name().to_string(),
                    budget: b,
                    variant,
                    samples: scenes.len(),
                    detection_loss: 0.0,
                    f1: 0.0,
                    selected: vec![0.0; m],
                    executed: vec![0.0; m],
                    retention: vec![0.0; m],
                    cost: 0.0,
                    budget_pass: 0,
                    skip_subset: 0,
                    margin: None,
                };
                let mut margin_sum = 0.0;
                let mut margin_n = 0usize;
                for (i, scene) in scenes.iter().enumerate() {
                    let mut out = infer(model, &library, scene, variant, Some(b))?;
                    out.trace.cost = cost_of_trace(&out.trace, &cfg.cost)?;
                    counts.add(&out.logits, &scene.occupancy);
                    row.detection_loss += out.detection_loss;
                    row.cost += out.trace.cost;
                    for (k, mt) in out.trace.modalities.iter().enumerate() {
                        row.selected[k] += mt.selected() as f64;
                        row.executed[k] += mt.executed() as f64;
                        row.retention[k] += mt.tokens_kept as f64 / tokens;
                    }
                    row.budget_pass += assert_budget(&out.trace, b) as usize;
                    row.skip_subset += out.trace.skip_within_allocation() as usize;
                    if let Some(mg) = out.margin {
                        margin_sum += mg;
                        margin_n += 1;
                    }
                    if i < cfg.eval.traces_per_cell {
                        traces.push(TraceLine {
                            corruption: kind.name().to_string(),
                            variant,
                            sample: i,
                            trace: out.trace,
                        });
                    }
                }
                let n = scenes.len().max(1) as f64;
                row.detection_loss /= n;
                row.cost /= n;
                row.selected.iter_mut().chain(row.executed.iter_mut()).chain(row.retention.iter_mut()).for_each(|v| *v /= n);
                row.f1 = counts.f1();
                row.margin = (margin_n > 0).then(|| margin_sum / margin_n as f64);
                rows.push(row);
            }
        }
    }
    let budget_guarantee = rows.iter().all(|r| r.budget_pass == r.samples && r.skip_subset == r.samples);
    let mut report = EvalReport {
        seed: cfg.seed,
        samples_per_cell: cfg.eval.samples_per_cell,
        severity: cfg.eval.severity,
        rows,
        budget_guarantee,
        estimator: EstimatorComparison::default(),
    };
    report.estimator = compare_estimators(&report, &budgets);
    Ok((report, traces))
}

fn compare_estimators(report: &EvalReport, budgets: &[usize]) -> EstimatorComparison {
    let mean_margin = |b: usize, v: Variant| {
        let ms: Vec<f64> = report.rows.iter().filter(|r| r.budget == b && r.variant == v).filter_map(|r| r.margin).collect();
        ms.iter().sum::<f64>() / ms.len().max(1) as f64
    };
    let ns: Vec<f64> = budgets.iter().map(|&b| mean_margin(b, Variant::SwanC)).collect();
    let st: Vec<f64> = budgets.iter().map(|&b| mean_margin(b, Variant::Admn)).collect();
    let low = budgets[0];
    let low_budget_losses: Vec<(String, f64, f64)> = ASYMMETRIC
        .iter()
        .filter_map(|&k| {
            let c = report.row(k, low, Variant::SwanC)?;
            let a = report.row(k, low, Variant::Admn)?;
            Some((k.name().to_string(), c.detection_loss, a.detection_loss))
        })
        .collect();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    EstimatorComparison {
        budgets: budgets.to_vec(),
        mean_margin_neuralsort: avg(&ns),
        mean_margin_baseline: avg(&st),
        margin_neuralsort: ns,
        margin_baseline: st,
        low_budget_wins: low_budget_losses.iter().filter(|(_, c, a)| c <= a).count(),
        low_budget_losses,
    }
}

/// Mean detection loss over `masks` random layer subsets of size `L/2`
/// (drawn over all backbones jointly), each applied to every scene.
pub fn layerdrop_probe(model: &Model, scenes: &[Scene], masks: usize, seed: u64) -> Result<f64> {
    let layers = &model.spec.backbone.layers;
    let total: usize = layers.iter().sum();
    let mut rng = SeededRng::new(seed);
    let mut sum = 0.0;
    for _ in 0..masks {
        let scores: Vec<f64> = (0..total).map(|_| rng.uniform()).collect();
        let mask = topk_mask(&scores, total / 2).expect("half budget fits");
        let mut start = 0;
        let per: Vec<HardMask> = layers
            .iter()
            .map(|&l| {
                let s = mask.slice(start..start + l);
                start += l;
                s
            })
            .collect();
        for scene in scenes {
            sum += fixed_mask_loss(model, scene, &per)?.item();
        }
    }
    Ok(sum / (masks * scenes.len()).max(1) as f64)
}

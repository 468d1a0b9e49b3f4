//! Budget-conditioned layer allocation.
//!
//! Small per-modality networks summarize input quality into `z`; an auxiliary
//! head classifies the corruption from `z`, and an MLP maps `z` plus a fixed
//! embedding of the budget to one logit per backbone layer. Training relaxes
//! the top-b choice with a relaxed sort; inference keeps the `b` largest
//! logits.

use thiserror::Error;

use crate::autodiff::{SeededRng, Tensor};
use crate::net::{modality_name, patches, sinusoid_table, Model, NetError};
use crate::relax::{
    budget_gate, logit_margin, neuralsort, st_topk, topk_mask, HardMask, LogitVector, Noise, RelaxError, SoftGateVector,
};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("budget {0} is not in the budget library {1:?}")]
    UnknownBudget(usize, Vec<usize>),
    #[error("invalid budget library {0:?}: budgets must be strictly increasing, positive and at most {1}")]
    Library(Vec<usize>, usize),
    #[error("environment label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("budget {budget} cannot cover the {forced} forced first layers")]
    Forced { budget: usize, forced: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, ControllerError>;

/// Budget set with one fixed sinusoidal embedding per budget.
#[derive(Clone, Debug)]
pub struct BudgetLibrary {
    budgets: Vec<usize>,
    table: Vec<Vec<f64>>,
}

impl BudgetLibrary {
    pub fn new(budgets: &[usize], total_layers: usize, dim: usize) -> Result<Self> {
        let increasing = budgets.windows(2).all(|w| w[0] < w[1]);
        if budgets.is_empty() || !increasing || budgets[0] == 0 || *budgets.last().unwrap() > total_layers {
            return Err(ControllerError::Library(budgets.to_vec(), total_layers));
        }
        Ok(BudgetLibrary {
            budgets: budgets.to_vec(),
            table: sinusoid_table(total_layers + 1, dim),
        })
    }

    pub fn for_model(model: &Model) -> Result<Self> {
        let c = &model.spec.controller;
        BudgetLibrary::new(&c.budgets, model.spec.backbone.total_layers(), c.budget_embed_dim)
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    /// Constant embedding `[1, dim]` of budget `b`.
    pub fn embedding(&self, b: usize) -> Result<Tensor> {
        if !self.budgets.contains(&b) {
            return Err(ControllerError::UnknownBudget(b, self.budgets.clone()));
        }
        let row = self.table[b].clone();
        Ok(Tensor::constant(&[1, row.len()], row)?)
    }

    pub fn sample(&self, rng: &mut SeededRng) -> usize {
        self.budgets[rng.below(self.budgets.len())]
    }
}

/// QoI embedding `z` `[1, M·qoi_width]`: per modality, two per-token layers
/// over 3×3 patches followed by a mean over tokens; concatenated in modality
/// order.
pub fn extract_qoi(model: &Model, grids: &[Vec<f64>]) -> Result<Tensor> {
    let b = &model.spec.backbone;
    let mut parts = Vec::with_capacity(grids.len());
    for (m, grid) in grids.iter().enumerate() {
        let mn = modality_name(m);
        let x = Tensor::constant(&[b.tokens(), crate::net::PATCH], patches(grid, b.grid_height, b.grid_width))?;
        let h = model.linear(&format!("ctrl.qoi.{mn}.l1"), &x)?.relu();
        let h = model.linear(&format!("ctrl.qoi.{mn}.l2"), &h)?.relu();
        parts.push(h.mean_axis(0)?);
    }
    Ok(Tensor::concat(&parts, 1)?)
}

/// Corruption-class logits `[1, classes]`.
pub fn env_logits(model: &Model, z: &Tensor) -> Result<Tensor> {
    let h = model.linear("ctrl.env.l1", z)?.relu();
    Ok(model.linear("ctrl.env.l2", &h)?)
}

/// Cross-entropy of the corruption classifier against `label`.
pub fn env_loss(model: &Model, z: &Tensor, label: usize) -> Result<Tensor> {
    let classes = model.spec.controller.env_classes;
    if label >= classes {
        return Err(ControllerError::Label { label, classes });
    }
    Ok(env_logits(model, z)?.ce_with_logits(&[label])?)
}

/// Per-layer allocation logits for budget `b`, partitioned by modality.
pub fn allocate(model: &Model, library: &BudgetLibrary, z: &Tensor, b: usize) -> Result<LogitVector> {
    let e = library.embedding(b)?;
    let x = Tensor::concat(&[z.clone(), e], 1)?;
    let h = model.linear("ctrl.alloc.l1", &x)?.relu();
    let h = model.linear("ctrl.alloc.l2", &h)?.relu();
    let pi = model.linear("ctrl.alloc.l3", &h)?;
    let total = model.spec.backbone.total_layers();
    Ok(LogitVector::new(pi.reshape(&[total])?, model.spec.backbone.offsets())?)
}

/// Which gradient estimator turns logits into training gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    /// Relaxed sort plus sum of the first `b` rows.
    NeuralSort,
    /// Straight-through top-k over a softmax, with each backbone's first
    /// layer always on.
    StraightThrough,
}

/// Training-time gates: soft values plus the hard mask they relax.
pub struct TrainGates {
    pub soft: SoftGateVector,
    pub hard: HardMask,
}

/// Gates for one training sample. With `noise` the logits are perturbed by
/// Gumbel noise before the relaxed selection.
pub fn train_gates(logits: &LogitVector, b: usize, tau: f64, estimator: Estimator, noise: Option<&mut SeededRng>) -> Result<TrainGates> {
    match estimator {
        Estimator::NeuralSort => {
            let perturbed = match noise {
                Some(rng) => {
                    let g = crate::relax::sample_gumbel(rng, &[logits.len()]);
                    LogitVector::new(logits.values.add(&g)?, logits.offsets.clone())?
                }
                None => logits.clone(),
            };
            let soft = budget_gate(&neuralsort(&perturbed, tau)?, b, &logits.offsets)?;
            let hard = topk_mask(&perturbed.to_vec(), b)?;
            Ok(TrainGates { soft, hard })
        }
        Estimator::StraightThrough => {
            let (forced, rest) = forced_split(&logits.offsets);
            let k = b.checked_sub(forced.len()).ok_or(ControllerError::Forced {
                budget: b,
                forced: forced.len(),
            })?;
            let sub = LogitVector::flat(logits.values.gather(&rest, &[rest.len()])?)?;
            let noise = match noise {
                Some(rng) => Noise::Gumbel(rng),
                None => Noise::Off,
            };
            let st = st_topk(&sub, k, 1.0, noise)?;
            let n = logits.len();
            let pairs: Vec<(usize, usize)> = rest.iter().enumerate().map(|(i, &j)| (i, j)).collect();
            let mut ones = vec![0.0; n];
            forced.iter().for_each(|&i| ones[i] = 1.0);
            let gates = st.gates.scatter_add(&pairs, &[n])?.add(&Tensor::constant(&[n], ones)?)?;
            let hard = HardMask::from_bits(gates.data().iter().map(|&v| v > 0.5).collect());
            Ok(TrainGates {
                soft: SoftGateVector {
                    gates,
                    budget: b,
                    offsets: logits.offsets.clone(),
                },
                hard,
            })
        }
    }
}

/// Indices of each modality's first layer, and all the others.
fn forced_split(offsets: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let starts: Vec<usize> = std::iter::once(0).chain(offsets.iter().copied()).take(offsets.len()).collect();
    let total = offsets.last().copied().unwrap_or(0);
    let rest = (0..total).filter(|i| !starts.contains(i)).collect();
    (starts, rest)
}

/// Hard allocation of one forward pass.
#[derive(Clone, Debug)]
pub struct Allocation {
    pub logits: Vec<f64>,
    pub mask: HardMask,
    pub offsets: Vec<usize>,
    pub budget: usize,
}

impl Allocation {
    pub fn modality_mask(&self, m: usize) -> HardMask {
        let start = if m == 0 { 0 } else { self.offsets[m - 1] };
        self.mask.slice(start..self.offsets[m])
    }

    /// Selected layers per modality; sums to the popcount of the mask.
    pub fn split(&self) -> Vec<usize> {
        (0..self.offsets.len()).map(|m| self.modality_mask(m).popcount).collect()
    }

    /// Gap between the last selected and first unselected logit under the
    /// estimator's own selection rule.
    pub fn margin(&self, estimator: Estimator) -> Result<f64> {
        match estimator {
            Estimator::NeuralSort => Ok(logit_margin(&self.logits, self.budget)?),
            Estimator::StraightThrough => {
                let (forced, rest) = forced_split(&self.offsets);
                let sub: Vec<f64> = rest.iter().map(|&i| self.logits[i]).collect();
                Ok(logit_margin(&sub, self.budget - forced.len())?)
            }
        }
    }
}

/// Noise-free hard allocation from precomputed logits.
pub fn hard_allocation(logits: &LogitVector, b: usize, estimator: Estimator) -> Result<Allocation> {
    let values = logits.to_vec();
    let mask = match estimator {
        Estimator::NeuralSort => topk_mask(&values, b)?,
        Estimator::StraightThrough => {
            let (forced, rest) = forced_split(&logits.offsets);
            let k = b.checked_sub(forced.len()).ok_or(ControllerError::Forced {
                budget: b,
                forced: forced.len(),
            })?;
            let sub: Vec<f64> = rest.iter().map(|&i| values[i]).collect();
            let mut bits = vec![false; values.len()];
            forced.iter().for_each(|&i| bits[i] = true);
            for (i, on) in topk_mask(&sub, k)?.bits.into_iter().enumerate() {
                bits[rest[i]] |= on;
            }
            HardMask::from_bits(bits)
        }
    };
    Ok(Allocation {
        logits: values,
        mask,
        offsets: logits.offsets.clone(),
        budget: b,
    })
}

/// `extract_qoi`, `allocate` and the hard top-b rule, without noise.
/// Also returns `z` for downstream SkipGates.
pub fn infer_allocation(
    model: &Model,
    library: &BudgetLibrary,
    grids: &[Vec<f64>],
    b: usize,
    estimator: Estimator,
) -> Result<(Allocation, Tensor)> {
    let z = extract_qoi(model, grids)?;
    let logits = allocate(model, library, &z, b)?;
    Ok((hard_allocation(&logits, b, estimator)?, z))
}

/// Budget-agnostic split: `b / M` leading layers per modality, the
/// remainder to the modality with more layers (lower index on ties),
/// overflow past a backbone's depth moved to the others.
pub fn naive_allocation(layers: &[usize], b: usize) -> Result<Allocation> {
    let total: usize = layers.iter().sum();
    if b > total {
        return Err(RelaxError::Budget { budget: b, n: total }.into());
    }
    let m = layers.len();
    let mut counts = vec![b / m; m];
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| layers[y].cmp(&layers[x]).then(x.cmp(&y)));
    let mut extra = b % m;
    for &i in order.iter().cycle().take(m) {
        if extra == 0 {
            break;
        }
        counts[i] += 1;
        extra -= 1;
    }
    let mut overflow: usize = counts.iter().zip(layers).map(|(c, &l)| c.saturating_sub(l)).sum();
    counts.iter_mut().zip(layers).for_each(|(c, &l)| *c = (*c).min(l));
    for &i in &order {
        let room = layers[i] - counts[i];
        let add = room.min(overflow);
        counts[i] += add;
        overflow -= add;
    }
    let bits = counts.iter().zip(layers).flat_map(|(&c, &l)| (0..l).map(move |j| j < c)).collect();
    let offsets = layers
        .iter()
        .scan(0, |acc, &l| {
            *acc += l;
            Some(*acc)
        })
        .collect();
    Ok(Allocation {
        logits: vec![0.0; total],
        mask: HardMask::from_bits(bits),
        offsets,
        budget: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelSpec;

    #[test]
    fn library_validation() {
        assert!(BudgetLibrary::new(&[4, 6, 8, 16], 20, 16).is_ok());
        assert!(BudgetLibrary::new(&[4, 4], 20, 16).is_err());
        assert!(BudgetLibrary::new(&[4, 21], 20, 16).is_err());
        let lib = BudgetLibrary::new(&[4, 6], 20, 16).unwrap();
        assert!(matches!(lib.embedding(5), Err(ControllerError::UnknownBudget(5, _))));
        assert!(!lib.embedding(4).unwrap().requires_grad());
    }

    #[test]
    fn naive_split_rules() {
        assert_eq!(naive_allocation(&[8, 12], 4).unwrap().split(), vec![2, 2]);
        assert_eq!(naive_allocation(&[8, 12], 7).unwrap().split(), vec![3, 4]);
        assert_eq!(naive_allocation(&[12, 8], 7).unwrap().split(), vec![4, 3]);
        assert_eq!(naive_allocation(&[8, 12], 18).unwrap().split(), vec![8, 10]);
        let a = naive_allocation(&[8, 12], 6).unwrap();
        assert_eq!(a.modality_mask(0).bits, vec![true, true, true, false, false, false, false, false]);
        assert!(naive_allocation(&[8, 12], 21).is_err());
    }

    #[test]
    fn forced_layers_and_split() {
        let (f, r) = forced_split(&[3, 5]);
        assert_eq!(f, vec![0, 3]);
        assert_eq!(r, vec![1, 2, 4]);
        let lv = LogitVector::new(Tensor::vector(vec![-9.0, 1.0, 2.0, -9.0, 5.0]), vec![3, 5]).unwrap();
        let a = hard_allocation(&lv, 3, Estimator::StraightThrough).unwrap();
        assert_eq!(a.mask.bits, vec![true, false, false, true, true]);
        assert!(hard_allocation(&lv, 1, Estimator::StraightThrough).is_err());
        let g = train_gates(&lv, 3, 1.0, Estimator::StraightThrough, None).unwrap();
        assert_eq!(g.soft.gates.to_vec(), vec![1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.hard, a.mask);
    }

    #[test]
    fn env_loss_uniform_and_label_range() {
        let model = Model::new(ModelSpec::default(), 0).unwrap();
        for name in ["ctrl.env.l2.w", "ctrl.env.l2.b"] {
            model.param(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = Tensor::constant(&[1, model.spec.z_dim()], vec![0.3; model.spec.z_dim()]).unwrap();
        assert!((env_loss(&model, &z, 2).unwrap().item() - 6f64.ln()).abs() < 1e-12);
        assert!(matches!(env_loss(&model, &z, 6), Err(ControllerError::Label { .. })));
    }
}

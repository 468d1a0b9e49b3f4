//! Differentiable selection operators.
//!
//! * [`neuralsort`] relaxes the sorting permutation of a logit vector into a
//!   row-stochastic matrix whose row `i` (1-based) softly points at the
//!   `i`-th largest logit.
//! * [`budget_gate`] sums the first `b` rows into a soft selection mask.
//! * [`topk_mask`] is the hard inference-time counterpart.
//! * [`gumbel_sigmoid`], [`st_round`] and [`st_topk`] are the single-gate,
//!   rounding and straight-through top-k estimators.
//! * [`hinge_utilization`] penalizes positive execution logits.
//!
//! Every stochastic operator takes a [`Noise`] argument; [`Noise::Off`] makes
//! it deterministic.

use thiserror::Error;

use crate::autodiff::{AutodiffError, SeededRng, Tensor};

/// Uniform draws are clamped to `[UNIFORM_EPS, 1 − UNIFORM_EPS]` before the
/// double logarithm.
pub const UNIFORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("budget {budget} outside 0..={n}")]
    Budget { budget: usize, n: usize },
    #[error("partition offsets {0:?} must be strictly increasing and end at the vector length")]
    Partition(Vec<usize>),
    #[error("hinge constants must be positive (beta {beta}, scale {scale})")]
    Hinge { beta: f64, scale: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, RelaxError>;

/// Gumbel noise source for stochastic operators.
pub enum Noise<'a> {
    Off,
    Gumbel(&'a mut SeededRng),
}

impl Noise<'_> {
    fn sample(&mut self, shape: &[usize]) -> Option<Tensor> {
        match self {
            Noise::Off => None,
            Noise::Gumbel(rng) => Some(sample_gumbel(rng, shape)),
        }
    }
}

/// Logits over all layers, partitioned per modality.
#[derive(Clone, Debug)]
pub struct LogitVector {
    pub values: Tensor,
    /// End offset of each modality's slice; last entry equals the length.
    pub offsets: Vec<usize>,
}

impl LogitVector {
    pub fn new(values: Tensor, offsets: Vec<usize>) -> Result<Self> {
        let n = values.len();
        let increasing = offsets.windows(2).all(|w| w[0] < w[1]);
        if offsets.is_empty() || !increasing || offsets[0] == 0 || *offsets.last().unwrap() != n {
            return Err(RelaxError::Partition(offsets));
        }
        Ok(LogitVector {
            values: values.reshape(&[n])?,
            offsets,
        })
    }

    /// Single partition covering the whole vector.
    pub fn flat(values: Tensor) -> Result<Self> {
        let n = values.len();
        LogitVector::new(values, vec![n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index range of modality `m`.
    pub fn range(&self, m: usize) -> std::ops::Range<usize> {
        let start = if m == 0 { 0 } else { self.offsets[m - 1] };
        start..self.offsets[m]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.to_vec()
    }
}

/// Row-stochastic relaxation of a sorting permutation.
#[derive(Clone, Debug)]
pub struct RelaxedPermutation {
    pub matrix: Tensor,
    pub tau: f64,
}

impl RelaxedPermutation {
    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// Soft selection mask: entries in `(0, budget)` summing to `budget`.
#[derive(Clone, Debug)]
pub struct SoftGateVector {
    pub gates: Tensor,
    pub budget: usize,
    pub offsets: Vec<usize>,
}

impl SoftGateVector {
    pub fn slice(&self, m: usize) -> Result<Tensor> {
        let start = if m == 0 { 0 } else { self.offsets[m - 1] };
        let idx: Vec<usize> = (start..self.offsets[m]).collect();
        Ok(self.gates.gather(&idx, &[idx.len()])?)
    }
}

/// Binary selection mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardMask {
    pub bits: Vec<bool>,
    pub popcount: usize,
}

impl HardMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let popcount = bits.iter().filter(|&&b| b).count();
        HardMask { bits, popcount }
    }

    pub fn ones(n: usize) -> Self {
        HardMask::from_bits(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> HardMask {
        HardMask::from_bits(self.bits[range].to_vec())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(RelaxError::Temperature(tau))
    }
}

/// `Gumbel(0, 1)` quantile of a uniform draw, with the draw clamped.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// Constant tensor of independent `Gumbel(0, 1)` draws.
pub fn sample_gumbel(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| gumbel_from_uniform(rng.uniform())).collect();
    Tensor::constant(shape, data).expect("length matches shape")
}

/// Relaxed sort: row `i` (1-based) is
/// `softmax(((n + 1 − 2i)·π − A_π·1) / τ)` with `A_π[j, k] = |π_j − π_k|`.
pub fn neuralsort(logits: &LogitVector, tau: f64) -> Result<RelaxedPermutation> {
    check_tau(tau)?;
    let n = logits.len();
    let pi = &logits.values;
    // (n + 1 − 2i) for i = 1..=n, as a column
    let coeff: Vec<f64> = (1..=n).map(|i| (n + 1) as f64 - 2.0 * i as f64).collect();
    let coeff = Tensor::constant(&[n, 1], coeff)?;
    let scaled = coeff.matmul(&pi.reshape(&[1, n])?)?;
    // A·1 as a row; A is symmetric so the column sums equal the row sums
    let spread = pi.abs_pairwise_diff().sum_axis(0)?;
    let scores = scaled.sub(&spread)?.scale(1.0 / tau);
    Ok(RelaxedPermutation {
        matrix: scores.softmax_rows()?,
        tau,
    })
}

/// Sum of the first `budget` rows of a relaxed permutation.
pub fn budget_gate(perm: &RelaxedPermutation, budget: usize, offsets: &[usize]) -> Result<SoftGateVector> {
    let n = perm.n();
    if budget > n {
        return Err(RelaxError::Budget { budget, n });
    }
    let select: Vec<f64> = (0..n).map(|i| if i < budget { 1.0 } else { 0.0 }).collect();
    let select = Tensor::constant(&[1, n], select)?;
    let gates = select.matmul(&perm.matrix)?.reshape(&[n])?;
    Ok(SoftGateVector {
        gates,
        budget,
        offsets: offsets.to_vec(),
    })
}

/// Indices of the `k` largest values, ties going to the lower index.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Hard mask of the `budget` largest logits; ties go to the lower index.
pub fn topk_mask(logits: &[f64], budget: usize) -> Result<HardMask> {
    let n = logits.len();
    if budget > n {
        return Err(RelaxError::Budget { budget, n });
    }
    let mut bits = vec![false; n];
    for i in top_indices(logits, budget) {
        bits[i] = true;
    }
    Ok(HardMask::from_bits(bits))
}

/// `σ((d + g₁ − g₂) / τ)` with `g₁, g₂ ~ Gumbel(0, 1)`.
pub fn gumbel_sigmoid(d: &Tensor, tau: f64, mut noise: Noise<'_>) -> Result<Tensor> {
    check_tau(tau)?;
    let shifted = match (noise.sample(d.shape()), noise.sample(d.shape())) {
        (Some(g1), Some(g2)) => d.add(&g1.sub(&g2)?)?,
        _ => d.clone(),
    };
    Ok(shifted.scale(1.0 / tau).sigmoid())
}

/// Rounds to {0, 1} (0.5 rounds up) with an identity backward pass.
pub fn st_round(w: &Tensor) -> Result<Tensor> {
    let hard = w.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(w.straight_through(hard)?)
}

/// Straight-through top-k: forward is the hard top-`budget` mask of
/// `softmax((π + g) / τ)`, backward copies the gradient onto the softmax.
pub fn st_topk(logits: &LogitVector, budget: usize, tau: f64, mut noise: Noise<'_>) -> Result<SoftGateVector> {
    check_tau(tau)?;
    let n = logits.len();
    if budget > n {
        return Err(RelaxError::Budget { budget, n });
    }
    let perturbed = match noise.sample(&[n]) {
        Some(g) => logits.values.add(&g)?,
        None => logits.values.clone(),
    };
    let soft = perturbed.reshape(&[1, n])?.scale(1.0 / tau).softmax_rows()?.reshape(&[n])?;
    let mask = topk_mask(&soft.to_vec(), budget)?;
    Ok(SoftGateVector {
        gates: soft.straight_through(mask.as_f64())?,
        budget,
        offsets: logits.offsets.clone(),
    })
}

/// `Σ_l ReLU(d_l + β) / scale`.
pub fn hinge_utilization(logits: &[Tensor], beta: f64, scale: f64) -> Result<Tensor> {
    if !(beta > 0.0 && scale > 0.0) {
        return Err(RelaxError::Hinge { beta, scale });
    }
    let mut total = Tensor::scalar(0.0);
    let shift = Tensor::scalar(beta);
    for d in logits {
        total = total.add(&d.add(&shift)?.relu().sum())?;
    }
    Ok(total.scale(1.0 / scale))
}

/// Gap between the `budget`-th and `(budget + 1)`-th largest logits.
pub fn logit_margin(logits: &[f64], budget: usize) -> Result<f64> {
    let n = logits.len();
    if budget == 0 || budget >= n {
        return Err(RelaxError::Budget { budget, n });
    }
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[budget - 1] - sorted[budget])
}

use crate::autodiff::{SeededRng, Tensor};
use crate::data::Scene;
use crate::relax::{gumbel_sigmoid, HardMask, Noise};

use super::trace::{LayerRecord, ModalityTrace};
use super::{modality_name, skipgate_logit, Model, NetError, Result, PATCH};

/// Per-layer gates of one modality.
#[derive(Clone, Debug)]
pub enum Gates<'a> {
    /// Binary selection; unselected layers are not computed at all.
    Hard(&'a HardMask),
    /// Continuous gates `[L_m]`; `selected` is the matching hard allocation
    /// used for bookkeeping and SkipGate context.
    Soft { gates: Tensor, selected: &'a HardMask },
}

impl Gates<'_> {
    fn selected(&self) -> &HardMask {
        match self {
            Gates::Hard(m) => m,
            Gates::Soft { selected, .. } => selected,
        }
    }

    fn len(&self) -> usize {
        match self {
            Gates::Hard(m) => m.len(),
            Gates::Soft { gates, .. } => gates.len(),
        }
    }
}

/// Controller context seen by a SkipGate.
#[derive(Clone, Debug)]
pub struct SkipContext {
    /// Controller QoI embedding `[1, d_z]`.
    pub z: Tensor,
    /// Layers the controller allocated to the other modalities.
    pub other_allocated: usize,
}

pub enum SkipMode<'a> {
    Off,
    /// Gumbel-Sigmoid relaxation at temperature `tau`.
    Train { tau: f64, noise: Option<&'a mut SeededRng> },
    /// Run a selected layer iff its logit is strictly positive.
    Infer,
}

impl SkipMode<'_> {
    fn active(&self) -> bool {
        !matches!(self, SkipMode::Off)
    }
}

/// Token embedding `[H·W, D]` of modality `m` from its input grid.
pub fn embed(model: &Model, m: usize, grid: &[f64]) -> Result<Tensor> {
    let b = &model.spec.backbone;
    let p = super::patches(grid, b.grid_height, b.grid_width);
    let x = Tensor::constant(&[b.tokens(), PATCH], p)?;
    model.linear(&format!("bb.{}.embed", modality_name(m)), &x)
}

/// One residual block: `h + MLP(h) + mean_tokens(h)·W_ctx`.
pub fn layer_forward(model: &Model, m: usize, l: usize, h: &Tensor) -> Result<Tensor> {
    let base = format!("bb.{}.layer{l}", modality_name(m));
    let mlp = model.linear(&format!("{base}.mlp2"), &model.linear(&format!("{base}.mlp1"), h)?.relu())?;
    let ctx = model.linear(&format!("{base}.ctx"), &h.mean_axis(0)?)?;
    Ok(h.add(&mlp)?.add(&ctx)?)
}

/// `g·f + (1 − g)·h` for a shape-`[1]` gate.
fn blend(f: &Tensor, h: &Tensor, g: &Tensor) -> Result<Tensor> {
    let keep = Tensor::scalar(1.0).sub(g)?;
    Ok(f.mul(g)?.add(&h.mul(&keep)?)?)
}

/// Runs the backbone of modality `m` on an embedded input `h0`.
///
/// Returns the output tokens, the layer trace and the SkipGate logits that
/// were evaluated (for the utilization penalty).
pub fn encode_modality(
    model: &Model,
    m: usize,
    h0: &Tensor,
    gates: &Gates<'_>,
    skip: Option<&SkipContext>,
    mut mode: SkipMode<'_>,
) -> Result<(Tensor, ModalityTrace, Vec<Tensor>)> {
    let layers = model.spec.backbone.layers[m];
    if gates.len() != layers || gates.selected().len() != layers {
        return Err(NetError::GateLength {
            modality: m,
            expected: layers,
            got: gates.len(),
        });
    }
    let ctx = if mode.active() {
        Some(skip.ok_or(NetError::MissingContext)?)
    } else {
        None
    };
    let selected = gates.selected();
    let mut remaining = selected.popcount;
    let mut h = h0.clone();
    let mut records = Vec::with_capacity(layers);
    let mut logits = Vec::new();
    for l in 1..=layers {
        let is_selected = selected.bits[l - 1];
        if is_selected {
            remaining -= 1;
        }
        let needs_compute = is_selected || matches!(gates, Gates::Soft { .. });
        if !needs_compute {
            records.push(LayerRecord::new(l, false, false, None));
            continue;
        }
        let d = match ctx {
            Some(ctx) => {
                let mean = h.mean_axis(0)?;
                Some(skipgate_logit(model, m, &mean, l, remaining, ctx.other_allocated, &ctx.z)?)
            }
            None => None,
        };
        let logit_value = d.as_ref().map(|d| d.item());
        let executed = is_selected && logit_value.map_or(true, |v| v > 0.0);
        match (&mut mode, gates) {
            (SkipMode::Infer, _) => {
                if executed {
                    h = layer_forward(model, m, l, &h)?;
                }
            }
            (SkipMode::Train { tau, noise }, _) => {
                let noise = match noise {
                    Some(rng) => Noise::Gumbel(rng),
                    None => Noise::Off,
                };
                let a = gumbel_sigmoid(d.as_ref().expect("skip logit computed"), *tau, noise)?;
                let g = match gates {
                    Gates::Hard(_) => a,
                    Gates::Soft { gates, .. } => gates.at(l - 1)?.mul(&a)?,
                };
                let f = layer_forward(model, m, l, &h)?;
                h = blend(&f, &h, &g)?;
            }
            (SkipMode::Off, Gates::Hard(_)) => {
                h = layer_forward(model, m, l, &h)?;
            }
            (SkipMode::Off, Gates::Soft { gates, .. }) => {
                let f = layer_forward(model, m, l, &h)?;
                h = blend(&f, &h, &gates.at(l - 1)?)?;
            }
        }
        records.push(LayerRecord::new(l, is_selected, executed, logit_value));
        if let Some(d) = d {
            logits.push(d);
        }
    }
    let tokens = model.spec.backbone.tokens();
    Ok((
        h,
        ModalityTrace {
            layers: records,
            tokens_total: tokens,
            tokens_kept: tokens,
        },
        logits,
    ))
}

/// Independent per-layer keep/drop draws with drop probability `rate`.
pub fn layerdrop_mask(layers: &[usize], rate: f64, rng: &mut SeededRng) -> Vec<HardMask> {
    layers
        .iter()
        .map(|&n| HardMask::from_bits((0..n).map(|_| !rng.bernoulli(rate)).collect()))
        .collect()
}

/// With probability `rate`, zeroes the grid of one uniformly chosen modality.
/// Returns the index of the dropped modality, if any. Never drops all.
pub fn modality_dropout(scene: &mut Scene, rate: f64, rng: &mut SeededRng) -> Option<usize> {
    let m = scene.grids.len();
    if m < 2 || !rng.bernoulli(rate) {
        return None;
    }
    let drop = rng.below(m);
    scene.grids[drop].iter_mut().for_each(|v| *v = 0.0);
    Some(drop)
}

use crate::autodiff::Tensor;

use super::{modality_name, sinusoid_table, Model, NetError, Result};

/// Execution logit of layer `layer` of modality `m`:
/// `MLP_skip(h̄ ∥ e[layer] ∥ MLP_z(z) ∥ e[remaining] ∥ e[other])`.
///
/// `mean` is the `[1, D]` token mean entering the layer, `remaining` the
/// number of controller-selected layers of this modality after `layer`, and
/// `other` the number of layers allocated to the other modalities. All three
/// integers index a fixed sinusoidal table with `max_layers + 1` rows.
pub fn skipgate_logit(
    model: &Model,
    m: usize,
    mean: &Tensor,
    layer: usize,
    remaining: usize,
    other: usize,
    z: &Tensor,
) -> Result<Tensor> {
    let size = model.spec.backbone.max_layers() + 1;
    let dim = model.spec.skipgate.embed_dim;
    // rebuilt per call; the table is tiny
    let table = sinusoid_table(size, dim);
    let row = |i: usize| -> Result<Tensor> {
        let values = table.get(i).ok_or(NetError::EmbeddingIndex { index: i, size })?;
        Ok(Tensor::constant(&[1, dim], values.clone())?)
    };
    let mn = modality_name(m);
    let hbar = if model.spec.skipgate.project_mean {
        mean.matmul(model.param(&format!("skip.{mn}.proj.w"))?)?
    } else {
        mean.clone()
    };
    let zproj = model.linear(&format!("skip.{mn}.z"), z)?.relu();
    let q = Tensor::concat(&[hbar, row(layer)?, zproj, row(remaining)?, row(other)?], 1)?;
    let hidden = model.linear(&format!("skip.{mn}.hidden"), &q)?.relu();
    Ok(model.linear(&format!("skip.{mn}.out"), &hidden)?.reshape(&[1])?)
}

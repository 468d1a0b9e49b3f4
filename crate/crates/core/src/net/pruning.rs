use crate::autodiff::Tensor;

use super::head::TokenSet;
use super::{modality_name, Model, Result};

/// How a binary keep mask is applied to backbone tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneMode {
    /// Dropped tokens are multiplied by zero but still reach the head.
    Soft,
    /// Dropped tokens are removed; survivors keep their grid positions.
    Hard,
}

/// Keep logits `[H, W]` of modality `m`: a two-layer per-token MLP.
pub fn token_logits(model: &Model, m: usize, h: &Tensor) -> Result<Tensor> {
    let mn = modality_name(m);
    let b = &model.spec.backbone;
    let hidden = model.linear(&format!("prune.{mn}.l1"), h)?.relu();
    let logit = model.linear(&format!("prune.{mn}.l2"), &hidden)?;
    Ok(logit.reshape(&[b.grid_height, b.grid_width])?)
}

/// Keep probabilities `[H, W]`: the sigmoid of [`token_logits`].
pub fn token_scores(model: &Model, m: usize, h: &Tensor) -> Result<Tensor> {
    Ok(token_logits(model, m, h)?.sigmoid())
}

/// Applies a binary keep mask `keep` (`[N]` or `[H, W]`, usually the
/// straight-through rounding of [`token_scores`]) to tokens `h` `[N, D]`.
///
/// In hard mode an all-zero mask keeps the single highest-scoring token,
/// unscaled, so the head always sees at least one token per modality.
pub fn prune_tokens(m: usize, h: &Tensor, keep: &Tensor, scores: &[f64], mode: PruneMode) -> Result<TokenSet> {
    let n = h.shape()[0];
    let keep_col = keep.reshape(&[n, 1])?;
    match mode {
        PruneMode::Soft => Ok(TokenSet {
            modality: m,
            features: h.mul(&keep_col)?,
            cells: (0..n).collect(),
        }),
        PruneMode::Hard => {
            let kept: Vec<usize> = keep.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
            if kept.is_empty() {
                let best = (0..n).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).unwrap_or(0);
                return Ok(TokenSet {
                    modality: m,
                    features: h.rows(&[best])?,
                    cells: vec![best],
                });
            }
            let scaled = h.rows(&kept)?.mul(&keep_col.rows(&kept)?)?;
            Ok(TokenSet {
                modality: m,
                features: scaled,
                cells: kept,
            })
        }
    }
}

use crate::autodiff::Tensor;

use super::{modality_name, Model, Result, HEAD_OFFSETS};

/// Tokens of one modality entering the head, each tagged with its grid cell.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub modality: usize,
    /// `[n, D]`
    pub features: Tensor,
    /// Row-major cell index of each token.
    pub cells: Vec<usize>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Occupancy logits `[H, W]`.
///
/// Every token projects to nine scores, one per cell of its 3×3
/// neighborhood, through a bias-free per-modality linear map; each cell sums
/// the scores aimed at it from all surviving tokens and adds a shared bias.
/// The sum makes the head invariant to token order, and an all-zero token
/// contributes exactly nothing.
pub fn fuse_and_head(model: &Model, sets: &[TokenSet]) -> Result<Tensor> {
    let b = &model.spec.backbone;
    let (h, w) = (b.grid_height as isize, b.grid_width as isize);
    let cells = b.tokens();
    let mut logits = model.param("head.bias")?.clone();
    let mut first = true;
    for set in sets {
        let proj = set.features.matmul(model.param(&format!("head.{}.w", modality_name(set.modality)))?)?;
        let mut pairs = Vec::with_capacity(set.len() * HEAD_OFFSETS);
        for (t, &cell) in set.cells.iter().enumerate() {
            let (r, c) = ((cell / b.grid_width) as isize, (cell % b.grid_width) as isize);
            for (o, (dy, dx)) in (-1..=1isize).flat_map(|dy| (-1..=1isize).map(move |dx| (dy, dx))).enumerate() {
                let (rr, cc) = (r + dy, c + dx);
                if rr >= 0 && rr < h && cc >= 0 && cc < w {
                    pairs.push((t * HEAD_OFFSETS + o, (rr * w + cc) as usize));
                }
            }
        }
        let grid = proj.scatter_add(&pairs, &[cells])?;
        logits = if first { grid.add(&logits)? } else { logits.add(&grid)? };
        first = false;
    }
    if first {
        logits = Tensor::zeros(&[cells]).add(&logits)?;
    }
    Ok(logits.reshape(&[b.grid_height, b.grid_width])?)
}

/// Mean binary cross-entropy of occupancy logits against the target grid.
pub fn detection_loss(logits: &Tensor, target: &[f64]) -> Result<Tensor> {
    Ok(logits.bce_with_logits(target)?)
}

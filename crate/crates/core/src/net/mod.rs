//! Layer-adaptive two-modality network.
//!
//! Each modality embeds 3×3 input patches per token, then runs a stack of
//! residual [`layer`](backbone::layer_forward) blocks, each gated by
//! `h ← g·f(h) + (1 − g)·h`. A per-modality SkipGate can veto individual
//! layers inside the controller's allocation, a token scorer can prune
//! backbone outputs, and a linear scatter head turns surviving tokens into
//! per-cell occupancy logits.

mod backbone;
mod head;
mod pruning;
mod skipgate;
mod trace;

pub use backbone::{embed, encode_modality, layer_forward, layerdrop_mask, modality_dropout, Gates, SkipContext, SkipMode};
pub use head::{detection_loss, fuse_and_head, TokenSet};
pub use pruning::{prune_tokens, token_logits, token_scores, PruneMode};
pub use skipgate::skipgate_logit;
pub use trace::{ExecutionTrace, LayerRecord, ModalityTrace};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, SeededRng, Tensor};
use crate::relax::RelaxError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("modality {modality}: gate slice has length {got}, backbone has {expected} layers")]
    GateLength { modality: usize, expected: usize, got: usize },
    #[error("skip gate requires controller context (z, other-modality allocation)")]
    MissingContext,
    #[error("embedding index {index} outside table of {size} entries")]
    EmbeddingIndex { index: usize, size: usize },
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Input patch: 3×3 neighborhood of one cell, zero padded.
pub const PATCH: usize = 9;
/// Head output offsets: the 3×3 neighborhood around each token.
pub const HEAD_OFFSETS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    /// Layers per modality; modality 0 is the sharp ranging sensor.
    pub layers: Vec<usize>,
    /// Token feature width D.
    pub width: usize,
    /// Hidden width of each layer's per-token MLP.
    pub hidden: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub layerdrop_rate: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            layers: vec![8, 12],
            width: 32,
            hidden: 32,
            grid_height: 8,
            grid_width: 8,
            layerdrop_rate: 0.2,
        }
    }
}

impl BackboneSpec {
    pub fn modalities(&self) -> usize {
        self.layers.len()
    }

    pub fn total_layers(&self) -> usize {
        self.layers.iter().sum()
    }

    pub fn max_layers(&self) -> usize {
        self.layers.iter().copied().max().unwrap_or(0)
    }

    pub fn tokens(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Partition end offsets of the concatenated per-layer vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |acc, &l| {
                *acc += l;
                Some(*acc)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|&l| l == 0) {
            return Err(NetError::Spec(format!("every modality needs at least one layer: {:?}", self.layers)));
        }
        if !(0.0..1.0).contains(&self.layerdrop_rate) {
            return Err(NetError::Spec(format!("layerdrop rate {} outside [0, 1)", self.layerdrop_rate)));
        }
        if self.width == 0 || self.hidden == 0 || self.tokens() == 0 {
            return Err(NetError::Spec("zero-sized dimension".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGateSpec {
    /// Width of the fixed sinusoidal layer-index embeddings.
    pub embed_dim: usize,
    /// Output width of the projection of the controller embedding z.
    pub z_dim: usize,
    pub hidden: usize,
    /// Pass the mean token feature through a learned linear map first.
    pub project_mean: bool,
    /// Initial bias of the output logit; positive starts with every layer on.
    pub init_bias: f64,
}

impl Default for SkipGateSpec {
    fn default() -> Self {
        SkipGateSpec {
            embed_dim: 16,
            z_dim: 16,
            hidden: 32,
            project_mean: false,
            init_bias: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerSpec {
    pub hidden: usize,
    /// Initial bias of the keep logit; positive starts with every token kept.
    pub init_bias: f64,
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec {
            hidden: 16,
            init_bias: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSpec {
    /// Per-modality QoI feature width; z has `modalities × qoi_width` entries.
    pub qoi_width: usize,
    pub alloc_hidden: usize,
    pub env_hidden: usize,
    pub budget_embed_dim: usize,
    pub budgets: Vec<usize>,
    pub env_classes: usize,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        ControllerSpec {
            qoi_width: 16,
            alloc_hidden: 64,
            env_hidden: 32,
            budget_embed_dim: 16,
            budgets: vec![4, 6, 8, 16],
            env_classes: 6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub skipgate: SkipGateSpec,
    pub scorer: ScorerSpec,
    pub controller: ControllerSpec,
}

impl ModelSpec {
    pub fn z_dim(&self) -> usize {
        self.controller.qoi_width * self.backbone.modalities()
    }
}

/// Short name of modality `m` used in parameter names.
pub fn modality_name(m: usize) -> String {
    ((b'a' + m as u8) as char).to_string()
}

/// Parameter name prefixes of each trainable part.
pub mod prefix {
    pub const BACKBONE: &str = "bb.";
    pub const HEAD: &str = "head.";
    pub const SKIP: &str = "skip.";
    pub const PRUNE: &str = "prune.";
    pub const CONTROLLER: &str = "ctrl.";
}

/// All parameters of the network plus its architecture.
#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

/// Glorot-uniform initializer; each weight matrix gets its own derived stream.
struct Init {
    root: SeededRng,
    counter: u64,
}

impl Init {
    fn weights(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Vec<f64> {
        self.counter += 1;
        let mut rng = self.root.derive(self.counter);
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect()
    }

    fn linear(&mut self, ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<()> {
        let w = self.weights(fan_in, fan_out, gain);
        ps.insert(&format!("{name}.w"), &[fan_in, fan_out], w)?;
        ps.insert(&format!("{name}.b"), &[1, fan_out], vec![0.0; fan_out])?;
        Ok(())
    }
}

impl Model {
    /// Randomly initialized network, deterministic in `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.backbone.validate()?;
        let mut model = Model {
            spec,
            params: ParamStore::new(),
        };
        let mut init = Init {
            root: SeededRng::new(seed),
            counter: 0,
        };
        let b = model.spec.backbone.clone();
        let (d, hid) = (b.width, b.hidden);
        let ps = &mut model.params;
        for (m, &layers) in b.layers.iter().enumerate() {
            let mn = modality_name(m);
            init.linear(ps, &format!("bb.{mn}.embed"), PATCH, d, 1.0)?;
            for l in 1..=layers {
                let base = format!("bb.{mn}.layer{l}");
                init.linear(ps, &format!("{base}.mlp1"), d, hid, 1.0)?;
                init.linear(ps, &format!("{base}.mlp2"), hid, d, 0.5)?;
                init.linear(ps, &format!("{base}.ctx"), d, d, 0.25)?;
            }
            // bias-free so an all-zero token contributes nothing
            let w = init.weights(d, HEAD_OFFSETS, 0.5);
            ps.insert(&format!("head.{mn}.w"), &[d, HEAD_OFFSETS], w)?;
        }
        ps.insert("head.bias", &[1], vec![-2.0])?;

        let sg = model.spec.skipgate.clone();
        let z_dim = model.spec.z_dim();
        for m in 0..b.modalities() {
            let mn = modality_name(m);
            init.linear(ps, &format!("skip.{mn}.z"), z_dim, sg.z_dim, 1.0)?;
            if sg.project_mean {
                init.linear(ps, &format!("skip.{mn}.proj"), d, d, 1.0)?;
            }
            init.linear(ps, &format!("skip.{mn}.hidden"), d + sg.z_dim + 3 * sg.embed_dim, sg.hidden, 1.0)?;
            init.linear(ps, &format!("skip.{mn}.out"), sg.hidden, 1, 0.5)?;
            ps.get(&format!("skip.{mn}.out.b"))?.data_mut()[0] = sg.init_bias;
        }

        let sc = model.spec.scorer.clone();
        for m in 0..b.modalities() {
            let mn = modality_name(m);
            init.linear(ps, &format!("prune.{mn}.l1"), d, sc.hidden, 1.0)?;
            init.linear(ps, &format!("prune.{mn}.l2"), sc.hidden, 1, 0.5)?;
            ps.get(&format!("prune.{mn}.l2.b"))?.data_mut()[0] = sc.init_bias;
        }

        let c = model.spec.controller.clone();
        for m in 0..b.modalities() {
            let mn = modality_name(m);
            init.linear(ps, &format!("ctrl.qoi.{mn}.l1"), PATCH, c.qoi_width, 1.0)?;
            init.linear(ps, &format!("ctrl.qoi.{mn}.l2"), c.qoi_width, c.qoi_width, 1.0)?;
        }
        init.linear(ps, "ctrl.env.l1", z_dim, c.env_hidden, 1.0)?;
        init.linear(ps, "ctrl.env.l2", c.env_hidden, c.env_classes, 1.0)?;
        init.linear(ps, "ctrl.alloc.l1", z_dim + c.budget_embed_dim, c.alloc_hidden, 1.0)?;
        init.linear(ps, "ctrl.alloc.l2", c.alloc_hidden, c.alloc_hidden, 1.0)?;
        init.linear(ps, "ctrl.alloc.l3", c.alloc_hidden, b.total_layers(), 1.0)?;
        Ok(model)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        Ok(self.params.get(name)?)
    }

    /// `x·W + b` with parameters `{name}.w`, `{name}.b`.
    pub fn linear(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        Ok(x.matmul(w)?.add(b)?)
    }
}

/// Fixed sinusoidal embedding table: row `p` interleaves `sin(p·ω_k)` and
/// `cos(p·ω_k)` with `ω_k = 10000^(−2k/dim)`.
pub fn sinusoid_table(rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|p| {
            (0..dim)
                .map(|i| {
                    let k = (i / 2) as f64;
                    let freq = 10000f64.powf(-2.0 * k / dim as f64);
                    if i % 2 == 0 {
                        (p as f64 * freq).sin()
                    } else {
                        (p as f64 * freq).cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// 3×3 zero-padded patches of a row-major grid, one row per cell.
pub fn patches(grid: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width * PATCH);
    for r in 0..height as isize {
        for c in 0..width as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (rr, cc) = (r + dy, c + dx);
                    let inside = rr >= 0 && rr < height as isize && cc >= 0 && cc < width as isize;
                    out.push(if inside { grid[(rr * width as isize + cc) as usize] } else { 0.0 });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_rows_are_distinct() {
        let t = sinusoid_table(13, 16);
        for i in 0..t.len() {
            for j in 0..i {
                let d: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-3, "rows {i} and {j}");
            }
        }
        assert_eq!(t[0][0], 0.0);
        assert_eq!(t[0][1], 1.0);
    }

    #[test]
    fn patch_layout() {
        let grid: Vec<f64> = (0..4).map(|v| v as f64).collect();
        let p = patches(&grid, 2, 2);
        assert_eq!(p.len(), 4 * PATCH);
        // cell (0,0): center is element 4 of its patch
        assert_eq!(&p[0..9], &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 3.0]);
    }

    #[test]
    fn spec_offsets_and_validation() {
        let spec = BackboneSpec::default();
        assert_eq!(spec.offsets(), vec![8, 20]);
        assert_eq!(spec.total_layers(), 20);
        assert_eq!(spec.max_layers(), 12);
        let bad = BackboneSpec {
            layers: vec![3, 0],
            ..BackboneSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn model_init_is_seeded() {
        let a = Model::new(ModelSpec::default(), 3).unwrap();
        let b = Model::new(ModelSpec::default(), 3).unwrap();
        assert_eq!(a.params.snapshot(), b.params.snapshot());
        assert!(a.params.contains("bb.b.layer12.mlp1.w"));
        assert!(!a.params.contains("bb.a.layer9.mlp1.w"));
    }
}

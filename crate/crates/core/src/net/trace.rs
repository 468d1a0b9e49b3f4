use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// 1-based layer index within its modality.
    pub layer: usize,
    pub selected: bool,
    pub executed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skip_logit: Option<f64>,
}

impl LayerRecord {
    pub fn new(layer: usize, selected: bool, executed: bool, skip_logit: Option<f64>) -> Self {
        LayerRecord {
            layer,
            selected,
            executed,
            skip_logit,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityTrace {
    pub layers: Vec<LayerRecord>,
    pub tokens_total: usize,
    pub tokens_kept: usize,
}

impl ModalityTrace {
    pub fn selected(&self) -> usize {
        self.layers.iter().filter(|r| r.selected).count()
    }

    pub fn executed(&self) -> usize {
        self.layers.iter().filter(|r| r.executed).count()
    }
}

/// What one forward pass actually did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub modalities: Vec<ModalityTrace>,
    pub budget: Option<usize>,
    pub controller: bool,
    pub skipgate: bool,
    pub pruner: bool,
    /// Abstract cost units, filled in by the cost model.
    pub cost: f64,
    pub detection_loss: f64,
}

impl ExecutionTrace {
    pub fn selected(&self) -> usize {
        self.modalities.iter().map(|m| m.selected()).sum()
    }

    pub fn executed(&self) -> usize {
        self.modalities.iter().map(|m| m.executed()).sum()
    }

    pub fn tokens_kept(&self) -> usize {
        self.modalities.iter().map(|m| m.tokens_kept).sum()
    }

    /// Every executed layer was also selected, and per modality the executed
    /// count does not exceed the selected count.
    pub fn skip_within_allocation(&self) -> bool {
        self.modalities
            .iter()
            .all(|m| m.layers.iter().all(|r| !r.executed || r.selected) && m.executed() <= m.selected())
    }
}

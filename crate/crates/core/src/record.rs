/// One logged point: an epoch of training or one step of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    /// What produced the row, e.g. `train`, `finetune` or a pruning order.
    pub series: String,
    /// Epoch number (1-based) or sweep value such as a pruning rate.
    pub step: f64,
    /// Mean task loss over the epoch's minibatches.
    pub e0: f64,
    /// Mean embedding loss over the epoch's minibatches (0 without a regularizer).
    pub e_r: f64,
    /// Mean of `E0 + lambda * E_R` over the epoch's minibatches.
    pub total: f64,
    pub test_error: Option<f64>,
    pub ber: Option<f64>,
}

/// Loss and metric history of a run or sweep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentRecord {
    pub rows: Vec<RecordRow>,
}

impl ExperimentRecord {
    pub fn push(&mut self, row: RecordRow) {
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&RecordRow> {
        self.rows.last()
    }

    pub fn extend(&mut self, other: ExperimentRecord) {
        self.rows.extend(other.rows);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

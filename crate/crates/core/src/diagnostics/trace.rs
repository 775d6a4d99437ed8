use serde::{Deserialize, Serialize};

use crate::error::{RaveError, Result};

/// Row-stochasticity tolerance for stored single-precision rows.
pub const TRACE_ROW_TOLERANCE: f64 = 1e-6;

/// Attention rows of one query position, indexed `[layer][head][key]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub position: usize,
    pub rows: Vec<Vec<Vec<f32>>>,
}

/// Per-layer, per-head attention rows recorded for a sequence of query
/// positions (normally the answer tokens, one per decoding step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    num_layers: usize,
    num_heads: usize,
    steps: Vec<TraceStep>,
}

impl AttentionTrace {
    pub fn new(num_layers: usize, num_heads: usize) -> Self {
        AttentionTrace {
            num_layers,
            num_heads,
            steps: Vec::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step_at(&self, position: usize) -> Option<&TraceStep> {
        self.steps.iter().find(|s| s.position == position)
    }

    /// Appends the rows of query `position`, given as `[layer][head]` rows of
    /// length `position + 1`.
    pub fn record(&mut self, position: usize, rows: Vec<Vec<Vec<f64>>>) -> Result<()> {
        let rows: Vec<Vec<Vec<f32>>> = rows
            .into_iter()
            .map(|layer| {
                layer
                    .into_iter()
                    .map(|r| r.into_iter().map(|x| x as f32).collect())
                    .collect()
            })
            .collect();
        self.push(TraceStep { position, rows })
    }

    pub fn push(&mut self, step: TraceStep) -> Result<()> {
        if step.rows.len() != self.num_layers {
            return Err(RaveError::IncompleteTrace(format!(
                "position {}: {} layers recorded, expected {}",
                step.position,
                step.rows.len(),
                self.num_layers
            )));
        }
        for (l, layer) in step.rows.iter().enumerate() {
            if layer.len() != self.num_heads {
                return Err(RaveError::IncompleteTrace(format!(
                    "position {} layer {l}: {} heads recorded, expected {}",
                    step.position,
                    layer.len(),
                    self.num_heads
                )));
            }
            for (h, row) in layer.iter().enumerate() {
                if row.len() != step.position + 1 {
                    return Err(RaveError::Dimension(format!(
                        "position {} layer {l} head {h}: row of length {}",
                        step.position,
                        row.len()
                    )));
                }
                let sum: f64 = row.iter().map(|&x| f64::from(x)).sum();
                if (sum - 1.0).abs() > TRACE_ROW_TOLERANCE
                    || row.iter().any(|&x| x.is_nan() || x < 0.0)
                {
                    return Err(RaveError::DegenerateRow {
                        row: step.position,
                        reason: format!("layer {l} head {h} sums to {sum}"),
                    });
                }
            }
        }
        self.steps.push(step);
        Ok(())
    }
}

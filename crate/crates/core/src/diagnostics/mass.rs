use serde::{Deserialize, Serialize};

use super::segments::{Segment, SegmentMap};
use super::trace::{AttentionTrace, TraceStep};
use crate::error::{RaveError, Result};

/// Attention mass per segment, indexed by [`Segment::index`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentMasses(pub [f64; 4]);

impl SegmentMasses {
    pub fn get(&self, seg: Segment) -> f64 {
        self.0[seg.index()]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

fn lookup<'a>(
    trace: &'a AttentionTrace,
    segments: &SegmentMap,
    position: usize,
) -> Result<&'a TraceStep> {
    let step = trace.step_at(position).ok_or_else(|| {
        RaveError::IncompleteTrace(format!("no rows recorded for position {position}"))
    })?;
    if position >= segments.len() {
        return Err(RaveError::Dimension(format!(
            "position {position} is outside a segment map of {} positions",
            segments.len()
        )));
    }
    Ok(step)
}

/// Raw per-segment sums `sum_h sum_{j in I_s} A_tj` for one layer.
fn layer_sums(step: &TraceStep, labels: &[Segment], layer: usize) -> [f64; 4] {
    let mut sums = [0.0; 4];
    for row in &step.rows[layer] {
        for (j, &a) in row.iter().enumerate() {
            sums[labels[j].index()] += f64::from(a);
        }
    }
    sums
}

/// Layer-averaged segment mass of the query at `position`:
/// `(1 / (H L)) sum_l sum_h sum_{j in I_s} A_tj`.
pub fn segment_mass_layer_avg(
    trace: &AttentionTrace,
    segments: &SegmentMap,
    position: usize,
) -> Result<SegmentMasses> {
    let step = lookup(trace, segments, position)?;
    let labels = segments.labels();
    let mut total = [0.0; 4];
    for layer in 0..trace.num_layers() {
        let s = layer_sums(step, &labels, layer);
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    let denom = (trace.num_heads() * trace.num_layers()) as f64;
    Ok(SegmentMasses(total.map(|v| v / denom)))
}

/// Single-layer segment mass: `(1 / H) sum_h sum_{j in I_s} A^l_tj`.
pub fn segment_mass_layer_resolved(
    trace: &AttentionTrace,
    segments: &SegmentMap,
    position: usize,
    layer: usize,
) -> Result<SegmentMasses> {
    let step = lookup(trace, segments, position)?;
    if layer >= trace.num_layers() {
        return Err(RaveError::IncompleteTrace(format!(
            "layer {layer} not recorded ({} layers)",
            trace.num_layers()
        )));
    }
    let labels = segments.labels();
    let denom = trace.num_heads() as f64;
    Ok(SegmentMasses(
        layer_sums(step, &labels, layer).map(|v| v / denom),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMass {
    /// 1-based decoding step.
    pub step: usize,
    pub position: usize,
    pub layer_avg: SegmentMasses,
    pub per_layer: Vec<SegmentMasses>,
}

/// Segment masses for every recorded step of a trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MassProfile {
    pub steps: Vec<StepMass>,
}

impl MassProfile {
    pub fn from_trace(trace: &AttentionTrace, segments: &SegmentMap) -> Result<Self> {
        let mut steps = Vec::with_capacity(trace.len());
        for (i, s) in trace.steps().iter().enumerate() {
            let layer_avg = segment_mass_layer_avg(trace, segments, s.position)?;
            let per_layer = (0..trace.num_layers())
                .map(|l| segment_mass_layer_resolved(trace, segments, s.position, l))
                .collect::<Result<Vec<_>>>()?;
            steps.push(StepMass {
                step: i + 1,
                position: s.position,
                layer_avg,
                per_layer,
            });
        }
        Ok(MassProfile { steps })
    }

    pub fn num_layers(&self) -> usize {
        self.steps.first().map_or(0, |s| s.per_layer.len())
    }

    /// Mean layer-averaged mass of `seg` over all steps.
    pub fn mean(&self, seg: Segment) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.layer_avg.get(seg)).sum::<f64>() / self.steps.len() as f64
    }

    /// Stepwise mean of several profiles of equal length and depth, e.g. one
    /// per prompt. Positions are taken from the first profile.
    pub fn average(profiles: &[MassProfile]) -> Result<MassProfile> {
        let first = profiles
            .first()
            .ok_or_else(|| RaveError::IncompleteTrace("no profiles to average".into()))?;
        let (n_steps, n_layers) = (first.steps.len(), first.num_layers());
        if profiles
            .iter()
            .any(|p| p.steps.len() != n_steps || p.num_layers() != n_layers)
        {
            return Err(RaveError::IncompleteTrace(
                "profiles differ in step count or depth".into(),
            ));
        }
        let scale = 1.0 / profiles.len() as f64;
        let mut steps = Vec::with_capacity(n_steps);
        for (t, s0) in first.steps.iter().enumerate() {
            let avg = |get: &dyn Fn(&StepMass) -> &SegmentMasses| {
                let mut acc = [0.0; 4];
                for p in profiles {
                    for (a, v) in acc.iter_mut().zip(get(&p.steps[t]).0) {
                        *a += v;
                    }
                }
                SegmentMasses(acc.map(|a| a * scale))
            };
            let layer_avg = avg(&|s| &s.layer_avg);
            let per_layer = (0..n_layers).map(|l| avg(&|s| &s.per_layer[l])).collect();
            steps.push(StepMass {
                step: s0.step,
                position: s0.position,
                layer_avg,
                per_layer,
            });
        }
        Ok(MassProfile { steps })
    }
}

//! Finite-difference verification of [`Graph::backward`].
//!
//! The analytic side is the production `f32` backward pass. The oracle
//! replays the graph in `f64` and takes central differences per coordinate.
//! A coordinate whose `±eps` probes land on a different piece of a
//! piecewise-smooth op (rectifier, abs, zero norm) is skipped and counted:
//! central differences do not estimate a derivative across a kink.

use super::graph::{Feed, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter; 0 checks every coordinate.
    pub max_coords: usize,
    /// Largest tolerated fraction of skipped coordinates per parameter; one
    /// skipped coordinate always passes.
    pub max_skip_fraction: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tolerance: 1e-4,
            max_coords: 0,
            max_skip_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    /// `max |analytic - numeric| / max |numeric|` over checked coordinates.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{} checked={} skipped={} max_rel_error={:.3e} {}",
                p.name,
                p.checked,
                p.skipped,
                p.max_rel_error,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn probe_indices(len: usize, max_coords: usize) -> Vec<usize> {
    if max_coords == 0 || len <= max_coords {
        (0..len).collect()
    } else {
        (0..max_coords).map(|i| i * len / max_coords).collect()
    }
}

pub fn gradcheck(graph: &mut Graph, feed: &Feed, loss: NodeId, config: &GradcheckConfig) -> Result<GradcheckReport> {
    graph.evaluate(feed)?;
    let analytic = graph.backward(loss)?;

    let feed64: Feed<f64> = feed.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let mut params64: Vec<Tensor<f64>> = graph.params().iter().map(|p| p.value.cast()).collect();
    let base_values = graph.forward_with(&feed64, &params64)?;
    let base_pattern = graph.kink_pattern(&base_values);

    let mut report = GradcheckReport { params: Vec::new() };
    for (pi, entry) in graph.params().iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        let grad = analytic.get(&entry.name).expect("trainable param has a gradient");
        let mut checked = 0;
        let mut skipped = 0;
        let mut max_diff: f64 = 0.0;
        let mut max_ref: f64 = 0.0;
        for idx in probe_indices(entry.value.len(), config.max_coords) {
            let orig = params64[pi].data()[idx];
            let mut eval_at = |x: f64| -> Result<(f64, bool)> {
                params64[pi].data_mut()[idx] = x;
                let vals = graph.forward_with(&feed64, &params64)?;
                let same_piece = graph.kink_pattern(&vals) == base_pattern;
                Ok((vals[loss.index()].item(), same_piece))
            };
            let (plus, ok_plus) = eval_at(orig + config.eps)?;
            let (minus, ok_minus) = eval_at(orig - config.eps)?;
            params64[pi].data_mut()[idx] = orig;
            if !(ok_plus && ok_minus) {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.eps);
            let a = grad.data()[idx] as f64;
            max_diff = max_diff.max((a - numeric).abs());
            max_ref = max_ref.max(numeric.abs()).max(a.abs());
            checked += 1;
        }
        let max_rel_error = if max_ref > 0.0 { max_diff / max_ref } else { max_diff };
        let total = checked + skipped;
        // a single kink hit is tolerated even on tiny parameters
        let skip_ok = skipped <= 1 || (skipped as f64) <= config.max_skip_fraction * total as f64;
        report.params.push(ParamCheck {
            name: entry.name.clone(),
            checked,
            skipped,
            max_rel_error,
            passed: max_rel_error < config.tolerance && skip_ok,
        });
    }
    Ok(report)
}

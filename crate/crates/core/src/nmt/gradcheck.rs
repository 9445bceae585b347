use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;

use super::model::{Batch, ForwardOpts};
use super::params::{Component, ModelParams};
use crate::error::Result;
use crate::rng::derived_rng;

pub const DEFAULT_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub tensor: String,
    pub component: Component,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn components(&self) -> Vec<Component> {
        let mut c: Vec<Component> = self.coords.iter().map(|c| c.component).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite differences against backprop on [`DEFAULT_SAMPLES`]
/// coordinates, dropout off.
pub fn gradient_check(m: &ModelParams<f64>, batch: &Batch, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grads) = m.loss_and_grads(batch, &ForwardOpts::default(), None)?;
    compare_gradients(m, batch, &grads, epsilon, tolerance, DEFAULT_SAMPLES, 0)
}

/// Checks the given analytic gradients. Coordinates are drawn round-robin
/// over components; embedding rows are drawn from ids present in the batch.
pub fn compare_gradients(
    m: &ModelParams<f64>,
    batch: &Batch,
    analytic: &[Array2<f64>],
    epsilon: f64,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let opts = ForwardOpts::default();
    let mut rng = derived_rng(seed, &[0x9c]);
    let layout = m.layout();
    let src_ids: Vec<usize> = batch.src.iter().copied().filter(|&i| i != crate::vocab::PAD_ID).collect();
    let tgt_ids: Vec<usize> = batch.tgt_in.iter().copied().filter(|&i| i != crate::vocab::PAD_ID).collect();
    let mut probe = m.clone();
    let mut coords = Vec::with_capacity(samples);
    for s in 0..samples {
        let comp = Component::ALL[s % Component::ALL.len()];
        // key biases shift every score of a query equally, so their exact
        // gradient is zero and finite differences only measure roundoff
        let candidates: Vec<usize> = m
            .component_indices(comp)
            .into_iter()
            .filter(|&i| !layout.specs[i].name.ends_with(".bk"))
            .collect();
        let Some(&ti) = candidates.choose(&mut rng) else {
            continue;
        };
        let (rows, cols) = layout.specs[ti].shape;
        let row = if ti == layout.src_emb {
            *src_ids.choose(&mut rng).expect("nonempty batch")
        } else if ti == layout.tgt_emb {
            *tgt_ids.choose(&mut rng).expect("nonempty batch")
        } else {
            rng.random_range(0..rows)
        };
        let col = rng.random_range(0..cols);
        let orig = probe.tensors[ti][[row, col]];
        probe.tensors[ti][[row, col]] = orig + epsilon;
        let plus = probe.batch_loss(batch, &opts)?.loss;
        probe.tensors[ti][[row, col]] = orig - epsilon;
        let minus = probe.batch_loss(batch, &opts)?.loss;
        probe.tensors[ti][[row, col]] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[ti][[row, col]];
        coords.push(CoordCheck {
            tensor: layout.specs[ti].name.clone(),
            component: comp,
            index: (row, col),
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coords,
        max_rel_error,
        tolerance,
    })
}

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result, TensorError};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSource {
    Student,
    Teacher,
}

/// Top-layer unit values at selected positions, row per position.
///
/// A student trace keeps the graph node so losses over it reach the
/// student's parameters; a teacher trace is plain values.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub source: TraceSource,
    pub neurons: Vec<usize>,
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
    pub var: Option<Var>,
}

impl ActivationTrace {
    pub fn get(&self, position_idx: usize, neuron_idx: usize) -> f64 {
        self.values[position_idx * self.neurons.len() + neuron_idx]
    }
}

/// Reads units `neurons` of the `T×d` state matrix at `positions`.
pub fn get_activations(
    g: &mut Graph,
    states: Var,
    neurons: &[usize],
    positions: &[usize],
    source: TraceSource,
) -> Result<ActivationTrace> {
    let (t, d) = {
        let s = g.value(states);
        (s.rows(), s.cols())
    };
    if let Some(&n) = neurons.iter().find(|&&n| n >= d) {
        return Err(TensorError::Index { what: "neuron", index: n, size: d }.into());
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= t) {
        return Err(TensorError::Index { what: "position", index: p, size: t }.into());
    }
    let mut trace =
        ActivationTrace { source, neurons: neurons.to_vec(), positions: positions.to_vec(), values: Vec::new(), var: None };
    if positions.is_empty() || neurons.is_empty() {
        return Ok(trace);
    }
    let rows = g.gather_rows(states, positions)?;
    let sel = g.gather_cols(rows, neurons)?;
    trace.values = g.value(sel).data().to_vec();
    if source == TraceSource::Student {
        trace.var = Some(sel);
    }
    Ok(trace)
}

/// Student-to-teacher unit correspondence at the top decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMap {
    pub pairs: Vec<(usize, usize)>,
    pub sample_fraction: f64,
}

impl NeuronMap {
    pub fn image(&self, student: usize) -> Option<usize> {
        self.pairs.iter().find(|(s, _)| *s == student).map(|&(_, t)| t)
    }

    pub fn students(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(s, _)| s).collect()
    }

    pub fn teachers(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, t)| t).collect()
    }
}

/// `⌈fraction·d⌉` distinct units drawn uniformly, each mapped to the same
/// index on the teacher side.
pub fn sample_neuron_map(d: usize, sample_fraction: f64, rng: &mut impl Rng) -> Result<NeuronMap> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::Config(format!("sample_fraction {sample_fraction} outside (0,1]")));
    }
    let count = ((sample_fraction * d as f64 - 1e-9).ceil() as usize).clamp(1, d);
    let mut units = if count == d { (0..d).collect() } else { index::sample(rng, d, count).into_vec() };
    units.sort_unstable();
    Ok(NeuronMap { pairs: units.into_iter().map(|u| (u, u)).collect(), sample_fraction })
}

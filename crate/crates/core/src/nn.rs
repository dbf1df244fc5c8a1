//! Dense layers on top of the diffcore graph, shared by every network here.

use diffcore::{Graph, ParamStore, RngStream, Tensor, Var};

use crate::error::Result;

/// How a network's parameters enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Trainable: gradients flow back into the store.
    Train,
    /// Constant: the network is evaluated but not differentiated.
    Frozen,
}

pub(crate) fn bind(g: &mut Graph, store: &ParamStore, name: &str, mode: Bind) -> Result<Var> {
    Ok(match mode {
        Bind::Train => g.param(store, name)?,
        Bind::Frozen => g.frozen(store, name)?,
    })
}

/// Inserts `{prefix}.w` (fan_in x fan_out) and `{prefix}.b` with scaled normal init.
pub(crate) fn init_dense(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut RngStream,
) {
    let scale = gain / (fan_in as f64).sqrt();
    let w = rng.gaussian(fan_in * fan_out).into_iter().map(|x| x * scale).collect();
    store.insert(
        format!("{prefix}.w"),
        Tensor::new(vec![fan_in, fan_out], w).expect("dims"),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
}

pub(crate) fn init_table(store: &mut ParamStore, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut RngStream) {
    let v = rng.gaussian(rows * cols).into_iter().map(|x| x * scale).collect();
    store.insert(name, Tensor::new(vec![rows, cols], v).expect("dims"));
}

pub(crate) fn dense(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, mode: Bind) -> Result<Var> {
    let w = bind(g, store, &format!("{prefix}.w"), mode)?;
    let b = bind(g, store, &format!("{prefix}.b"), mode)?;
    let h = g.matmul(x, w)?;
    Ok(g.add_row(h, b)?)
}

/// Sinusoidal time features: `sin` and `cos` at four octave-spaced frequencies.
pub const TIME_FEATURES: usize = 8;

pub(crate) fn time_features(t: &[f64]) -> Vec<f64> {
    const FREQS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        for f in FREQS {
            out.push((std::f64::consts::PI * f * ti).sin());
        }
        for f in FREQS {
            out.push((std::f64::consts::PI * f * ti).cos());
        }
    }
    out
}

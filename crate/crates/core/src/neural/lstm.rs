//! Stacked LSTM forward pass, masked cross-entropy and backpropagation
//! through time.
//!
//! Per layer and position:
//!
//! ```text
//! z = b + W_x x + W_h h_prev
//! i = sigmoid(z_i)  f = sigmoid(z_f)  g = tanh(z_g)  o = sigmoid(z_o)
//! c = f * c_prev + i * g
//! h = o * tanh(c)
//! ```
//!
//! The first layer reads a one-hot token plus the feature vector; upper
//! layers read the (possibly dropped-out) hidden state of the layer below.
//! Logits are an affine map of the top layer's output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::{Gradients, LaneState, LstmLayerParams, NetworkParams, RnnState};
use super::NeuralError;
use crate::dataset::{Input, TrainingBatch, Window};

/// Inter-layer dropout setting for one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dropout {
    Off,
    /// Drop rate in `[0, 1)`; masks are drawn from a stream keyed by `seed`
    /// and the batch row, so results do not depend on thread scheduling.
    On { rate: f64, seed: u64 },
}

impl Dropout {
    fn lane_masks(&self, lane: usize) -> Option<(f64, ChaCha8Rng)> {
        match *self {
            Dropout::On { rate, seed } if rate > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(lane as u64);
                Some((rate, rng))
            }
            _ => None,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

enum LayerInput<'a> {
    Token(&'a Input),
    Dense(&'a [f64]),
}

struct LayerStep {
    /// Dense input (upper layers only), after dropout.
    input: Option<Vec<f64>>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i | f | g | o]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    /// Dropout multipliers applied to this layer's output on its way up.
    out_mask: Option<Vec<f64>>,
}

struct PositionTrace {
    layers: Vec<LayerStep>,
    /// Top-layer output fed to the head (after dropout).
    top: Vec<f64>,
    logits: Vec<f64>,
}

fn check_input(input: &Input, vocab_size: usize) -> Result<(), NeuralError> {
    match input.token {
        Some(t) if t >= vocab_size => Err(NeuralError::ShapeMismatch(format!(
            "token {t} outside vocabulary of {vocab_size}"
        ))),
        _ => Ok(()),
    }
}

/// Gate pre-activations for one layer.
fn preactivation(layer: &LstmLayerParams, vocab_size: usize, input: &LayerInput, h_prev: &[f64]) -> Vec<f64> {
    let gw = layer.gate_width();
    let mut z = layer.bias.clone();
    match input {
        LayerInput::Token(inp) => {
            if let Some(t) = inp.token {
                axpy(&mut z, 1.0, &layer.w_input[t * gw..(t + 1) * gw]);
            }
            for (k, &f) in inp.features.iter().enumerate() {
                if f != 0.0 {
                    let row = vocab_size + k;
                    axpy(&mut z, f, &layer.w_input[row * gw..(row + 1) * gw]);
                }
            }
        }
        LayerInput::Dense(x) => {
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    axpy(&mut z, xi, &layer.w_input[i * gw..(i + 1) * gw]);
                }
            }
        }
    }
    for (j, &hj) in h_prev.iter().enumerate() {
        if hj != 0.0 {
            axpy(&mut z, hj, &layer.w_recurrent[j * gw..(j + 1) * gw]);
        }
    }
    z
}

/// Applies gate nonlinearities in place and returns `(c, tanh(c), h)`.
fn cell_update(gates: &mut [f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = c_prev.len();
    let (ifg, o) = gates.split_at_mut(3 * h);
    let (i_f, g) = ifg.split_at_mut(2 * h);
    let (i, f) = i_f.split_at_mut(h);
    i.iter_mut().for_each(|x| *x = sigmoid(*x));
    f.iter_mut().for_each(|x| *x = sigmoid(*x));
    g.iter_mut().for_each(|x| *x = x.tanh());
    o.iter_mut().for_each(|x| *x = sigmoid(*x));
    let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
    let out: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
    (c, tanh_c, out)
}

fn head_logits(params: &NetworkParams, top: &[f64]) -> Vec<f64> {
    let v = params.vocab_size;
    let mut logits = params.head.bias.clone();
    for (j, &hj) in top.iter().enumerate() {
        if hj != 0.0 {
            axpy(&mut logits, hj, &params.head.weight[j * v..(j + 1) * v]);
        }
    }
    logits
}

fn dropout_mask(hidden: usize, masks: &mut Option<(f64, ChaCha8Rng)>) -> Option<Vec<f64>> {
    masks.as_mut().map(|(rate, rng)| {
        let keep = 1.0 - *rate;
        (0..hidden)
            .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { 1.0 / keep })
            .collect()
    })
}

/// Runs one sequence through the network, recording everything backprop needs.
fn lane_forward(
    params: &NetworkParams,
    window: &Window,
    state: &mut LaneState,
    dropout: &Dropout,
    lane: usize,
) -> Vec<PositionTrace> {
    let mut masks = dropout.lane_masks(lane);
    let hidden = params.hidden_dim;
    let mut trace = Vec::with_capacity(window.len());
    for input in &window.inputs {
        let mut layers = Vec::with_capacity(params.num_layers());
        let mut below: Option<Vec<f64>> = None;
        for (l, layer) in params.layers.iter().enumerate() {
            let layer_input = match &below {
                None => LayerInput::Token(input),
                Some(x) => LayerInput::Dense(x),
            };
            let mut gates = preactivation(layer, params.vocab_size, &layer_input, &state.h[l]);
            let (c, tanh_c, h) = cell_update(&mut gates, &state.c[l]);
            let out_mask = dropout_mask(hidden, &mut masks);
            let up: Vec<f64> = match &out_mask {
                Some(m) => h.iter().zip(m).map(|(a, b)| a * b).collect(),
                None => h.clone(),
            };
            let h_prev = std::mem::replace(&mut state.h[l], h);
            let c_prev = std::mem::replace(&mut state.c[l], c);
            layers.push(LayerStep {
                input: below.take(),
                h_prev,
                c_prev,
                gates,
                tanh_c,
                out_mask,
            });
            below = Some(up);
        }
        let top = below.expect("at least one layer");
        let logits = head_logits(params, &top);
        trace.push(PositionTrace { layers, top, logits });
    }
    trace
}

/// Advances a single sequence by one input with dropout off.
pub fn step(params: &NetworkParams, input: &Input, state: &mut LaneState) -> Result<Vec<f64>, NeuralError> {
    check_input(input, params.vocab_size)?;
    let mut below: Option<Vec<f64>> = None;
    for (l, layer) in params.layers.iter().enumerate() {
        let layer_input = match &below {
            None => LayerInput::Token(input),
            Some(x) => LayerInput::Dense(x),
        };
        let mut gates = preactivation(layer, params.vocab_size, &layer_input, &state.h[l]);
        let (c, _, h) = cell_update(&mut gates, &state.c[l]);
        state.c[l] = c;
        state.h[l] = h.clone();
        below = Some(h);
    }
    Ok(head_logits(params, &below.expect("at least one layer")))
}

fn check_batch(params: &NetworkParams, batch: &TrainingBatch, state: &RnnState) -> Result<(), NeuralError> {
    state.check(params, batch.lanes.len())?;
    let len = batch.window_len();
    for w in &batch.lanes {
        if w.inputs.len() != len || w.targets.len() != len || w.mask.len() != len {
            return Err(NeuralError::ShapeMismatch("ragged batch".into()));
        }
        for (inp, (&t, &m)) in w.inputs.iter().zip(w.targets.iter().zip(&w.mask)) {
            check_input(inp, params.vocab_size)?;
            if m && t >= params.vocab_size {
                return Err(NeuralError::ShapeMismatch(format!("target {t} outside vocabulary")));
            }
        }
    }
    Ok(())
}

fn lane_start_state(state: &RnnState, lane: usize, window: &Window) -> LaneState {
    if window.reset {
        LaneState::zeros(state.num_layers(), state.hidden_dim)
    } else {
        state.row(lane)
    }
}

/// Logits for every lane and position, plus the state after the window.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `logits[lane][position]` over the vocabulary.
    pub logits: Vec<Vec<Vec<f64>>>,
    pub state: RnnState,
}

pub fn forward(
    params: &NetworkParams,
    batch: &TrainingBatch,
    state: &RnnState,
    dropout: Dropout,
) -> Result<ForwardOutput, NeuralError> {
    check_batch(params, batch, state)?;
    let results: Vec<(Vec<Vec<f64>>, LaneState)> = batch
        .lanes
        .par_iter()
        .enumerate()
        .map(|(lane, window)| {
            let mut s = lane_start_state(state, lane, window);
            let trace = lane_forward(params, window, &mut s, &dropout, lane);
            (trace.into_iter().map(|p| p.logits).collect(), s)
        })
        .collect();
    let mut new_state = state.clone();
    let mut logits = Vec::with_capacity(results.len());
    for (lane, (l, s)) in results.into_iter().enumerate() {
        new_state.set_row(lane, &s);
        logits.push(l);
    }
    Ok(ForwardOutput {
        logits,
        state: new_state,
    })
}

/// Softmax probabilities (numerically stable).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    /// Mean cross-entropy (nats) over unmasked positions; 0 when none.
    pub loss: f64,
    pub grads: Gradients,
    /// State after the window, detached from the graph.
    pub state: RnnState,
    pub valid_positions: usize,
}

/// Backpropagates one lane; accumulates into `grads`, returns summed loss.
fn lane_backward(
    params: &NetworkParams,
    window: &Window,
    trace: &[PositionTrace],
    scale: f64,
    grads: &mut Gradients,
) -> f64 {
    let hidden = params.hidden_dim;
    let v = params.vocab_size;
    let n_layers = params.num_layers();
    let mut dh_next = vec![vec![0.0; hidden]; n_layers];
    let mut dc_next = vec![vec![0.0; hidden]; n_layers];
    let mut loss = 0.0;

    for t in (0..trace.len()).rev() {
        let pos = &trace[t];
        let input = &window.inputs[t];
        // Gradient arriving at the top layer's (dropped) output.
        let mut d_up = vec![0.0; hidden];
        if window.mask[t] {
            let target = window.targets[t];
            let lse = log_sum_exp(&pos.logits);
            loss += lse - pos.logits[target];
            let mut dlogits: Vec<f64> = pos.logits.iter().map(|z| (z - lse).exp() * scale).collect();
            dlogits[target] -= scale;
            axpy(&mut grads.head.bias, 1.0, &dlogits);
            for (j, &hj) in pos.top.iter().enumerate() {
                let w_row = &params.head.weight[j * v..(j + 1) * v];
                d_up[j] = dot(w_row, &dlogits);
                if hj != 0.0 {
                    axpy(&mut grads.head.weight[j * v..(j + 1) * v], hj, &dlogits);
                }
            }
        }

        for l in (0..n_layers).rev() {
            let step = &pos.layers[l];
            let layer = &params.layers[l];
            let g_layer = &mut grads.layers[l];
            let gw = layer.gate_width();
            if let Some(mask) = &step.out_mask {
                d_up.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
            }
            let (gi, rest) = step.gates.split_at(hidden);
            let (gf, rest) = rest.split_at(hidden);
            let (gg, go) = rest.split_at(hidden);
            let mut dz = vec![0.0; gw];
            for k in 0..hidden {
                let dh = d_up[k] + dh_next[l][k];
                let tc = step.tanh_c[k];
                let d_o = dh * tc;
                let dc = dh * go[k] * (1.0 - tc * tc) + dc_next[l][k];
                let d_i = dc * gg[k];
                let d_g = dc * gi[k];
                let d_f = dc * step.c_prev[k];
                dc_next[l][k] = dc * gf[k];
                dz[k] = d_i * gi[k] * (1.0 - gi[k]);
                dz[hidden + k] = d_f * gf[k] * (1.0 - gf[k]);
                dz[2 * hidden + k] = d_g * (1.0 - gg[k] * gg[k]);
                dz[3 * hidden + k] = d_o * go[k] * (1.0 - go[k]);
            }
            axpy(&mut g_layer.bias, 1.0, &dz);
            for (j, &hj) in step.h_prev.iter().enumerate() {
                let row = j * gw..(j + 1) * gw;
                dh_next[l][j] = dot(&layer.w_recurrent[row.clone()], &dz);
                if hj != 0.0 {
                    axpy(&mut g_layer.w_recurrent[row], hj, &dz);
                }
            }
            match &step.input {
                None => {
                    if let Some(tok) = input.token {
                        axpy(&mut g_layer.w_input[tok * gw..(tok + 1) * gw], 1.0, &dz);
                    }
                    for (k, &f) in input.features.iter().enumerate() {
                        if f != 0.0 {
                            let row = v + k;
                            axpy(&mut g_layer.w_input[row * gw..(row + 1) * gw], f, &dz);
                        }
                    }
                }
                Some(x) => {
                    let mut dx = vec![0.0; x.len()];
                    for (i, &xi) in x.iter().enumerate() {
                        let row = i * gw..(i + 1) * gw;
                        dx[i] = dot(&layer.w_input[row.clone()], &dz);
                        if xi != 0.0 {
                            axpy(&mut g_layer.w_input[row], xi, &dz);
                        }
                    }
                    d_up = dx;
                }
            }
        }
    }
    loss
}

/// Loss sum, gradients and final lane states of one chunk of lanes.
type LanePartial = (f64, Gradients, Vec<(usize, LaneState)>);

/// Mean masked cross-entropy and its gradient with respect to every
/// parameter, by backpropagation through all positions of the window.
pub fn loss_and_grads(
    params: &NetworkParams,
    batch: &TrainingBatch,
    state: &RnnState,
    dropout: Dropout,
) -> Result<LossAndGrads, NeuralError> {
    check_batch(params, batch, state)?;
    let valid = batch.valid_positions();
    let scale = if valid > 0 { 1.0 / valid as f64 } else { 0.0 };
    let lanes = batch.lanes.len();
    // Fixed partition of lanes into chunks so the floating-point summation
    // order is independent of the thread pool.
    let chunk = lanes.div_ceil(8).max(1);
    let partials: Vec<LanePartial> = (0..lanes)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|idxs| {
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            let mut states = Vec::with_capacity(idxs.len());
            for &lane in idxs {
                let window = &batch.lanes[lane];
                let mut s = lane_start_state(state, lane, window);
                let trace = lane_forward(params, window, &mut s, &dropout, lane);
                loss += lane_backward(params, window, &trace, scale, &mut grads);
                states.push((lane, s));
            }
            (loss, grads, states)
        })
        .collect();

    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let mut new_state = state.clone();
    for (loss, g, states) in partials {
        total += loss;
        grads.accumulate(&g);
        for (lane, s) in states {
            new_state.set_row(lane, &s);
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(NeuralError::NonFiniteLoss);
    }
    Ok(LossAndGrads {
        loss,
        grads,
        state: new_state,
        valid_positions: valid,
    })
}

/// Summed cross-entropy and valid-position count with dropout off.
pub fn evaluate_batch(params: &NetworkParams, batch: &TrainingBatch, state: &RnnState) -> Result<(f64, usize, RnnState), NeuralError> {
    let out = forward(params, batch, state, Dropout::Off)?;
    let mut total = 0.0;
    let mut count = 0;
    for (lane_logits, window) in out.logits.iter().zip(&batch.lanes) {
        for ((logits, &t), &m) in lane_logits.iter().zip(&window.targets).zip(&window.mask) {
            if m {
                total += log_sum_exp(logits) - logits[t];
                count += 1;
            }
        }
    }
    if !total.is_finite() {
        return Err(NeuralError::NonFiniteLoss);
    }
    Ok((total, count, out.state))
}

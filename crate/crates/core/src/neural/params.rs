use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NeuralError;
use crate::encoder::FEATURE_DIM;

/// Number of LSTM gates (input, forget, cell candidate, output), stored in
/// that order as contiguous blocks of `hidden_dim` columns.
pub const GATES: usize = 4;

/// One LSTM layer.
///
/// Weight matrices are stored input-major: row `i` of `w_input` holds the
/// `4 * hidden_dim` gate pre-activation contributions of input unit `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: Vec<f64>,
    pub w_recurrent: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let g = GATES * hidden_dim;
        LstmLayerParams {
            input_dim,
            hidden_dim,
            w_input: vec![0.0; input_dim * g],
            w_recurrent: vec![0.0; hidden_dim * g],
            bias: vec![0.0; g],
        }
    }

    pub fn gate_width(&self) -> usize {
        GATES * self.hidden_dim
    }

    /// Weight from input unit `i` to gate row `g` (`0..4H`).
    pub fn w_input_at(&self, i: usize, g: usize) -> f64 {
        self.w_input[i * self.gate_width() + g]
    }

    pub fn w_recurrent_at(&self, j: usize, g: usize) -> f64 {
        self.w_recurrent[j * self.gate_width() + g]
    }
}

/// Affine map from the top hidden state to vocabulary logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// `hidden_dim x vocab_size`, row per hidden unit.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl OutputHead {
    pub fn weight_at(&self, j: usize, v: usize) -> f64 {
        self.weight[j * self.vocab_size + v]
    }
}

/// All learnable tensors of the stacked LSTM language model.
///
/// The same shape doubles as the gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: Vec<LstmLayerParams>,
    pub head: OutputHead,
}

pub type Gradients = NetworkParams;

impl NetworkParams {
    pub fn zeros(vocab_size: usize, hidden_dim: usize, num_layers: usize) -> Self {
        assert!(num_layers >= 1, "at least one LSTM layer");
        let input_dim = vocab_size + FEATURE_DIM;
        let layers = (0..num_layers)
            .map(|l| LstmLayerParams::zeros(if l == 0 { input_dim } else { hidden_dim }, hidden_dim))
            .collect();
        NetworkParams {
            vocab_size,
            hidden_dim,
            layers,
            head: OutputHead {
                hidden_dim,
                vocab_size,
                weight: vec![0.0; hidden_dim * vocab_size],
                bias: vec![0.0; vocab_size],
            },
        }
    }

    /// Uniform weights in `[-scale, scale]`, zero biases except the forget
    /// gate, which starts at `forget_bias`.
    pub fn init<R: Rng>(
        vocab_size: usize,
        hidden_dim: usize,
        num_layers: usize,
        scale: f64,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(vocab_size, hidden_dim, num_layers);
        let mut fill = |v: &mut [f64]| {
            for x in v {
                *x = if scale > 0.0 { rng.gen_range(-scale..=scale) } else { 0.0 };
            }
        };
        for layer in &mut p.layers {
            fill(&mut layer.w_input);
            fill(&mut layer.w_recurrent);
            layer.bias[hidden_dim..2 * hidden_dim].fill(forget_bias);
        }
        fill(&mut p.head.weight);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size, self.hidden_dim, self.layers.len())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.vocab_size + FEATURE_DIM
    }

    /// Named tensors in a fixed order (used by checkpoints and optimizers).
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("lstm{l}.w_input"), layer.w_input.as_slice()));
            out.push((format!("lstm{l}.w_recurrent"), layer.w_recurrent.as_slice()));
            out.push((format!("lstm{l}.bias"), layer.bias.as_slice()));
        }
        out.push(("head.weight".to_string(), self.head.weight.as_slice()));
        out.push(("head.bias".to_string(), self.head.bias.as_slice()));
        out
    }

    /// Mutable views in the same order as [`NetworkParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * self.layers.len() + 2);
        for layer in &mut self.layers {
            out.push(&mut layer.w_input);
            out.push(&mut layer.w_recurrent);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_shape(&self, other: &NetworkParams) -> bool {
        self.vocab_size == other.vocab_size
            && self.hidden_dim == other.hidden_dim
            && self.layers.len() == other.layers.len()
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|((_, a), (_, b))| a.len() == b.len())
    }

    pub fn ensure_same_shape(&self, other: &NetworkParams) -> Result<(), NeuralError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(NeuralError::ShapeMismatch(
                "parameter sets have different shapes".into(),
            ))
        }
    }

    /// Adds `other` element-wise.
    pub fn accumulate(&mut self, other: &NetworkParams) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Recurrent state for a batch: per layer, `rows x hidden_dim` cell and
/// hidden values.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnState {
    pub rows: usize,
    pub hidden_dim: usize,
    pub c: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

impl RnnState {
    pub fn zeros(num_layers: usize, rows: usize, hidden_dim: usize) -> Self {
        RnnState {
            rows,
            hidden_dim,
            c: vec![vec![0.0; rows * hidden_dim]; num_layers],
            h: vec![vec![0.0; rows * hidden_dim]; num_layers],
        }
    }

    pub fn for_params(params: &NetworkParams, rows: usize) -> Self {
        Self::zeros(params.num_layers(), rows, params.hidden_dim)
    }

    pub fn num_layers(&self) -> usize {
        self.c.len()
    }

    pub fn reset_row(&mut self, row: usize) {
        let range = row * self.hidden_dim..(row + 1) * self.hidden_dim;
        for l in 0..self.num_layers() {
            self.c[l][range.clone()].fill(0.0);
            self.h[l][range.clone()].fill(0.0);
        }
    }

    pub(crate) fn row(&self, row: usize) -> LaneState {
        let range = row * self.hidden_dim..(row + 1) * self.hidden_dim;
        LaneState {
            c: self.c.iter().map(|v| v[range.clone()].to_vec()).collect(),
            h: self.h.iter().map(|v| v[range.clone()].to_vec()).collect(),
        }
    }

    pub(crate) fn set_row(&mut self, row: usize, lane: &LaneState) {
        let range = row * self.hidden_dim..(row + 1) * self.hidden_dim;
        for l in 0..self.num_layers() {
            self.c[l][range.clone()].copy_from_slice(&lane.c[l]);
            self.h[l][range.clone()].copy_from_slice(&lane.h[l]);
        }
    }

    pub fn check(&self, params: &NetworkParams, rows: usize) -> Result<(), NeuralError> {
        if self.rows != rows || self.hidden_dim != params.hidden_dim || self.num_layers() != params.num_layers() {
            return Err(NeuralError::ShapeMismatch(format!(
                "state is {} rows x {} layers x {} units, expected {} x {} x {}",
                self.rows,
                self.num_layers(),
                self.hidden_dim,
                rows,
                params.num_layers(),
                params.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.c.iter().chain(&self.h).all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// State of a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneState {
    pub c: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

impl LaneState {
    pub fn zeros(num_layers: usize, hidden_dim: usize) -> Self {
        LaneState {
            c: vec![vec![0.0; hidden_dim]; num_layers],
            h: vec![vec![0.0; hidden_dim]; num_layers],
        }
    }

    pub fn for_params(params: &NetworkParams) -> Self {
        Self::zeros(params.num_layers(), params.hidden_dim)
    }
}

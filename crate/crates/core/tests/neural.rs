use bandsmith_core::dataset::{Input, TrainingBatch, Window};
use bandsmith_core::neural::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_window(rng: &mut ChaCha8Rng, vocab: usize, len: usize, valid: usize, reset: bool) -> Window {
    let inputs = (0..len)
        .map(|i| {
            let mut features = [0.0; 6];
            for f in features.iter_mut() {
                *f = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            }
            Input {
                token: if i == 0 && reset { None } else { Some(rng.gen_range(0..vocab)) },
                features,
            }
        })
        .collect();
    Window {
        inputs,
        targets: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
        mask: (0..len).map(|i| i < valid).collect(),
        reset,
    }
}

fn random_state(rng: &mut ChaCha8Rng, params: &NetworkParams, rows: usize) -> RnnState {
    let mut s = RnnState::for_params(params, rows);
    for v in s.c.iter_mut().chain(s.h.iter_mut()) {
        v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    }
    s
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct scalar transcription of the LSTM equations for a single sequence.
fn oracle_logits(p: &NetworkParams, inputs: &[Input], c0: &[Vec<f64>], h0: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let hd = p.hidden_dim;
    let mut c = c0.to_vec();
    let mut h = h0.to_vec();
    let mut out = Vec::new();
    for input in inputs {
        let mut x: Vec<f64> = vec![0.0; p.vocab_size];
        if let Some(t) = input.token {
            x[t] = 1.0;
        }
        x.extend_from_slice(&input.features);
        for (l, layer) in p.layers.iter().enumerate() {
            let mut new_h = vec![0.0; hd];
            let mut new_c = vec![0.0; hd];
            for k in 0..hd {
                let pre = |gate: usize| {
                    let g = gate * hd + k;
                    let mut z = layer.bias[g];
                    for (i, xi) in x.iter().enumerate() {
                        z += xi * layer.w_input_at(i, g);
                    }
                    for (j, hj) in h[l].iter().enumerate() {
                        z += hj * layer.w_recurrent_at(j, g);
                    }
                    z
                };
                let i_gate = sig(pre(0));
                let f_gate = sig(pre(1));
                let g_cand = pre(2).tanh();
                let o_gate = sig(pre(3));
                new_c[k] = f_gate * c[l][k] + i_gate * g_cand;
                new_h[k] = o_gate * new_c[k].tanh();
            }
            c[l] = new_c;
            h[l] = new_h.clone();
            x = new_h;
        }
        let logits = (0..p.vocab_size)
            .map(|v| p.head.bias[v] + (0..hd).map(|j| x[j] * p.head.weight_at(j, v)).sum::<f64>())
            .collect();
        out.push(logits);
    }
    out
}

fn tiny_params(seed: u64, scale: f64) -> NetworkParams {
    NetworkParams::init(6, 4, 2, scale, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn zero_network_is_uniform() {
    let p = NetworkParams::zeros(10, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = TrainingBatch {
        lanes: vec![random_window(&mut rng, 10, 7, 7, true), random_window(&mut rng, 10, 7, 5, false)],
    };
    let state = RnnState::for_params(&p, 2);
    let out = forward(&p, &batch, &state, Dropout::Off).unwrap();
    for lane in &out.logits {
        for logits in lane {
            assert!(logits.iter().all(|&x| x == 0.0));
            for q in softmax(logits) {
                assert!((q - 0.1).abs() < 1e-15);
            }
        }
    }
    let lg = loss_and_grads(&p, &batch, &state, Dropout::Off).unwrap();
    assert!((lg.loss - 10f64.ln()).abs() < 1e-12);
    assert_eq!(lg.valid_positions, 12);
}

#[test]
fn forward_matches_scalar_oracle() {
    let p = tiny_params(11, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = TrainingBatch {
        lanes: vec![random_window(&mut rng, 6, 9, 9, true), random_window(&mut rng, 6, 9, 9, false)],
    };
    let state = random_state(&mut rng, &p, 2);
    let out = forward(&p, &batch, &state, Dropout::Off).unwrap();
    for (lane, window) in batch.lanes.iter().enumerate() {
        let (c0, h0): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if window.reset {
            (vec![vec![0.0; 4]; 2], vec![vec![0.0; 4]; 2])
        } else {
            (
                state.c.iter().map(|v| v[lane * 4..lane * 4 + 4].to_vec()).collect(),
                state.h.iter().map(|v| v[lane * 4..lane * 4 + 4].to_vec()).collect(),
            )
        };
        let expected = oracle_logits(&p, &window.inputs, &c0, &h0);
        for (a, b) in out.logits[lane].iter().zip(&expected) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }
}

#[test]
fn single_step_matches_batched_forward() {
    let p = tiny_params(2, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let window = random_window(&mut rng, 6, 6, 6, true);
    let out = forward(&p, &TrainingBatch { lanes: vec![window.clone()] }, &RnnState::for_params(&p, 1), Dropout::Off).unwrap();
    let mut lane = LaneState::for_params(&p);
    for (i, input) in window.inputs.iter().enumerate() {
        assert_eq!(step(&p, input, &mut lane).unwrap(), out.logits[0][i]);
    }
    assert_eq!(lane.h, out.state.h.clone());
}

#[test]
fn forward_is_deterministic_and_chains_state() {
    let p = tiny_params(4, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let full = random_window(&mut rng, 6, 8, 8, true);
    let state = RnnState::for_params(&p, 1);
    let whole = forward(&p, &TrainingBatch { lanes: vec![full.clone()] }, &state, Dropout::Off).unwrap();
    let again = forward(&p, &TrainingBatch { lanes: vec![full.clone()] }, &state, Dropout::Off).unwrap();
    assert_eq!(whole.logits, again.logits);

    let half = |range: std::ops::Range<usize>, reset: bool| Window {
        inputs: full.inputs[range.clone()].to_vec(),
        targets: full.targets[range.clone()].to_vec(),
        mask: full.mask[range].to_vec(),
        reset,
    };
    let first = forward(&p, &TrainingBatch { lanes: vec![half(0..4, true)] }, &state, Dropout::Off).unwrap();
    let second = forward(&p, &TrainingBatch { lanes: vec![half(4..8, false)] }, &first.state, Dropout::Off).unwrap();
    let chained: Vec<_> = first.logits[0].iter().chain(&second.logits[0]).cloned().collect();
    for (a, b) in chained.iter().zip(&whole.logits[0]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_eq!(second.state, whole.state);
}

#[test]
fn lanes_are_independent_of_batching() {
    let p = tiny_params(6, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let windows: Vec<Window> = (0..11).map(|_| random_window(&mut rng, 6, 5, 5, true)).collect();
    let batch = TrainingBatch { lanes: windows.clone() };
    let all = forward(&p, &batch, &RnnState::for_params(&p, 11), Dropout::Off).unwrap();
    for (i, w) in windows.into_iter().enumerate() {
        let one = forward(&p, &TrainingBatch { lanes: vec![w] }, &RnnState::for_params(&p, 1), Dropout::Off).unwrap();
        assert_eq!(one.logits[0], all.logits[i]);
    }
}

#[test]
fn fully_masked_batch_has_zero_loss_and_gradient() {
    let p = tiny_params(9, 0.5);
    let batch = TrainingBatch {
        lanes: vec![Window::padding(4), Window::padding(4)],
    };
    let lg = loss_and_grads(&p, &batch, &RnnState::for_params(&p, 2), Dropout::Off).unwrap();
    assert_eq!(lg.loss, 0.0);
    assert_eq!(lg.valid_positions, 0);
    assert_eq!(lg.grads.squared_norm(), 0.0);
}

#[test]
fn shape_errors() {
    let p = tiny_params(9, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = TrainingBatch {
        lanes: vec![random_window(&mut rng, 6, 4, 4, true)],
    };
    assert!(matches!(
        forward(&p, &batch, &RnnState::for_params(&p, 2), Dropout::Off),
        Err(NeuralError::ShapeMismatch(_))
    ));
    let mut bad = batch.clone();
    bad.lanes[0].inputs[1].token = Some(6);
    assert!(matches!(
        forward(&p, &bad, &RnnState::for_params(&p, 1), Dropout::Off),
        Err(NeuralError::ShapeMismatch(_))
    ));
}

fn max_gradient_error(dropout: Dropout, seed: u64) -> f64 {
    let mut params = tiny_params(seed, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let batch = TrainingBatch {
        lanes: vec![random_window(&mut rng, 6, 5, 5, true), random_window(&mut rng, 6, 5, 3, false)],
    };
    let state = random_state(&mut rng, &params, 2);
    let analytic = loss_and_grads(&params, &batch, &state, dropout).unwrap().grads;
    let analytic: Vec<f64> = analytic.tensors().iter().flat_map(|(_, t)| t.to_vec()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let count = params.num_params();
    for k in 0..count {
        let nudge = |p: &mut NetworkParams, delta: f64| {
            let mut seen = 0;
            for t in p.tensors_mut() {
                if k < seen + t.len() {
                    t[k - seen] += delta;
                    return;
                }
                seen += t.len();
            }
        };
        nudge(&mut params, h);
        let plus = loss_and_grads(&params, &batch, &state, dropout).unwrap().loss;
        nudge(&mut params, -2.0 * h);
        let minus = loss_and_grads(&params, &batch, &state, dropout).unwrap().loss;
        nudge(&mut params, h);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let worst = max_gradient_error(Dropout::Off, 21);
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn gradients_with_dropout_match_finite_differences() {
    let worst = max_gradient_error(Dropout::On { rate: 0.3, seed: 77 }, 22);
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn softmax_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let logits: Vec<f64> = (0..20).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let q = softmax(&logits);
        assert!(q.iter().all(|&x| x >= 0.0));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

fn toy_streams(rng: &mut ChaCha8Rng, n: usize) -> Vec<bandsmith_core::dataset::TokenStream> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(5..15);
            let w = random_window(rng, 6, len, len, true);
            bandsmith_core::dataset::TokenStream {
                inputs: w.inputs,
                targets: w.targets,
            }
        })
        .collect()
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let train_set = toy_streams(&mut rng, 5);
    let val_set = toy_streams(&mut rng, 2);
    let config = TrainConfig {
        layers: 2,
        hidden: 8,
        window: 4,
        batch: 3,
        max_epochs: 4,
        learning_rate: 1e-2,
        seed: 7,
        ..Default::default()
    };
    let run = || {
        let params = NetworkParams::init(6, 8, 2, 0.05, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        train(params, None, &train_set, &val_set, &config, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    let strip = |log: &[EpochRecord]| log.iter().map(|r| (r.epoch, r.train_loss, r.val_loss)).collect::<Vec<_>>();
    assert_eq!(strip(&a.log), strip(&b.log));
    assert_eq!(a.best_params, b.best_params);
    assert_eq!(a.log.len(), 4);
    assert!(a.log.last().unwrap().train_loss < a.log[0].train_loss);
}

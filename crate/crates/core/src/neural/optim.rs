use serde::{Deserialize, Serialize};

use super::params::{Gradients, NetworkParams};
use super::NeuralError;

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> Result<f64, NeuralError> {
    let mut tensors = grads.tensors_mut();
    clip_global_norm(&mut tensors, max_norm)
}

pub fn clip_global_norm(tensors: &mut [&mut [f64]], max_norm: f64) -> Result<f64, NeuralError> {
    let norm = tensors
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(NeuralError::NonFiniteGradient);
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in tensors.iter_mut() {
            t.iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: NetworkParams,
    pub second_moment: NetworkParams,
    pub timestep: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            timestep: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut NetworkParams, grads: &Gradients, adam: &mut AdamState) -> Result<(), NeuralError> {
    params.ensure_same_shape(grads)?;
    params.ensure_same_shape(&adam.first_moment)?;
    adam.timestep += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = adam.config;
    let t = adam.timestep as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let grads = grads.tensors();
    let mut m = adam.first_moment.tensors_mut();
    let mut v = adam.second_moment.tensors_mut();
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[i].1;
        let (m, v) = (&mut *m[i], &mut *v[i]);
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            p[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetworkParams {
        NetworkParams::init(6, 3, 2, 0.3, 1.0, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn clip_examples() {
        let mut small = [0.3, 0.4];
        let before = small;
        assert_eq!(clip_global_norm(&mut [&mut small[..]], 1.0).unwrap(), 0.5);
        assert_eq!(small, before);

        let mut v = [3.0, 4.0];
        assert_eq!(clip_global_norm(&mut [&mut v[..]], 1.0).unwrap(), 5.0);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);

        let mut unit = [0.6, 0.8];
        let norm = clip_global_norm(&mut [&mut unit[..]], 1.0).unwrap();
        assert!((norm - 1.0).abs() < 1e-15);
        assert!((unit[0] - 0.6).abs() < 1e-15);

        let mut bad = [f64::NAN, 1.0];
        assert!(matches!(
            clip_global_norm(&mut [&mut bad[..]], 1.0),
            Err(NeuralError::NonFiniteGradient)
        ));
    }

    #[test]
    fn clip_spans_tensors() {
        let mut a = [3.0];
        let mut b = [4.0];
        clip_global_norm(&mut [&mut a[..], &mut b[..]], 1.0).unwrap();
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = tiny();
        let before = p.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        // Seed the moments so their decay is observable.
        adam.first_moment.head.bias.fill(1.0);
        adam.second_moment.head.bias.fill(1.0);
        // Step 1 with nonzero first moment would move params, so compare the
        // moments only and the weights with zero moments.
        let zeros = p.zeros_like();
        adam_step(&mut p, &zeros, &mut adam).unwrap();
        assert_eq!(adam.first_moment.head.bias[0], 0.9);
        assert_eq!(adam.second_moment.head.bias[0], 0.999);
        assert_eq!(p.layers, before.layers);
        assert_eq!(p.head.weight, before.head.weight);
        assert_eq!(adam.timestep, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = tiny();
        let before = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
        }
        let config = AdamConfig::default();
        let mut adam = AdamState::new(&p, config);
        adam_step(&mut p, &g, &mut adam).unwrap();
        for ((_, after), ((_, orig), (_, grad))) in p.tensors().iter().zip(before.tensors().iter().zip(g.tensors())) {
            for k in 0..after.len() {
                let delta = (after[k] - orig[k]).abs();
                assert!(delta <= config.learning_rate * (1.0 + 1e-6));
                if grad[k].abs() > 1e-3 {
                    assert!((delta - config.learning_rate).abs() < 1e-7 * config.learning_rate.max(1.0));
                }
                assert_eq!((after[k] - orig[k]).signum(), -grad[k].signum());
            }
        }
    }

    #[test]
    fn adam_is_deterministic_and_checks_shapes() {
        let p0 = tiny();
        let mut g = p0.zeros_like();
        g.head.bias[2] = 0.5;
        let run = || {
            let mut p = p0.clone();
            let mut adam = AdamState::new(&p, AdamConfig::default());
            for _ in 0..3 {
                adam_step(&mut p, &g, &mut adam).unwrap();
            }
            (p, adam)
        };
        assert_eq!(run(), run());
        let other = NetworkParams::zeros(6, 4, 2);
        let mut p = p0.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &other, &mut adam), Err(NeuralError::ShapeMismatch(_))));
    }
}

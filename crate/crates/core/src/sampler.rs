//! Autoregressive section generation under grammar, key and melody-gate
//! masks.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Input;
use crate::encoder::{EncodeError, EncodedSequence, FeatureVector, ScanCursor, Vocabulary};
use crate::neural::{self, LaneState, NetworkParams, NeuralError};
use crate::score::{ChannelId, Key, Score, STEPS_PER_MEASURE};

pub const MIN_SECTION_MEASURES: u32 = 4;
pub const MAX_SECTION_MEASURES: u32 = 16;
pub const DEFAULT_MAX_NOTES_PER_STEP: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("no token is allowed by the mask")]
    EmptyMask,
    #[error("no legal continuation at step {step}")]
    DeadEnd { step: u32 },
    #[error("step {step} exceeded {limit} symbols")]
    SafetyBoundExceeded { step: u32, limit: usize },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("invalid seed: {0}")]
    BadSeed(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Which steps may carry melody notes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateSchedule {
    #[default]
    AlwaysOn,
    AlwaysOff,
    /// One flag per step; cycles when the section is longer.
    Steps(Vec<bool>),
}

impl GateSchedule {
    pub fn at(&self, step: u32) -> bool {
        match self {
            GateSchedule::AlwaysOn => true,
            GateSchedule::AlwaysOff => false,
            GateSchedule::Steps(v) if v.is_empty() => true,
            GateSchedule::Steps(v) => v[step as usize % v.len()],
        }
    }

    /// Expands one flag per measure to one per step.
    pub fn from_measures(bits: &[bool]) -> Self {
        GateSchedule::Steps(
            bits.iter()
                .flat_map(|&b| std::iter::repeat_n(b, STEPS_PER_MEASURE as usize))
                .collect(),
        )
    }

    /// The gate a score actually exhibits: on wherever melody sounds.
    pub fn from_score(score: &Score) -> Self {
        GateSchedule::Steps(
            (0..score.length_steps())
                .map(|s| !score.sounding_at(ChannelId::Melody, s).is_empty())
                .collect(),
        )
    }
}

fn all_channels() -> Vec<ChannelId> {
    ChannelId::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub key: Option<Key>,
    /// Channels whose new notes must lie in `key`.
    #[serde(default = "all_channels")]
    pub key_mask_channels: Vec<ChannelId>,
    pub temperature: f64,
    /// Always take the most likely allowed token.
    pub greedy: bool,
    pub melody_gate: GateSchedule,
    pub seed: u64,
    /// Note symbols allowed per channel within one step.
    pub max_notes_per_step: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            key: None,
            key_mask_channels: all_channels(),
            temperature: 1.0,
            greedy: false,
            melody_gate: GateSchedule::AlwaysOn,
            seed: 0,
            max_notes_per_step: DEFAULT_MAX_NOTES_PER_STEP,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SampleError::InvalidConfig("temperature must be positive".into()));
        }
        if self.max_notes_per_step == 0 {
            return Err(SampleError::InvalidConfig("max_notes_per_step must be positive".into()));
        }
        Ok(())
    }

    fn key_masks(&self, channel: ChannelId) -> Option<Key> {
        self.key.filter(|_| self.key_mask_channels.contains(&channel))
    }
}

/// Tokens the grammar, key and gate allow at the cursor's position.
pub fn structural_mask(cursor: &ScanCursor, vocab: &Vocabulary, config: &GenerationConfig) -> Vec<bool> {
    let mut mask = vec![false; vocab.size()];
    let channel = cursor.channel();
    let gated_off = channel == ChannelId::Melody && !config.melody_gate.at(cursor.step());
    let room = cursor.notes_this_channel_step() < config.max_notes_per_step;
    if room && !gated_off {
        let key = config.key_masks(channel);
        for pitch in vocab.pitches() {
            if !cursor.below_last(pitch) {
                continue;
            }
            if key.is_none_or(|k| k.contains(pitch)) {
                mask[vocab.new_note_id(pitch).expect("pitch in vocabulary")] = true;
            }
            if cursor.was_sounding(pitch) {
                mask[vocab.cont_note_id(pitch).expect("pitch in vocabulary")] = true;
            }
        }
    }
    match channel {
        ChannelId::Bass => mask[vocab.nxt_step_id()] = true,
        _ => mask[vocab.nxt_chnl_id()] = true,
    }
    mask
}

/// `softmax(logits / temperature)` restricted to `mask` and renormalized.
/// Disallowed entries are exactly zero.
pub fn masked_distribution(logits: &[f64], mask: &[bool], temperature: f64) -> Result<Vec<f64>, SampleError> {
    assert_eq!(logits.len(), mask.len(), "logits and mask differ in length");
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(SampleError::EmptyMask);
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { (x / temperature - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok(probs)
}

/// Most likely allowed token; ties go to the lowest id.
pub fn greedy_choice(logits: &[f64], mask: &[bool]) -> Result<usize, SampleError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&x, &m)) in logits.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i).ok_or(SampleError::EmptyMask)
}

pub fn masked_sample<R: Rng>(
    logits: &[f64],
    mask: &[bool],
    temperature: f64,
    greedy: bool,
    rng: &mut R,
) -> Result<usize, SampleError> {
    if greedy {
        return greedy_choice(logits, mask);
    }
    let probs = masked_distribution(logits, mask, temperature)?;
    sample_index(&probs, rng)
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> Result<usize, SampleError> {
    let dist = WeightedIndex::new(probs).map_err(|_| SampleError::EmptyMask)?;
    Ok(dist.sample(rng))
}

/// What the sampler saw at one generated position.
#[derive(Debug, Clone, Copy)]
pub struct SampleEvent<'a> {
    pub step: u32,
    pub channel: ChannelId,
    pub mask: &'a [bool],
    /// Renormalized masked distribution (before any greedy choice).
    pub probs: &'a [f64],
    pub chosen: usize,
}

fn check_seed(seed: &EncodedSequence, vocab: &Vocabulary, target_steps: u32) -> Result<(), SampleError> {
    if seed.features.len() != seed.symbols.len() {
        return Err(SampleError::BadSeed("features and symbols differ in length".into()));
    }
    let mut cursor = ScanCursor::new();
    for (i, &s) in seed.symbols.iter().enumerate() {
        vocab
            .token_id(s)
            .map_err(|e| SampleError::BadSeed(format!("symbol {i}: {e}")))?;
        cursor
            .advance(s)
            .map_err(|e| SampleError::BadSeed(format!("symbol {i}: {e}")))?;
    }
    if !cursor.at_step_start() {
        return Err(SampleError::BadSeed("seed ends in the middle of a step".into()));
    }
    if cursor.step() >= target_steps {
        return Err(SampleError::BadSeed(format!(
            "seed has {} steps, section has {target_steps}",
            cursor.step()
        )));
    }
    Ok(())
}

/// Generates a section of `measures` measures, continuing `seed` if given.
///
/// `observer` is called for every sampled (not seeded) position.
pub fn generate_section_observed(
    params: &NetworkParams,
    vocab: &Vocabulary,
    seed: Option<&EncodedSequence>,
    measures: u32,
    config: &GenerationConfig,
    observer: &mut dyn FnMut(&SampleEvent),
) -> Result<EncodedSequence, SampleError> {
    config.validate()?;
    if params.vocab_size != vocab.size() {
        return Err(NeuralError::VersionMismatch(format!(
            "network has {} outputs, vocabulary has {} symbols",
            params.vocab_size,
            vocab.size()
        ))
        .into());
    }
    if !(MIN_SECTION_MEASURES..=MAX_SECTION_MEASURES).contains(&measures) {
        return Err(SampleError::InvalidConfig(format!(
            "section length must be {MIN_SECTION_MEASURES} to {MAX_SECTION_MEASURES} measures, got {measures}"
        )));
    }
    let target_steps = measures * STEPS_PER_MEASURE;
    let empty = EncodedSequence::default();
    let seed = seed.unwrap_or(&empty);
    check_seed(seed, vocab, target_steps)?;

    let features_at = |step: u32| FeatureVector::at_step(step, config.melody_gate.at(step));
    let step_limit = 3 * config.max_notes_per_step + 3;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cursor = ScanCursor::new();
    let mut lane = LaneState::for_params(params);
    let mut out = EncodedSequence::default();
    let mut step_symbols = 0usize;
    let first = seed.features.first().copied().unwrap_or_else(|| features_at(0));
    let mut input = Input {
        token: None,
        features: first.as_array(),
    };

    while cursor.step() < target_steps {
        let position = out.len();
        let (symbol, feature) = if position < seed.len() {
            neural::step(params, &input, &mut lane)?;
            (seed.symbols[position], seed.features[position])
        } else {
            let logits = neural::step(params, &input, &mut lane)?;
            let mask = structural_mask(&cursor, vocab, config);
            let probs = masked_distribution(&logits, &mask, config.temperature)
                .map_err(|_| SampleError::DeadEnd { step: cursor.step() })?;
            let chosen = if config.greedy {
                greedy_choice(&logits, &mask)?
            } else {
                sample_index(&probs, &mut rng)?
            };
            observer(&SampleEvent {
                step: cursor.step(),
                channel: cursor.channel(),
                mask: &mask,
                probs: &probs,
                chosen,
            });
            (vocab.symbol_of(chosen)?, features_at(cursor.step()))
        };
        let step_before = cursor.step();
        cursor
            .advance(symbol)
            .map_err(|_| SampleError::DeadEnd { step: step_before })?;
        step_symbols = if cursor.step() == step_before { step_symbols + 1 } else { 0 };
        if step_symbols > step_limit {
            return Err(SampleError::SafetyBoundExceeded {
                step: step_before,
                limit: step_limit,
            });
        }
        out.symbols.push(symbol);
        out.features.push(feature);
        input = Input {
            token: Some(vocab.token_id(symbol)?),
            features: feature.as_array(),
        };
    }
    Ok(out)
}

pub fn generate_section(
    params: &NetworkParams,
    vocab: &Vocabulary,
    seed: Option<&EncodedSequence>,
    measures: u32,
    config: &GenerationConfig,
) -> Result<EncodedSequence, SampleError> {
    generate_section_observed(params, vocab, seed, measures, config, &mut |_| {})
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedClip {
    /// RNG seed that reproduces this clip under the same config.
    pub seed: u64,
    pub sequence: EncodedSequence,
}

/// `count` unseeded sections; clip `i` uses rng seed `config.seed + i`.
pub fn generate_clips(
    params: &NetworkParams,
    vocab: &Vocabulary,
    count: usize,
    measures: u32,
    config: &GenerationConfig,
) -> Result<Vec<GeneratedClip>, SampleError> {
    if count == 0 {
        return Err(SampleError::InvalidConfig("clip count must be at least 1".into()));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed.wrapping_add(i);
            let config = GenerationConfig {
                seed,
                ..config.clone()
            };
            let sequence = generate_section(params, vocab, None, measures, &config)?;
            Ok(GeneratedClip { seed, sequence })
        })
        .collect()
}
